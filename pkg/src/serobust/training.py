"""Fold training: segment batching, augmentation switches, plateau
learning-rate schedule, best-on-validation checkpointing, repeated runs, and
a binary checkpoint container.

Optimization follows a fixed recipe: Adam (beta1 0.9, beta2 0.999, eps 1e-8)
starting at learning rate 1e-3.  The learning rate halves after every 5
consecutive epochs without a strict improvement of utterance-level validation
accuracy, and training halts after 20 such epochs (or at ``max_epochs``).
Validation accuracy drives the schedule and checkpoint selection; unweighted
average recall is tracked alongside for reporting only.  The model state from
the best validation epoch is what training returns.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .augment import MixupConfig, mixup_apply
from .corpus import CorpusManifest, FoldSpec, is_augmented
from .errors import (BadConfig, ConfigMismatch, DivergedTraining,
                     EmptyTrainSet, NonFiniteGradient)
from .evaluation import (confusion_matrix, evaluate_fold, summarize,
                         uar_from_confusion, utterance_posteriors)
from .features import TRAIN_HOP, EVAL_HOP, Normalizer, segment_features
from .network import ModelConfig, build_model, soft_cross_entropy

LR_INITIAL = 1e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
PLATEAU_PATIENCE = 5
HALT_PATIENCE = 20

AUGMENTATIONS = ("none", "sp", "mixup", "sp+mixup")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 200
    lr: float = LR_INITIAL
    plateau_patience: int = PLATEAU_PATIENCE
    halt_patience: int = HALT_PATIENCE
    repeats: int = 10
    augmentation: str = "none"
    mixup_alpha: float = 0.2
    mixup_mode: str = "beta"
    train_hop: int = TRAIN_HOP
    eval_hop: int = EVAL_HOP
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.repeats < 1:
            raise BadConfig("batch_size, max_epochs, repeats must be >= 1")
        if self.lr <= 0:
            raise BadConfig(f"lr must be positive, got {self.lr}")
        if self.plateau_patience < 1 or self.halt_patience < self.plateau_patience:
            raise BadConfig("need 1 <= plateau_patience <= halt_patience")
        if self.augmentation not in AUGMENTATIONS:
            raise BadConfig(f"augmentation must be one of {AUGMENTATIONS}, "
                            f"got {self.augmentation!r}")
        # Validating alpha/mode up front, even when mixup is off.
        try:
            MixupConfig(alpha=self.mixup_alpha, mode=self.mixup_mode)
        except ValueError as exc:
            raise BadConfig(str(exc)) from None

    @property
    def uses_sp(self) -> bool:
        return "sp" in self.augmentation.split("+")

    @property
    def uses_mixup(self) -> bool:
        return "mixup" in self.augmentation.split("+")


@dataclass(frozen=True)
class ScheduleState:
    """Plateau-schedule bookkeeping after some number of validation epochs."""
    lr: float
    best_val_acc: float = -math.inf
    epochs_since_improve: int = 0
    stop: bool = False


def schedule_step(state: ScheduleState, val_acc: float,
                  plateau_patience: int = PLATEAU_PATIENCE,
                  halt_patience: int = HALT_PATIENCE) -> ScheduleState:
    """Advance the plateau schedule by one validation result.

    A strict improvement resets the no-improvement counter and leaves the
    rate alone.  Otherwise the counter increments; the rate halves whenever
    it reaches a positive multiple of ``plateau_patience`` and ``stop`` turns
    on once it reaches ``halt_patience``.  The learning rate therefore stays
    an exact power-of-two fraction of its initial value.
    """
    if plateau_patience < 1 or halt_patience < plateau_patience:
        raise BadConfig("need 1 <= plateau_patience <= halt_patience")
    if val_acc > state.best_val_acc:
        return ScheduleState(lr=state.lr, best_val_acc=val_acc,
                             epochs_since_improve=0, stop=False)
    since = state.epochs_since_improve + 1
    lr = state.lr / 2.0 if since % plateau_patience == 0 else state.lr
    return ScheduleState(lr=lr, best_val_acc=state.best_val_acc,
                         epochs_since_improve=since,
                         stop=since >= halt_patience)


@dataclass(frozen=True)
class TrainState:
    history: tuple[dict, ...]
    best_epoch: int
    best_val_acc: float
    best_val_uar: float
    n_epochs_run: int
    n_train_sources: int
    n_train_segments: int
    seed: int
    wall_time_s: float


def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def _refresh_bn_stats(model, x_train: np.ndarray, batch_size: int,
                      dtype) -> None:
    """Recompute batch-norm running statistics under the current weights.

    With few optimizer steps per epoch the momentum-based running averages
    lag far behind the weights, which wrecks eval-mode predictions on small
    corpora.  This pass re-estimates the statistics as a plain average over
    the training segments (only the norm layers are put in training mode, so
    dropout stays off and no RNG state is consumed).
    """
    norms = [m for m in model.modules()
             if isinstance(m, torch.nn.BatchNorm2d)]
    if not norms:
        return
    saved = [(m.momentum, m.training) for m in norms]
    model.eval()
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
        m.train()
    with torch.no_grad():
        for i in range(0, len(x_train), batch_size):
            chunk = x_train[i:i + batch_size]
            if len(chunk) < 2:
                continue
            model.logits(torch.as_tensor(chunk, dtype=dtype))
    for m, (momentum, training) in zip(norms, saved):
        m.momentum = momentum
        m.train(training)


def _train_sources(fold: FoldSpec, config: TrainConfig) -> list[str]:
    """Training utterance ids for the fold under the augmentation switch.

    Speed-perturbed copies present in the fold's training list are used only
    when the config asks for them ("sp" or "sp+mixup"); asking for them when
    the corpus was never widened is a config error rather than a silent no-op.
    """
    originals = [i for i in fold.train_utterances if not is_augmented(i)]
    if not config.uses_sp:
        return originals
    copies = [i for i in fold.train_utterances if is_augmented(i)]
    if not copies:
        raise BadConfig(
            f"augmentation {config.augmentation!r} requested but fold "
            f"{fold.fold_id} has no speed-perturbed training copies; "
            f"widen the corpus first")
    return originals + copies


def _prepare_training_set(train_ids: list[str], manifest: CorpusManifest,
                          cache, hop: int):
    """Fit the normalizer on training features and cut training segments."""
    if not train_ids:
        raise EmptyTrainSet("no training utterances")
    raw = [cache.get(utt_id) for utt_id in train_ids]
    normalizer = Normalizer.fit(raw)
    segments, labels = [], []
    for utt_id, feats in zip(train_ids, raw):
        segs = segment_features(normalizer.apply(feats), hop)
        segments.append(segs)
        labels.extend([manifest.label_index(utt_id)] * len(segs))
    return normalizer, np.concatenate(segments, axis=0), np.asarray(labels)


def train_fold(model_config: ModelConfig, train_config: TrainConfig,
               fold: FoldSpec, manifest: CorpusManifest, cache):
    """Train one model on one fold.  Returns (model, TrainState).

    The returned model carries the weights of its best validation epoch and
    the fold's feature normalizer as ``model.normalizer``.  Validation
    accuracy is computed at the utterance level (posterior averaging over
    non-overlapping segments).  Batches with fewer than two segments are
    dropped so the mixup pairing is always defined.  A non-finite or
    exploding training loss raises DivergedTraining.
    """
    t0 = time.monotonic()
    train_ids = _train_sources(fold, train_config)
    normalizer, x_train, y_train = _prepare_training_set(
        train_ids, manifest, cache, train_config.train_hop)
    y_soft = _one_hot(y_train, model_config.n_classes)
    val_ids = list(fold.val_utterances)
    val_true = np.asarray([manifest.label_index(i) for i in val_ids])

    model = build_model(model_config)
    model.normalizer = normalizer
    optimizer = torch.optim.Adam(model.parameters(), lr=train_config.lr,
                                 betas=ADAM_BETAS, eps=ADAM_EPS)
    dtype = next(model.parameters()).dtype
    mixup = (MixupConfig(alpha=train_config.mixup_alpha,
                         mode=train_config.mixup_mode)
             if train_config.uses_mixup else None)

    rng = np.random.default_rng(train_config.seed)
    sched = ScheduleState(lr=train_config.lr)
    best_epoch = -1
    best_uar = -1.0
    best_state = None
    first_epoch_loss = None
    history = []

    with torch.random.fork_rng(devices=()):
        torch.manual_seed(train_config.seed)
        for epoch in range(1, train_config.max_epochs + 1):
            model.train()
            order = rng.permutation(len(x_train))
            losses = []
            for i in range(0, len(order), train_config.batch_size):
                idx = order[i:i + train_config.batch_size]
                if len(idx) < 2:
                    continue
                xb, yb = x_train[idx], y_soft[idx]
                if mixup is not None:
                    lam = (float(rng.beta(mixup.alpha, mixup.alpha))
                           if mixup.mode == "beta"
                           else float(rng.uniform(0.0, 1.0)))
                    xb, yb = mixup_apply(xb, yb, lam, rng.permutation(len(idx)))
                xt = torch.as_tensor(xb, dtype=dtype)
                yt = torch.as_tensor(yb, dtype=dtype)
                optimizer.zero_grad()
                loss = soft_cross_entropy(model.logits(xt), yt)
                if not torch.isfinite(loss):
                    raise DivergedTraining(
                        f"epoch {epoch}: loss is {float(loss.detach())}")
                loss.backward()
                for name, p in model.named_parameters():
                    if p.grad is not None and not torch.isfinite(p.grad).all():
                        raise NonFiniteGradient(f"epoch {epoch}: non-finite "
                                                f"gradient in {name}")
                optimizer.step()
                losses.append(float(loss.detach()))
            epoch_loss = float(np.mean(losses)) if losses else float("nan")
            if first_epoch_loss is None:
                first_epoch_loss = epoch_loss
            elif epoch_loss > max(10.0 * first_epoch_loss,
                                  first_epoch_loss + 10.0):
                raise DivergedTraining(
                    f"epoch {epoch}: training loss {epoch_loss:.3f} exploded "
                    f"from initial {first_epoch_loss:.3f}")

            _refresh_bn_stats(model, x_train, train_config.batch_size, dtype)
            post = utterance_posteriors(model, cache, val_ids,
                                        normalizer=normalizer,
                                        hop=train_config.eval_hop)
            pred = post.argmax(axis=1)
            val_acc = float(np.mean(pred == val_true))
            val_uar = uar_from_confusion(confusion_matrix(val_true, pred))

            lr_before = sched.lr
            sched = schedule_step(sched, val_acc,
                                  train_config.plateau_patience,
                                  train_config.halt_patience)
            if sched.epochs_since_improve == 0:
                best_epoch = epoch
                best_uar = val_uar
                best_state = {k: v.detach().clone()
                              for k, v in model.state_dict().items()}
            history.append({
                "epoch": epoch,
                "train_loss": epoch_loss,
                "val_acc": val_acc,
                "val_uar": val_uar,
                "lr": lr_before,
                "epochs_since_improve": sched.epochs_since_improve,
                "halved": sched.lr != lr_before,
            })
            if sched.lr != lr_before:
                for group in optimizer.param_groups:
                    group["lr"] = sched.lr
            if sched.stop:
                break

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    state = TrainState(
        history=tuple(history),
        best_epoch=best_epoch,
        best_val_acc=sched.best_val_acc,
        best_val_uar=best_uar,
        n_epochs_run=len(history),
        n_train_sources=len(train_ids),
        n_train_segments=len(x_train),
        seed=train_config.seed,
        wall_time_s=time.monotonic() - t0,
    )
    return model, state


def repeat_runs(model_config: ModelConfig, train_config: TrainConfig,
                fold: FoldSpec, manifest: CorpusManifest, cache,
                evaluate=None):
    """Run the train/evaluate cycle ``repeats`` times with seeds seed,
    seed+1, ...  Returns (reports, summaries, models, states).

    ``evaluate`` maps a trained model to one EvalReport or a list of them;
    the default is plain test-set evaluation on the fold.  Reports are
    grouped by condition and summarized as mean and standard deviation over
    the runs.
    """
    if evaluate is None:
        evaluate = lambda model: evaluate_fold(model, cache, manifest, fold)
    reports, models, states = [], [], []
    for r in range(train_config.repeats):
        run_seed = train_config.seed + r
        mc = replace(model_config, seed=run_seed)
        tc = replace(train_config, seed=run_seed)
        model, state = train_fold(mc, tc, fold, manifest, cache)
        models.append(model)
        states.append(state)
        out = evaluate(model)
        reports.extend(out if isinstance(out, list) else [out])

    by_condition: dict[str, list] = {}
    for rep in reports:
        by_condition.setdefault(rep.condition, []).append(rep)
    summaries = [summarize(group) for group in by_condition.values()]
    return reports, summaries, models, states


def write_history(path: str | Path, state: TrainState, **extra) -> Path:
    """Per-epoch JSON records, one per line, then a final `end` record."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for row in state.history:
            rec = {"record": "epoch", **row, **extra}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({
            "record": "end",
            "best_epoch": state.best_epoch,
            "best_val_acc": state.best_val_acc,
            "best_val_uar": state.best_val_uar,
            "n_epochs_run": state.n_epochs_run,
            "n_train_sources": state.n_train_sources,
            "n_train_segments": state.n_train_segments,
            "seed": state.seed,
            **extra,
        }, sort_keys=True) + "\n")
    return path


# -- checkpoint container --------------------------------------------------------

_MAGIC = b"SERCKPT1"
_LEN = struct.Struct("<I")
_DTYPES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8"),
           "<i8": np.dtype("<i8")}


def config_hash(config: ModelConfig) -> str:
    """SHA-256 of the canonical JSON form of a model config."""
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _to_numpy(tensor: torch.Tensor) -> np.ndarray:
    arr = tensor.detach().cpu().numpy()
    if arr.dtype == np.float32:
        return arr.astype("<f4")
    if arr.dtype == np.float64:
        return arr.astype("<f8")
    if arr.dtype == np.int64:
        return arr.astype("<i8")
    raise TypeError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path: str | Path, model, extra: dict | None = None) -> Path:
    """Write a self-describing binary checkpoint.

    Layout: 8-byte magic, little-endian uint32 header length, JSON header
    (model config, its SHA-256, a named-tensor table), then the raw
    little-endian tensor payload.  The feature normalizer rides along as
    float64 tensors ``normalizer/mean`` and ``normalizer/std``.  Byte output
    is a pure function of model weights, config, and ``extra``.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: dict[str, np.ndarray] = {
        name: _to_numpy(t) for name, t in model.state_dict().items()}
    if model.normalizer is not None:
        state = model.normalizer.state()
        arrays["normalizer/mean"] = state["mean"].astype("<f8")
        arrays["normalizer/std"] = state["std"].astype("<f8")

    table = []
    offset = 0
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str,
                      "shape": list(arr.shape), "offset": offset,
                      "nbytes": len(blob)})
        payload.extend(blob)
        offset += len(blob)

    header = {
        "format_version": 1,
        "config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "tensors": table,
    }
    if extra:
        header["extra"] = extra
    header_blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(_LEN.pack(len(header_blob)))
        fh.write(header_blob)
        fh.write(payload)
    return path


def load_checkpoint(path: str | Path, expected_config: ModelConfig | None = None):
    """Rebuild a model (and its normalizer) from a checkpoint file.

    Raises ConfigMismatch when the stored config hash fails verification or
    when ``expected_config`` differs from the stored config.
    """
    path = Path(path)
    blob = path.read_bytes()
    if blob[:len(_MAGIC)] != _MAGIC:
        raise ConfigMismatch(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = _LEN.unpack_from(blob, len(_MAGIC))
    header_start = len(_MAGIC) + _LEN.size
    header = json.loads(blob[header_start:header_start + header_len])
    config = ModelConfig.from_dict(header["config"])
    if config_hash(config) != header["config_hash"]:
        raise ConfigMismatch(f"{path}: config hash check failed")
    if expected_config is not None and config != expected_config:
        raise ConfigMismatch(f"{path}: checkpoint was built for {config}, "
                             f"expected {expected_config}")
    payload_start = header_start + header_len

    arrays = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        start = payload_start + entry["offset"]
        arr = np.frombuffer(blob, dtype=dtype, count=entry["nbytes"] // dtype.itemsize,
                            offset=start).reshape(entry["shape"])
        arrays[entry["name"]] = arr

    model = build_model(config)
    state = {name: torch.as_tensor(arr.copy())
             for name, arr in arrays.items()
             if not name.startswith("normalizer/")}
    model.load_state_dict(state)
    if "normalizer/mean" in arrays:
        model.normalizer = Normalizer(arrays["normalizer/mean"].copy(),
                                      arrays["normalizer/std"].copy())
    model.eval()
    return model, header.get("extra")
