"""Utterance-level evaluation: posterior averaging over segments, unweighted
average recall, confusion matrices, noisy and adversarial test conditions,
multi-run summaries, and report rendering.

The primary metric is UAR (mean of per-class recalls), which weights the four
emotion classes equally regardless of their utterance counts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import attacks, audio
from .corpus import EMOTIONS, N_CLASSES, CorpusManifest, FoldSpec
from .errors import EmptyList, MissingClass
from .features import EVAL_HOP, log_spectrogram, segment_features
from .network import evaluation_mode


def confusion_matrix(y_true, y_pred, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts with true labels as rows and predicted labels as columns."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.size == 0:
        raise EmptyList("cannot build a confusion matrix from zero items")
    if y_true.shape != y_pred.shape:
        raise ValueError(f"shape mismatch: {y_true.shape} vs {y_pred.shape}")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def uar_from_confusion(cm: np.ndarray) -> float:
    """Unweighted average recall.  Every class must have true examples."""
    cm = np.asarray(cm)
    support = cm.sum(axis=1)
    missing = np.flatnonzero(support == 0)
    if missing.size:
        names = ", ".join(EMOTIONS[i] if i < len(EMOTIONS) else str(i)
                          for i in missing)
        raise MissingClass(f"no true examples for class(es): {names}")
    return float(np.mean(np.diag(cm) / support))


def uar(y_true, y_pred, n_classes: int = N_CLASSES) -> float:
    return uar_from_confusion(confusion_matrix(y_true, y_pred, n_classes))


def _flatten_confusion(nested) -> list[int]:
    """Row-major flat list, the on-disk form of a confusion matrix."""
    return [int(v) for row in nested for v in row]


def _nest_confusion(flat, n_classes: int) -> tuple[tuple[int, ...], ...]:
    flat = list(flat)
    if len(flat) != n_classes * n_classes:
        raise ValueError(f"confusion has {len(flat)} entries, "
                         f"expected {n_classes * n_classes}")
    return tuple(tuple(int(v) for v in flat[i * n_classes:(i + 1) * n_classes])
                 for i in range(n_classes))


@dataclass(frozen=True)
class EvalReport:
    fold_id: str
    condition: str
    n_utterances: int
    accuracy: float
    uar: float
    per_class_recall: tuple[float, ...]
    confusion: tuple[tuple[int, ...], ...]
    #: provenance of the evaluation condition (attack settings, SNR, ...),
    #: stored as sorted (key, value) pairs so reports stay hashable
    params: tuple[tuple[str, object], ...] = ()

    @classmethod
    def from_predictions(cls, fold_id: str, condition: str, y_true, y_pred,
                         params: dict | None = None) -> "EvalReport":
        cm = confusion_matrix(y_true, y_pred)
        support = cm.sum(axis=1)
        recalls = tuple(float(cm[i, i] / support[i]) if support[i] else 0.0
                        for i in range(cm.shape[0]))
        return cls(
            fold_id=fold_id,
            condition=condition,
            n_utterances=int(cm.sum()),
            accuracy=float(np.trace(cm) / cm.sum()),
            uar=uar_from_confusion(cm),
            per_class_recall=recalls,
            confusion=tuple(tuple(int(v) for v in row) for row in cm),
            params=tuple(sorted((params or {}).items())),
        )

    def to_record(self, **extra) -> dict:
        rec = {
            "record": "run",
            "fold_id": self.fold_id,
            "condition": self.condition,
            "n_utterances": self.n_utterances,
            "accuracy": self.accuracy,
            "uar": self.uar,
            "per_class_recall": list(self.per_class_recall),
            "confusion": _flatten_confusion(self.confusion),
            "params": {k: v for k, v in self.params},
        }
        rec.update(extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "EvalReport":
        n = len(rec["per_class_recall"])
        return cls(
            fold_id=rec["fold_id"],
            condition=rec["condition"],
            n_utterances=rec["n_utterances"],
            accuracy=rec["accuracy"],
            uar=rec["uar"],
            per_class_recall=tuple(rec["per_class_recall"]),
            confusion=_nest_confusion(rec["confusion"], n),
            params=tuple(sorted(rec.get("params", {}).items())),
        )


@dataclass(frozen=True)
class SummaryReport:
    fold_id: str
    condition: str
    n_runs: int
    mean_uar: float
    std_uar: float
    mean_accuracy: float
    std_accuracy: float
    run_uars: tuple[float, ...]
    confusion: tuple[tuple[int, ...], ...]

    def to_record(self, **extra) -> dict:
        rec = {
            "record": "summary",
            "fold_id": self.fold_id,
            "condition": self.condition,
            "n_runs": self.n_runs,
            "mean_uar": self.mean_uar,
            "std_uar": self.std_uar,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
            "run_uars": list(self.run_uars),
            "confusion": _flatten_confusion(self.confusion),
            "n_classes": len(self.confusion),
        }
        rec.update(extra)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "SummaryReport":
        return cls(
            fold_id=rec["fold_id"],
            condition=rec["condition"],
            n_runs=rec["n_runs"],
            mean_uar=rec["mean_uar"],
            std_uar=rec["std_uar"],
            mean_accuracy=rec["mean_accuracy"],
            std_accuracy=rec["std_accuracy"],
            run_uars=tuple(rec["run_uars"]),
            confusion=_nest_confusion(rec["confusion"], rec["n_classes"]),
        )


def summarize(reports: list[EvalReport]) -> SummaryReport:
    """Mean and population std of UAR/accuracy over repeated runs; confusion
    matrices are summed."""
    if not reports:
        raise EmptyList("cannot summarize zero reports")
    uars = np.array([r.uar for r in reports])
    accs = np.array([r.accuracy for r in reports])
    cm = np.sum([np.array(r.confusion) for r in reports], axis=0)
    conditions = {r.condition for r in reports}
    folds = {r.fold_id for r in reports}
    if len(conditions) != 1 or len(folds) != 1:
        raise ValueError("summaries mix conditions or folds: "
                         f"{sorted(conditions)}, {sorted(folds)}")
    return SummaryReport(
        fold_id=reports[0].fold_id,
        condition=reports[0].condition,
        n_runs=len(reports),
        mean_uar=float(uars.mean()),
        std_uar=float(uars.std()),
        mean_accuracy=float(accs.mean()),
        std_accuracy=float(accs.std()),
        run_uars=tuple(float(u) for u in uars),
        confusion=tuple(tuple(int(v) for v in row) for row in cm),
    )


def _batched_posteriors(model, segments: np.ndarray,
                        batch_size: int = 32) -> np.ndarray:
    dtype = next(model.parameters()).dtype
    outputs = []
    with evaluation_mode(model):
        for i in range(0, len(segments), batch_size):
            x = torch.as_tensor(segments[i:i + batch_size], dtype=dtype)
            outputs.append(model(x).cpu().numpy().astype(np.float64))
    return np.concatenate(outputs, axis=0)


def posteriors_from_features(model, feature_arrays: list[np.ndarray],
                             normalizer=None, hop: int = EVAL_HOP,
                             batch_size: int = 32) -> np.ndarray:
    """Mean class posterior per utterance given raw (n_bins, n_frames) arrays.

    Each utterance is normalized, cut into segments, scored, and its segment
    posteriors are averaged.  Returns (n_utterances, n_classes).
    """
    if not feature_arrays:
        raise EmptyList("no utterances to score")
    normalizer = normalizer if normalizer is not None else model.normalizer
    if normalizer is None:
        raise ValueError("model has no attached normalizer and none was given")
    segments = []
    owner = []
    for i, feats in enumerate(feature_arrays):
        segs = segment_features(normalizer.apply(feats), hop)
        segments.append(segs)
        owner.extend([i] * len(segs))
    flat = np.concatenate(segments, axis=0)
    owner = np.asarray(owner)
    post = _batched_posteriors(model, flat, batch_size)
    out = np.zeros((len(feature_arrays), post.shape[1]))
    for i in range(len(feature_arrays)):
        out[i] = post[owner == i].mean(axis=0)
    return out


def utterance_posteriors(model, cache, utt_ids, normalizer=None,
                         hop: int = EVAL_HOP, batch_size: int = 32) -> np.ndarray:
    feats = [cache.get(utt_id) for utt_id in utt_ids]
    return posteriors_from_features(model, feats, normalizer, hop, batch_size)


def evaluate_fold(model, cache, manifest: CorpusManifest, fold: FoldSpec,
                  condition: str = "clean", hop: int = EVAL_HOP,
                  batch_size: int = 32) -> EvalReport:
    """Clean-test evaluation of a trained model on a fold's test utterances."""
    ids = list(fold.test_utterances)
    if not ids:
        raise EmptyList(f"fold {fold.fold_id} has no test utterances")
    post = utterance_posteriors(model, cache, ids, hop=hop,
                                batch_size=batch_size)
    y_true = [manifest.label_index(i) for i in ids]
    y_pred = post.argmax(axis=1)
    return EvalReport.from_predictions(fold.fold_id, condition, y_true, y_pred)


def evaluate_noisy(model, manifest: CorpusManifest, fold: FoldSpec,
                   noise_bank, snrs, seed: int = 0,
                   batch_size: int = 32) -> list[EvalReport]:
    """Evaluate under additive noise at each SNR (dB; math.inf means clean).

    ``noise_bank`` maps noise names to waveforms (a single bare waveform is
    also accepted).  For every (utterance, snr) pair a noise type and a
    circular offset are drawn from a generator seeded with (seed, snr index,
    utterance index), so the exact mixtures are reproducible.  Noise is mixed
    into the raw test waveforms, features are re-extracted, and the fold's
    training-time normalizer is applied unchanged.
    """
    from .augment import mix_noise_at_snr

    if isinstance(noise_bank, np.ndarray):
        noise_bank = {"noise": noise_bank}
    if not noise_bank:
        raise EmptyList("noise bank is empty")
    names = sorted(noise_bank)
    ids = list(fold.test_utterances)
    if not ids:
        raise EmptyList(f"fold {fold.fold_id} has no test utterances")
    y_true = [manifest.label_index(i) for i in ids]
    waves = {i: audio.read_wav(manifest.by_id(i).audio_path) for i in ids}
    reports = []
    for snr_idx, snr in enumerate(snrs):
        feats = []
        for utt_idx, utt_id in enumerate(ids):
            rng = np.random.default_rng([seed, snr_idx, utt_idx])
            noise = noise_bank[names[int(rng.integers(len(names)))]]
            mixed = mix_noise_at_snr(waves[utt_id], noise, snr, rng=rng)
            feats.append(log_spectrogram(mixed))
        post = posteriors_from_features(model, feats, batch_size=batch_size)
        y_pred = post.argmax(axis=1)
        name = "clean" if snr == math.inf else f"snr{snr:+g}dB"
        params = {"snr_db": None if snr == math.inf else float(snr),
                  "seed": seed}
        reports.append(EvalReport.from_predictions(fold.fold_id, name,
                                                   y_true, y_pred, params))
    return reports


def evaluate_adversarial(model, cache, manifest: CorpusManifest,
                         fold: FoldSpec, attack: str = "fgsm",
                         epsilon: float = attacks.EPSILON_DEFAULT,
                         steps: int = attacks.BIM_STEPS_DEFAULT,
                         batch_size: int = 32) -> EvalReport:
    """Evaluate against white-box perturbations of the normalized segments."""
    if attack not in ("fgsm", "bim"):
        raise ValueError(f"unknown attack {attack!r}")
    ids = list(fold.test_utterances)
    if not ids:
        raise EmptyList(f"fold {fold.fold_id} has no test utterances")
    normalizer = model.normalizer
    if normalizer is None:
        raise ValueError("model has no attached normalizer")
    segments, owner, seg_labels = [], [], []
    y_true = []
    for i, utt_id in enumerate(ids):
        label = manifest.label_index(utt_id)
        y_true.append(label)
        segs = segment_features(normalizer.apply(cache.get(utt_id)), EVAL_HOP)
        segments.append(segs)
        owner.extend([i] * len(segs))
        seg_labels.extend([label] * len(segs))
    flat = np.concatenate(segments, axis=0)
    owner = np.asarray(owner)
    seg_labels = np.asarray(seg_labels)

    adv_chunks = []
    for i in range(0, len(flat), batch_size):
        chunk, labels = flat[i:i + batch_size], seg_labels[i:i + batch_size]
        if attack == "fgsm":
            adv_chunks.append(attacks.fgsm(model, chunk, labels, epsilon))
        else:
            adv_chunks.append(attacks.bim(model, chunk, labels, epsilon,
                                          steps=steps))
    adv = np.concatenate(adv_chunks, axis=0)
    post = _batched_posteriors(model, adv, batch_size)
    mean_post = np.zeros((len(ids), post.shape[1]))
    for i in range(len(ids)):
        mean_post[i] = post[owner == i].mean(axis=0)
    y_pred = mean_post.argmax(axis=1)
    name = attack if attack == "fgsm" else f"bim{steps}"
    params = {"method": attack, "epsilon": float(epsilon)}
    if attack == "bim":
        params["steps"] = int(steps)
        params["step_size"] = float(epsilon) / 5.0
    return EvalReport.from_predictions(fold.fold_id, f"{name}@eps{epsilon:g}",
                                       y_true, y_pred, params)


def test_read_leaks(cache, fold: FoldSpec) -> list[str]:
    """Test utterances whose cached features were read, e.g. during training.

    Reset the cache's read counter before training, call this before any
    evaluation touches the cache, and expect an empty list.
    """
    return [utt_id for utt_id in fold.test_utterances
            if cache.reads.get(utt_id, 0) > 0]


# -- rendering -----------------------------------------------------------------

def format_cell(mean: float, std: float) -> str:
    """Percent cell in `mean ± std` form, one decimal each."""
    return f"{mean * 100:.1f} ± {std * 100:.1f}"


def render_report(summaries: list[SummaryReport],
                  title: str = "UAR by condition") -> str:
    rows = [(s.condition, format_cell(s.mean_uar, s.std_uar),
             format_cell(s.mean_accuracy, s.std_accuracy), str(s.n_runs))
            for s in summaries]
    headers = ("condition", "UAR [%]", "accuracy [%]", "runs")
    widths = [max(len(h), *(len(r[i]) for r in rows))
              for i, h in enumerate(headers)]
    lines = [title,
             "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
             "  ".join("-" * w for w in widths)]
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def render_confusion(report: EvalReport) -> str:
    names = EMOTIONS[:len(report.confusion)]
    width = max(8, *(len(n) for n in names))
    header = " " * width + "".join(n.rjust(width) for n in names)
    lines = [f"confusion ({report.fold_id}, {report.condition}); "
             f"rows = true labels", header]
    for name, row in zip(names, report.confusion):
        lines.append(name.ljust(width)
                     + "".join(str(v).rjust(width) for v in row))
    return "\n".join(lines) + "\n"


def write_report(path: str | Path, runs: list[EvalReport],
                 summaries: list[SummaryReport] | None = None,
                 **extra) -> Path:
    """One JSON record per line: every run, then every summary."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in runs:
            fh.write(json.dumps(r.to_record(**extra), sort_keys=True) + "\n")
        for s in summaries or []:
            fh.write(json.dumps(s.to_record(**extra), sort_keys=True) + "\n")
    return path


def read_report(path: str | Path) -> tuple[list[EvalReport], list[SummaryReport]]:
    """Parse a report file back into run and summary objects."""
    runs, summaries = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("record") == "summary":
                summaries.append(SummaryReport.from_record(rec))
            else:
                runs.append(EvalReport.from_record(rec))
    return runs, summaries
