"""Command-line front end: synth / prepare / train / eval / report.

The lifecycle is multi-stage and cache-heavy, so each stage is its own
subcommand: `synth` writes a fixture corpus, `prepare` validates a manifest
and fills the feature cache, `train` runs repeated training on a fold or a
cross-corpus split, `eval` scores a checkpoint under clean, noisy, or
adversarial conditions, and `report` re-renders tables from stored report
files.  Exit codes: 0 success, 1 runtime failure, 2 usage error.

Train and eval accept a declarative JSON experiment file via --spec; explicit
flags override its values.  Every run directory receives the fully resolved
settings as ``experiment.json``.  All outputs land under --out; inputs are
never modified.  The feature cache root can also come from the environment
variable SEROBUST_CACHE_ROOT.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .audio import read_wav
from .augment import augment_corpus_sp, load_noise_bank
from .corpus import (CorpusManifest, crosscorpus_split, load_manifest,
                     loso_folds, merge_manifests, save_manifest, synth_corpus,
                     synth_noise_bank)
from .errors import BadConfig, SerobustError
from .evaluation import (evaluate_adversarial, evaluate_fold, evaluate_noisy,
                         read_report, render_confusion, render_report,
                         summarize, test_read_leaks, write_report)
from .features import FeatureCache
from .figures import (save_confusion_figure, save_history_figure,
                      save_snr_figure)
from .network import ARCHITECTURES, ModelConfig
from .training import (AUGMENTATIONS, TrainConfig, config_hash,
                       load_checkpoint, repeat_runs, save_checkpoint,
                       write_history)

CACHE_ENV = "SEROBUST_CACHE_ROOT"
DEFAULT_SNRS = "clean,0,10,20"

#: fallback values for flags that may also come from a --spec file; the
#: argparse defaults are None so explicit flags can be told apart
SPEC_DEFAULTS = {
    "variant": "proposed",
    "augment": "none",
    "epochs": 200,
    "batch_size": 32,
    "repeats": 1,
    "seed": 0,
    "mixup_alpha": 0.2,
    "val_fraction": 0.3,
    "fold": None,
    "harness": "clean",
    "method": "fgsm",
    "eps": 0.08,
    "steps": 10,
    "snr": DEFAULT_SNRS,
}

_SPEC_TYPES = {
    "variant": str, "augment": str, "epochs": int, "batch_size": int,
    "repeats": int, "seed": int, "mixup_alpha": (int, float), "fold": str,
    "val_fraction": (int, float), "harness": str, "method": str,
    "eps": (int, float), "steps": int, "snr": str,
}


def load_experiment_spec(path: str | Path) -> dict:
    """Parse and schema-check a declarative experiment file."""
    with open(path, encoding="utf-8") as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as e:
            raise BadConfig(f"{path}: not valid JSON ({e})") from e
    if not isinstance(spec, dict):
        raise BadConfig(f"{path}: expected a JSON object at the top level")
    for key, value in spec.items():
        if key not in _SPEC_TYPES:
            raise BadConfig(f"{path}: unknown key {key!r}; valid keys are "
                            f"{sorted(_SPEC_TYPES)}")
        if value is not None and not isinstance(value, _SPEC_TYPES[key]):
            raise BadConfig(f"{path}: key {key!r} must be "
                            f"{_SPEC_TYPES[key]}, got {type(value).__name__}")
    return spec


def _resolve_args(args, keys) -> None:
    """Fill unset (None) flags from the --spec file, then from defaults."""
    spec = load_experiment_spec(args.spec) if getattr(args, "spec", None) else {}
    for key in keys:
        if getattr(args, key) is None:
            value = spec.get(key)
            setattr(args, key, SPEC_DEFAULTS[key] if value is None else value)
    if args.variant is not None and args.variant not in ARCHITECTURES:
        raise BadConfig(f"unknown variant {args.variant!r}; valid: "
                        f"{', '.join(ARCHITECTURES)}")
    if getattr(args, "augment", None) is not None \
            and args.augment not in AUGMENTATIONS:
        raise BadConfig(f"unknown augmentation {args.augment!r}; valid: "
                        f"{', '.join(AUGMENTATIONS)}")


def _cache_for(args, manifest_path: Path) -> FeatureCache:
    """Cache root precedence: --cache flag, then $SEROBUST_CACHE_ROOT/<stem>,
    then a `feature_cache` directory next to the manifest."""
    import os

    if getattr(args, "cache", None):
        root = Path(args.cache)
    elif os.environ.get(CACHE_ENV):
        root = Path(os.environ[CACHE_ENV]) / manifest_path.stem
    else:
        root = manifest_path.parent / "feature_cache"
    return FeatureCache(root)


def _find_fold(manifest: CorpusManifest, fold_id: str):
    folds = loso_folds(manifest)
    for fold in folds:
        if fold.fold_id == fold_id:
            return fold
    available = ", ".join(f.fold_id for f in folds)
    raise BadConfig(f"no fold {fold_id!r}; available: {available}")


def _parse_snrs(text: str) -> list[float]:
    """Comma list like "clean,0,10,20"; "clean" means no noise (inf dB)."""
    out = []
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if token.lower() == "clean":
            out.append(math.inf)
        else:
            try:
                out.append(float(token))
            except ValueError:
                raise BadConfig(f"bad SNR value {token!r} in {text!r}")
    if not out:
        raise BadConfig(f"no SNR values in {text!r}")
    return out


def _load_noise(path: str) -> dict[str, np.ndarray]:
    """A directory is read as a noise bank; a file as a single-entry bank."""
    p = Path(path)
    if p.is_dir():
        return load_noise_bank(p)
    return {p.stem: read_wav(p)}


def _write_resolved(out_dir: Path, settings: dict) -> Path:
    path = out_dir / "experiment.json"
    path.write_text(json.dumps(settings, sort_keys=True, indent=2) + "\n",
                    encoding="utf-8")
    return path


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"refusing to overwrite non-empty directory {out} "
              f"(pass --force to override)", file=sys.stderr)
        return 1
    manifest = synth_corpus(args.speakers, args.utts, args.seed, out,
                            corpus_id=args.corpus_id)
    print(f"wrote {len(manifest.utterances)} utterances under {out}")
    if args.noise:
        paths = synth_noise_bank(args.seed, out / "noise")
        print(f"wrote {len(paths)} noise files under {out / 'noise'}")
    return 0


def cmd_prepare(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path, check_audio=True)
    if args.augment_sp:
        if not args.out:
            raise BadConfig("--augment-sp needs --out for the widened corpus")
        out = Path(args.out)
        manifest = augment_corpus_sp(manifest, out)
        manifest_path = save_manifest(manifest, out / "manifest.jsonl")
        print(f"widened corpus to {len(manifest.utterances)} utterances; "
              f"manifest at {manifest_path}")
    cache = _cache_for(args, manifest_path)
    fresh = cache.build(manifest)
    if fresh == 0:
        print(f"cache hit: all {len(manifest.utterances)} utterances already "
              f"cached at {cache.root}")
    else:
        print(f"extracted features for {fresh} utterances into {cache.root}")
    return 0


def cmd_train(args) -> int:
    _resolve_args(args, ["variant", "augment", "epochs", "batch_size",
                         "repeats", "seed", "mixup_alpha", "val_fraction",
                         "fold"])
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    model_config = ModelConfig.for_arch(args.variant, seed=args.seed)
    train_config = TrainConfig(batch_size=args.batch_size,
                               max_epochs=args.epochs,
                               repeats=args.repeats,
                               augmentation=args.augment,
                               mixup_alpha=args.mixup_alpha,
                               seed=args.seed)

    if args.test_manifest:
        test_manifest = load_manifest(Path(args.test_manifest))
        fold = crosscorpus_split(manifest, test_manifest,
                                 args.val_fraction, args.seed)
        work_manifest = merge_manifests(manifest, test_manifest)
    else:
        fold_id = args.fold or loso_folds(manifest)[0].fold_id
        fold = _find_fold(manifest, fold_id)
        work_manifest = manifest

    cache = _cache_for(args, manifest_path)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(model_config)
    run_seeds = [train_config.seed + r for r in range(train_config.repeats)]
    _write_resolved(out, {
        "command": "train",
        "variant": args.variant,
        "model_config": model_config.to_dict(),
        "config_hash": chash,
        "train_config": {
            "batch_size": train_config.batch_size,
            "max_epochs": train_config.max_epochs,
            "lr": train_config.lr,
            "plateau_patience": train_config.plateau_patience,
            "halt_patience": train_config.halt_patience,
            "repeats": train_config.repeats,
            "augmentation": train_config.augmentation,
            "mixup_alpha": train_config.mixup_alpha,
            "mixup_mode": train_config.mixup_mode,
            "train_hop": train_config.train_hop,
            "eval_hop": train_config.eval_hop,
            "seed": train_config.seed,
        },
        "run_seeds": run_seeds,
        "fold_id": fold.fold_id,
        "manifest": str(manifest_path),
        "test_manifest": args.test_manifest,
        "cache": str(cache.root),
        "cache_params": cache.params,
        "deterministic": bool(args.deterministic),
    })

    def evaluate(model):
        leaks = test_read_leaks(cache, fold)
        if leaks:
            raise SerobustError(
                f"training read test-set features: {', '.join(leaks[:5])}")
        report = evaluate_fold(model, cache, work_manifest, fold)
        cache.reset_read_counts()
        return report

    cache.reset_read_counts()
    try:
        reports, summaries, models, states = repeat_runs(
            model_config, train_config, fold, work_manifest, cache, evaluate)
    except KeyError as e:
        raise SerobustError(f"no cached features for utterance {e}; "
                            f"run `prepare` first") from e

    for r, (model, state) in enumerate(zip(models, states)):
        suffix = "" if r == 0 else f".run{r}"
        save_checkpoint(out / f"checkpoint{suffix}.ckpt", model, extra={
            "fold_id": fold.fold_id,
            "seed": run_seeds[r],
            "best_epoch": state.best_epoch,
            "best_val_acc": state.best_val_acc,
        })
        write_history(out / f"history{suffix}.jsonl", state,
                      run_seed=run_seeds[r], config_hash=chash)
    save_history_figure(states[0].history, out / "history.png")

    report_path = out / "report.jsonl"
    with open(report_path, "w", encoding="utf-8") as fh:
        for r, rep in enumerate(reports):
            rec = rep.to_record(run_seed=run_seeds[min(r, len(run_seeds) - 1)],
                                config_hash=chash, variant=args.variant)
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        for s in summaries:
            fh.write(json.dumps(s.to_record(config_hash=chash,
                                            variant=args.variant),
                                sort_keys=True) + "\n")

    save_confusion_figure(summaries[0], out / "confusion.png")
    table = render_report(summaries,
                          title=f"{args.variant} on {fold.fold_id} "
                                f"(augment={args.augment})")
    (out / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"artifacts under {out}")
    return 0


def cmd_eval(args) -> int:
    _resolve_args(args, ["variant", "seed", "harness", "method", "eps",
                         "steps", "snr", "fold"])
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        print(f"checkpoint not found: {ckpt_path}", file=sys.stderr)
        return 1
    model, extra = load_checkpoint(ckpt_path)
    extra = extra or {}
    manifest_path = Path(args.manifest)
    manifest = load_manifest(manifest_path)
    fold_id = args.fold or extra.get("fold_id")
    if not fold_id:
        raise BadConfig("no --fold given and the checkpoint records none")
    fold = _find_fold(manifest, fold_id)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    chash = config_hash(model.config)
    run_seed = extra.get("seed")
    _write_resolved(out, {
        "command": "eval",
        "checkpoint": str(ckpt_path),
        "config_hash": chash,
        "harness": args.harness,
        "fold_id": fold.fold_id,
        "manifest": str(manifest_path),
        "method": args.method,
        "eps": args.eps,
        "steps": args.steps,
        "snr": args.snr,
        "seed": args.seed,
        "run_seed": run_seed,
        "deterministic": bool(args.deterministic),
    })

    if args.harness == "clean":
        cache = _cache_for(args, manifest_path)
        runs = [evaluate_fold(model, cache, manifest, fold)]
    elif args.harness == "noise":
        if not args.noise:
            raise BadConfig("the noise harness needs --noise (file or dir)")
        bank = _load_noise(args.noise)
        snrs = _parse_snrs(args.snr)
        runs = evaluate_noisy(model, manifest, fold, bank, snrs,
                              seed=args.seed)
    else:
        cache = _cache_for(args, manifest_path)
        runs = [evaluate_adversarial(model, cache, manifest, fold,
                                     attack=args.method, epsilon=args.eps,
                                     steps=args.steps)]

    summaries = [summarize([r]) for r in runs]
    write_report(out / "report.jsonl", runs, summaries,
                 config_hash=chash, run_seed=run_seed)
    save_confusion_figure(runs[0], out / "confusion.png")
    if args.harness == "noise":
        pairs = [(dict(r.params)["snr_db"], r.uar) for r in runs]
        snr_vals = [math.inf if s is None else s for s, _ in pairs]
        save_snr_figure({model.config.arch: (snr_vals,
                                             [u for _, u in pairs])},
                        out / "snr.png")
    table = render_report(summaries,
                          title=f"{model.config.arch} on {fold.fold_id} "
                                f"({args.harness})")
    (out / "table.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"artifacts under {out}")
    return 0


def cmd_report(args) -> int:
    runs, summaries = read_report(args.report)
    if not summaries:
        by_condition: dict[str, list] = {}
        for r in runs:
            by_condition.setdefault(r.condition, []).append(r)
        summaries = [summarize(group) for group in by_condition.values()]
    if not summaries:
        raise BadConfig(f"{args.report}: no records to render")
    table = render_report(summaries, title=args.title)
    print(table, end="")
    if runs:
        print()
        print(render_confusion(runs[0]), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(table, encoding="utf-8")
        save_confusion_figure(summaries[0], out / "confusion.png")
        print(f"artifacts under {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="serobust",
        description="Speech emotion recognition experiments: synthetic "
                    "corpora, feature caching, training, and robustness "
                    "evaluation.")
    parser.add_argument("--workers", type=int, default=1,
                        help="intra-op thread budget (default 1, keeps "
                             "runs deterministic)")
    parser.add_argument("--deterministic", action="store_true",
                        help="force deterministic backend kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fixture corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--utts", type=int, default=40,
                   help="utterances per speaker")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--corpus-id", default="synth")
    p.add_argument("--noise", action="store_true",
                   help="also generate the noise bank")
    p.add_argument("--force", action="store_true",
                   help="allow writing into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare",
                       help="validate a manifest and build the feature cache")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", help="feature cache root")
    p.add_argument("--augment-sp", action="store_true",
                   help="write speed-perturbed copies and a widened manifest")
    p.add_argument("--out", help="output directory for --augment-sp")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one variant on one fold")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="declarative experiment JSON; flags win")
    p.add_argument("--variant", choices=ARCHITECTURES, default=None)
    p.add_argument("--augment", choices=AUGMENTATIONS, default=None)
    p.add_argument("--fold", default=None,
                   help="held-out speaker id (default: first fold)")
    p.add_argument("--test-manifest", default=None,
                   help="evaluate cross-corpus on this manifest instead of "
                        "a held-out speaker")
    p.add_argument("--val-fraction", type=float, default=None, dest="val_fraction")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None, dest="batch_size")
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--mixup-alpha", type=float, default=None, dest="mixup_alpha")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="declarative experiment JSON; flags win")
    p.add_argument("--harness", choices=("clean", "noise", "attack"),
                   default=None)
    p.add_argument("--fold", default=None,
                   help="held-out speaker id (default: from the checkpoint)")
    p.add_argument("--noise", default=None,
                   help="noise bank directory or a single noise WAV")
    p.add_argument("--snr", default=None,
                   help=f"comma list of SNRs in dB, 'clean' allowed "
                        f"(default {DEFAULT_SNRS})")
    p.add_argument("--method", choices=("fgsm", "bim"), default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variant", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render tables from a report file")
    p.add_argument("report", help="path to a report.jsonl")
    p.add_argument("--title", default="UAR by condition")
    p.add_argument("--out", help="also write table.txt and confusion.png here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.workers))
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (SerobustError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
