"""Robust speech emotion recognition: dense-conv/LSTM/highway models with
augmentation, noise, adversarial, and cross-corpus evaluation harnesses."""

from .corpus import (EMOTIONS, IEMOCAP_LABEL_SCHEME, LABEL_TO_INDEX,
                     CorpusManifest, FoldSpec, Utterance, crosscorpus_split,
                     load_manifest, loso_folds, map_labels, merge_manifests,
                     save_manifest, synth_corpus, synth_noise_bank)
from .features import (EVAL_HOP, SEGMENT_FRAMES, TRAIN_HOP, FeatureCache,
                       Normalizer, log_spectrogram, segment_features)
from .augment import (MixupConfig, augment_corpus_sp, load_noise_bank,
                      mix_noise_at_snr, mixup_apply, mixup_batch,
                      speed_perturb)
from .network import (ModelConfig, build_model, count_parameters,
                      loss_and_grads, soft_cross_entropy)
from .attacks import bim, fgsm
from .training import (AUGMENTATIONS, ScheduleState, TrainConfig,
                       TrainState, config_hash, load_checkpoint,
                       repeat_runs, save_checkpoint, schedule_step,
                       train_fold, write_history)
from .evaluation import (EvalReport, SummaryReport, evaluate_adversarial,
                         evaluate_fold, evaluate_noisy, read_report,
                         render_report, summarize, uar, uar_from_confusion,
                         write_report)

__version__ = "0.1.0"

__all__ = [
    "EMOTIONS", "IEMOCAP_LABEL_SCHEME", "LABEL_TO_INDEX",
    "CorpusManifest", "FoldSpec", "Utterance",
    "crosscorpus_split", "load_manifest", "loso_folds", "map_labels",
    "merge_manifests", "save_manifest", "synth_corpus", "synth_noise_bank",
    "EVAL_HOP", "SEGMENT_FRAMES", "TRAIN_HOP",
    "FeatureCache", "Normalizer", "log_spectrogram", "segment_features",
    "MixupConfig", "augment_corpus_sp", "load_noise_bank", "mix_noise_at_snr",
    "mixup_apply", "mixup_batch", "speed_perturb",
    "ModelConfig", "build_model", "count_parameters", "loss_and_grads",
    "soft_cross_entropy",
    "bim", "fgsm",
    "AUGMENTATIONS", "ScheduleState", "TrainConfig", "TrainState",
    "config_hash", "load_checkpoint", "repeat_runs", "save_checkpoint",
    "schedule_step", "train_fold", "write_history",
    "EvalReport", "SummaryReport", "evaluate_adversarial", "evaluate_fold",
    "evaluate_noisy", "read_report", "render_report", "summarize", "uar",
    "uar_from_confusion", "write_report",
]
