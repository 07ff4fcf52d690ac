"""Training-time augmentation: mixup, speed perturbation, and additive noise
at a target signal-to-noise ratio.

Mixup operates on feature segments and one-hot label vectors; the other two
operate on raw waveforms before feature extraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import audio
from .corpus import SP_SEPARATOR, CorpusManifest, save_manifest
from .errors import BadFactor, BatchTooSmall, SilentNoise

SPEED_FACTORS = (0.9, 1.1)

NOISE_TYPES = ("kitchen", "park", "station", "traffic", "cafeteria")


def load_noise_bank(noise_dir: str | Path) -> dict[str, np.ndarray]:
    """Read a directory of noise WAVs into {noise_type: waveform}.

    Filenames encode the noise type (e.g. ``cafeteria.wav``).  Every entry
    must be non-silent; a zero-power recording raises SilentNoise.
    """
    noise_dir = Path(noise_dir)
    bank = {}
    for path in sorted(noise_dir.glob("*.wav")):
        waveform = audio.read_wav(path)
        if not np.any(waveform):
            raise SilentNoise(f"{path.name}: noise recording has zero power")
        bank[path.stem] = waveform
    if not bank:
        raise FileNotFoundError(f"no .wav files in {noise_dir}")
    return bank


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.2
    mode: str = "beta"          # "beta" draws lambda ~ Beta(alpha, alpha),
                                # "uniform" draws lambda ~ U(0, 1)

    def __post_init__(self):
        if self.mode not in ("beta", "uniform"):
            raise ValueError(f"unknown mixup mode {self.mode!r}")
        if self.alpha <= 0:
            raise ValueError(f"mixup alpha must be positive, got {self.alpha}")


def mixup_apply(x: np.ndarray, y: np.ndarray, lam: float,
                perm: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic core of mixup: convex-combine a batch with a permutation
    of itself.

        x_tilde = lam * x + (1 - lam) * x[perm]
        y_tilde = lam * y + (1 - lam) * y[perm]

    ``y`` must be one-hot (or already soft) label rows, shape (N, n_classes).
    """
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError(f"batch size mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise BatchTooSmall(f"mixup needs at least 2 items, got {x.shape[0]}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    # The endpoints return the operands themselves so that lam 1.0 is exactly
    # the batch and lam 0.0 exactly its permutation, with no float round trip.
    if lam == 1.0:
        return x.copy(), y.copy()
    if lam == 0.0:
        return x[perm].copy(), y[perm].copy()
    x_mix = lam * x + (1.0 - lam) * x[perm]
    y_mix = lam * y + (1.0 - lam) * y[perm]
    return x_mix, y_mix


def mixup_batch(x: np.ndarray, y: np.ndarray, config: MixupConfig,
                rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, float]:
    """Sample one lambda and one pairing permutation for the whole batch,
    then mix.  Returns (x_mix, y_mix, lambda)."""
    if config.mode == "beta":
        lam = float(rng.beta(config.alpha, config.alpha))
    else:
        lam = float(rng.uniform(0.0, 1.0))
    perm = rng.permutation(x.shape[0])
    x_mix, y_mix = mixup_apply(x, y, lam, perm)
    return x_mix, y_mix, lam


def speed_perturb(waveform: np.ndarray, factor: float) -> np.ndarray:
    """Resample a waveform to ``len(waveform) / factor`` samples by linear
    interpolation, changing speed (and pitch) by ``factor``.

    factor 1.0 returns an identical copy.  Factors must be positive; the
    training recipe uses 0.9 and 1.1.
    """
    if not (isinstance(factor, (int, float)) and math.isfinite(factor)) or factor <= 0:
        raise BadFactor(f"speed factor must be a positive finite number, "
                        f"got {factor!r}")
    waveform = np.asarray(waveform, dtype=np.float64)
    if factor == 1.0:
        return waveform.copy()
    n_out = int(round(len(waveform) / factor))
    positions = np.arange(n_out, dtype=np.float64) * factor
    return np.interp(positions, np.arange(len(waveform), dtype=np.float64),
                     waveform)


def mix_noise_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float,
                     rng: np.random.Generator | None = None,
                     offset: int | None = None,
                     with_params: bool = False):
    """Add a noise recording to a clean waveform at a given SNR in dB.

    A random (or given) offset into the noise is chosen; the noise is read
    circularly so any clean length is supported.  The noise crop is scaled by

        alpha = sqrt(P_clean / (P_noise * 10**(snr_db / 10)))

    with P the mean sample power over the mixed region.  ``snr_db=math.inf``
    returns the clean signal unchanged.  Raises SilentNoise when the noise
    (or the chosen crop) has zero power.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if snr_db == math.inf:
        out = clean.copy()
        return (out, {"offset": 0, "alpha": 0.0}) if with_params else out
    if noise.size == 0 or not np.any(noise):
        raise SilentNoise("noise waveform has zero power")
    if offset is None:
        if rng is None:
            raise ValueError("provide either rng or offset")
        offset = int(rng.integers(0, len(noise)))
    idx = (offset + np.arange(len(clean))) % len(noise)
    crop = noise[idx]
    p_noise = float(np.mean(crop ** 2))
    if p_noise == 0.0:
        raise SilentNoise("noise crop has zero power")
    p_clean = float(np.mean(clean ** 2))
    alpha = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = clean + alpha * crop
    if with_params:
        return mixed, {"offset": offset, "alpha": alpha}
    return mixed


def augment_corpus_sp(manifest: CorpusManifest, out_dir: str | Path,
                      factors=SPEED_FACTORS) -> CorpusManifest:
    """Write speed-perturbed copies of every utterance and return the widened
    manifest (originals plus one copy per factor).

    Copy ids append ``#sp<factor>`` to the source id, e.g. ``u0001#sp0.9``.
    Copies inherit speaker, session, and label, so the split logic can keep
    them out of validation and test material.
    """
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio_sp"
    audio_dir.mkdir(parents=True, exist_ok=True)
    out = list(manifest.utterances)
    for utt in manifest.utterances:
        waveform = audio.read_wav(utt.audio_path)
        for factor in factors:
            stretched = speed_perturb(waveform, factor)
            copy_id = f"{utt.id}{SP_SEPARATOR}{factor}"
            path = audio_dir / f"{copy_id.replace(SP_SEPARATOR, '_sp')}.wav"
            audio.write_wav(path, stretched)
            out.append(replace(
                utt, id=copy_id, audio_path=path.resolve(),
                duration=len(stretched) / audio.SAMPLE_RATE))
    widened = CorpusManifest(corpus_id=f"{manifest.corpus_id}+sp",
                             utterances=tuple(out))
    save_manifest(widened, out_dir / f"{widened.corpus_id.replace('+', '_')}.jsonl")
    return widened
