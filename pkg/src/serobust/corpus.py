"""Corpus manifests, label mapping, speaker-disjoint splits, and the synthetic
fixture corpus.

A corpus is described by a manifest file with one utterance record per line
(JSON object, UTF-8) carrying the fields::

    id, speaker_id, session_id, label, audio_path, sample_rate, duration

Audio paths are stored relative to the manifest file where possible and
resolved to absolute paths on load.  The corpora this package targets are
organized as sessions of exactly two speakers; leave-one-speaker-out folds
rely on that structure.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import audio
from .errors import (
    BadSampleRate,
    BadSessionStructure,
    DuplicateId,
    LabelSetMismatch,
    ManifestError,
    MissingAudio,
    MissingField,
    UnmappedLabel,
)

EMOTIONS = ("angry", "happy", "neutral", "sad")
LABEL_TO_INDEX = {label: i for i, label in enumerate(EMOTIONS)}
N_CLASSES = len(EMOTIONS)

#: Four-class scheme merging excitement into happiness.
IEMOCAP_LABEL_SCHEME = {
    "excited": "happy",
    "happy": "happy",
    "angry": "angry",
    "neutral": "neutral",
    "sad": "sad",
}

_MANIFEST_FIELDS = ("id", "speaker_id", "session_id", "label",
                    "audio_path", "sample_rate", "duration")

#: Separator between a source utterance id and a speed-perturbation suffix.
SP_SEPARATOR = "#sp"


def source_id(utterance_id: str) -> str:
    """Strip an augmentation suffix, returning the originating utterance id."""
    return utterance_id.split(SP_SEPARATOR, 1)[0]


def is_augmented(utterance_id: str) -> bool:
    return SP_SEPARATOR in utterance_id


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker_id: str
    session_id: str
    label: str
    audio_path: Path
    sample_rate: int
    duration: float


@dataclass(frozen=True)
class CorpusManifest:
    corpus_id: str
    utterances: tuple[Utterance, ...]

    @property
    def label_set(self) -> frozenset[str]:
        return frozenset(u.label for u in self.utterances)

    def __len__(self) -> int:
        return len(self.utterances)

    def by_id(self, utterance_id: str) -> Utterance:
        try:
            return self._index[utterance_id]
        except AttributeError:
            object.__setattr__(self, "_index", {u.id: u for u in self.utterances})
            return self._index[utterance_id]

    def label_index(self, utterance_id: str) -> int:
        return LABEL_TO_INDEX[self.by_id(utterance_id).label]


@dataclass(frozen=True)
class FoldSpec:
    fold_id: str
    test_utterances: tuple[str, ...]
    val_utterances: tuple[str, ...]
    train_utterances: tuple[str, ...]


def _parse_record(line: str, lineno: int, manifest_dir: Path) -> Utterance:
    try:
        record = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: not valid JSON: {exc}") from exc
    for field in _MANIFEST_FIELDS:
        if field not in record:
            raise MissingField(f"line {lineno} (id={record.get('id', '?')}): "
                               f"missing field '{field}'")
    path = Path(record["audio_path"])
    if not path.is_absolute():
        path = (manifest_dir / path).resolve()
    if record["duration"] <= 0:
        raise ManifestError(f"record {record['id']}: duration must be positive")
    return Utterance(
        id=str(record["id"]),
        speaker_id=str(record["speaker_id"]),
        session_id=str(record["session_id"]),
        label=str(record["label"]),
        audio_path=path,
        sample_rate=int(record["sample_rate"]),
        duration=float(record["duration"]),
    )


def load_manifest(path: str | Path, corpus_id: str | None = None,
                  check_audio: bool = True) -> CorpusManifest:
    """Load and validate a manifest file.

    Raises MissingField / DuplicateId / MissingAudio / BadSampleRate naming
    the offending record.  ``corpus_id`` defaults to the file's stem.
    """
    path = Path(path)
    if not path.exists():
        raise MissingAudio(f"manifest not found: {path}")
    manifest_dir = path.resolve().parent
    utterances: list[Utterance] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            utt = _parse_record(line, lineno, manifest_dir)
            if utt.id in seen:
                raise DuplicateId(utt.id)
            seen.add(utt.id)
            if utt.sample_rate != audio.SAMPLE_RATE:
                raise BadSampleRate(f"record {utt.id}: sample_rate "
                                    f"{utt.sample_rate}, expected {audio.SAMPLE_RATE}")
            if check_audio and not utt.audio_path.exists():
                raise MissingAudio(f"record {utt.id}: audio file not found: "
                                   f"{utt.audio_path}")
            utterances.append(utt)
    return CorpusManifest(corpus_id=corpus_id or path.stem,
                          utterances=tuple(utterances))


def save_manifest(manifest: CorpusManifest, path: str | Path) -> Path:
    """Write a manifest as one JSON record per line.

    Audio paths under the manifest's directory are stored relative so the
    corpus directory stays relocatable.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    base = path.resolve().parent
    with open(path, "w", encoding="utf-8") as fh:
        for u in manifest.utterances:
            audio_path = u.audio_path
            try:
                audio_path = audio_path.relative_to(base)
            except ValueError:
                pass
            record = {
                "id": u.id,
                "speaker_id": u.speaker_id,
                "session_id": u.session_id,
                "label": u.label,
                "audio_path": str(audio_path),
                "sample_rate": u.sample_rate,
                "duration": u.duration,
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def map_labels(manifest: CorpusManifest, scheme: dict[str, str]) -> CorpusManifest:
    """Relabel every utterance through ``scheme`` (source label -> target label)."""
    mapped = []
    for u in manifest.utterances:
        if u.label not in scheme:
            raise UnmappedLabel(u.label)
        mapped.append(replace(u, label=scheme[u.label]))
    return CorpusManifest(corpus_id=manifest.corpus_id, utterances=tuple(mapped))


def _sessions(manifest: CorpusManifest) -> dict[str, dict[str, list[Utterance]]]:
    """session_id -> speaker_id -> utterances (augmented copies grouped with
    their source speaker, which they inherit anyway)."""
    out: dict[str, dict[str, list[Utterance]]] = {}
    for u in manifest.utterances:
        out.setdefault(u.session_id, {}).setdefault(u.speaker_id, []).append(u)
    return out


def loso_folds(manifest: CorpusManifest) -> list[FoldSpec]:
    """Leave-one-speaker-out folds.

    Per fold: test = one speaker's utterances, val = the same-session partner
    speaker's utterances, train = all utterances from the other sessions.
    Augmented (``#sp``) copies never enter test or val; a copy whose source
    utterance trains in a fold trains there too, and copies of test/val
    sources are dropped from that fold entirely (they carry held-out
    speakers' audio).
    """
    sessions = _sessions(manifest)
    for session_id, speakers in sessions.items():
        if len(speakers) != 2:
            raise BadSessionStructure(
                f"session {session_id} has {len(speakers)} speakers, expected 2")
    folds = []
    for session_id in sorted(sessions):
        speakers = sessions[session_id]
        for speaker_id in sorted(speakers):
            partner_id = next(s for s in speakers if s != speaker_id)
            test = [u.id for u in speakers[speaker_id] if not is_augmented(u.id)]
            val = [u.id for u in speakers[partner_id] if not is_augmented(u.id)]
            train = [u.id
                     for other_id in sorted(sessions)
                     if other_id != session_id
                     for spk in sorted(sessions[other_id])
                     for u in sessions[other_id][spk]]
            if not train:
                warnings.warn(f"fold {speaker_id}: empty training set "
                              f"(single-session corpus)", stacklevel=2)
            folds.append(FoldSpec(fold_id=speaker_id,
                                  test_utterances=tuple(test),
                                  val_utterances=tuple(val),
                                  train_utterances=tuple(train)))
    return folds


def merge_manifests(a: CorpusManifest, b: CorpusManifest) -> CorpusManifest:
    """Concatenate two corpora into one manifest (for cross-corpus folds)."""
    seen = {u.id for u in a.utterances}
    clash = [u.id for u in b.utterances if u.id in seen]
    if clash:
        raise DuplicateId(f"{clash[0]} appears in both {a.corpus_id} "
                          f"and {b.corpus_id}")
    return CorpusManifest(corpus_id=f"{a.corpus_id}+{b.corpus_id}",
                          utterances=a.utterances + b.utterances)


def crosscorpus_split(train_manifest: CorpusManifest,
                      test_manifest: CorpusManifest,
                      val_fraction: float,
                      seed: int) -> FoldSpec:
    """Train on one corpus; split the other into val/test, stratified by label.

    ``|val| == round(val_fraction * len(test_manifest))`` with per-label
    allocation by largest remainder, so every label's validation share is
    within one utterance of ``val_fraction``.  Deterministic given ``seed``.
    """
    if not 0 < val_fraction < 1:
        raise ValueError(f"val_fraction must be in (0, 1), got {val_fraction}")
    if train_manifest.label_set != test_manifest.label_set:
        raise LabelSetMismatch(
            f"{sorted(train_manifest.label_set)} != {sorted(test_manifest.label_set)}")

    by_label: dict[str, list[str]] = {}
    for u in test_manifest.utterances:
        by_label.setdefault(u.label, []).append(u.id)

    n_total = len(test_manifest)
    n_val = round(val_fraction * n_total)
    labels = sorted(by_label)
    quotas = {lab: val_fraction * len(by_label[lab]) for lab in labels}
    counts = {lab: math.floor(quotas[lab]) for lab in labels}
    remainder = n_val - sum(counts.values())
    # hand the leftover slots to the largest fractional parts
    for lab in sorted(labels, key=lambda L: quotas[L] - counts[L], reverse=True):
        if remainder <= 0:
            break
        counts[lab] += 1
        remainder -= 1

    rng = np.random.default_rng(seed)
    val_ids: list[str] = []
    test_ids: list[str] = []
    for lab in labels:
        ids = sorted(by_label[lab])
        rng.shuffle(ids)
        val_ids.extend(ids[:counts[lab]])
        test_ids.extend(ids[counts[lab]:])

    return FoldSpec(
        fold_id=f"{train_manifest.corpus_id}->{test_manifest.corpus_id}",
        test_utterances=tuple(test_ids),
        val_utterances=tuple(val_ids),
        train_utterances=tuple(u.id for u in train_manifest.utterances),
    )


# -- synthetic fixture corpus --------------------------------------------------

# Each class concentrates its harmonic energy around a band and modulates
# its amplitude at a class-specific rate.  Adjacent bands overlap, band
# edges and modulation rates jitter per utterance, and every recording
# carries its own background noise floor, so the classes are statistically
# separable without being trivially so: a trained model keeps moderate
# decision margins instead of saturating on disjoint spectral support.
_CLASS_SIGNATURES = {
    "angry": {"band": (1700.0, 3400.0), "am_range": (6.5, 11.0)},
    "happy": {"band": (1100.0, 2400.0), "am_range": (3.8, 7.0)},
    "neutral": {"band": (500.0, 1500.0), "am_range": (1.8, 4.2)},
    "sad": {"band": (150.0, 900.0), "am_range": (0.6, 2.0)},
}


def _synth_waveform(label: str, speaker_idx: int, rng: np.random.Generator,
                    duration: float, sample_rate: int) -> np.ndarray:
    sig = _CLASS_SIGNATURES[label]
    lo, hi = sig["band"]
    lo *= rng.uniform(0.80, 1.25)
    hi *= rng.uniform(0.80, 1.25)
    center = 0.5 * (lo + hi)
    spread = 0.6 * (hi - lo)
    n = int(round(duration * sample_rate))
    t = np.arange(n, dtype=np.float64) / sample_rate

    # harmonic stack: the fundamental is speaker-specific; a Gaussian
    # envelope around the (jittered) band centre shapes harmonic amplitudes
    f0 = 95.0 + 9.0 * speaker_idx + rng.uniform(-3.0, 3.0)
    wave = np.zeros(n)
    for k in range(1, int(4000.0 / f0) + 1):
        f_k = k * f0
        amp = np.exp(-(((f_k - center) / spread) ** 2)) / np.sqrt(k)
        if amp < 1e-3:
            continue
        phase = rng.uniform(0, 2 * np.pi)
        wave += amp * np.sin(2 * np.pi * f_k * t + phase)

    am_rate = rng.uniform(*sig["am_range"])
    am_phase = rng.uniform(0, 2 * np.pi)
    am = 1.0 + 0.8 * np.sin(2 * np.pi * am_rate * t + am_phase)
    wave *= am

    peak = np.max(np.abs(wave))
    if peak > 0:
        wave *= 0.35 / peak
    # per-utterance background floor, 5..12 dB below the tone complex
    floor_db = rng.uniform(5.0, 12.0)
    sigma = np.sqrt(np.mean(wave ** 2) / 10.0 ** (floor_db / 10.0))
    wave += rng.normal(0.0, sigma, size=n)
    peak = np.max(np.abs(wave))
    if peak > 1.0:
        wave *= 0.95 / peak
    return wave


def synth_corpus(n_speakers: int, utts_per_speaker: int, seed: int,
                 out_dir: str | Path, corpus_id: str = "synth") -> CorpusManifest:
    """Generate the synthetic fixture corpus: WAV files plus manifest.

    Speakers pair into two-speaker sessions (mirroring the dyadic corpora the
    splits are designed for), labels are balanced across the four classes,
    and the whole corpus is a deterministic function of ``seed``.
    """
    if n_speakers % 2 != 0:
        raise ValueError(f"n_speakers must be even, got {n_speakers}")
    out_dir = Path(out_dir)
    audio_dir = out_dir / "audio"
    audio_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    utterances = []
    counter = 0
    for speaker_idx in range(n_speakers):
        speaker_id = f"spk{speaker_idx:02d}"
        session_id = f"sess{speaker_idx // 2}"
        for j in range(utts_per_speaker):
            label = EMOTIONS[j % N_CLASSES]
            duration = float(rng.uniform(1.6, 3.0))
            wave = _synth_waveform(label, speaker_idx, rng, duration,
                                   audio.SAMPLE_RATE)
            utt_id = f"{corpus_id}_u{counter:04d}"
            counter += 1
            path = audio_dir / f"{utt_id}.wav"
            audio.write_wav(path, wave)
            utterances.append(Utterance(
                id=utt_id,
                speaker_id=speaker_id,
                session_id=session_id,
                label=label,
                audio_path=path.resolve(),
                sample_rate=audio.SAMPLE_RATE,
                duration=len(wave) / audio.SAMPLE_RATE,
            ))

    manifest = CorpusManifest(corpus_id=corpus_id, utterances=tuple(utterances))
    save_manifest(manifest, out_dir / f"{corpus_id}.jsonl")
    return manifest


# Band-limited noise colors for the fixture noise bank, one per supported
# noise type.  "cafeteria" is the broadband babble-like default used by the
# noisy-evaluation harness; its band overlaps every class signature band.
_NOISE_BANDS = {
    "kitchen": (500.0, 4000.0),
    "park": (100.0, 1000.0),
    "station": (150.0, 3000.0),
    "traffic": (60.0, 900.0),
    "cafeteria": (200.0, 3500.0),
}


def synth_noise_bank(seed: int, out_dir: str | Path,
                     duration: float = 5.0) -> dict[str, Path]:
    """Generate band-limited noise WAVs; returns name -> path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = int(round(duration * audio.SAMPLE_RATE))
    paths = {}
    for name in sorted(_NOISE_BANDS):
        lo, hi = _NOISE_BANDS[name]
        white = rng.normal(0.0, 1.0, size=n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, d=1.0 / audio.SAMPLE_RATE)
        spectrum[(freqs < lo) | (freqs > hi)] = 0.0
        shaped = np.fft.irfft(spectrum, n=n)
        shaped *= 0.25 / np.max(np.abs(shaped))
        path = out_dir / f"{name}.wav"
        audio.write_wav(path, shaped)
        paths[name] = path
    return paths
