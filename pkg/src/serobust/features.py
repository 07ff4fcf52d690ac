"""Log-spectrogram extraction, fixed-size segmentation, per-bin normalization,
and an on-disk feature cache.

Front end: 25 ms Hamming window, 10 ms hop, 512-point FFT at 16 kHz.  The DC
bin is dropped and the first 128 frequency bins are kept (31.25 Hz .. 4 kHz),
so an utterance becomes a (128, n_frames) log-magnitude array.  Models consume
(128, 256) segments, i.e. 128 bins by 2.56 s.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import Counter
from pathlib import Path

import numpy as np

from . import audio
from .errors import EmptyTrainSet, StaleCache, TooShort

WINDOW_SIZE = 400          # 25 ms at 16 kHz
HOP_SIZE = 160             # 10 ms
N_FFT = 512
N_BINS = 128               # FFT bins 1..128 inclusive, DC dropped
SEGMENT_FRAMES = 256       # 2.56 s per segment
TRAIN_HOP = 128            # 50% overlap between training segments
EVAL_HOP = 256             # non-overlapping segments at evaluation
LOG_FLOOR = 1e-10

_WINDOW = np.hamming(WINDOW_SIZE)


def frame_count(n_samples: int) -> int:
    if n_samples < WINDOW_SIZE:
        return 0
    return (n_samples - WINDOW_SIZE) // HOP_SIZE + 1


def _frames(waveform: np.ndarray) -> np.ndarray:
    """(n_frames, WINDOW_SIZE) windowed frames, float64."""
    waveform = np.asarray(waveform, dtype=np.float64)
    n = frame_count(len(waveform))
    if n == 0:
        raise TooShort(f"waveform has {len(waveform)} samples, "
                       f"need at least {WINDOW_SIZE}")
    idx = np.arange(n)[:, None] * HOP_SIZE + np.arange(WINDOW_SIZE)[None, :]
    return waveform[idx] * _WINDOW[None, :]


def stft_magnitudes(waveform: np.ndarray) -> np.ndarray:
    """Full one-sided magnitude spectrogram, shape (N_FFT//2 + 1, n_frames).

    Float64, no log, DC and Nyquist included.  The log-spectrogram features
    are a deterministic function of rows 1..N_BINS of this array.
    """
    frames = _frames(waveform)
    return np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)).T


def log_spectrogram(waveform: np.ndarray) -> np.ndarray:
    """(N_BINS, n_frames) float32 log-magnitude features.

    Row b holds FFT bin b+1, i.e. center frequency (b+1) * 16000 / 512 Hz.
    Raises TooShort when the waveform cannot fill one analysis window.
    """
    mags = stft_magnitudes(waveform)[1:N_BINS + 1, :]
    return np.log(mags + LOG_FLOOR).astype(np.float32)


def segment_starts(n_frames: int, hop: int) -> list[int]:
    """Start frames of the segments covering an utterance.

    Segments step by ``hop`` while they fit; if the final segment would leave
    trailing frames uncovered, one extra segment is placed flush with the end
    so no frames are dropped.  For n_frames < SEGMENT_FRAMES there is a single
    segment at 0 (padding happens downstream).
    """
    if hop < 1:
        raise ValueError(f"hop must be >= 1, got {hop}")
    if n_frames <= SEGMENT_FRAMES:
        return [0]
    starts = list(range(0, n_frames - SEGMENT_FRAMES + 1, hop))
    if starts[-1] + SEGMENT_FRAMES < n_frames:
        starts.append(n_frames - SEGMENT_FRAMES)
    return starts


def segment_features(features: np.ndarray, hop: int) -> np.ndarray:
    """Cut a (N_BINS, n_frames) array into (n_segments, N_BINS, 256).

    Utterances shorter than one segment are repeat-padded: the frame sequence
    is tiled until it reaches 256 frames.
    """
    n_bins, n_frames = features.shape
    if n_frames == 0:
        raise TooShort("feature array has no frames")
    if n_frames < SEGMENT_FRAMES:
        reps = -(-SEGMENT_FRAMES // n_frames)
        features = np.tile(features, (1, reps))[:, :SEGMENT_FRAMES]
        n_frames = SEGMENT_FRAMES
    starts = segment_starts(n_frames, hop)
    return np.stack([features[:, s:s + SEGMENT_FRAMES] for s in starts])


class Normalizer:
    """Per-frequency-bin mean/std computed over training frames only."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64).reshape(N_BINS, 1)
        self.std = np.asarray(std, dtype=np.float64).reshape(N_BINS, 1)
        if np.any(self.std <= 0):
            raise ValueError("normalizer std must be positive")

    @classmethod
    def fit(cls, feature_arrays) -> "Normalizer":
        """Fit from an iterable of (N_BINS, n_frames) arrays."""
        total = np.zeros(N_BINS)
        total_sq = np.zeros(N_BINS)
        count = 0
        for feats in feature_arrays:
            f = np.asarray(feats, dtype=np.float64)
            total += f.sum(axis=1)
            total_sq += (f ** 2).sum(axis=1)
            count += f.shape[1]
        if count == 0:
            raise EmptyTrainSet("cannot fit a normalizer on zero frames")
        mean = total / count
        var = np.maximum(total_sq / count - mean ** 2, 0.0)
        std = np.maximum(np.sqrt(var), 1e-8)
        return cls(mean, std)

    def apply(self, features: np.ndarray) -> np.ndarray:
        out = (np.asarray(features, dtype=np.float64) - self.mean) / self.std
        return out.astype(np.float32)

    def state(self) -> dict[str, np.ndarray]:
        return {"mean": self.mean.ravel().copy(), "std": self.std.ravel().copy()}

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(self.mean.tobytes())
        h.update(self.std.tobytes())
        return h.hexdigest()

    def __eq__(self, other):
        return (isinstance(other, Normalizer)
                and np.array_equal(self.mean, other.mean)
                and np.array_equal(self.std, other.std))


def fold_normalizer(cache: "FeatureCache", train_ids) -> Normalizer:
    """Per-bin z-score statistics fit on training utterances only."""
    train_ids = list(train_ids)
    if not train_ids:
        raise EmptyTrainSet("no training utterances to fit a normalizer on")
    return Normalizer.fit(cache.get(utt_id) for utt_id in train_ids)


DEFAULT_PARAMS = {
    "window_size": WINDOW_SIZE,
    "hop_size": HOP_SIZE,
    "n_fft": N_FFT,
    "n_bins": N_BINS,
    "log_floor": LOG_FLOOR,
}

_RECORD_HEADER = struct.Struct("<II")   # (n_bins, n_frames), little endian


class FeatureCache:
    """Directory of extracted features keyed by utterance id.

    Layout::

        <root>/index          line 1: JSON {"version": 1, "params": {...}}
                              then one TSV row per record: id, file, sha256
        <root>/records/*.feat header (n_bins, n_frames) + float32 LE payload

    Opening a cache whose stored params differ from the requested ones raises
    StaleCache; so does a record whose checksum no longer matches its index
    entry.  ``reads`` counts get() calls per utterance id, which lets the
    evaluation harness audit that no test utterance was touched during
    training.
    """

    def __init__(self, root: str | Path, params: dict | None = None,
                 rebuild: bool = False):
        self.root = Path(root)
        self.records_dir = self.root / "records"
        self.params = dict(params or DEFAULT_PARAMS)
        self.index_path = self.root / "index"
        self._entries: dict[str, tuple[str, str]] = {}
        self.reads: Counter[str] = Counter()
        if rebuild and self.index_path.exists():
            self.index_path.unlink()
            for record in self.records_dir.glob("*.feat"):
                record.unlink()
        if self.index_path.exists():
            self._load_index()
        else:
            self.records_dir.mkdir(parents=True, exist_ok=True)
            self._write_index()

    def _load_index(self):
        with open(self.index_path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            stored = header.get("params", {})
            if stored != self.params:
                raise StaleCache(f"cache at {self.root} was built with params "
                                 f"{stored}, requested {self.params}")
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                utt_id, fname, digest = line.split("\t")
                self._entries[utt_id] = (fname, digest)

    def _write_index(self):
        tmp = self.index_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"version": 1, "params": self.params},
                                sort_keys=True) + "\n")
            for utt_id in sorted(self._entries):
                fname, digest = self._entries[utt_id]
                fh.write(f"{utt_id}\t{fname}\t{digest}\n")
        os.replace(tmp, self.index_path)

    @staticmethod
    def _record_bytes(features: np.ndarray) -> bytes:
        f = np.ascontiguousarray(features, dtype="<f4")
        return _RECORD_HEADER.pack(f.shape[0], f.shape[1]) + f.tobytes()

    def has(self, utt_id: str) -> bool:
        return utt_id in self._entries

    def put(self, utt_id: str, features: np.ndarray):
        payload = self._record_bytes(features)
        digest = hashlib.sha256(payload).hexdigest()
        fname = hashlib.sha1(utt_id.encode()).hexdigest()[:16] + ".feat"
        tmp = self.records_dir / (fname + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, self.records_dir / fname)
        self._entries[utt_id] = (fname, digest)
        self._write_index()

    def get(self, utt_id: str) -> np.ndarray:
        if utt_id not in self._entries:
            raise KeyError(utt_id)
        fname, digest = self._entries[utt_id]
        payload = (self.records_dir / fname).read_bytes()
        if hashlib.sha256(payload).hexdigest() != digest:
            raise StaleCache(f"record for {utt_id} fails its checksum")
        n_bins, n_frames = _RECORD_HEADER.unpack_from(payload)
        data = np.frombuffer(payload, dtype="<f4", offset=_RECORD_HEADER.size)
        self.reads[utt_id] += 1
        return data.reshape(n_bins, n_frames).copy()

    def build(self, manifest, only: set[str] | None = None) -> int:
        """Extract and store features for manifest utterances not yet cached.

        Returns the number of newly extracted records.  Existing records are
        reused, making repeated builds cheap.
        """
        fresh = 0
        for utt in manifest.utterances:
            if only is not None and utt.id not in only:
                continue
            if self.has(utt.id):
                continue
            waveform = audio.read_wav(utt.audio_path)
            self.put(utt.id, log_spectrogram(waveform))
            fresh += 1
        return fresh

    def reset_read_counts(self):
        self.reads.clear()
