"""16 kHz mono 16-bit PCM WAV input/output.

All waveforms inside the package are float64 numpy arrays in [-1, 1).
Quantization to int16 happens only at the file boundary, so writing the
same array twice produces bit-identical files.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import BadSampleRate

SAMPLE_RATE = 16_000
_INT16_SCALE = 32768.0


def read_wav(path: str | os.PathLike, expected_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono PCM WAV file into a float64 array in [-1, 1)."""
    rate, data = wavfile.read(os.fspath(path))
    if rate != expected_rate:
        raise BadSampleRate(f"{path}: sample rate {rate}, expected {expected_rate}")
    if data.ndim != 1:
        raise BadSampleRate(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        return data.astype(np.float64) / _INT16_SCALE
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    # float WAVs already live in [-1, 1]
    return data.astype(np.float64)


def write_wav(path: str | os.PathLike, waveform: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write a float waveform as 16-bit PCM, clipping to the int16 range."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    samples = np.clip(np.round(np.asarray(waveform, dtype=np.float64) * _INT16_SCALE),
                      -32768, 32767).astype(np.int16)
    wavfile.write(os.fspath(path), rate, samples)
