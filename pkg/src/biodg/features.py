"""MFCC feature maps: 26 mel filters over 0-600 Hz, 99 frames per 1 s window."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.fft import dct

from .corpus import CANONICAL_RATE_HZ
from .errors import ConfigError, ShapeError

N_FILTERS = 26
N_FRAMES = 99
FRAME_LEN = 40  # 20 ms at 2000 Hz
HOP = 20  # 10 ms
FFT_SIZE = 512
F_MIN_HZ = 0.0
F_MAX_HZ = 600.0
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


def mel_scale(f_hz):
    f = np.asarray(f_hz, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("mel_scale is defined for nonnegative frequencies")
    out = 2595.0 * np.log10(1.0 + f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(mel):
    m = np.asarray(mel, dtype=np.float64)
    if np.any(m < 0):
        raise ValueError("mel_to_hz is defined for nonnegative mel values")
    out = 700.0 * (10.0 ** (m / 2595.0) - 1.0)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MelFilterbank:
    n_filters: int = N_FILTERS
    f_min_hz: float = F_MIN_HZ
    f_max_hz: float = F_MAX_HZ
    sample_rate_hz: int = CANONICAL_RATE_HZ
    fft_size: int = FFT_SIZE
    frame_len_s: float = 0.020
    hop_s: float = 0.010

    @property
    def edges_hz(self) -> np.ndarray:
        """n_filters + 2 points equally spaced in mel; filter j peaks at edges[j + 1]."""
        m = np.linspace(mel_scale(self.f_min_hz), mel_scale(self.f_max_hz), self.n_filters + 2)
        return mel_to_hz(m)

    @property
    def centers_hz(self) -> np.ndarray:
        return self.edges_hz[1:-1]

    @property
    def bin_freqs_hz(self) -> np.ndarray:
        return np.arange(self.fft_size // 2 + 1) * self.sample_rate_hz / self.fft_size

    def response(self, f_hz) -> np.ndarray:
        """Continuous triangular responses, shape (n_filters, len(f))."""
        f = np.atleast_1d(np.asarray(f_hz, dtype=np.float64))
        e = self.edges_hz
        lo, c, hi = e[:-2, None], e[1:-1, None], e[2:, None]
        up = (f[None, :] - lo) / (c - lo)
        down = (hi - f[None, :]) / (hi - c)
        return np.clip(np.minimum(up, down), 0.0, None)

    @property
    def weights(self) -> np.ndarray:
        return _weights(self)


@lru_cache(maxsize=8)
def _weights(fb: MelFilterbank) -> np.ndarray:
    w = fb.response(fb.bin_freqs_hz)
    w.setflags(write=False)
    return w


DEFAULT_FILTERBANK = MelFilterbank()


@lru_cache(maxsize=4)
def _hamming(n):
    w = np.hamming(n)
    w.setflags(write=False)
    return w


def frame_signal(samples) -> np.ndarray:
    """(99, 40) Hamming-windowed frames; frame t covers samples [20t, 20t + 40)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or len(x) != CANONICAL_RATE_HZ:
        raise ShapeError(f"frame_signal needs exactly {CANONICAL_RATE_HZ} samples, got shape {x.shape}")
    idx = np.arange(N_FRAMES)[:, None] * HOP + np.arange(FRAME_LEN)[None, :]
    return x[idx] * _hamming(FRAME_LEN)


def power_spectrum(frames, fft_size: int = FFT_SIZE) -> np.ndarray:
    spec = np.fft.rfft(frames, n=fft_size, axis=-1)
    return (spec.real ** 2 + spec.imag ** 2) / fft_size


def filterbank_energies(samples, fb: MelFilterbank = DEFAULT_FILTERBANK) -> np.ndarray:
    """Pre-log mel energies, shape (26, 99)."""
    return (power_spectrum(frame_signal(samples), fb.fft_size) @ fb.weights.T).T


def log_mel(samples, fb: MelFilterbank = DEFAULT_FILTERBANK) -> np.ndarray:
    return np.log(np.maximum(filterbank_energies(samples, fb), LOG_FLOOR))


def compute_mfcc(instance, fb: MelFilterbank = DEFAULT_FILTERBANK) -> np.ndarray:
    """26 x 99 MFCC map (coefficient x frame) of a 1 s window.

    ``instance`` is a WindowedInstance or a raw array of 2000 samples.
    """
    samples = getattr(instance, "samples", instance)
    out = dct(log_mel(samples, fb), type=2, norm="ortho", axis=0)
    if out.shape != (N_FILTERS, N_FRAMES):
        raise ShapeError(f"feature map has shape {out.shape}")
    return out


def compute_mfcc_batch(windows, fb: MelFilterbank = DEFAULT_FILTERBANK) -> np.ndarray:
    """Vectorised compute_mfcc over (B, 2000) windows -> (B, 26, 99)."""
    x = np.asarray(windows, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != CANONICAL_RATE_HZ:
        raise ShapeError(f"expected (B, {CANONICAL_RATE_HZ}) windows, got {x.shape}")
    idx = np.arange(N_FRAMES)[:, None] * HOP + np.arange(FRAME_LEN)[None, :]
    frames = x[:, idx] * _hamming(FRAME_LEN)
    energies = power_spectrum(frames, fb.fft_size) @ fb.weights.T  # (B, 99, 26)
    logs = np.log(np.maximum(energies, LOG_FLOOR))
    return dct(logs, type=2, norm="ortho", axis=2).transpose(0, 2, 1)


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, maps) -> "FeatureStats":
        """Per-coefficient-row statistics over every frame of every training map."""
        arr = np.asarray(maps, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[1] != N_FILTERS:
            raise ShapeError(f"expected (B, 26, F) maps, got {arr.shape}")
        return cls(arr.mean(axis=(0, 2)), arr.std(axis=(0, 2)))

    @classmethod
    def identity(cls) -> "FeatureStats":
        return cls(np.zeros(N_FILTERS), np.ones(N_FILTERS))

    def to_json(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_json(cls, d: dict) -> "FeatureStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def standardize(maps, stats: FeatureStats) -> np.ndarray:
    """``(x - mean) / max(std, 1e-8)`` per coefficient row; accepts one map or a batch."""
    x = np.asarray(maps, dtype=np.float64)
    mean = stats.mean[:, None]
    std = np.maximum(stats.std, STD_FLOOR)[:, None]
    return (x - mean) / std


# feature cache files: b"BDGF" + u32 header length + JSON header + float32 LE row-major values

_MAGIC = b"BDGF"


def write_feature_file(path, fmap) -> None:
    arr = np.asarray(fmap)
    if arr.shape != (N_FILTERS, N_FRAMES):
        raise ShapeError(f"feature map must be 26x99, got {arr.shape}")
    header = json.dumps({"rows": N_FILTERS, "cols": N_FRAMES, "dtype": "float32-le"}, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(header)) + header + arr.astype("<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path}: not a feature cache file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    rows, cols = header["rows"], header["cols"]
    data = np.frombuffer(raw[8 + hlen:], dtype="<f4")
    if data.size != rows * cols:
        raise ConfigError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols).copy()


def write_feature_block(path, maps) -> None:
    """Many maps in one cache file; the header adds a ``count`` field."""
    arr = np.asarray(maps)
    if arr.ndim != 3 or arr.shape[1:] != (N_FILTERS, N_FRAMES):
        raise ShapeError(f"feature block must be (B, 26, 99), got {arr.shape}")
    header = json.dumps({"count": int(arr.shape[0]), "rows": N_FILTERS, "cols": N_FRAMES,
                         "dtype": "float32-le"}, sort_keys=True).encode()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(_MAGIC + struct.pack("<I", len(header)) + header + arr.astype("<f4").tobytes())


def read_feature_block(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ConfigError(f"{path}: not a feature cache file")
    (hlen,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + hlen])
    count = header.get("count", 1)
    rows, cols = header["rows"], header["cols"]
    data = np.frombuffer(raw[8 + hlen:], dtype="<f4")
    if data.size != count * rows * cols:
        raise ConfigError(f"{path}: expected {count * rows * cols} values, found {data.size}")
    return data.reshape(count, rows, cols).copy()
