"""MFCC + pitch front end producing 16-dimensional frames.

Columns 0-12 hold liftered MFCCs; column 13 is a voicing score in [0, 1],
14 is log-F0 and 15 its regression delta.
"""

from __future__ import annotations

import os
import struct
from dataclasses import asdict, dataclass

import numpy as np
from scipy.fft import dct

from .errors import ConfigError, IoError, ShapeError, VersionMismatch

FEATURE_DIM = 16
LOG_FLOOR = 1e-10


@dataclass(frozen=True)
class MfccConfig:
    n_coeffs: int = 13
    n_mel_bins: int = 23
    fft_size: int = 512
    pre_emphasis: float = 0.97
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    low_freq: float = 20.0
    high_freq: float = 7600.0
    lifter: float = 22.0
    sample_rate: int = 16000

    def frame_length(self) -> int:
        return int(round(self.frame_length_ms * self.sample_rate / 1000.0))

    def frame_shift(self) -> int:
        return int(round(self.frame_shift_ms * self.sample_rate / 1000.0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MfccConfig":
        return cls(**d)

    def validate(self) -> None:
        if self.n_coeffs > self.n_mel_bins:
            raise ConfigError("n_coeffs must not exceed n_mel_bins")
        if self.fft_size < self.frame_length():
            raise ConfigError(
                f"fft_size {self.fft_size} is smaller than the frame ({self.frame_length()} samples)"
            )
        if not 0 <= self.low_freq < self.high_freq <= self.sample_rate / 2:
            raise ConfigError("mel range must satisfy 0 <= low < high <= Nyquist")


@dataclass(frozen=True)
class PitchConfig:
    min_f0: float = 60.0
    max_f0: float = 400.0
    voicing_threshold: float = 0.5
    default_f0: float = 100.0
    delta_window: int = 2
    # among candidate peaks, prefer the shortest lag within this fraction of the best
    octave_tolerance: float = 0.9


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, 16)
    frame_shift_ms: float
    frame_length_ms: float

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def num_frames(n_samples: int, frame_length: int, frame_shift: int) -> int:
    if n_samples < frame_length:
        return 0
    return (n_samples - frame_length) // frame_shift + 1


def frame_signal(x: np.ndarray, frame_length: int, frame_shift: int) -> np.ndarray:
    """Strided (T, frame_length) view of ``x``."""
    t = num_frames(len(x), frame_length, frame_shift)
    if t == 0:
        raise ShapeError(f"signal of {len(x)} samples is shorter than one frame")
    return np.lib.stride_tricks.sliding_window_view(x, frame_length)[::frame_shift][:t]


def hz_to_mel(f):
    return 1127.0 * np.log1p(np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * np.expm1(np.asarray(m, dtype=np.float64) / 1127.0)


def mel_bin_centers(cfg: MfccConfig) -> np.ndarray:
    """Center frequency in Hz of each triangular mel filter."""
    lo, hi = hz_to_mel(cfg.low_freq), hz_to_mel(cfg.high_freq)
    delta = (hi - lo) / (cfg.n_mel_bins + 1)
    return mel_to_hz(lo + delta * np.arange(1, cfg.n_mel_bins + 1))


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """(n_mel_bins, fft_size // 2 + 1) triangular weights, triangles in mel."""
    lo, hi = hz_to_mel(cfg.low_freq), hz_to_mel(cfg.high_freq)
    delta = (hi - lo) / (cfg.n_mel_bins + 1)
    fft_mel = hz_to_mel(np.arange(cfg.fft_size // 2 + 1) * cfg.sample_rate / cfg.fft_size)
    left = lo + delta * np.arange(cfg.n_mel_bins)[:, None]
    center = left + delta
    right = center + delta
    up = (fft_mel[None, :] - left) / delta
    down = (right - fft_mel[None, :]) / delta
    return np.clip(np.minimum(up, down), 0.0, None)


def lifter_weights(n_coeffs: int, lifter: float) -> np.ndarray:
    if lifter <= 0:
        return np.ones(n_coeffs)
    n = np.arange(n_coeffs)
    return 1.0 + 0.5 * lifter * np.sin(np.pi * n / lifter)


def _samples(segment) -> tuple[np.ndarray, int | None]:
    if hasattr(segment, "samples"):
        return np.asarray(segment.samples, dtype=np.float64), segment.sample_rate
    return np.asarray(segment, dtype=np.float64), None


def log_mel_energies(segment, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """(T, n_mel_bins) log filterbank energies, floored at ``LOG_FLOOR``."""
    cfg.validate()
    x, rate = _samples(segment)
    if rate is not None and rate != cfg.sample_rate:
        raise ConfigError(f"segment rate {rate} differs from configured {cfg.sample_rate}")
    frames = frame_signal(x, cfg.frame_length(), cfg.frame_shift()).copy()
    # per-frame pre-emphasis; the first sample is emphasised against itself
    frames[:, 1:] -= cfg.pre_emphasis * frames[:, :-1]
    frames[:, 0] *= 1.0 - cfg.pre_emphasis
    frames *= np.hamming(cfg.frame_length())
    power = np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1)) ** 2
    energies = power @ mel_filterbank(cfg).T
    return np.log(np.maximum(energies, LOG_FLOOR))


def extract_mfcc(segment, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """(T, n_coeffs) MFCCs: orthonormal DCT-II of log-mel energies, liftered."""
    logmel = log_mel_energies(segment, cfg)
    ceps = dct(logmel, type=2, norm="ortho", axis=1)[:, :cfg.n_coeffs]
    return ceps * lifter_weights(cfg.n_coeffs, cfg.lifter)


def _nccf(x: np.ndarray, starts: np.ndarray, width: int, min_lag: int, max_lag: int) -> np.ndarray:
    """Normalized cross-correlation for every frame start and lag.

    Returns (T, max_lag - min_lag + 1). The reference window is
    ``x[s:s+width]``; each lag compares it with ``x[s+lag:s+lag+width]``.
    """
    span = width + max_lag
    chunks = np.lib.stride_tricks.sliding_window_view(x, span)[starts]
    nfft = 1 << int(np.ceil(np.log2(span + width)))
    ref = np.zeros_like(chunks)
    ref[:, :width] = chunks[:, :width]
    cross = np.fft.irfft(
        np.conj(np.fft.rfft(ref, nfft, axis=1)) * np.fft.rfft(chunks, nfft, axis=1), nfft, axis=1
    )[:, min_lag:max_lag + 1]
    sq = np.concatenate([np.zeros((len(starts), 1)), np.cumsum(chunks ** 2, axis=1)], axis=1)
    e0 = sq[:, width]
    lags = np.arange(min_lag, max_lag + 1)
    e_lag = sq[:, lags + width] - sq[:, lags]
    denom = np.sqrt(e0[:, None] * e_lag)
    tiny = 1e-20
    return np.where(denom > tiny, cross / np.maximum(denom, tiny), 0.0)


def _pick_lag(r: np.ndarray, tolerance: float) -> tuple[float, float]:
    """Best lag (fractional, relative to the first candidate) and its score."""
    best = float(r.max())
    if best <= 0.0:
        return float(np.argmax(r)), best
    interior = np.flatnonzero((r[1:-1] >= r[:-2]) & (r[1:-1] >= r[2:])) + 1
    good = interior[r[interior] >= tolerance * best]
    k = int(good[0]) if len(good) else int(np.argmax(r))
    if 0 < k < len(r) - 1:
        a, b, c = r[k - 1], r[k], r[k + 1]
        den = a - 2 * b + c
        offset = 0.5 * (a - c) / den if den < 0 else 0.0
        return k + float(np.clip(offset, -0.5, 0.5)), best
    return float(k), best


def regression_delta(x: np.ndarray, window: int) -> np.ndarray:
    """Standard ±window regression delta with edge replication."""
    padded = np.pad(x, (window, window), mode="edge")
    n = len(x)
    num = sum(k * (padded[window + k:window + k + n] - padded[window - k:window - k + n])
              for k in range(1, window + 1))
    return num / (2.0 * sum(k * k for k in range(1, window + 1)))


def extract_pitch(segment, cfg: MfccConfig = MfccConfig(), pcfg: PitchConfig = PitchConfig()) -> np.ndarray:
    """(T, 3) voicing score, log-F0 and delta log-F0 on the MFCC frame grid.

    F0 comes from the normalized autocorrelation peak over the 60-400 Hz lag
    range. Frames whose voicing score falls below ``voicing_threshold`` take
    log-F0 interpolated from the nearest voiced frames.
    """
    x, _ = _samples(segment)
    width, shift = cfg.frame_length(), cfg.frame_shift()
    rate = cfg.sample_rate
    min_lag = int(np.floor(rate / pcfg.max_f0))
    max_lag = int(np.ceil(rate / pcfg.min_f0))
    t = num_frames(len(x), width, shift)
    if t == 0:
        raise ShapeError(f"signal of {len(x)} samples is shorter than one frame")
    span = width + max_lag
    if len(x) < span:
        x = np.pad(x, (0, span - len(x)))
    # analysis windows that would run past the end are pulled back inside
    starts = np.minimum(np.arange(t) * shift, len(x) - span)
    r = _nccf(x, starts, width, min_lag, max_lag)

    voicing = np.empty(t)
    f0 = np.empty(t)
    for i in range(t):
        lag, score = _pick_lag(r[i], pcfg.octave_tolerance)
        voicing[i] = min(max(score, 0.0), 1.0)
        f0[i] = rate / (min_lag + lag)

    voiced = voicing >= pcfg.voicing_threshold
    idx = np.flatnonzero(voiced)
    if len(idx) == 0:
        log_f0 = np.full(t, np.log(pcfg.default_f0))
    else:
        log_f0 = np.interp(np.arange(t), idx, np.log(f0[idx]))
    delta = regression_delta(log_f0, pcfg.delta_window)
    return np.column_stack([voicing, log_f0, delta])


def extract_features(segment, cfg: MfccConfig = MfccConfig(),
                     pcfg: PitchConfig = PitchConfig()) -> FeatureMatrix:
    mfcc = extract_mfcc(segment, cfg)
    pitch = extract_pitch(segment, cfg, pcfg)
    if mfcc.shape[0] != pitch.shape[0]:
        raise ShapeError("MFCC and pitch frame grids disagree")
    return FeatureMatrix(np.hstack([mfcc, pitch]), cfg.frame_shift_ms, cfg.frame_length_ms)


# Binary layout: magic, version, T, dim, shift_ms, length_ms | float32 rows (LE)
_MAGIC = b"LIDF"
_VERSION = 1
_HEADER = struct.Struct("<4sHIIff")


def feature_bytes(fm: FeatureMatrix) -> bytes:
    frames = np.ascontiguousarray(fm.frames, dtype="<f4")
    t, dim = frames.shape
    header = _HEADER.pack(_MAGIC, _VERSION, t, dim, fm.frame_shift_ms, fm.frame_length_ms)
    return header + frames.tobytes()


def save_features(fm: FeatureMatrix, path: str | os.PathLike) -> None:
    try:
        with open(path, "wb") as f:
            f.write(feature_bytes(fm))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_features(path: str | os.PathLike) -> FeatureMatrix:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise VersionMismatch(f"{path}: truncated feature file")
    magic, version, t, dim, shift, length = _HEADER.unpack_from(blob)
    if magic != _MAGIC or version != _VERSION:
        raise VersionMismatch(f"{path}: not a v{_VERSION} feature file")
    payload = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    if payload.size != t * dim:
        raise ShapeError(f"{path}: payload holds {payload.size} values, header says {t}x{dim}")
    return FeatureMatrix(payload.reshape(t, dim).astype(np.float32), shift, length)
