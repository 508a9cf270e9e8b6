"""WAV decoding, resampling and fixed-length segmentation."""

from __future__ import annotations

import io
import os
import wave
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, DecodeError
from .naming import UtteranceMeta

DEFAULT_RATE = 16000
DEFAULT_SEGMENT_S = 4.0


@dataclass(frozen=True)
class AudioSegment:
    samples: np.ndarray = field(repr=False)
    sample_rate: int
    source: UtteranceMeta
    segment_index: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    @property
    def segment_id(self) -> str:
        return f"{self.source.stem}#{self.segment_index}"


def read_wav(path: str | os.PathLike | io.BytesIO) -> tuple[np.ndarray, int]:
    """Decode a 16-bit PCM WAV file.

    Returns a ``(frames, channels)`` float64 array scaled to [-1, 1) and the
    sample rate.
    """
    try:
        with wave.open(path if isinstance(path, io.BytesIO) else os.fspath(path), "rb") as wf:
            width = wf.getsampwidth()
            channels = wf.getnchannels()
            rate = wf.getframerate()
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    except FileNotFoundError as exc:
        raise DecodeError(f"{path}: no such file") from exc
    if width != 2:
        raise DecodeError(f"{path}: only 16-bit PCM is supported (got {8 * width}-bit)")
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return data.reshape(-1, channels), rate


def write_wav(path: str | os.PathLike, samples: np.ndarray, rate: int) -> None:
    """Write mono float samples in [-1, 1] as 16-bit PCM."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32767.0), -32768, 32767)
    with wave.open(os.fspath(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(rate))
        wf.writeframes(pcm.astype("<i2").tobytes())


def to_mono(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim == 1:
        return frames
    return frames.mean(axis=1)


def resample_linear(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    """Linear-interpolation resampling; identity when the rates agree."""
    if rate_in == rate_out:
        return np.asarray(x, dtype=np.float64)
    if rate_in <= 0 or rate_out <= 0:
        raise ConfigError("sample rates must be positive")
    n_out = int(np.floor(len(x) * rate_out / rate_in))
    t_out = np.arange(n_out) * (rate_in / rate_out)
    return np.interp(t_out, np.arange(len(x)), x)


def segment_utterance(
    audio,
    meta: UtteranceMeta,
    segment_s: float = DEFAULT_SEGMENT_S,
    rate: int = DEFAULT_RATE,
    *,
    source_rate: int | None = None,
) -> list[AudioSegment]:
    """Cut an utterance into consecutive fixed-length segments.

    ``audio`` is either a path to a WAV file or an array of samples (mono or
    ``(frames, channels)``) recorded at ``source_rate``. The signal is mixed
    down and resampled to ``rate`` first; a tail shorter than one segment is
    dropped.
    """
    if segment_s <= 0:
        raise ConfigError("segment_s must be positive")
    if isinstance(audio, (str, os.PathLike)):
        frames, source_rate = read_wav(audio)
    else:
        frames = np.asarray(audio, dtype=np.float64)
        if source_rate is None:
            source_rate = rate
    x = resample_linear(to_mono(frames), source_rate, rate)
    seg_len = int(round(segment_s * rate))
    n_seg = len(x) // seg_len
    return [
        AudioSegment(
            samples=x[i * seg_len:(i + 1) * seg_len].copy(),
            sample_rate=rate,
            source=meta,
            segment_index=i,
        )
        for i in range(n_seg)
    ]
