"""Synthetic multi-language corpora for desk-scale experiments.

Each synthetic language owns a small vowel inventory (formant triples) and a
syllable rate. Speakers scale formants by a few percent and carry their own
pitch, so by default pitch says nothing about the language. Vowel formant
triples of different languages are kept at least ``min_formant_sep`` Hz
apart. In addition every pair of vowels, same language or not, sits at least
``min_vowel_sep_mel`` apart in the mel-scaled (F1, F2) plane. F3 is ignored
there: cepstra resolve it poorly, so a distance made up mostly of F3 leaves
two vowels nearly identical. The F1 range is cut into one band per vowel
slot and every language puts one vowel in each band, so inventories span
open to close vowels alike and no language is a corner of the vowel space.
Formant bandwidths are wide enough that the cepstral envelope does not hinge
on where the harmonics fall.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from ..errors import ConfigError, IoError
from .audio import DEFAULT_RATE, write_wav
from .naming import Sex, UtteranceMeta, render_filename

log = logging.getLogger(__name__)

_DIGITS = "0123456789abcdefghijklmnopqrstuvwxyz"
_SYLLABLES = ("ka", "ti", "mo", "ne", "lu", "sa", "po", "ri")
_F_LO = np.array([250.0, 800.0, 2300.0])
_F_HI = np.array([900.0, 2600.0, 3500.0])
_BANDWIDTHS = np.array([150.0, 200.0, 250.0])


def synthetic_code(i: int) -> str:
    if not 0 <= i < len(_DIGITS):
        raise ConfigError(f"synthetic language index {i} out of range")
    return "sy" + _DIGITS[i]


@dataclass
class SynthSpec:
    n_languages: int
    n_speakers: int
    minutes_per_lang: float
    seed: int = 0
    vowels_per_lang: int = 3
    min_formant_sep: float = 300.0
    min_vowel_sep_mel: float = 110.0
    # relative spread of a speaker's formant scaling
    formant_jitter: float = 0.05
    # range for each language's pitch floor; a single value makes pitch speaker-only
    pitch_floor: tuple[float, float] = (110.0, 110.0)
    rate: int = DEFAULT_RATE
    utterance_s: tuple[float, float] = (6.0, 14.0)
    # per-language-index override of minutes_per_lang
    minutes_overrides: dict[int, float] = field(default_factory=dict)


@dataclass
class SynthLanguage:
    code: str
    formants: np.ndarray  # (vowels, 3) Hz
    pitch_band: tuple[float, float]
    syllable_rate: float
    transition: np.ndarray  # vowel Markov chain


def _mel(hz: np.ndarray) -> np.ndarray:
    return 1127.0 * np.log1p(hz / 700.0)


def _mel_to_hz(mel: np.ndarray) -> np.ndarray:
    return 700.0 * np.expm1(mel / 1127.0)


def _draw_inventories(spec: SynthSpec, rng: np.random.Generator) -> list[np.ndarray]:
    # one vowel per openness band: F1 range cut into equal mel bands
    edges = _mel_to_hz(np.linspace(_mel(_F_LO[0]), _mel(_F_HI[0]), spec.vowels_per_lang + 1))
    points: list[np.ndarray] = []
    inventories = []
    for _ in range(spec.n_languages):
        mine: list[np.ndarray] = []
        for v in range(spec.vowels_per_lang):
            lo, hi = _F_LO.copy(), _F_HI.copy()
            lo[0], hi[0] = edges[v], edges[v + 1]
            for _attempt in range(20000):
                cand = rng.uniform(lo, hi)
                key = _mel(cand[:2])
                if (all(np.linalg.norm(cand - p) >= spec.min_formant_sep for p in points)
                        and all(np.linalg.norm(key - _mel(p[:2])) >= spec.min_vowel_sep_mel
                                for p in points + mine)):
                    break
            else:
                raise ConfigError("cannot place formant sets with the requested separation")
            mine.append(cand)
        points.extend(mine)
        inventories.append(np.array(mine))
    return inventories


def make_languages(spec: SynthSpec) -> list[SynthLanguage]:
    if spec.n_languages < 2:
        raise ConfigError("need at least two synthetic languages")
    rng = np.random.default_rng([spec.seed, 0x5EED])
    inventories = _draw_inventories(spec, rng)
    langs = []
    for i, formants in enumerate(inventories):
        lo = rng.uniform(*spec.pitch_floor)
        trans = rng.dirichlet(np.ones(spec.vowels_per_lang) * 0.7, size=spec.vowels_per_lang)
        langs.append(
            SynthLanguage(
                code=synthetic_code(i),
                formants=formants,
                pitch_band=(lo, lo * 1.45),
                syllable_rate=rng.uniform(3.0, 6.5),
                transition=trans,
            )
        )
    return langs


def _resonator(x: np.ndarray, freq: float, bw: float, rate: int) -> np.ndarray:
    r = np.exp(-np.pi * bw / rate)
    theta = 2 * np.pi * freq / rate
    a = [1.0, -2 * r * np.cos(theta), r * r]
    return lfilter([1.0 - r], a, x)


def render_utterance(lang: SynthLanguage, speaker: dict, duration_s: float, rate: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, str]:
    """Synthesize one utterance; returns (samples, pseudo-transcript)."""
    n_total = int(round(duration_s * rate))
    out = np.zeros(n_total)
    lo, hi = lang.pitch_band
    lo, hi = lo * speaker["pitch_scale"], hi * speaker["pitch_scale"]
    pos = 0
    vowel = int(rng.integers(len(lang.formants)))
    phase = 0.0
    words = []
    while pos < n_total:
        syl_len = int(rate / lang.syllable_rate * rng.uniform(0.7, 1.3))
        gap = int(rate * rng.uniform(0.0, 0.03))
        n = min(syl_len, n_total - pos)
        f0_start, f0_end = rng.uniform(lo, hi, size=2)
        f0 = np.linspace(f0_start, f0_end, n)
        ph = phase + np.cumsum(f0) / rate
        phase = float(ph[-1] % 1.0) if n else phase
        source = 2.0 * (ph % 1.0) - 1.0
        formants = lang.formants[vowel] * speaker["formant_scale"]
        y = source
        for f, bw in zip(formants, _BANDWIDTHS):
            y = _resonator(y, f, bw, rate)
        env = np.sin(np.linspace(0.0, np.pi, n)) ** 0.3
        out[pos:pos + n] += y * env * rng.uniform(0.6, 1.0)
        words.append(_SYLLABLES[(vowel * 3 + int(lang.code[-1], 36)) % len(_SYLLABLES)])
        pos += n + gap
        vowel = int(rng.choice(len(lang.formants), p=lang.transition[vowel]))
    out += rng.normal(0.0, 1e-3, size=n_total)
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return out, "-".join(words)


def generate_synthetic_corpus(spec: SynthSpec, root: str | os.PathLike) -> Path:
    """Write a synthetic corpus under ``root`` in the dataset layout.

    One directory per language code, each holding paired ``.wav``/``.txt``
    files named ``<code>_synth_<sex>_<speaker>_<index>``. Output is a pure
    function of ``spec``.
    """
    root = Path(root)
    langs = make_languages(spec)
    try:
        root.mkdir(parents=True, exist_ok=True)
        for li, lang in enumerate(langs):
            lang_dir = root / lang.code
            lang_dir.mkdir(exist_ok=True)
            _emit_language(spec, li, lang, lang_dir)
    except OSError as exc:
        raise IoError(f"cannot write synthetic corpus under {root}: {exc}") from exc
    return root


def _emit_language(spec: SynthSpec, li: int, lang: SynthLanguage, lang_dir: Path) -> None:
    rng = np.random.default_rng([spec.seed, li, 1])
    minutes = spec.minutes_overrides.get(li, spec.minutes_per_lang)
    total_s = minutes * 60.0
    # uneven speaker shares keep speaker-disjoint splits feasible
    shares = rng.dirichlet(np.ones(spec.n_speakers)) * total_s
    index = 0
    for si, share in enumerate(shares):
        sex = Sex.F if rng.random() < 0.5 else Sex.M
        speaker = {
            "formant_scale": rng.uniform(1 - spec.formant_jitter, 1 + spec.formant_jitter),
            "pitch_scale": rng.uniform(0.85, 1.15) * (1.15 if sex is Sex.F else 1.0),
        }
        remaining = share
        while remaining > 1.0:
            dur = min(remaining, rng.uniform(*spec.utterance_s))
            urng = np.random.default_rng([spec.seed, li, si, index])
            samples, text = render_utterance(lang, speaker, dur, spec.rate, urng)
            meta = UtteranceMeta(lang.code, "synth", sex, f"s{si:02d}", index)
            write_wav(lang_dir / render_filename(meta), samples, spec.rate)
            (lang_dir / render_filename(meta, ".txt")).write_text(text + "\n", encoding="utf-8")
            remaining -= dur
            index += 1
