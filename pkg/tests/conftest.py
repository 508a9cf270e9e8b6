import numpy as np
import pytest

from openlid.corpus.audio import AudioSegment
from openlid.corpus.naming import Sex, UtteranceMeta

RATE = 16000


def make_meta(lang="eng", spk="s01", index=0, source="test"):
    return UtteranceMeta(lang, source, Sex.M, spk, index, f"{lang}/{lang}_{source}_m_{spk}_{index:04d}.wav", None)


def make_segment(samples, lang="eng", spk="s01", index=0, segment_index=0, rate=RATE):
    return AudioSegment(np.asarray(samples, dtype=np.float64), rate, make_meta(lang, spk, index), segment_index)


def sawtooth(f0, seconds=4.0, rate=RATE, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return amp * (2.0 * ((t * f0) % 1.0) - 1.0)


def tone(freq, seconds=4.0, rate=RATE, amp=0.5):
    t = np.arange(int(seconds * rate)) / rate
    return amp * np.sin(2 * np.pi * freq * t)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --- acceptance report -------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
