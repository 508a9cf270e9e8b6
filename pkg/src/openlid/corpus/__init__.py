"""Dataset layout, segmentation, splits and synthetic corpora."""

from .audio import AudioSegment, read_wav, resample_linear, segment_utterance, write_wav
from .naming import Sex, UtteranceMeta, parse_filename, render_filename
from .registry import LanguageRegistry
from .split import SegmentRef, SplitPlan, make_split
from .synth import SynthSpec, generate_synthetic_corpus, synthetic_code

__all__ = [
    "AudioSegment", "LanguageRegistry", "SegmentRef", "Sex", "SplitPlan", "SynthSpec",
    "UtteranceMeta", "generate_synthetic_corpus", "make_split", "parse_filename",
    "read_wav", "render_filename", "resample_linear", "segment_utterance",
    "synthetic_code", "write_wav",
]
