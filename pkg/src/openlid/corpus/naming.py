"""Dataset file naming: ``<lang>_<source>_<sex>_<speaker>_<index>.wav``."""

from __future__ import annotations

import enum
import os
import re
from dataclasses import dataclass
from pathlib import Path

from ..errors import MalformedName

UNKNOWN = "u"
AUDIO_EXT = ".wav"
TEXT_EXT = ".txt"

# Three lowercase characters; digits are allowed after the first letter so
# synthetic codes such as "sy0" remain valid.
_LANG_RE = re.compile(r"^[a-z][a-z0-9]{2}$")
_INDEX_RE = re.compile(r"^[0-9]+$")


class Sex(str, enum.Enum):
    M = "M"
    F = "F"
    UNKNOWN = "Unknown"

    @classmethod
    def from_token(cls, token: str) -> "Sex":
        t = token.lower()
        if t == UNKNOWN:
            return cls.UNKNOWN
        if t in ("m", "f"):
            return cls(t.upper())
        raise MalformedName(f"bad sex field {token!r}")

    def to_token(self) -> str:
        return UNKNOWN if self is Sex.UNKNOWN else self.value.lower()


@dataclass(frozen=True)
class UtteranceMeta:
    language_code: str
    source_dataset: str
    sex: Sex
    speaker_id: str | None  # None means unknown
    index: int
    audio_path: str = ""
    transcript_path: str | None = None

    @property
    def stem(self) -> str:
        return render_stem(self)

    @property
    def speaker_key(self) -> str | None:
        """Speaker identity scoped to the language, or None when unknown."""
        if self.speaker_id is None:
            return None
        return f"{self.language_code}/{self.speaker_id}"


def is_valid_language_code(code: str) -> bool:
    return bool(_LANG_RE.match(code))


def parse_filename(name: str | os.PathLike) -> UtteranceMeta:
    """Parse a dataset file name into an :class:`UtteranceMeta`.

    The source-dataset field may itself contain underscores, so the name is
    anchored from both ends: the first token is the language code, the last
    three are sex, speaker id and index, and whatever remains in the middle
    is rejoined as the source dataset.
    """
    path = Path(name)
    ext = path.suffix.lower()
    if ext not in (AUDIO_EXT, TEXT_EXT):
        raise MalformedName(f"{path.name!r}: expected a .wav or .txt file")
    tokens = path.stem.split("_")
    if len(tokens) < 5:
        raise MalformedName(f"{path.name!r}: expected at least 5 underscore-separated fields")
    lang, *middle, sex_tok, spk_tok, idx_tok = tokens
    if not is_valid_language_code(lang):
        raise MalformedName(f"{path.name!r}: bad language code {lang!r}")
    if not _INDEX_RE.match(idx_tok):
        raise MalformedName(f"{path.name!r}: non-numeric index {idx_tok!r}")
    source = "_".join(middle)
    if not source or not spk_tok:
        raise MalformedName(f"{path.name!r}: empty field")
    sex = Sex.from_token(sex_tok)
    speaker = None if spk_tok == UNKNOWN else spk_tok

    parent = path.parent
    audio = parent / (path.stem + AUDIO_EXT)
    text = parent / (path.stem + TEXT_EXT)
    if ext == AUDIO_EXT:
        transcript = str(text) if text.exists() else None
    else:
        transcript = str(text)
    return UtteranceMeta(
        language_code=lang,
        source_dataset=source,
        sex=sex,
        speaker_id=speaker,
        index=int(idx_tok),
        audio_path=str(audio),
        transcript_path=transcript,
    )


def render_stem(meta: UtteranceMeta) -> str:
    speaker = UNKNOWN if meta.speaker_id is None else meta.speaker_id
    return "_".join(
        [meta.language_code, meta.source_dataset, meta.sex.to_token(), speaker, f"{meta.index:04d}"]
    )


def render_filename(meta: UtteranceMeta, ext: str = AUDIO_EXT) -> str:
    return render_stem(meta) + ext
