"""In-set / out-of-set language bookkeeping."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

from ..errors import ConfigError, DuplicateCode
from .naming import is_valid_language_code

# ISO 639-2 codes for the 32 in-set and 19 out-of-set languages of the
# CU MultiLang split.
CU_MULTILANG_IN_SET = (
    "ara", "ben", "cat", "eng", "ewe", "fra", "kat", "deu",
    "ell", "hau", "haw", "hin", "hun", "isl", "ita", "jav",
    "kas", "kor", "lin", "zho", "mri", "pus", "rus", "spa",
    "swe", "tam", "tel", "tha", "bod", "tur", "urd", "yor",
)
CU_MULTILANG_OUT_OF_SET = (
    "aka", "sqi", "hye", "twi", "bul", "mya", "hrv", "nld", "fin", "heb",
    "iba", "jpn", "mal", "nep", "nor", "fas", "ron", "ukr", "uig",
)


@dataclass
class LanguageRegistry:
    """Maps language codes to softmax indices (in-set) and back-end labels.

    ``in_set`` order defines the TDNN output layout and must not change after
    training; :meth:`fingerprint` is stored in the model to enforce that.
    """

    in_set: list[str]
    out_of_set: list[str]
    enrolled: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.in_set = list(self.in_set)
        self.out_of_set = list(self.out_of_set)
        self.enrolled = list(self.enrolled)
        seen = set()
        for code in self.in_set + self.out_of_set + self.enrolled:
            if not is_valid_language_code(code):
                raise ConfigError(f"invalid language code {code!r}")
            if code in seen:
                raise DuplicateCode(f"language code {code!r} listed twice")
            seen.add(code)
        if not self.in_set:
            raise ConfigError("registry needs at least one in-set language")

    @property
    def n_in_set(self) -> int:
        return len(self.in_set)

    @property
    def backend_labels(self) -> list[str]:
        """Out-of-set classes, enrolled languages appended in order."""
        return self.out_of_set + self.enrolled

    def __contains__(self, code: str) -> bool:
        return code in self.in_set or code in self.out_of_set or code in self.enrolled

    def is_in_set(self, code: str) -> bool:
        return code in self.in_set

    def index_of(self, code: str) -> int:
        return self.in_set.index(code)

    def fingerprint(self) -> str:
        """SHA-256 over the ordered in-set list (the softmax layout)."""
        return hashlib.sha256("\n".join(self.in_set).encode("ascii")).hexdigest()

    def with_enrolled(self, code: str) -> "LanguageRegistry":
        if code in self:
            raise DuplicateCode(f"language {code!r} is already registered")
        return LanguageRegistry(self.in_set, self.out_of_set, self.enrolled + [code])

    def to_dict(self) -> dict:
        return {"in_set": self.in_set, "out_of_set": self.out_of_set, "enrolled": self.enrolled}

    @classmethod
    def from_dict(cls, d: dict) -> "LanguageRegistry":
        return cls(d["in_set"], d.get("out_of_set", []), d.get("enrolled", []))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "LanguageRegistry":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    @classmethod
    def cu_multilang_default(cls) -> "LanguageRegistry":
        return cls(list(CU_MULTILANG_IN_SET), list(CU_MULTILANG_OUT_OF_SET))
