"""Confidence-threshold rejection over time-averaged TDNN posteriors."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .corpus.registry import LanguageRegistry
from .errors import RangeError, ShapeError

DEFAULT_TAU = 0.65  # equal-error operating point
MAX_TOTAL_ACCURACY_TAU = 0.81


@dataclass(frozen=True)
class ThresholdPolicy:
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise RangeError(f"tau must lie in [0, 1], got {self.tau}")


@dataclass
class OpenSetDecision:
    accepted: bool
    predicted_in_set: str | None
    confidence: float
    top_n: list[tuple[str, float]] = field(default_factory=list)

    def to_record(self, path: str = "", segment_index: int | None = None) -> dict:
        return {
            "path": path,
            "segment_index": segment_index,
            "accepted": self.accepted,
            "prediction": self.predicted_in_set,
            "confidence": self.confidence,
            "top_n": [[code, p] for code, p in self.top_n],
        }

    def to_json(self, path: str = "", segment_index: int | None = None) -> str:
        return json.dumps(self.to_record(path, segment_index), sort_keys=True)


def _check_posterior(posterior, registry: LanguageRegistry) -> np.ndarray:
    p = np.asarray(posterior, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] != registry.n_in_set:
        raise ShapeError(f"posterior must be a vector of {registry.n_in_set} entries, got {p.shape}")
    return p


def ranked_classes(posterior: np.ndarray) -> np.ndarray:
    """Class indices by descending probability; ties keep the lower index first."""
    return np.argsort(-posterior, kind="stable")


def top_n(posterior, n: int, registry: LanguageRegistry) -> list[tuple[str, float]]:
    p = _check_posterior(posterior, registry)
    if not 1 <= n <= len(p):
        raise RangeError(f"n must lie in [1, {len(p)}], got {n}")
    return [(registry.in_set[i], float(p[i])) for i in ranked_classes(p)[:n]]


def decide(posterior, policy: ThresholdPolicy, registry: LanguageRegistry, n_top: int = 5) -> OpenSetDecision:
    """Accept when the largest posterior entry reaches ``policy.tau``.

    The boundary is inclusive, so ``tau = 0`` accepts everything.
    """
    p = _check_posterior(posterior, registry)
    best = int(ranked_classes(p)[0])
    confidence = float(p[best])
    accepted = confidence >= policy.tau
    return OpenSetDecision(
        accepted=accepted,
        predicted_in_set=registry.in_set[best] if accepted else None,
        confidence=confidence,
        top_n=top_n(p, min(n_top, len(p)), registry),
    )


def utterance_posterior(segment_posteriors) -> np.ndarray:
    """Mean of per-segment averaged posteriors (utterance-level mode)."""
    p = np.asarray(segment_posteriors, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ShapeError("need a non-empty (segments, classes) array")
    return p.mean(axis=0)
