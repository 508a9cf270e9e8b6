"""Speaker-aware train/validation/back-end/test partitioning."""

from __future__ import annotations

import logging
import os
import zlib
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, InsufficientData
from .registry import LanguageRegistry

log = logging.getLogger(__name__)

IN_SET_TRAIN_SHARE = 0.95
IN_SET_VAL_SHARE = 0.10  # of the training side
OUT_OF_SET_FIT_SHARE = 0.80
MIN_SEGMENTS = 20
MIN_SPEAKERS = 3

SPLIT_TAGS = ("tdnn_train", "tdnn_val", "backend_fit", "test")


@dataclass(frozen=True, order=True)
class SegmentRef:
    """A segment identified by its source utterance and position within it."""

    audio_path: str
    segment_index: int
    language_code: str
    speaker_id: str | None = None

    @classmethod
    def of(cls, segment) -> "SegmentRef":
        if isinstance(segment, SegmentRef):
            return segment
        meta = segment.source
        return cls(meta.audio_path, segment.segment_index, meta.language_code, meta.speaker_id)

    @property
    def group_key(self) -> str:
        # unknown speakers fall back to one group per utterance
        if self.speaker_id is None:
            return f"utt:{self.audio_path}"
        return f"spk:{self.speaker_id}"

    @property
    def segment_id(self) -> str:
        stem = os.path.splitext(os.path.basename(self.audio_path))[0]
        return f"{stem}#{self.segment_index}"


@dataclass
class SplitPlan:
    tdnn_train: list[SegmentRef] = field(default_factory=list)
    tdnn_val: list[SegmentRef] = field(default_factory=list)
    backend_fit: list[SegmentRef] = field(default_factory=list)
    test: list[SegmentRef] = field(default_factory=list)
    seed: int = 0
    # speakers that had to be divided between train side and test
    shared_speakers: list[str] = field(default_factory=list)

    def items(self):
        for tag in SPLIT_TAGS:
            for ref in getattr(self, tag):
                yield tag, ref

    def to_manifest(self) -> str:
        lines = [f"# openlid split manifest v1 seed={self.seed}"]
        for tag, ref in self.items():
            spk = "u" if ref.speaker_id is None else ref.speaker_id
            lines.append("\t".join([ref.audio_path, str(ref.segment_index), tag, ref.language_code, spk]))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_manifest(cls, text: str) -> "SplitPlan":
        plan = cls()
        for line in text.splitlines():
            if not line:
                continue
            if line.startswith("#"):
                for tok in line.split():
                    if tok.startswith("seed="):
                        plan.seed = int(tok[5:])
                continue
            path, idx, tag, lang, spk = line.split("\t")
            if tag not in SPLIT_TAGS:
                raise ConfigError(f"unknown split tag {tag!r}")
            getattr(plan, tag).append(SegmentRef(path, int(idx), lang, None if spk == "u" else spk))
        return plan


def _lang_rng(seed: int, code: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(code.encode("ascii"))])


def _subset_near(sizes: np.ndarray, target: int) -> tuple[list[int], int]:
    """Pick group indices whose sizes sum to ``target``, give or take one.

    Exact subset-sum by dynamic programming over reachable totals. Prefers
    the exact target, then one under, then one over; failing all three it
    returns the largest reachable total below the target.
    """
    total = int(sizes.sum())
    first = np.full(total + 1, -1, dtype=np.int64)
    reach = np.zeros(total + 1, dtype=bool)
    reach[0] = True
    for k, s in enumerate(sizes):
        shifted = np.zeros_like(reach)
        shifted[s:] = reach[:total + 1 - s]
        new = shifted & ~reach
        first[new] = k
        reach |= shifted
    best = None
    for delta in (0, -1, 1):
        t = target + delta
        if 0 < t <= total and reach[t]:
            best = t
            break
    if best is None:
        # largest reachable total below target; caller tops it up
        below = np.flatnonzero(reach[:target + 1])
        best = int(below[-1])
    chosen = []
    s = best
    while s > 0:
        k = int(first[s])
        chosen.append(k)
        s -= int(sizes[k])
    return sorted(chosen), best


def _split_language(refs, train_share, rng, code):
    """Return (train_side, test, shared_speaker) for one language."""
    n = len(refs)
    n_test = n - int(round(train_share * n))
    groups: dict[str, list[SegmentRef]] = defaultdict(list)
    for r in refs:
        groups[r.group_key].append(r)
    keys = sorted(groups)
    keys = [keys[i] for i in rng.permutation(len(keys))]
    sizes = np.array([len(groups[k]) for k in keys], dtype=np.int64)
    chosen, got = _subset_near(sizes, n_test)
    test_keys = {keys[i] for i in chosen}
    test = [r for k in test_keys for r in groups[k]]
    train_side = [r for k in keys if k not in test_keys for r in groups[k]]
    shared = None
    if got < n_test - 1:
        # no speaker-disjoint partition hits the ratio; divide one speaker
        remaining = [k for k in keys if k not in test_keys]
        donor = min(remaining, key=lambda k: (len(groups[k]), k))
        need = n_test - got
        moved = sorted(groups[donor])[:need]
        test += moved
        moved_set = set(moved)
        train_side = [r for r in train_side if r not in moved_set]
        shared = donor
        log.warning("%s: speaker-disjoint split impossible, dividing %s", code, donor)
    return sorted(train_side), sorted(test), shared


def make_split(segments, registry: LanguageRegistry, seed: int) -> SplitPlan:
    """Partition segments per language following the in-set/out-of-set ratios.

    In-set languages: 95% to the TDNN side (then 90/10 train/validation),
    5% to test. Out-of-set languages: 80% back-end fit, 20% test. Test
    speakers are held out of the training side whenever a speaker subset of
    the right size exists. Raises :class:`InsufficientData` listing every
    language with fewer than 20 segments or 3 speaker groups.
    """
    by_lang: dict[str, list[SegmentRef]] = defaultdict(list)
    for seg in segments:
        ref = SegmentRef.of(seg)
        if ref.language_code not in registry:
            raise ConfigError(f"language {ref.language_code!r} not in registry")
        by_lang[ref.language_code].append(ref)

    problems = {}
    for code, refs in by_lang.items():
        n_groups = len({r.group_key for r in refs})
        if len(refs) < MIN_SEGMENTS or n_groups < MIN_SPEAKERS:
            problems[code] = f"{len(refs)} segments, {n_groups} speakers"
    if problems:
        detail = "; ".join(f"{c}: {v}" for c, v in sorted(problems.items()))
        raise InsufficientData(f"cannot honour split ratios with speaker leave-out ({detail})", problems)

    plan = SplitPlan(seed=seed)
    for code in sorted(by_lang):
        refs = sorted(set(by_lang[code]))
        rng = _lang_rng(seed, code)
        if registry.is_in_set(code):
            side, test, shared = _split_language(refs, IN_SET_TRAIN_SHARE, rng, code)
            n_val = int(round(IN_SET_VAL_SHARE * len(side)))
            order = rng.permutation(len(side))
            val_idx = set(order[:n_val].tolist())
            plan.tdnn_val += [r for i, r in enumerate(side) if i in val_idx]
            plan.tdnn_train += [r for i, r in enumerate(side) if i not in val_idx]
        else:
            side, test, shared = _split_language(refs, OUT_OF_SET_FIT_SHARE, rng, code)
            plan.backend_fit += side
        plan.test += test
        if shared is not None:
            plan.shared_speakers.append(f"{code}/{shared}")
    return plan
