"""Memory-bounded ensemble of (LDA, pLDA) pairs with majority voting.

Each member is fit on one class-stratified batch of representation
vectors. Vectors are materialised through a loader, one batch at a time,
and a :class:`ResidentCounter` tracks how many are held in memory.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ..corpus.registry import LanguageRegistry
from ..errors import (
    DuplicateCode,
    InsufficientExamples,
    IoError,
    ShapeError,
    StratificationError,
    VersionMismatch,
)
from .lda import LdaProjector, fit_lda
from .plda import PldaModel, fit_plda

log = logging.getLogger(__name__)

DEFAULT_BATCH_SEGMENTS = 4000
DEFAULT_K = 18
DEFAULT_NOVELTY_THRESHOLD = 0.5
DEFAULT_MIN_ENROLL = 50
MIN_PER_CLASS = 2

Loader = Callable[[Sequence[str]], np.ndarray]


class ResidentCounter:
    """Counts representation vectors currently held in memory."""

    def __init__(self, budget: int | None = None):
        self.budget = budget
        self.current = 0
        self.peak = 0

    def acquire(self, n: int) -> None:
        self.current += n
        self.peak = max(self.peak, self.current)
        if self.budget is not None and self.current > self.budget:
            raise MemoryError(f"{self.current} resident vectors exceed the budget of {self.budget}")

    def release(self, n: int) -> None:
        self.current -= n


@dataclass
class BackendConfig:
    batch_segments: int = DEFAULT_BATCH_SEGMENTS
    k: int = DEFAULT_K
    novelty_threshold: float = DEFAULT_NOVELTY_THRESHOLD
    min_enroll: int = DEFAULT_MIN_ENROLL
    shrinkage: float = 1e-8
    pooling: str = "concat"
    seed: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Member:
    lda: LdaProjector
    plda: PldaModel

    def predict(self, x) -> tuple[list[str], np.ndarray]:
        return self.plda.predict(self.lda.transform(x))


@dataclass
class EnsembleDecision:
    label: str
    confidence: float
    novel: bool
    votes: int
    n_members: int


@dataclass
class PldaEnsemble:
    members: list[Member]
    batch_manifest: list[list[tuple[str, str]]]  # per member: (vector id, label)
    novelty_threshold: float = DEFAULT_NOVELTY_THRESHOLD
    config: dict = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return sorted({lab for m in self.members for lab in m.plda.labels})

    @property
    def input_dim(self) -> int:
        return self.members[0].lda.input_dim


def _vote(labels: Sequence[str], confs: Sequence[float]) -> tuple[str, float, int]:
    counts = Counter(labels)
    top = max(counts.values())
    winner = min(lab for lab, c in counts.items() if c == top)
    mean_conf = float(np.mean([c for lab, c in zip(labels, confs) if lab == winner]))
    return winner, mean_conf, top


def classify_batch(ensemble: PldaEnsemble, reps) -> list[EnsembleDecision]:
    x = np.atleast_2d(np.asarray(reps, dtype=np.float64))
    if x.shape[1] != ensemble.input_dim:
        raise ShapeError(f"representation has {x.shape[1]} dims, ensemble expects {ensemble.input_dim}")
    per_member = [m.predict(x) for m in ensemble.members]
    out = []
    for i in range(x.shape[0]):
        labels = [lab[i] for lab, _ in per_member]
        confs = [float(conf[i]) for _, conf in per_member]
        label, conf, votes = _vote(labels, confs)
        out.append(EnsembleDecision(label, conf, conf < ensemble.novelty_threshold, votes, len(per_member)))
    return out


def classify(ensemble: PldaEnsemble, rep) -> EnsembleDecision:
    """Majority vote over members; ties go to the lexicographically smallest code.

    Confidence is the mean posterior of the winning label among the members
    that voted for it; ``novel`` flags confidence below the ensemble's
    novelty threshold.
    """
    rep = np.asarray(rep)
    if rep.ndim != 1:
        raise ShapeError("classify expects a single representation vector")
    return classify_batch(ensemble, rep[None])[0]


def fit_member(x, y, k: int = DEFAULT_K, shrinkage: float = 1e-8) -> Member:
    lda = fit_lda(x, y, k, shrinkage=shrinkage)
    return Member(lda, fit_plda(lda.transform(x), y))


def stratified_batches(ids: Sequence[str], labels: Sequence[str], batch_segments: int,
                       seed: int = 0) -> list[list[tuple[str, str]]]:
    """Partition items into ``ceil(N / batch_segments)`` class-stratified batches.

    Items of each class are shuffled and dealt round-robin, so every batch
    holds every class in near-equal proportion and no batch exceeds
    ``batch_segments``.
    """
    n = len(ids)
    if n == 0:
        raise StratificationError("no vectors to batch")
    n_batches = max(1, -(-n // batch_segments))
    rng = np.random.default_rng(seed)
    by_class: dict[str, list[str]] = {}
    for i, lab in sorted(zip(ids, labels)):
        by_class.setdefault(lab, []).append(i)
    batches: list[list[tuple[str, str]]] = [[] for _ in range(n_batches)]
    slot = 0
    for lab in sorted(by_class):
        members = by_class[lab]
        for j in rng.permutation(len(members)):
            batches[slot % n_batches].append((members[j], lab))
            slot += 1
    for b, batch in enumerate(batches):
        check_stratified(batch, by_class, b)
    return batches


def check_stratified(batch, classes, batch_id) -> None:
    counts = Counter(lab for _, lab in batch)
    missing = [c for c in classes if counts.get(c, 0) < MIN_PER_CLASS]
    if missing:
        raise StratificationError(
            f"batch {batch_id} lacks {MIN_PER_CLASS}+ samples of: {', '.join(sorted(missing))}", batch_id
        )


def fit_ensemble(batches: Iterable[list[tuple[str, str]]], loader: Loader, *, k: int = DEFAULT_K,
                 novelty_threshold: float = DEFAULT_NOVELTY_THRESHOLD, shrinkage: float = 1e-8,
                 counter: ResidentCounter | None = None, classes: Sequence[str] | None = None,
                 config: dict | None = None) -> PldaEnsemble:
    """Fit one (LDA, pLDA) member per batch.

    ``batches`` yields lists of ``(vector id, label)``; ``loader`` turns ids
    into a (n, D) array. Only one batch of vectors is resident at a time.
    """
    counter = counter or ResidentCounter()
    members, manifest = [], []
    for b, batch in enumerate(batches):
        check_stratified(batch, classes or sorted({lab for _, lab in batch}), b)
        ids = [i for i, _ in batch]
        y = [lab for _, lab in batch]
        counter.acquire(len(ids))
        try:
            x = loader(ids)
            members.append(fit_member(x, y, k, shrinkage))
            del x
        finally:
            counter.release(len(ids))
        manifest.append(list(batch))
        log.info("fitted member %d on %d vectors", b, len(ids))
    if not members:
        raise StratificationError("no batches supplied")
    return PldaEnsemble(members, manifest, novelty_threshold, dict(config or {}))


def enroll_language(ensemble: PldaEnsemble, new_code: str, example_ids: Sequence[str], loader: Loader,
                    registry: LanguageRegistry, *, min_enroll: int = DEFAULT_MIN_ENROLL,
                    counter: ResidentCounter | None = None,
                    fingerprint: Callable[[], str] | None = None) -> tuple[PldaEnsemble, LanguageRegistry]:
    """Refit every member with its original batch plus a share of the new class.

    The new examples are dealt equally across members (every member sees the
    class). Returns new ensemble and registry objects; the inputs are left
    untouched. ``fingerprint`` (e.g. the TDNN's) is checked before and after.
    """
    if new_code in registry or new_code in ensemble.labels:
        raise DuplicateCode(f"language {new_code!r} is already registered")
    if len(example_ids) < min_enroll:
        raise InsufficientExamples(f"{len(example_ids)} examples for {new_code!r}; need at least {min_enroll}")
    before = fingerprint() if fingerprint else None
    n_members = len(ensemble.members)
    ids = sorted(example_ids)
    if len(ids) // n_members >= MIN_PER_CLASS:
        shares = [ids[m::n_members] for m in range(n_members)]
    else:
        shares = [ids] * n_members
    batches = [list(old) + [(i, new_code) for i in share]
               for old, share in zip(ensemble.batch_manifest, shares)]
    classes = ensemble.labels + [new_code]
    k = ensemble.config.get("k", DEFAULT_K)
    shrinkage = ensemble.config.get("shrinkage", 1e-8)
    refit = fit_ensemble(batches, loader, k=k, novelty_threshold=ensemble.novelty_threshold,
                         shrinkage=shrinkage, counter=counter, classes=classes,
                         config=copy.deepcopy(ensemble.config))
    if fingerprint is not None and fingerprint() != before:
        raise RuntimeError("network parameters changed during enrollment")
    return refit, registry.with_enrolled(new_code)


# --- serialization ---------------------------------------------------------
# b"LIDE" | u16 version | u32 header length | JSON header | float64 LE arrays

MAGIC = b"LIDE"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")
_MEMBER_ARRAYS = (
    ("lda", "mean"), ("lda", "projection"),
    ("plda", "mean"), ("plda", "between"), ("plda", "within"),
    ("plda", "class_means"), ("plda", "class_counts"),
)


def ensemble_bytes(ensemble: PldaEnsemble) -> bytes:
    members_meta, payload = [], []
    for m in ensemble.members:
        shapes = {}
        for part, name in _MEMBER_ARRAYS:
            arr = np.ascontiguousarray(getattr(getattr(m, part), name), dtype="<f8")
            shapes[f"{part}.{name}"] = list(arr.shape)
            payload.append(arr.tobytes())
        members_meta.append({"shapes": shapes, "lda_labels": m.lda.labels, "plda_labels": m.plda.labels})
    header = {
        "members": members_meta,
        "batch_manifest": [[list(item) for item in batch] for batch in ensemble.batch_manifest],
        "novelty_threshold": ensemble.novelty_threshold,
        "config": ensemble.config,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(payload)


def ensemble_from_bytes(blob: bytes) -> PldaEnsemble:
    if len(blob) < _PREFIX.size:
        raise VersionMismatch("truncated ensemble file")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC or version != VERSION:
        raise VersionMismatch(f"not a v{VERSION} ensemble file")
    header = json.loads(blob[_PREFIX.size:_PREFIX.size + head_len])
    offset = _PREFIX.size + head_len
    members = []
    for meta in header["members"]:
        arrays = {}
        for part, name in _MEMBER_ARRAYS:
            shape = meta["shapes"][f"{part}.{name}"]
            n = int(np.prod(shape))
            arrays[(part, name)] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape).copy()
            offset += 8 * n
        lda = LdaProjector(arrays[("lda", "mean")], arrays[("lda", "projection")], meta["lda_labels"])
        plda = PldaModel(arrays[("plda", "mean")], arrays[("plda", "between")], arrays[("plda", "within")],
                         arrays[("plda", "class_means")], arrays[("plda", "class_counts")], meta["plda_labels"])
        members.append(Member(lda, plda))
    if offset != len(blob):
        raise VersionMismatch("ensemble payload size does not match header")
    manifest = [[tuple(item) for item in batch] for batch in header["batch_manifest"]]
    return PldaEnsemble(members, manifest, header["novelty_threshold"], header["config"])


def save_ensemble(ensemble: PldaEnsemble, path) -> None:
    try:
        with open(path, "wb") as f:
            f.write(ensemble_bytes(ensemble))
    except OSError as exc:
        raise IoError(f"cannot write ensemble {path}: {exc}") from exc


def load_ensemble(path) -> PldaEnsemble:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise IoError(f"cannot read ensemble {path}: {exc}") from exc
    return ensemble_from_bytes(blob)
