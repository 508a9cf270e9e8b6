"""Evaluation: accuracies, confusion matrices, DET/EER and threshold sweeps."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyInput

SCHEMA_VERSION = 1


def default_grid(n: int = 201) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


@dataclass
class ConfusionMatrix:
    labels: list[str]
    counts: np.ndarray  # rows: truth, columns: prediction

    @classmethod
    def build(cls, truth: Sequence[str], predicted: Sequence[str], labels: Sequence[str] | None = None):
        labels = list(labels) if labels is not None else sorted(set(truth) | set(predicted))
        index = {lab: i for i, lab in enumerate(labels)}
        counts = np.zeros((len(labels), len(labels)), dtype=np.int64)
        for t, p in zip(truth, predicted):
            counts[index[t], index[p]] += 1
        return cls(labels, counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / max(self.total, 1))

    def to_dict(self) -> dict:
        return {"labels": self.labels, "counts": self.counts.tolist()}


@dataclass
class DetCurve:
    points: list[tuple[float, float, float]]  # (threshold, miss, false alarm)
    eer: float
    eer_threshold: float

    def to_dict(self) -> dict:
        return {"eer": self.eer, "eer_threshold": self.eer_threshold,
                "points": [list(p) for p in self.points]}

    def to_tsv(self) -> str:
        rows = ["threshold\tmiss_prob\tfalse_alarm_prob"]
        rows += [f"{t:.6f}\t{m:.6f}\t{f:.6f}" for t, m, f in self.points]
        return "\n".join(rows) + "\n"


@dataclass
class SweepReport:
    points: list[tuple[float, float]]
    argmax_threshold: float
    max_accuracy: float
    endpoints: dict = field(default_factory=dict)
    n_in_set: int = 0
    n_out_of_set: int = 0

    def to_dict(self) -> dict:
        return {
            "argmax_threshold": self.argmax_threshold,
            "max_accuracy": self.max_accuracy,
            "endpoints": self.endpoints,
            "n_in_set": self.n_in_set,
            "n_out_of_set": self.n_out_of_set,
            "points": [list(p) for p in self.points],
        }

    def to_tsv(self) -> str:
        rows = ["threshold\ttotal_accuracy"] + [f"{t:.6f}\t{a:.6f}" for t, a in self.points]
        return "\n".join(rows) + "\n"


def _posteriors(posteriors) -> np.ndarray:
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise EmptyInput("no decisions to evaluate")
    return p


def in_set_report(posteriors, truth_idx, labels: Sequence[str], tau: float | None = None,
                  max_n: int = 5) -> dict:
    """Accuracy, top-N accuracies and confusion over truly in-set samples.

    ``posteriors`` are the time-averaged softmax rows. With ``tau`` the
    conditional accuracy among accepted samples is added.
    """
    p = _posteriors(posteriors)
    truth = np.asarray(truth_idx)
    ranked = np.argsort(-p, axis=1, kind="stable")
    pred = ranked[:, 0]
    max_n = min(max_n, p.shape[1])
    top = {n: float(np.mean((ranked[:, :n] == truth[:, None]).any(axis=1))) for n in range(1, max_n + 1)}
    report = {
        "n": int(len(p)),
        "accuracy": float(np.mean(pred == truth)),
        "top_n_accuracies": top,
        "confusion": ConfusionMatrix.build([labels[i] for i in truth], [labels[i] for i in pred], labels),
    }
    if tau is not None:
        report["tau"] = tau
        report.update(conditional_accuracy(p, truth, tau))
    return report


def conditional_accuracy(posteriors, truth_idx, tau: float) -> dict:
    """Accuracy among samples whose confidence reaches ``tau``."""
    p = _posteriors(posteriors)
    truth = np.asarray(truth_idx)
    conf = p.max(axis=1)
    pred = np.argsort(-p, axis=1, kind="stable")[:, 0]
    accepted = conf >= tau
    n_acc = int(accepted.sum())
    acc = float(np.mean(pred[accepted] == truth[accepted])) if n_acc else float("nan")
    return {"accepted": n_acc, "conditional_accuracy": acc}


def out_of_set_report(truth: Sequence[str], predicted: Sequence[str], labels: Sequence[str] | None = None) -> dict:
    if len(truth) == 0:
        raise EmptyInput("no out-of-set decisions to evaluate")
    cm = ConfusionMatrix.build(truth, predicted, labels)
    return {"n": len(truth), "accuracy": cm.accuracy(), "confusion": cm}


def det_curve(in_set_conf, out_of_set_conf, grid=None) -> DetCurve:
    """Miss/false-alarm rates across thresholds and the equal error rate.

    Miss: in-set confidence below the threshold. False alarm: out-of-set
    confidence at or above it. The EER is taken where ``miss - fa``
    changes sign, interpolating linearly between bracketing grid points.
    """
    pos = np.sort(np.asarray(in_set_conf, dtype=np.float64))
    neg = np.sort(np.asarray(out_of_set_conf, dtype=np.float64))
    if len(pos) == 0 or len(neg) == 0:
        raise EmptyInput("DET needs both in-set and out-of-set confidences")
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if np.any(np.diff(grid) < 0):
        raise ValueError("threshold grid must be sorted")
    miss = np.searchsorted(pos, grid, side="left") / len(pos)
    fa = 1.0 - np.searchsorted(neg, grid, side="left") / len(neg)
    points = [(float(t), float(m), float(f)) for t, m, f in zip(grid, miss, fa)]

    diff = miss - fa
    cross = np.flatnonzero(diff >= 0)
    if len(cross) == 0:
        i = len(grid) - 1
        return DetCurve(points, float((miss[i] + fa[i]) / 2), float(grid[i]))
    j = int(cross[0])
    if j == 0 or diff[j] == 0:
        return DetCurve(points, float((miss[j] + fa[j]) / 2), float(grid[j]))
    i = j - 1
    w = -diff[i] / (diff[j] - diff[i])
    eer = (1 - w) * miss[i] + w * miss[j]
    eer_fa = (1 - w) * fa[i] + w * fa[j]
    return DetCurve(points, float((eer + eer_fa) / 2), float((1 - w) * grid[i] + w * grid[j]))


def total_accuracy_sweep(confidences, is_in_set, in_set_correct, out_of_set_correct, grid=None) -> SweepReport:
    """Whole-pipeline accuracy across thresholds.

    A sample is right when it is accepted, truly in-set and given the right
    in-set label, or rejected, truly out-of-set and given the right
    back-end label.
    """
    conf = np.asarray(confidences, dtype=np.float64)
    if len(conf) == 0:
        raise EmptyInput("no samples to sweep")
    ins = np.asarray(is_in_set, dtype=bool)
    ok_in = np.asarray(in_set_correct, dtype=bool)
    ok_out = np.asarray(out_of_set_correct, dtype=bool)
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    points = []
    for t in grid:
        accepted = conf >= t
        correct = (accepted & ins & ok_in) | (~accepted & ~ins & ok_out)
        points.append((float(t), float(correct.mean())))
    accs = np.array([a for _, a in points])
    best = int(np.argmax(accs))
    n = len(conf)
    endpoints = {
        "tau_0": float((ins & ok_in).sum() / n),
        "tau_1": float((~ins & ok_out).sum() / n),
    }
    return SweepReport(points, float(grid[best]), float(accs[best]), endpoints,
                       int(ins.sum()), int((~ins).sum()))


def _jsonable(obj):
    if isinstance(obj, ConfusionMatrix):
        return obj.to_dict()
    if isinstance(obj, (DetCurve, SweepReport)):
        return obj.to_dict()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return None if math.isnan(obj) else float(obj)
    return obj


def write_report_bundle(out_dir: str | os.PathLike, report: dict, det: DetCurve | None = None,
                        sweep: SweepReport | None = None) -> None:
    """JSON report plus tab-separated coordinate files for plotting."""
    os.makedirs(out_dir, exist_ok=True)
    doc = {"schema_version": SCHEMA_VERSION, **_jsonable(report)}
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    if det is not None:
        with open(os.path.join(out_dir, "det.tsv"), "w", encoding="utf-8") as f:
            f.write(det.to_tsv())
    if sweep is not None:
        with open(os.path.join(out_dir, "sweep.tsv"), "w", encoding="utf-8") as f:
            f.write(sweep.to_tsv())
