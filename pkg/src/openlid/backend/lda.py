"""Fisher LDA for very high-dimensional, small-sample batches.

Never forms a D x D scatter matrix: the within-class covariance is handled
through the thin SVD of the class-centred data (rank <= N - C), and
directions outside that span get the variance floor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg

from ..errors import DegenerateBatch


@dataclass
class LdaProjector:
    mean: np.ndarray        # (D,)
    projection: np.ndarray  # (D, k)
    labels: list[str]

    @property
    def k(self) -> int:
        return self.projection.shape[1]

    @property
    def input_dim(self) -> int:
        return self.projection.shape[0]

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.projection


def class_stats(x: np.ndarray, y):
    """Sorted labels, integer codes, per-class counts and means."""
    labels, codes = np.unique(np.asarray(y), return_inverse=True)
    counts = np.bincount(codes)
    means = np.zeros((len(labels), x.shape[1]))
    np.add.at(means, codes, x)
    means /= counts[:, None]
    return [str(v) for v in labels], codes, counts, means


def _check_batch(labels, counts):
    if len(labels) < 2:
        raise DegenerateBatch(f"LDA needs at least two classes, got {len(labels)}")
    lonely = [lab for lab, c in zip(labels, counts) if c < 2]
    if lonely:
        raise DegenerateBatch(f"classes with a single sample: {', '.join(lonely)}")


def fit_lda(x, y, k: int = 18, *, shrinkage: float = 1e-8) -> LdaProjector:
    """Fit a Fisher discriminant projection with ``min(k, C - 1)`` columns.

    ``shrinkage`` sets the variance floor as a fraction of the average
    per-dimension within-class variance; it also regularizes directions
    that the batch leaves unobserved.
    """
    x = np.asarray(x, dtype=np.float64)
    labels, codes, counts, means = class_stats(x, y)
    _check_batch(labels, counts)
    n, d = x.shape
    n_cls = len(labels)
    k = max(1, min(int(k), n_cls - 1))

    overall = x.mean(axis=0)
    vt, var, floor = _within_factors(x, codes, means, shrinkage)
    scale_in = 1.0 / np.sqrt(var + floor)
    scale_out = 1.0 / np.sqrt(floor)

    def whiten(m):
        # (rows, D) -> rows whitened by (S_w + floor I)^(-1/2), applied on the right
        coef = m @ vt.T
        return coef * scale_in @ vt + (m - coef @ vt) * scale_out

    weighted = np.sqrt(counts / n)[:, None] * (means - overall)
    _, _, qt = linalg.svd(whiten(weighted), full_matrices=False, check_finite=False)
    directions = whiten(qt[:k]).T  # whitening operator is symmetric
    return LdaProjector(mean=overall, projection=directions, labels=labels)


def _within_factors(x, codes, means, shrinkage):
    """Thin eigen-factors (vt, var) of the within-class covariance and its floor."""
    n, d = x.shape
    within = (x - means[codes]) / np.sqrt(n - means.shape[0])
    _, s, vt = linalg.svd(within, full_matrices=False, check_finite=False)
    var = s ** 2
    keep = var > var.max(initial=0.0) * 1e-12
    var, vt = var[keep], vt[keep]
    avg = var.sum() / d if len(var) else 0.0
    # zero within-class variance: the floor becomes absolute
    return vt, var, shrinkage * avg if avg > 0 else shrinkage


def within_class_metric(x, y, shrinkage: float = 1e-8):
    """``(vt, var, floor)`` describing the regularized within-class covariance
    ``vt.T @ diag(var) @ vt + floor * I`` used by :func:`fit_lda`."""
    x = np.asarray(x, dtype=np.float64)
    _, codes, _, means = class_stats(x, y)
    return _within_factors(x, codes, means, shrinkage)
