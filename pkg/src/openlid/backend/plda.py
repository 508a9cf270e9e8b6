"""Two-covariance probabilistic LDA.

Model: a class latent ``y ~ N(m, B)`` and observations ``x | y ~ N(y, W)``.
B (between) and W (within) are estimated in closed form from class-mean
and within-class scatter. A test vector is scored against each enrolled
class by the predictive density given that class's enrollment vectors,
normalised by the marginal density.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from ..errors import DegenerateBatch, ShapeError
from .lda import class_stats

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-6  # relative to the largest within-class eigenvalue


@dataclass
class PldaModel:
    mean: np.ndarray          # (k,)
    between: np.ndarray       # (k, k), PSD
    within: np.ndarray        # (k, k), PD
    class_means: np.ndarray   # (C, k) enrollment means
    class_counts: np.ndarray  # (C,)
    labels: list[str]
    _diag: tuple | None = field(default=None, init=False, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def _diagonal_form(self):
        """Basis where W = I and B = diag(lam); cached on first use."""
        if getattr(self, "_diag", None) is None:
            lam, vecs = linalg.eigh(self.between, self.within)
            lam = np.maximum(lam, 0.0)
            z_means = (self.class_means - self.mean) @ vecs
            self._diag = (vecs, lam, z_means)
        return self._diag

    def log_likelihood_ratios(self, x) -> np.ndarray:
        """``log p(x | class c) - log p(x)`` for every class; shape (N, C).

        The class-conditional density is the predictive density of ``x``
        given the class's enrollment mean of ``n_c`` vectors; both it and
        the marginal are diagonal in the basis that whitens W and
        diagonalizes B.
        """
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise ShapeError(f"expected {self.dim}-dim vectors, got {x.shape}")
        vecs, lam, z_means = self._diagonal_form()
        z = (x - self.mean) @ vecs
        marg_var = 1.0 + lam
        marginal = -0.5 * (z ** 2 / marg_var + np.log(marg_var)).sum(axis=1)
        scores = np.empty((x.shape[0], len(self.labels)))
        for c, (zc, n_c) in enumerate(zip(z_means, self.class_counts)):
            shrink = n_c * lam / (n_c * lam + 1.0)
            pred_var = 1.0 + lam / (n_c * lam + 1.0)
            resid = z - shrink * zc
            scores[:, c] = -0.5 * (resid ** 2 / pred_var + np.log(pred_var)).sum(axis=1) - marginal
        return scores

    def posteriors(self, x) -> np.ndarray:
        """Class posteriors under a uniform prior over enrolled classes."""
        s = self.log_likelihood_ratios(x)
        return np.exp(s - logsumexp(s, axis=1, keepdims=True))

    def predict(self, x) -> tuple[list[str], np.ndarray]:
        """Argmax label (ties to the lexicographically smallest) and its posterior."""
        post = self.posteriors(x)
        order = np.argsort(self.labels, kind="stable")
        best = order[np.argmax(post[:, order], axis=1)]
        return [self.labels[i] for i in best], post[np.arange(len(post)), best]


def _floor_within(mat, floor):
    vals, vecs = linalg.eigh(0.5 * (mat + mat.T))
    if vals.min() >= floor:
        return mat
    log.warning("within-class covariance not positive definite; flooring eigenvalues at %.3g", floor)
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def _clip_between(between, within):
    """Clip negative generalized eigenvalues of (B, W) to zero.

    Working in the W-whitened basis keeps the estimate affine-covariant.
    """
    vals, vecs = linalg.eigh(0.5 * (between + between.T), within)
    if vals.min() >= 0:
        return between
    proj = within @ vecs
    return (proj * np.maximum(vals, 0.0)) @ proj.T


def fit_plda(x, y) -> PldaModel:
    """Moment estimates of the two-covariance model.

    W is the pooled within-class covariance (divided by N - C). B is the
    scatter of class means (divided by C - 1) minus the part explained by
    within-class noise in those means, floored to stay PSD.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    labels, codes, counts, means = class_stats(x, y)
    if len(labels) < 2:
        raise DegenerateBatch(f"pLDA needs at least two classes, got {len(labels)}")
    if counts.min() < 2:
        raise DegenerateBatch("every class needs at least two samples")
    n, k = x.shape
    c = len(labels)
    resid = x - means[codes]
    within = resid.T @ resid / (n - c)
    top = max(float(np.max(linalg.eigvalsh(within))), 1e-12)
    within = _floor_within(within, EIG_FLOOR * top)

    center = means.mean(axis=0)
    dm = means - center
    between = dm.T @ dm / (c - 1) - within * np.mean(1.0 / counts)
    between = _clip_between(between, within)
    return PldaModel(center, between, within, means, counts.astype(np.float64), labels)
