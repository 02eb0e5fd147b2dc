"""Self-contained statistical kernel used by the pipeline stages.

Local regression, weighted least squares, quantiles, histogram entropy,
Gaussian kernel weights, and a truncated-eigenvalue Gaussian model with
conditional expectations.  Everything here is a pure function of its
arguments; numpy supplies array arithmetic and the symmetric
eigendecomposition, the statistical logic is implemented directly so the
test suite can check it against independent brute-force oracles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LoopgridError, _frozen_array


class TooFewPoints(LoopgridError):
    pass


class DegenerateDesign(LoopgridError):
    pass


class EmptyInput(LoopgridError):
    pass


class NotNormalized(LoopgridError):
    pass


class RankTooLarge(LoopgridError):
    pass


class TooFewDays(LoopgridError):
    pass


class SingularConditioningBlock(LoopgridError):
    pass


@dataclass(frozen=True)
class LoessFit:
    """Result of a local-regression smooth evaluated on a fixed grid."""

    x: np.ndarray
    fitted: np.ndarray
    span: float
    degree: int

    def __post_init__(self):
        x = _frozen_array(self.x, np.float64)
        fitted = _frozen_array(self.fitted, np.float64)
        if x.ndim != 1 or x.shape != fitted.shape:
            raise LoopgridError("loess abscissae/ordinate shapes disagree")
        if x.size > 1 and not np.all(np.diff(x) > 0):
            raise LoopgridError("evaluation abscissae must be strictly increasing")
        if not np.all(np.isfinite(fitted)):
            raise LoopgridError("loess produced non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "fitted", fitted)


def _local_fit(x, y, x0, q, degree):
    """Tricube-weighted polynomial fit around x0, evaluated at x0."""
    d = np.abs(x - x0)
    h = np.partition(d, q - 1)[q - 1]
    if h == 0.0:
        # every point in the window sits exactly at x0
        if degree >= 1 and np.unique(x[d == 0.0]).size <= degree:
            raise DegenerateDesign(f"all abscissae identical around x={x0}")
        return float(np.mean(y[d == 0.0]))
    u = d / h
    w = np.zeros_like(u)
    inside = u < 1.0
    w[inside] = (1.0 - u[inside] ** 3) ** 3
    # the q-th nearest point lands exactly on the window edge with weight
    # zero; make sure enough support remains for the polynomial
    if np.count_nonzero(w) < degree + 1:
        w[d <= h] = np.maximum(w[d <= h], 1e-12)
    active = w > 0.0
    wa = w[active]
    za = x[active] - x0
    ya = y[active]
    if degree == 0:
        return float(np.dot(wa, ya) / wa.sum())
    if np.unique(za).size <= degree:
        raise DegenerateDesign(f"fewer than degree+1 distinct abscissae near x={x0}")
    if degree == 1:
        # closed-form weighted line through the centered design
        sw = wa.sum()
        sz = np.dot(wa, za)
        szz = np.dot(wa, za * za)
        sy = np.dot(wa, ya)
        szy = np.dot(wa, za * ya)
        denom = sw * szz - sz * sz
        if denom <= 1e-14 * max(sw * szz + sz * sz, 1.0):
            raise DegenerateDesign(f"singular local design at x={x0}")
        slope = (sw * szy - sz * sy) / denom
        return float((sy - slope * sz) / sw)
    design = np.vander(za, degree + 1, increasing=True)
    sw = np.sqrt(wa)
    coef, *_ = np.linalg.lstsq(design * sw[:, None], ya * sw, rcond=None)
    return float(coef[0])


def loess_fit(x, y, span=0.3, degree=1, eval_x=None):
    """Locally weighted polynomial regression (tricube weights).

    At each evaluation point the ``span`` fraction of nearest data points
    receives tricube weights on distance scaled by the window radius, and
    a degree-``degree`` polynomial is fit by weighted least squares.
    Evaluation points outside the data range are served by the same local
    fit built from the nearest window, i.e. polynomial extrapolation.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise LoopgridError("x and y must be 1-D and equally long")
    if not (0.0 < span <= 1.0):
        raise LoopgridError(f"span must be in (0, 1], got {span}")
    if degree < 0:
        raise LoopgridError("degree must be non-negative")
    n = x.size
    if n < degree + 1:
        raise TooFewPoints(f"need at least {degree + 1} points, got {n}")
    if eval_x is None:
        eval_x = np.unique(x)
    eval_x = np.asarray(eval_x, dtype=np.float64)
    q = max(degree + 1, int(math.ceil(span * n)))
    q = min(q, n)
    fitted = np.array([_local_fit(x, y, x0, q, degree) for x0 in eval_x])
    return LoessFit(x=eval_x, fitted=fitted, span=span, degree=degree)


def wls_fit(x, y, weights):
    """Closed-form weighted least squares line: returns (intercept, slope)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if x.shape != y.shape or x.shape != w.shape or x.ndim != 1:
        raise LoopgridError("x, y, weights must be 1-D and equally long")
    if np.any(w < 0):
        raise LoopgridError("weights must be non-negative")
    sw = w.sum()
    if sw <= 0:
        raise DegenerateDesign("total weight is zero")
    if np.unique(x[w > 0]).size < 2:
        raise DegenerateDesign("need two distinct x with positive weight")
    sx = np.dot(w, x)
    sy = np.dot(w, y)
    sxx = np.dot(w, x * x)
    sxy = np.dot(w, x * y)
    denom = sw * sxx - sx * sx
    scale = sw * sxx + sx * sx
    if denom <= 1e-14 * max(scale, 1.0):
        raise DegenerateDesign("design matrix is numerically singular")
    slope = (sw * sxy - sx * sy) / denom
    intercept = (sy - slope * sx) / sw
    return float(intercept), float(slope)


def percentile(values, p):
    """Linear-interpolation quantile at rank 1 + p*(n-1) of the sorted sample."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise EmptyInput("percentile of an empty sample")
    if not (0.0 <= p <= 1.0):
        raise LoopgridError(f"p must be in [0, 1], got {p}")
    v = np.sort(v)
    rank = p * (v.size - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, v.size - 1)
    frac = rank - lo
    return float(v[lo] + frac * (v[hi] - v[lo]))


def entropy(masses):
    """Shannon entropy in nats of a normalized histogram."""
    p = np.asarray(masses, dtype=np.float64).ravel()
    if np.any(p < 0):
        raise NotNormalized("negative bin mass")
    if abs(p.sum() - 1.0) > 1e-9:
        raise NotNormalized(f"bin masses sum to {p.sum()}, not 1")
    pos = p[p > 0]
    return float(-(pos * np.log(pos)).sum())


def gaussian_weight(distance, bandwidth):
    """Mean-zero Gaussian density with standard deviation ``bandwidth``."""
    if np.ndim(bandwidth) == 0 and bandwidth <= 0:
        raise LoopgridError("bandwidth must be positive")
    d = np.asarray(distance, dtype=np.float64)
    out = np.exp(-0.5 * (d / bandwidth) ** 2) / (bandwidth * math.sqrt(2.0 * math.pi))
    return float(out) if np.ndim(distance) == 0 else out


@dataclass(frozen=True)
class TruncatedGaussianModel:
    """Gaussian with covariance kept as its top-r eigenpairs plus a ridge."""

    mean: np.ndarray
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    ridge: float

    def __post_init__(self):
        mean = _frozen_array(self.mean, np.float64)
        vals = _frozen_array(self.eigenvalues, np.float64)
        vecs = _frozen_array(self.eigenvectors, np.float64)
        if vecs.shape != (mean.size, vals.size):
            raise LoopgridError("eigenvector block has wrong shape")
        if np.any(vals < 0) or np.any(np.diff(vals) > 1e-12 * max(1.0, vals[0] if vals.size else 1.0)):
            raise LoopgridError("eigenvalues must be non-negative and non-increasing")
        if self.ridge < 0:
            raise LoopgridError("ridge must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "eigenvalues", vals)
        object.__setattr__(self, "eigenvectors", vecs)

    @property
    def dim(self):
        return self.mean.size

    @property
    def rank(self):
        return self.eigenvalues.size

    def covariance(self):
        """Reconstructed covariance: V diag(lambda) V^T + ridge * I."""
        cov = (self.eigenvectors * self.eigenvalues) @ self.eigenvectors.T
        cov = 0.5 * (cov + cov.T)
        if self.ridge > 0:
            cov = cov + self.ridge * np.eye(self.dim)
        return cov


def fit_truncated_gaussian(vectors, r, ridge=None):
    """Sample mean plus the top-r eigenpairs of the empirical covariance.

    ``ridge`` defaults to 1e-6 * trace/dim of the empirical covariance so
    conditioning blocks stay invertible even when the retained rank is far
    below the dimension.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise LoopgridError("vectors must be a 2-D (observations, dim) array")
    n, dim = x.shape
    if n < 2:
        raise TooFewDays(f"need at least 2 vectors, got {n}")
    if not (1 <= r <= dim):
        raise RankTooLarge(f"rank {r} outside 1..{dim}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:r]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    if ridge is None:
        ridge = 1e-6 * float(np.trace(cov)) / dim
    return TruncatedGaussianModel(mean=mean, eigenvalues=vals, eigenvectors=vecs, ridge=float(ridge))


def conditional_expectation(model, observed_indices, observed_values):
    """E[x_unobserved | x_observed] under the truncated Gaussian model.

    Standard partitioned-Gaussian formula
    mu_u + Sigma_uo Sigma_oo^{-1} (x_o - mu_o); an empty observation set
    returns the unconditional mean of the complement.
    """
    obs = np.asarray(observed_indices, dtype=np.intp).ravel()
    vals = np.asarray(observed_values, dtype=np.float64).ravel()
    if obs.size != vals.size:
        raise LoopgridError("observed indices and values differ in length")
    if obs.size > 0 and (obs.min() < 0 or obs.max() >= model.dim):
        raise LoopgridError("observed index out of range")
    if np.unique(obs).size != obs.size:
        raise LoopgridError("observed indices must be unique")
    if obs.size >= model.dim:
        raise LoopgridError("observed indices must be a strict subset")
    unobs = np.setdiff1d(np.arange(model.dim), obs)
    if obs.size == 0:
        return model.mean[unobs].copy()
    cov = model.covariance()
    sigma_oo = cov[np.ix_(obs, obs)]
    sigma_uo = cov[np.ix_(unobs, obs)]
    try:
        sol = np.linalg.solve(sigma_oo, vals - model.mean[obs])
    except np.linalg.LinAlgError as exc:
        raise SingularConditioningBlock(str(exc)) from None
    return model.mean[unobs] + sigma_uo @ sol
