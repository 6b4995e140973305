"""Hierarchical normal model for per-season segment TMRCAs.

Season ``j`` (0-based) of the segment vector is modelled as

    T_j ~ N(alpha + c_j * 1, Sigma),   c_j = sum_{k < j} gamma_k * beta_k

where ``beta_k`` is the jump entering season ``k + 1`` and ``gamma_k`` its
inclusion indicator. Segment positions under a permutation only matter for
the AR1 and TRI structures.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DomainError, PDViolationError

KINDS = ("ind", "cs", "uns", "ar1", "tri")
PERMUTABLE = ("ar1", "tri")
_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CovarianceSpec:
    kind: str
    sigma2: float | None = None
    rho: float | None = None
    matrix: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise DomainError(
                f"unknown covariance kind {self.kind!r}; allowed: {', '.join(KINDS)}")
        if kind == "uns":
            if self.matrix is None:
                raise DomainError("UNS covariance requires a matrix")
            m = np.asarray(self.matrix, dtype=float)
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise DomainError("UNS matrix must be square")
            object.__setattr__(self, "matrix", m)
            return
        if self.sigma2 is None or not self.sigma2 > 0 or not np.isfinite(self.sigma2):
            raise DomainError(f"sigma2 must be positive and finite, got {self.sigma2}")
        if kind != "ind":
            if self.rho is None or not -1.0 < self.rho < 1.0:
                raise DomainError(f"rho must lie in (-1, 1), got {self.rho}")

    @property
    def diagonal(self) -> bool:
        if self.kind == "ind":
            return True
        if self.kind == "uns":
            m = self.matrix
            return bool(np.all(m == np.diag(np.diag(m))))
        return self.rho == 0.0


@dataclass(frozen=True)
class HierParams:
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    cov: CovarianceSpec
    perm: np.ndarray

    def __post_init__(self):
        gamma = np.asarray(self.gamma)
        if not np.all((gamma == 0) | (gamma == 1)):
            raise DomainError("gamma entries must be 0 or 1")
        perm = np.asarray(self.perm)
        n = np.asarray(self.alpha).shape[0]
        if perm.shape != (n,) or not np.array_equal(np.sort(perm), np.arange(n)):
            raise DomainError("perm must be a permutation of 0..n-1")
        if np.asarray(self.beta).shape != gamma.shape:
            raise DomainError("beta and gamma must have the same length")

    @property
    def n_segments(self) -> int:
        return int(np.asarray(self.alpha).shape[0])

    @property
    def n_seasons(self) -> int:
        return int(np.asarray(self.beta).shape[0]) + 1


def build_design(n_seasons: int) -> np.ndarray:
    """Additive cumulative design: row ``j`` has ``j`` leading ones."""
    if n_seasons < 2:
        raise DomainError(f"need at least 2 seasons, got {n_seasons}")
    return np.tril(np.ones((n_seasons, n_seasons - 1)), k=-1)


def season_offsets(beta, gamma) -> np.ndarray:
    """Shared time-course offset ``c_j`` for every season (``c_0 = 0``)."""
    active = np.asarray(gamma, dtype=float) * np.asarray(beta, dtype=float)
    return np.concatenate(([0.0], np.cumsum(active)))


def season_mean(j: int, params: HierParams) -> np.ndarray:
    """Mean segment vector at 0-based season ``j``."""
    c = season_offsets(params.beta, params.gamma)
    if not 0 <= j < c.shape[0]:
        raise DomainError(f"season index {j} out of range")
    return np.asarray(params.alpha, dtype=float) + c[j]


def mean_matrix(params: HierParams) -> np.ndarray:
    """``(n, J)`` matrix of means for every segment and season."""
    c = season_offsets(params.beta, params.gamma)
    return np.asarray(params.alpha, dtype=float)[:, None] + c[None, :]


def materialize_covariance(spec: CovarianceSpec, perm=None, n: int | None = None) -> np.ndarray:
    if spec.kind == "uns":
        sigma = spec.matrix.copy()
    else:
        if perm is None:
            if n is None:
                raise DomainError("segment count unknown: pass perm or n")
            perm = np.arange(n)
        pos = np.asarray(perm)
        n = pos.shape[0]
        s2, rho = spec.sigma2, spec.rho
        if spec.kind == "ind":
            sigma = s2 * np.eye(n)
        elif spec.kind == "cs":
            sigma = s2 * ((1.0 - rho) * np.eye(n) + rho * np.ones((n, n)))
        else:
            dist = np.abs(pos[:, None] - pos[None, :])
            if spec.kind == "ar1":
                sigma = s2 * np.power(rho, dist)
            else:
                sigma = s2 * (np.eye(n) + rho * (dist == 1))
    check_pd(sigma)
    return sigma


def check_pd(sigma: np.ndarray) -> np.ndarray:
    """Return the lower Cholesky factor or raise ``PDViolationError``."""
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sigma).max())):
        raise PDViolationError("covariance matrix is not symmetric")
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        raise PDViolationError("covariance matrix is not positive definite") from None


class Factor:
    """Cholesky factor, precision and log-determinant of one covariance."""

    def __init__(self, sigma: np.ndarray):
        self.sigma = sigma
        self.chol = check_pd(sigma)
        self.logdet = 2.0 * float(np.sum(np.log(np.diag(self.chol))))
        n = sigma.shape[0]
        self.precision = linalg.cho_solve((self.chol, True), np.eye(n))

    def loglik(self, resid: np.ndarray) -> float:
        """Sum over columns of the ``N(0, sigma)`` log-density of ``resid``."""
        n, J = resid.shape
        z = linalg.solve_triangular(self.chol, resid, lower=True)
        return float(-0.5 * np.sum(z * z) - 0.5 * J * (self.logdet + n * _LOG_2PI))


def log_likelihood(T: np.ndarray, params: HierParams) -> float:
    """Joint log-density of the ``(n, J)`` TMRCA matrix under the model."""
    sigma = materialize_covariance(params.cov, params.perm)
    return Factor(sigma).loglik(np.asarray(T, dtype=float) - mean_matrix(params))


def conditional_segment_logpdf(i, t_i, current, means, precision) -> np.ndarray:
    """Vectorised core of :func:`log_conditional_segment_density`.

    ``t_i`` may carry leading batch axes; its last axis runs over seasons.
    """
    q = precision[i]
    var = 1.0 / q[i]
    others = np.delete(np.arange(precision.shape[0]), i)
    shift = (q[others] @ (current[others] - means[others])) * var
    mu = means[i] - shift
    resid = np.asarray(t_i, dtype=float) - mu
    J = resid.shape[-1]
    return -0.5 * np.sum(resid * resid, axis=-1) / var - 0.5 * J * (np.log(var) + _LOG_2PI)


def log_conditional_segment_density(i: int, t_i, current, params: HierParams):
    """Log-density of segment ``i``'s season vector given the other segments.

    ``current`` is the ``(n, J)`` matrix of currently selected TMRCAs; its row
    ``i`` is ignored. Each season contributes the exact conditional normal of
    component ``i`` given the remaining components.
    """
    sigma = materialize_covariance(params.cov, params.perm)
    fac = Factor(sigma)
    return conditional_segment_logpdf(
        i, t_i, np.asarray(current, dtype=float), mean_matrix(params), fac.precision)
