"""Multiplicative gamma-kernel density estimation on the nonnegative orthant.

At a query point ``x`` the estimate averages, over stored samples ``X_m``,
the product over dimensions of the gamma pdf with shape ``x_k / b_k + 1`` and
scale ``b_k`` evaluated at ``X_mk`` (Chen's first gamma kernel). Because the
kernel varies with the query point the raw estimate does not integrate to
one; by default it is divided by its exact total mass, which factorises over
samples and dimensions and is a smooth function of ``X_mk / b_k`` alone.

Queries outside the axis-aligned hull of the samples return a constant floor.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp, xlogy

from .errors import DegenerateDimensionError, DomainError

# trapezoid grid for the kernel-mass integral in log-time coordinates
_S_LO = -40.0
_S_STEP = 0.05


def scott_bandwidths(points, sign: int = -1) -> np.ndarray:
    """Per-dimension rule-of-thumb ``M^(sign / (d + 4)) * sd_k``."""
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    M, d = X.shape
    if M < 2:
        raise DomainError("at least 2 samples required for bandwidth selection")
    sd = X.std(axis=0, ddof=1)
    for k in range(d):
        if not sd[k] > 0:
            raise DegenerateDimensionError(k)
    return M ** (sign / (d + 4.0)) * sd


def kernel_mass(y) -> np.ndarray:
    """Total mass ``int_0^inf K(x) dx`` of one gamma kernel, ``y = X / b``.

    Uses ``int_0^inf y^u / Gamma(u + 1) du = e^y - int exp(-y e^s) / (s^2 + pi^2) ds``
    so the mass is ``1 - e^{-y} * int exp(-y e^s) / (s^2 + pi^2) ds``.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    out = np.ones_like(y)
    small = y < 60.0
    out[y == 0] = 0.0
    todo = small & (y > 0)
    if np.any(todo):
        yy = y[todo]
        s_hi = max(np.log(800.0 / yy.min()), 10.0)
        s = np.arange(_S_LO, s_hi + _S_STEP, _S_STEP)
        w = 1.0 / (s * s + np.pi ** 2)
        tail = (0.5 - np.arctan(-_S_LO / np.pi) / np.pi)
        vals = np.empty(yy.shape)
        for lo in range(0, yy.size, 4096):
            chunk = yy[lo:lo + 4096]
            f = np.exp(-chunk[:, None] * np.exp(s)[None, :]) * w
            vals[lo:lo + 4096] = np.trapezoid(f, s, axis=1) + tail
        out[todo] = 1.0 - np.exp(-yy) * vals
    return out


def _log_kernel(x, X, b):
    """``(Q, M)`` log kernel values for queries ``x (Q, d)`` and samples ``X (M, d)``."""
    shape = x / b + 1.0
    logb = np.log(b)
    # (Q, M, d) accumulated one dimension at a time to bound memory
    total = np.zeros((x.shape[0], X.shape[0]))
    for k in range(X.shape[1]):
        a = shape[:, k:k + 1]
        total += xlogy(a - 1.0, X[None, :, k]) - X[None, :, k] / b[k] - gammaln(a) - a * logb[k]
    return total


@dataclass(frozen=True)
class GammaKernelKde:
    points: np.ndarray
    bandwidths: np.ndarray
    log_floor: float
    lower: np.ndarray
    upper: np.ndarray
    log_norm: float = 0.0

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def inside(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.all((x >= self.lower) & (x <= self.upper), axis=1)

    def raw_log_density(self, x) -> np.ndarray:
        """Normalised estimate with no floor, for ``(Q, d)`` queries."""
        x = self._check(x)
        M = self.points.shape[0]
        out = np.empty(x.shape[0])
        for lo in range(0, x.shape[0], 64):
            lk = _log_kernel(x[lo:lo + 64], self.points, self.bandwidths)
            out[lo:lo + 64] = logsumexp(lk, axis=1) - np.log(M)
        return out - self.log_norm

    def log_density(self, x, floor: bool = True):
        """Log-density at one point (returns float) or a ``(Q, d)`` batch."""
        single = np.ndim(x) <= 1
        xx = self._check(x)
        out = self.raw_log_density(xx)
        if floor:
            out = np.where(self.inside(xx), np.maximum(out, self.log_floor), self.log_floor)
        return float(out[0]) if single else out

    def _check(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim <= 1:
            x = x.reshape(1, -1)
        if x.shape[1] != self.dim:
            raise DomainError(f"query dimension {x.shape[1]} != KDE dimension {self.dim}")
        if not np.all(np.isfinite(x)):
            raise DomainError("query must be finite")
        if np.any(x < 0):
            raise DomainError("gamma-kernel KDE is defined on nonnegative coordinates only")
        return x


def fit(points, floor: float | None = None, bandwidths=None, normalize: bool = True,
        bandwidth_sign: int = -1) -> GammaKernelKde:
    """Fit a gamma-kernel KDE.

    ``floor`` is the density reported outside the sample hull; by default it is
    ``exp(mean in-sample log-density - 10)``. ``bandwidths`` overrides the
    rule-of-thumb choice.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[0] < 2:
        raise DomainError("at least 2 samples required")
    if not np.all(np.isfinite(X)) or np.any(X < 0):
        raise DomainError("KDE samples must be finite and nonnegative")
    if floor is not None and not floor > 0:
        raise DomainError("floor must be positive")
    # lexicographic order fixes every summation order, so input order is irrelevant
    X = X[np.lexsort(X.T[::-1])]
    b = scott_bandwidths(X, sign=bandwidth_sign) if bandwidths is None else np.asarray(
        bandwidths, dtype=float).reshape(-1)
    if b.shape[0] != X.shape[1] or np.any(~(b > 0)):
        raise DomainError("bandwidths must be positive, one per dimension")
    log_norm = 0.0
    if normalize:
        mass = np.prod(kernel_mass(X / b).reshape(X.shape), axis=1)
        log_norm = float(np.log(np.mean(mass)))
    kde = GammaKernelKde(X, b, 0.0, X.min(axis=0), X.max(axis=0), log_norm)
    if floor is None:
        log_floor = float(np.mean(kde.raw_log_density(X))) - 10.0
    else:
        log_floor = float(np.log(floor))
    return GammaKernelKde(X, b, log_floor, kde.lower, kde.upper, log_norm)
