"""Convergence diagnostics and posterior summaries of chain traces."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import DomainError
from .realization_io import RealizationStore
from .trace import ChainTrace, concat


def geweke_z(series, frac_a: float = 0.1, frac_b: float = 0.5, method: str = "ar") -> float:
    """Compare the mean of the first ``frac_a`` with the last ``frac_b`` of a chain.

    Variances of the two means come from the spectral density at zero of an
    autoregressive fit to each segment (order picked by AIC), or from
    non-overlapping batch means with ``method="batch"``.
    """
    x = np.asarray(series, dtype=float)
    if x.shape[0] < 100:
        raise DomainError("Geweke diagnostic needs at least 100 values")
    if not (0 < frac_a < 1 and 0 < frac_b < 1 and frac_a + frac_b <= 1):
        raise DomainError("segment fractions must be positive and sum to at most 1")
    a = x[: int(frac_a * x.shape[0])]
    b = x[x.shape[0] - int(frac_b * x.shape[0]):]
    diff = a.mean() - b.mean()
    if method == "ar":
        var = spectrum0(a) / a.size + spectrum0(b) / b.size
    elif method == "batch":
        var = _batch_mean_var(a) + _batch_mean_var(b)
    else:
        raise DomainError(f"unknown Geweke variance method {method!r}")
    if var == 0:
        return 0.0 if diff == 0 else math.copysign(math.inf, diff)
    return float(diff / math.sqrt(var))


def spectrum0(x, max_order: int | None = None) -> float:
    """Spectral density at frequency zero from a Yule-Walker AR fit."""
    x = np.asarray(x, dtype=float)
    L = x.size
    c = x - x.mean()
    c0 = float(c @ c) / L
    if c0 == 0:
        return 0.0
    if max_order is None:
        max_order = min(L - 1, int(10 * math.log10(L)))
    acov = np.array([c0] + [float(c[:-k] @ c[k:]) / L for k in range(1, max_order + 1)])
    best = (L * math.log(c0), c0, np.zeros(0))
    for p in range(1, max_order + 1):
        try:
            phi = linalg.solve_toeplitz(acov[:p], acov[1:p + 1])
        except np.linalg.LinAlgError:
            break
        v = acov[0] - float(phi @ acov[1:p + 1])
        if not v > 0:
            break
        aic = L * math.log(v) + 2 * p
        if aic < best[0]:
            best = (aic, v, phi)
    _, v, phi = best
    return v / (1.0 - float(np.sum(phi))) ** 2


def _batch_mean_var(x: np.ndarray) -> float:
    """Variance of the sample mean of ``x`` from ``sqrt(length)``-sized batches."""
    L = x.shape[0]
    size = max(1, int(math.sqrt(L)))
    nb = L // size
    if nb < 2:
        return float(np.var(x, ddof=1) / L) if L > 1 else 0.0
    means = x[: nb * size].reshape(nb, size).mean(axis=1)
    return float(np.var(means, ddof=1) / nb)


def rhat(chains, split: bool = False) -> float:
    """Classic Gelman-Rubin potential scale reduction factor.

    ``chains`` is a sequence of equal-length 1-d series. With ``split`` each
    chain is halved first.
    """
    arr = np.asarray([np.asarray(c, dtype=float) for c in chains])
    if split:
        half = arr.shape[1] // 2
        arr = np.concatenate((arr[:, :half], arr[:, half: 2 * half]))
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise DomainError("Rhat needs at least 2 chains of equal length")
    m, R = arr.shape
    if R < 10:
        raise DomainError("Rhat needs chains of length at least 10")
    W = float(np.mean(np.var(arr, axis=1, ddof=1)))
    B = R * float(np.var(arr.mean(axis=1), ddof=1))
    if W == 0:
        return math.nan if B == 0 else math.inf
    return math.sqrt(((R - 1) / R * W + B / R) / W)


def interval(values, level: float = 0.95, method: str = "equal") -> tuple[float, float]:
    """Equal-tailed or highest-density interval from draws."""
    x = np.sort(np.asarray(values, dtype=float))
    if x.size == 0:
        raise DomainError("no draws to summarise")
    if method == "equal":
        tail = 0.5 * (1.0 - level)
        lo, hi = np.quantile(x, [tail, 1.0 - tail])
        return float(lo), float(hi)
    if method == "hdi":
        k = max(1, int(math.ceil(level * x.size)))
        if k >= x.size:
            return float(x[0]), float(x[-1])
        widths = x[k - 1:] - x[: x.size - k + 1]
        s = int(np.argmin(widths))
        return float(x[s]), float(x[s + k - 1])
    raise DomainError(f"unknown interval method {method!r}")


@dataclass(frozen=True)
class Summary:
    mean: float
    lo: float
    hi: float


def summarize(values, method: str = "equal") -> Summary:
    lo, hi = interval(values, method=method)
    return Summary(float(np.mean(values)), lo, hi)


def _pool(traces) -> ChainTrace:
    if isinstance(traces, ChainTrace):
        return traces
    return concat(list(traces))


@dataclass(frozen=True)
class JumpSummary:
    inclusion: float
    mean: float | None
    lo: float | None
    hi: float | None


def conditional_mean_beta(traces, j: int, method: str = "equal") -> JumpSummary:
    """Inclusion probability of jump ``j`` and its summary given inclusion."""
    t = _pool(traces)
    on = t.gamma[:, j] == 1
    p = float(np.mean(on))
    if not on.any():
        return JumpSummary(p, None, None, None)
    s = summarize(t.beta[on, j], method)
    return JumpSummary(p, s.mean, s.lo, s.hi)


def absolute_timecourse(traces, season: int, conditional: bool = True) -> float:
    """Mean TMRCA level at 0-based ``season`` averaged over segments.

    With ``conditional`` the level is ``E(mean alpha) + sum_k E(beta_k | gamma_k = 1)``
    over the jumps preceding the season, a never-included jump adding 0.
    Otherwise it is the average over iterations of ``mean alpha + sum_k gamma_k beta_k``.
    """
    t = _pool(traces)
    if not 0 <= season < t.n_seasons:
        raise DomainError(f"season {season} out of range")
    base = float(np.mean(t.alpha.mean(axis=1)))
    if not conditional:
        jumps = (t.gamma[:, :season] * t.beta[:, :season]).sum(axis=1)
        return base + float(np.mean(jumps))
    total = base
    for k in range(season):
        s = conditional_mean_beta(t, k)
        total += 0.0 if s.mean is None else s.mean
    return total


def model_posterior_prob(traces, pattern, restrict: str = "exact") -> float:
    """Fraction of iterations whose indicators match ``pattern`` (jump indices)."""
    t = _pool(traces)
    idx = sorted(set(int(k) for k in pattern))
    if any(not 0 <= k < t.gamma.shape[1] for k in idx):
        raise DomainError("pattern refers to a nonexistent jump")
    on = np.all(t.gamma[:, idx] == 1, axis=1) if idx else np.ones(len(t), bool)
    if restrict == "at-least":
        return float(np.mean(on))
    if restrict != "exact":
        raise DomainError(f"unknown restriction {restrict!r}")
    rest = np.delete(np.arange(t.gamma.shape[1]), idx)
    off = np.all(t.gamma[:, rest] == 0, axis=1) if rest.size else np.ones(len(t), bool)
    return float(np.mean(on & off))


def neighbor_probability(traces, i: int, k: int, rho_threshold: float = 0.2):
    """``(P(|p_i - p_k| = 1 | rho > threshold), P(rho > threshold))``."""
    t = _pool(traces)
    if t.rho is None:
        raise DomainError("neighbor probabilities need a correlated structured model")
    keep = t.rho > rho_threshold
    p_rho = float(np.mean(keep))
    if not keep.any():
        raise DomainError(f"no iterations with rho > {rho_threshold}; probability undefined")
    adj = np.abs(t.perm[keep, i] - t.perm[keep, k]) == 1
    return float(np.mean(adj)), p_rho


def neighbor_matrix(traces, rho_threshold: float = 0.2) -> tuple[np.ndarray, float]:
    t = _pool(traces)
    n = t.n_segments
    out = np.zeros((n, n))
    p_rho = 0.0
    for i, k in itertools.combinations(range(n), 2):
        out[i, k], p_rho = neighbor_probability(t, i, k, rho_threshold)
        out[k, i] = out[i, k]
    return out, p_rho


def is_grouped(perm, group) -> np.ndarray:
    """Whether the segments in ``group`` occupy consecutive positions.

    ``perm`` may be one permutation or a stack of them.
    """
    perm = np.atleast_2d(perm)
    pos = np.sort(perm[:, list(group)], axis=1)
    return np.all(np.diff(pos, axis=1) == 1, axis=1)


def prior_group_probability(n: int, groups) -> float:
    """Probability under a uniform permutation that every group is consecutive."""
    perms = np.array(list(itertools.permutations(range(n))))
    ok = np.ones(perms.shape[0], dtype=bool)
    for g in groups:
        ok &= is_grouped(perms, g)
    return float(np.mean(ok))


def posterior_group_probability(traces, groups) -> float:
    t = _pool(traces)
    ok = np.ones(len(t), dtype=bool)
    for g in groups:
        ok &= is_grouped(t.perm, g)
    return float(np.mean(ok))


def odds(p: float) -> float:
    return math.inf if p >= 1 else p / (1.0 - p)


def bayes_factor(posterior_odds: float, prior_odds: float) -> float:
    if not (posterior_odds > 0 and prior_odds > 0):
        raise DomainError("odds must be positive")
    return posterior_odds / prior_odds


def diagnostics(traces: list[ChainTrace], split: bool = False) -> list[dict]:
    """Per-parameter Rhat (when several chains) and per-chain Geweke z."""
    series = [t.continuous() for t in traces]
    rows = []
    for name in series[0]:
        row = {"parameter": name}
        chains = [s[name] for s in series]
        L = min(len(c) for c in chains)
        row["rhat"] = rhat([c[:L] for c in chains], split) if len(chains) > 1 and L >= 10 \
            else math.nan
        for c, s in enumerate(chains):
            row[f"geweke_{c + 1}"] = geweke_z(s) if len(s) >= 100 else math.nan
        rows.append(row)
    return rows


def shrinkage_table(traces, store: RealizationStore, method: str = "equal") -> list[dict]:
    """Stratified versus hierarchical summaries for every segment and season."""
    t = _pool(traces)
    n, M, J = store.data.shape
    sel = t.selected
    if sel.shape[1] != n or sel.min() < 0 or sel.max() >= M:
        raise DomainError("selected realization indices do not match the store")
    strat_means = store.data.mean(axis=1)
    grand = strat_means.mean(axis=0)
    rows = []
    for i in range(n):
        hier = store.data[i, sel[:, i], :]
        for j in range(J):
            common = {"segment": store.segment_labels[i], "season": store.season_labels[j],
                      "grand_mean": float(grand[j])}
            for source, draws in (("stratified", store.data[i, :, j]),
                                  ("hierarchical", hier[:, j])):
                s = summarize(draws, method)
                rows.append({**common, "source": source, "mean": s.mean, "lo": s.lo,
                             "hi": s.hi})
    return rows
