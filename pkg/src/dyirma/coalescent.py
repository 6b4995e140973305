"""Heterochronous coalescent under a piecewise-constant population size.

Times are measured backwards from the most recent sample (time 0) in years.
With ``k`` lineages and population size ``phi`` pairs coalesce at rate
``k (k - 1) / (2 phi)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError
from .realization_io import PriorSamples


@dataclass(frozen=True)
class SamplingSchedule:
    sample_times: np.ndarray
    season_of_taxon: np.ndarray
    season_labels: tuple[str, ...] = ()

    def __post_init__(self):
        t = np.asarray(self.sample_times, dtype=float)
        s = np.asarray(self.season_of_taxon, dtype=np.int64)
        object.__setattr__(self, "sample_times", t)
        object.__setattr__(self, "season_of_taxon", s)
        if t.ndim != 1 or t.shape != s.shape:
            raise DomainError("sample_times and season_of_taxon must be equal-length vectors")
        if t.size == 0 or np.any(t < 0) or not np.all(np.isfinite(t)):
            raise DomainError("sample times must be finite and nonnegative")
        if not np.any(t == 0):
            raise DomainError("at least one taxon must be sampled at time 0")
        if np.any(s < 0):
            raise DomainError("season indices must be nonnegative")
        if not self.season_labels:
            labels = tuple(str(j + 1) for j in range(int(s.max()) + 1))
            object.__setattr__(self, "season_labels", labels)
        if s.max() >= len(self.season_labels):
            raise DomainError("season index beyond the season labels")

    @classmethod
    def from_seasons(cls, taxa_per_season, season_times, season_labels=()):
        """One sampling time per season, ``taxa_per_season[j]`` tips each."""
        counts = [int(c) for c in taxa_per_season]
        if len(counts) != len(season_times):
            raise DomainError("taxa_per_season and season_times differ in length")
        times = np.repeat(np.asarray(season_times, dtype=float), counts)
        seasons = np.repeat(np.arange(len(counts)), counts)
        return cls(times, seasons, tuple(season_labels))

    @property
    def n_taxa(self) -> int:
        return int(self.sample_times.shape[0])

    @property
    def n_seasons(self) -> int:
        return len(self.season_labels)

    @property
    def n_sampling_times(self) -> int:
        return int(np.unique(self.sample_times).size)


@dataclass(frozen=True)
class PopTrajectory:
    phi: np.ndarray
    change_times: np.ndarray = field(default_factory=lambda: np.zeros(0))
    horizon: float = math.inf

    def __post_init__(self):
        phi = np.atleast_1d(np.asarray(self.phi, dtype=float))
        ct = np.atleast_1d(np.asarray(self.change_times, dtype=float))
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "change_times", ct)
        if phi.size < 1 or np.any(~(phi > 0)) or not np.all(np.isfinite(phi)):
            raise DomainError("population sizes must be positive and finite")
        if ct.size != phi.size - 1:
            raise DomainError("need exactly B - 1 change times for B population sizes")
        if np.any(np.diff(ct) <= 0) or np.any(ct <= 0):
            raise DomainError("change times must be positive and strictly increasing")
        if ct.size and self.horizon <= ct[-1]:
            raise DomainError("horizon must lie beyond the last change time")

    @classmethod
    def constant(cls, phi: float) -> "PopTrajectory":
        return cls(np.array([phi]))

    def epoch(self, t):
        return np.searchsorted(self.change_times, t, side="right")

    def phi_at(self, t):
        return self.phi[self.epoch(t)]

    def cumulative_inverse(self, t):
        """``int_0^t ds / phi(s)``, vectorised over ``t``."""
        t = np.asarray(t, dtype=float)
        edges = np.concatenate(([0.0], self.change_times))
        widths = np.clip(t[..., None] - edges, 0.0, None)
        upper = np.concatenate((np.diff(edges), [np.inf]))
        return np.sum(np.minimum(widths, upper) / self.phi, axis=-1)


@dataclass(frozen=True)
class Genealogy:
    """A dated binary tree plus its event-time representation.

    Nodes ``0..n-1`` are tips; the remaining ``n - 1`` are internal. The event
    arrays index intervals ``e = 1..kappa`` as positions ``0..kappa-1``.
    """

    node_times: np.ndarray
    parent: np.ndarray
    taxon_seasons: np.ndarray
    event_times: np.ndarray = field(init=False)
    event_is_coalescent: np.ndarray = field(init=False)
    lineage_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        nt = np.asarray(self.node_times, dtype=float)
        n = (nt.shape[0] + 1) // 2
        tips = nt[:n]
        internal = nt[n:]
        t0 = tips.min()
        samp = np.unique(tips)[1:]
        times = np.concatenate((samp, internal))
        kinds = np.concatenate((np.zeros(samp.size, bool), np.ones(internal.size, bool)))
        # sampling before coalescence at tied times
        order = np.lexsort((kinds, times))
        times, kinds = times[order], kinds[order]
        counts = np.empty(times.size, dtype=np.int64)
        k = int(np.sum(tips == t0))
        for e, (t, coa) in enumerate(zip(times, kinds)):
            counts[e] = k
            k += -1 if coa else int(np.sum(tips == t))
        object.__setattr__(self, "node_times", nt)
        object.__setattr__(self, "parent", np.asarray(self.parent, dtype=np.int64))
        object.__setattr__(self, "taxon_seasons", np.asarray(self.taxon_seasons, dtype=np.int64))
        object.__setattr__(self, "event_times", np.concatenate(([t0], times)))
        object.__setattr__(self, "event_is_coalescent", kinds)
        object.__setattr__(self, "lineage_counts", counts)

    @property
    def n_taxa(self) -> int:
        return int(self.taxon_seasons.shape[0])

    @property
    def intervals(self) -> np.ndarray:
        return np.diff(self.event_times)

    @property
    def root(self) -> int:
        return int(np.flatnonzero(self.parent < 0)[0])

    @property
    def height(self) -> float:
        return float(self.event_times[-1] - self.event_times[0])

    def ancestors(self, node: int) -> list[int]:
        path = [node]
        while self.parent[path[-1]] >= 0:
            path.append(int(self.parent[path[-1]]))
        return path


def genealogy_from_merges(tip_times, tip_seasons, merges) -> Genealogy:
    """Build a genealogy from ``(child_a, child_b, time)`` merge records.

    Merge ``r`` creates node ``n + r``; children may refer to earlier merges.
    """
    tip_times = np.asarray(tip_times, dtype=float)
    n = tip_times.shape[0]
    if len(merges) != n - 1:
        raise DomainError(f"{n} tips need {n - 1} merges, got {len(merges)}")
    times = np.concatenate((tip_times, np.zeros(n - 1)))
    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    for r, (a, b, t) in enumerate(merges):
        node = n + r
        for child in (a, b):
            if child >= node or parent[child] >= 0:
                raise DomainError(f"invalid child {child} in merge {r}")
            if times[child] > t:
                raise DomainError(f"merge {r} at {t} predates child {child}")
            parent[child] = node
        times[node] = t
    return Genealogy(times, parent, np.asarray(tip_seasons))


def simulate_genealogy(schedule: SamplingSchedule, traj: PopTrajectory, seed=None) -> Genealogy:
    """Draw one genealogy by competing exponential clocks.

    The clock restarts at every coalescence, sampling time and population
    change point, which is exact by memorylessness.
    """
    n = schedule.n_taxa
    if n < 2:
        raise DomainError("need at least 2 taxa")
    if np.any(schedule.sample_times > traj.horizon):
        raise DomainError("sample times beyond the trajectory horizon")
    rng = np.random.default_rng(seed)
    tip_times = schedule.sample_times
    sample_points = np.unique(tip_times)
    tips_at = {t: np.flatnonzero(tip_times == t).tolist() for t in sample_points}

    node_times = np.concatenate((tip_times, np.zeros(n - 1)))
    parent = np.full(2 * n - 1, -1, dtype=np.int64)
    active = list(tips_at[sample_points[0]])
    next_idx = 1
    next_node = n
    t = 0.0
    change = traj.change_times
    while next_node < 2 * n - 1:
        k = len(active)
        next_sample = sample_points[next_idx] if next_idx < sample_points.size else math.inf
        b = int(np.searchsorted(change, t, side="right"))
        boundary = change[b] if b < change.size else traj.horizon
        stop = min(next_sample, boundary)
        wait = math.inf
        if k >= 2:
            wait = rng.exponential(2.0 * traj.phi[b] / (k * (k - 1)))
        if t + wait < stop:
            t += wait
            a = int(rng.integers(k))
            c = int(rng.integers(k - 1))
            if c >= a:
                c += 1
            u, v = active[a], active[c]
            for idx in sorted((a, c), reverse=True):
                active.pop(idx)
            parent[u] = parent[v] = next_node
            node_times[next_node] = t
            active.append(next_node)
            next_node += 1
            continue
        if stop == math.inf:
            raise DomainError("coalescent process cannot complete")
        t = stop
        if next_sample <= boundary:
            active.extend(tips_at[next_sample])
            next_idx += 1
        elif boundary == traj.horizon:
            raise DomainError("genealogy extends beyond the trajectory horizon")
    return Genealogy(node_times, parent, schedule.season_of_taxon)


def log_coalescent_density(g: Genealogy, traj: PopTrajectory) -> float:
    """Log-density of the event times given the population trajectory.

    Each interval contributes ``-k (k - 1) / 2 * int dt / phi(t)`` and each
    coalescent event adds ``log(k (k - 1) / (2 phi))`` at its time. When no
    change point falls inside an interval this is the familiar per-interval
    product with a single ``phi`` per interval.
    """
    t = g.event_times
    if t[-1] > traj.horizon:
        raise DomainError(f"event at {t[-1]} beyond trajectory horizon {traj.horizon}")
    k = g.lineage_counts.astype(float)
    pairs = 0.5 * k * (k - 1.0)
    lam = traj.cumulative_inverse(t)
    exposure = pairs * np.diff(lam)
    coa = g.event_is_coalescent
    rate_terms = np.log(pairs[coa] / traj.phi_at(t[1:][coa]))
    return float(np.sum(rate_terms) - np.sum(exposure))


def tmrca_of_subset(g: Genealogy, season: int) -> float:
    """Time from the subset's most recent tip back to its common ancestor."""
    tips = np.flatnonzero(g.taxon_seasons == season)
    if tips.size == 0:
        raise DomainError(f"no tips sampled in season {season}")
    if tips.size == 1:
        return 0.0
    common = None
    for tip in tips:
        anc = g.ancestors(int(tip))
        if common is None:
            common = anc
        else:
            keep = set(anc)
            common = [a for a in common if a in keep]
    mrca = common[0]
    return float(g.node_times[mrca] - g.node_times[tips].min())


def season_tmrcas(g: Genealogy, n_seasons: int) -> np.ndarray:
    return np.array([tmrca_of_subset(g, j) for j in range(n_seasons)])


@dataclass(frozen=True)
class PhiHyperprior:
    """Hyperprior on piecewise-constant population sizes.

    ``phi_1`` is log-uniform on ``[phi_min, phi_max]`` (a proper stand-in for
    the scale-invariant prior); each later ``phi_b`` is exponential with mean
    ``phi_{b-1}`` truncated to ``(0, phi_max]``. Change points sit on an even
    grid over ``[0, span]``.
    """

    groups: int = 1
    phi_min: float = 1e-3
    phi_max: float = 120_000.0
    span: float | None = None

    def __post_init__(self):
        if self.groups < 1:
            raise ConfigError("groups must be at least 1")
        if not (0 < self.phi_min <= self.phi_max) or not math.isfinite(self.phi_max):
            raise ConfigError(
                f"phi bounds must satisfy 0 < phi_min <= phi_max < inf, "
                f"got [{self.phi_min}, {self.phi_max}]")

    def change_times(self, schedule: SamplingSchedule) -> np.ndarray:
        if self.groups == 1:
            return np.zeros(0)
        span = self.span
        if span is None:
            span = max(2.0 * float(schedule.sample_times.max()), 1.0)
        return span * np.arange(1, self.groups) / self.groups

    def sample(self, schedule: SamplingSchedule, rng: np.random.Generator) -> PopTrajectory:
        lo, hi = math.log(self.phi_min), math.log(self.phi_max)
        phi = np.empty(self.groups)
        phi[0] = math.exp(rng.uniform(lo, hi)) if hi > lo else self.phi_min
        for b in range(1, self.groups):
            mean = phi[b - 1]
            mass = -math.expm1(-self.phi_max / mean)
            u = rng.uniform()
            phi[b] = min(max(-mean * math.log1p(-u * mass), np.finfo(float).tiny), self.phi_max)
        return PopTrajectory(phi, self.change_times(schedule))


def sample_prior_tmrca(schedule: SamplingSchedule, hyper: PhiHyperprior, draws: int,
                       seed=None) -> PriorSamples:
    """Per-season TMRCAs of genealogies drawn from the coalescent prior."""
    if draws < 2:
        raise DomainError("at least 2 prior draws required")
    rng = np.random.default_rng(seed)
    out = np.empty((draws, schedule.n_seasons))
    for m in range(draws):
        traj = hyper.sample(schedule, rng)
        g = simulate_genealogy(schedule, traj, rng)
        out[m] = season_tmrcas(g, schedule.n_seasons)
    return PriorSamples(out, schedule.season_labels)


def simulate_tmrcas(schedule: SamplingSchedule, trajectory: PopTrajectory | Callable,
                    draws: int, seed=None) -> np.ndarray:
    """``(draws, J)`` per-season TMRCAs under a fixed or per-draw trajectory."""
    rng = np.random.default_rng(seed)
    out = np.empty((draws, schedule.n_seasons))
    for m in range(draws):
        traj = trajectory(rng) if callable(trajectory) else trajectory
        out[m] = season_tmrcas(simulate_genealogy(schedule, traj, rng), schedule.n_seasons)
    return out
