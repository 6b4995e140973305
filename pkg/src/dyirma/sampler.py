"""Dynamic iterative reweighting Gibbs sampler.

Each sweep resamples every segment's stored realization with importance
weights ``hierarchical density / stratified prior density`` and then updates
the hierarchical parameters given the currently selected realizations.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, stats
from scipy.special import betaln, expit, logit

from .errors import ConfigError, DegenerateWeightsError, DomainError, PDViolationError
from .gamma_kde import GammaKernelKde
from .hier_model import (
    KINDS,
    PERMUTABLE,
    CovarianceSpec,
    Factor,
    HierParams,
    build_design,
    conditional_segment_logpdf,
    materialize_covariance,
    season_offsets,
)
from .realization_io import RealizationStore
from .trace import ChainTrace

log = logging.getLogger(__name__)

BLOCKS = ("selection", "beta", "gamma", "alpha", "cov", "perm")


@dataclass(frozen=True)
class Hyperpriors:
    mu_beta: float = 0.0
    tau_beta: float = 0.01
    p_incl: float = 0.5
    mu_alpha: float = 0.0
    tau_alpha: float = 0.01
    wishart_nu: float | None = None
    wishart_r: float = 1.0
    ig_shape: float = 2.0
    ig_scale: float = 1.0
    beta_a: float = 1.0
    beta_b: float = 1.0

    def validate(self, n: int) -> None:
        if not (self.tau_beta > 0 and self.tau_alpha > 0):
            raise ConfigError("prior precisions must be positive")
        if not 0 < self.p_incl < 1:
            raise ConfigError("inclusion probability must lie in (0, 1)")
        if self.nu(n) < n:
            raise ConfigError(f"wishart_nu must be at least n = {n}")
        if min(self.wishart_r, self.ig_shape, self.ig_scale, self.beta_a, self.beta_b) <= 0:
            raise ConfigError("Wishart, inverse-gamma and beta parameters must be positive")

    def nu(self, n: int) -> float:
        return float(n + 1) if self.wishart_nu is None else float(self.wishart_nu)


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int
    burn_in: float = 0.1
    thinning: int = 10
    chains: int = 1
    seed: int = 0
    cov_kind: str = "ind"
    permute: bool = False
    hyper: Hyperpriors = field(default_factory=Hyperpriors)
    step_size: float = 0.2
    # 0 turns every likelihood term off, leaving the prior as the target
    likelihood_weight: float = 1.0
    frozen: frozenset = frozenset()
    init: HierParams | None = None

    def __post_init__(self):
        if self.cov_kind not in KINDS:
            raise ConfigError(
                f"unknown covariance kind {self.cov_kind!r}; allowed: {', '.join(KINDS)}")
        if self.permute and self.cov_kind not in PERMUTABLE:
            raise ConfigError("permutation sampling requires cov = ar1 or tri")
        if not 0 <= self.burn_in < 1:
            raise ConfigError("burn_in must lie in [0, 1)")
        if self.thinning < 1 or self.chains < 1 or self.iterations < 1:
            raise ConfigError("iterations, thinning and chains must be positive")
        if self.retained < 1:
            raise ConfigError("no iterations retained after burn-in and thinning")
        unknown = set(self.frozen) - set(BLOCKS)
        if unknown:
            raise ConfigError(f"unknown frozen blocks {sorted(unknown)}")

    @property
    def post_burn(self) -> int:
        return int(math.floor(self.iterations * (1.0 - self.burn_in) + 1e-9))

    @property
    def n_burn(self) -> int:
        return self.iterations - self.post_burn

    @property
    def retained(self) -> int:
        return self.post_burn // self.thinning


class ChainState:
    """Mutable state of one chain; ``params`` is replaced, never edited."""

    def __init__(self, params, selected, store, kde_terms, hyper, likelihood_weight=1.0):
        self.params = params
        self.selected = np.asarray(selected, dtype=np.int64).copy()
        self.data = store.data
        self.T = self.data[np.arange(self.data.shape[0]), self.selected].copy()
        self.kde_terms = kde_terms
        self.hyper = hyper
        self.lw = float(likelihood_weight)
        self._factor = None

    def set_params(self, **changes) -> None:
        self.params = replace(self.params, **changes)
        if "cov" in changes or "perm" in changes:
            self._factor = None

    def select(self, i: int, m: int) -> None:
        self.selected[i] = m
        self.T[i] = self.data[i, m]

    @property
    def factor(self) -> Factor:
        if self._factor is None:
            self._factor = Factor(materialize_covariance(self.params.cov, self.params.perm))
        return self._factor

    @property
    def offsets(self) -> np.ndarray:
        return season_offsets(self.params.beta, self.params.gamma)

    @property
    def means(self) -> np.ndarray:
        return np.asarray(self.params.alpha)[:, None] + self.offsets[None, :]


def kde_terms_for(store: RealizationStore, kde: GammaKernelKde) -> np.ndarray:
    """``(n, M)`` stratified prior log-densities at every stored draw."""
    if kde.dim != store.n_seasons:
        raise DomainError(f"KDE dimension {kde.dim} != season count {store.n_seasons}")
    n, M, J = store.data.shape
    return kde.log_density(store.data.reshape(n * M, J)).reshape(n, M)


# -- importance resampling --------------------------------------------------

def compute_log_weights(i: int, store: RealizationStore, kde: GammaKernelKde | None,
                        state: ChainState) -> np.ndarray:
    """Log importance weights of segment ``i``'s stored draws."""
    draws = store.data[i]
    if state.kde_terms is not None:
        denom = state.kde_terms[i]
    else:
        if kde is None or kde.dim != draws.shape[1]:
            raise DomainError("KDE dimension does not match realizations")
        denom = kde.log_density(draws)
    num = conditional_segment_logpdf(i, draws, state.T, state.means, state.factor.precision)
    return state.lw * num - denom


def normalized_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=float)
    top = np.max(lw)
    if not np.isfinite(top):
        raise DegenerateWeightsError(segment=None)
    w = np.exp(lw - top)
    return w / w.sum()


def kish_ess(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(w.sum() ** 2 / np.sum(w * w))


def resample_segment(i: int, log_weights, rng: np.random.Generator) -> int:
    lw = np.asarray(log_weights, dtype=float)
    lw = np.where(np.isnan(lw), -np.inf, lw)
    top = np.max(lw)
    if not np.isfinite(top) or top == np.inf:
        raise DegenerateWeightsError(segment=i)
    cdf = np.cumsum(np.exp(lw - top))
    m = int(np.searchsorted(cdf, rng.uniform() * cdf[-1], side="right"))
    return min(m, lw.shape[0] - 1)


# -- conjugate blocks -------------------------------------------------------

def _draw_mvn(prec: np.ndarray, rhs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    L = np.linalg.cholesky(prec)
    mean = linalg.cho_solve((L, True), rhs)
    z = rng.standard_normal(rhs.shape[0])
    return mean + linalg.solve_triangular(L.T, z, lower=False)


def beta_conditional(state: ChainState):
    """Precision and right-hand side of the ``beta`` full conditional."""
    h = state.hyper
    J = state.T.shape[1]
    X = build_design(J) * np.asarray(state.params.gamma, dtype=float)[None, :]
    Q = state.factor.precision
    qsum = Q.sum(axis=0)
    u = qsum @ (state.T - np.asarray(state.params.alpha)[:, None])
    prec = h.tau_beta * np.eye(J - 1) + state.lw * qsum.sum() * (X.T @ X)
    rhs = h.tau_beta * h.mu_beta * np.ones(J - 1) + state.lw * (X.T @ u)
    return prec, rhs


def update_beta(state: ChainState, store, rng) -> np.ndarray:
    """Active jumps from their joint conditional, inactive ones from the prior."""
    return _draw_mvn(*beta_conditional(state), rng)


def _quad_form(state: ChainState, offsets) -> float:
    r = state.T - np.asarray(state.params.alpha)[:, None] - offsets[None, :]
    return float(np.sum(r * (state.factor.precision @ r)))


def inclusion_probability(state: ChainState, j: int, gamma=None) -> float:
    """``P(gamma_j = 1 | rest)`` with the other indicators at ``gamma``."""
    g = np.array(state.params.gamma if gamma is None else gamma, dtype=float)
    beta = np.asarray(state.params.beta, dtype=float)
    g[j] = 1.0
    on = _quad_form(state, season_offsets(beta, g))
    g[j] = 0.0
    off = _quad_form(state, season_offsets(beta, g))
    p = state.hyper.p_incl
    log_odds = math.log(p) - math.log1p(-p) + state.lw * (-0.5) * (on - off)
    return float(expit(log_odds))


def update_gamma(state: ChainState, store, rng) -> np.ndarray:
    gamma = np.array(state.params.gamma, dtype=np.int8)
    for j in range(gamma.shape[0]):
        gamma[j] = 1 if rng.uniform() < inclusion_probability(state, j, gamma) else 0
    return gamma


def alpha_conditional(state: ChainState):
    h = state.hyper
    n, J = state.T.shape
    Q = state.factor.precision
    prec = h.tau_alpha * np.eye(n) + state.lw * J * Q
    rhs = h.tau_alpha * h.mu_alpha * np.ones(n) + state.lw * (
        Q @ np.sum(state.T - state.offsets[None, :], axis=1))
    return prec, rhs


def update_alpha(state: ChainState, store, rng) -> np.ndarray:
    return _draw_mvn(*alpha_conditional(state), rng)


def _residuals(state: ChainState) -> np.ndarray:
    return state.T - state.means


def update_sigma_ind(state: ChainState, store, rng) -> float:
    """Conjugate inverse-gamma draw of the common variance."""
    h = state.hyper
    r = _residuals(state)
    shape = h.ig_shape + state.lw * 0.5 * r.size
    scale = h.ig_scale + state.lw * 0.5 * float(np.sum(r * r))
    return float(scale / rng.gamma(shape))


def draw_wishart_covariance(resid, nu: float, R, rng, weight: float = 1.0) -> np.ndarray:
    """Covariance whose inverse is ``Wishart(nu + J, (R + S)^-1)``.

    ``resid`` is ``(n, J)``; ``J = 0`` gives a draw from the prior.
    """
    resid = np.asarray(resid, dtype=float)
    n, J = resid.shape
    R = np.asarray(R, dtype=float) * (np.eye(n) if np.ndim(R) == 0 else 1.0)
    S = resid @ resid.T
    scale = np.linalg.inv(R + weight * S)
    scale = 0.5 * (scale + scale.T)
    prec = stats.wishart(df=nu + weight * J, scale=scale).rvs(random_state=rng)
    prec = np.atleast_2d(prec)
    sigma = np.linalg.inv(prec)
    return 0.5 * (sigma + sigma.T)


def update_sigma_uns(state: ChainState, store, rng) -> np.ndarray:
    n = state.T.shape[0]
    h = state.hyper
    return draw_wishart_covariance(_residuals(state), h.nu(n), h.wishart_r, rng, state.lw)


def structured_log_target(state: ChainState, sigma2: float, rho: float, perm=None) -> float:
    """Log posterior of ``(log sigma2, logit rho)`` up to a constant.

    Returns ``-inf`` when the implied covariance is not positive definite.
    """
    h = state.hyper
    if not (sigma2 > 0 and 0 < rho < 1):
        return -math.inf
    spec = CovarianceSpec(state.params.cov.kind, sigma2=sigma2, rho=rho)
    perm = state.params.perm if perm is None else perm
    try:
        fac = Factor(materialize_covariance(spec, perm))
    except PDViolationError:
        return -math.inf
    ls2, lr, l1r = math.log(sigma2), math.log(rho), math.log1p(-rho)
    # inverse-gamma and beta log-priors, then the Jacobian of the transform
    lp = h.ig_shape * math.log(h.ig_scale) - math.lgamma(h.ig_shape) \
        - (h.ig_shape + 1.0) * ls2 - h.ig_scale / sigma2
    lp += (h.beta_a - 1.0) * lr + (h.beta_b - 1.0) * l1r - betaln(h.beta_a, h.beta_b)
    lp += ls2 + lr + l1r
    if state.lw:
        lp += state.lw * fac.loglik(_residuals(state))
    return float(lp)


def log_accept_ratio(state: ChainState, current, proposed) -> float:
    if tuple(current) == tuple(proposed):
        return 0.0
    return structured_log_target(state, *proposed) - structured_log_target(state, *current)


def update_sigma_cs(state: ChainState, store, rng, step=0.2):
    """Random-walk Metropolis on ``(log sigma2, logit rho)``.

    Serves CS, AR1 and TRI alike. Returns ``(sigma2, rho, accepted)``.
    """
    cov = state.params.cov
    step = np.broadcast_to(np.asarray(step, dtype=float), (2,))
    z = rng.standard_normal(2) * step
    s2 = float(math.exp(math.log(cov.sigma2) + z[0]))
    rho = float(expit(logit(cov.rho) + z[1]))
    ratio = log_accept_ratio(state, (cov.sigma2, cov.rho), (s2, rho))
    if ratio >= 0 or math.log(rng.uniform()) < ratio:
        return s2, rho, True
    return cov.sigma2, cov.rho, False


def swap_positions(perm, a: int, b: int) -> np.ndarray:
    """Exchange the segments occupying positions ``a`` and ``b``."""
    perm = np.array(perm)
    i, k = int(np.flatnonzero(perm == a)[0]), int(np.flatnonzero(perm == b)[0])
    perm[i], perm[k] = b, a
    return perm


def update_permutation(state: ChainState, store, rng):
    """Metropolis swap of two uniformly chosen positions.

    The swap proposal is symmetric and the permutation prior flat, so the
    acceptance ratio is the likelihood ratio alone. Returns ``(perm, accepted)``.
    """
    perm = np.asarray(state.params.perm)
    n = perm.shape[0]
    if n < 2:
        return perm.copy(), True
    a = int(rng.integers(n))
    b = int(rng.integers(n - 1))
    if b >= a:
        b += 1
    proposal = swap_positions(perm, a, b)
    if state.lw == 0:
        return proposal, True
    resid = _residuals(state)
    try:
        new = Factor(materialize_covariance(state.params.cov, proposal)).loglik(resid)
    except PDViolationError:
        return perm.copy(), False
    delta = state.lw * (new - state.factor.loglik(resid))
    if delta >= 0 or math.log(rng.uniform()) < delta:
        return proposal, True
    return perm.copy(), False


# -- driver -----------------------------------------------------------------

def initial_params(config: SamplerConfig, store: RealizationStore, selected, rng) -> HierParams:
    n, J = store.n_segments, store.n_seasons
    T = store.data[np.arange(n), selected]
    if config.init is not None:
        p = config.init
        if p.n_segments != n or p.n_seasons != J:
            raise ConfigError("initial parameters do not match the realization store")
        if p.cov.kind != config.cov_kind:
            raise ConfigError("initial covariance kind differs from the configured kind")
        return p
    kind = config.cov_kind
    if kind == "uns":
        cov = CovarianceSpec("uns", matrix=np.eye(n))
    elif kind == "ind":
        cov = CovarianceSpec("ind", sigma2=1.0)
    else:
        cov = CovarianceSpec(kind, sigma2=1.0, rho=0.25)
    perm = rng.permutation(n) if config.permute else np.arange(n)
    return HierParams(
        alpha=T.mean(axis=1),
        beta=np.zeros(J - 1),
        gamma=np.zeros(J - 1, dtype=np.int8),
        cov=cov,
        perm=perm,
    )


def init_state(config: SamplerConfig, store: RealizationStore, kde: GammaKernelKde,
               rng: np.random.Generator, kde_terms=None) -> ChainState:
    config.hyper.validate(store.n_segments)
    if kde_terms is None:
        kde_terms = kde_terms_for(store, kde)
    selected = rng.integers(store.n_samples, size=store.n_segments)
    params = initial_params(config, store, selected, rng)
    return ChainState(params, selected, store, kde_terms, config.hyper, config.likelihood_weight)


def sweep(state: ChainState, config: SamplerConfig, store, rng, step, iteration=None):
    """One full Gibbs cycle. Returns per-segment ESS and acceptance flags."""
    n = store.n_segments
    ess = np.full(n, np.nan)
    frozen = config.frozen
    if "selection" not in frozen:
        for i in range(n):
            lw = compute_log_weights(i, store, None, state)
            try:
                m = resample_segment(i, lw, rng)
            except DegenerateWeightsError:
                raise DegenerateWeightsError(i, iteration) from None
            ess[i] = kish_ess(normalized_weights(lw))
            state.select(i, m)
    if "beta" not in frozen:
        state.set_params(beta=update_beta(state, store, rng))
    if "gamma" not in frozen:
        state.set_params(gamma=update_gamma(state, store, rng))
    if "alpha" not in frozen:
        state.set_params(alpha=update_alpha(state, store, rng))
    cov_acc = perm_acc = None
    kind = state.params.cov.kind
    if "cov" not in frozen:
        if kind == "ind":
            state.set_params(cov=CovarianceSpec("ind", sigma2=update_sigma_ind(state, store, rng)))
        elif kind == "uns":
            state.set_params(cov=CovarianceSpec("uns", matrix=update_sigma_uns(state, store, rng)))
        else:
            s2, rho, cov_acc = update_sigma_cs(state, store, rng, step)
            if cov_acc:
                state.set_params(cov=CovarianceSpec(kind, sigma2=s2, rho=rho))
    if config.permute and "perm" not in frozen:
        perm, perm_acc = update_permutation(state, store, rng)
        if perm_acc:
            state.set_params(perm=perm)
    return ess, cov_acc, perm_acc


class _TraceBuffer:
    def __init__(self, R: int, n: int, J: int, kind: str):
        self.kind = kind
        self.iteration = np.zeros(R, dtype=np.int64)
        self.alpha = np.zeros((R, n))
        self.beta = np.zeros((R, J - 1))
        self.gamma = np.zeros((R, J - 1), dtype=np.int8)
        self.perm = np.zeros((R, n), dtype=np.int64)
        self.selected = np.zeros((R, n), dtype=np.int64)
        self.sigma2 = np.zeros(R) if kind != "uns" else None
        self.rho = np.zeros(R) if kind not in ("uns", "ind") else None
        self.cov = np.zeros((R, n, n)) if kind == "uns" else None
        self.r = 0

    def record(self, t: int, state: ChainState) -> None:
        r, p = self.r, state.params
        self.iteration[r] = t
        self.alpha[r] = p.alpha
        self.beta[r] = p.beta
        self.gamma[r] = p.gamma
        self.perm[r] = p.perm
        self.selected[r] = state.selected
        if self.sigma2 is not None:
            self.sigma2[r] = p.cov.sigma2
        if self.rho is not None:
            self.rho[r] = p.cov.rho
        if self.cov is not None:
            self.cov[r] = p.cov.matrix
        self.r += 1

    def to_trace(self, chain_id: int, info: dict) -> ChainTrace:
        return ChainTrace(
            kind=self.kind, iteration=self.iteration, alpha=self.alpha, beta=self.beta,
            gamma=self.gamma, perm=self.perm, selected=self.selected, sigma2=self.sigma2,
            rho=self.rho, cov=self.cov, chain_id=chain_id, info=info)


def run_chain(config: SamplerConfig, store: RealizationStore, kde: GammaKernelKde,
              chain_id: int = 0, seed: int | None = None, kde_terms=None) -> ChainTrace:
    """Run one chain; deterministic given ``seed`` (default ``config.seed + chain_id``)."""
    started = time.perf_counter()
    seed = config.seed + chain_id if seed is None else seed
    rng = np.random.default_rng(seed)
    state = init_state(config, store, kde, rng, kde_terms)
    n, J = store.n_segments, store.n_seasons
    buf = _TraceBuffer(config.retained, n, J, state.params.cov.kind)
    step = np.full(2, config.step_size)
    n_burn = config.n_burn
    ess_all = np.full((config.iterations, n), np.nan)
    cov_hits = cov_tries = perm_hits = perm_tries = 0
    window_hits = window_tries = 0
    low_run = np.zeros(n, dtype=np.int64)
    warned = np.zeros(n, dtype=bool)
    for t in range(1, config.iterations + 1):
        ess, cov_acc, perm_acc = sweep(state, config, store, rng, step, iteration=t)
        ess_all[t - 1] = ess
        low_run = np.where(ess < 2, low_run + 1, 0)
        for i in np.flatnonzero((low_run >= 100) & ~warned):
            log.warning("chain %d: Kish ESS below 2 for 100 iterations on segment %d",
                        chain_id, i)
            warned[i] = True
        if cov_acc is not None:
            window_hits += cov_acc
            window_tries += 1
            if t > n_burn:
                cov_hits += cov_acc
                cov_tries += 1
            if t <= n_burn and window_tries == 50:
                rate = window_hits / window_tries
                if rate < 0.30:
                    step *= 0.8
                elif rate > 0.45:
                    step *= 1.25
                window_hits = window_tries = 0
        if perm_acc is not None and t > n_burn:
            perm_hits += perm_acc
            perm_tries += 1
        if t > n_burn and (t - n_burn) % config.thinning == 0:
            buf.record(t, state)
    finite = ess_all[np.isfinite(ess_all)]
    info = {
        "chain": chain_id,
        "seed": seed,
        "iterations": config.iterations,
        "retained": buf.r,
        "cov_acceptance": cov_hits / cov_tries if cov_tries else None,
        "perm_acceptance": perm_hits / perm_tries if perm_tries else None,
        "step_size": step.tolist(),
        "ess_quantiles": (np.quantile(finite, [0.05, 0.5, 0.95]).tolist()
                          if finite.size else None),
        "wall_time": time.perf_counter() - started,
    }
    return buf.to_trace(chain_id, info)


def _run_one(args):
    config, store, kde, chain_id, kde_terms = args
    return run_chain(config, store, kde, chain_id, kde_terms=kde_terms)


def run_chains(config: SamplerConfig, store: RealizationStore, kde: GammaKernelKde,
               jobs: int = 1) -> list[ChainTrace]:
    """Run ``config.chains`` chains with seeds ``seed + c``, up to ``jobs`` at once."""
    kde_terms = kde_terms_for(store, kde)
    tasks = [(config, store, kde, c, kde_terms) for c in range(config.chains)]
    if jobs <= 1 or config.chains == 1:
        return [_run_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, config.chains)) as pool:
        return list(pool.map(_run_one, tasks))
