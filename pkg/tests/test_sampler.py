import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from dyirma import gamma_kde
from dyirma.errors import ConfigError, DegenerateWeightsError
from dyirma.hier_model import CovarianceSpec, HierParams, conditional_segment_logpdf
from dyirma.realization_io import RealizationStore
from dyirma.sampler import (
    ChainState,
    Hyperpriors,
    SamplerConfig,
    alpha_conditional,
    compute_log_weights,
    draw_wishart_covariance,
    inclusion_probability,
    kish_ess,
    log_accept_ratio,
    normalized_weights,
    resample_segment,
    run_chain,
    run_chains,
    swap_positions,
    update_alpha,
    update_beta,
    update_gamma,
    update_permutation,
    update_sigma_cs,
    update_sigma_uns,
)


def make_store(n=2, M=20, J=3, seed=0, scale=1.0, loc=2.0):
    rng = np.random.default_rng(seed)
    data = np.abs(loc + scale * rng.standard_normal((n, M, J)))
    return RealizationStore(data, tuple(str(j + 1) for j in range(J)),
                            tuple(f"s{i}" for i in range(n)))


def make_state(store, alpha=None, beta=None, gamma=None, cov=None, perm=None, hyper=None,
               lw=1.0, kde_terms=None, selected=None):
    n, M, J = store.data.shape
    p = HierParams(
        alpha=np.zeros(n) if alpha is None else np.asarray(alpha, dtype=float),
        beta=np.zeros(J - 1) if beta is None else np.asarray(beta, dtype=float),
        gamma=np.zeros(J - 1, dtype=np.int8) if gamma is None else np.asarray(gamma),
        cov=cov or CovarianceSpec("ind", sigma2=1.0),
        perm=np.arange(n) if perm is None else np.asarray(perm),
    )
    terms = np.zeros((n, M)) if kde_terms is None else kde_terms
    sel = np.zeros(n, dtype=int) if selected is None else selected
    return ChainState(p, sel, store, terms, hyper or Hyperpriors(), lw)


def test_weights_flat_when_densities_agree():
    store = make_store()
    state = make_state(store, alpha=[2.0, 2.0])
    hier = np.stack([conditional_segment_logpdf(i, store.data[i], state.T, state.means,
                                                state.factor.precision) for i in range(2)])
    state.kde_terms = hier
    lw = compute_log_weights(0, store, None, state)
    assert np.allclose(lw, 0.0)


def test_constant_kde_shift_leaves_weights():
    store = make_store()
    rng = np.random.default_rng(1)
    terms = rng.normal(size=(2, 20))
    a = make_state(store, kde_terms=terms)
    b = make_state(store, kde_terms=terms + 7.5)
    wa = normalized_weights(compute_log_weights(1, store, None, a))
    wb = normalized_weights(compute_log_weights(1, store, None, b))
    assert np.allclose(wa, wb, atol=1e-14)


def test_draw_at_mean_dominates():
    data = np.full((1, 5, 2), 1000.0)
    data[0, 2] = 1.0
    store = RealizationStore(data, ("1", "2"), ("a",))
    state = make_state(store, alpha=[1.0])
    w = normalized_weights(compute_log_weights(0, store, None, state))
    assert w[2] > 0.999


def test_weights_against_fitted_kde():
    store = make_store()
    kde = gamma_kde.fit(store.data.reshape(-1, 3))
    state = make_state(store, kde_terms=None)
    state.kde_terms = None
    a = compute_log_weights(0, store, kde, state)
    state.kde_terms = kde.log_density(store.data.reshape(-1, 3)).reshape(2, 20)
    assert np.allclose(a, compute_log_weights(0, store, kde, state))


def test_uniform_resampling_frequencies():
    rng = np.random.default_rng(2)
    draws = np.array([resample_segment(0, np.zeros(4), rng) for _ in range(100_000)])
    counts = np.bincount(draws, minlength=4)
    sd = math.sqrt(100_000 * 0.25 * 0.75)
    assert np.all(np.abs(counts - 25_000) < 3 * sd)


def test_degenerate_and_dominant_weights():
    rng = np.random.default_rng(0)
    lw = np.array([0.0] + [-np.inf] * 5)
    assert all(resample_segment(0, lw, rng) == 0 for _ in range(100))
    with pytest.raises(DegenerateWeightsError) as err:
        resample_segment(3, np.full(4, -np.inf), rng)
    assert err.value.segment == 3


def test_kish_ess_bounds():
    assert kish_ess(np.full(7, 1 / 7)) == pytest.approx(7.0)
    assert kish_ess(np.array([1.0, 0, 0])) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-700, 700), min_size=1, max_size=50))
def test_normalized_weights_sum_and_ess(lw):
    w = normalized_weights(lw)
    assert abs(w.sum() - 1.0) < 1e-12
    assert 1.0 - 1e-9 <= kish_ess(w) <= len(lw) + 1e-9


def test_beta_prior_dominates():
    store = make_store(n=1, J=3)
    hyper = Hyperpriors(mu_beta=1.5, tau_beta=1e12)
    state = make_state(store, gamma=[1, 1], hyper=hyper)
    rng = np.random.default_rng(0)
    assert np.allclose(update_beta(state, store, rng), 1.5, atol=1e-4)


def test_beta_inactive_drawn_from_prior():
    store = make_store(n=3, J=3)
    hyper = Hyperpriors(mu_beta=-1.0, tau_beta=4.0)
    state = make_state(store, hyper=hyper)
    rng = np.random.default_rng(1)
    draws = np.array([update_beta(state, store, rng) for _ in range(4000)])
    for j in range(2):
        assert stats.kstest(draws[:, j], stats.norm(-1.0, 0.5).cdf).pvalue > 0.01


def test_beta_conjugate_normal_mean():
    data = np.tile([0.0, 2.0], (1, 3, 1))
    store = RealizationStore(data, ("1", "2"), ("a",))
    for tau in (1.0, 1e-8):
        state = make_state(store, alpha=[0.0], gamma=[1], hyper=Hyperpriors(tau_beta=tau))
        rng = np.random.default_rng(5)
        draws = np.array([update_beta(state, store, rng)[0] for _ in range(20_000)])
        mean, var = 2.0 / (tau + 1), 1.0 / (tau + 1)
        assert abs(draws.mean() - mean) < 4 * math.sqrt(var / draws.size)
    assert mean == pytest.approx(2.0, abs=1e-7)


def test_gamma_zero_beta_gives_prior_odds():
    store = make_store(n=2, J=4)
    state = make_state(store, beta=[0.0, 0.0, 0.0], hyper=Hyperpriors(p_incl=0.3))
    for j in range(3):
        assert inclusion_probability(state, j) == pytest.approx(0.3)


def test_gamma_large_jump_included():
    data = np.zeros((2, 1, 3))
    data[:, 0, 1:] = 10.0
    store = RealizationStore(data + 1.0, ("1", "2", "3"), ("a", "b"))
    state = make_state(store, alpha=[1.0, 1.0], beta=[10.0, 0.0])
    assert inclusion_probability(state, 0) > 0.999
    assert inclusion_probability(state, 1) == pytest.approx(0.5)
    g = update_gamma(state, store, np.random.default_rng(0))
    assert g[0] == 1


def test_alpha_prior_and_flat_limits():
    store = make_store(n=3, J=4, seed=4)
    rng = np.random.default_rng(0)
    strong = make_state(store, hyper=Hyperpriors(mu_alpha=0.7, tau_alpha=1e12))
    assert np.allclose(update_alpha(strong, store, rng), 0.7, atol=1e-4)
    flat = make_state(store, hyper=Hyperpriors(tau_alpha=1e-10), selected=np.array([3, 5, 7]))
    draws = np.array([update_alpha(flat, store, rng) for _ in range(20_000)])
    assert np.allclose(draws.mean(axis=0), flat.T.mean(axis=1), atol=4 * math.sqrt(0.25 / 2e4))


def test_alpha_permutation_equivariance():
    store = make_store(n=3, J=3, seed=2)
    pi = np.array([2, 0, 1])
    permuted = RealizationStore(store.data[pi], store.season_labels,
                                tuple(store.segment_labels[k] for k in pi))
    cov = CovarianceSpec("ar1", sigma2=0.8, rho=0.4)
    a = make_state(store, cov=cov, perm=np.array([0, 1, 2]))
    b = make_state(permuted, cov=cov, perm=np.array([0, 1, 2])[pi])
    # conditional means agree after relabeling
    pa, ra = alpha_conditional(a)
    pb, rb = alpha_conditional(b)
    assert np.allclose(np.linalg.solve(pa, ra)[pi], np.linalg.solve(pb, rb))


def test_wishart_prior_mean():
    rng = np.random.default_rng(0)
    n, nu = 3, 6.0
    R = np.array([[2.0, 0.5, 0.0], [0.5, 1.0, 0.2], [0.0, 0.2, 1.5]])
    precs = np.array([np.linalg.inv(draw_wishart_covariance(np.zeros((n, 0)), nu, R, rng))
                      for _ in range(10_000)])
    target = nu * np.linalg.inv(R)
    sd = precs.std(axis=0, ddof=1) / math.sqrt(precs.shape[0])
    assert np.all(np.abs(precs.mean(axis=0) - target) < 3.5 * sd + 1e-12)


def test_wishart_zero_residuals_posterior():
    rng = np.random.default_rng(1)
    n, J, nu = 2, 4, 3.0
    precs = np.array([np.linalg.inv(draw_wishart_covariance(np.zeros((n, J)), nu, 1.0, rng))
                      for _ in range(10_000)])
    target = (nu + J) * np.eye(n)
    sd = precs.std(axis=0, ddof=1) / math.sqrt(precs.shape[0])
    assert np.all(np.abs(precs.mean(axis=0) - target) < 3.5 * sd + 1e-12)


def test_uns_draws_pd():
    store = make_store(n=3, J=4)
    state = make_state(store, cov=CovarianceSpec("uns", matrix=np.eye(3)))
    rng = np.random.default_rng(2)
    for _ in range(200):
        S = update_sigma_uns(state, store, rng)
        np.linalg.cholesky(S)


def test_identity_proposal_ratio():
    store = make_store(n=3)
    state = make_state(store, cov=CovarianceSpec("cs", sigma2=1.3, rho=0.4))
    assert log_accept_ratio(state, (1.3, 0.4), (1.3, 0.4)) == 0.0


def test_tri_proposal_beyond_pd_bound_rejected():
    n = 8
    store = make_store(n=n)
    state = make_state(store, cov=CovarianceSpec("tri", sigma2=1.0, rho=0.52))
    rng = np.random.default_rng(0)
    seen = 0
    for _ in range(300):
        s2, rho, acc = update_sigma_cs(state, store, rng, step=[1e-6, 2.0])
        if acc:
            assert rho < 1 / (2 * math.cos(math.pi / (n + 1)))
        else:
            seen += 1
            assert (s2, rho) == (1.0, 0.52)
    assert seen > 0


def test_permutation_always_accepted_when_uncorrelated():
    store = make_store(n=4)
    state = make_state(store, cov=CovarianceSpec("ar1", sigma2=1.0, rho=0.0), alpha=[1, 2, 3, 4])
    rng = np.random.default_rng(0)
    for _ in range(500):
        perm, acc = update_permutation(state, store, rng)
        assert acc
        state.set_params(perm=perm)


def test_swap_is_involution():
    perm = np.array([2, 0, 3, 1])
    once = swap_positions(perm, 0, 3)
    assert not np.array_equal(once, perm)
    assert np.array_equal(swap_positions(once, 0, 3), perm)


def small_problem(seed=0):
    store = make_store(n=3, M=40, J=3, seed=seed, scale=0.3)
    prior = np.random.default_rng(seed + 1).uniform(0, 6, (200, 3))
    return store, gamma_kde.fit(prior)


def test_trace_length_and_determinism():
    store, kde = small_problem()
    cfg = SamplerConfig(iterations=10, burn_in=0.1, thinning=1, seed=4)
    a = run_chain(cfg, store, kde)
    assert len(a) == 9
    assert list(a.iteration) == list(range(2, 11))
    b = run_chain(cfg, store, kde)
    assert a.equals(b)
    c = run_chain(SamplerConfig(iterations=10, burn_in=0.1, thinning=1, seed=5), store, kde)
    assert not a.equals(c)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 500), st.floats(0, 0.95), st.integers(1, 20))
def test_trace_length_formula(iterations, burn, thin):
    try:
        cfg = SamplerConfig(iterations=iterations, burn_in=burn, thinning=thin)
    except ConfigError:
        assert math.floor(iterations * (1 - burn) + 1e-9) // thin < 1
        return
    recorded = [t for t in range(1, iterations + 1)
                if t > cfg.n_burn and (t - cfg.n_burn) % thin == 0]
    assert len(recorded) == cfg.retained == math.floor(iterations * (1 - burn) + 1e-9) // thin


def test_parallel_chains_match_serial():
    store, kde = small_problem(2)
    cfg = SamplerConfig(iterations=30, burn_in=0.0, thinning=3, chains=2, seed=7,
                        cov_kind="tri", permute=True)
    serial = run_chains(cfg, store, kde, jobs=1)
    parallel = run_chains(cfg, store, kde, jobs=2)
    assert [t.info["seed"] for t in serial] == [7, 8]
    assert all(a.equals(b) for a, b in zip(serial, parallel))


@pytest.mark.parametrize("kind,permute", [("cs", False), ("uns", False), ("ar1", True),
                                          ("tri", True)])
def test_chains_run_for_every_kind(kind, permute):
    store, kde = small_problem(3)
    cfg = SamplerConfig(iterations=40, burn_in=0.5, thinning=2, seed=1, cov_kind=kind,
                        permute=permute)
    t = run_chain(cfg, store, kde)
    assert len(t) == 10
    assert t.info["ess_quantiles"][0] >= 1.0


def test_degenerate_weights_abort_names_segment_and_iteration():
    store, kde = small_problem()
    kde_terms = np.zeros((3, 40))
    kde_terms[1] = np.inf
    cfg = SamplerConfig(iterations=5, burn_in=0.0, thinning=1)
    with pytest.raises(DegenerateWeightsError) as err:
        run_chain(cfg, store, kde, kde_terms=kde_terms)
    assert err.value.segment == 1 and err.value.iteration == 1


def test_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(iterations=10, cov_kind="ind", permute=True)
    with pytest.raises(ConfigError):
        SamplerConfig(iterations=5, thinning=10)
    with pytest.raises(ConfigError):
        SamplerConfig(iterations=10, cov_kind="banded")
    with pytest.raises(ConfigError):
        Hyperpriors(p_incl=1.0).validate(3)
