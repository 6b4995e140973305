import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from dyirma.coalescent import (
    PhiHyperprior,
    PopTrajectory,
    SamplingSchedule,
    genealogy_from_merges,
    log_coalescent_density,
    sample_prior_tmrca,
    season_tmrcas,
    simulate_genealogy,
    simulate_tmrcas,
    tmrca_of_subset,
)
from dyirma.errors import ConfigError, DomainError


def two_tips(t):
    return genealogy_from_merges([0.0, 0.0], [0, 0], [(0, 1, t)])


def test_exponential_log_density_values():
    assert log_coalescent_density(two_tips(1.0), PopTrajectory.constant(1.0)) == pytest.approx(-1.0)
    assert log_coalescent_density(two_tips(1.0), PopTrajectory.constant(2.0)) == pytest.approx(
        math.log(0.5) - 0.5, abs=1e-12)
    assert log_coalescent_density(two_tips(0.0), PopTrajectory.constant(1.0)) == 0.0


def test_two_taxon_density_integrates_to_one():
    traj = PopTrajectory.constant(1.7)
    val, _ = integrate.quad(lambda t: math.exp(log_coalescent_density(two_tips(t), traj)),
                            0, np.inf)
    assert val == pytest.approx(1.0, abs=1e-4)


def test_density_across_change_point():
    # rate 1 on [0, 1), rate 1/4 afterwards
    traj = PopTrajectory(np.array([1.0, 4.0]), np.array([1.0]))
    t = 3.0
    expected = math.log(0.25) - (1.0 + (t - 1.0) / 4.0)
    assert log_coalescent_density(two_tips(t), traj) == pytest.approx(expected, abs=1e-12)


def staggered_tree():
    # tips: A, B (1994, t0); C (1994, t1); D (1993, t3); E (1993, t5)
    t = [0.0, 0.4, 0.9, 1.3, 1.8, 2.2, 2.9, 3.6]
    tips = [t[0], t[0], t[1], t[3], t[5]]
    seasons = [1, 1, 1, 0, 0]
    merges = [(0, 1, t[2]), (5, 2, t[4]), (6, 3, t[6]), (7, 4, t[7])]
    return genealogy_from_merges(tips, seasons, merges), np.diff(t)


def test_staggered_season_tmrcas():
    g, gam = staggered_tree()
    assert g.intervals.size == 7  # kappa = n + s - 2 with n = 5, s = 4
    assert np.allclose(g.intervals, gam)
    assert tmrca_of_subset(g, 0) == pytest.approx(gam[3:7].sum())
    assert tmrca_of_subset(g, 1) == pytest.approx(gam[0:4].sum())
    assert list(g.lineage_counts) == [2, 3, 2, 3, 2, 3, 2]


def test_singleton_and_full_tree():
    g = genealogy_from_merges([0.0, 0.0, 2.0], [0, 0, 1], [(0, 1, 1.0), (3, 2, 3.0)])
    assert tmrca_of_subset(g, 1) == 0.0
    all_tips = genealogy_from_merges([0.0, 0.0, 2.0], [0, 0, 0], [(0, 1, 1.0), (3, 2, 3.0)])
    assert tmrca_of_subset(all_tips, 0) == pytest.approx(all_tips.height)
    with pytest.raises(DomainError):
        tmrca_of_subset(g, 5)


def test_three_taxa_mean_tmrca():
    sched = SamplingSchedule(np.zeros(3), np.zeros(3, dtype=int))
    x = simulate_tmrcas(sched, PopTrajectory.constant(1.0), 20_000, seed=4)[:, 0]
    se = x.std(ddof=1) / math.sqrt(x.size)
    assert abs(x.mean() - 4.0 / 3.0) < 3 * se


def test_heterochronous_pair_predates_old_sample():
    sched = SamplingSchedule(np.array([0.0, 5.0]), np.array([0, 0]))
    x = simulate_tmrcas(sched, PopTrajectory.constant(0.3), 200, seed=1)[:, 0]
    # the subset TMRCA is measured from the most recent tip
    assert np.all(x >= 5.0)


def test_too_few_taxa():
    sched = SamplingSchedule(np.zeros(1), np.zeros(1, dtype=int))
    with pytest.raises(DomainError):
        simulate_genealogy(sched, PopTrajectory.constant(1.0), 0)


def test_density_beyond_horizon():
    traj = PopTrajectory(np.array([1.0]), np.zeros(0), horizon=0.5)
    with pytest.raises(DomainError):
        log_coalescent_density(two_tips(1.0), traj)


def test_prior_samples_shape_and_exp_distribution():
    sched = SamplingSchedule.from_seasons([2, 3], [1.0, 0.0], ("1993", "1994"))
    prior = sample_prior_tmrca(sched, PhiHyperprior(), 2, seed=0)
    assert prior.data.shape == (2, 2)
    iso = SamplingSchedule(np.zeros(2), np.zeros(2, dtype=int))
    degenerate = PhiHyperprior(phi_min=1.0, phi_max=1.0)
    x = sample_prior_tmrca(iso, degenerate, 10_000, seed=3).data[:, 0]
    assert stats.kstest(x, "expon").pvalue > 0.01


def test_phi_ceiling_respected():
    hyper = PhiHyperprior(groups=4, phi_min=0.5, phi_max=3.0)
    sched = SamplingSchedule(np.zeros(3), np.zeros(3, dtype=int))
    rng = np.random.default_rng(0)
    phis = np.concatenate([hyper.sample(sched, rng).phi for _ in range(2000)])
    assert phis.max() <= 3.0 and phis.min() > 0


def test_unbounded_hyperprior_rejected():
    with pytest.raises(ConfigError):
        PhiHyperprior(phi_max=math.inf)
    with pytest.raises(ConfigError):
        PhiHyperprior(phi_min=0.0)


def test_intervals_with_k_lineages_are_exponential():
    sched = SamplingSchedule(np.zeros(4), np.zeros(4, dtype=int))
    traj = PopTrajectory.constant(2.0)
    ivals = np.array([simulate_genealogy(sched, traj, s).intervals for s in range(5000)])
    for col, k in enumerate((4, 3, 2)):
        mean = 2.0 * 2.0 / (k * (k - 1))
        se = ivals[:, col].std(ddof=1) / math.sqrt(ivals.shape[0])
        assert abs(ivals[:, col].mean() - mean) < 3 * se


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), counts=st.lists(st.integers(1, 4), min_size=1, max_size=4),
       phi=st.floats(0.1, 10))
def test_simulated_genealogy_invariants(seed, counts, phi):
    J = len(counts)
    if sum(counts) < 2:
        counts = counts[:-1] + [2]
    sched = SamplingSchedule.from_seasons(counts, np.arange(J - 1, -1, -1) * 0.7)
    g = simulate_genealogy(sched, PopTrajectory.constant(phi), seed)
    n, s = sched.n_taxa, sched.n_sampling_times
    assert g.event_is_coalescent.sum() == n - 1
    assert g.intervals.size == n + s - 2
    assert np.all(g.intervals >= 0)
    k = g.lineage_counts
    for e in range(1, k.size):
        step = -1 if g.event_is_coalescent[e - 1] else None
        if step is not None:
            assert k[e] == k[e - 1] - 1
        else:
            assert k[e] > k[e - 1]
    assert k[-1] == 2 and g.event_is_coalescent[-1]
    tm = season_tmrcas(g, J)
    for j in range(J):
        tips = np.flatnonzero(g.taxon_seasons == j)
        # every subset's MRCA lies below the root
        assert g.node_times[tips].min() + tm[j] <= g.event_times[-1] + 1e-12
    g2 = simulate_genealogy(sched, PopTrajectory.constant(phi), seed)
    assert np.array_equal(g.node_times, g2.node_times) and np.array_equal(g.parent, g2.parent)
