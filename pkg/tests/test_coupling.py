import math

import numpy as np
import pytest

from driftlab import coupling, stats
from driftlab.coupling import (DecouplingProbe, ScheduleError, build_schedule,
                               decoupling_error_term, decoupling_probe,
                               run_monotone, run_sprinkled, sprinkle_density,
                               standard_probes)


# --- sprinkle density formula ------------------------------------------------


def test_sprinkle_density_large_gap_limit():
    # the sprinkle vanishes only polynomially: gap^{-1/(4 sqrt 3)} in d=1
    r1, _ = sprinkle_density(2.0, 1e40, 1)
    assert r1 == pytest.approx(2.0, rel=1e-4)
    assert sprinkle_density(2.0, 100.0, 1)[0] > sprinkle_density(2.0, 1000.0, 1)[0]


def test_sprinkle_density_gap_one_doubles():
    r, _ = sprinkle_density(1.5, 1.0, 1)
    assert r == pytest.approx(3.0)


def test_sprinkle_delta_d2_is_half():
    _, delta = sprinkle_density(1.0, 10.0, 2)
    assert delta == pytest.approx(0.5)
    _, delta1 = sprinkle_density(1.0, 10.0, 1)
    assert delta1 == pytest.approx(1.0 / (2.0 * math.sqrt(3.0)))


# --- monotone coupling --------------------------------------------------------


def test_monotone_equal_densities_identical(p_drift):
    out = run_monotone(p_drift, 1.0, 1.0, 20.0, 120, seed=3,
                       snap_times=[10.0, 20.0])
    r = out.result
    assert np.array_equal(r["final_occ"], r["final_occ_low"])
    for a, b in zip(r["snap_occ"], r["snap_occ_low"]):
        assert np.array_equal(a, b)
    assert out.exact


def test_monotone_zero_lower_empty(p_drift):
    out = run_monotone(p_drift, 0.0, 1.0, 20.0, 120, seed=4, infect=False)
    # the lower layer has no particles at all when rho'=0 and no seed walker
    assert int(out.result["final_occ_low"].sum()) == 0
    assert out.exact


def test_monotone_no_violations_small_grid(p_drift):
    for seed in range(10):
        out = run_monotone(p_drift, 0.5, 1.0, 30.0, 180, seed=seed)
        assert out.viol_domination == 0
        assert out.viol_infection == 0


def test_monotone_front_ordering(p_drift):
    # lower-layer front can never exceed the full one (subset infection)
    for seed in range(5):
        out = run_monotone(p_drift, 0.3, 1.5, 25.0, 160, seed=40 + seed)
        r = out.result
        if r["final_r_low"] is not None:
            assert r["final_r_low"] <= r["final_r"]
            assert r["range_sup_low"] <= r["range_sup"]


# --- sprinkled schedule and coupling ------------------------------------------


def test_schedule_shape(p_drift):
    s = build_schedule(p_drift, 1.0, 500.0, [1], [20], meeting_window_c=4.0)
    assert s.s_times[0] == 0.0
    assert all(b >= a for a, b in zip(s.s_times, s.s_times[1:]))
    assert len(s.s_times) == int(500.0 ** (2.0 / 3.0)) + 1
    assert s.box_side == int(4.0 / 2.0 * 500.0 ** (1.0 / math.sqrt(3.0)))
    # halo covers [1,20] +- 3 rho T and is a whole number of boxes
    assert s.halo_lo[0] <= 1 - 3 * 500 and s.halo_hi[0] >= 20 + 3 * 500
    assert (s.halo_hi[0] - s.halo_lo[0] + 1) % s.box_side == 0
    rho_star, _ = sprinkle_density(1.0, 500.0, 1)
    assert s.rho_star == pytest.approx(rho_star)


def test_schedule_degenerate_horizon_errors(p_drift):
    with pytest.raises(ScheduleError):
        build_schedule(p_drift, 1.0, 2.0, [1], [5])


def test_sprinkled_small_run_structure(p_drift):
    out = run_sprinkled(p_drift, 1.0, 60.0, [1], [10], seed=5, collect_occ=True)
    mc = out.merged_counts
    assert len(mc) == out.schedule.n_rematch
    assert np.all(np.diff(mc) >= 0)  # merged pairs never decrease
    assert out.demerges == 0
    # initial marginals have the right totals within 5 sigma
    halo_sites = out.schedule.halo_hi[0] - out.schedule.halo_lo[0] + 1
    tot = int(out.result["init_occ_star"].sum())
    mean = out.schedule.rho_star * halo_sites
    assert abs(tot - mean) < 5 * math.sqrt(mean)


def test_sprinkled_warns_below_unit_density(p_drift):
    with pytest.warns(UserWarning):
        run_sprinkled(p_drift, 0.5, 60.0, [1], [5], seed=6)


def test_sprinkled_marginal_chi2_and_independence(p_drift):
    # initial occupancy of each system fits its Poisson marginal, and the
    # base system is uncorrelated with the sprinkled initial data
    reps = 60
    c_eta = {}
    c_star = {}
    tot_eta = []
    tot_star = []
    rho_star = None
    for rep in range(reps):
        out = run_sprinkled(p_drift, 1.0, 60.0, [1], [10], seed=7, replica=rep,
                            collect_occ=True)
        rho_star = out.schedule.rho_star
        lo = out.schedule.halo_lo[0] - out.schedule.window_lo[0]
        hi = out.schedule.halo_hi[0] - out.schedule.window_lo[0]
        e = np.asarray(out.result["init_occ_eta"])[lo:hi + 1]
        s = np.asarray(out.result["init_occ_star"])[lo:hi + 1]
        for v, c in zip(*np.unique(e, return_counts=True)):
            c_eta[int(v)] = c_eta.get(int(v), 0) + int(c)
        for v, c in zip(*np.unique(s, return_counts=True)):
            c_star[int(v)] = c_star.get(int(v), 0) + int(c)
        tot_eta.append(int(e.sum()))
        tot_star.append(int(s.sum()))
    _, _, p_eta = stats.chi2_poisson_fit(c_eta, 1.0)
    _, _, p_star = stats.chi2_poisson_fit(c_star, rho_star)
    assert p_eta > 0.01 and p_star > 0.01
    corr = np.corrcoef(tot_eta, tot_star)[0, 1]
    assert abs(corr) < 4.0 / math.sqrt(reps)


def test_sprinkled_merges_saturate_at_moderate_horizon(p_drift):
    out = run_sprinkled(p_drift, 1.0, 200.0, [1], [10], seed=8)
    if not out.bad_B0:
        assert out.merged_counts[-1] >= 0.9 * out.n_eta
        assert out.dominated_on_target


# --- decoupling ---------------------------------------------------------------


def test_error_term_formula():
    v = decoupling_error_term(1.0, 4, 100.0, 1, 1.0)
    delta = min(0.5, 1.0 / (2 * math.sqrt(3)))
    assert v == pytest.approx(104.0 ** 2 * math.exp(-100.0 ** delta))


def test_probe_f2_constant_one_reduces_to_mean(p_drift):
    # with f2 == 1 the inequality is E[f1] <= E[f1] + error, always true
    f1, _ = standard_probes(3, 20.0, 1, threshold=2)
    f2 = DecouplingProbe("count_at_most", (1,), (3,), 23.0, 26.0,
                         threshold=10 ** 9)  # always 1
    rep = decoupling_probe(p_drift, 1.0, 20.0, 3, 150, seed=9, probes=(f1, f2))
    assert rep.e_f2 == 1.0
    assert rep.lhs == pytest.approx(rep.e_f1, abs=0.15)
    assert rep.holds_at_95


def test_probes_are_decreasing_indicators():
    f = DecouplingProbe("count_at_most", (1,), (4,), 0.0, 4.0, threshold=3)
    assert f.evaluate([0, 1, 2, 3, 3]) == 1.0
    assert f.evaluate([0, 0, 0, 0, 4]) == 0.0
    g = DecouplingProbe("empty_throughout", (1,), (4,), 0.0, 4.0)
    assert g.evaluate([0, 0, 0, 0, 0]) == 1.0
    assert g.evaluate([0, 1, 0, 0, 0]) == 0.0


def test_decoupling_smoke_inequality(p_drift):
    rep = decoupling_probe(p_drift, 1.0, 50.0, 4, 300, seed=10)
    assert rep.holds_at_95
    # the genuine product bound holds with margin even without the error term
    assert rep.lhs <= rep.e_f1 * rep.e_f2 + 3 * math.sqrt(
        rep.e_f1 * rep.e_f2 / rep.replicas) + 0.02


def test_decoupling_independence_sanity(p_drift):
    # far-separated boxes: joint frequency close to the product
    rep = decoupling_probe(p_drift, 1.0, 120.0, 3, 400, seed=11)
    rho_star, _ = sprinkle_density(1.0, 120.0, 1)
    # compare lhs against an independent product at the same density
    rep2 = decoupling_probe(p_drift, rho_star, 120.0, 3, 400, seed=12)
    prod = rep.e_f1 * (rep2.e_f1)
    se = 4 * math.sqrt(max(rep.lhs * (1 - rep.lhs), 0.25 / rep.replicas) / rep.replicas)
    assert abs(rep.lhs - prod) < se + 0.05


def test_decoupling_gap_below_minimum_rejected(p_drift):
    with pytest.raises(ValueError):
        decoupling_probe(p_drift, 1.0, 1.0, 4, 10, seed=1)
