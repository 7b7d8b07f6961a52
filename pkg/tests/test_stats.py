import math

import numpy as np
import pytest

from driftlab import stats
from driftlab.lattice import JumpDistribution
from driftlab.stats import (calibrate_meeting_window, chi2_poisson_fit,
                            deviation_exact_symmetric, deviation_tail,
                            exact_kernel, kernel_lower_bound_scan,
                            meeting_probability, meeting_probability_mc,
                            mushroom_tail, poisson_sf, poisson_tail,
                            trend_decreasing_pvalue, two_proportion_greater,
                            wilson_ci)


# --- poisson tails ------------------------------------------------------------


def test_tail_threshold_zero_is_one():
    assert poisson_tail(1.0, 0).exact == 1.0


def test_tail_frozen_value():
    # direct series: P[Poisson(1) >= 10] = 1.11425478...e-7
    assert poisson_tail(1.0, 10).exact == pytest.approx(1.1142547834e-7, rel=1e-9)


def test_tail_matches_scipy_grid():
    from scipy.stats import poisson as sp_poisson
    for rho in (0.5, 1.0, 2.0, 4.0, 17.3):
        for a in (0, 1, 2, 5, 10, 30, 50):
            assert poisson_sf(a, rho) == pytest.approx(
                float(sp_poisson.sf(a - 1, rho)), rel=1e-10, abs=1e-300)


def test_chernoff_dominates_exact_on_grid():
    for rho in (0.5, 1.0, 2.0, 4.0):
        a0 = math.ceil(2 * rho)
        for a in range(a0, 51):
            t = poisson_tail(rho, a)
            assert t.exact <= t.chernoff_bound


def test_tail_degenerate_rho():
    assert poisson_tail(0.0, 3).exact == 0.0
    assert poisson_tail(0.0, 0).exact == 1.0


# --- intervals and trends -------------------------------------------------------


def test_wilson_zero_successes():
    lo, hi = wilson_ci(0, 100, 0.95)
    assert lo == pytest.approx(0.0, abs=1e-12)
    assert hi == pytest.approx(0.0370, abs=5e-4)


def test_wilson_symmetric_at_half():
    lo, hi = wilson_ci(50, 100, 0.95)
    assert lo + hi == pytest.approx(1.0, abs=1e-12)


def test_wilson_widens_with_level():
    lo1, hi1 = wilson_ci(10, 40, 0.9)
    lo2, hi2 = wilson_ci(10, 40, 0.99)
    assert hi2 - lo2 > hi1 - lo1


def test_wilson_degenerate_trials():
    assert wilson_ci(0, 0) == (0.0, 1.0)


def test_two_proportion_one_sided():
    assert two_proportion_greater(60, 100, 30, 100) < 0.01
    assert two_proportion_greater(30, 100, 60, 100) > 0.5


def test_trend_test_detects_decrease():
    p = trend_decreasing_pvalue([90, 70, 50, 20], [100] * 4, [1, 2, 3, 4])
    assert p < 1e-6
    p_flat = trend_decreasing_pvalue([50, 52, 49, 51], [100] * 4, [1, 2, 3, 4])
    assert p_flat > 0.1


def test_chi2_fit_accepts_and_rejects():
    rng = stats.rng_for(5, 1)
    sample = rng.poisson(2.0, size=20000)
    counts = {int(v): int(c) for v, c in zip(*np.unique(sample, return_counts=True))}
    _, _, p_ok = chi2_poisson_fit(counts, 2.0)
    _, _, p_bad = chi2_poisson_fit(counts, 2.4)
    assert p_ok > 0.01
    assert p_bad < 1e-6


# --- deviations and the stabilization radius ------------------------------------


def test_deviation_huge_eps_never_hits(p_drift):
    out = deviation_tail(p_drift, 10.0, 50.0, 300, seed=1)
    assert out["frequency"] == 0.0


def test_deviation_decreasing_in_u(p_drift):
    freqs = [deviation_tail(p_drift, 0.3, u, 1500, seed=2)["frequency"]
             for u in (20.0, 40.0, 80.0)]
    assert freqs[0] > freqs[1] > freqs[2]


def test_deviation_exact_chain_oracle(p_sym):
    # absorbing-boundary matrix exponential vs Monte Carlo, symmetric walk
    exact = deviation_exact_symmetric(0.3, 40.0)
    out = deviation_tail(p_sym, 0.3, 40.0, 4000, seed=3)
    lo, hi = out["ci"]
    assert lo <= exact <= hi


def test_mushroom_envelope_and_slope(p_drift):
    out = mushroom_tail(p_drift, 0.25, 1500, 200.0, seed=4)
    assert out["unstable"] < 0.02 * 1500
    # envelope holds by construction; the tail decays exponentially
    assert out["tail_slope"] < 0.0
    assert out["tail_r2"] > 0.9


def test_mushroom_large_eps_concentrates_at_floor(p_drift):
    eps = 2.0
    out = mushroom_tail(p_drift, eps, 400, 60.0, seed=5)
    floor = math.ceil(2.0 / eps)
    radii = out["radii"]
    assert np.median(radii) <= 4 * max(floor, 1)


def test_mushroom_envelope_explicit(p_drift):
    # rebuild the radius from its definition on raw trajectories and verify
    # the cone ||X_t - vt|| <= max(R, eps t) pointwise at segment endpoints
    from driftlab.lattice import drift
    eps = 0.25
    v = np.asarray(drift(p_drift).v)
    horizon = 120.0
    out = mushroom_tail(p_drift, eps, 200, horizon, seed=7)
    assert (out["radii"] >= math.ceil(2.0 / eps)).all()
    for rep in range(20):
        rng = stats.rng_for(7, 102, rep)
        times, pospath = stats._walk_path(rng, p_drift, horizon)
        checkpoints = [0.0] + [float(t) for t in times if t <= horizon] + [horizon]
        pos = [np.zeros(1)] + [pospath[i] for i in range(len(times)) if times[i] <= horizon]
        last_violation = 0.0
        for i, t in enumerate(checkpoints):
            x = pos[min(i, len(pos) - 1)]
            if np.abs(x - v * t).max() > eps * t + 1e-12 and t > 0:
                last_violation = max(last_violation, t)
        if last_violation > horizon - 30.0:
            continue  # not stabilized within the horizon; skipped by the module too
        stab = max(math.ceil(2.0 / eps), math.ceil(last_violation))
        sup_pre = stats._sup_deviation_segments(times, pospath, v, float(stab))
        radius = max(float(stab), sup_pre)
        for i, t in enumerate(checkpoints):
            x = pos[min(i, len(pos) - 1)]
            assert np.abs(x - v * t).max() <= max(radius, eps * t) + 1e-9


# --- kernels ---------------------------------------------------------------------


def test_kernel_t_zero_limit(p_drift):
    tab = exact_kernel(p_drift, 1e-9)
    assert tab.prob(0) == pytest.approx(1.0, rel=1e-8)


def test_kernel_mass_certified(p_drift, p_d2):
    for p, t in ((p_drift, 16.0), (p_drift, 64.0), (p_d2, 8.0)):
        tab = exact_kernel(p, t)
        assert 1.0 - 1e-12 <= tab.mass() <= 1.0 + 1e-9
        assert tab.tail_error < 1e-12


def test_kernel_symmetry_zero_drift(p_sym):
    tab = exact_kernel(p_sym, 9.0)
    for x in range(0, tab.radius + 1):
        assert tab.prob(x) == tab.prob(-x)


def test_kernel_moments(p_drift):
    tab = exact_kernel(p_drift, 64.0)
    xs = np.arange(-tab.radius, tab.radius + 1)
    pr = np.array([tab.prob(int(x)) for x in xs])
    assert (xs * pr).sum() == pytest.approx(-32.0, abs=1e-6)
    assert ((xs + 32.0) ** 2 * pr).sum() == pytest.approx(64.0, rel=1e-6)


def test_kernel_vs_mc_symmetric_t1(p_sym):
    # series value of P[X_1 = 0] against vectorized MC within 4 sigma
    tab = exact_kernel(p_sym, 1.0)
    exact = tab.prob(0)
    n = 10 ** 6
    rng = stats.rng_for(8, 104)
    jumps = rng.poisson(1.0, size=n)
    rights = rng.binomial(jumps, 0.5)
    freq = float(((2 * rights - jumps) == 0).mean())
    assert abs(freq - exact) < 4 * math.sqrt(exact * (1 - exact) / n)


def test_kernel_radius_too_small_rejected(p_drift):
    with pytest.raises(MemoryError):
        exact_kernel(p_drift, 64.0, radius=10)


def test_kernel_decomposition_identity(p_drift):
    # drift Poisson components convolved with the leftover symmetric kernel
    t = 4.0
    v = p_drift.prob_pos[0] - p_drift.prob_neg[0]
    z = 2 * min(p_drift.prob_pos[0], p_drift.prob_neg[0])
    sym = JumpDistribution((0.5,), (0.5,))
    base = exact_kernel(sym, t * z)
    direct = exact_kernel(p_drift, t)
    lam = t * abs(v)
    for x in (-4, -2, -1, 0, 1, 3):
        total = 0.0
        pk = math.exp(-lam)
        k = 0
        while pk > 1e-18 or k < lam:
            y = -k if v < 0 else k
            total += pk * base.prob(x - y)
            k += 1
            pk *= lam / k
        assert total == pytest.approx(direct.prob(x), abs=1e-12)


def test_kernel_lower_bound_floor_stable(p_drift):
    c_space = 0.5 * math.sqrt(1.0 - 0.5)
    floors = []
    for t in (16.0, 64.0, 256.0):
        scan = kernel_lower_bound_scan(p_drift, t, c_space)
        assert scan["floor"] > 0.0
        floors.append(scan["floor"])
    assert max(floors) / min(floors) < 2.0


# --- meeting probability ----------------------------------------------------------


def test_meeting_same_start_short_time(p_drift):
    assert meeting_probability(p_drift, (0,), (0,), 1e-9) == pytest.approx(1.0, rel=1e-7)


def test_meeting_dual_oracle(p_drift):
    exact = meeting_probability(p_drift, (0,), (2,), 64.0)
    mc = meeting_probability_mc(p_drift, (0,), (2,), 64.0, 4 * 10 ** 5, seed=9)
    sigma = math.sqrt(exact * (1 - exact) / mc["replicas"])
    assert abs(mc["frequency"] - exact) < 4 * sigma


def test_meeting_scaled_value_bounded_below(p_drift):
    # fixed separation / sqrt(t): t^{d/2} P[meet] stays bounded away from 0
    vals = []
    for t in (16.0, 64.0, 256.0):
        gap = round(0.25 * math.sqrt(t))
        v = meeting_probability(p_drift, (0,), (gap,), t) * math.sqrt(t)
        vals.append(v)
    assert min(vals) > 0.1
    assert max(vals) / min(vals) < 2.0


def test_meeting_d2(p_d2):
    v = meeting_probability(p_d2, (0, 0), (1, 1), 9.0)
    mc = meeting_probability_mc(p_d2, (0, 0), (1, 1), 9.0, 2 * 10 ** 5, seed=10)
    sigma = math.sqrt(max(v * (1 - v), 1e-6) / mc["replicas"])
    assert abs(mc["frequency"] - v) < 4 * sigma


def test_calibrated_meeting_window(p_drift):
    c = calibrate_meeting_window(p_drift, 12.6)
    assert 0.5 <= c <= 4.0
