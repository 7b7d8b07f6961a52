"""Cross-backend equivalence: the compiled kernel and the pure-Python twin
must produce bit-identical results, and the tracked engine must agree with
the counts-mode kernels on everything they both report."""
import numpy as np
import pytest

from driftlab import engine, infection, kernel

HAVE_C = "c" in kernel.available_backends()

needs_c = pytest.mark.skipif(not HAVE_C, reason="compiled kernel not built")


def assert_same(a, b):
    assert set(a) == set(b)
    for k in a:
        va, vb = a[k], b[k]
        if isinstance(va, np.ndarray):
            assert np.array_equal(va, vb), k
        elif isinstance(va, list):
            assert len(va) == len(vb), k
            for x, y in zip(va, vb):
                assert np.array_equal(np.asarray(x), np.asarray(y)), k
        else:
            assert va == vb, k


CASES = [
    dict(lo=[-60], hi=[60], rho=1.0, t_end=12.0, extra_at=[0], infect_site=[0],
         infect_time=0.0, front_dt=1.0, snap_times=[0.0, 6.0, 12.0],
         watch_site=[0], collect_particles=True),
    dict(lo=[-50], hi=[70], rho=2.5, t_end=8.0, extra_at=[3], infect_site=[3],
         infect_time=2.0, front_dt=0.5, lower_rho=1.0, collect_particles=True),
    dict(lo=[-30], hi=[30], rho=0.0, t_end=20.0, extra_at=[0], infect_site=[0],
         infect_time=0.0, front_dt=2.0),
    dict(lo=[-12, -9], hi=[12, 9], rho=0.7, t_end=5.0, extra_at=[0, 0],
         infect_site=[0, 0], infect_time=0.0, front_dt=1.0, lower_rho=0.3,
         snap_times=[2.5], watch_site=[1, 0], collect_particles=True),
    dict(lo=[-40], hi=[40], rho=1.5, t_end=10.0, snap_times=[5.0, 10.0]),
]


@needs_c
@pytest.mark.parametrize("case", range(len(CASES)))
def test_fast_run_bit_identical(case, p_drift, p_d2):
    kw = dict(CASES[case])
    p = p_d2 if len(kw["lo"]) == 2 else p_drift
    kw.update(seed=97, replica=case, cdf=p.cdf(), rate=1.0)
    a = kernel.backend("python").fast_run(**kw)
    b = kernel.backend("c").fast_run(**kw)
    assert_same(a, b)


@needs_c
@pytest.mark.parametrize("T,c_box,rho_star", [
    (60.0, 8, 1.5),
    (120.0, 14, 1.5),
    (40.0, 3, 1.08),  # tiny boxes: exercises the B_0 independent fallback
])
def test_sprinkled_bit_identical(T, c_box, rho_star, p_drift):
    s_times = [k * T ** (1.0 / 3.0) for k in range(int(T ** (2.0 / 3.0)) + 1)]
    kw = dict(seed=31, replica=2, lo=[-230], hi=[250], halo_lo=[-200],
              halo_hi=[220], target_lo=[1], target_hi=[15], cdf=p_drift.cdf(),
              rate=1.0, t_end=T, rho=1.0, rho_star=rho_star, s_times=s_times,
              box_side=c_box, collect_occ=True)
    a = kernel.backend("python").sprinkled_run(**kw)
    b = kernel.backend("c").sprinkled_run(**kw)
    assert_same(a, b)


def test_tracked_agrees_with_counts_kernel(p_drift):
    for seed in (1, 9):
        run = infection.run_tracked(p_drift, 1.0, 15.0, 100, seed=seed)
        out = engine.run_counts(p_drift, 1.0, 15.0, 100, seed, 0,
                                extra_at=[0], infect_site=[0], infect_time=0.0,
                                front_dt=1.0)
        st = run.state
        assert st.front() == out["final_r"]
        assert st.range_sup == out["range_sup"]
        assert len(st.infected) == out["final_infected"]
        assert len(run.events) == out["n_events"]
        ker = [r for (_, r) in out["front_samples"]]
        trk = [(kernel.NO_FRONT if r is None else r) for (_, r) in st.front_samples]
        assert ker == trk


def test_tracked_event_replay_matches_final_occupancy(p_drift):
    run = infection.run_tracked(p_drift, 1.2, 10.0, 80, seed=5)
    occ = {}
    for pid, site in run.origins.items():
        occ[site] = occ.get(site, 0) + 1
    for (t, pid, a, b) in run.events:
        occ[a] -= 1
        occ[b] = occ.get(b, 0) + 1
    final = {s: len(m) for s, m in run.state.site_members.items() if m}
    assert {s: c for s, c in occ.items() if c} == final


@needs_c
def test_backend_env_override(monkeypatch):
    assert kernel.backend("python").BACKEND_NAME == "python"
    assert kernel.backend("c").BACKEND_NAME == "c"
