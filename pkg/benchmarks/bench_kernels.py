#!/usr/bin/env python3
"""Benchmark the compiled kernel against the pure-Python fallback.

Runs the same workloads on both backends (results are bit-identical by
contract; this script checks that too) and prints events/second plus the
speedup.  Workload sizes are chosen so the Python side finishes in seconds.

    python benchmarks/bench_kernels.py [--heavy]
"""
import argparse
import time

import numpy as np

from driftlab import kernel
from driftlab.lattice import JumpDistribution


def run_case(name, fn_name, kw, backends):
    rows = []
    baseline = None
    outputs = {}
    for b in backends:
        fn = getattr(kernel.backend(b), fn_name)
        t0 = time.perf_counter()
        out = fn(**kw)
        dt = time.perf_counter() - t0
        outputs[b] = out
        rate = out["n_events"] / dt / 1e6 if dt > 0 else float("inf")
        rows.append((name, b, out["n_events"], dt, rate))
        if baseline is None:
            baseline = dt
    if len(backends) == 2:
        a, bb = outputs[backends[0]], outputs[backends[1]]
        for k in a:
            va, vb = a[k], bb[k]
            if isinstance(va, np.ndarray):
                assert np.array_equal(va, vb), f"{name}: backend mismatch on {k}"
            elif isinstance(va, list):
                assert len(va) == len(vb)
            else:
                assert va == vb, f"{name}: backend mismatch on {k}"
    return rows


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--heavy", action="store_true",
                    help="larger workloads (compiled backend shines more)")
    args = ap.parse_args()
    p = JumpDistribution((0.25,), (0.75,))
    backends = kernel.available_backends()
    if "c" not in backends:
        print("note: compiled kernel not built; benchmarking python only")
    scale = 4.0 if args.heavy else 1.0

    cases = []
    cases += run_case(
        "plain walk farm", "fast_run",
        dict(seed=1, replica=0, lo=[-400], hi=[400], cdf=p.cdf(), rate=1.0,
             t_end=50.0 * scale, rho=2.0), backends)
    cases += run_case(
        "infected run", "fast_run",
        dict(seed=1, replica=0, lo=[-600], hi=[600], cdf=p.cdf(), rate=1.0,
             t_end=60.0 * scale, rho=3.0, extra_at=[0], infect_site=[0],
             infect_time=0.0, front_dt=1.0), backends)
    cases += run_case(
        "dual-layer coupling", "fast_run",
        dict(seed=1, replica=0, lo=[-400], hi=[400], cdf=p.cdf(), rate=1.0,
             t_end=40.0 * scale, rho=2.0, lower_rho=1.0, extra_at=[0],
             infect_site=[0], infect_time=0.0), backends)
    T = 120.0 * scale
    s_times = [k * T ** (1 / 3) for k in range(int(T ** (2 / 3)) + 1)]
    cases += run_case(
        "sprinkled coupling", "sprinkled_run",
        dict(seed=1, replica=0, lo=[-430], hi=[450], halo_lo=[-360],
             halo_hi=[380], target_lo=[1], target_hi=[20], cdf=p.cdf(),
             rate=1.0, t_end=T, rho=1.0, rho_star=1.45, s_times=s_times,
             box_side=12), backends)

    print(f"\n{'case':24s} {'backend':8s} {'events':>12s} {'secs':>8s} {'Mev/s':>8s}")
    speedups = {}
    for name, b, ev, dt, rate in cases:
        print(f"{name:24s} {b:8s} {ev:12d} {dt:8.3f} {rate:8.2f}")
        speedups.setdefault(name, {})[b] = dt
    if "c" in backends:
        print()
        for name, d in speedups.items():
            if "python" in d and "c" in d:
                print(f"{name:24s} speedup x{d['python'] / d['c']:.1f}")
        print("\nall outputs bit-identical across backends")


if __name__ == "__main__":
    main()
