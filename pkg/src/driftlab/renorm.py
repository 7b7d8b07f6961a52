"""Renormalization-scheme objects: the scale/velocity/density ladders, the
box events (slow-spread E_k, fast-spread D_k) with their desk-scale Monte
Carlo estimators, the elementary bad-event estimators (busy site, box exit,
front trigger), and the parametric recursion report.

Scales grow as L_{k+1} = L_k^{d+7}, so only the bottom of the ladder is ever
simulated; higher levels exist as exact big-integer arithmetic.  Event
estimators certify their window truncation by requiring that no infected
particle was frozen at the window edge (otherwise the replica is flagged).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import engine, stats
from .infection import TrackedRun
from .lattice import JumpDistribution

MAX_EXACT_BITS = 1 << 20  # ~10^5 decimal digits; beyond this L_k saturates


class LadderError(ValueError):
    pass


class WindowError(RuntimeError):
    """Simulation window cannot certify the requested box event."""


@dataclass
class ScaleLadder:
    """Joint scale, velocity and density sequences.

    L_k = L_0^{(d+7)^k} (exact, materialized on demand); velocities
    theta_k = 8 - (6/pi^2) sum_{j<=k} j^-2 decrease to 7; densities
    rho_0 = sqrt(L_0), rho_{k+1} = rho_k (1 + L_k^{-d/(4 sqrt(d+2))})
    increase to a finite limit and must stay below L_k^2.
    """

    L0: int
    d: int
    k_max: int
    theta: Tuple[float, ...] = field(init=False)
    rho: Tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.L0 < 2 or self.L0 != int(self.L0):
            raise LadderError("L0 must be an integer >= 2")
        if self.k_max < 0:
            raise LadderError("k_max must be nonnegative")
        th = [8.0]
        for k in range(self.k_max):
            th.append(th[-1] - 6.0 / (math.pi ** 2 * (k + 1) ** 2))
        self.theta = tuple(th)
        ex = -self.d / (4.0 * math.sqrt(self.d + 2))
        rho = [math.sqrt(self.L0)]
        for k in range(self.k_max):
            rho.append(rho[-1] * (1.0 + math.exp(ex * self.log_L(k))))
        self.rho = tuple(rho)
        for k in range(self.k_max):
            bound = 2.0 * self.log_L(k)  # log of L_k^2
            if math.log(self.rho[k + 1]) > bound:
                raise LadderError(
                    f"rho_{k+1} = {self.rho[k+1]:.4f} exceeds L_{k}^2; "
                    f"L0 = {self.L0} is too small")

    def exponent(self, k: int) -> int:
        return (self.d + 7) ** k

    def log_L(self, k: int) -> float:
        return self.exponent(k) * math.log(self.L0)

    def L(self, k: int) -> int:
        """Exact L_k; raises when the integer would be astronomically large."""
        e = self.exponent(k)
        bits = e * math.log2(self.L0)
        if bits > MAX_EXACT_BITS:
            raise LadderError(
                f"L_{k} needs ~{bits:.0f} bits; first failing level is k={k}")
        return self.L0 ** e

    def rho_infinity(self, extra_levels: int = 64) -> float:
        """Numerical limit of the density ladder (converges very fast)."""
        ex = -self.d / (4.0 * math.sqrt(self.d + 2))
        r = self.rho[-1]
        for k in range(self.k_max, self.k_max + extra_levels):
            r *= 1.0 + math.exp(ex * self.log_L(k))
        return r


def ladder(L0: int, d: int, k_max: int) -> ScaleLadder:
    return ScaleLadder(L0=L0, d=d, k_max=k_max)


def delta_constraint_ok(d: int, delta: float) -> bool:
    """Checker for the exponent constraint (d+7)^{1+delta} < d+8."""
    return (d + 7) ** (1.0 + delta) < d + 8


# ---------------------------------------------------------------------------
# elementary estimators


@dataclass
class FreqEstimate:
    name: str
    hits: int
    replicas: int
    ci: Tuple[float, float]
    params: dict

    @property
    def frequency(self) -> float:
        return self.hits / self.replicas if self.replicas else 0.0


def busy_site_estimate(p: JumpDistribution, rho: float, L: float, replicas: int,
                       seed: int, backend: str | None = None) -> dict:
    """Frequency of {eta_t(0) >= L^{d+4} for some t <= L} plus the max-
    occupancy histogram (the threshold is astronomically high at desk scale,
    so the distribution is the informative part)."""
    d = p.d
    if rho > L * L:
        raise ValueError("estimator assumes rho <= L^2")
    threshold = int(L) ** (d + 4)
    half = engine.truncation_radius(rho, L, 0, 1e-6, d) if rho > 0 else 1
    hits = 0
    maxima = []
    for rep in range(replicas):
        out = engine.run_counts(p, rho, L, half, seed, rep, backend=backend,
                                watch_site=[0] * d)
        m = out["watch_max"]
        maxima.append(m)
        if m >= threshold:
            hits += 1
    maxima = np.asarray(maxima)
    est = FreqEstimate("busy_site", hits, replicas, stats.wilson_ci(hits, replicas),
                       {"rho": rho, "L": L, "threshold": threshold})
    return {"estimate": est, "max_occupancy": maxima}


def busy_site_coupled(p: JumpDistribution, rho_low: float, rho_high: float,
                      L: float, replicas: int, seed: int,
                      backend: str | None = None) -> dict:
    """Coupled max-occupancy samples for the stochastic-dominance check."""
    d = p.d
    half = engine.truncation_radius(rho_high, L, 0, 1e-6, d)
    lows, highs = [], []
    for rep in range(replicas):
        out = engine.run_counts(p, rho_high, L, half, seed, rep, backend=backend,
                                watch_site=[0] * d, lower_rho=rho_low)
        highs.append(out["watch_max"])
        lows.append(out["watch_max_low"])
    return {"low": np.asarray(lows), "high": np.asarray(highs)}


def leave_box_estimate(p: JumpDistribution, rho: float, L: int, replicas: int,
                       seed: int, box_exponent: Optional[int] = None,
                       backend: str | None = None) -> FreqEstimate:
    """Frequency of the infection leaving [-L^{d+6}, L^{d+6}]^d before time L
    (standard process: origin cohort plus the added walker)."""
    d = p.d
    if rho > L * L:
        raise ValueError("estimator assumes rho <= L^2")
    be = (d + 6) if box_exponent is None else box_exponent
    radius = int(L) ** be
    slack = engine.truncation_radius(rho, L, 0, 1e-6, d) if rho > 0 else 50
    half = radius + slack + 2
    hits = 0
    for rep in range(replicas):
        out = engine.run_counts(p, rho, float(L), half, seed, rep, backend=backend,
                                extra_at=[0] * d, infect_site=[0] * d,
                                infect_time=0.0)
        rng_sup = out["range_sup"] or 0
        if rng_sup > radius:
            hits += 1
    return FreqEstimate("leave_box", hits, replicas, stats.wilson_ci(hits, replicas),
                        {"rho": rho, "L": L, "box_exponent": be, "radius": radius})


def trigger_estimate(p: JumpDistribution, L: int, replicas: int, seed: int,
                     backend: str | None = None) -> dict:
    """At density sqrt(L): frequencies of {r_L < 8L} (the stated event) and
    of {r_L < L} (the event actually bounded in the proof; the discrepancy is
    reported, not resolved)."""
    d = p.d
    rho = math.sqrt(L)
    reach = 8 * L + 1
    half = engine.infection_window(rho, float(L), reach)
    slow8 = 0
    slow1 = 0
    fronts = []
    frozen_infected = 0
    for rep in range(replicas):
        out = engine.run_counts(p, rho, float(L), half, seed, rep, backend=backend,
                                extra_at=[0] * d, infect_site=[0] * d,
                                infect_time=0.0)
        r = out["final_r"]
        fronts.append(r if r is not None else -half)
        if r is None or r < 8 * L:
            slow8 += 1
        if r is None or r < L:
            slow1 += 1
        frozen_infected += out["n_frozen_infected"]
    return {
        "slow_8L": FreqEstimate("trigger_8L", slow8, replicas,
                                stats.wilson_ci(slow8, replicas),
                                {"rho": rho, "L": L, "threshold": 8 * L}),
        "slow_L": FreqEstimate("trigger_L", slow1, replicas,
                               stats.wilson_ci(slow1, replicas),
                               {"rho": rho, "L": L, "threshold": L}),
        "fronts": np.asarray(fronts),
        "frozen_infected": frozen_infected,
    }


def trigger_mechanism(run: TrackedRun, L: int) -> bool:
    """Event-construction indicator: in every window [k+i/8, k+(i+1)/8) there
    is a jump (k+i)e_1 -> (k+i+1)e_1 and a particle resting at (k+i+1)e_1
    throughout; on that intersection the front reaches 8L by time L."""
    d = run.d

    def e1(x):
        return (x,) + (0,) * (d - 1)

    for k in range(int(L)):
        for i in range(8):
            t0 = k + i / 8.0
            t1 = k + (i + 1) / 8.0
            src = e1(k + i)
            dst = e1(k + i + 1)
            jump_ok = any(t0 <= ev[0] < t1 and ev[2] == src and ev[3] == dst
                          for ev in run.events)
            if not jump_ok:
                return False
            stay_ok = False
            for pid in run.origins:
                if run.position_at(pid, t0) != dst:
                    continue
                if all(not (t0 < ev[0] < t1) for ev in
                       (run.events[j] for j in run.pid_events().get(pid, ()))):
                    stay_ok = True
                    break
            if not stay_ok:
                return False
    return True


def trigger_union_bound(p: JumpDistribution, L: int) -> float:
    """Union bound sum_{k,i} P[A_{k,i}^c] evaluated from the formula
    (usually vacuous at desk scale; reported for reference)."""
    rho = math.sqrt(L)
    miss = math.exp(-(1.0 - math.exp(-0.125)) * p.prob_pos[0] * rho) \
        + math.exp(-math.exp(-0.125) * rho)
    return 8 * L * miss


# ---------------------------------------------------------------------------
# box events E_k / D_k


@dataclass
class BoxEventSample:
    """Per-replica indicators for one scale: E (slow-spread avoided), Ebar
    (speed-7 variant), D (fast spread)."""

    E: np.ndarray
    Ebar: np.ndarray
    D: np.ndarray
    invalid: int  # replicas with infected particles frozen at the window edge

    def p_hat(self, which: str = "E") -> "PkEstimate":
        arr = getattr(self, which)
        hits = int(arr.sum())
        return PkEstimate(hits=hits, replicas=len(arr),
                          ci=stats.wilson_ci(hits, len(arr)))


@dataclass
class PkEstimate:
    hits: int
    replicas: int
    ci: Tuple[float, float]

    @property
    def p_hat(self) -> float:
        return self.hits / self.replicas if self.replicas else 0.0


def _box_event_window(ladd: ScaleLadder, k: int, rho: float) -> Tuple[int, int]:
    """(simulation half-width, shell radius) for scale k, memory permitting.

    The shell L_k^{d+6} is usually far beyond anything the infection can
    reach in time L_k; the window only needs to contain the realized spread
    with truncation slack, and the run certifies that by requiring zero
    frozen infected particles.
    """
    d = ladd.d
    Lk = ladd.L(k)
    shell = ladd.L0 ** (ladd.exponent(k) * (d + 6))
    reach = int(math.ceil(max(ladd.theta[k] * Lk, 1.5 * (1.0 + rho) * Lk))) + 2
    half = engine.truncation_radius(rho, float(Lk), reach, 1e-6, d)
    if shell + 2 < half:
        half = shell + engine.truncation_radius(rho, float(Lk), 0, 1e-6, d) + 2
    return half, shell


def estimate_box_events(p: JumpDistribution, ladd: ScaleLadder, k: int,
                        replicas: int, seed: int, rho: Optional[float] = None,
                        lower_rho: Optional[float] = None,
                        backend: str | None = None) -> dict:
    """Sample E_k / Ebar_k / D_k indicators at scale k (desk scale: k <= 1).

    The restarted infection xi^m uses the particles at the anchor site only
    (no added walker).  With lower_rho set, a thinned copy runs on the same
    walks and the lower layer's indicators are returned too (exact
    monotonicity checks).
    """
    d = p.d
    if k > 1:
        raise WindowError("only the bottom scales k in {0, 1} are simulated")
    Lk = ladd.L(k)
    rho = ladd.rho[k] if rho is None else rho
    half, shell = _box_event_window(ladd, k, rho)
    theta = ladd.theta[k]
    dual = lower_rho is not None
    E = np.zeros(replicas, dtype=bool)
    Eb = np.zeros(replicas, dtype=bool)
    D = np.zeros(replicas, dtype=bool)
    EL = np.zeros(replicas, dtype=bool)
    EbL = np.zeros(replicas, dtype=bool)
    DL = np.zeros(replicas, dtype=bool)
    invalid = 0
    for rep in range(replicas):
        out = engine.run_counts(p, rho, float(Lk), half, seed, rep, backend=backend,
                                infect_site=[0] * d, infect_time=0.0,
                                lower_rho=(lower_rho if dual else -1.0))
        if out["n_frozen_infected"] > 0:
            invalid += 1

        def indicators(r, rng_sup):
            rr = -10 ** 18 if r is None else r
            rs = 0 if rng_sup is None else rng_sup
            d_ind = rs >= shell
            e_ind = (not d_ind) and (rr < theta * Lk)
            eb_ind = (not d_ind) and (rr < 7 * Lk)
            return e_ind, eb_ind, d_ind

        E[rep], Eb[rep], D[rep] = indicators(out["final_r"], out["range_sup"])
        if dual:
            EL[rep], EbL[rep], DL[rep] = indicators(out["final_r_low"],
                                                    out["range_sup_low"])
    res = {"full": BoxEventSample(E=E, Ebar=Eb, D=D, invalid=invalid),
           "k": k, "L_k": Lk, "rho": rho, "theta": theta,
           "shell": shell, "window_half": half}
    if dual:
        res["low"] = BoxEventSample(E=EL, Ebar=EbL, D=DL, invalid=invalid)
    return res


def estimate_Ek(p: JumpDistribution, ladd: ScaleLadder, k: int, replicas: int,
                seed: int, **kw) -> PkEstimate:
    return estimate_box_events(p, ladd, k, replicas, seed, **kw)["full"].p_hat("E")


def estimate_Dk(p: JumpDistribution, ladd: ScaleLadder, k: int, replicas: int,
                seed: int, **kw) -> PkEstimate:
    return estimate_box_events(p, ladd, k, replicas, seed, **kw)["full"].p_hat("D")


# ---------------------------------------------------------------------------
# recursion report


def recursion_report(ladd: ScaleLadder, p0_hat: float, p1_hat: float,
                     c_grid: Sequence[float] = (0.25, 0.5, 1.0, 2.0, 4.0)) -> List[dict]:
    """Feasible-region report for p_1 <= L_1^A (p_0^{d+8} + e^{-c L_0^delta}).

    The constants are existential, so the output is the minimal exponent A
    making the inequality hold for each decay constant c; no verdict.
    """
    d = ladd.d
    delta = min(0.5, d / (2.0 * math.sqrt(d + 2)))
    L1 = ladd.L(1)
    rows = []
    for c in c_grid:
        base = p0_hat ** (d + 8) + math.exp(-c * ladd.L0 ** delta)
        if p1_hat <= 0.0:
            a_min = -math.inf
        elif base <= 0.0:
            a_min = math.inf
        else:
            a_min = math.log(p1_hat / base) / math.log(L1)
        rows.append({"c": c, "delta": delta, "base": base,
                     "A_min": a_min, "feasible_at_A0": p1_hat <= base})
    return rows
