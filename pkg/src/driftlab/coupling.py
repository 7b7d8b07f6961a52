"""Couplings between particle systems.

* run_monotone: two densities on the same walk collection (thinning the
  initial data), with exact event-by-event domination and infected-set
  monotonicity counters;
* run_sprinkled: the rematched pairing coupling between densities rho and
  rho* over a halo of side boxes, reporting merged-pair counts, the bad
  events (halo escape, per-box count inversion) and the domination outcome
  on the target box;
* decoupling_probe: three-way Monte Carlo comparison of E[f1 f2] at the
  sprinkled density against E[f1] E[f2] split across densities, with the
  additive error term evaluated at a configurable decay constant.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import engine, kernel, stats
from .lattice import JumpDistribution


class ScheduleError(ValueError):
    """Sprinkle schedule degenerate for the requested horizon."""


DEFAULT_MEETING_WINDOW_C = 4.0  # see docs: desk-scale default, keeps the
# per-box population gap large enough that count inversions are rare while
# same-site rematching still merges every pair


def sprinkle_density(rho: float, gap: float, d: int) -> Tuple[float, float]:
    """rho* = rho (1 + gap^{-d/(4 sqrt(d+2))}) and the decay exponent delta."""
    if gap <= 0:
        raise ValueError("time gap must be positive")
    rho_star = rho * (1.0 + gap ** (-d / (4.0 * math.sqrt(d + 2))))
    delta = min(0.5, d / (2.0 * math.sqrt(d + 2)))
    return rho_star, delta


def decoupling_error_term(rho: float, n: int, gap: float, d: int, c: float) -> float:
    """rho^{2d+2} (n + gap)^{d+1} exp(-c gap^delta); c is configurable since
    the underlying constant is existential."""
    _, delta = sprinkle_density(max(rho, 1e-12), gap, d)
    return rho ** (2 * d + 2) * (n + gap) ** (d + 1) * math.exp(-c * gap ** delta)


# ---------------------------------------------------------------------------
# monotone coupling


@dataclass
class MonotoneOutcome:
    rho_low: float
    rho_high: float
    t_end: float
    viol_domination: int
    viol_infection: int
    result: dict  # raw kernel output (dual layer)

    @property
    def exact(self) -> bool:
        return self.viol_domination == 0 and self.viol_infection == 0


def run_monotone(p: JumpDistribution, rho_low: float, rho_high: float, t_end: float,
                 half_width: int, seed: int, replica: int = 0, infect: bool = True,
                 front_dt: float = 0.0, snap_times: Sequence[float] = (),
                 backend: str | None = None, **kw) -> MonotoneOutcome:
    """Evolve both densities on one walk collection; the sparse system is a
    prefix thinning of the dense one, so domination is structural and the
    kernel counts any violation of it (or of infected-set monotonicity)."""
    if rho_low > rho_high:
        raise ValueError("need rho_low <= rho_high")
    d = p.d
    out = kernel.backend(backend).fast_run(
        seed=seed, replica=replica, lo=[-half_width] * d, hi=[half_width] * d,
        cdf=p.cdf(), rate=1.0, t_end=t_end, rho=rho_high, lower_rho=rho_low,
        extra_at=[0] * d if infect else None,
        infect_site=[0] * d if infect else None,
        infect_time=0.0, front_dt=front_dt, snap_times=snap_times, **kw)
    return MonotoneOutcome(rho_low=rho_low, rho_high=rho_high, t_end=t_end,
                           viol_domination=out["viol_dom"],
                           viol_infection=out.get("viol_inf", 0),
                           result=out)


# ---------------------------------------------------------------------------
# sprinkled coupling


@dataclass(frozen=True)
class SprinkleSchedule:
    """Rematch times, pairing box side, halo and window for one coupling run."""

    d: int
    t_end: float
    rho: float
    rho_star: float
    s_times: Tuple[float, ...]
    box_side: int
    target_lo: Tuple[int, ...]
    target_hi: Tuple[int, ...]
    halo_lo: Tuple[int, ...]
    halo_hi: Tuple[int, ...]
    window_lo: Tuple[int, ...]
    window_hi: Tuple[int, ...]
    meeting_window_c: float

    @property
    def n_rematch(self) -> int:
        return len(self.s_times)


def build_schedule(p: JumpDistribution, rho: float, t_end: float,
                   target_lo: Sequence[int], target_hi: Sequence[int],
                   meeting_window_c: float = DEFAULT_MEETING_WINDOW_C) -> SprinkleSchedule:
    """Schedule of Prop-4.1 shape: s_k = k T^{1/(d+2)} for k = 0..floor(
    T^{(d+1)/(d+2)}), boxes of side floor(c/(2 sqrt d) T^{1/sqrt(d+2)}),
    halo [target - 3 rho T, target + 3 rho T] rounded out to whole boxes."""
    d = p.d
    K = int(math.floor(t_end ** ((d + 1) / (d + 2))))
    if K < 2:
        t_min = math.ceil(2 ** ((d + 2) / (d + 1)))
        raise ScheduleError(
            f"horizon {t_end} gives {K} rematch times; need >= 2 (T >= {t_min})")
    L = int((meeting_window_c / (2.0 * math.sqrt(d))) * t_end ** (1.0 / math.sqrt(d + 2)))
    if L < 1:
        raise ScheduleError("pairing box side came out below one site; "
                            "increase T or meeting_window_c")
    rho_star, _ = sprinkle_density(rho, t_end, d)
    ds = t_end ** (1.0 / (d + 2))
    s_times = tuple(k * ds for k in range(K + 1))
    slack = int(math.ceil(3 * rho * t_end))
    halo_lo = []
    halo_hi = []
    for i in range(d):
        a = int(target_lo[i]) - slack
        b = int(target_hi[i]) + slack
        # round out to whole pairing boxes (anchored at the lattice origin)
        a = (a // L) * L
        b = ((b + 1 + L - 1) // L) * L - 1
        halo_lo.append(a)
        halo_hi.append(b)
    pad = int(math.ceil(8.0 * math.sqrt(t_end))) + 50
    window_lo = tuple(a - pad for a in halo_lo)
    window_hi = tuple(b + pad for b in halo_hi)
    return SprinkleSchedule(
        d=d, t_end=t_end, rho=rho, rho_star=rho_star, s_times=s_times,
        box_side=L, target_lo=tuple(int(x) for x in target_lo),
        target_hi=tuple(int(x) for x in target_hi),
        halo_lo=tuple(halo_lo), halo_hi=tuple(halo_hi),
        window_lo=window_lo, window_hi=window_hi,
        meeting_window_c=meeting_window_c)


@dataclass
class SprinkledOutcome:
    schedule: SprinkleSchedule
    dominated_on_target: bool
    failed_by_bad_event: bool
    bad_A: bool
    bad_B0: bool
    bad_B_any: bool
    fail_sites: int
    merged_counts: np.ndarray
    n_eta: int
    n_star: int
    n_frozen: int
    demerges: int
    result: dict

    def manifest(self) -> dict:
        s = self.schedule
        return {
            "t_end": s.t_end, "rho": s.rho, "rho_star": s.rho_star,
            "box_side": s.box_side, "n_rematch": s.n_rematch,
            "meeting_window_c": s.meeting_window_c,
            "halo": [list(s.halo_lo), list(s.halo_hi)],
            "window": [list(s.window_lo), list(s.window_hi)],
            "target": [list(s.target_lo), list(s.target_hi)],
            "dominated_on_target": self.dominated_on_target,
            "failed_by_bad_event": self.failed_by_bad_event,
            "bad_A": self.bad_A, "bad_B0": self.bad_B0, "bad_B_any": self.bad_B_any,
            "fail_sites": self.fail_sites,
            "merged_counts": [int(x) for x in self.merged_counts],
            "n_eta": self.n_eta, "n_star": self.n_star,
            "n_frozen": self.n_frozen,
        }


def run_sprinkled(p: JumpDistribution, rho: float, t_end: float,
                  target_lo: Sequence[int], target_hi: Sequence[int],
                  seed: int, replica: int = 0,
                  meeting_window_c: float = DEFAULT_MEETING_WINDOW_C,
                  collect_occ: bool = False,
                  backend: str | None = None) -> SprinkledOutcome:
    """One replica of the sprinkled domination coupling.

    Independent initial data at rho and rho*; the sprinkled system follows
    its own walks until a particle meets its current pair, then shadows the
    pair; pairings are remade at every s_k (same-site first, then same-box).
    On a time-zero count inversion (B_0) the run degrades to independent
    evolution and is flagged failed-by-bad-event, as is a halo escape that
    ends inside the target box (event A).
    """
    if rho < 1.0:
        warnings.warn("sprinkled coupling is stated for rho >= 1; smaller "
                      "densities run but the count-inversion event dominates",
                      stacklevel=2)
    sched = build_schedule(p, rho, t_end, target_lo, target_hi, meeting_window_c)
    out = kernel.backend(backend).sprinkled_run(
        seed=seed, replica=replica,
        lo=list(sched.window_lo), hi=list(sched.window_hi),
        halo_lo=list(sched.halo_lo), halo_hi=list(sched.halo_hi),
        target_lo=list(sched.target_lo), target_hi=list(sched.target_hi),
        cdf=p.cdf(), rate=1.0, t_end=t_end, rho=rho, rho_star=sched.rho_star,
        s_times=list(sched.s_times), box_side=sched.box_side,
        collect_occ=collect_occ)
    failed_bad = bool(out["bad_A"] or out["bad_B0"])
    return SprinkledOutcome(
        schedule=sched,
        dominated_on_target=bool(out["dominated"]),
        failed_by_bad_event=failed_bad,
        bad_A=bool(out["bad_A"]), bad_B0=bool(out["bad_B0"]),
        bad_B_any=bool(np.asarray(out["bad_B"]).any()),
        fail_sites=int(out["fail_sites"]),
        merged_counts=np.asarray(out["merged_counts"]),
        n_eta=int(out["n_eta"]), n_star=int(out["n_star"]),
        n_frozen=int(out["n_frozen"]), demerges=int(out["demerges"]),
        result=out)


# ---------------------------------------------------------------------------
# decoupling probes


@dataclass(frozen=True)
class DecouplingProbe:
    """Decreasing indicator of the occupancy of one space-time box.

    kind 'count_at_most': box total <= threshold at the box's final grid
    time; kind 'empty_throughout': box empty at every integer grid time of
    its span.  Both are [0,1]-valued and nonincreasing in the configuration.
    """

    kind: str
    site_lo: Tuple[int, ...]
    site_hi: Tuple[int, ...]
    t_lo: float
    t_hi: float
    threshold: int = 0

    def grid_times(self) -> List[float]:
        t0 = math.ceil(self.t_lo)
        t1 = math.floor(self.t_hi)
        return [float(t) for t in range(t0, t1 + 1)]

    def evaluate(self, series: Sequence[int]) -> float:
        if self.kind == "count_at_most":
            return 1.0 if series[-1] <= self.threshold else 0.0
        if self.kind == "empty_throughout":
            return 1.0 if all(c == 0 for c in series) else 0.0
        raise ValueError(f"unknown probe kind {self.kind}")


def standard_probes(n: int, gap: float, d: int, threshold: int) -> Tuple[DecouplingProbe, DecouplingProbe]:
    """Catalog probes (i) and (ii) on boxes [1,n]^d x [0,n] and
    [1,n]^d x [n+gap, 2n+gap]."""
    lo = (1,) * d
    hi = (n,) * d
    f1 = DecouplingProbe("count_at_most", lo, hi, 0.0, float(n), threshold)
    f2 = DecouplingProbe("count_at_most", lo, hi, n + gap, 2 * n + gap, threshold)
    return f1, f2


def _box_series(out: dict, probe: DecouplingProbe, snap_times: List[float],
                window_lo, strides) -> List[int]:
    import itertools
    flats = [kernel.flatten(c, window_lo, strides)
             for c in itertools.product(*[range(probe.site_lo[i], probe.site_hi[i] + 1)
                                          for i in range(len(window_lo))])]
    flats = np.asarray(flats, dtype=np.int64)
    series = []
    for t in probe.grid_times():
        idx = snap_times.index(t)
        series.append(int(out["snap_occ"][idx][flats].sum()))
    return series


@dataclass
class DecouplingReport:
    lhs: float
    lhs_ci: Tuple[float, float]
    e_f1: float
    e_f2: float
    rhs: float
    error_term: float
    margin: float
    z: float
    replicas: int
    rho: float
    rho_star: float
    holds_at_95: bool


def _probe_worker(args):
    (p_pos, p_neg, dens, seed, rep, lo, hi, snap_times, t_end, f1, f2,
     want1, want2) = args
    p = JumpDistribution(p_pos, p_neg)
    out = kernel.fast_run(seed=seed, replica=rep, lo=lo, hi=hi, cdf=p.cdf(),
                          rate=1.0, t_end=t_end, rho=dens, snap_times=snap_times)
    ext, strides, total = kernel.window_geometry(lo, hi)
    v1 = f1.evaluate(_box_series(out, f1, snap_times, lo, strides)) if want1 else 0.0
    v2 = f2.evaluate(_box_series(out, f2, snap_times, lo, strides)) if want2 else 0.0
    return v1, v2


def decoupling_probe(p: JumpDistribution, rho: float, gap: float, n: int,
                     replicas: int, seed: int, threshold: Optional[int] = None,
                     probes: Optional[Tuple[DecouplingProbe, DecouplingProbe]] = None,
                     error_c: float = 1.0, backend: str | None = None,
                     min_gap: float = 4.0, workers: int = 1) -> DecouplingReport:
    """Three independent MC estimates of the decoupling inequality
    E_{rho*}[f1 f2] <= E_{rho*}[f1] E_rho[f2] + error(gap).

    The probes are decreasing functions supported on two space-time boxes of
    side n whose time distance is `gap`; rho* carries the sprinkling.
    """
    if gap < min_gap:
        raise ValueError(f"time distance {gap} below configured minimum {min_gap}")
    if rho < 1.0:
        warnings.warn("decoupling is stated for rho >= 1", stacklevel=2)
    d = p.d
    rho_star, _ = sprinkle_density(rho, gap, d)
    if threshold is None:
        threshold = max(0, int(rho * n ** d) - 1)
    if probes is None:
        f1, f2 = standard_probes(n, gap, d, threshold)
    else:
        f1, f2 = probes
    t_end = max(f1.t_hi, f2.t_hi)
    snap_times = sorted(set(f1.grid_times()) | set(f2.grid_times()))
    half = engine.truncation_radius(rho_star, t_end, n + 1, 1e-6, d)
    lo = [-half] * d
    hi = [half] * d
    ext, strides, total = kernel.window_geometry(lo, hi)
    kern = kernel.backend(backend)

    def batch(dens: float, offset: int, want1: bool, want2: bool):
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor
            args = [(p.prob_pos, p.prob_neg, dens, seed, offset + rep, lo, hi,
                     snap_times, t_end, f1, f2, want1, want2)
                    for rep in range(replicas)]
            with ProcessPoolExecutor(max_workers=workers) as pool:
                vals = list(pool.map(_probe_worker, args,
                                     chunksize=max(1, replicas // (workers * 8))))
            s1 = sum(v
                     for v, _ in vals)
            s2 = sum(v for _, v in vals)
            s12 = sum(a * b for a, b in vals)
            return s1, s2, s12
        s1 = s12 = s2 = 0
        for rep in range(replicas):
            out = kern.fast_run(seed=seed, replica=offset + rep, lo=lo, hi=hi,
                                cdf=p.cdf(), rate=1.0, t_end=t_end, rho=dens,
                                snap_times=snap_times)
            v1 = f1.evaluate(_box_series(out, f1, snap_times, lo, strides)) if want1 else 0.0
            v2 = f2.evaluate(_box_series(out, f2, snap_times, lo, strides)) if want2 else 0.0
            s1 += v1
            s2 += v2
            s12 += v1 * v2
        return s1, s2, s12

    # three independent estimates (distinct replica banks)
    _, _, s12 = batch(rho_star, 0, True, True)
    s1, _, _ = batch(rho_star, 10 ** 6, True, False)
    _, s2, _ = batch(rho, 2 * 10 ** 6, False, True)

    lhs = s12 / replicas
    ef1 = s1 / replicas
    ef2 = s2 / replicas
    err = decoupling_error_term(rho, n, gap, d, error_c)
    rhs = ef1 * ef2 + err
    v_lhs = lhs * (1 - lhs) / replicas
    v1 = ef1 * (1 - ef1) / replicas
    v2 = ef2 * (1 - ef2) / replicas
    v_rhs = ef2 ** 2 * v1 + ef1 ** 2 * v2
    se = math.sqrt(v_lhs + v_rhs)
    margin = rhs - lhs
    z = margin / se if se > 0 else (math.inf if margin >= 0 else -math.inf)
    return DecouplingReport(
        lhs=lhs, lhs_ci=stats.wilson_ci(int(s12), replicas),
        e_f1=ef1, e_f2=ef2, rhs=rhs, error_term=err, margin=margin, z=z,
        replicas=replicas, rho=rho, rho_star=rho_star,
        holds_at_95=(margin >= 0) or (z > -1.6448536269514722))
