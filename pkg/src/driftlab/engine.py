"""Graphical construction of the particle system.

A Poisson cloud of independent rate-1 continuous-time walks over a truncated
window, exposed two ways:

* `Configuration` / `evolve`: the tracked, resumable construction with full
  particle identity and a replayable event stream (small runs, oracles);
* `run_counts` / planners: the counts-only fast path through the selected
  kernel backend (replica farms).

The holding rate is 1 per particle (Exponential(1) waiting times) by
convention; `rate` exists only as a global time rescale and as the mutation
hook for the invariant-measure check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import kernel, stats
from .lattice import JumpDistribution

DEFAULT_TRUNCATION_ERROR = 1e-6
R_SEARCH_LIMIT = 10 ** 6


class TruncationError(RuntimeError):
    """Requested tail bound unreachable within the search limit."""


@dataclass(frozen=True, order=True)
class ParticleId:
    """(origin, index) with index 0 reserved for the added origin walker."""

    origin: Tuple[int, ...]
    index: int

    @property
    def extra(self) -> bool:
        return self.index == 0


@dataclass(frozen=True)
class JumpEvent:
    time: float
    particle: ParticleId
    src: Tuple[int, ...]
    dst: Tuple[int, ...]


@dataclass
class Configuration:
    """Tracked configuration over a window; occupancy is site -> particle ids."""

    walks: "kernel.TrackedWalks"
    p: JumpDistribution
    window_lo: Tuple[int, ...]
    window_hi: Tuple[int, ...]

    @property
    def time(self) -> float:
        return self.walks.time

    @property
    def n_particles(self) -> int:
        return self.walks.npart

    def particle_id(self, pid: int) -> ParticleId:
        w = self.walks
        return ParticleId(origin=w.unflatten(w.porigin[pid]), index=w.pn[pid])

    def position(self, pid: int) -> Tuple[int, ...]:
        return self.walks.unflatten(self.walks.pos[pid])

    def occupancy(self) -> dict:
        out: dict = {}
        for pid in range(self.walks.npart):
            out.setdefault(self.position(pid), []).append(pid)
        return out

    def counts(self) -> np.ndarray:
        return np.array(self.walks.occ, dtype=np.int32)


def init_poisson(p: JumpDistribution, rho: float, window_lo, window_hi,
                 seed: int, replica: int = 0, extra_at: Optional[Sequence[int]] = None,
                 init_occ=None, rate: float = 1.0) -> Configuration:
    """Configuration at time 0 with i.i.d. Poisson(rho) counts per window site.

    `extra_at` places the additional walker (index 0) used to seed infection.
    `init_occ` replaces the Poisson draw with explicit counts (test fixtures).
    """
    if rho < 0:
        raise ValueError("density must be nonnegative")
    walks = kernel.TrackedWalks(
        seed=seed, replica=replica, lo=list(window_lo), hi=list(window_hi),
        cdf=p.cdf(), rate=rate, rho=(-1.0 if init_occ is not None else rho),
        init_occ=init_occ, extra_at=list(extra_at) if extra_at is not None else None)
    return Configuration(walks=walks, p=p,
                         window_lo=tuple(int(x) for x in window_lo),
                         window_hi=tuple(int(x) for x in window_hi))


def evolve(cfg: Configuration, until: float,
           sink: Optional[Callable[[JumpEvent], None]] = None) -> Configuration:
    """Advance to `until`, delivering every jump event in time order."""
    if sink is None:
        cfg.walks.evolve(until, None)
        return cfg
    w = cfg.walks

    def raw(t, pid, a, b):
        sink(JumpEvent(time=t, particle=cfg.particle_id(pid),
                       src=w.unflatten(a), dst=w.unflatten(b)))

    w.evolve(until, raw)
    return cfg


def collect_events(cfg: Configuration, until: float) -> List[tuple]:
    """Raw (t, pid, src_flat, dst_flat) tuples; cheaper than JumpEvent objects."""
    out: List[tuple] = []
    cfg.walks.evolve(until, lambda t, pid, a, b: out.append((t, pid, a, b)))
    return out


def dump_events_csv(path, events: Iterable[JumpEvent], d: int) -> None:
    """Event-log dump; times carry 9 fractional digits."""
    cols = ["time"]
    cols += [f"particle_origin_{i+1}" for i in range(d)]
    cols += ["particle_index", "extra"]
    cols += [f"from_{i+1}" for i in range(d)]
    cols += [f"to_{i+1}" for i in range(d)]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for ev in events:
            row = [f"{ev.time:.9f}"]
            row += [str(c) for c in ev.particle.origin]
            row += [str(ev.particle.index), str(int(ev.particle.extra))]
            row += [str(c) for c in ev.src]
            row += [str(c) for c in ev.dst]
            fh.write(",".join(row) + "\n")


# ---------------------------------------------------------------------------
# truncation bound


def _shell_sites(m: int, d: int) -> int:
    return (2 * m + 1) ** d - (2 * m - 1) ** d


def truncation_radius(rho: float, t: float, n: int, target_error: float,
                      d: int = 1) -> int:
    """Smallest R with a certified bound on boundary contamination.

    Bounds P[some particle starting outside B(0,R) enters B(0,n) before t] by
    the expected number of such entries: rho * sum_{m>R} |shell_m| *
    P[Poisson(t) >= m-n], since reaching B(0,n) from sup-distance m takes at
    least m-n jumps.  The Poisson tail is replaced by the cheap upper bound
    min(1, pmf(k)/(1 - t/(k+1))) so the whole search is one multiplicative
    sweep; everything stays an upper bound, so the radius is certified.
    Errors out if no R <= 10^6 achieves the target.
    """
    if rho < 0 or t < 0 or n < 0 or not 0 < target_error < 1:
        raise ValueError("need rho,t,n >= 0 and target_error in (0,1)")
    if rho == 0.0:
        return n
    lam = float(t)
    # fast unreachability check at the search limit
    k_lim = R_SEARCH_LIMIT + 1 - n
    if k_lim <= lam:
        raise TruncationError(
            f"horizon {t} needs more than {R_SEARCH_LIMIT} sites of slack "
            f"(rho={rho}, n={n}, target {target_error})")
    if rho * _shell_sites(R_SEARCH_LIMIT + 1, d) * stats.poisson_sf(k_lim, lam) \
            >= target_error:
        raise TruncationError(
            f"no radius <= {R_SEARCH_LIMIT} meets target {target_error} "
            f"(rho={rho}, t={t}, n={n}, d={d})")

    terms = []
    k = 0
    pmf = None
    k_pmf_start = int(lam) + 1
    while True:
        k += 1
        m = n + k
        if k < k_pmf_start:
            q = 1.0
        else:
            if pmf is None:
                pmf = math.exp(k * math.log(lam) - lam - math.lgamma(k + 1)) \
                    if lam > 0 else 0.0
            else:
                pmf *= lam / k
            q = min(1.0, pmf / (1.0 - lam / (k + 1))) if k + 1 > lam else 1.0
        term = rho * _shell_sites(m, d) * q
        terms.append(term)
        if k > 2 * lam + 20 and term < target_error * 1e-9:
            break
        if m > R_SEARCH_LIMIT:
            raise TruncationError(
                f"no radius <= {R_SEARCH_LIMIT} meets target {target_error} "
                f"(rho={rho}, t={t}, n={n}, d={d})")
    # geometric tail: past k > 2t+20 the tail ratio is below 1/2 and the
    # shell growth below 1.2, so the remainder is under 4x the last term
    tail = 4.0 * terms[-1]
    suffix = np.cumsum(np.asarray(terms)[::-1])[::-1]
    for idx in range(len(terms)):
        if suffix[idx] + tail < target_error:
            return n + idx  # bound for R = n+idx sums terms from m = R+1
    raise TruncationError(
        f"no radius <= {R_SEARCH_LIMIT} meets target {target_error} "
        f"(rho={rho}, t={t}, n={n}, d={d})")


def infection_window(rho: float, t: float, right_reach: float,
                     target_error: float = DEFAULT_TRUNCATION_ERROR,
                     d: int = 1, span_factor: float = 1.0) -> int:
    """Window half-width for infected runs.

    The infected cloud spreads at most ~(jump activity at the edge) per unit
    time; span_factor*(1+rho)*t is a generous envelope for desk densities
    (verified a posteriori: runs report infected freeze counts, which must be
    zero for the statistics to be used).
    """
    reach = int(math.ceil(max(right_reach, span_factor * (1.0 + rho) * t))) + 1
    return truncation_radius(rho, t, reach, target_error, d)


# ---------------------------------------------------------------------------
# counts-mode wrappers


def run_counts(p: JumpDistribution, rho: float, t_end: float, half_width: int,
               seed: int, replica: int, d: int | None = None, rate: float = 1.0,
               backend: str | None = None, **kw):
    """fast_run over the symmetric window [-half,half]^d."""
    d = d if d is not None else p.d
    lo = [-half_width] * d
    hi = [half_width] * d
    return kernel.backend(backend).fast_run(
        seed=seed, replica=replica, lo=lo, hi=hi, cdf=p.cdf(), rate=rate,
        t_end=t_end, rho=rho, **kw)


@dataclass
class InvariantReport:
    chi2: float
    dof: int
    p_value: float
    rate_z: float
    replicas: int
    sites: int
    frozen_total: int
    alpha: float

    @property
    def passed(self) -> bool:
        return self.p_value >= self.alpha and abs(self.rate_z) <= 4.0


def invariant_measure_check(p: JumpDistribution, rho: float, t: float,
                            interior_half: int, replicas: int, seed: int,
                            alpha: float = 0.01, rate: float = 1.0,
                            target_error: float = DEFAULT_TRUNCATION_ERROR,
                            backend: str | None = None) -> InvariantReport:
    """Pooled chi-square of interior marginals against Poisson(rho) plus a
    jump-rate consistency z (the latter catches a wrong holding rate, which
    leaves the invariant marginal untouched)."""
    d = p.d
    R = truncation_radius(rho, t, interior_half, target_error, d)
    counts: dict = {}
    tot_jumps = 0
    n_alive = 0
    frozen_total = 0
    ext, strides, total = kernel.window_geometry([-R] * d, [R] * d)
    # interior: (2*interior_half)^d sites centered on the origin
    import itertools
    axis = range(-interior_half, interior_half)
    interior = np.asarray(
        [kernel.flatten(c, [-R] * d, strides) for c in itertools.product(*[axis] * d)],
        dtype=np.int64)
    # jump-rate sample: only walkers starting far enough from the window edge
    # that their freeze probability is negligible (conditioning on survival
    # otherwise biases the jump counts down)
    margin = int(t)
    while stats.poisson_sf(margin, t * max(rate, 1.0)) > 1e-9:
        margin += 1
    for rep in range(replicas):
        out = run_counts(p, rho, t, R, seed, rep, rate=rate, backend=backend,
                         collect_particles=True)
        occ = out["final_occ"][interior]
        vals, cnt = np.unique(occ, return_counts=True)
        for v, c in zip(vals, cnt):
            counts[int(v)] = counts.get(int(v), 0) + int(c)
        origin = out["particle_origin"]
        deep = np.ones(len(origin), dtype=bool)
        for i in range(d):
            coord = -R + (origin // strides[i]) % ext[i]
            deep &= (coord >= -R + margin) & (coord <= R - margin)
        tot_jumps += int(out["particle_jumps"][deep].sum())
        n_alive += int(deep.sum())
        frozen_total += out["n_frozen"]
    stat, dof, pval = stats.chi2_poisson_fit(counts, rho)
    expect = n_alive * t
    rate_z = (tot_jumps - expect) / math.sqrt(expect) if expect > 0 else 0.0
    return InvariantReport(chi2=stat, dof=dof, p_value=pval, rate_z=rate_z,
                           replicas=replicas, sites=len(interior),
                           frozen_total=frozen_total, alpha=alpha)
