"""Exact and Monte Carlo probability oracles.

Poisson tails with their Chernoff bounds, linear-deviation and stabilization
radius estimates for a single biased walk, exact transition kernels of the
continuous-time walk by truncated Poissonization, meeting probabilities, and
the confidence-interval / trend-test utilities used across the package.

Everything here is deterministic given the seed; Monte Carlo helpers use
numpy's Philox generator keyed from the package's stream-derivation hash.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Sequence, Tuple

import numpy as np
from scipy import stats as sps

from .lattice import JumpDistribution, drift
from .rng import derive

KERNEL_TAIL_TOL = 1e-12


def rng_for(seed: int, *ids) -> np.random.Generator:
    """Philox generator keyed from the package stream hash (reproducible)."""
    return np.random.Generator(np.random.Philox(key=derive(seed, ids)))


# ---------------------------------------------------------------------------
# Poisson tails


def poisson_sf(k: int, lam: float) -> float:
    """P[Poisson(lam) >= k] by stable summation.

    Upper-tail series when k > lam (terms decreasing), complement of the
    lower CDF otherwise; avoids cancellation in both regimes.
    """
    if k <= 0:
        return 1.0
    if lam <= 0.0:
        return 0.0
    if k > lam:
        logterm = k * math.log(lam) - lam - math.lgamma(k + 1)
        term = math.exp(logterm)
        total = 0.0
        j = k
        while term > 0.0:
            total += term
            j += 1
            term *= lam / j
            if term < total * 1e-18 and j > lam:
                break
        return min(total, 1.0)
    # lower regime: sum pmf for j < k (at most ~lam + O(sqrt(lam)) terms)
    term = math.exp(-lam)
    total = term
    for j in range(1, k):
        term *= lam / j
        total += term
    return max(0.0, 1.0 - total)


@dataclass(frozen=True)
class TailReport:
    rho: float
    threshold: int
    exact: float
    chernoff_bound: float

    @property
    def ratio(self) -> float:
        return self.exact / self.chernoff_bound if self.chernoff_bound > 0 else math.inf


def poisson_tail(rho: float, a: int) -> TailReport:
    """Exact P[Poisson(rho) >= a] and the Chernoff bound at lambda = log(a/rho).

    The bound exp(-a log(a/rho) + a - rho) comes from Markov's inequality on
    the exponential moment; it dominates the exact tail whenever a >= 2 rho.
    """
    if a < 0 or a != int(a):
        raise ValueError("threshold must be a nonnegative integer")
    a = int(a)
    if rho <= 0.0:
        exact = 1.0 if a == 0 else 0.0
        return TailReport(rho, a, exact, exact)
    exact = poisson_sf(a, rho)
    if a == 0:
        bound = 1.0
    else:
        bound = math.exp(-a * math.log(a / rho) + a - rho)
    return TailReport(rho, a, exact, min(bound, 1.0) if a >= 2 * rho else bound)


# ---------------------------------------------------------------------------
# intervals and trend tests


def wilson_ci(successes: int, trials: int, level: float = 0.95) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials")
    if trials == 0:
        return (0.0, 1.0)
    z = sps.norm.ppf(0.5 + level / 2.0)
    phat = successes / trials
    denom = 1.0 + z * z / trials
    center = (phat + z * z / (2 * trials)) / denom
    half = (z / denom) * math.sqrt(phat * (1 - phat) / trials + z * z / (4 * trials * trials))
    lo = 0.0 if successes == 0 else max(0.0, center - half)
    hi = 1.0 if successes == trials else min(1.0, center + half)
    return (lo, hi)


def two_proportion_greater(s1: int, n1: int, s2: int, n2: int) -> float:
    """One-sided p-value for H1: p1 > p2 (pooled z-test)."""
    if n1 == 0 or n2 == 0:
        return 1.0
    p1, p2 = s1 / n1, s2 / n2
    pool = (s1 + s2) / (n1 + n2)
    var = pool * (1 - pool) * (1 / n1 + 1 / n2)
    if var == 0.0:
        return 1.0 if p1 <= p2 else 0.0
    z = (p1 - p2) / math.sqrt(var)
    return float(sps.norm.sf(z))


def trend_decreasing_pvalue(successes: Sequence[int], trials: Sequence[int],
                            xs: Sequence[float]) -> float:
    """Cochran-Armitage style one-sided p-value for a decreasing trend.

    Tests H1: proportions decrease along xs; small values support a strictly
    decreasing trend.
    """
    s = np.asarray(successes, dtype=float)
    n = np.asarray(trials, dtype=float)
    x = np.asarray(xs, dtype=float)
    N = n.sum()
    pbar = s.sum() / N
    if pbar in (0.0, 1.0):
        return 1.0
    xbar = (n * x).sum() / N
    num = ((s - n * pbar) * (x - xbar)).sum()
    var = pbar * (1 - pbar) * (n * (x - xbar) ** 2).sum()
    z = num / math.sqrt(var)
    return float(sps.norm.cdf(z))  # very negative z => decreasing


def chi2_poisson_fit(counts: Dict[int, int], lam: float, min_expected: float = 5.0):
    """Pooled chi-square GOF of occupancy counts against Poisson(lam).

    Bins with expected count below `min_expected` are pooled into their
    neighbors; returns (statistic, dof, p_value).
    """
    n = sum(counts.values())
    kmax = max(counts) if counts else 0
    # extend support until the tail expectation is negligible
    while poisson_sf(kmax + 1, lam) * n > min_expected / 4:
        kmax += 1
    expected = []
    observed = []
    pk = math.exp(-lam)
    acc_e, acc_o = 0.0, 0
    for k in range(kmax + 1):
        if k > 0:
            pk *= lam / k
        acc_e += pk * n
        acc_o += counts.get(k, 0)
        if acc_e >= min_expected:
            expected.append(acc_e)
            observed.append(acc_o)
            acc_e, acc_o = 0.0, 0
    # tail bin
    tail_e = poisson_sf(kmax + 1, lam) * n + acc_e
    tail_o = sum(c for k, c in counts.items() if k > kmax) + acc_o
    if expected and tail_e < min_expected:
        expected[-1] += tail_e
        observed[-1] += tail_o
    else:
        expected.append(tail_e)
        observed.append(tail_o)
    expected = np.asarray(expected)
    observed = np.asarray(observed, dtype=float)
    # renormalize the tiny truncation slack so totals match exactly
    expected *= observed.sum() / expected.sum()
    stat = float(((observed - expected) ** 2 / expected).sum())
    dof = len(expected) - 1
    if dof <= 0:
        return stat, 0, 1.0
    return stat, dof, float(sps.chi2.sf(stat, dof))


# ---------------------------------------------------------------------------
# single-walk Monte Carlo: linear deviations and the stabilization radius


def _walk_path(rng: np.random.Generator, p: JumpDistribution, horizon: float):
    """Jump times and positions of one continuous-time walk up to `horizon`."""
    njumps = rng.poisson(horizon)
    times = np.sort(rng.uniform(0.0, horizon, size=njumps))
    probs = []
    for i in range(p.d):
        probs.extend([p.prob_pos[i], p.prob_neg[i]])
    dirs = rng.choice(2 * p.d, size=njumps, p=np.asarray(probs) / sum(probs))
    steps = np.zeros((njumps, p.d), dtype=np.int64)
    for j in range(2 * p.d):
        axis, sign = j >> 1, 1 - 2 * (j & 1)
        steps[dirs == j, axis] = sign
    pospath = np.cumsum(steps, axis=0)
    return times, pospath


def _sup_deviation_segments(times, pospath, v, t_end):
    """sup_{t <= t_end} ||X_t - vt||_inf, exact on the piecewise path."""
    d = len(v)
    best = 0.0
    prev_t = 0.0
    prev_x = np.zeros(d)
    n = len(times)
    for i in range(n + 1):
        seg_end = times[i] if i < n else t_end
        if seg_end > t_end:
            seg_end = t_end
        # on [prev_t, seg_end) the walk sits at prev_x; |x_i - v_i t| is
        # piecewise linear in t, so the sup is at an endpoint
        for tt in (prev_t, seg_end):
            dev = np.abs(prev_x - np.asarray(v) * tt).max()
            if dev > best:
                best = dev
        if i < n:
            if times[i] >= t_end:
                break
            prev_t = times[i]
            prev_x = pospath[i]
    return best


def deviation_tail(p: JumpDistribution, eps: float, u: float, replicas: int,
                   seed: int = 0) -> dict:
    """MC estimate of P[||X_t - vt||_inf >= eps*u for some t <= u]."""
    if eps <= 0 or u <= 0:
        raise ValueError("eps and u must be positive")
    v = drift(p).v
    hits = 0
    for rep in range(replicas):
        rng = rng_for(seed, 101, rep)
        times, pospath = _walk_path(rng, p, u)
        if _sup_deviation_segments(times, pospath, v, u) >= eps * u:
            hits += 1
    lo, hi = wilson_ci(hits, replicas)
    return {"frequency": hits / replicas, "hits": hits, "replicas": replicas,
            "ci": (lo, hi), "eps": eps, "u": u}


def deviation_exact_symmetric(eps: float, u: float) -> float:
    """Exact P[sup_{t<=u} |X_t| >= ceil(eps*u)] for the symmetric 1-d walk.

    Absorbing-boundary rate matrix on {-(m-1), ..., m-1}, exponentiated with
    scipy; independent of the Monte Carlo path machinery.
    """
    from scipy.linalg import expm

    m = math.ceil(eps * u)
    size = 2 * m - 1
    q = np.zeros((size, size))
    for i in range(size):
        q[i, i] = -1.0
        if i > 0:
            q[i, i - 1] = 0.5
        if i + 1 < size:
            q[i, i + 1] = 0.5
    pt = expm(q * u)
    return 1.0 - float(pt[m - 1].sum())


def mushroom_tail(p: JumpDistribution, eps: float, replicas: int, horizon: float,
                  seed: int = 0) -> dict:
    """Empirical law of the stabilization radius of a drifting walk.

    Per trajectory: the radius is max(stabilization time, sup deviation
    before it), where the stabilization time is the first integer u >= 2/eps
    after which ||X_t - vt|| <= eps*t holds for the rest of the horizon.
    Trajectories still violating the cone near the horizon are counted
    separately instead of being silently included.
    """
    if horizon < 4.0 / eps:
        raise ValueError("horizon too short relative to 1/eps")
    v = np.asarray(drift(p).v)
    radii = []
    unstable = 0
    margin = horizon * 0.25
    floor_u = math.ceil(2.0 / eps)
    for rep in range(replicas):
        rng = rng_for(seed, 102, rep)
        times, pospath = _walk_path(rng, p, horizon)
        # per-segment violation test of ||X_t - vt|| <= eps t
        last_violation = 0.0
        sup_pre = 0.0
        prev_t, prev_x = 0.0, np.zeros(p.d)
        n = len(times)
        for i in range(n + 1):
            seg_end = times[i] if i < n else horizon
            for tt in (prev_t, seg_end):
                dev = float(np.abs(prev_x - v * tt).max())
                if dev > eps * tt + 1e-12 and tt > 0:
                    if tt > last_violation:
                        last_violation = tt
            if i < n:
                prev_t, prev_x = times[i], pospath[i]
        stab = max(floor_u, math.ceil(last_violation))
        if last_violation > horizon - margin:
            unstable += 1
            continue
        # sup deviation on [0, stab]
        sup_pre = _sup_deviation_segments(times, pospath, v, float(stab))
        radii.append(max(float(stab), sup_pre))
    radii = np.asarray(radii)
    out = {"radii": radii, "unstable": unstable, "replicas": replicas,
           "floor": floor_u}
    if len(radii) >= 10:
        # exponential tail fit on the empirical survival curve
        rs = np.sort(radii)
        surv = 1.0 - np.arange(1, len(rs) + 1) / (len(rs) + 1.0)
        keep = surv > 0.01
        x, y = rs[keep], np.log(surv[keep])
        if len(x) >= 5 and np.ptp(x) > 0:
            slope, intercept = np.polyfit(x, y, 1)
            resid = y - (slope * x + intercept)
            r2 = 1.0 - resid.var() / y.var() if y.var() > 0 else 0.0
            out["tail_slope"] = float(slope)
            out["tail_r2"] = float(r2)
    return out


# ---------------------------------------------------------------------------
# exact transition kernels


@dataclass
class KernelTable:
    """P_0[X_t = x] on the box ||x||_inf <= radius, plus the truncation error."""

    t: float
    radius: int
    probs: np.ndarray  # shape (2*radius+1,)*d, index x + radius
    tail_error: float
    d: int

    def prob(self, x) -> float:
        idx = tuple(int(c) + self.radius for c in (x if self.d > 1 else (x if isinstance(x, (tuple, list)) else (x,))))
        if any(not 0 <= i < 2 * self.radius + 1 for i in idx):
            return 0.0
        return float(self.probs[idx])

    def mass(self) -> float:
        return float(self.probs.sum())


def _kmax_for(t: float, tol: float) -> int:
    k = int(t)
    while poisson_sf(k + 1, t) > tol:
        k += 1
    return k


def exact_kernel(p: JumpDistribution, t: float, radius: int | None = None,
                 tol: float = KERNEL_TAIL_TOL) -> KernelTable:
    """Poissonization: P_0[X_t=x] = sum_k e^-t t^k/k! P^k(0,x).

    The series is truncated at the smallest k_max with Poisson(t) upper tail
    below tol, and the spatial radius k_max covers every site reachable in
    that many steps, so the only mass lost is the certified tail.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    kmax = _kmax_for(t, tol) if t > 0 else 0
    need = kmax
    if radius is None:
        radius = need
    elif radius < need:
        raise MemoryError(
            f"radius {radius} below the certified requirement {need} for t={t}")
    d = p.d
    shape = (2 * radius + 1,) * d
    if np.prod(shape) * 16 > 2e9:
        raise MemoryError(f"kernel table of shape {shape} exceeds the memory budget; "
                          f"suggested radius {need}")
    walk = np.zeros(shape)
    walk[(radius,) * d] = 1.0
    acc = np.zeros(shape)
    pmf = math.exp(-t)
    acc += pmf * walk
    for k in range(1, kmax + 1):
        nxt = np.zeros(shape)
        for i in range(d):
            up = [slice(None)] * d
            down = [slice(None)] * d
            up[i] = slice(1, None)      # indices of x
            down[i] = slice(None, -1)   # indices of x -/+ 1
            # a +e_i step lands at x with the walk previously at x - e_i
            nxt[tuple(up)] += p.prob_pos[i] * walk[tuple(down)]
            nxt[tuple(down)] += p.prob_neg[i] * walk[tuple(up)]
        walk = nxt
        pmf *= t / k
        acc += pmf * walk
    return KernelTable(t=t, radius=radius, probs=acc, tail_error=poisson_sf(kmax + 1, t), d=d)


def kernel_lower_bound_scan(p: JumpDistribution, t: float, window_c: float) -> dict:
    """Scan t^{d/2} P_0[X_t=x] over ||x - vt||_inf <= window_c sqrt(t).

    Reports the minimum (the empirical local-CLT floor) and the center value.
    """
    table = exact_kernel(p, t)
    v = drift(p).v
    d = p.d
    lim = window_c * math.sqrt(t)
    lo = [math.ceil(v[i] * t - lim) for i in range(d)]
    hi = [math.floor(v[i] * t + lim) for i in range(d)]
    vals = []
    idx = [range(lo[i], hi[i] + 1) for i in range(d)]
    import itertools
    for x in itertools.product(*idx):
        vals.append(table.prob(x if d > 1 else x[0]))
    vals = np.asarray(vals) * t ** (d / 2.0)
    center = tuple(round(v[i] * t) for i in range(d))
    return {
        "floor": float(vals.min()),
        "max": float(vals.max()),
        "center_value": table.prob(center if d > 1 else center[0]) * t ** (d / 2.0),
        "n_sites": len(vals),
        "t": t,
    }


def meeting_probability(p: JumpDistribution, x, y, t: float) -> float:
    """Exact P[X_t = Y_t] for independent walks from x and y via one kernel."""
    x = np.atleast_1d(np.asarray(x, dtype=np.int64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    gap = x - y
    table = exact_kernel(p, t)
    k = table.probs
    d = p.d
    # sum_z K(z - x) K(z - y) = sum_w K(w) K(w + (x - y))
    shifted = np.zeros_like(k)
    src = []
    dst = []
    for i in range(d):
        g = int(gap[i])
        n = k.shape[i]
        if abs(g) >= n:
            return 0.0
        if g >= 0:
            src.append(slice(g, n))
            dst.append(slice(0, n - g))
        else:
            src.append(slice(0, n + g))
            dst.append(slice(-g, n))
    shifted[tuple(dst)] = k[tuple(src)]
    return float((k * shifted).sum())


def meeting_probability_mc(p: JumpDistribution, x, y, t: float, replicas: int,
                           seed: int = 0) -> dict:
    """Vectorized MC cross-check of the meeting probability."""
    x = np.atleast_1d(np.asarray(x, dtype=np.int64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    rng = rng_for(seed, 103)
    d = p.d
    probs = []
    for i in range(d):
        probs.extend([p.prob_pos[i], p.prob_neg[i]])
    probs = np.asarray(probs) / sum(probs)

    def endpoints(start):
        n = rng.poisson(t, size=replicas)
        out = np.tile(start, (replicas, 1))
        counts = rng.multinomial(1, probs, size=int(n.sum())) if n.sum() else np.zeros((0, 2 * d), dtype=np.int64)
        # split the flat step stream back into trajectories
        offs = np.concatenate([[0], np.cumsum(n)])
        for i in range(d):
            plus = counts[:, 2 * i]
            minus = counts[:, 2 * i + 1]
            cplus = np.concatenate([[0], np.cumsum(plus)])
            cminus = np.concatenate([[0], np.cumsum(minus)])
            out[:, i] += (cplus[offs[1:]] - cplus[offs[:-1]]) - (cminus[offs[1:]] - cminus[offs[:-1]])
        return out

    ex = endpoints(x)
    ey = endpoints(y)
    hits = int((ex == ey).all(axis=1).sum())
    lo, hi = wilson_ci(hits, replicas)
    return {"frequency": hits / replicas, "hits": hits, "replicas": replicas, "ci": (lo, hi)}


def endpoint_samples_1d(p: JumpDistribution, t: float, replicas: int, seed: int = 0,
                        start: int = 0) -> np.ndarray:
    """Endpoints of `replicas` independent 1-d walks at time t (vectorized)."""
    if p.d != 1:
        raise ValueError("1-d helper")
    rng = rng_for(seed, 104)
    n = rng.poisson(t, size=replicas)
    right = rng.binomial(n, p.prob_pos[0] / (p.prob_pos[0] + p.prob_neg[0]))
    return start + 2 * right - n


def calibrate_meeting_window(p: JumpDistribution, t: float, drop: float = 2.0) -> float:
    """Largest c with meeting probability >= (same-site value)/drop for all
    start separations ||x-y||_inf <= c sqrt(t): the width of the window on
    which the meeting probability keeps its local-CLT floor."""
    base = meeting_probability(p, (0,) * p.d, (0,) * p.d, t)
    c = 0.0
    step = 0.25
    while True:
        cn = c + step
        g = math.floor(cn * math.sqrt(t))
        sep = (g,) + (0,) * (p.d - 1)
        if g > 0 and meeting_probability(p, (0,) * p.d, sep, t) < base / drop:
            return max(c, step)
        c = cn
        if c > 16:
            return c
