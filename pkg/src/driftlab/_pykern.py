"""Pure-Python simulation kernels.

This module is the reference implementation of the event loops; the compiled
extension (driftlab._ckern) re-implements `fast_run` and `sprinkled_run` with
identical semantics and bit-identical output.  The conventions both backends
follow:

* events are processed in increasing (time, particle id); ties in time are
  broken by particle id (a.s. irrelevant, but pinned for reproducibility);
* timeline milestones (infection seeding, front-grid samples, occupancy
  snapshots, rematch times) are applied once the next event time exceeds
  them; an event at exactly a milestone time is processed first;
* a particle whose jump would leave the window is frozen in place, counted,
  and never scheduled again;
* every random draw comes from a per-(replica, system, site, n) splitmix64
  stream, so the event sequence is independent of scheduling internals.

Particles are indexed in construction order: sites scanned in row-major
window order, the extra walker (n=0) first at its site, then n=1..count.
"""
from __future__ import annotations

import heapq
import math
from itertools import product

import numpy as np

from .rng import GOLD, MASK64, TAG_INIT, TAG_THIN, TAG_WALK, mix64, derive

BACKEND_NAME = "python"

_INV53 = 1.0 / 9007199254740992.0
NO_FRONT = -(1 << 62)  # sentinel for "no infected site"

MAX_WINDOW_SITES = 50_000_000
MAX_EXPECTED_PARTICLES = 2.0e8


class CapacityError(MemoryError):
    """Window volume x density beyond the configured memory budget."""


# ---------------------------------------------------------------------------
# geometry helpers


def window_geometry(lo, hi):
    """Return (extents, strides, total sites) for an inclusive box, row-major."""
    d = len(lo)
    ext = [int(hi[i]) - int(lo[i]) + 1 for i in range(d)]
    if any(e <= 0 for e in ext):
        raise ValueError("window corners out of order")
    strides = [0] * d
    acc = 1
    for i in range(d - 1, -1, -1):
        strides[i] = acc
        acc *= ext[i]
    return ext, strides, acc


def flatten(coords, lo, strides):
    return sum((int(c) - int(l)) * s for c, l, s in zip(coords, lo, strides))


def unflatten(flat, lo, ext, strides):
    return tuple(int(lo[i]) + (flat // strides[i]) % ext[i] for i in range(len(lo)))


def _site_keys(lo, ext, strides, total):
    """Window-independent per-site stream keys, one per flat index."""
    d = len(lo)
    keys = np.empty(total, dtype=np.uint64)
    # site_key(coords) = derive(TAG_SITEKEY, coords); inlined for speed
    from .rng import TAG_SITEKEY
    base = mix64((TAG_SITEKEY + GOLD) & MASK64)
    coords = [int(l) for l in lo]
    for flat in range(total):
        s = base
        for c in coords:
            s = (s ^ ((c & MASK64) * GOLD)) & MASK64
            s = mix64((s + GOLD) & MASK64)
        keys[flat] = s
        for i in range(d - 1, -1, -1):
            coords[i] += 1
            if coords[i] <= int(lo[i]) + ext[i] - 1:
                break
            coords[i] = int(lo[i])
    return keys


# ---------------------------------------------------------------------------
# scalar draws on raw stream states (ints); must match the compiled kernel


def _u01(state):
    state = (state + GOLD) & MASK64
    return state, (mix64(state) >> 11) * _INV53


def _expo(state):
    state, u = _u01(state)
    return state, -math.log(1.0 - u)


def _poisson(state, lam):
    if lam <= 0.0:
        return state, 0
    limit = math.exp(-lam)
    k = 0
    p = 1.0
    while True:
        state, u = _u01(state)
        p *= u
        if p <= limit:
            return state, k
        k += 1


def _binomial(state, n, q):
    c = 0
    for _ in range(n):
        state, u = _u01(state)
        if u < q:
            c += 1
    return state, c


def _jump(state, cdf):
    state, u = _u01(state)
    j = 0
    while u >= cdf[j]:
        j += 1
    return state, j


# ---------------------------------------------------------------------------
# counts-mode infection bookkeeping shared by single and dual layers


class _Layer:
    """Occupancy + infection counts for one system over the window."""

    __slots__ = ("occ", "inf", "colcnt", "front_idx", "sup_front_idx",
                 "range_sup", "infected_total", "seed_cohort", "sites_seen",
                 "watch_max", "n_frozen", "n_frozen_infected", "viol_partner")

    def __init__(self, total, ext0):
        self.occ = [0] * total
        self.inf = None
        self.colcnt = [0] * ext0
        self.front_idx = -1
        self.sup_front_idx = -1
        self.range_sup = -1
        self.infected_total = 0
        self.seed_cohort = -1
        self.watch_max = 0
        self.n_frozen = 0
        self.n_frozen_infected = 0


def fast_run(seed, replica, lo, hi, cdf, rate, t_end, rho,
             init_occ=None, extra_at=None, infect_site=None, infect_time=0.0,
             front_dt=0.0, snap_times=(), watch_site=None, lower_rho=-1.0,
             collect_particles=False, system=0):
    """Counts-mode run of one (optionally two coupled) particle system(s).

    Returns a dict of plain values / numpy arrays; see the engine module for
    the friendly wrappers.  With lower_rho >= 0 a second, thinned copy of the
    initial data rides on the same walks (the order-preserving coupling); its
    statistics get a `_low` suffix and exact domination/infection-monotonicity
    violation counters are maintained.
    """
    d = len(lo)
    lo = [int(x) for x in lo]
    hi = [int(x) for x in hi]
    ext, strides, total = window_geometry(lo, hi)
    if total > MAX_WINDOW_SITES or max(rho, 1.0) * total > MAX_EXPECTED_PARTICLES:
        raise CapacityError(
            f"window of {total} sites at density {rho} exceeds the memory budget")
    cdf = [float(c) for c in cdf]
    keys = _site_keys(lo, ext, strides, total)
    dual = lower_rho >= 0.0
    infect = infect_site is not None

    stride0 = strides[0]
    full = _Layer(total, ext[0])
    low = _Layer(total, ext[0]) if dual else None
    if infect:
        full.inf = [0] * total
        if dual:
            low.inf = [0] * total

    extra_flat = flatten(extra_at, lo, strides) if extra_at is not None else -1
    watch_flat = flatten(watch_site, lo, strides) if watch_site is not None else -1
    seed_flat = flatten(infect_site, lo, strides) if infect else -1

    # --- construction (order pinned: row-major sites, extra first, n=1..cnt)
    pstate = []
    pnext = []
    pos = []
    in_low = []
    porigin = []
    pn = []
    thin_q = (lower_rho / rho) if (dual and rho > 0.0) else 0.0
    for s in range(total):
        skey = int(keys[s])
        if init_occ is None:
            st = derive(seed, (TAG_INIT, replica, system, skey))
            st, cnt = _poisson(st, rho)
        else:
            cnt = int(init_occ[s])
        lowcnt = 0
        if dual and cnt > 0:
            st = derive(seed, (TAG_THIN, replica, system, skey))
            st, lowcnt = _binomial(st, cnt, thin_q)
        first_n = 0 if s == extra_flat else 1
        for n in range(first_n, cnt + 1):
            wst = derive(seed, (TAG_WALK, replica, system, skey, n))
            wst, e = _expo(wst)
            pstate.append(wst)
            pnext.append(e / rate)
            pos.append(s)
            porigin.append(s)
            pn.append(n)
            if dual:
                in_low.append(n == 0 or n <= lowcnt)
        got = cnt + (1 if first_n == 0 else 0)
        full.occ[s] = got
        if dual:
            low.occ[s] = lowcnt + (1 if first_n == 0 else 0)
    npart = len(pos)
    pjumps = [0] * npart
    pfrozen = [False] * npart

    heap = [(pnext[i], i) for i in range(npart) if pnext[i] <= t_end]
    heapq.heapify(heap)

    if watch_flat >= 0:
        full.watch_max = full.occ[watch_flat]
        if dual:
            low.watch_max = low.occ[watch_flat]

    viol_dom = 0
    viol_inf = 0
    if dual:
        for s in range(total):
            if low.occ[s] > full.occ[s]:
                viol_dom += 1

    # --- milestones
    snap_times = [float(t) for t in snap_times]
    snaps = []
    snaps_low = []
    si = 0
    grid = []
    if front_dt > 0.0 and infect:
        ngrid = int(math.floor(t_end / front_dt + 1e-9))
        grid = [k * front_dt for k in range(ngrid + 1)]
    gi = 0
    front_samples = []
    pending_seed = infect
    seed_t = float(infect_time)
    n_events = 0

    def col_of(flat):
        return flat // stride0

    def site_infected(layer, flat):
        c = col_of(flat)
        layer.colcnt[c] += 1
        if c > layer.front_idx:
            layer.front_idx = c
            if c > layer.sup_front_idx:
                layer.sup_front_idx = c
        rem = flat
        dist = 0
        for i in range(d):
            ci = lo[i] + (rem // strides[i]) % ext[i]
            delta = ci - infect_site[i]
            if delta < 0:
                delta = -delta
            if delta > dist:
                dist = delta
        if dist > layer.range_sup:
            layer.range_sup = dist

    def site_cleared(layer, flat):
        c = col_of(flat)
        layer.colcnt[c] -= 1
        if c == layer.front_idx and layer.colcnt[c] == 0:
            while layer.front_idx >= 0 and layer.colcnt[layer.front_idx] == 0:
                layer.front_idx -= 1

    def apply_seed(layer):
        cohort = layer.occ[seed_flat]
        layer.seed_cohort = cohort
        if cohort > 0:
            layer.inf[seed_flat] = cohort
            layer.infected_total = cohort
            layer.range_sup = 0
            site_infected(layer, seed_flat)

    def flush(up_to):
        nonlocal pending_seed, si, gi
        while True:
            t_next = math.inf
            kind = -1
            if pending_seed and seed_t < t_next:
                t_next, kind = seed_t, 0
            if gi < len(grid) and grid[gi] < t_next:
                t_next, kind = grid[gi], 1
            if si < len(snap_times) and snap_times[si] < t_next:
                t_next, kind = snap_times[si], 2
            if t_next >= up_to:
                return
            if kind == 0:
                apply_seed(full)
                if dual:
                    apply_seed(low)
                pending_seed = False
            elif kind == 1:
                r = (lo[0] + full.front_idx) if full.front_idx >= 0 else NO_FRONT
                if dual:
                    rl = (lo[0] + low.front_idx) if low.front_idx >= 0 else NO_FRONT
                    front_samples.append((grid[gi], r, rl))
                else:
                    front_samples.append((grid[gi], r))
                gi += 1
            else:
                snaps.append(np.array(full.occ, dtype=np.int32))
                if dual:
                    snaps_low.append(np.array(low.occ, dtype=np.int32))
                si += 1

    def jump_layer(layer, a, b, newly_site_cb=None):
        was_inf = layer.inf is not None and layer.inf[a] > 0
        layer.occ[a] -= 1
        if was_inf:
            layer.inf[a] -= 1
            if layer.inf[a] == 0:
                site_cleared(layer, a)
        layer.occ[b] += 1
        if layer.inf is not None and (was_inf or layer.inf[b] > 0):
            old = layer.inf[b]
            if old == 0:
                site_infected(layer, b)
            newly = layer.occ[b] - old - (1 if was_inf else 0)
            layer.inf[b] = layer.occ[b]
            layer.infected_total += newly

    while heap:
        t, pid = heapq.heappop(heap)
        flush(t)
        # direction draw happens even if the move ends up rejected at the edge
        st, j = _jump(pstate[pid], cdf)
        pstate[pid] = st
        axis = j >> 1
        a = pos[pid]
        ci = lo[axis] + (a // strides[axis]) % ext[axis]
        if j & 1:
            ci -= 1
            b = a - strides[axis]
        else:
            ci += 1
            b = a + strides[axis]
        if ci < lo[axis] or ci > hi[axis]:
            pfrozen[pid] = True
            full.n_frozen += 1
            if full.inf is not None and full.inf[a] > 0:
                full.n_frozen_infected += 1
            if dual and in_low[pid]:
                low.n_frozen += 1
                if low.inf is not None and low.inf[a] > 0:
                    low.n_frozen_infected += 1
            continue
        pos[pid] = b
        pjumps[pid] += 1
        n_events += 1
        jump_layer(full, a, b)
        if dual and in_low[pid]:
            jump_layer(low, a, b)
        if dual:
            for s in (a, b):
                if low.occ[s] > full.occ[s]:
                    viol_dom += 1
                if low.inf is not None and low.inf[s] > 0 and full.inf[s] == 0:
                    viol_inf += 1
        if watch_flat >= 0 and (a == watch_flat or b == watch_flat):
            if full.occ[watch_flat] > full.watch_max:
                full.watch_max = full.occ[watch_flat]
            if dual and low.occ[watch_flat] > low.watch_max:
                low.watch_max = low.occ[watch_flat]
        st, e = _expo(pstate[pid])
        pstate[pid] = st
        nt = t + e / rate
        if nt <= t_end:
            heapq.heappush(heap, (nt, pid))
        else:
            pnext[pid] = nt

    flush(math.inf)

    out = {
        "n_events": n_events,
        "n_particles": npart,
        "n_frozen": full.n_frozen,
        "n_frozen_infected": full.n_frozen_infected,
        "final_occ": np.array(full.occ, dtype=np.int32),
        "snap_occ": snaps,
        "watch_max": full.watch_max,
    }
    if infect:
        out["final_inf"] = np.array(full.inf, dtype=np.int32)
        out["final_r"] = (lo[0] + full.front_idx) if full.front_idx >= 0 else None
        out["sup_r"] = (lo[0] + full.sup_front_idx) if full.sup_front_idx >= 0 else None
        out["range_sup"] = full.range_sup if full.range_sup >= 0 else None
        out["seed_cohort"] = full.seed_cohort
        out["final_infected"] = full.infected_total
        out["front_samples"] = front_samples
    if dual:
        out["viol_dom"] = viol_dom
        out["viol_inf"] = viol_inf
        out["final_occ_low"] = np.array(low.occ, dtype=np.int32)
        out["snap_occ_low"] = snaps_low
        out["watch_max_low"] = low.watch_max
        out["n_frozen_low"] = low.n_frozen
        if infect:
            out["final_inf_low"] = np.array(low.inf, dtype=np.int32)
            out["final_r_low"] = (lo[0] + low.front_idx) if low.front_idx >= 0 else None
            out["range_sup_low"] = low.range_sup if low.range_sup >= 0 else None
            out["seed_cohort_low"] = low.seed_cohort
            out["final_infected_low"] = low.infected_total
    if collect_particles:
        out["particle_pos"] = np.array(pos, dtype=np.int64)
        out["particle_jumps"] = np.array(pjumps, dtype=np.int64)
        out["particle_origin"] = np.array(porigin, dtype=np.int64)
        out["particle_n"] = np.array(pn, dtype=np.int64)
        out["particle_frozen"] = np.array(pfrozen, dtype=bool)
        if dual:
            out["particle_in_low"] = np.array(in_low, dtype=bool)
    return out


# ---------------------------------------------------------------------------
# sprinkled pairing coupling


def sprinkled_run(seed, replica, lo, hi, halo_lo, halo_hi, target_lo, target_hi,
                  cdf, rate, t_end, rho, rho_star, s_times, box_side,
                  collect_occ=False):
    """One replica of the sprinkled domination coupling.

    Base system (density rho) walks collection 0; sprinkled system (rho_star)
    walks collection 1 until a particle meets its current pair, after which it
    shadows the pair.  Pairings are rebuilt at each rematch time: same-site
    matches first (these merge on the spot), then same-box in (site, id)
    order.  A box whose unmerged base count exceeds its unmerged sprinkled
    count is a count-inversion (event B); if that happens at time 0 the run
    falls back to fully independent evolution and is flagged.
    """
    d = len(lo)
    lo = [int(x) for x in lo]
    hi = [int(x) for x in hi]
    ext, strides, total = window_geometry(lo, hi)
    if total > MAX_WINDOW_SITES or max(rho_star, 1.0) * total > MAX_EXPECTED_PARTICLES:
        raise CapacityError(
            f"window of {total} sites at density {rho_star} exceeds the memory budget")
    cdf = [float(c) for c in cdf]
    keys = _site_keys(lo, ext, strides, total)
    halo_lo = [int(x) for x in halo_lo]
    halo_hi = [int(x) for x in halo_hi]
    L = int(box_side)

    def in_box(flat, blo, bhi):
        rem = flat
        for i in range(d):
            ci = lo[i] + (rem // strides[i]) % ext[i]
            if ci < blo[i] or ci > bhi[i]:
                return False
        return True

    def coords_of(flat):
        return unflatten(flat, lo, ext, strides)

    # --- construction: base system first (pids 0..), then sprinkled
    pstate = []
    pnext = []
    pos = []
    occ_eta = [0] * total
    occ_star = [0] * total  # unmerged sprinkled particles only
    n_eta = 0
    n_star = 0
    for sysno, dens in ((0, rho), (1, rho_star)):
        for s in range(total):
            if not in_box(s, halo_lo, halo_hi):
                continue
            skey = int(keys[s])
            st = derive(seed, (TAG_INIT, replica, sysno, skey))
            st, cnt = _poisson(st, dens)
            for n in range(1, cnt + 1):
                wst = derive(seed, (TAG_WALK, replica, sysno, skey, n))
                wst, e = _expo(wst)
                pstate.append(wst)
                pnext.append(e / rate)
                pos.append(s)
            if sysno == 0:
                occ_eta[s] += cnt
                n_eta += cnt
            else:
                occ_star[s] += cnt
                n_star += cnt
    npart = n_eta + n_star
    init_occ_eta = np.array(occ_eta, dtype=np.int32)
    init_occ_star = np.array(occ_star, dtype=np.int32)

    partner = [-1] * npart          # eta <-> star links, symmetric
    merged = [False] * npart        # set on both ends of a merged pair
    was_outside = [False] * n_eta
    frozen = [False] * npart

    heap = [(pnext[i], i) for i in range(npart) if pnext[i] <= t_end]
    heapq.heapify(heap)

    merged_pairs = 0
    merged_counts = []
    bad_B = []
    independent = False
    demerges = 0  # structural check: must stay 0

    def merge(e, g):
        nonlocal merged_pairs
        merged[e] = True
        merged[g] = True
        occ_star[pos[g]] -= 1  # shadow now rides on the eta partner
        merged_pairs += 1

    def rematch(k_index):
        """Rebuild pairings; returns True if some box had a count inversion.

        At k_index == 0 an inversion aborts the pairing entirely (event B_0);
        later inversions leave the excess base particles of that box unpaired.
        """
        cand = []  # (boxkey, siteflat, pid) for unmerged particles inside halo
        for pid in range(npart):
            if merged[pid]:
                continue
            s = pos[pid]
            bkey = 0
            inside = True
            for i in range(d):
                ci = lo[i] + (s // strides[i]) % ext[i]
                if ci < halo_lo[i] or ci > halo_hi[i]:
                    inside = False
                    break
                bkey = bkey * 100003 + (ci - halo_lo[i]) // L
            if inside:
                cand.append((bkey, s, pid))
        cand.sort()
        n = len(cand)
        # pass 1: per-box unmerged counts decide the inversion event
        inverted = False
        i = 0
        while i < n:
            bkey = cand[i][0]
            ne = ns = 0
            while i < n and cand[i][0] == bkey:
                if cand[i][2] < n_eta:
                    ne += 1
                else:
                    ns += 1
                i += 1
            if ne > ns:
                inverted = True
        if inverted and k_index == 0:
            return True
        # pass 2: same-site pairs merge on the spot, leftovers pair in
        # (site, id) order within the box; all unmerged links dissolve first
        for pid in range(npart):
            if not merged[pid]:
                partner[pid] = -1
        i = 0
        while i < n:
            bkey = cand[i][0]
            j = i
            eta_rest = []
            star_rest = []
            while j < n and cand[j][0] == bkey:
                site = cand[j][1]
                k = j
                es = []
                gs = []
                while k < n and cand[k][0] == bkey and cand[k][1] == site:
                    if cand[k][2] < n_eta:
                        es.append(cand[k][2])
                    else:
                        gs.append(cand[k][2])
                    k += 1
                m = min(len(es), len(gs))
                for q in range(m):
                    partner[es[q]] = gs[q]
                    partner[gs[q]] = es[q]
                    merge(es[q], gs[q])
                eta_rest.extend(es[m:])
                star_rest.extend(gs[m:])
                j = k
            m = min(len(eta_rest), len(star_rest))
            for q in range(m):
                partner[eta_rest[q]] = star_rest[q]
                partner[star_rest[q]] = eta_rest[q]
            for pid in eta_rest[m:] + star_rest[m:]:
                partner[pid] = -1
            i = j
        return inverted

    s_times = [float(t) for t in s_times]
    ki = 0
    n_events = 0
    while True:
        t_ev = heap[0][0] if heap else math.inf
        while ki < len(s_times) and s_times[ki] < t_ev:
            if independent:
                bad_B.append(False)
            else:
                inv = rematch(ki)
                bad_B.append(inv)
                if ki == 0 and inv:
                    independent = True  # event B_0: fully independent run
            merged_counts.append(merged_pairs)
            for e in range(n_eta):
                if not in_box(pos[e], halo_lo, halo_hi):
                    was_outside[e] = True
            ki += 1
        if not heap:
            break
        t, pid = heapq.heappop(heap)
        if merged[pid] and pid >= n_eta:
            continue  # shadowing its pair; stream halted
        st, j = _jump(pstate[pid], cdf)
        pstate[pid] = st
        axis = j >> 1
        a = pos[pid]
        ci = lo[axis] + (a // strides[axis]) % ext[axis]
        if j & 1:
            ci -= 1
            b = a - strides[axis]
        else:
            ci += 1
            b = a + strides[axis]
        if ci < lo[axis] or ci > hi[axis]:
            frozen[pid] = True
            continue
        pos[pid] = b
        n_events += 1
        if pid < n_eta:
            occ_eta[a] -= 1
            occ_eta[b] += 1
        else:
            occ_star[a] -= 1
            occ_star[b] += 1
        q = partner[pid]
        if q >= 0 and not merged[pid] and pos[q] == b:
            if pid < n_eta:
                merge(pid, q)
            else:
                merge(q, pid)
        st, e = _expo(pstate[pid])
        pstate[pid] = st
        nt = t + e / rate
        if nt <= t_end:
            heapq.heappush(heap, (nt, pid))

    # effective sprinkled occupancy: unmerged stars + shadows at eta positions
    eff_star = list(occ_star)
    for e in range(n_eta):
        if merged[e]:
            eff_star[pos[e]] += 1

    bad_A = False
    fail_sites = 0
    tlo = [int(x) for x in target_lo]
    thi = [int(x) for x in target_hi]
    for e in range(n_eta):
        if was_outside[e] and in_box(pos[e], tlo, thi):
            bad_A = True
            break
    # domination check over the target box
    for c in product(*[range(tlo[i], thi[i] + 1) for i in range(d)]):
        f = flatten(c, lo, strides)
        if occ_eta[f] > eff_star[f]:
            fail_sites += 1
    out = {
        "n_events": n_events,
        "n_eta": n_eta,
        "n_star": n_star,
        "merged_counts": np.array(merged_counts, dtype=np.int64),
        "bad_B": np.array(bad_B, dtype=bool),
        "bad_B0": bool(bad_B[0]) if bad_B else False,
        "bad_A": bad_A,
        "independent": independent,
        "dominated": fail_sites == 0,
        "fail_sites": fail_sites,
        "n_frozen": sum(frozen),
        "demerges": demerges,
        "final_merged": merged_pairs,
    }
    if collect_occ:
        out["init_occ_eta"] = init_occ_eta
        out["init_occ_star"] = init_occ_star
        out["final_occ_eta"] = np.array(occ_eta, dtype=np.int32)
        out["final_occ_star_eff"] = np.array(eff_star, dtype=np.int32)
    return out


# ---------------------------------------------------------------------------
# tracked mode: full particle identity + event log (engine.evolve contract)


class TrackedWalks:
    """Stateful graphical construction with an event log, resumable in time.

    Used for the small-scale paths: genealogy reconstruction, replay oracles
    and the engine's resumable evolve() contract.  Dynamics (streams, ordering, freeze
    rule) are identical to fast_run; infection is NOT handled here, it is a
    consumer of the event stream (see driftlab.infection).
    """

    def __init__(self, seed, replica, lo, hi, cdf, rate=1.0, rho=-1.0,
                 init_occ=None, extra_at=None, system=0):
        self.d = len(lo)
        self.lo = [int(x) for x in lo]
        self.hi = [int(x) for x in hi]
        self.ext, self.strides, self.total = window_geometry(self.lo, self.hi)
        if self.total > MAX_WINDOW_SITES or max(rho, 1.0) * self.total > MAX_EXPECTED_PARTICLES:
            raise CapacityError(
                f"window of {self.total} sites at density {rho} exceeds the memory budget")
        self.cdf = [float(c) for c in cdf]
        self.rate = float(rate)
        self.time = 0.0
        keys = _site_keys(self.lo, self.ext, self.strides, self.total)
        extra_flat = flatten(extra_at, self.lo, self.strides) if extra_at is not None else -1

        self.pstate = []
        self.pnext = []
        self.pos = []
        self.porigin = []
        self.pn = []
        self.pfrozen = []
        self.occ = [0] * self.total
        for s in range(self.total):
            skey = int(keys[s])
            if init_occ is None:
                st = derive(seed, (TAG_INIT, replica, system, skey))
                st, cnt = _poisson(st, rho)
            else:
                cnt = int(init_occ[s])
            first_n = 0 if s == extra_flat else 1
            for n in range(first_n, cnt + 1):
                wst = derive(seed, (TAG_WALK, replica, system, skey, n))
                wst, e = _expo(wst)
                self.pstate.append(wst)
                self.pnext.append(e / self.rate)
                self.pos.append(s)
                self.porigin.append(s)
                self.pn.append(n)
                self.pfrozen.append(False)
            self.occ[s] = cnt + (1 if first_n == 0 else 0)
        self.npart = len(self.pos)
        self.pjumps = [0] * self.npart
        self.n_frozen = 0
        self._heap = []

    def unflatten(self, flat):
        return unflatten(flat, self.lo, self.ext, self.strides)

    def evolve(self, until, sink=None):
        """Advance to `until`, feeding (t, pid, from_flat, to_flat) to sink."""
        if until < self.time:
            raise ValueError("cannot evolve backwards")
        heap = [(self.pnext[i], i) for i in range(self.npart)
                if not self.pfrozen[i] and self.pnext[i] <= until]
        heapq.heapify(heap)
        while heap:
            t, pid = heapq.heappop(heap)
            st, j = _jump(self.pstate[pid], self.cdf)
            self.pstate[pid] = st
            axis = j >> 1
            a = self.pos[pid]
            ci = self.lo[axis] + (a // self.strides[axis]) % self.ext[axis]
            if j & 1:
                ci -= 1
                b = a - self.strides[axis]
            else:
                ci += 1
                b = a + self.strides[axis]
            if ci < self.lo[axis] or ci > self.hi[axis]:
                self.pfrozen[pid] = True
                self.n_frozen += 1
                continue
            self.pos[pid] = b
            self.pjumps[pid] += 1
            self.occ[a] -= 1
            self.occ[b] += 1
            if sink is not None:
                sink(t, pid, a, b)
            st, e = _expo(self.pstate[pid])
            self.pstate[pid] = st
            nt = t + e / self.rate
            self.pnext[pid] = nt
            if nt <= until:
                heapq.heappush(heap, (nt, pid))
        self.time = until
