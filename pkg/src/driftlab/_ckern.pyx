# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled simulation kernels.

Semantics-identical twin of driftlab._pykern (see that module for the event
ordering and milestone conventions).  Every integer and floating operation
that feeds the random streams or the event order matches the pure Python
reference exactly, so the two backends produce bit-identical runs.
"""

from libc.math cimport log, exp, INFINITY
from libc.stdint cimport uint64_t, int64_t, int32_t, uint8_t

import numpy as np

BACKEND_NAME = "c"

DEF TAG_INIT = 1
DEF TAG_WALK = 2
DEF TAG_THIN = 3
DEF TAG_SITEKEY = 4

cdef uint64_t GOLD = 0x9E3779B97F4A7C15UL
cdef double INV53 = 1.0 / 9007199254740992.0
cdef int64_t NO_FRONT_C = -(<int64_t>1 << 62)

NO_FRONT = int(NO_FRONT_C)

MAX_WINDOW_SITES = 50_000_000
MAX_EXPECTED_PARTICLES = 2.0e8

from ._pykern import CapacityError


cdef inline uint64_t mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9UL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBUL
    return z ^ (z >> 31)


cdef inline uint64_t derive1(uint64_t seed) noexcept nogil:
    return mix64(seed + GOLD)


cdef inline uint64_t dstep(uint64_t s, uint64_t q) noexcept nogil:
    s = s ^ (q * GOLD)
    return mix64(s + GOLD)


cdef inline double u01(uint64_t* state) noexcept nogil:
    state[0] = state[0] + GOLD
    return <double>(mix64(state[0]) >> 11) * INV53


cdef inline double expo(uint64_t* state) noexcept nogil:
    return -log(1.0 - u01(state))


cdef inline long poisson(uint64_t* state, double lam) noexcept nogil:
    if lam <= 0.0:
        return 0
    cdef double limit = exp(-lam)
    cdef long k = 0
    cdef double p = 1.0
    while True:
        p *= u01(state)
        if p <= limit:
            return k
        k += 1


cdef inline long binomial(uint64_t* state, long n, double q) noexcept nogil:
    cdef long c = 0
    cdef long i
    for i in range(n):
        if u01(state) < q:
            c += 1
    return c


cdef inline int jump_dir(uint64_t* state, double* cdf) noexcept nogil:
    cdef double u = u01(state)
    cdef int j = 0
    while u >= cdf[j]:
        j += 1
    return j


# --- binary min-heap on (t, pid), ties by pid ------------------------------

cdef inline bint hless(double ta, int64_t pa, double tb, int64_t pb) noexcept nogil:
    return ta < tb or (ta == tb and pa < pb)


cdef inline void hpush(double* ht, int64_t* hp, long* hn, double t, int64_t pid) noexcept nogil:
    cdef long i = hn[0]
    cdef long par
    cdef double tt
    cdef int64_t pp
    ht[i] = t
    hp[i] = pid
    hn[0] += 1
    while i > 0:
        par = (i - 1) >> 1
        if hless(ht[i], hp[i], ht[par], hp[par]):
            tt = ht[par]; ht[par] = ht[i]; ht[i] = tt
            pp = hp[par]; hp[par] = hp[i]; hp[i] = pp
            i = par
        else:
            break


cdef inline void hpop(double* ht, int64_t* hp, long* hn) noexcept nogil:
    cdef long n = hn[0] - 1
    cdef long i = 0, c
    cdef double tt
    cdef int64_t pp
    ht[0] = ht[n]
    hp[0] = hp[n]
    hn[0] = n
    while True:
        c = 2 * i + 1
        if c >= n:
            break
        if c + 1 < n and hless(ht[c + 1], hp[c + 1], ht[c], hp[c]):
            c += 1
        if hless(ht[c], hp[c], ht[i], hp[i]):
            tt = ht[c]; ht[c] = ht[i]; ht[i] = tt
            pp = hp[c]; hp[c] = hp[i]; hp[i] = pp
            i = c
        else:
            break


# --- mergesort of (box, site, pid) triples ----------------------------------

cdef inline bint tless(int64_t b1, int64_t s1, int64_t p1,
                       int64_t b2, int64_t s2, int64_t p2) noexcept nogil:
    if b1 != b2:
        return b1 < b2
    if s1 != s2:
        return s1 < s2
    return p1 < p2


cdef void msort(int64_t* b, int64_t* s, int64_t* p,
                int64_t* tb, int64_t* ts, int64_t* tp,
                long lo, long hi) noexcept nogil:
    if hi - lo <= 1:
        return
    cdef long mid = (lo + hi) >> 1
    msort(b, s, p, tb, ts, tp, lo, mid)
    msort(b, s, p, tb, ts, tp, mid, hi)
    cdef long i = lo, j = mid, k = lo
    while i < mid and j < hi:
        if tless(b[j], s[j], p[j], b[i], s[i], p[i]):
            tb[k] = b[j]; ts[k] = s[j]; tp[k] = p[j]; j += 1
        else:
            tb[k] = b[i]; ts[k] = s[i]; tp[k] = p[i]; i += 1
        k += 1
    while i < mid:
        tb[k] = b[i]; ts[k] = s[i]; tp[k] = p[i]; i += 1; k += 1
    while j < hi:
        tb[k] = b[j]; ts[k] = s[j]; tp[k] = p[j]; j += 1; k += 1
    for i in range(lo, hi):
        b[i] = tb[i]; s[i] = ts[i]; p[i] = tp[i]


# --- geometry ---------------------------------------------------------------

def _geom(lo, hi):
    d = len(lo)
    ext = np.array([int(hi[i]) - int(lo[i]) + 1 for i in range(d)], dtype=np.int64)
    if (ext <= 0).any():
        raise ValueError("window corners out of order")
    strides = np.empty(d, dtype=np.int64)
    acc = 1
    for i in range(d - 1, -1, -1):
        strides[i] = acc
        acc *= int(ext[i])
    return ext, strides, acc


cdef void fill_site_keys(uint64_t[::1] keys, int64_t[::1] lo, int64_t[::1] ext, int d) noexcept:
    cdef uint64_t base = derive1(<uint64_t>TAG_SITEKEY)
    cdef int64_t coords[8]
    cdef int i
    cdef long flat, total = keys.shape[0]
    cdef uint64_t s
    for i in range(d):
        coords[i] = lo[i]
    for flat in range(total):
        s = base
        for i in range(d):
            s = dstep(s, <uint64_t>coords[i])
        keys[flat] = s
        i = d - 1
        while i >= 0:
            coords[i] += 1
            if coords[i] <= lo[i] + ext[i] - 1:
                break
            coords[i] = lo[i]
            i -= 1


cdef inline int64_t axis_coord(int64_t flat, int axis, int64_t* lo, int64_t* ext,
                               int64_t* strides) noexcept nogil:
    return lo[axis] + (flat / strides[axis]) % ext[axis]


# --- counts-mode run --------------------------------------------------------


def fast_run(seed, replica, lo, hi, cdf, rate, t_end, rho,
             init_occ=None, extra_at=None, infect_site=None, infect_time=0.0,
             front_dt=0.0, snap_times=(), watch_site=None, lower_rho=-1.0,
             collect_particles=False, system=0):
    cdef int d = len(lo)
    ext_a, strides_a, total = _geom(lo, hi)
    if total > MAX_WINDOW_SITES or max(rho, 1.0) * total > MAX_EXPECTED_PARTICLES:
        raise CapacityError(
            f"window of {total} sites at density {rho} exceeds the memory budget")
    lo_a = np.array([int(x) for x in lo], dtype=np.int64)
    hi_a = np.array([int(x) for x in hi], dtype=np.int64)
    cdf_a = np.ascontiguousarray(cdf, dtype=np.float64)
    keys_a = np.empty(total, dtype=np.uint64)
    cdef uint64_t[::1] keys = keys_a
    cdef int64_t[::1] lo_v = lo_a
    cdef int64_t[::1] hi_v = hi_a
    cdef int64_t[::1] ext_v = ext_a
    cdef int64_t[::1] strides_v = strides_a
    fill_site_keys(keys, lo_v, ext_v, d)
    cdef double[::1] cdf_v = cdf_a

    cdef bint dual = lower_rho >= 0.0
    cdef bint infect = infect_site is not None
    cdef uint64_t cseed = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t crep = <uint64_t>(int(replica))
    cdef uint64_t csys = <uint64_t>(int(system))
    cdef double crate = float(rate)
    cdef double ct_end = float(t_end)
    cdef double crho = float(rho)
    cdef double cthin = 0.0
    if dual and crho > 0.0:
        cthin = float(lower_rho) / crho

    cdef int i
    cdef long extra_flat = -1
    if extra_at is not None:
        extra_flat = 0
        for i in range(d):
            extra_flat += (int(extra_at[i]) - int(lo_a[i])) * int(strides_a[i])
    cdef long watch_flat = -1
    if watch_site is not None:
        watch_flat = 0
        for i in range(d):
            watch_flat += (int(watch_site[i]) - int(lo_a[i])) * int(strides_a[i])
    cdef long seed_flat = -1
    seed_coords_a = np.zeros(d, dtype=np.int64)
    if infect:
        seed_flat = 0
        for i in range(d):
            seed_coords_a[i] = int(infect_site[i])
            seed_flat += (int(infect_site[i]) - int(lo_a[i])) * int(strides_a[i])
    cdef int64_t[::1] seed_coords = seed_coords_a

    have_init = init_occ is not None
    init_a = np.ascontiguousarray(init_occ, dtype=np.int32) if have_init else np.empty(0, dtype=np.int32)
    cdef int32_t[::1] init_v = init_a
    cdef bint c_have_init = have_init

    # pass 1: per-site counts
    cnt_a = np.empty(total, dtype=np.int32)
    lowcnt_a = np.zeros(total, dtype=np.int32)
    cdef int32_t[::1] cnt_v = cnt_a
    cdef int32_t[::1] lowcnt_v = lowcnt_a
    cdef uint64_t st
    cdef long s, c
    cdef long npart = 0
    for s in range(total):
        if c_have_init:
            c = init_v[s]
        else:
            st = derive1(cseed)
            st = dstep(st, TAG_INIT); st = dstep(st, crep); st = dstep(st, csys)
            st = dstep(st, keys[s])
            c = poisson(&st, crho)
        cnt_v[s] = <int32_t>c
        if dual and c > 0:
            st = derive1(cseed)
            st = dstep(st, TAG_THIN); st = dstep(st, crep); st = dstep(st, csys)
            st = dstep(st, keys[s])
            lowcnt_v[s] = <int32_t>binomial(&st, c, cthin)
        npart += c
        if s == extra_flat:
            npart += 1

    # particle arrays
    pstate_a = np.empty(npart, dtype=np.uint64)
    pnext_a = np.empty(npart, dtype=np.float64)
    pos_a = np.empty(npart, dtype=np.int64)
    porigin_a = np.empty(npart, dtype=np.int64)
    pn_a = np.empty(npart, dtype=np.int64)
    pjumps_a = np.zeros(npart, dtype=np.int64)
    pfrozen_a = np.zeros(npart, dtype=np.uint8)
    inlow_a = np.zeros(npart if dual else 1, dtype=np.uint8)
    cdef uint64_t[::1] pstate = pstate_a
    cdef double[::1] pnext = pnext_a
    cdef int64_t[::1] pos = pos_a
    cdef int64_t[::1] porigin = porigin_a
    cdef int64_t[::1] pn = pn_a
    cdef int64_t[::1] pjumps = pjumps_a
    cdef uint8_t[::1] pfrozen = pfrozen_a
    cdef uint8_t[::1] inlow = inlow_a

    occ_a = np.zeros(total, dtype=np.int32)
    occL_a = np.zeros(total if dual else 1, dtype=np.int32)
    inf_a = np.zeros(total if infect else 1, dtype=np.int32)
    infL_a = np.zeros(total if (infect and dual) else 1, dtype=np.int32)
    cdef int32_t[::1] occ = occ_a
    cdef int32_t[::1] occL = occL_a
    cdef int32_t[::1] inf = inf_a
    cdef int32_t[::1] infL = infL_a

    cdef long pid = 0
    cdef long first_n, n
    cdef uint64_t wst
    for s in range(total):
        c = cnt_v[s]
        first_n = 0 if s == extra_flat else 1
        for n in range(first_n, c + 1):
            wst = derive1(cseed)
            wst = dstep(wst, TAG_WALK); wst = dstep(wst, crep); wst = dstep(wst, csys)
            wst = dstep(wst, keys[s]); wst = dstep(wst, <uint64_t>n)
            pnext[pid] = expo(&wst) / crate
            pstate[pid] = wst
            pos[pid] = s
            porigin[pid] = s
            pn[pid] = n
            if dual:
                inlow[pid] = 1 if (n == 0 or n <= lowcnt_v[s]) else 0
            pid += 1
        occ[s] = <int32_t>(c + (1 if first_n == 0 else 0))
        if dual:
            occL[s] = <int32_t>(lowcnt_v[s] + (1 if first_n == 0 else 0))

    # heap
    ht_a = np.empty(npart + 1, dtype=np.float64)
    hp_a = np.empty(npart + 1, dtype=np.int64)
    cdef double[::1] ht_v = ht_a
    cdef int64_t[::1] hp_v = hp_a
    cdef double* ht = &ht_v[0]
    cdef int64_t* hp = &hp_v[0]
    cdef long hn = 0
    for pid in range(npart):
        if pnext[pid] <= ct_end:
            hpush(ht, hp, &hn, pnext[pid], pid)

    # front bookkeeping (per layer)
    cdef long ext0 = ext_v[0]
    cdef long stride0 = strides_v[0]
    col_a = np.zeros(ext0 if infect else 1, dtype=np.int32)
    colL_a = np.zeros(ext0 if (infect and dual) else 1, dtype=np.int32)
    cdef int32_t[::1] col = col_a
    cdef int32_t[::1] colL = colL_a
    cdef long front = -1, supfront = -1, frontL = -1, supfrontL = -1
    cdef int64_t range_sup = -1, range_supL = -1
    cdef long infected_total = 0, infected_totalL = 0
    cdef long seed_cohort = -1, seed_cohortL = -1
    cdef long watch_max = 0, watch_maxL = 0
    cdef long n_frozen = 0, n_frozenL = 0
    cdef long n_frozen_inf = 0, n_frozen_infL = 0
    cdef long viol_dom = 0, viol_inf = 0
    if watch_flat >= 0:
        watch_max = occ[watch_flat]
        if dual:
            watch_maxL = occL[watch_flat]
    if dual:
        for s in range(total):
            if occL[s] > occ[s]:
                viol_dom += 1

    # milestones
    snap_a = np.ascontiguousarray(snap_times, dtype=np.float64) if len(snap_times) else np.empty(0, dtype=np.float64)
    cdef double[::1] snap_v = snap_a
    cdef long nsnap = snap_v.shape[0]
    snaps_out = np.zeros((nsnap, total), dtype=np.int32)
    snapsL_out = np.zeros((nsnap if dual else 0, total), dtype=np.int32)
    cdef int32_t[:, ::1] snaps_v = snaps_out
    cdef int32_t[:, ::1] snapsL_v = snapsL_out
    cdef long si = 0
    cdef double cfront_dt = float(front_dt)
    cdef long ngrid = 0
    if cfront_dt > 0.0 and infect:
        ngrid = <long>(ct_end / cfront_dt + 1e-9) + 1
    grid_r = np.empty(max(ngrid, 1), dtype=np.int64)
    grid_rL = np.empty(max(ngrid, 1) if dual else 1, dtype=np.int64)
    grid_t = np.empty(max(ngrid, 1), dtype=np.float64)
    cdef int64_t[::1] grid_r_v = grid_r
    cdef int64_t[::1] grid_rL_v = grid_rL
    cdef double[::1] grid_t_v = grid_t
    cdef long gi = 0
    cdef bint pending_seed = infect
    cdef double seed_t = float(infect_time)

    cdef long n_events = 0
    cdef double t, t_next, nt
    cdef int kind, axis, i2
    cdef long a, b, old, newly
    cdef int64_t ci, dist, delta
    cdef int jdir
    cdef bint was_inf
    cdef long lo0 = lo_v[0]

    while True:
        if hn > 0:
            t = ht[0]
        else:
            t = INFINITY
        # milestones strictly before the next event
        while True:
            t_next = INFINITY
            kind = -1
            if pending_seed and seed_t < t_next:
                t_next = seed_t; kind = 0
            if gi < ngrid and gi * cfront_dt < t_next:
                t_next = gi * cfront_dt; kind = 1
            if si < nsnap and snap_v[si] < t_next:
                t_next = snap_v[si]; kind = 2
            if t_next >= t:
                break
            if kind == 0:
                seed_cohort = occ[seed_flat]
                if seed_cohort > 0:
                    inf[seed_flat] = <int32_t>seed_cohort
                    infected_total = seed_cohort
                    range_sup = 0
                    col[seed_flat // stride0] += 1
                    front = seed_flat // stride0
                    supfront = front
                if dual:
                    seed_cohortL = occL[seed_flat]
                    if seed_cohortL > 0:
                        infL[seed_flat] = <int32_t>seed_cohortL
                        infected_totalL = seed_cohortL
                        range_supL = 0
                        colL[seed_flat // stride0] += 1
                        frontL = seed_flat // stride0
                        supfrontL = frontL
                pending_seed = False
            elif kind == 1:
                grid_t_v[gi] = gi * cfront_dt
                grid_r_v[gi] = (lo0 + front) if front >= 0 else NO_FRONT_C
                if dual:
                    grid_rL_v[gi] = (lo0 + frontL) if frontL >= 0 else NO_FRONT_C
                gi += 1
            else:
                for s in range(total):
                    snaps_v[si, s] = occ[s]
                if dual:
                    for s in range(total):
                        snapsL_v[si, s] = occL[s]
                si += 1
        if hn == 0:
            break
        pid = hp[0]
        hpop(ht, hp, &hn)
        jdir = jump_dir(&pstate[pid], &cdf_v[0])
        axis = jdir >> 1
        a = pos[pid]
        ci = axis_coord(a, axis, &lo_v[0], &ext_v[0], &strides_v[0])
        if jdir & 1:
            ci -= 1
            b = a - strides_v[axis]
        else:
            ci += 1
            b = a + strides_v[axis]
        if ci < lo_v[axis] or ci > hi_v[axis]:
            pfrozen[pid] = 1
            n_frozen += 1
            if infect and inf[a] > 0:
                n_frozen_inf += 1
            if dual and inlow[pid]:
                n_frozenL += 1
                if infect and infL[a] > 0:
                    n_frozen_infL += 1
            continue
        pos[pid] = b
        pjumps[pid] += 1
        n_events += 1
        # full layer
        was_inf = infect and inf[a] > 0
        occ[a] -= 1
        if was_inf:
            inf[a] -= 1
            if inf[a] == 0:
                col[a // stride0] -= 1
                if a // stride0 == front and col[front] == 0:
                    while front >= 0 and col[front] == 0:
                        front -= 1
        occ[b] += 1
        if infect and (was_inf or inf[b] > 0):
            old = inf[b]
            if old == 0:
                col[b // stride0] += 1
                if b // stride0 > front:
                    front = b // stride0
                    if front > supfront:
                        supfront = front
                dist = 0
                for i2 in range(d):
                    delta = axis_coord(b, i2, &lo_v[0], &ext_v[0], &strides_v[0]) - seed_coords[i2]
                    if delta < 0:
                        delta = -delta
                    if delta > dist:
                        dist = delta
                if dist > range_sup:
                    range_sup = dist
            newly = occ[b] - old - (1 if was_inf else 0)
            inf[b] = occ[b]
            infected_total += newly
        # lower layer
        if dual and inlow[pid]:
            was_inf = infect and infL[a] > 0
            occL[a] -= 1
            if was_inf:
                infL[a] -= 1
                if infL[a] == 0:
                    colL[a // stride0] -= 1
                    if a // stride0 == frontL and colL[frontL] == 0:
                        while frontL >= 0 and colL[frontL] == 0:
                            frontL -= 1
            occL[b] += 1
            if infect and (was_inf or infL[b] > 0):
                old = infL[b]
                if old == 0:
                    colL[b // stride0] += 1
                    if b // stride0 > frontL:
                        frontL = b // stride0
                        if frontL > supfrontL:
                            supfrontL = frontL
                    dist = 0
                    for i2 in range(d):
                        delta = axis_coord(b, i2, &lo_v[0], &ext_v[0], &strides_v[0]) - seed_coords[i2]
                        if delta < 0:
                            delta = -delta
                        if delta > dist:
                            dist = delta
                    if dist > range_supL:
                        range_supL = dist
                newly = occL[b] - old - (1 if was_inf else 0)
                infL[b] = occL[b]
                infected_totalL += newly
        if dual:
            if occL[a] > occ[a]:
                viol_dom += 1
            if occL[b] > occ[b]:
                viol_dom += 1
            if infect:
                if infL[a] > 0 and inf[a] == 0:
                    viol_inf += 1
                if infL[b] > 0 and inf[b] == 0:
                    viol_inf += 1
        if watch_flat >= 0 and (a == watch_flat or b == watch_flat):
            if occ[watch_flat] > watch_max:
                watch_max = occ[watch_flat]
            if dual and occL[watch_flat] > watch_maxL:
                watch_maxL = occL[watch_flat]
        nt = t + expo(&pstate[pid]) / crate
        if nt <= ct_end:
            hpush(ht, hp, &hn, nt, pid)
        else:
            pnext[pid] = nt

    out = {
        "n_events": n_events,
        "n_particles": npart,
        "n_frozen": n_frozen,
        "n_frozen_infected": n_frozen_inf,
        "final_occ": occ_a,
        "snap_occ": [snaps_out[i] for i in range(nsnap)],
        "watch_max": watch_max,
    }
    if infect:
        out["final_inf"] = inf_a
        out["final_r"] = (int(lo_a[0]) + front) if front >= 0 else None
        out["sup_r"] = (int(lo_a[0]) + supfront) if supfront >= 0 else None
        out["range_sup"] = int(range_sup) if range_sup >= 0 else None
        out["seed_cohort"] = seed_cohort
        out["final_infected"] = infected_total
        if dual:
            out["front_samples"] = [
                (float(grid_t[i]), int(grid_r[i]), int(grid_rL[i])) for i in range(gi)]
        else:
            out["front_samples"] = [(float(grid_t[i]), int(grid_r[i])) for i in range(gi)]
    if dual:
        out["viol_dom"] = viol_dom
        out["viol_inf"] = viol_inf
        out["final_occ_low"] = occL_a
        out["snap_occ_low"] = [snapsL_out[i] for i in range(nsnap)]
        out["watch_max_low"] = watch_maxL
        out["n_frozen_low"] = n_frozenL
        if infect:
            out["final_inf_low"] = infL_a
            out["final_r_low"] = (int(lo_a[0]) + frontL) if frontL >= 0 else None
            out["range_sup_low"] = int(range_supL) if range_supL >= 0 else None
            out["seed_cohort_low"] = seed_cohortL
            out["final_infected_low"] = infected_totalL
    if collect_particles:
        out["particle_pos"] = pos_a
        out["particle_jumps"] = pjumps_a
        out["particle_origin"] = porigin_a
        out["particle_n"] = pn_a
        out["particle_frozen"] = pfrozen_a.astype(bool)
        if dual:
            out["particle_in_low"] = inlow_a.astype(bool)
    return out


# --- sprinkled pairing coupling ---------------------------------------------


cdef bint rematch_c(long k_index, long npart, long n_eta, int d,
                    int64_t* pos, uint8_t* merged, int64_t* partner,
                    int32_t* occ_star, uint8_t* inside_halo,
                    int64_t* lo, int64_t* ext, int64_t* strides,
                    int64_t* hlo, long L,
                    int64_t* kb, int64_t* ks, int64_t* kp,
                    int64_t* tb, int64_t* ts, int64_t* tp,
                    int64_t* ebuf, int64_t* gbuf,
                    long* merged_pairs) noexcept nogil:
    """Rebuild pairings (same conventions as the Python twin)."""
    cdef long ncand = 0
    cdef long pid, s
    cdef int i
    cdef int64_t ci, bkey
    for pid in range(npart):
        if merged[pid]:
            continue
        s = pos[pid]
        if not inside_halo[s]:
            continue
        bkey = 0
        for i in range(d):
            ci = axis_coord(s, i, lo, ext, strides)
            bkey = bkey * 100003 + (ci - hlo[i]) / L
        kb[ncand] = bkey
        ks[ncand] = s
        kp[ncand] = pid
        ncand += 1
    if ncand == 0:
        return False
    msort(kb, ks, kp, tb, ts, tp, 0, ncand)
    # pass 1: per-box unmerged counts decide the inversion event
    cdef bint inverted = False
    cdef long i0 = 0, ne, ns
    cdef int64_t bk
    while i0 < ncand:
        bk = kb[i0]
        ne = 0
        ns = 0
        while i0 < ncand and kb[i0] == bk:
            if kp[i0] < n_eta:
                ne += 1
            else:
                ns += 1
            i0 += 1
        if ne > ns:
            inverted = True
    if inverted and k_index == 0:
        return True
    # pass 2: all unmerged links dissolve, same-site pairs merge on the spot,
    # leftovers pair in (site, id) order within the box
    for pid in range(npart):
        if not merged[pid]:
            partner[pid] = -1
    cdef long j0, k0, m0, q0, nrest_e, nrest_g, split
    cdef int64_t site
    i0 = 0
    while i0 < ncand:
        bk = kb[i0]
        j0 = i0
        nrest_e = 0
        nrest_g = 0
        while j0 < ncand and kb[j0] == bk:
            site = ks[j0]
            k0 = j0
            while k0 < ncand and kb[k0] == bk and ks[k0] == site:
                k0 += 1
            # within a site run, base pids sort before sprinkled pids
            split = j0
            while split < k0 and kp[split] < n_eta:
                split += 1
            ne = split - j0
            ns = k0 - split
            m0 = ne if ne < ns else ns
            for q0 in range(m0):
                partner[kp[j0 + q0]] = kp[split + q0]
                partner[kp[split + q0]] = kp[j0 + q0]
                merged[kp[j0 + q0]] = 1
                merged[kp[split + q0]] = 1
                occ_star[pos[kp[split + q0]]] -= 1
                merged_pairs[0] += 1
            for q0 in range(m0, ne):
                ebuf[nrest_e] = kp[j0 + q0]
                nrest_e += 1
            for q0 in range(m0, ns):
                gbuf[nrest_g] = kp[split + q0]
                nrest_g += 1
            j0 = k0
        m0 = nrest_e if nrest_e < nrest_g else nrest_g
        for q0 in range(m0):
            partner[ebuf[q0]] = gbuf[q0]
            partner[gbuf[q0]] = ebuf[q0]
        i0 = j0
    return inverted


def sprinkled_run(seed, replica, lo, hi, halo_lo, halo_hi, target_lo, target_hi,
                  cdf, rate, t_end, rho, rho_star, s_times, box_side,
                  collect_occ=False):
    cdef int d = len(lo)
    ext_a, strides_a, total = _geom(lo, hi)
    if total > MAX_WINDOW_SITES or max(rho_star, 1.0) * total > MAX_EXPECTED_PARTICLES:
        raise CapacityError(
            f"window of {total} sites at density {rho_star} exceeds the memory budget")
    lo_a = np.array([int(x) for x in lo], dtype=np.int64)
    hi_a = np.array([int(x) for x in hi], dtype=np.int64)
    hlo_a = np.array([int(x) for x in halo_lo], dtype=np.int64)
    hhi_a = np.array([int(x) for x in halo_hi], dtype=np.int64)
    tlo_a = np.array([int(x) for x in target_lo], dtype=np.int64)
    thi_a = np.array([int(x) for x in target_hi], dtype=np.int64)
    cdf_a = np.ascontiguousarray(cdf, dtype=np.float64)
    keys_a = np.empty(total, dtype=np.uint64)
    cdef uint64_t[::1] keys = keys_a
    cdef int64_t[::1] lo_v = lo_a
    cdef int64_t[::1] hi_v = hi_a
    cdef int64_t[::1] ext_v = ext_a
    cdef int64_t[::1] strides_v = strides_a
    cdef int64_t[::1] hlo_v = hlo_a
    cdef int64_t[::1] hhi_v = hhi_a
    fill_site_keys(keys, lo_v, ext_v, d)
    cdef double[::1] cdf_v = cdf_a
    cdef long L = int(box_side)
    cdef uint64_t cseed = <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF)
    cdef uint64_t crep = <uint64_t>(int(replica))
    cdef double crate = float(rate)
    cdef double ct_end = float(t_end)

    cdef int i
    cdef long s
    cdef uint64_t st, wst
    cdef int64_t ci

    inside_a = np.zeros(total, dtype=np.uint8)
    cdef uint8_t[::1] inside_halo = inside_a
    cdef bint ok
    for s in range(total):
        ok = True
        for i in range(d):
            ci = axis_coord(s, i, &lo_v[0], &ext_v[0], &strides_v[0])
            if ci < hlo_v[i] or ci > hhi_v[i]:
                ok = False
                break
        inside_halo[s] = 1 if ok else 0

    # pass 1: counts (halo sites only)
    cnt_eta_a = np.zeros(total, dtype=np.int32)
    cnt_star_a = np.zeros(total, dtype=np.int32)
    cdef int32_t[::1] cnt_eta = cnt_eta_a
    cdef int32_t[::1] cnt_star = cnt_star_a
    cdef long n_eta = 0, n_star = 0
    cdef long c
    cdef int sysno
    cdef double dens
    for sysno in range(2):
        dens = float(rho) if sysno == 0 else float(rho_star)
        for s in range(total):
            if not inside_halo[s]:
                continue
            st = derive1(cseed)
            st = dstep(st, TAG_INIT); st = dstep(st, crep); st = dstep(st, <uint64_t>sysno)
            st = dstep(st, keys[s])
            c = poisson(&st, dens)
            if sysno == 0:
                cnt_eta[s] = <int32_t>c
                n_eta += c
            else:
                cnt_star[s] = <int32_t>c
                n_star += c
    cdef long npart = n_eta + n_star

    pstate_a = np.empty(npart, dtype=np.uint64)
    pnext_a = np.empty(npart, dtype=np.float64)
    pos_a = np.empty(npart, dtype=np.int64)
    cdef uint64_t[::1] pstate = pstate_a
    cdef double[::1] pnext = pnext_a
    cdef int64_t[::1] pos = pos_a
    occ_eta_a = np.zeros(total, dtype=np.int32)
    occ_star_a = np.zeros(total, dtype=np.int32)
    cdef int32_t[::1] occ_eta = occ_eta_a
    cdef int32_t[::1] occ_star = occ_star_a

    cdef long pid = 0
    cdef long n
    for sysno in range(2):
        for s in range(total):
            if not inside_halo[s]:
                continue
            c = cnt_eta[s] if sysno == 0 else cnt_star[s]
            for n in range(1, c + 1):
                wst = derive1(cseed)
                wst = dstep(wst, TAG_WALK); wst = dstep(wst, crep); wst = dstep(wst, <uint64_t>sysno)
                wst = dstep(wst, keys[s]); wst = dstep(wst, <uint64_t>n)
                pnext[pid] = expo(&wst) / crate
                pstate[pid] = wst
                pos[pid] = s
                pid += 1
            if sysno == 0:
                occ_eta[s] = <int32_t>c
            else:
                occ_star[s] = <int32_t>c
    init_occ_eta = occ_eta_a.copy()
    init_occ_star = occ_star_a.copy()

    partner_a = np.full(npart, -1, dtype=np.int64)
    merged_a = np.zeros(npart, dtype=np.uint8)
    outside_a = np.zeros(max(n_eta, 1), dtype=np.uint8)
    frozen_a = np.zeros(npart, dtype=np.uint8)
    cdef int64_t[::1] partner = partner_a
    cdef uint8_t[::1] merged = merged_a
    cdef uint8_t[::1] was_outside = outside_a
    cdef uint8_t[::1] frozen = frozen_a

    ht_a = np.empty(npart + 1, dtype=np.float64)
    hp_a = np.empty(npart + 1, dtype=np.int64)
    cdef double[::1] ht_v = ht_a
    cdef int64_t[::1] hp_v = hp_a
    cdef double* ht = &ht_v[0]
    cdef int64_t* hp = &hp_v[0]
    cdef long hn = 0
    for pid in range(npart):
        if pnext[pid] <= ct_end:
            hpush(ht, hp, &hn, pnext[pid], pid)

    s_times_a = np.ascontiguousarray(s_times, dtype=np.float64)
    cdef double[::1] sv = s_times_a
    cdef long nsk = sv.shape[0]
    merged_counts_a = np.zeros(nsk, dtype=np.int64)
    bad_B_a = np.zeros(nsk, dtype=np.uint8)
    cdef int64_t[::1] merged_counts = merged_counts_a
    cdef uint8_t[::1] bad_B = bad_B_a

    # scratch for the rematch sort
    scratch = [np.empty(npart + 1, dtype=np.int64) for _ in range(8)]
    cdef int64_t[::1] kb = scratch[0]
    cdef int64_t[::1] ks = scratch[1]
    cdef int64_t[::1] kp = scratch[2]
    cdef int64_t[::1] tb = scratch[3]
    cdef int64_t[::1] ts = scratch[4]
    cdef int64_t[::1] tp = scratch[5]
    cdef int64_t[::1] ebuf = scratch[6]
    cdef int64_t[::1] gbuf = scratch[7]

    cdef long merged_pairs = 0
    cdef bint independent = False
    cdef bint inv
    cdef long ki = 0
    cdef long n_events = 0
    cdef double t, nt
    cdef long a, b, q
    cdef int jdir, axis

    while True:
        if hn > 0:
            t = ht[0]
        else:
            t = INFINITY
        while ki < nsk and sv[ki] < t:
            if independent:
                bad_B[ki] = 0
            else:
                inv = rematch_c(ki, npart, n_eta, d,
                                &pos[0], &merged[0], &partner[0],
                                &occ_star[0], &inside_halo[0],
                                &lo_v[0], &ext_v[0], &strides_v[0],
                                &hlo_v[0], L,
                                &kb[0], &ks[0], &kp[0],
                                &tb[0], &ts[0], &tp[0],
                                &ebuf[0], &gbuf[0], &merged_pairs)
                bad_B[ki] = 1 if inv else 0
                if ki == 0 and inv:
                    independent = True
            merged_counts[ki] = merged_pairs
            for pid in range(n_eta):
                if not inside_halo[pos[pid]]:
                    was_outside[pid] = 1
            ki += 1
        if hn == 0:
            break
        pid = hp[0]
        hpop(ht, hp, &hn)
        if merged[pid] and pid >= n_eta:
            continue
        jdir = jump_dir(&pstate[pid], &cdf_v[0])
        axis = jdir >> 1
        a = pos[pid]
        ci = axis_coord(a, axis, &lo_v[0], &ext_v[0], &strides_v[0])
        if jdir & 1:
            ci -= 1
            b = a - strides_v[axis]
        else:
            ci += 1
            b = a + strides_v[axis]
        if ci < lo_v[axis] or ci > hi_v[axis]:
            frozen[pid] = 1
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
            merged[pid] = 1
            merged[q] = 1
            if pid < n_eta:
                occ_star[pos[q]] -= 1
            else:
                occ_star[b] -= 1
            merged_pairs += 1
        nt = t + expo(&pstate[pid]) / crate
        if nt <= ct_end:
            hpush(ht, hp, &hn, nt, pid)

    eff_star_a = occ_star_a.copy()
    cdef int32_t[::1] eff_star = eff_star_a
    for pid in range(n_eta):
        if merged[pid]:
            eff_star[pos[pid]] += 1

    cdef bint bad_A = False
    for pid in range(n_eta):
        if was_outside[pid]:
            ok = True
            for i in range(d):
                ci = axis_coord(pos[pid], i, &lo_v[0], &ext_v[0], &strides_v[0])
                if ci < tlo_a[i] or ci > thi_a[i]:
                    ok = False
                    break
            if ok:
                bad_A = True
                break

    cdef long fail_sites = 0
    tshape = [int(thi_a[i]) - int(tlo_a[i]) + 1 for i in range(d)]
    for idx in np.ndindex(*tshape):
        f = 0
        for i in range(d):
            f += (int(tlo_a[i]) + idx[i] - int(lo_a[i])) * int(strides_a[i])
        if occ_eta_a[f] > eff_star_a[f]:
            fail_sites += 1

    out = {
        "n_events": n_events,
        "n_eta": n_eta,
        "n_star": n_star,
        "merged_counts": merged_counts_a,
        "bad_B": bad_B_a.astype(bool),
        "bad_B0": bool(bad_B_a[0]) if nsk else False,
        "bad_A": bool(bad_A),
        "independent": bool(independent),
        "dominated": fail_sites == 0,
        "fail_sites": fail_sites,
        "n_frozen": int(frozen_a.sum()),
        "demerges": 0,
        "final_merged": merged_pairs,
    }
    if collect_occ:
        out["init_occ_eta"] = init_occ_eta
        out["init_occ_star"] = init_occ_star
        out["final_occ_eta"] = occ_eta_a
        out["final_occ_star_eff"] = eff_star_a
    return out
