"""Infection dynamics on top of the engine's event stream.

Infection state is carried by particles: a site is either fully healthy or
fully infected, so the tracked representation stores the infected particle
ids, the set of infected sites, the genealogy of infection events, and the
front statistic (max first coordinate over infected sites).

The genealogical infected path (GIP) machinery reconstructs, for any infected
site at the horizon, one canonical witness path (earliest-infection-time
backward walk), encodes it as (k, n, (k_i), (j_i)) and can structurally
replay that encoding against the frozen event log.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import engine
from .engine import Configuration, ParticleId
from .lattice import JumpDistribution, Site


class LogCorruptionError(RuntimeError):
    """Event stream references unknown particles or inconsistent positions."""


class NoGipError(LookupError):
    """Requested target site holds no infected particle at the horizon."""


@dataclass(frozen=True)
class InfectionEvent:
    """One infection moment: `jumper` is the particle whose jump caused it.

    infector is None only for the time-zero seeding event; otherwise it was
    infected strictly earlier (ties among co-located infected particles are
    broken by lowest particle id).
    """

    time: float
    site: Site
    infector: Optional[int]
    jumper: Optional[int]
    newly: Tuple[int, ...]


class InfectionState:
    """Mutable infected-set state driven by jump events (the propagate rule).

    Particles are integer ids into the enclosing run's particle table;
    positions are site tuples.  `site_members` is the full occupancy map, so
    the site-purity invariant (a site is all-healthy or all-infected) is
    directly checkable.
    """

    def __init__(self, positions: Dict[int, Site], seed_site: Site,
                 front_dt: float = 0.0, t_end: float = math.inf):
        self.pos: Dict[int, Site] = dict(positions)
        self.site_members: Dict[Site, set] = defaultdict(set)
        for pid, x in self.pos.items():
            self.site_members[x].add(pid)
        self.seed_site = tuple(seed_site)
        self.infected: set = set()
        self.inf_time: Dict[int, float] = {}
        self.event_of: Dict[int, int] = {}
        self.genealogy: List[InfectionEvent] = []
        self.infected_sites: Dict[Site, int] = {}
        self.time = 0.0
        self.range_sup: Optional[int] = None
        # front bookkeeping per first coordinate
        self._col: Dict[int, int] = defaultdict(int)
        self._front: Optional[int] = None
        self.sup_front: Optional[int] = None
        self.front_dt = front_dt
        self.t_end = t_end
        self._next_grid = 0
        self.front_samples: List[Tuple[float, Optional[int]]] = []

    # -- front -------------------------------------------------------------

    def front(self) -> Optional[int]:
        """r_t: max first coordinate over currently infected sites."""
        return self._front

    def _site_on(self, x: Site):
        self.infected_sites[x] = len(self.site_members[x])
        c = x[0]
        self._col[c] += 1
        if self._front is None or c > self._front:
            self._front = c
            if self.sup_front is None or c > self.sup_front:
                self.sup_front = c
        dist = max(abs(a - b) for a, b in zip(x, self.seed_site))
        if self.range_sup is None or dist > self.range_sup:
            self.range_sup = dist

    def _site_off(self, x: Site):
        del self.infected_sites[x]
        c = x[0]
        self._col[c] -= 1
        if self._col[c] == 0 and c == self._front:
            # tracked runs are small; recompute the max directly
            self._front = max((x0[0] for x0 in self.infected_sites), default=None)

    def _flush_grid(self, up_to: float):
        if self.front_dt <= 0:
            return
        while True:
            g = self._next_grid * self.front_dt
            if g >= up_to or g > self.t_end + 1e-12:
                return
            self.front_samples.append((g, self._front))
            self._next_grid += 1

    # -- dynamics ----------------------------------------------------------

    def seed(self, time: float = 0.0):
        """Infect every particle at the seed site (the ones at x, plus the
        added origin walker when present)."""
        self._flush_grid(time)
        cohort = tuple(sorted(self.site_members.get(self.seed_site, ())))
        ev = InfectionEvent(time=time, site=self.seed_site, infector=None,
                            jumper=None, newly=cohort)
        gi = len(self.genealogy)
        self.genealogy.append(ev)
        for pid in cohort:
            self.infected.add(pid)
            self.inf_time[pid] = time
            self.event_of[pid] = gi
        if cohort:
            self._site_on(self.seed_site)
        self.time = time
        return ev

    def apply(self, t: float, pid: int, src: Site, dst: Site):
        """Advance by one jump event; spreads infection on contact."""
        if pid not in self.pos:
            raise LogCorruptionError(f"unknown particle {pid} in event at t={t}")
        if self.pos[pid] != tuple(src):
            raise LogCorruptionError(
                f"event source {src} does not match particle {pid} at {self.pos[pid]}")
        if t < self.time:
            raise LogCorruptionError("events out of order")
        self._flush_grid(t)
        src = tuple(src)
        dst = tuple(dst)
        self.site_members[src].discard(pid)
        was_inf = pid in self.infected
        if was_inf and src in self.infected_sites:
            if self.site_members[src]:
                self.infected_sites[src] = len(self.site_members[src])
            else:
                self._site_off(src)
        if not self.site_members[src]:
            del self.site_members[src]
        self.pos[pid] = dst
        self.site_members[dst].add(pid)
        self.time = t
        if was_inf:
            if dst not in self.infected_sites:
                self._site_on(dst)
            else:
                self.infected_sites[dst] = len(self.site_members[dst])
            healthy = sorted(q for q in self.site_members[dst] if q not in self.infected)
            if healthy:
                gi = len(self.genealogy)
                self.genealogy.append(InfectionEvent(
                    time=t, site=dst, infector=pid, jumper=pid, newly=tuple(healthy)))
                for q in healthy:
                    self.infected.add(q)
                    self.inf_time[q] = t
                    self.event_of[q] = gi
        else:
            others = [q for q in self.site_members[dst] if q in self.infected]
            if others:
                infector = min(others)
                gi = len(self.genealogy)
                self.genealogy.append(InfectionEvent(
                    time=t, site=dst, infector=infector, jumper=pid, newly=(pid,)))
                self.infected.add(pid)
                self.inf_time[pid] = t
                self.event_of[pid] = gi
                self.infected_sites[dst] = len(self.site_members[dst])

    def finish(self, t_end: float):
        self._flush_grid(t_end + 1e-12)
        self.time = t_end

    # -- checks ------------------------------------------------------------

    def site_purity_ok(self) -> bool:
        """xi_t(x) in {0, eta_t(x)} for every occupied site."""
        for x, members in self.site_members.items():
            infected_here = sum(1 for q in members if q in self.infected)
            if infected_here not in (0, len(members)):
                return False
            if (infected_here > 0) != (x in self.infected_sites):
                return False
        return True


def seed_infection(cfg: Configuration, front_dt: float = 0.0,
                   seed_site: Optional[Site] = None, t_end: float = math.inf) -> InfectionState:
    """Infect the origin cohort of a time-zero configuration."""
    if cfg.time != 0.0:
        raise ValueError("seed_infection expects a configuration at time 0")
    d = len(cfg.window_lo)
    site = tuple(seed_site) if seed_site is not None else (0,) * d
    positions = {pid: cfg.position(pid) for pid in range(cfg.n_particles)}
    state = InfectionState(positions, site, front_dt=front_dt, t_end=t_end)
    state.seed(0.0)
    return state


def propagate(state: InfectionState, t: float, pid: int, src: Site, dst: Site) -> InfectionState:
    """Functional wrapper over InfectionState.apply."""
    state.apply(t, pid, src, dst)
    return state


# ---------------------------------------------------------------------------
# tracked end-to-end run


@dataclass
class TrackedRun:
    """A full tracked infection run: event log, final state, start positions.

    Built by run_tracked from an engine configuration, or directly from a
    scripted fixture (origins + hand-written events) via fixture_run.
    """

    state: InfectionState
    events: List[tuple]  # (t, pid, src, dst) site tuples
    t_end: float
    origins: Dict[int, Site]
    d: int
    cfg: Optional[Configuration] = None
    _pid_events: Optional[Dict[int, List[int]]] = field(default=None, repr=False)

    @property
    def n_particles(self) -> int:
        return len(self.origins)

    def pid_events(self) -> Dict[int, List[int]]:
        if self._pid_events is None:
            m: Dict[int, List[int]] = defaultdict(list)
            for i, ev in enumerate(self.events):
                m[ev[1]].append(i)
            self._pid_events = m
        return self._pid_events

    def position_at(self, pid: int, t: float) -> Site:
        """Position of pid just after all events with time <= t."""
        x = self.origins[pid]
        for i in self.pid_events().get(pid, ()):
            ev = self.events[i]
            if ev[0] > t:
                break
            x = ev[3]
        return x

    def particle_id(self, pid: int) -> ParticleId:
        if self.cfg is None:
            return ParticleId(origin=self.origins[pid], index=pid + 1)
        return self.cfg.particle_id(pid)


def fixture_run(origins: Dict[int, Site], events: Sequence[tuple], t_end: float,
                seed_site: Site, seed_time: float = 0.0,
                front_dt: float = 0.0) -> TrackedRun:
    """Scripted-event run for hand-computable tests; events are
    (t, pid, src, dst) tuples applied in order after seeding."""
    d = len(seed_site)
    state = InfectionState(dict(origins), tuple(seed_site), front_dt=front_dt,
                           t_end=t_end)
    pending = True
    evs = [tuple(e) for e in events]
    for (t, pid, src, dst) in evs:
        if pending and t > seed_time:
            state.seed(seed_time)
            pending = False
        state.apply(t, pid, tuple(src), tuple(dst))
    if pending:
        state.seed(seed_time)
    state.finish(t_end)
    return TrackedRun(state=state, events=evs, t_end=t_end,
                      origins=dict(origins), d=d)


def run_tracked(p: JumpDistribution, rho: float, t_end: float, half_width: int,
                seed: int, replica: int = 0, extra: bool = True,
                seed_site: Optional[Site] = None, infect_time: float = 0.0,
                front_dt: float = 1.0, rate: float = 1.0, init_occ=None) -> TrackedRun:
    """Evolve a tracked configuration to t_end with infection layered on the
    event stream.  Small-scale runs only; the counts-mode kernels cover the
    replica farms."""
    d = p.d
    site = tuple(seed_site) if seed_site is not None else (0,) * d
    cfg = engine.init_poisson(
        p, rho, [-half_width] * d, [half_width] * d, seed=seed, replica=replica,
        extra_at=site if extra else None, init_occ=init_occ, rate=rate)
    positions = {pid: cfg.position(pid) for pid in range(cfg.n_particles)}
    state = InfectionState(positions, site, front_dt=front_dt, t_end=t_end)
    events: List[tuple] = []
    pending_seed = [True]

    w = cfg.walks

    def sink(t, pid, a, b):
        if pending_seed[0] and t > infect_time:
            state.seed(infect_time)
            pending_seed[0] = False
        src = w.unflatten(a)
        dst = w.unflatten(b)
        events.append((t, pid, src, dst))
        state.apply(t, pid, src, dst)

    w.evolve(t_end, sink)
    if pending_seed[0]:
        state.seed(infect_time)
    state.finish(t_end)
    origins = {pid: w.unflatten(w.porigin[pid]) for pid in range(w.npart)}
    return TrackedRun(state=state, events=events, t_end=t_end,
                      origins=origins, d=p.d, cfg=cfg)


def front(state: InfectionState) -> Optional[int]:
    """r_t of a state; None when nothing is infected."""
    return state.front()


def infected_range(run: TrackedRun) -> Optional[int]:
    """max ||x - seed||_inf over sites ever visited by the infection."""
    return run.state.range_sup


# ---------------------------------------------------------------------------
# genealogical infected paths


@dataclass
class GipPath:
    """Canonical witness path to one infected (x, T).

    particles: followed ids X_1..X_m; times: handoff times t_1..t_{m-1}
    (t_0 = seed time); segments[i]: the jumps of X_{i+1} while followed.
    """

    particles: Tuple[int, ...]
    handoff_times: Tuple[float, ...]
    seed_time: float
    t_end: float
    segments: Tuple[Tuple[tuple, ...], ...]
    endpoint: Site

    @property
    def total_jumps(self) -> int:
        return sum(len(s) for s in self.segments)


@dataclass(frozen=True)
class GipEncoding:
    """(k, n, (k_i), (j_i)) identification of a GIP."""

    k: int
    n: int
    jumps_per_particle: Tuple[int, ...]
    transitions: Tuple[int, ...]

    def check_invariants(self):
        if sum(self.jumps_per_particle) != self.k:
            raise ValueError("sum k_i != k")
        if len(self.jumps_per_particle) != self.n:
            raise ValueError("jump vector length != n")
        if len(self.transitions) != max(self.n - 1, 0):
            raise ValueError("transition vector length != n-1")
        for ki, ji in zip(self.jumps_per_particle[:-1], self.transitions):
            if ji == 0:
                raise ValueError("transitions must be nonzero")
            if ki == 0 and ji > 0:
                raise ValueError("k_i = 0 requires j_i < 0")


def reconstruct_gip(run: TrackedRun, target: Site, t_end: Optional[float] = None) -> GipPath:
    """Walk the genealogy backward from the earliest-infected particle at the
    target site, then assemble the followed trajectory forward."""
    st = run.state
    t_end = run.t_end if t_end is None else t_end
    target = tuple(target)
    members = st.site_members.get(target, ())
    infected_here = sorted(q for q in members if q in st.infected)
    if not infected_here:
        raise NoGipError(f"no infected particle at {target}")
    chosen = min(infected_here, key=lambda q: (st.inf_time[q], q))
    chain = [chosen]
    times: List[float] = []
    cur = chosen
    while True:
        ev = st.genealogy[st.event_of[cur]]
        if ev.infector is None:
            break
        times.insert(0, ev.time)
        cur = ev.infector
        chain.insert(0, cur)
    seed_time = st.genealogy[st.event_of[chain[0]]].time
    bounds = [seed_time] + times + [t_end]
    segments = []
    for idx, pid in enumerate(chain):
        lo, hi = bounds[idx], bounds[idx + 1]
        seg = []
        for i in run.pid_events().get(pid, ()):
            ev = run.events[i]
            if lo < ev[0] <= hi:
                seg.append(ev)
            elif ev[0] > hi:
                break
        segments.append(tuple(seg))
    path = GipPath(particles=tuple(chain), handoff_times=tuple(times),
                   seed_time=seed_time, t_end=t_end, segments=tuple(segments),
                   endpoint=target)
    _check_path(run, path)
    return path


def _check_path(run: TrackedRun, path: GipPath):
    """GipPath invariants: starts at the seed site, follows handoffs at
    matching sites, ends at the endpoint."""
    st = run.state
    x = st.seed_site
    bounds = [path.seed_time] + list(path.handoff_times) + [path.t_end]
    for idx, pid in enumerate(path.particles):
        start = run.position_at(pid, bounds[idx])
        if start != x:
            raise LogCorruptionError(
                f"path discontinuity: X_{idx+1} at {start}, expected {x}")
        for ev in path.segments[idx]:
            if ev[2] != x:
                raise LogCorruptionError("segment jump leaves the wrong site")
            x = ev[3]
    if x != path.endpoint:
        raise LogCorruptionError(f"path ends at {x}, not {path.endpoint}")


def encode_gip(run: TrackedRun, path: GipPath) -> GipEncoding:
    """Encode a path as (k, n, (k_i), (j_i)).

    j_i > 0: X_{i+1} is the j_i-th healthy particle (id order) at the site
    X_i lands on with its last followed jump.  j_i < 0: after X_i's last
    followed jump, X_{i+1} is the |j_i|-th healthy particle to jump onto
    X_i's site.
    """
    st = run.state
    kvec = tuple(len(s) for s in path.segments)
    trans: List[int] = []
    bounds = [path.seed_time] + list(path.handoff_times)
    for i in range(len(path.particles) - 1):
        nxt = path.particles[i + 1]
        ev = st.genealogy[st.event_of[nxt]]
        if ev.jumper == path.particles[i]:
            # case a: the follower was among the healthy cohort at the landing
            j = ev.newly.index(nxt) + 1
        else:
            # case b: rank among healthy arrivals since X_i's last followed jump
            seg = path.segments[i]
            window_start = seg[-1][0] if seg else bounds[i]
            site = ev.site
            count = 0
            for evt in run.events:
                if evt[0] > ev.time:
                    break
                if evt[0] > window_start and evt[3] == site:
                    q = evt[1]
                    if st.inf_time.get(q, math.inf) >= evt[0]:
                        count += 1
            j = -count
        trans.append(j)
    enc = GipEncoding(k=sum(kvec), n=len(path.particles),
                      jumps_per_particle=kvec, transitions=tuple(trans))
    enc.check_invariants()
    return enc


def replay_gip(run: TrackedRun, enc: GipEncoding, x1: int,
               seed_time: float = 0.0) -> GipPath:
    """Rebuild the path from the encoding and the event log alone.

    Follows X_1 = x1 through k_1 jumps, applies each transition rule against
    the log (health statuses re-derived from infection times), and returns
    the decoded path; raises if the encoding does not replay.
    """
    st = run.state
    cur = x1
    cur_time = seed_time
    particles = [cur]
    handoffs: List[float] = []
    segments: List[Tuple[tuple, ...]] = []
    for i in range(enc.n):
        ki = enc.jumps_per_particle[i]
        evs = [run.events[j] for j in run.pid_events().get(cur, ())
               if run.events[j][0] > cur_time]
        if len(evs) < ki:
            raise LogCorruptionError(f"particle {cur} lacks {ki} jumps in the log")
        seg = tuple(evs[:ki])
        segments.append(seg)
        if i == enc.n - 1:
            if len(evs) != ki:
                raise LogCorruptionError(
                    "final particle's jump count disagrees with the encoding")
            break
        j = enc.transitions[i]
        if j > 0:
            if ki == 0:
                raise LogCorruptionError("positive transition needs a landing jump")
            t_land = seg[-1][0]
            site = seg[-1][3]
            occupants = [q for q in st.pos
                         if q != cur and run.position_at(q, t_land - 1e-15) == site]
            healthy = sorted(q for q in occupants
                             if st.inf_time.get(q, math.inf) >= t_land)
            if j > len(healthy):
                raise LogCorruptionError("transition rank exceeds healthy cohort")
            nxt = healthy[j - 1]
            handoff = t_land
        else:
            window_start = seg[-1][0] if seg else cur_time
            site = seg[-1][3] if seg else run.position_at(cur, cur_time)
            arrivals = []
            for evt in run.events:
                if evt[0] <= window_start:
                    continue
                if evt[1] == cur:
                    break  # X_i jumped again: no further arrivals count
                if evt[3] == site and st.inf_time.get(evt[1], math.inf) >= evt[0]:
                    arrivals.append(evt)
                    if len(arrivals) == -j:
                        break
            if len(arrivals) < -j:
                raise LogCorruptionError("not enough healthy arrivals in the log")
            nxt = arrivals[(-j) - 1][1]
            handoff = arrivals[(-j) - 1][0]
        particles.append(nxt)
        handoffs.append(handoff)
        cur = nxt
        cur_time = handoff
    endpoint = run.position_at(particles[-1], run.t_end)
    return GipPath(particles=tuple(particles), handoff_times=tuple(handoffs),
                   seed_time=seed_time, t_end=run.t_end,
                   segments=tuple(segments), endpoint=endpoint)


def dump_genealogy_csv(path, run: TrackedRun) -> None:
    """Genealogy dump: time, site coordinates, infecting particle id (-1 for
    the seeding event), number of newly infected particles."""
    d = run.d
    cols = ["time"] + [f"site_{i+1}" for i in range(d)] + ["infector_id", "new_count"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for ev in run.state.genealogy:
            row = [f"{ev.time:.9f}"] + [str(c) for c in ev.site]
            row += [str(-1 if ev.infector is None else ev.infector), str(len(ev.newly))]
            fh.write(",".join(row) + "\n")


def dump_front_trace_csv(path, traces: Sequence[Sequence[Tuple[float, Optional[int]]]]) -> None:
    """FrontTrace CSV: replica, t, r_t (empty r_t while nothing is infected)."""
    with open(path, "w") as fh:
        fh.write("replica,t,r_t\n")
        for rep, samples in enumerate(traces):
            for t, r in samples:
                fh.write(f"{rep},{t:.9g},{'' if r is None else r}\n")


def gip_targets(run: TrackedRun) -> List[Site]:
    """All sites with infected particles at the horizon."""
    return sorted(run.state.infected_sites)


def max_gip_jumps(run: TrackedRun) -> int:
    """Max total jump count over canonical GIPs to every infected (x, T)."""
    best = 0
    for x in gip_targets(run):
        path = reconstruct_gip(run, x)
        if path.total_jumps > best:
            best = path.total_jumps
    return best
