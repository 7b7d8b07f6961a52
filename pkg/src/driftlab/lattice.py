"""Lattice geometry and the nearest-neighbor jump law.

Dimension d is a runtime parameter (1..4 supported).  Directions are indexed
+e1, -e1, +e2, -e2, ... throughout the package, and the cumulative table built
here is the one both simulation backends consume, so the fixed summation
order is part of the reproducibility contract.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .rng import Stream

MAX_DIM = 4
SUM_TOL = 1e-12

Site = Tuple[int, ...]


class LatticeError(ValueError):
    pass


@dataclass(frozen=True)
class JumpDistribution:
    """Nearest-neighbor step law p(+e_i) = prob_pos[i], p(-e_i) = prob_neg[i]."""

    prob_pos: Tuple[float, ...]
    prob_neg: Tuple[float, ...]

    def __post_init__(self):
        d = len(self.prob_pos)
        if d != len(self.prob_neg):
            raise LatticeError("prob_pos and prob_neg must have equal length")
        if not 1 <= d <= MAX_DIM:
            raise LatticeError(f"dimension must be in 1..{MAX_DIM}, got {d}")
        for v in (*self.prob_pos, *self.prob_neg):
            if not (0.0 < v < 1.0):
                raise LatticeError(f"jump probability {v} not strictly in (0,1)")
        total = sum(self.prob_pos) + sum(self.prob_neg)
        if abs(total - 1.0) > SUM_TOL:
            raise LatticeError(f"jump probabilities sum to {total!r}, not 1")

    @property
    def d(self) -> int:
        return len(self.prob_pos)

    @property
    def canonical(self) -> bool:
        """True iff p(e_i) <= p(-e_i) for all i and p(e_1) < p(-e_1)."""
        ok = all(p <= m for p, m in zip(self.prob_pos, self.prob_neg))
        return ok and self.prob_pos[0] < self.prob_neg[0]

    def cdf(self) -> np.ndarray:
        """Cumulative direction table, order (+e1, -e1, +e2, -e2, ...)."""
        out = np.empty(2 * self.d, dtype=np.float64)
        acc = 0.0
        for i in range(self.d):
            acc += self.prob_pos[i]
            out[2 * i] = acc
            acc += self.prob_neg[i]
            out[2 * i + 1] = acc
        out[-1] = 1.0  # guard against fp shortfall in the running sum
        return out


@dataclass(frozen=True)
class DriftVector:
    v: Tuple[float, ...]

    @property
    def d(self) -> int:
        return len(self.v)


@dataclass(frozen=True)
class SpaceTimeBox:
    """Axis-aligned box of sites (inclusive corners) times a time interval."""

    site_lo: Site
    site_hi: Site
    t_lo: float
    t_hi: float

    def __post_init__(self):
        if len(self.site_lo) != len(self.site_hi):
            raise LatticeError("corner dimensions differ")
        if any(a > b for a, b in zip(self.site_lo, self.site_hi)):
            raise LatticeError("site_lo must be <= site_hi coordinatewise")
        if self.t_lo > self.t_hi:
            raise LatticeError("t_lo must be <= t_hi")

    @property
    def d(self) -> int:
        return len(self.site_lo)

    def n_sites(self) -> int:
        n = 1
        for a, b in zip(self.site_lo, self.site_hi):
            n *= b - a + 1
        return n

    def contains_site(self, x: Sequence[int]) -> bool:
        return all(a <= c <= b for a, c, b in zip(self.site_lo, x, self.site_hi))


def displacement(j: int, d: int) -> Site:
    """Direction index -> lattice step, same convention as JumpDistribution.cdf."""
    axis, sign = j >> 1, 1 - 2 * (j & 1)
    return tuple(sign if i == axis else 0 for i in range(d))


def drift(p: JumpDistribution) -> DriftVector:
    """v_i = p(e_i) - p(-e_i), in lattice units per unit time at rate 1."""
    return DriftVector(tuple(a - b for a, b in zip(p.prob_pos, p.prob_neg)))


def sample_jump(p: JumpDistribution, rng: Stream) -> Site:
    """One step with law p; deterministic given the stream state."""
    return displacement(rng.jump_index(p.cdf()), p.d)


@dataclass(frozen=True)
class OrientationReport:
    """Outcome of validate(): whether/how the law can be put in canonical form."""

    canonical: bool
    zero_drift: bool
    drift: Tuple[float, ...]
    permutation: Tuple[int, ...] = ()
    reflect_axes: Tuple[int, ...] = ()
    note: str = ""


def validate(prob_pos, prob_neg) -> OrientationReport:
    """Check a raw jump law and report the transform to canonical orientation.

    Canonical orientation means v_1 < 0 and v_i <= 0 for all i, achievable by
    permuting coordinates and reflecting axes whenever some v_i != 0.
    Raises LatticeError for laws that are not valid probability vectors.
    """
    p = JumpDistribution(tuple(float(x) for x in prob_pos),
                         tuple(float(x) for x in prob_neg))
    v = drift(p).v
    reflect = tuple(i for i, vi in enumerate(v) if vi > 0)
    # After reflection all drifts are <= 0; move the strictest one to axis 1.
    vv = [-abs(x) if x != 0 else 0.0 for x in v]
    if all(x == 0.0 for x in vv):
        return OrientationReport(
            canonical=False, zero_drift=True, drift=v,
            note="zero drift: small/large density front regimes need v_1 != 0",
        )
    first = min(range(p.d), key=lambda i: vv[i])
    perm = tuple(range(p.d))
    if vv[first] >= 0.0 or first != 0:
        perm = (first, *(i for i in range(p.d) if i != first))
    if p.canonical:
        return OrientationReport(canonical=True, zero_drift=False, drift=v)
    return OrientationReport(
        canonical=False, zero_drift=False, drift=v,
        permutation=perm if perm != tuple(range(p.d)) else (),
        reflect_axes=reflect,
        note="apply reflect_axes then permutation to obtain v_1 < 0",
    )


def apply_orientation(prob_pos, prob_neg, report: OrientationReport):
    """Apply a validate() suggestion; returns new (prob_pos, prob_neg) lists."""
    pos = list(prob_pos)
    neg = list(prob_neg)
    for ax in report.reflect_axes:
        pos[ax], neg[ax] = neg[ax], pos[ax]
    if report.permutation:
        pos = [pos[i] for i in report.permutation]
        neg = [neg[i] for i in report.permutation]
    return pos, neg
