"""Reference generation standing in for the external racing planner.

Profiles are either explicit (duration, vx_ref, omega_ref) segments or a
track description (arc length + curvature) from which the speed reference
follows a lateral-acceleration cap.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EndOfRun(Exception):
    """Requested a reference beyond the profile duration."""


@dataclass(frozen=True)
class Segment:
    duration: float
    vx_ref: float
    omega_ref: float


@dataclass(frozen=True)
class Arc:
    length: float
    curvature: float  # 1/m, signed; 0 for straights


class ReferenceProfile:
    """Piecewise-constant references on half-open segments [t0, t1)."""

    def __init__(self, segments: list[Segment]):
        if not segments:
            raise ValueError("profile needs at least one segment")
        self.segments = list(segments)
        self._edges = np.cumsum([s.duration for s in self.segments])

    @property
    def duration(self) -> float:
        return float(self._edges[-1])

    def lookup(self, t: float) -> tuple[float, float, float]:
        if t < 0.0 or t >= self.duration:
            raise EndOfRun(f"t={t:.3f} outside [0, {self.duration:.3f})")
        idx = int(np.searchsorted(self._edges, t, side="right"))
        seg = self.segments[idx]
        return seg.vx_ref, 0.0, seg.omega_ref

    @staticmethod
    def from_track(arcs: list[Arc], vx_max: float,
                   a_lat_max: float) -> "ReferenceProfile":
        """Speed from the lateral-acceleration cap:
        vx = min(vx_max, sqrt(a_lat_max/|curvature|)), omega = curvature*vx."""
        segments = []
        for arc in arcs:
            if arc.length <= 0.0:
                raise ValueError("arc length must be > 0")
            kappa = arc.curvature
            if kappa == 0.0:
                vx = vx_max
            else:
                vx = min(vx_max, float(np.sqrt(a_lat_max / abs(kappa))))
            segments.append(Segment(arc.length / vx, vx, kappa * vx))
        return ReferenceProfile(segments)


def racing_reference(profile: ReferenceProfile, t: float):
    return profile.lookup(t)


def reference_window(profile: ReferenceProfile, t: float, hp: int,
                     dt: float) -> np.ndarray:
    """(hp+1, 3) reference rows starting at t; the tail repeats past the end."""
    refs = np.empty((hp + 1, 3))
    for i in range(hp + 1):
        ti = t + i * dt
        try:
            refs[i] = profile.lookup(ti)
        except EndOfRun:
            refs[i] = refs[i - 1] if i else profile.lookup(
                np.nextafter(profile.duration, 0.0))
    return refs


def default_racing_profile() -> ReferenceProfile:
    """Bundled two-phase profile: a low-speed warm-up followed by an
    aggressive phase near the top of the learned operating range."""
    warmup = [
        Segment(8.0, 1.0, 0.0),
        Segment(6.0, 1.2, 0.5),
        Segment(6.0, 1.2, -0.5),
        Segment(5.0, 1.5, 0.0),
        Segment(5.0, 1.4, 0.7),
        Segment(5.0, 1.4, -0.7),
        Segment(5.0, 1.6, 0.4),
        Segment(5.0, 1.6, -0.4),
    ]
    racing = [
        Segment(6.0, 2.2, 0.0),
        Segment(5.0, 2.0, 0.9),
        Segment(4.0, 2.0, -0.9),
        Segment(5.0, 2.4, 0.5),
        Segment(4.0, 1.8, 1.2),
        Segment(4.0, 1.8, -1.2),
        Segment(6.0, 2.5, 0.0),
        Segment(4.0, 2.0, 1.0),
        Segment(4.0, 2.0, -1.0),
        Segment(5.0, 2.3, 0.6),
        Segment(4.0, 1.7, 1.3),
        Segment(4.0, 1.7, -1.3),
        Segment(5.0, 2.5, 0.3),
        Segment(5.0, 2.1, -0.8),
        Segment(10.0, 2.4, 0.0),
    ]
    return ReferenceProfile(warmup + racing)
