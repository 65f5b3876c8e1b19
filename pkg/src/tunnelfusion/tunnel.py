"""Parametric tunnel geometry and kinematically consistent trajectories.

A tunnel is a chain of straight and circular-arc segments extruded into
two vertical walls. Feature boxes are bolted onto the walls by a seeded
draw. Trajectories ride the centerline exactly: position is the arc
length integral of the speed profile, heading is the path tangent, and
yaw rate is v times the local curvature, so the samples satisfy the
filter's motion model by construction.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .geometry import Pose2, wrap_angle
from .state import StateVector

# Feature boxes are cubes with this edge length (meters).
FEATURE_BOX_EDGE = 0.3

# Spacing of materialized centerline samples.
CENTERLINE_STEP = 0.1

# Tolerance for closed-loop closure checks.
CLOSURE_TOL = 1e-6


class InvalidMapError(ValueError):
    """Raised for inconsistent tunnel definitions."""


class InvalidPoseError(ValueError):
    """Raised when a query pose lies outside the tunnel."""


@dataclass(frozen=True, slots=True)
class StraightSegment:
    length: float

    def __post_init__(self) -> None:
        if not (self.length > 0.0 and math.isfinite(self.length)):
            raise InvalidMapError(f"straight length must be positive, got {self.length!r}")


@dataclass(frozen=True, slots=True)
class ArcSegment:
    """Circular arc; positive ``angle`` turns left, negative turns right."""

    radius: float
    angle: float

    def __post_init__(self) -> None:
        if not (self.radius > 0.0 and math.isfinite(self.radius)):
            raise InvalidMapError(f"arc radius must be positive, got {self.radius!r}")
        if not (self.angle != 0.0 and math.isfinite(self.angle)):
            raise InvalidMapError(f"arc angle must be nonzero, got {self.angle!r}")

    @property
    def length(self) -> float:
        return self.radius * abs(self.angle)


Segment = Union[StraightSegment, ArcSegment]


@dataclass(frozen=True, slots=True)
class CrossSection:
    """Wall placement: lateral half width and total wall height.

    Walls span z in [-wall_height/2, wall_height/2]; the sensor rides at
    z = 0.
    """

    half_width: float
    wall_height: float

    def __post_init__(self) -> None:
        if not (self.half_width > 0.0 and math.isfinite(self.half_width)):
            raise InvalidMapError("half_width must be positive")
        if not (self.wall_height > 0.0 and math.isfinite(self.wall_height)):
            raise InvalidMapError("wall_height must be positive")


@dataclass(frozen=True, eq=False)
class FeatureBox:
    """Oriented box: center, rotation (columns are box axes), half extents."""

    center: np.ndarray
    axes: np.ndarray
    half_extents: np.ndarray


class CenterlinePath:
    """Closed-form pose lookup along the segment chain."""

    def __init__(self, segments: Sequence[Segment]) -> None:
        if not segments:
            raise InvalidMapError("need at least one segment")
        self.segments = tuple(segments)
        self._start_poses: list[Pose2] = []
        self._cumulative = [0.0]
        pose = Pose2.identity()
        for seg in self.segments:
            self._start_poses.append(pose)
            pose = _advance_pose(pose, seg, seg.length)
            self._cumulative.append(self._cumulative[-1] + seg.length)
        self.end_pose = pose
        self.total_length = self._cumulative[-1]

    @property
    def start_poses(self) -> tuple[Pose2, ...]:
        """Pose at the entry of each segment, in chain order."""
        return tuple(self._start_poses)

    def pose_at(self, s: float) -> tuple[Pose2, float]:
        """Pose and curvature at arc length ``s`` (in [0, total_length])."""
        if not 0.0 <= s <= self.total_length + 1e-9:
            raise ValueError(f"arc length {s} outside [0, {self.total_length}]")
        s = min(s, self.total_length)
        i = bisect.bisect_right(self._cumulative, s) - 1
        i = min(i, len(self.segments) - 1)
        seg = self.segments[i]
        local = s - self._cumulative[i]
        pose = _advance_pose(self._start_poses[i], seg, local)
        kappa = 0.0 if isinstance(seg, StraightSegment) else math.copysign(1.0, seg.angle) / seg.radius
        return pose, kappa


def _advance_pose(start: Pose2, seg: Segment, distance: float) -> Pose2:
    if isinstance(seg, StraightSegment):
        return Pose2(
            start.x + distance * math.cos(start.psi),
            start.y + distance * math.sin(start.psi),
            start.psi,
        )
    sign = math.copysign(1.0, seg.angle)
    beta = sign * distance / seg.radius
    # Turn center sits one radius to the left (or right) of the heading.
    cx = start.x + seg.radius * math.cos(start.psi + sign * math.pi / 2.0)
    cy = start.y + seg.radius * math.sin(start.psi + sign * math.pi / 2.0)
    a0 = math.atan2(start.y - cy, start.x - cx)
    return Pose2(
        cx + seg.radius * math.cos(a0 + beta),
        cy + seg.radius * math.sin(a0 + beta),
        wrap_angle(start.psi + beta),
    )


@dataclass(frozen=True, eq=False)
class TunnelMap:
    """Materialized tunnel: path, sampled centerline, walls and features."""

    path: CenterlinePath
    cross_section: CrossSection
    feature_density: float
    closed_loop: bool
    centerline: np.ndarray  # (M, 4): x, y, psi, s
    features: tuple[FeatureBox, ...]

    @property
    def total_length(self) -> float:
        return self.path.total_length

    def distance_to_centerline(self, x: float, y: float) -> float:
        d = np.hypot(self.centerline[:, 0] - x, self.centerline[:, 1] - y)
        return float(d.min())


def build_map(
    segments: Sequence[Segment],
    cross_section: CrossSection,
    feature_density: float,
    closed_loop: bool,
    seed: int | np.random.SeedSequence = 0,
) -> TunnelMap:
    """Assemble a tunnel, validating closure and placing feature boxes.

    Features are cubes seated on the walls, protruding half an edge into
    the tunnel, oriented to the local wall frame. Their count is
    round(density * length) and their placement comes from the seed
    alone.
    """
    if not (feature_density >= 0.0 and math.isfinite(feature_density)):
        raise InvalidMapError("feature_density must be >= 0")
    path = CenterlinePath(segments)
    if closed_loop:
        end = path.end_pose
        gap = math.hypot(end.x, end.y)
        # Heading must return to 0 modulo a full turn.
        heading_gap = abs(wrap_angle(end.psi))
        if gap > CLOSURE_TOL or heading_gap > CLOSURE_TOL:
            raise InvalidMapError(
                f"closed_loop declared but the chain ends at ({end.x:.6f}, {end.y:.6f}, "
                f"psi={end.psi:.6f}); position gap {gap:.3e}, heading gap {heading_gap:.3e}"
            )
    n_samples = int(math.floor(path.total_length / CENTERLINE_STEP)) + 1
    svals = np.minimum(np.arange(n_samples) * CENTERLINE_STEP, path.total_length)
    if svals[-1] < path.total_length - 1e-9:
        svals = np.append(svals, path.total_length)
    rows = np.empty((svals.shape[0], 4))
    for i, s in enumerate(svals):
        pose, _ = path.pose_at(float(s))
        rows[i] = (pose.x, pose.y, pose.psi, s)

    hw = cross_section.half_width
    hh = cross_section.wall_height / 2.0
    half = FEATURE_BOX_EDGE / 2.0
    rng = np.random.default_rng(seed)
    count = int(round(feature_density * path.total_length))
    features = []
    for _ in range(count):
        s = rng.uniform(0.0, path.total_length)
        side = 1.0 if rng.uniform() < 0.5 else -1.0
        z = rng.uniform(-hh + half, hh - half) if hh > half else 0.0
        pose, _ = path.pose_at(s)
        tangent = np.array([math.cos(pose.psi), math.sin(pose.psi), 0.0])
        left = np.array([-math.sin(pose.psi), math.cos(pose.psi), 0.0])
        center = np.array([pose.x, pose.y, z]) + side * hw * left
        inward = -side * left
        axes = np.column_stack([tangent, inward, np.array([0.0, 0.0, 1.0])])
        features.append(FeatureBox(center=center, axes=axes, half_extents=np.full(3, half)))
    return TunnelMap(
        path=path,
        cross_section=cross_section,
        feature_density=feature_density,
        closed_loop=closed_loop,
        centerline=rows,
        features=tuple(features),
    )


@dataclass(frozen=True, slots=True)
class GroundTruthSample:
    state: StateVector
    timestamp: float


@dataclass(frozen=True, slots=True)
class SpeedTarget:
    """From ``start_time`` on, ramp toward ``speed`` at the accel limit."""

    start_time: float
    speed: float


class Trajectory:
    """Closed-form speed/arc-length profile laid along a tunnel centerline."""

    def __init__(
        self,
        tmap: TunnelMap,
        speed_targets: Sequence[SpeedTarget],
        accel_limit: float,
        duration: float,
    ) -> None:
        if not (accel_limit > 0.0 and math.isfinite(accel_limit)):
            raise ValueError("accel_limit must be positive")
        if not (duration > 0.0 and math.isfinite(duration)):
            raise ValueError("duration must be positive")
        targets = sorted(speed_targets, key=lambda t: t.start_time)
        if not targets or targets[0].start_time != 0.0:
            raise ValueError("speed_targets must start at t=0")
        for t in targets:
            if t.speed < 0.0:
                raise ValueError("target speeds must be >= 0")
        self.tmap = tmap
        self.duration = float(duration)
        # Breakpoints (t_i, v_i, a_i, s_i): on [t_i, t_next) speed is
        # v_i + a_i (t - t_i) and arc length integrates exactly.
        bp_t = [0.0]
        bp_v = [targets[0].speed]
        bp_a = [0.0]
        for tgt in targets[1:]:
            t0 = tgt.start_time
            if t0 >= duration:
                break
            v0 = self._speed_from(bp_t, bp_v, bp_a, t0)
            self._truncate(bp_t, bp_v, bp_a, t0, v0)
            if tgt.speed != v0:
                a = math.copysign(accel_limit, tgt.speed - v0)
                t_reach = t0 + (tgt.speed - v0) / a
                bp_t += [t0, t_reach]
                bp_v += [v0, tgt.speed]
                bp_a += [a, 0.0]
            else:
                bp_t.append(t0)
                bp_v.append(v0)
                bp_a.append(0.0)
        bp_s = [0.0]
        for i in range(1, len(bp_t)):
            tau = bp_t[i] - bp_t[i - 1]
            bp_s.append(bp_s[-1] + bp_v[i - 1] * tau + 0.5 * bp_a[i - 1] * tau * tau)
        self._bp_t = bp_t
        self._bp_v = bp_v
        self._bp_a = bp_a
        self._bp_s = bp_s
        end_s = self.arc_length_at(duration)
        if not tmap.closed_loop and end_s > tmap.total_length + 1e-9:
            raise ValueError(
                f"trajectory overruns the open tunnel: needs {end_s:.2f} m of "
                f"{tmap.total_length:.2f} m"
            )

    @staticmethod
    def _truncate(bp_t: list, bp_v: list, bp_a: list, t0: float, v0: float) -> None:
        while bp_t and bp_t[-1] >= t0:
            bp_t.pop()
            bp_v.pop()
            bp_a.pop()

    @staticmethod
    def _speed_from(bp_t: list, bp_v: list, bp_a: list, t: float) -> float:
        i = bisect.bisect_right(bp_t, t) - 1
        return bp_v[i] + bp_a[i] * (t - bp_t[i])

    def _segment_index(self, t: float) -> int:
        return max(0, bisect.bisect_right(self._bp_t, t) - 1)

    def speed_at(self, t: float) -> tuple[float, float]:
        """(speed, acceleration) at time t."""
        i = self._segment_index(t)
        return self._bp_v[i] + self._bp_a[i] * (t - self._bp_t[i]), self._bp_a[i]

    def arc_length_at(self, t: float) -> float:
        i = self._segment_index(t)
        tau = t - self._bp_t[i]
        return self._bp_s[i] + self._bp_v[i] * tau + 0.5 * self._bp_a[i] * tau * tau

    def state_at(self, t: float) -> StateVector:
        """Exact ground-truth state at time t."""
        if not 0.0 <= t <= self.duration + 1e-9:
            raise ValueError(f"t={t} outside [0, {self.duration}]")
        v, a = self.speed_at(t)
        s = self.arc_length_at(t)
        if self.tmap.closed_loop:
            s = math.fmod(s, self.tmap.total_length)
        pose, kappa = self.tmap.path.pose_at(s)
        return StateVector(
            x=pose.x,
            y=pose.y,
            v=v,
            v_dot=a,
            psi=pose.psi,
            psi_dot=v * kappa,
            psi_ddot=a * kappa,
        )

    def pose_at(self, t: float) -> Pose2:
        st = self.state_at(t)
        return Pose2(st.x, st.y, st.psi)

    def sample(self, sample_rate: float) -> list[GroundTruthSample]:
        """Ground-truth samples at ``sample_rate`` over [0, duration]."""
        if not (sample_rate > 0.0 and math.isfinite(sample_rate)):
            raise ValueError("sample_rate must be positive")
        n = int(math.floor(self.duration * sample_rate + 1e-9))
        out = []
        for k in range(n + 1):
            t = k / sample_rate
            out.append(GroundTruthSample(state=self.state_at(t), timestamp=t))
        return out


def generate_trajectory(
    tmap: TunnelMap,
    speed_targets: Sequence[SpeedTarget],
    accel_limit: float,
    sample_rate: float,
    duration: float,
) -> list[GroundTruthSample]:
    """Sampled ground truth along the tunnel; see :class:`Trajectory`."""
    return Trajectory(tmap, speed_targets, accel_limit, duration).sample(sample_rate)
