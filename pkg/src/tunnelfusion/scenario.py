"""Scenario configuration, simulation orchestration and stream file IO.

A scenario is a single JSON document describing the tunnel, the driven
trajectory, both sensor models, outage windows, filter tuning and a seed.
``run_scenario`` turns it into ground truth plus a time-sorted stream of
velocity / yaw-rate pseudo-measurements, rendering LiDAR scans and
registering consecutive pairs along the way.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .ekf import SOURCE_ORDER, OnlineFilter, ProcessNoiseParams, PseudoMeasurement, Sensor
from .geometry import Pose2, Transform3
from .lidar_sim import LidarModel, render_scan
from .pointcloud import PointCloud, write_ply
from .registration import (
    RegistrationFailedError,
    RegistrationParams,
    odometry_to_pseudo,
    register,
)
from .state import StateVector
from .thermal import ThermalOdomParams, init_thermal_state, thermal_quality, thermal_step
from .tunnel import (
    ArcSegment,
    CrossSection,
    GroundTruthSample,
    Segment,
    SpeedTarget,
    StraightSegment,
    Trajectory,
    TunnelMap,
    build_map,
)

_FLOAT_FMT = ".9g"
_MAX_SEED = 2**64 - 1

EVENTS_HEADER = "t,source,v_meas,psi_dot_meas,q00,q01,q11"
TRUTH_HEADER = "t,x,y,v,v_dot,psi,psi_dot,psi_ddot"


class ConfigError(ValueError):
    """Scenario document violates the schema; carries the offending field path."""


class DataError(ValueError):
    """A stream file is malformed or out of order."""


def _fmt(x: float) -> str:
    return format(float(x), _FLOAT_FMT)


# --------------------------------------------------------------------------
# Schema


class _Section:
    """Dict view that tracks consumed keys and rejects leftovers."""

    def __init__(self, raw: object, path: str) -> None:
        if not isinstance(raw, Mapping):
            raise ConfigError(f"{path or 'document'}: expected an object, got {type(raw).__name__}")
        self._raw = dict(raw)
        self._path = path

    def _at(self, key: str) -> str:
        return f"{self._path}.{key}" if self._path else key

    def take(self, key: str) -> object:
        if key not in self._raw:
            raise ConfigError(f"{self._at(key)}: missing required field")
        return self._raw.pop(key)

    def number(self, key: str, *, lo: float | None = None, hi: float | None = None) -> float:
        v = self.take(key)
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            raise ConfigError(f"{self._at(key)}: expected a finite number, got {v!r}")
        v = float(v)
        if lo is not None and v < lo:
            raise ConfigError(f"{self._at(key)}: must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ConfigError(f"{self._at(key)}: must be <= {hi}, got {v}")
        return v

    def integer(self, key: str, *, lo: int | None = None, hi: int | None = None) -> int:
        v = self.take(key)
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{self._at(key)}: expected an integer, got {v!r}")
        if lo is not None and v < lo:
            raise ConfigError(f"{self._at(key)}: must be >= {lo}, got {v}")
        if hi is not None and v > hi:
            raise ConfigError(f"{self._at(key)}: must be <= {hi}, got {v}")
        return v

    def string(self, key: str, *, choices: tuple[str, ...] | None = None) -> str:
        v = self.take(key)
        if not isinstance(v, str):
            raise ConfigError(f"{self._at(key)}: expected a string, got {v!r}")
        if choices is not None and v not in choices:
            raise ConfigError(f"{self._at(key)}: expected one of {choices}, got {v!r}")
        return v

    def boolean(self, key: str) -> bool:
        v = self.take(key)
        if not isinstance(v, bool):
            raise ConfigError(f"{self._at(key)}: expected a boolean, got {v!r}")
        return v

    def optional_number(self, key: str, *, lo: float | None = None) -> float | None:
        v = self.take(key)
        if v is None:
            return None
        self._raw[key] = v
        return self.number(key, lo=lo)

    def array(self, key: str) -> tuple[list, str]:
        v = self.take(key)
        if not isinstance(v, list):
            raise ConfigError(f"{self._at(key)}: expected an array, got {type(v).__name__}")
        return v, self._at(key)

    def section(self, key: str) -> "_Section":
        return _Section(self.take(key), self._at(key))

    def close(self) -> None:
        if self._raw:
            extra = ", ".join(sorted(map(str, self._raw)))
            where = self._path or "document"
            raise ConfigError(f"{where}: unknown key(s): {extra}")


@dataclass(frozen=True)
class MapConfig:
    segments: tuple[Segment, ...]
    half_width: float
    wall_height: float
    feature_density: float
    closed_loop: bool


@dataclass(frozen=True)
class TrajectoryConfig:
    speed_targets: tuple[SpeedTarget, ...]
    accel_limit: float
    duration_s: float
    truth_rate_hz: float


@dataclass(frozen=True)
class LidarConfig:
    rate_hz: float
    rays_horizontal: int
    rays_vertical: int
    vertical_fov_deg: float
    max_range: float
    range_noise_sigma: float
    base_noise_v: float
    base_noise_psi_dot: float
    voxel_size: float | None
    normal_neighbors: int
    planarity_threshold: float
    max_correspondence_dist: float
    max_iterations: int


@dataclass(frozen=True)
class ThermalConfig:
    frame_rate_hz: float
    keyframe_interval: int
    scale_bias_walk_sigma: float
    v_noise_sigma: float
    psi_dot_noise_sigma: float
    dropout_probability: float
    quality_degradation: float


@dataclass(frozen=True)
class OutageWindow:
    sensor: Sensor
    start_s: float
    end_s: float

    def contains(self, t: float) -> bool:
        return self.start_s <= t < self.end_s


@dataclass(frozen=True)
class FilterConfig:
    jerk_psd: float
    yaw_jerk_psd: float
    ts_max: float
    initial_cov_diag: tuple[float, ...]


@dataclass(frozen=True)
class ScenarioConfig:
    name: str
    seed: int
    map: MapConfig
    trajectory: TrajectoryConfig
    lidar: LidarConfig
    thermal: ThermalConfig
    outages: tuple[OutageWindow, ...]
    filter: FilterConfig

    def lidar_model(self, rays: tuple[int, int] | None = None) -> LidarModel:
        nh, nv = rays if rays is not None else (self.lidar.rays_horizontal, self.lidar.rays_vertical)
        return LidarModel(
            rays_horizontal=nh,
            rays_vertical=nv,
            vertical_fov=math.radians(self.lidar.vertical_fov_deg),
            max_range=self.lidar.max_range,
        )

    def registration_params(self) -> RegistrationParams:
        return RegistrationParams(
            voxel_size=self.lidar.voxel_size,
            normal_neighbors=self.lidar.normal_neighbors,
            planarity_threshold=self.lidar.planarity_threshold,
            max_correspondence_dist=self.lidar.max_correspondence_dist,
            max_iterations=self.lidar.max_iterations,
        )

    def thermal_params(self) -> ThermalOdomParams:
        t = self.thermal
        base = ThermalOdomParams(
            frame_rate=t.frame_rate_hz,
            keyframe_interval=t.keyframe_interval,
            scale_bias_walk_sigma=t.scale_bias_walk_sigma,
            v_noise_sigma=t.v_noise_sigma,
            psi_dot_noise_sigma=t.psi_dot_noise_sigma,
            dropout_probability=t.dropout_probability,
        )
        if t.quality_degradation > 0.0:
            return thermal_quality(t.quality_degradation, base)
        return base

    def process_params(self) -> ProcessNoiseParams:
        return ProcessNoiseParams(jerk_psd=self.filter.jerk_psd, yaw_jerk_psd=self.filter.yaw_jerk_psd)

    def initial_cov(self) -> np.ndarray:
        return np.diag(np.asarray(self.filter.initial_cov_diag, dtype=float))

    def build_tunnel_map(self) -> TunnelMap:
        return build_map(
            self.map.segments,
            CrossSection(half_width=self.map.half_width, wall_height=self.map.wall_height),
            self.map.feature_density,
            self.map.closed_loop,
            seed=np.random.SeedSequence([self.seed, 1]),
        )

    def build_trajectory(self, tmap: TunnelMap) -> Trajectory:
        return Trajectory(
            tmap,
            self.trajectory.speed_targets,
            self.trajectory.accel_limit,
            self.trajectory.duration_s,
        )

    def outage_contains(self, sensor: Sensor, t: float) -> bool:
        return any(w.sensor is sensor and w.contains(t) for w in self.outages)


def _parse_segments(items: list, path: str) -> tuple[Segment, ...]:
    if not items:
        raise ConfigError(f"{path}: needs at least one segment")
    segments: list[Segment] = []
    for i, raw in enumerate(items):
        sec = _Section(raw, f"{path}[{i}]")
        kind = sec.string("type", choices=("straight", "arc"))
        if kind == "straight":
            segments.append(StraightSegment(length=sec.number("length", lo=1e-9)))
        else:
            radius = sec.number("radius", lo=1e-9)
            angle_deg = sec.number("angle_deg")
            if angle_deg == 0.0:
                raise ConfigError(f"{path}[{i}].angle_deg: must be nonzero")
            segments.append(ArcSegment(radius=radius, angle=math.radians(angle_deg)))
        sec.close()
    return tuple(segments)


def parse_config(document: object) -> ScenarioConfig:
    """Validate a decoded JSON document; unknown keys anywhere are rejected."""
    root = _Section(document, "")
    name = root.string("name")
    seed_v = root.take("seed")
    if isinstance(seed_v, bool) or not isinstance(seed_v, int) or not 0 <= seed_v <= _MAX_SEED:
        raise ConfigError(f"seed: expected an unsigned 64-bit integer, got {seed_v!r}")

    msec = root.section("map")
    seg_items, seg_path = msec.array("segments")
    map_cfg = MapConfig(
        segments=_parse_segments(seg_items, seg_path),
        half_width=msec.number("half_width", lo=1e-9),
        wall_height=msec.number("wall_height", lo=1e-9),
        feature_density=msec.number("feature_density", lo=0.0),
        closed_loop=msec.boolean("closed_loop"),
    )
    msec.close()

    tsec = root.section("trajectory")
    target_items, target_path = tsec.array("speed_targets")
    targets = []
    for i, raw in enumerate(target_items):
        s = _Section(raw, f"{target_path}[{i}]")
        targets.append(SpeedTarget(start_time=s.number("start_s", lo=0.0), speed=s.number("speed", lo=0.0)))
        s.close()
    if not targets:
        raise ConfigError(f"{target_path}: needs at least one target")
    traj_cfg = TrajectoryConfig(
        speed_targets=tuple(targets),
        accel_limit=tsec.number("accel_limit", lo=1e-9),
        duration_s=tsec.number("duration_s", lo=1e-9),
        truth_rate_hz=tsec.number("truth_rate_hz", lo=1e-9),
    )
    tsec.close()

    ssec = root.section("sensors")
    lsec = ssec.section("lidar")
    lidar_cfg = LidarConfig(
        rate_hz=lsec.number("rate_hz", lo=1e-9),
        rays_horizontal=lsec.integer("rays_horizontal", lo=1),
        rays_vertical=lsec.integer("rays_vertical", lo=1),
        vertical_fov_deg=lsec.number("vertical_fov_deg", lo=0.0, hi=179.0),
        max_range=lsec.number("max_range", lo=1e-9),
        range_noise_sigma=lsec.number("range_noise_sigma", lo=0.0),
        base_noise_v=lsec.number("base_noise_v", lo=1e-12),
        base_noise_psi_dot=lsec.number("base_noise_psi_dot", lo=1e-12),
        voxel_size=lsec.optional_number("voxel_size", lo=1e-9),
        normal_neighbors=lsec.integer("normal_neighbors", lo=4),
        planarity_threshold=lsec.number("planarity_threshold", lo=0.0, hi=1.0),
        max_correspondence_dist=lsec.number("max_correspondence_dist", lo=1e-9),
        max_iterations=lsec.integer("max_iterations", lo=1),
    )
    lsec.close()
    thsec = ssec.section("thermal")
    thermal_cfg = ThermalConfig(
        frame_rate_hz=thsec.number("frame_rate_hz", lo=1e-9),
        keyframe_interval=thsec.integer("keyframe_interval", lo=1),
        scale_bias_walk_sigma=thsec.number("scale_bias_walk_sigma", lo=0.0),
        v_noise_sigma=thsec.number("v_noise_sigma", lo=0.0),
        psi_dot_noise_sigma=thsec.number("psi_dot_noise_sigma", lo=0.0),
        dropout_probability=thsec.number("dropout_probability", lo=0.0, hi=1.0),
        quality_degradation=thsec.number("quality_degradation", lo=0.0, hi=1.0),
    )
    thsec.close()
    ssec.close()

    outage_items, outage_path = root.array("outages")
    outages: list[OutageWindow] = []
    for i, raw in enumerate(outage_items):
        osec = _Section(raw, f"{outage_path}[{i}]")
        sensor = Sensor(osec.string("sensor", choices=("lidar", "thermal")))
        start = osec.number("start_s", lo=0.0)
        end = osec.number("end_s", lo=0.0)
        osec.close()
        if not start < end:
            raise ConfigError(f"{outage_path}[{i}]: start_s must be < end_s")
        outages.append(OutageWindow(sensor=sensor, start_s=start, end_s=end))
    for sensor in Sensor:
        mine = sorted((w for w in outages if w.sensor is sensor), key=lambda w: w.start_s)
        for a, b in zip(mine, mine[1:]):
            if b.start_s < a.end_s:
                raise ConfigError(
                    f"outages: windows [{a.start_s}, {a.end_s}) and [{b.start_s}, {b.end_s}) "
                    f"overlap for sensor {sensor.value}"
                )

    fsec = root.section("filter")
    diag_items, diag_path = fsec.array("initial_cov_diag")
    if len(diag_items) != 7:
        raise ConfigError(f"{diag_path}: expected 7 entries, got {len(diag_items)}")
    diag = []
    for i, v in enumerate(diag_items):
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not (math.isfinite(v) and v > 0):
            raise ConfigError(f"{diag_path}[{i}]: expected a positive number, got {v!r}")
        diag.append(float(v))
    filter_cfg = FilterConfig(
        jerk_psd=fsec.number("jerk_psd", lo=1e-12),
        yaw_jerk_psd=fsec.number("yaw_jerk_psd", lo=1e-12),
        ts_max=fsec.number("ts_max", lo=1e-6),
        initial_cov_diag=tuple(diag),
    )
    fsec.close()

    root.close()
    return ScenarioConfig(
        name=name,
        seed=seed_v,
        map=map_cfg,
        trajectory=traj_cfg,
        lidar=lidar_cfg,
        thermal=thermal_cfg,
        outages=tuple(outages),
        filter=filter_cfg,
    )


def load_config(path: str | Path) -> ScenarioConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from None
    return parse_config(document)


# --------------------------------------------------------------------------
# Simulation


@dataclass(frozen=True, slots=True)
class RegistrationRecord:
    """Per scan-pair registration diagnostics."""

    timestamp: float
    iterations: int
    final_cost: float
    alpha: float
    correspondence_count: int
    degenerate: bool


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    tmap: TunnelMap
    trajectory: Trajectory
    truth: list[GroundTruthSample]
    events: list[PseudoMeasurement]
    registrations: list[RegistrationRecord] = field(default_factory=list)
    scans: dict[int, PointCloud] | None = None


def _frame_count(duration: float, rate: float) -> int:
    """Frames at k/rate for k = 0..n-1 with k/rate < duration."""
    return int(math.floor(duration * rate - 1e-9)) + 1


def run_scenario(
    config: ScenarioConfig,
    rays: tuple[int, int] | None = None,
    keep_scans: bool = False,
) -> ScenarioResult:
    """Simulate one scenario into ground truth plus a merged event stream.

    ``rays`` overrides the configured LiDAR grid (CI downsampling). With
    ``keep_scans`` the rendered clouds are retained, keyed by frame index.
    """
    tmap = config.build_tunnel_map()
    trajectory = config.build_trajectory(tmap)
    truth = trajectory.sample(config.trajectory.truth_rate_hz)
    duration = config.trajectory.duration_s
    events: list[PseudoMeasurement] = []

    tparams = config.thermal_params()
    tstate = init_thermal_state(
        trajectory.pose_at(0.0), tparams, np.random.SeedSequence([config.seed, 2])
    )
    model = config.lidar_model(rays)
    reg_params = config.registration_params()
    base_noise = np.diag([config.lidar.base_noise_v**2, config.lidar.base_noise_psi_dot**2])
    registrations: list[RegistrationRecord] = []
    scans: dict[int, PointCloud] | None = {} if keep_scans else None

    # Registration initial guesses come from a filter running on the
    # emitted events, so both sensor streams are walked in replay order:
    # chronological, LiDAR before thermal on equal timestamps.
    shadow = OnlineFilter(
        trajectory.state_at(0.0),
        config.initial_cov(),
        params=config.process_params(),
        ts_max=config.filter.ts_max,
    )
    f_li = config.lidar.rate_hz
    f_th = config.thermal.frame_rate_hz
    frames = sorted(
        [(j / f_li, 0, j) for j in range(_frame_count(duration, f_li))]
        + [(k / f_th, 1, k) for k in range(1, _frame_count(duration, f_th))]
    )
    prev: tuple[float, PointCloud, Pose2] | None = None
    prev_thermal_t = 0.0
    for t, kind, idx in frames:
        if kind == 1:
            # The generator always steps (state advances through outages);
            # the outage only gates emission.
            tstate, meas = thermal_step(tstate, trajectory.pose_at(t), t - prev_thermal_t, tparams)
            prev_thermal_t = t
            if meas is not None and not config.outage_contains(Sensor.THERMAL, t):
                events.append(meas)
                shadow.update(meas)
            continue
        if config.outage_contains(Sensor.LIDAR, t):
            # Sensor down: nothing rendered, and pairing restarts afterwards.
            prev = None
            continue
        rng = None
        if config.lidar.range_noise_sigma > 0.0:
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, idx]))
        pose = trajectory.pose_at(t)
        scan = render_scan(
            tmap, pose.x, pose.y, pose.psi, model, config.lidar.range_noise_sigma, rng, timestamp=t
        )
        if scans is not None:
            scans[idx] = scan
        shadow.predict_to(t)
        pose_now = Pose2(shadow.state.x, shadow.state.y, shadow.state.psi)
        if prev is not None:
            t_prev, prev_scan, pose_prev = prev
            dt = t - t_prev
            guess = Transform3.from_pose2(pose_prev.inverse().compose(pose_now))
            try:
                result = register(scan, prev_scan, guess, reg_params)
            except RegistrationFailedError:
                pass
            else:
                meas = odometry_to_pseudo(result, dt, base_noise, t, source=Sensor.LIDAR)
                events.append(meas)
                shadow.update(meas)
                registrations.append(
                    RegistrationRecord(
                        timestamp=t,
                        iterations=result.iterations,
                        final_cost=result.final_cost,
                        alpha=result.alpha,
                        correspondence_count=result.correspondence_count,
                        degenerate=result.degenerate,
                    )
                )
        # Snapshot after this frame's own correction: the next guess spans
        # posterior-at-prev to prior-at-next.
        prev = (t, scan, Pose2(shadow.state.x, shadow.state.y, shadow.state.psi))

    events.sort(key=lambda m: (m.timestamp, SOURCE_ORDER[m.source]))
    return ScenarioResult(
        config=config,
        tmap=tmap,
        trajectory=trajectory,
        truth=truth,
        events=events,
        registrations=registrations,
        scans=scans,
    )


# --------------------------------------------------------------------------
# Stream files


def write_events_csv(events: Iterable[PseudoMeasurement], path: str | Path) -> None:
    lines = [EVENTS_HEADER]
    for m in events:
        q = m.noise
        lines.append(
            ",".join(
                (
                    _fmt(m.timestamp),
                    m.source.value,
                    _fmt(m.v_meas),
                    _fmt(m.psi_dot_meas),
                    _fmt(q[0, 0]),
                    _fmt(q[0, 1]),
                    _fmt(q[1, 1]),
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_events_csv(path: str | Path) -> list[PseudoMeasurement]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != EVENTS_HEADER:
        raise DataError(f"{path}: missing event header {EVENTS_HEADER!r}")
    events: list[PseudoMeasurement] = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 7:
            raise DataError(f"{path}:{ln}: expected 7 fields, got {len(parts)}")
        try:
            t = float(parts[0])
            source = Sensor(parts[1])
            v, pd, q00, q01, q11 = (float(p) for p in parts[2:])
            meas = PseudoMeasurement(
                v_meas=v,
                psi_dot_meas=pd,
                noise=np.array([[q00, q01], [q01, q11]]),
                source=source,
                timestamp=t,
            )
        except ValueError as exc:
            raise DataError(f"{path}:{ln}: {exc}") from None
        events.append(meas)
    for a, b in zip(events, events[1:]):
        if (b.timestamp, SOURCE_ORDER[b.source]) < (a.timestamp, SOURCE_ORDER[a.source]):
            raise DataError(f"{path}: events not sorted at t={b.timestamp}")
    return events


def write_truth_csv(truth: Iterable[GroundTruthSample], path: str | Path) -> None:
    lines = [TRUTH_HEADER]
    for s in truth:
        st = s.state
        lines.append(
            ",".join(
                _fmt(v)
                for v in (s.timestamp, st.x, st.y, st.v, st.v_dot, st.psi, st.psi_dot, st.psi_ddot)
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_truth_csv(path: str | Path) -> list[GroundTruthSample]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != TRUTH_HEADER:
        raise DataError(f"{path}: missing truth header {TRUTH_HEADER!r}")
    out: list[GroundTruthSample] = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 8:
            raise DataError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(p) for p in parts]
        except ValueError as exc:
            raise DataError(f"{path}:{ln}: {exc}") from None
        state = StateVector(
            x=vals[1], y=vals[2], v=vals[3], v_dot=vals[4],
            psi=vals[5], psi_dot=vals[6], psi_ddot=vals[7],
        )
        out.append(GroundTruthSample(state=state, timestamp=vals[0]))
    for a, b in zip(out, out[1:]):
        if b.timestamp <= a.timestamp:
            raise DataError(f"{path}: truth timestamps not increasing at t={b.timestamp}")
    return out


def write_scan_archive(scans: Mapping[int, PointCloud], out_dir: str | Path) -> None:
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    for index in sorted(scans):
        write_ply(scans[index], directory / f"scan_{index:06d}.ply")
