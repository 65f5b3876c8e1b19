"""Ray-cast LiDAR scans against a tunnel map.

Walls are finite planar panels (straight segments) and cylinder sections
(arcs); feature boxes are oriented boxes. Every ray takes the nearest
intersection, ranges beyond the sensor maximum are dropped, and optional
Gaussian range noise perturbs the surviving returns. Returned points live
in the sensor frame.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .geometry import rotation_z
from .pointcloud import PointCloud
from .tunnel import ArcSegment, InvalidMapError, InvalidPoseError, StraightSegment, TunnelMap

_RAY_EPS = 1e-9
_BOUND_TOL = 1e-9
_BOX_CHUNK = 32


@dataclass(frozen=True, slots=True)
class LidarModel:
    """Scan pattern and range limit of the simulated sensor."""

    rays_horizontal: int = 1024
    rays_vertical: int = 128
    vertical_fov: float = math.radians(45.0)
    max_range: float = 120.0

    def __post_init__(self) -> None:
        if self.rays_horizontal < 1 or self.rays_vertical < 1:
            raise ValueError("ray counts must be >= 1")
        if not 0.0 <= self.vertical_fov < math.pi:
            raise ValueError("vertical_fov must be in [0, pi)")
        if not (self.max_range > 0.0 and math.isfinite(self.max_range)):
            raise ValueError("max_range must be positive")

    @property
    def ray_count(self) -> int:
        return self.rays_horizontal * self.rays_vertical


@lru_cache(maxsize=8)
def ray_directions(model: LidarModel) -> np.ndarray:
    """Unit directions in the sensor frame, elevation-major order."""
    az = 2.0 * math.pi * np.arange(model.rays_horizontal) / model.rays_horizontal
    if model.rays_vertical == 1:
        el = np.zeros(1)
    else:
        el = np.linspace(-model.vertical_fov / 2.0, model.vertical_fov / 2.0, model.rays_vertical)
    ce, se = np.cos(el), np.sin(el)
    ca, sa = np.cos(az), np.sin(az)
    dirs = np.empty((model.rays_vertical, model.rays_horizontal, 3))
    dirs[:, :, 0] = ce[:, None] * ca[None, :]
    dirs[:, :, 1] = ce[:, None] * sa[None, :]
    dirs[:, :, 2] = se[:, None] * np.ones_like(ca)[None, :]
    out = dirs.reshape(-1, 3)
    out.flags.writeable = False
    return out


class SceneGeometry:
    """Intersection-ready arrays for one tunnel map.

    Building these is cheap but not free; ``scene_geometry`` caches one
    instance per map so repeated rendering does not pay it again.
    """

    def __init__(self, tmap: TunnelMap) -> None:
        self.tmap = tmap
        hw = tmap.cross_section.half_width
        self.half_height = tmap.cross_section.wall_height / 2.0

        plane_p0, plane_u, plane_n, plane_len = [], [], [], []
        cyl_center, cyl_radius, cyl_a0, cyl_sweep = [], [], [], []
        path = tmap.path
        for seg, start in zip(path.segments, path.start_poses):
            c, s = math.cos(start.psi), math.sin(start.psi)
            left = np.array([-s, c, 0.0])
            if isinstance(seg, StraightSegment):
                tangent = np.array([c, s, 0.0])
                origin = np.array([start.x, start.y, 0.0])
                for side in (1.0, -1.0):
                    plane_p0.append(origin + side * hw * left)
                    plane_u.append(tangent)
                    plane_n.append(side * left)
                    plane_len.append(seg.length)
            elif isinstance(seg, ArcSegment):
                sign = math.copysign(1.0, seg.angle)
                if hw >= seg.radius:
                    raise InvalidMapError(
                        f"half width {hw} leaves no inner wall on an arc of radius {seg.radius}"
                    )
                cx = start.x + seg.radius * math.cos(start.psi + sign * math.pi / 2.0)
                cy = start.y + seg.radius * math.sin(start.psi + sign * math.pi / 2.0)
                a0 = math.atan2(start.y - cy, start.x - cx)
                for side in (1.0, -1.0):
                    cyl_center.append((cx, cy))
                    cyl_radius.append(seg.radius - side * sign * hw)
                    cyl_a0.append(a0)
                    cyl_sweep.append(seg.angle)
            else:  # pragma: no cover - sealed by the Segment union
                raise InvalidMapError(f"unknown segment type {type(seg).__name__}")

        self.plane_p0 = np.asarray(plane_p0).reshape(-1, 3)
        self.plane_u = np.asarray(plane_u).reshape(-1, 3)
        self.plane_n = np.asarray(plane_n).reshape(-1, 3)
        self.plane_len = np.asarray(plane_len, dtype=float)
        self.cyl_center = np.asarray(cyl_center, dtype=float).reshape(-1, 2)
        self.cyl_radius = np.asarray(cyl_radius, dtype=float)
        self.cyl_a0 = np.asarray(cyl_a0, dtype=float)
        self.cyl_sweep = np.asarray(cyl_sweep, dtype=float)

        if tmap.features:
            self.box_center = np.stack([f.center for f in tmap.features])
            self.box_axes = np.stack([f.axes for f in tmap.features])
            self.box_half = np.stack([f.half_extents for f in tmap.features])
        else:
            self.box_center = np.zeros((0, 3))
            self.box_axes = np.zeros((0, 3, 3))
            self.box_half = np.zeros((0, 3))

    # -- primitive intersections ------------------------------------------

    def _hit_planes(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        if self.plane_p0.shape[0] == 0:
            return np.full(dirs.shape[0], np.inf)
        dn = dirs @ self.plane_n.T
        offs = np.einsum("wk,wk->w", self.plane_p0 - origin[None, :], self.plane_n)
        du = dirs @ self.plane_u.T
        a0 = np.einsum("wk,wk->w", origin[None, :] - self.plane_p0, self.plane_u)
        # rays parallel to a wall produce inf/nan here; the mask drops them
        with np.errstate(divide="ignore", invalid="ignore"):
            t = offs[None, :] / dn
            along = a0[None, :] + t * du
            z = origin[2] + t * dirs[:, 2:3]
        valid = (
            np.isfinite(t)
            & (t > _RAY_EPS)
            & (along >= -_BOUND_TOL)
            & (along <= self.plane_len[None, :] + _BOUND_TOL)
            & (np.abs(z) <= self.half_height + _BOUND_TOL)
        )
        return np.min(np.where(valid, t, np.inf), axis=1)

    def _hit_cylinders(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        n_cyl = self.cyl_center.shape[0]
        best = np.full(dirs.shape[0], np.inf)
        if n_cyl == 0:
            return best
        dx, dy = dirs[:, 0:1], dirs[:, 1:2]
        ocx = origin[0] - self.cyl_center[:, 0]
        ocy = origin[1] - self.cyl_center[:, 1]
        a = dx * dx + dy * dy
        b = 2.0 * (dx * ocx[None, :] + dy * ocy[None, :])
        cc = ocx * ocx + ocy * ocy - self.cyl_radius * self.cyl_radius
        disc = b * b - 4.0 * a * cc[None, :]
        has_root = disc >= 0.0
        sq = np.sqrt(np.where(has_root, disc, 0.0))
        sgn = np.sign(self.cyl_sweep)
        span = np.abs(self.cyl_sweep)
        with np.errstate(divide="ignore", invalid="ignore"):
            for root in ((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)):
                t = np.where(has_root, root, np.inf)
                hx = ocx[None, :] + t * dx
                hy = ocy[None, :] + t * dy
                rel = np.mod(sgn[None, :] * (np.arctan2(hy, hx) - self.cyl_a0[None, :]), 2.0 * math.pi)
                # A hit a hair before the arc start wraps to just under 2*pi.
                in_span = (rel <= span[None, :] + _BOUND_TOL) | (rel >= 2.0 * math.pi - _BOUND_TOL)
                z = origin[2] + t * dirs[:, 2:3]
                valid = (
                    np.isfinite(t)
                    & (t > _RAY_EPS)
                    & in_span
                    & (np.abs(z) <= self.half_height + _BOUND_TOL)
                )
                best = np.minimum(best, np.min(np.where(valid, t, np.inf), axis=1))
        return best

    def _hit_boxes(self, origin: np.ndarray, dirs: np.ndarray, max_range: float) -> np.ndarray:
        best = np.full(dirs.shape[0], np.inf)
        if self.box_center.shape[0] == 0:
            return best
        reach = np.linalg.norm(self.box_center - origin[None, :], axis=1)
        radius = np.linalg.norm(self.box_half, axis=1)
        keep = np.flatnonzero(reach <= max_range + radius)
        for k in range(0, keep.size, _BOX_CHUNK):
            idx = keep[k : k + _BOX_CHUNK]
            axes = self.box_axes[idx]
            od = origin[None, :] - self.box_center[idx]
            ob = np.einsum("bij,bi->bj", axes, od)
            db = np.einsum("ri,bij->rbj", dirs, axes)
            h = self.box_half[idx][None, :, :]
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-h - ob[None, :, :]) / db
                t2 = (h - ob[None, :, :]) / db
            tlow = np.minimum(t1, t2)
            thigh = np.maximum(t1, t2)
            par = np.abs(db) < 1e-12
            if par.any():
                inside = (np.abs(ob) <= self.box_half[idx])[None, :, :] & par
                tlow = np.where(par, np.inf, tlow)
                thigh = np.where(par, -np.inf, thigh)
                tlow = np.where(inside, -np.inf, tlow)
                thigh = np.where(inside, np.inf, thigh)
            t_enter = tlow.max(axis=2)
            t_exit = thigh.min(axis=2)
            ok = (t_enter <= t_exit) & (t_enter > _RAY_EPS)
            best = np.minimum(best, np.min(np.where(ok, t_enter, np.inf), axis=1))
        return best


_scene_cache: "weakref.WeakKeyDictionary[TunnelMap, SceneGeometry]" = weakref.WeakKeyDictionary()


def scene_geometry(tmap: TunnelMap) -> SceneGeometry:
    scene = _scene_cache.get(tmap)
    if scene is None:
        scene = SceneGeometry(tmap)
        _scene_cache[tmap] = scene
    return scene


def render_scan(
    tmap: TunnelMap,
    pose_x: float,
    pose_y: float,
    pose_psi: float,
    model: LidarModel,
    noise_sigma: float = 0.0,
    rng: np.random.Generator | None = None,
    timestamp: float = 0.0,
) -> PointCloud:
    """Render one scan from a planar pose inside the tunnel.

    Raises InvalidPoseError when the pose sits outside the carved volume
    (farther than half the width from the centerline). Range noise, when
    requested, needs an explicit generator.
    """
    if noise_sigma < 0.0 or not math.isfinite(noise_sigma):
        raise ValueError("noise_sigma must be >= 0")
    if noise_sigma > 0.0 and rng is None:
        raise ValueError("range noise requires an rng")
    hw = tmap.cross_section.half_width
    dist = tmap.distance_to_centerline(pose_x, pose_y)
    if dist >= hw:
        raise InvalidPoseError(
            f"pose ({pose_x:.3f}, {pose_y:.3f}) is {dist:.3f} m from the centerline; "
            f"the tunnel half width is {hw:.3f} m"
        )

    scene = scene_geometry(tmap)
    dirs_sensor = ray_directions(model)
    dirs_world = dirs_sensor @ rotation_z(pose_psi).T
    origin = np.array([pose_x, pose_y, 0.0])

    t_best = scene._hit_planes(origin, dirs_world)
    t_best = np.minimum(t_best, scene._hit_cylinders(origin, dirs_world))
    t_best = np.minimum(t_best, scene._hit_boxes(origin, dirs_world, model.max_range))

    hit = np.isfinite(t_best) & (t_best <= model.max_range)
    ranges = t_best[hit]
    if noise_sigma > 0.0 and ranges.size:
        ranges = ranges + rng.normal(0.0, noise_sigma, ranges.size)
    points = dirs_sensor[hit] * ranges[:, None]
    return PointCloud(points=points, timestamp=timestamp)
