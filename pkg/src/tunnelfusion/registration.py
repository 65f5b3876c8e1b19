"""Scan-to-scan registration with a blended point/plane objective.

Matched pairs are split by the planarity of the target point's
neighborhood. Pairs on planar structure contribute point-to-plane
residuals, the rest contribute point-to-point residuals, and the two
families are blended by alpha, the planar fraction:

    (1 - alpha) * mean_nonplanar ||T p_i - q_i||^2
        + alpha * mean_planar (n_i . (T p_i - q_i))^2

Keeping point-to-point residuals off smooth walls matters: consecutive
scans sample a wall at shifted spots, and point-to-point terms there
would lock onto the sampling pattern instead of the surface. Flat
environments push alpha to 1 and the plane term alone cannot observe
motion along the walls; that shows up as a rank-deficient normal-equation
matrix and is reported through the ``degenerate`` flag instead of being
papered over.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .ekf import PseudoMeasurement, Sensor
from .geometry import Transform3, orthonormalize, skew, transform_to_planar
from .pointcloud import (
    Correspondences,
    NormalEstimate,
    PointCloud,
    _associate_tree,
    _normal_arrays,
    voxel_downsample,
)

# A registration needs at least this many matched pairs to be solvable.
MIN_CORRESPONDENCES = 6

# Condition-number limit on the 6x6 normal equations.
DEGENERACY_CONDITION_LIMIT = 1e12


class RegistrationFailedError(RuntimeError):
    """Raised when too few correspondences survive the gate."""


@dataclass(frozen=True, slots=True)
class RegistrationParams:
    """Tuning knobs for :func:`register`.

    ``voxel_size`` of None disables downsampling. The association gate
    starts at ``max_correspondence_dist`` and shrinks by ``gate_shrink``
    each iteration down to ``gate_floor``.
    """

    voxel_size: float | None = 0.4
    normal_neighbors: int = 12
    planarity_threshold: float = 0.5
    max_correspondence_dist: float = 1.0
    gate_shrink: float = 0.9
    gate_floor: float = 0.25
    max_iterations: int = 50
    translation_tol: float = 1e-5
    rotation_tol: float = 1e-6

    def __post_init__(self) -> None:
        if self.voxel_size is not None and not self.voxel_size > 0.0:
            raise ValueError("voxel_size must be positive or None")
        if self.normal_neighbors < 4:
            raise ValueError("normal_neighbors must be >= 4")
        if not 0.0 <= self.planarity_threshold <= 1.0:
            raise ValueError("planarity_threshold must be in [0, 1]")
        if not 0.0 < self.gate_shrink <= 1.0:
            raise ValueError("gate_shrink must be in (0, 1]")
        if not 0.0 < self.gate_floor <= self.max_correspondence_dist:
            raise ValueError("gate_floor must be in (0, max_correspondence_dist]")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class RegistrationResult:
    """Outcome of one scan-to-scan registration.

    ``transform`` maps the source frame into the target frame. When
    ``degenerate`` is true the solver saw a rank-deficient system and the
    transform is no more trustworthy than the initial guess.
    """

    transform: Transform3
    iterations: int
    final_cost: float
    alpha: float
    correspondence_count: int
    degenerate: bool
    cost_history: tuple[float, ...] = ()


def compute_alpha(normals: Sequence[NormalEstimate], planarity_threshold: float = 0.5) -> float:
    """Fraction of points whose planarity reaches the threshold."""
    if not 0.0 <= planarity_threshold <= 1.0:
        raise ValueError("planarity_threshold must be in [0, 1]")
    if len(normals) == 0:
        raise ValueError("normals must be non-empty")
    flat = sum(1 for n in normals if n.planarity >= planarity_threshold)
    return flat / len(normals)


def _accumulate_plane_rows(
    a_mat: np.ndarray,
    b_vec: np.ndarray,
    src: np.ndarray,
    nvecs: np.ndarray,
    e: np.ndarray,
    weight: float,
) -> None:
    """Add weighted rows [p x n | n] with residual n.e to the normal equations.

    For the linearized model T p = p + theta x p + t the derivative of the
    scalar residual n.(p + theta x p + t - q) is (p x n) in theta and n in t.
    """
    rows = np.hstack([np.cross(src, nvecs), nvecs])  # (M, 6)
    r = np.einsum("ni,ni->n", nvecs, e)
    a_mat += weight * (rows.T @ rows)
    b_vec -= weight * (rows.T @ r)


def _solve_core(
    src: np.ndarray,
    tgt: np.ndarray,
    normals: np.ndarray,
    planar_mask: np.ndarray,
    alpha: float,
    cond_limit: float = DEGENERACY_CONDITION_LIMIT,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """One Gauss-Newton step on matched arrays.

    Returns (rotation vector, translation, degenerate). The point term is
    assembled as three orthogonal plane constraints per pair, which keeps
    a single accumulation path for both halves of the objective.
    """
    e = src - tgt
    a_mat = np.zeros((6, 6))
    b_vec = np.zeros(6)
    point = ~planar_mask
    n_point = int(np.count_nonzero(point))
    n_plane = planar_mask.size - n_point
    if alpha < 1.0 and n_point:
        w = (1.0 - alpha) / n_point
        sp = src[point]
        for axis in np.eye(3):
            _accumulate_plane_rows(a_mat, b_vec, sp, np.broadcast_to(axis, sp.shape), e[point], w)
    if alpha > 0.0 and n_plane:
        _accumulate_plane_rows(
            a_mat, b_vec, src[planar_mask], normals[planar_mask], e[planar_mask], alpha / n_plane
        )
    cond = np.linalg.cond(a_mat)
    if not np.isfinite(cond) or cond > cond_limit:
        return np.zeros(3), np.zeros(3), True
    delta = np.linalg.solve(a_mat, b_vec)
    return delta[:3], delta[3:], False


def solve_step(
    correspondences: Correspondences,
    source: PointCloud,
    target: PointCloud,
    normals_of_target: Sequence[NormalEstimate],
    alpha: float,
    planarity_threshold: float = 0.5,
) -> tuple[Transform3, bool]:
    """One Gauss-Newton increment for the blended objective.

    ``source`` holds the current iterate (already moved by the running
    transform). Pairs whose matched target point reaches the planarity
    threshold take the plane residual, the rest the point residual.
    Returns the incremental transform and a degeneracy flag; a
    rank-deficient system yields the identity increment with the flag
    set.
    """
    if len(correspondences) < MIN_CORRESPONDENCES:
        raise RegistrationFailedError(
            f"need at least {MIN_CORRESPONDENCES} correspondences, got {len(correspondences)}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    src = source.points[correspondences.source_indices]
    tgt = target.points[correspondences.target_indices]
    nrm = np.array([normals_of_target[j].normal for j in correspondences.target_indices])
    mask = np.array(
        [normals_of_target[j].planarity >= planarity_threshold for j in correspondences.target_indices]
    )
    theta, t, degenerate = _solve_core(src, tgt, nrm, mask, alpha)
    if degenerate:
        return Transform3.identity(), True
    rot = orthonormalize(np.eye(3) + skew(theta))
    return Transform3(rot, t), False


def _blend_cost(
    src: np.ndarray, tgt: np.ndarray, normals: np.ndarray, planar_mask: np.ndarray, alpha: float
) -> float:
    e = src - tgt
    cost = 0.0
    point = ~planar_mask
    if alpha < 1.0 and point.any():
        ep = e[point]
        cost += (1.0 - alpha) * float(np.mean(np.einsum("ni,ni->n", ep, ep)))
    if alpha > 0.0 and planar_mask.any():
        r = np.einsum("ni,ni->n", normals[planar_mask], e[planar_mask])
        cost += alpha * float(np.mean(r * r))
    return cost


def register(
    source: PointCloud,
    target: PointCloud,
    initial_guess: Transform3 | None = None,
    params: RegistrationParams | None = None,
) -> RegistrationResult:
    """Align ``source`` onto ``target``.

    Pipeline per iteration: gate-limited nearest-neighbor association,
    planarity-based blend weight, one Gauss-Newton step. Iterations stop
    when the increment falls below the translation and rotation
    tolerances or the iteration cap is reached.

    Raises
    ------
    RegistrationFailedError
        If either cloud is too small or fewer than 6 pairs survive the
        gate at any iteration.
    """
    params = params or RegistrationParams()
    if params.voxel_size is not None:
        source = voxel_downsample(source, params.voxel_size)
        target = voxel_downsample(target, params.voxel_size)
    k = params.normal_neighbors
    if len(target) < k + 1 or len(source) < MIN_CORRESPONDENCES:
        raise RegistrationFailedError(
            f"clouds too small after downsampling (source {len(source)}, "
            f"target {len(target)}, need k+1={k + 1} target points)"
        )
    normals, planarity = _normal_arrays(target.points, k)
    tree = cKDTree(target.points)
    transform = initial_guess or Transform3.identity()
    gate = params.max_correspondence_dist
    costs: list[float] = []
    alpha = 0.0
    degenerate = False
    count = 0
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        moved = transform.apply(source.points)
        corr = _associate_tree(tree, moved, gate)
        count = len(corr)
        if count < MIN_CORRESPONDENCES:
            raise RegistrationFailedError(
                f"only {count} correspondences inside gate {gate:.3f} m at "
                f"iteration {iterations} (source {len(source)}, target {len(target)})"
            )
        src = moved[corr.source_indices]
        tgt = target.points[corr.target_indices]
        nrm = normals[corr.target_indices]
        pl = planarity[corr.target_indices]
        mask = pl >= params.planarity_threshold
        alpha = float(np.count_nonzero(mask)) / count
        theta, t_inc, degenerate = _solve_core(src, tgt, nrm, mask, alpha)
        if degenerate:
            increment = Transform3.identity()
        else:
            increment = Transform3(orthonormalize(np.eye(3) + skew(theta)), t_inc)
        transform = increment.compose(transform)
        costs.append(_blend_cost(increment.apply(src), tgt, nrm, mask, alpha))
        gate = max(gate * params.gate_shrink, params.gate_floor)
        if np.linalg.norm(t_inc) < params.translation_tol and np.linalg.norm(theta) < params.rotation_tol:
            break
    return RegistrationResult(
        transform=transform,
        iterations=iterations,
        final_cost=costs[-1],
        alpha=alpha,
        correspondence_count=count,
        degenerate=degenerate,
        cost_history=tuple(costs),
    )


def odometry_to_pseudo(
    result: RegistrationResult,
    dt: float,
    base_noise: np.ndarray,
    timestamp: float,
    source: Sensor = Sensor.LIDAR,
    cost_scale: float = 0.05,
) -> PseudoMeasurement:
    """Convert a registration into a (v, psi_dot) pseudo-measurement.

    Speed is the planar displacement magnitude over ``dt``, signed by the
    forward component; yaw rate is the planar rotation over ``dt``. The
    quoted noise is ``base_noise`` scaled by (1 + final_cost/cost_scale),
    with the speed variance additionally inflated 100x when the solver
    flagged degeneracy.
    """
    if not (dt > 0.0 and math.isfinite(dt)):
        raise ValueError(f"dt must be positive, got {dt!r}")
    if not (cost_scale > 0.0 and math.isfinite(cost_scale)):
        raise ValueError(f"cost_scale must be positive, got {cost_scale!r}")
    planar, _residual = transform_to_planar(result.transform)
    magnitude = math.hypot(planar.x, planar.y)
    if planar.x > 0.0:
        v = magnitude / dt
    elif planar.x < 0.0:
        v = -magnitude / dt
    else:
        v = 0.0
    noise = np.array(base_noise, dtype=float) * (1.0 + result.final_cost / cost_scale)
    if result.degenerate:
        noise[0, 0] *= 100.0
    return PseudoMeasurement(
        v_meas=v,
        psi_dot_meas=planar.psi / dt,
        noise=noise,
        source=source,
        timestamp=timestamp,
    )
