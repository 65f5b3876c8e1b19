"""Blended point/plane registration: parameters, solver core, full loop."""

import math

import numpy as np
import pytest

from tunnelfusion.ekf import Sensor
from tunnelfusion.geometry import Transform3, rotation_z
from tunnelfusion.pointcloud import Correspondences, NormalEstimate, PointCloud, estimate_normals
from tunnelfusion.registration import (
    MIN_CORRESPONDENCES,
    RegistrationFailedError,
    RegistrationParams,
    RegistrationResult,
    compute_alpha,
    odometry_to_pseudo,
    register,
    solve_step,
)


def _blob_cloud(n=600, seed=5, extent=(6.0, 6.0, 3.0)):
    """Volumetric scatter: low planarity everywhere, fully constrained."""
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(extent)
    return PointCloud(pts)


def _identity_pairs(n):
    idx = np.arange(n)
    return Correspondences(source_indices=idx, target_indices=idx, distances=np.zeros(n))


def _flat_normals(n, normal=(0.0, 0.0, 1.0), planarity=0.0):
    vec = np.array(normal, dtype=float)
    return [NormalEstimate(vec.copy(), planarity) for _ in range(n)]


NO_VOXEL = RegistrationParams(voxel_size=None, max_correspondence_dist=0.5)


# ---------------------------------------------------------------------------
# parameters


def test_params_defaults_valid():
    RegistrationParams()


@pytest.mark.parametrize(
    "kwargs",
    [
        {"voxel_size": 0.0},
        {"voxel_size": -0.4},
        {"normal_neighbors": 3},
        {"planarity_threshold": 1.5},
        {"planarity_threshold": -0.1},
        {"gate_shrink": 0.0},
        {"gate_shrink": 1.2},
        {"gate_floor": 0.0},
        {"gate_floor": 2.0},  # above max_correspondence_dist
        {"max_iterations": 0},
    ],
)
def test_params_validation(kwargs):
    with pytest.raises(ValueError):
        RegistrationParams(**kwargs)


def test_params_voxel_none_allowed():
    assert RegistrationParams(voxel_size=None).voxel_size is None


# ---------------------------------------------------------------------------
# compute_alpha


def test_alpha_counts_threshold_fraction():
    normals = [
        NormalEstimate(np.array([0.0, 0, 1.0]), p) for p in (0.9, 0.4, 0.6, 0.5, 0.1)
    ]
    assert compute_alpha(normals, 0.5) == pytest.approx(3 / 5)  # >= is inclusive
    assert compute_alpha(normals, 0.0) == 1.0
    assert compute_alpha(normals, 1.0) == 0.0


def test_alpha_validation():
    with pytest.raises(ValueError):
        compute_alpha([], 0.5)
    with pytest.raises(ValueError):
        compute_alpha(_flat_normals(3), 1.5)


def test_alpha_invariant_under_rigid_motion():
    cloud = _blob_cloud(seed=2)
    moved = Transform3(rotation_z(1.1), np.array([3.0, -2.0, 0.5])).apply(cloud.points)
    before = np.array([e.planarity for e in estimate_normals(cloud, k=10)])
    after = np.array([e.planarity for e in estimate_normals(PointCloud(moved), k=10)])
    assert np.max(np.abs(before - after)) < 1e-6
    for th in (0.2, 0.5, 0.8):
        a0 = compute_alpha(estimate_normals(cloud, k=10), th)
        a1 = compute_alpha(estimate_normals(PointCloud(moved), k=10), th)
        assert a0 == a1


# ---------------------------------------------------------------------------
# solve_step


def test_solve_step_recovers_pure_translation():
    target = _blob_cloud(n=80, seed=3)
    t_true = np.array([0.01, -0.02, 0.005])
    source = PointCloud(target.points - t_true)
    inc, degenerate = solve_step(
        _identity_pairs(80), source, target, _flat_normals(80), alpha=0.0
    )
    assert not degenerate
    np.testing.assert_allclose(inc.translation, t_true, atol=1e-9)
    assert inc.rotation_angle() == pytest.approx(0.0, abs=1e-9)


def test_solve_step_recovers_small_rigid_motion():
    target = _blob_cloud(n=120, seed=4)
    true = Transform3(rotation_z(1e-3), np.array([0.004, 0.002, -0.001]))
    source = PointCloud(true.inverse().apply(target.points))
    inc, degenerate = solve_step(
        _identity_pairs(120), source, target, _flat_normals(120), alpha=0.0
    )
    assert not degenerate
    err = inc.compose(true.inverse())
    assert np.linalg.norm(err.translation) < 1e-5
    assert abs(err.rotation_angle()) < 1e-5


def test_solve_step_plane_only_single_orientation_is_degenerate():
    # every residual against one normal direction leaves 3 DOF unobserved
    target = _blob_cloud(n=60, seed=6)
    source = PointCloud(target.points - np.array([0.01, 0.0, 0.0]))
    normals = _flat_normals(60, normal=(0, 0, 1.0), planarity=1.0)
    inc, degenerate = solve_step(
        _identity_pairs(60), source, target, normals, alpha=1.0
    )
    assert degenerate
    np.testing.assert_allclose(inc.rotation, np.eye(3))
    np.testing.assert_allclose(inc.translation, np.zeros(3))


def test_solve_step_too_few_pairs():
    target = _blob_cloud(n=10, seed=7)
    pairs = _identity_pairs(MIN_CORRESPONDENCES - 1)
    with pytest.raises(RegistrationFailedError):
        solve_step(pairs, target, target, _flat_normals(10), alpha=0.0)


def test_solve_step_alpha_out_of_range():
    target = _blob_cloud(n=10, seed=7)
    with pytest.raises(ValueError):
        solve_step(_identity_pairs(10), target, target, _flat_normals(10), alpha=1.5)


# ---------------------------------------------------------------------------
# register


def test_register_identical_clouds_is_identity():
    cloud = _blob_cloud(seed=8)
    result = register(cloud, cloud, params=NO_VOXEL)
    assert not result.degenerate
    assert np.linalg.norm(result.transform.translation) < 1e-8
    assert abs(result.transform.rotation_angle()) < 1e-8


def test_register_recovers_known_transform():
    target = _blob_cloud(seed=9)
    true = Transform3(rotation_z(math.radians(1.5)), np.array([0.05, -0.03, 0.01]))
    source = PointCloud(true.inverse().apply(target.points))
    result = register(source, target, params=NO_VOXEL)
    assert not result.degenerate
    err = result.transform.compose(true.inverse())
    assert np.linalg.norm(err.translation) < 1e-4
    assert abs(err.rotation_angle()) < 1e-5
    assert result.iterations <= NO_VOXEL.max_iterations
    assert result.correspondence_count >= MIN_CORRESPONDENCES


def test_register_inverse_consistency():
    a = _blob_cloud(seed=10)
    true = Transform3(rotation_z(math.radians(-2.0)), np.array([-0.04, 0.06, 0.0]))
    b = PointCloud(true.apply(a.points))
    fwd = register(a, b, params=NO_VOXEL).transform
    bwd = register(b, a, params=NO_VOXEL).transform
    both = fwd.compose(bwd)
    assert np.linalg.norm(both.translation) < 1e-3
    assert abs(both.rotation_angle()) < math.radians(0.01)


def test_register_cost_non_increasing():
    target = _blob_cloud(seed=12)
    true = Transform3(rotation_z(math.radians(1.0)), np.array([0.06, 0.02, -0.01]))
    source = PointCloud(true.inverse().apply(target.points))
    result = register(source, target, params=NO_VOXEL)
    hist = result.cost_history
    assert len(hist) == result.iterations
    assert result.final_cost == hist[-1]
    for prev, nxt in zip(hist, hist[1:]):
        # re-association between iterations may wiggle the objective by
        # roundoff, never more
        assert nxt <= prev + 1e-9


def test_register_corridor_planes_degenerate():
    # two bare parallel walls: every normal is +-y, so translation along
    # the corridor, vertical translation and pitch are all unobserved
    xs = np.arange(0.0, 8.0, 0.25)
    zs = np.arange(0.0, 2.0, 0.25)
    gx, gz = np.meshgrid(xs, zs, indexing="ij")
    walls = [
        np.column_stack([gx.ravel(), np.full(gx.size, -2.0), gz.ravel()]),
        np.column_stack([gx.ravel(), np.full(gx.size, 2.0), gz.ravel()]),
    ]
    cloud = PointCloud(np.vstack(walls))
    params = RegistrationParams(
        voxel_size=None, planarity_threshold=0.0, max_correspondence_dist=0.5
    )
    result = register(cloud, cloud, params=params)
    assert result.degenerate
    assert result.alpha == 1.0
    # degenerate iterations keep the initial guess untouched
    np.testing.assert_allclose(result.transform.rotation, np.eye(3))
    np.testing.assert_allclose(result.transform.translation, np.zeros(3))


def test_register_rejects_small_clouds():
    tiny = _blob_cloud(n=8, seed=13)
    big = _blob_cloud(n=100, seed=14)
    with pytest.raises(RegistrationFailedError):
        register(big, tiny, params=NO_VOXEL)  # target below k+1


def test_register_fails_when_gate_starves():
    a = _blob_cloud(n=100, seed=15)
    far = PointCloud(a.points + np.array([50.0, 0.0, 0.0]))
    with pytest.raises(RegistrationFailedError):
        register(far, a, params=NO_VOXEL)


def test_register_uses_initial_guess():
    # offset far beyond the gate: only the supplied guess bridges it
    target = _blob_cloud(seed=16)
    true = Transform3(np.eye(3), np.array([2.0, 0.0, 0.0]))
    source = PointCloud(true.inverse().apply(target.points))
    result = register(source, target, initial_guess=true, params=NO_VOXEL)
    err = result.transform.compose(true.inverse())
    assert np.linalg.norm(err.translation) < 1e-4
    try:
        blind = register(source, target, params=NO_VOXEL)
    except RegistrationFailedError:
        pass  # acceptable: the gate starves with no guess
    else:
        off = blind.transform.compose(true.inverse())
        assert np.linalg.norm(off.translation) > 0.1


# ---------------------------------------------------------------------------
# odometry_to_pseudo


def _result(transform, final_cost=0.0, degenerate=False):
    return RegistrationResult(
        transform=transform,
        iterations=3,
        final_cost=final_cost,
        alpha=0.5,
        correspondence_count=100,
        degenerate=degenerate,
    )


BASE = np.diag([0.05**2, 0.004**2])


def test_pseudo_forward_speed_and_yaw_rate():
    t = Transform3(rotation_z(0.02), np.array([0.4, 0.03, 0.0]))
    meas = odometry_to_pseudo(_result(t), dt=0.2, base_noise=BASE, timestamp=7.0)
    assert meas.v_meas == pytest.approx(math.hypot(0.4, 0.03) / 0.2)
    assert meas.psi_dot_meas == pytest.approx(0.1)
    assert meas.timestamp == 7.0
    assert meas.source is Sensor.LIDAR
    np.testing.assert_allclose(meas.noise, BASE)


def test_pseudo_reverse_motion_signs_speed():
    t = Transform3(np.eye(3), np.array([-0.5, 0.0, 0.0]))
    meas = odometry_to_pseudo(_result(t), dt=0.25, base_noise=BASE, timestamp=0.0)
    assert meas.v_meas == pytest.approx(-2.0)


def test_pseudo_pure_lateral_motion_is_zero_speed():
    t = Transform3(np.eye(3), np.array([0.0, 0.3, 0.0]))
    meas = odometry_to_pseudo(_result(t), dt=0.1, base_noise=BASE, timestamp=0.0)
    assert meas.v_meas == 0.0


def test_pseudo_noise_scales_with_cost():
    t = Transform3(np.eye(3), np.array([0.2, 0.0, 0.0]))
    meas = odometry_to_pseudo(
        _result(t, final_cost=0.05), dt=0.1, base_noise=BASE, timestamp=0.0
    )
    np.testing.assert_allclose(meas.noise, 2.0 * BASE)


def test_pseudo_degenerate_inflates_speed_variance():
    t = Transform3(np.eye(3), np.array([0.2, 0.0, 0.0]))
    meas = odometry_to_pseudo(
        _result(t, degenerate=True), dt=0.1, base_noise=BASE, timestamp=0.0
    )
    assert meas.noise[0, 0] == pytest.approx(100.0 * BASE[0, 0])
    assert meas.noise[1, 1] == pytest.approx(BASE[1, 1])


def test_pseudo_thermal_source_passthrough():
    t = Transform3(np.eye(3), np.array([0.1, 0.0, 0.0]))
    meas = odometry_to_pseudo(
        _result(t), dt=0.1, base_noise=BASE, timestamp=1.0, source=Sensor.THERMAL
    )
    assert meas.source is Sensor.THERMAL


def test_pseudo_validates_dt_and_scale():
    t = Transform3(np.eye(3), np.array([0.1, 0.0, 0.0]))
    with pytest.raises(ValueError):
        odometry_to_pseudo(_result(t), dt=0.0, base_noise=BASE, timestamp=0.0)
    with pytest.raises(ValueError):
        odometry_to_pseudo(_result(t), dt=0.1, base_noise=BASE, timestamp=0.0, cost_scale=0.0)
