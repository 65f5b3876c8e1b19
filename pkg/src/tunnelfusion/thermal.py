"""Behavioral model of a thermal-camera odometry front end.

Thermal odometry has no depth sensing, so its translation estimates
carry a multiplicative scale error that wanders over time. The model
tracks that scale as a geometric random walk, measures frame-to-frame
motion relative to a periodically refreshed keyframe, and occasionally
drops a frame entirely. Yaw rate is scale free and stays unbiased.

Every step draws the same four variates (bias increment, speed noise,
yaw-rate noise, dropout) in a fixed order, so the stream for a given
seed does not depend on which frames happen to be dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .ekf import PseudoMeasurement, Sensor
from .geometry import Pose2

# Variance floor keeping quoted measurement noise SPD with zero sigmas.
_NOISE_FLOOR = 1e-12


@dataclass(frozen=True, slots=True)
class ThermalOdomParams:
    """Noise and timing model for the thermal front end.

    ``scale_bias_walk_sigma`` is the per-sqrt-second log-scale drift.
    The dropout probability applies per frame.
    """

    frame_rate: float = 9.0
    keyframe_interval: int = 5
    scale_bias_walk_sigma: float = 0.02
    v_noise_sigma: float = 0.15
    psi_dot_noise_sigma: float = 0.02
    dropout_probability: float = 0.02
    initial_scale_bias: float = 1.0

    def __post_init__(self) -> None:
        if not (self.frame_rate > 0.0 and math.isfinite(self.frame_rate)):
            raise ValueError("frame_rate must be positive")
        if self.keyframe_interval < 1:
            raise ValueError("keyframe_interval must be >= 1")
        for name in ("scale_bias_walk_sigma", "v_noise_sigma", "psi_dot_noise_sigma"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.dropout_probability <= 1.0:
            raise ValueError("dropout_probability must be in [0, 1]")
        if not (self.initial_scale_bias > 0.0 and math.isfinite(self.initial_scale_bias)):
            raise ValueError("initial_scale_bias must be positive")


@dataclass(frozen=True)
class ThermalOdomState:
    """Evolving odometry state; advance it only through :func:`thermal_step`.

    ``relative_pose`` is the accumulated motion since the last keyframe,
    restarted whenever the keyframe refreshes. The random generator is
    advanced in place as steps execute.
    """

    scale_bias: float
    keyframe_pose: Pose2
    relative_pose: Pose2
    frames_since_keyframe: int
    elapsed: float
    rng: np.random.Generator


def init_thermal_state(
    initial_pose: Pose2, params: ThermalOdomParams, seed: int | np.random.SeedSequence
) -> ThermalOdomState:
    """State at t=0 with the keyframe anchored at the initial pose."""
    return ThermalOdomState(
        scale_bias=params.initial_scale_bias,
        keyframe_pose=initial_pose,
        relative_pose=Pose2.identity(),
        frames_since_keyframe=0,
        elapsed=0.0,
        rng=np.random.default_rng(seed),
    )


def thermal_step(
    state: ThermalOdomState,
    true_pose: Pose2,
    dt: float,
    params: ThermalOdomParams,
) -> tuple[ThermalOdomState, PseudoMeasurement | None]:
    """Advance one frame and maybe emit a (v, psi_dot) measurement.

    The frame-to-frame motion is the difference of keyframe-relative
    poses, so with all sigmas zero the output matches finite differences
    of the true trajectory exactly. The scale bias multiplies only the
    translational speed. Returns None in place of a measurement when a
    dropout is drawn; the state still advances.
    """
    if not (dt > 0.0 and math.isfinite(dt)):
        raise ValueError(f"dt must be positive, got {dt!r}")
    rng = state.rng
    z_bias = rng.standard_normal()
    z_v = rng.standard_normal()
    z_psi = rng.standard_normal()
    u_drop = rng.uniform()

    bias = state.scale_bias * math.exp(z_bias * params.scale_bias_walk_sigma * math.sqrt(dt))
    rel_now = state.keyframe_pose.inverse().compose(true_pose)
    delta = state.relative_pose.inverse().compose(rel_now)
    chord = math.hypot(delta.x, delta.y)
    if delta.x > 0.0:
        v_true = chord / dt
    elif delta.x < 0.0:
        v_true = -chord / dt
    else:
        v_true = 0.0
    v_meas = bias * v_true + z_v * params.v_noise_sigma
    psi_dot_meas = delta.psi / dt + z_psi * params.psi_dot_noise_sigma

    elapsed = state.elapsed + dt
    frames = state.frames_since_keyframe + 1
    if frames >= params.keyframe_interval:
        new_state = ThermalOdomState(
            scale_bias=bias,
            keyframe_pose=true_pose,
            relative_pose=Pose2.identity(),
            frames_since_keyframe=0,
            elapsed=elapsed,
            rng=rng,
        )
    else:
        new_state = ThermalOdomState(
            scale_bias=bias,
            keyframe_pose=state.keyframe_pose,
            relative_pose=rel_now,
            frames_since_keyframe=frames,
            elapsed=elapsed,
            rng=rng,
        )

    if u_drop < params.dropout_probability:
        return new_state, None

    # Quoted speed variance grows with the accumulated scale drift so the
    # downstream filter can discount stale thermal speed honestly.
    drift_var = (params.scale_bias_walk_sigma**2) * elapsed
    v_var = params.v_noise_sigma**2 + drift_var * v_meas * v_meas + _NOISE_FLOOR
    w_var = params.psi_dot_noise_sigma**2 + _NOISE_FLOOR
    meas = PseudoMeasurement(
        v_meas=v_meas,
        psi_dot_meas=psi_dot_meas,
        noise=np.array([[v_var, 0.0], [0.0, w_var]]),
        source=Sensor.THERMAL,
        timestamp=state.elapsed + dt,
    )
    return new_state, meas


def thermal_quality(level: float, params: ThermalOdomParams) -> ThermalOdomParams:
    """Degrade the model by a severity in [0, 1].

    Dropout probability and speed noise scale linearly from nominal at
    level 0 to twice nominal at level 1. Yaw-rate noise is unaffected.
    """
    if not (0.0 <= level <= 1.0) or not math.isfinite(level):
        raise ValueError(f"quality level must be in [0, 1], got {level!r}")
    factor = 1.0 + level
    return replace(
        params,
        dropout_probability=min(1.0, params.dropout_probability * factor),
        v_noise_sigma=params.v_noise_sigma * factor,
    )
