"""Multi-rate extended Kalman filter over the 7-state vehicle model.

The continuous dynamics are

    d/dt [x, y, v, v_dot, psi, psi_dot, psi_ddot]
        = [v cos(psi), v sin(psi), v_dot, 0, psi_dot, psi_ddot, 0]

discretized by a third-order Taylor expansion along the trajectory.
Both odometry sources produce linear pseudo-measurements of (v, psi_dot)
through the same selector matrix, so the correction step is an ordinary
linear Kalman update.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .state import (
    IDX_PSIDOT,
    IDX_V,
    STATE_DIM,
    StateVector,
    symmetrize,
    validate_covariance,
)

logger = logging.getLogger(__name__)

# Innovation-covariance condition number above which an update is skipped.
SINGULAR_CONDITION_LIMIT = 1e12

# Default initial covariance diagonal: position, position, v, v_dot,
# psi, psi_dot, psi_ddot.
DEFAULT_INITIAL_COV_DIAG = (1.0, 1.0, 0.25, 0.25, 0.05, 0.01, 0.01)

# Process-noise floor added to every diagonal entry, scaled by the step.
_FLOOR_PER_SECOND = 1e-9


class SingularUpdateError(RuntimeError):
    """Raised by :func:`correct` when the innovation covariance is singular."""


class Sensor(enum.Enum):
    LIDAR = "lidar"
    THERMAL = "thermal"


# Tie-break order for simultaneous measurements.
SOURCE_ORDER = {Sensor.LIDAR: 0, Sensor.THERMAL: 1}


@dataclass(frozen=True, slots=True)
class ProcessNoiseParams:
    """White-jerk spectral densities driving the motion model.

    ``jerk_psd`` feeds the (v, v_dot) block in (m/s^3)^2/Hz,
    ``yaw_jerk_psd`` the (psi, psi_dot, psi_ddot) block in (rad/s^3)^2/Hz.
    """

    jerk_psd: float = 0.5
    yaw_jerk_psd: float = 0.2

    def __post_init__(self) -> None:
        if not (self.jerk_psd >= 0.0 and math.isfinite(self.jerk_psd)):
            raise ValueError("jerk_psd must be finite and >= 0")
        if not (self.yaw_jerk_psd >= 0.0 and math.isfinite(self.yaw_jerk_psd)):
            raise ValueError("yaw_jerk_psd must be finite and >= 0")


@dataclass(frozen=True)
class PseudoMeasurement:
    """One odometry-derived observation of (v, psi_dot) with its covariance."""

    v_meas: float
    psi_dot_meas: float
    noise: np.ndarray
    source: Sensor
    timestamp: float

    def __post_init__(self) -> None:
        if not isinstance(self.source, Sensor):
            raise ValueError(f"source must be a Sensor, got {self.source!r}")
        for name in ("v_meas", "psi_dot_meas", "timestamp"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"{name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        noise = np.array(self.noise, dtype=float)
        if noise.shape != (2, 2):
            raise ValueError(f"noise must be 2x2, got shape {noise.shape}")
        if not np.all(np.isfinite(noise)):
            raise ValueError("noise entries must be finite")
        if abs(noise[0, 1] - noise[1, 0]) > 1e-12 * max(1.0, abs(noise[0, 1])):
            raise ValueError("noise must be symmetric")
        # 2x2 SPD check: positive leading minor and positive determinant.
        if noise[0, 0] <= 0.0 or np.linalg.det(noise) <= 0.0:
            raise ValueError("noise must be symmetric positive definite")
        noise.setflags(write=False)
        object.__setattr__(self, "noise", noise)

    def vector(self) -> np.ndarray:
        return np.array([self.v_meas, self.psi_dot_meas])


@dataclass(frozen=True)
class FilterStep:
    """Record of one prediction or correction.

    ``source`` is None for prediction-only steps, in which case
    ``innovation`` is None and ``gain`` is all zeros.
    """

    timestamp: float
    prior_state: StateVector
    prior_cov: np.ndarray
    posterior_state: StateVector
    posterior_cov: np.ndarray
    gain: np.ndarray
    innovation: np.ndarray | None
    source: Sensor | None

    @property
    def is_correction(self) -> bool:
        return self.source is not None


@dataclass(frozen=True, slots=True)
class LogRecord:
    """Collapsed per-timestamp view of the filter log."""

    timestamp: float
    state: StateVector
    cov_diag: np.ndarray
    source: Sensor | None
    innovation: np.ndarray | None


@dataclass
class TrajectoryLog:
    """Ordered filter-step log with a strictly increasing per-timestamp view."""

    steps: list[FilterStep] = field(default_factory=list)

    def corrections(self) -> list[FilterStep]:
        return [s for s in self.steps if s.is_correction]

    def records(self) -> list[LogRecord]:
        """One record per unique timestamp; the last step at a time wins."""
        out: list[LogRecord] = []
        for step in self.steps:
            rec = LogRecord(
                timestamp=step.timestamp,
                state=step.posterior_state,
                cov_diag=np.diag(step.posterior_cov).copy(),
                source=step.source,
                innovation=step.innovation,
            )
            if out and out[-1].timestamp == step.timestamp:
                out[-1] = rec
            else:
                if out and step.timestamp < out[-1].timestamp:
                    raise ValueError("log steps are not time ordered")
                out.append(rec)
        return out


def dynamics(state: StateVector) -> np.ndarray:
    """Continuous-time state derivative g(x)."""
    return np.array(
        [
            state.v * math.cos(state.psi),
            state.v * math.sin(state.psi),
            state.v_dot,
            0.0,
            state.psi_dot,
            state.psi_ddot,
            0.0,
        ]
    )


def discretize(state: StateVector, ts: float) -> StateVector:
    """Propagate the state over ``ts`` seconds.

    Third-order Taylor expansion x + Ts*g + Ts^2/2*dg/dt + Ts^3/6*d2g/dt2,
    with the time derivatives taken along the model trajectory (constant
    v_dot and psi_ddot). Local error is O(Ts^4).
    """
    if not (ts > 0.0 and math.isfinite(ts)):
        raise ValueError(f"ts must be positive and finite, got {ts!r}")
    c, s = math.cos(state.psi), math.sin(state.psi)
    v, a, w, al = state.v, state.v_dot, state.psi_dot, state.psi_ddot
    h2 = ts * ts / 2.0
    h3 = ts * ts * ts / 6.0
    x = state.x + ts * v * c + h2 * (a * c - v * w * s) + h3 * (-2.0 * a * w * s - v * al * s - v * w * w * c)
    y = state.y + ts * v * s + h2 * (a * s + v * w * c) + h3 * (2.0 * a * w * c + v * al * c - v * w * w * s)
    return StateVector(
        x=x,
        y=y,
        v=v + ts * a,
        v_dot=a,
        psi=state.psi + ts * w + h2 * al,
        psi_dot=w + ts * al,
        psi_ddot=al,
    )


def jacobian_discrete(state: StateVector, ts: float) -> np.ndarray:
    """Analytic Jacobian of :func:`discretize` with respect to the state."""
    if not (ts > 0.0 and math.isfinite(ts)):
        raise ValueError(f"ts must be positive and finite, got {ts!r}")
    c, s = math.cos(state.psi), math.sin(state.psi)
    v, a, w, al = state.v, state.v_dot, state.psi_dot, state.psi_ddot
    h2 = ts * ts / 2.0
    h3 = ts * ts * ts / 6.0
    g = np.eye(STATE_DIM)
    g[0, 2] = ts * c + h2 * (-w * s) + h3 * (-al * s - w * w * c)
    g[0, 3] = h2 * c + h3 * (-2.0 * w * s)
    g[0, 4] = -ts * v * s + h2 * (-a * s - v * w * c) + h3 * (-2.0 * a * w * c - v * al * c + v * w * w * s)
    g[0, 5] = h2 * (-v * s) + h3 * (-2.0 * a * s - 2.0 * v * w * c)
    g[0, 6] = h3 * (-v * s)
    g[1, 2] = ts * s + h2 * (w * c) + h3 * (al * c - w * w * s)
    g[1, 3] = h2 * s + h3 * (2.0 * w * c)
    g[1, 4] = ts * v * c + h2 * (a * c - v * w * s) + h3 * (-2.0 * a * w * s - v * al * s - v * w * w * c)
    g[1, 5] = h2 * (v * c) + h3 * (2.0 * a * c - 2.0 * v * w * s)
    g[1, 6] = h3 * (v * c)
    g[2, 3] = ts
    g[4, 5] = ts
    g[4, 6] = h2
    g[5, 6] = ts
    return g


def process_noise(ts: float, params: ProcessNoiseParams | None = None) -> np.ndarray:
    """Discrete process noise for one step of length ``ts``.

    White jerk drives the speed pair as the integrated 2x2 form and the
    yaw triple as the integrated 3x3 form. A floor of 1e-9 * ts is added
    to every diagonal entry so the result stays SPD even with zero
    densities (position receives no other process noise).
    """
    if not (ts > 0.0 and math.isfinite(ts)):
        raise ValueError(f"ts must be positive and finite, got {ts!r}")
    params = params or ProcessNoiseParams()
    t2, t3, t4, t5 = ts * ts, ts**3, ts**4, ts**5
    r = np.zeros((STATE_DIM, STATE_DIM))
    qv = params.jerk_psd
    r[2:4, 2:4] = qv * np.array([[t3 / 3.0, t2 / 2.0], [t2 / 2.0, ts]])
    qw = params.yaw_jerk_psd
    r[4:7, 4:7] = qw * np.array(
        [
            [t5 / 20.0, t4 / 8.0, t3 / 6.0],
            [t4 / 8.0, t3 / 3.0, t2 / 2.0],
            [t3 / 6.0, t2 / 2.0, ts],
        ]
    )
    r[np.diag_indices(STATE_DIM)] += _FLOOR_PER_SECOND * ts
    return r


def predict(
    state: StateVector,
    cov: np.ndarray,
    ts: float,
    params: ProcessNoiseParams | None = None,
) -> tuple[StateVector, np.ndarray]:
    """One prediction step: propagate the state and inflate the covariance."""
    new_state = discretize(state, ts)
    g = jacobian_discrete(state, ts)
    new_cov = symmetrize(g @ cov @ g.T + process_noise(ts, params))
    return new_state, new_cov


def measurement_matrix(source: Sensor) -> np.ndarray:
    """Selector H picking (v, psi_dot); identical for both sensors."""
    if not isinstance(source, Sensor):
        raise ValueError(f"source must be a Sensor, got {source!r}")
    h = np.zeros((2, STATE_DIM))
    h[0, IDX_V] = 1.0
    h[1, IDX_PSIDOT] = 1.0
    return h


def correct(state: StateVector, cov: np.ndarray, meas: PseudoMeasurement) -> FilterStep:
    """Kalman correction with one pseudo-measurement.

    Raises
    ------
    SingularUpdateError
        If the innovation covariance has condition number above 1e12.
    """
    h = measurement_matrix(meas.source)
    s = symmetrize(h @ cov @ h.T + meas.noise)
    cond = np.linalg.cond(s)
    if not np.isfinite(cond) or cond > SINGULAR_CONDITION_LIMIT:
        raise SingularUpdateError(
            f"innovation covariance condition number {cond:.3e} exceeds "
            f"{SINGULAR_CONDITION_LIMIT:.1e} at t={meas.timestamp:.6f}"
        )
    x = state.as_array()
    innovation = meas.vector() - h @ x
    gain = np.linalg.solve(s.T, (cov @ h.T).T).T  # P H^T S^-1
    new_state = StateVector.from_array(x + gain @ innovation)
    new_cov = symmetrize((np.eye(STATE_DIM) - gain @ h) @ cov)
    return FilterStep(
        timestamp=meas.timestamp,
        prior_state=state,
        prior_cov=cov,
        posterior_state=new_state,
        posterior_cov=new_cov,
        gain=gain,
        innovation=innovation,
        source=meas.source,
    )


class OnlineFilter:
    """Incremental filter driver used by both the batch runner and the simulator.

    Keeps the current (state, covariance, time) and optionally records
    every step. Prediction between times is chopped into equal substeps
    no longer than ``ts_max``.
    """

    def __init__(
        self,
        state: StateVector,
        cov: np.ndarray,
        params: ProcessNoiseParams | None = None,
        ts_max: float = 0.01,
        t0: float = 0.0,
        record: bool = False,
    ) -> None:
        if not (ts_max > 0.0 and math.isfinite(ts_max)):
            raise ValueError(f"ts_max must be positive, got {ts_max!r}")
        self.state = state
        self.cov = validate_covariance(cov)
        self.params = params or ProcessNoiseParams()
        self.ts_max = float(ts_max)
        self.time = float(t0)
        self.steps: list[FilterStep] | None = [] if record else None
        if record:
            zero_gain = np.zeros((STATE_DIM, 2))
            self.steps.append(
                FilterStep(
                    timestamp=self.time,
                    prior_state=state,
                    prior_cov=self.cov,
                    posterior_state=state,
                    posterior_cov=self.cov,
                    gain=zero_gain,
                    innovation=None,
                    source=None,
                )
            )

    def predict_to(self, t_target: float) -> None:
        """Advance to ``t_target`` in equal substeps of at most ``ts_max``."""
        dt_total = t_target - self.time
        if dt_total < 0.0:
            raise ValueError(f"cannot predict backwards from {self.time} to {t_target}")
        if dt_total == 0.0:
            return
        n = max(1, math.ceil(dt_total / self.ts_max - 1e-12))
        t_prev = self.time
        for i in range(1, n + 1):
            t_i = t_target if i == n else self.time + dt_total * (i / n)
            prior_state, prior_cov = self.state, self.cov
            self.state, self.cov = predict(self.state, self.cov, t_i - t_prev, self.params)
            if self.steps is not None:
                self.steps.append(
                    FilterStep(
                        timestamp=t_i,
                        prior_state=prior_state,
                        prior_cov=prior_cov,
                        posterior_state=self.state,
                        posterior_cov=self.cov,
                        gain=np.zeros((STATE_DIM, 2)),
                        innovation=None,
                        source=None,
                    )
                )
            t_prev = t_i
        self.time = t_target

    def update(self, meas: PseudoMeasurement) -> FilterStep | None:
        """Predict to the measurement time, then correct.

        A singular innovation covariance skips the correction (logged at
        warning level) and returns None.
        """
        self.predict_to(meas.timestamp)
        try:
            step = correct(self.state, self.cov, meas)
        except SingularUpdateError as exc:
            logger.warning("skipping singular update: %s", exc)
            return None
        self.state = step.posterior_state
        self.cov = step.posterior_cov
        if self.steps is not None:
            self.steps.append(step)
        return step


def _validate_events(events: list[PseudoMeasurement]) -> None:
    prev_key = (-math.inf, -1)
    for ev in events:
        if ev.timestamp < 0.0:
            raise ValueError(f"event timestamps must be >= 0, got {ev.timestamp}")
        key = (ev.timestamp, SOURCE_ORDER[ev.source])
        if key < prev_key:
            raise ValueError(
                f"events must be sorted by (timestamp, source order) with "
                f"LiDAR before thermal on ties; violation at t={ev.timestamp}"
            )
        prev_key = key


def run_filter(
    events: list[PseudoMeasurement],
    initial_state: StateVector,
    initial_cov: np.ndarray,
    ts_max: float = 0.01,
    params: ProcessNoiseParams | None = None,
    t_end: float | None = None,
) -> TrajectoryLog:
    """Run the filter over a time-ordered event stream.

    Prediction substeps are logged along with every correction, so the
    log covers [0, t_end] at a spacing no coarser than ``ts_max``.
    ``t_end`` defaults to the last event timestamp; with no events this
    is a pure dead-reckoning run to ``t_end``.
    """
    _validate_events(events)
    last_t = events[-1].timestamp if events else 0.0
    if t_end is None:
        t_end = last_t
    elif t_end < last_t:
        raise ValueError(f"t_end={t_end} precedes the last event at t={last_t}")
    flt = OnlineFilter(initial_state, initial_cov, params, ts_max, t0=0.0, record=True)
    for ev in events:
        flt.update(ev)
    flt.predict_to(t_end)
    return TrajectoryLog(steps=flt.steps)
