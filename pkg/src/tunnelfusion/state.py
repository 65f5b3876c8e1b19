"""Filter state container and covariance helpers.

The state is the 7-vector [x, y, v, v_dot, psi, psi_dot, psi_ddot]:
planar position, speed along the heading, its rate, heading, yaw rate
and yaw acceleration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import wrap_angle

STATE_DIM = 7

# Channel indices into the state vector.
IDX_X, IDX_Y, IDX_V, IDX_VDOT, IDX_PSI, IDX_PSIDOT, IDX_PSIDDOT = range(STATE_DIM)

_FIELDS = ("x", "y", "v", "v_dot", "psi", "psi_dot", "psi_ddot")


@dataclass(frozen=True, slots=True)
class StateVector:
    """Immutable filter state; ``psi`` is wrapped to (-pi, pi] on construction."""

    x: float = 0.0
    y: float = 0.0
    v: float = 0.0
    v_dot: float = 0.0
    psi: float = 0.0
    psi_dot: float = 0.0
    psi_ddot: float = 0.0

    def __post_init__(self) -> None:
        for name in _FIELDS:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ValueError(f"state channel {name} must be finite, got {value!r}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "psi", wrap_angle(self.psi))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.v_dot, self.psi, self.psi_dot, self.psi_ddot])

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "StateVector":
        arr = np.asarray(arr, dtype=float).reshape(STATE_DIM)
        return cls(*arr)


def symmetrize(cov: np.ndarray) -> np.ndarray:
    """Re-symmetrize a covariance: (P + P^T) / 2."""
    return (cov + cov.T) / 2.0


def validate_covariance(cov: np.ndarray, *, atol: float = 1e-9) -> np.ndarray:
    """Check shape, symmetry and a positive diagonal; returns a float copy.

    Full positive definiteness is not verified here (prediction and
    correction preserve it); this guards the obvious misuse cases.
    """
    cov = np.array(cov, dtype=float)
    if cov.shape != (STATE_DIM, STATE_DIM):
        raise ValueError(f"covariance must be {STATE_DIM}x{STATE_DIM}, got {cov.shape}")
    if not np.all(np.isfinite(cov)):
        raise ValueError("covariance entries must be finite")
    if np.max(np.abs(cov - cov.T)) > atol:
        raise ValueError("covariance must be symmetric")
    if np.any(np.diag(cov) <= 0.0):
        raise ValueError("covariance diagonal must be positive")
    return cov
