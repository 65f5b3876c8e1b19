"""Ground-truth comparison, consistency statistics and report artifacts.

Truth is linearly interpolated onto the filter log's timestamps (headings
through the unwrapped angle), position and heading errors are aggregated,
and the 2-D position NEES is checked against the central 95% chi-square
interval with two degrees of freedom. The log stores only the covariance
diagonal, so the NEES uses the diagonal of the position block.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ekf import LogRecord, Sensor
from .geometry import wrap_angle, wrap_angle_array
from .scenario import DataError
from .state import StateVector
from .tunnel import GroundTruthSample

# Central 95% interval of chi-square with 2 dof: -2*ln(0.975), -2*ln(0.025).
CHI2_2DOF_LOWER_95 = 0.050635615968579795
CHI2_2DOF_UPPER_95 = 7.3777589082278725

PREDICTION_SOURCE = "prediction-only"

LOG_HEADER = (
    "t,x,y,v,v_dot,psi,psi_dot,psi_ddot,"
    "P_xx,P_yy,P_vv,P_vdvd,P_psipsi,P_pdpd,P_pddpdd,source,innov_v,innov_psi_dot"
)
ERRORS_HEADER = (
    "t,x_true,y_true,psi_true,x_est,y_est,psi_est,v_est,psi_dot_est,"
    "err_pos,err_psi,nees,P_xx,P_yy,source"
)

_FLOAT_FMT = ".9g"


class EvaluationError(ValueError):
    """Log and truth cannot be compared (span mismatch, empty inputs)."""


def _fmt(x: float) -> str:
    return format(float(x), _FLOAT_FMT)


def _source_label(source: Sensor | None) -> str:
    return source.value if source is not None else PREDICTION_SOURCE


@dataclass(frozen=True)
class ErrorReport:
    position_rmse: float
    max_position_error: float
    final_position_error: float
    heading_rmse: float
    nees_mean: float
    nees_fraction_in_bounds: float
    timestamps: np.ndarray
    position_errors: np.ndarray
    heading_errors: np.ndarray
    nees: np.ndarray

    def to_dict(self) -> dict:
        return {
            "position_rmse": self.position_rmse,
            "max_position_error": self.max_position_error,
            "final_position_error": self.final_position_error,
            "heading_rmse": self.heading_rmse,
            "nees_mean": self.nees_mean,
            "nees_fraction_in_bounds": self.nees_fraction_in_bounds,
            "nees_bounds": [CHI2_2DOF_LOWER_95, CHI2_2DOF_UPPER_95],
            "sample_count": int(self.timestamps.size),
            "series": {
                "t": self.timestamps.tolist(),
                "err_pos": self.position_errors.tolist(),
                "err_psi": self.heading_errors.tolist(),
                "nees": self.nees.tolist(),
            },
        }


def _truth_arrays(truth: Sequence[GroundTruthSample]) -> tuple[np.ndarray, ...]:
    tt = np.array([s.timestamp for s in truth])
    xs = np.array([s.state.x for s in truth])
    ys = np.array([s.state.y for s in truth])
    psis = np.unwrap(np.array([s.state.psi for s in truth]))
    return tt, xs, ys, psis


def _interpolate_truth(
    records: Sequence[LogRecord], truth: Sequence[GroundTruthSample]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    if not records:
        raise EvaluationError("filter log is empty")
    if len(truth) < 2:
        raise EvaluationError("ground truth needs at least two samples")
    tt, xs, ys, psis = _truth_arrays(truth)
    lt = np.array([r.timestamp for r in records])
    if lt[0] < tt[0] - 1e-9 or lt[-1] > tt[-1] + 1e-9:
        raise EvaluationError(
            f"truth spans [{tt[0]:.6f}, {tt[-1]:.6f}] s but the log spans "
            f"[{lt[0]:.6f}, {lt[-1]:.6f}] s"
        )
    return lt, np.interp(lt, tt, xs), np.interp(lt, tt, ys), np.interp(lt, tt, psis)


def compute_errors(
    records: Sequence[LogRecord], truth: Sequence[GroundTruthSample]
) -> ErrorReport:
    """Compare filter output against interpolated ground truth."""
    lt, x_true, y_true, psi_true = _interpolate_truth(records, truth)
    x_est = np.array([r.state.x for r in records])
    y_est = np.array([r.state.y for r in records])
    psi_est = np.array([r.state.psi for r in records])
    p_xx = np.array([r.cov_diag[0] for r in records])
    p_yy = np.array([r.cov_diag[1] for r in records])

    ex = x_est - x_true
    ey = y_est - y_true
    err_pos = np.hypot(ex, ey)
    err_psi = wrap_angle_array(psi_est - psi_true)
    nees = ex * ex / p_xx + ey * ey / p_yy
    in_bounds = (nees >= CHI2_2DOF_LOWER_95) & (nees <= CHI2_2DOF_UPPER_95)

    return ErrorReport(
        position_rmse=float(np.sqrt(np.mean(err_pos**2))),
        max_position_error=float(err_pos.max()),
        final_position_error=float(err_pos[-1]),
        heading_rmse=float(np.sqrt(np.mean(err_psi**2))),
        nees_mean=float(nees.mean()),
        nees_fraction_in_bounds=float(in_bounds.mean()),
        timestamps=lt,
        position_errors=err_pos,
        heading_errors=err_psi,
        nees=nees,
    )


# --------------------------------------------------------------------------
# CSV artifacts


def write_log_csv(records: Sequence[LogRecord], path: str | Path) -> None:
    lines = [LOG_HEADER]
    for r in records:
        st = r.state
        innov = ("", "") if r.innovation is None else (_fmt(r.innovation[0]), _fmt(r.innovation[1]))
        fields = [
            _fmt(r.timestamp),
            _fmt(st.x), _fmt(st.y), _fmt(st.v), _fmt(st.v_dot),
            _fmt(st.psi), _fmt(st.psi_dot), _fmt(st.psi_ddot),
        ]
        fields.extend(_fmt(r.cov_diag[i]) for i in range(7))
        fields.append(_source_label(r.source))
        fields.extend(innov)
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def read_log_csv(path: str | Path) -> list[LogRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise DataError(f"{path}: missing log header")
    out: list[LogRecord] = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 18:
            raise DataError(f"{path}:{ln}: expected 18 fields, got {len(parts)}")
        try:
            t = float(parts[0])
            vals = [float(p) for p in parts[1:8]]
            diag = np.array([float(p) for p in parts[8:15]])
            source = None if parts[15] == PREDICTION_SOURCE else Sensor(parts[15])
            if parts[16] == "" and parts[17] == "":
                innovation = None
            else:
                innovation = np.array([float(parts[16]), float(parts[17])])
        except ValueError as exc:
            raise DataError(f"{path}:{ln}: {exc}") from None
        state = StateVector(
            x=vals[0], y=vals[1], v=vals[2], v_dot=vals[3],
            psi=vals[4], psi_dot=vals[5], psi_ddot=vals[6],
        )
        out.append(
            LogRecord(timestamp=t, state=state, cov_diag=diag, source=source, innovation=innovation)
        )
    for a, b in zip(out, out[1:]):
        if b.timestamp <= a.timestamp:
            raise DataError(f"{path}: log timestamps not strictly increasing at t={b.timestamp}")
    return out


def export_csv(
    records: Sequence[LogRecord],
    truth: Sequence[GroundTruthSample],
    path: str | Path,
) -> None:
    """Write the combined estimate/truth/error table; deterministic bytes."""
    lines = [ERRORS_HEADER]
    if records:
        lt, x_true, y_true, psi_true = _interpolate_truth(records, truth)
        for i, r in enumerate(records):
            st = r.state
            ex = st.x - x_true[i]
            ey = st.y - y_true[i]
            err_psi = wrap_angle(st.psi - psi_true[i])
            nees = ex * ex / r.cov_diag[0] + ey * ey / r.cov_diag[1]
            lines.append(
                ",".join(
                    (
                        _fmt(r.timestamp),
                        _fmt(x_true[i]), _fmt(y_true[i]), _fmt(wrap_angle(psi_true[i])),
                        _fmt(st.x), _fmt(st.y), _fmt(st.psi),
                        _fmt(st.v), _fmt(st.psi_dot),
                        _fmt(math.hypot(ex, ey)), _fmt(err_psi), _fmt(nees),
                        _fmt(r.cov_diag[0]), _fmt(r.cov_diag[1]),
                        _source_label(r.source),
                    )
                )
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def write_report_json(report: ErrorReport, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
        newline="\n",
    )


# --------------------------------------------------------------------------
# Plots


def render_plots(
    report: ErrorReport,
    records: Sequence[LogRecord],
    truth: Sequence[GroundTruthSample],
    out_dir: str | Path,
) -> list[Path]:
    """Emit trajectory.svg, heading.svg and pos_error.svg under ``out_dir``."""
    if not records:
        raise EvaluationError("cannot plot an empty log")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "tunnelfusion"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tt, xs, ys, psis = _truth_arrays(truth)
    lt = np.array([r.timestamp for r in records])
    x_est = np.array([r.state.x for r in records])
    y_est = np.array([r.state.y for r in records])
    psi_est = np.unwrap(np.array([r.state.psi for r in records]))
    paths = []

    fig, ax = plt.subplots(figsize=(7.0, 6.0))
    ax.plot(xs, ys, color="tab:blue", label="ground truth")
    ax.plot(x_est, y_est, color="tab:orange", linestyle="--", label="estimate")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend()
    ax.set_title("Top-down trajectory")
    paths.append(_save(fig, out / "trajectory.svg"))

    fig, ax = plt.subplots(figsize=(8.0, 4.0))
    ax.plot(tt, psis, color="tab:blue", label="ground truth")
    ax.plot(lt, psi_est, color="tab:orange", linestyle="--", label="estimate")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("heading [rad]")
    ax.legend()
    ax.set_title("Heading estimate vs. truth")
    paths.append(_save(fig, out / "heading.svg"))

    fig, ax = plt.subplots(figsize=(8.0, 4.0))
    ax.plot(report.timestamps, report.position_errors, color="tab:red")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("position error [m]")
    ax.set_title("Position error over time")
    paths.append(_save(fig, out / "pos_error.svg"))
    return paths


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="svg", metadata={"Date": None})
    import matplotlib.pyplot as plt

    plt.close(fig)
    return path
