"""Thermal-LiDAR fusion localization for GNSS-denied tunnels.

A 7-state extended Kalman filter fuses velocity / yaw-rate
pseudo-measurements from hybrid point-to-point / point-to-plane LiDAR
scan registration and a simulated thermal-camera odometry, validated
against a synthetic tunnel simulator with sensor-outage injection.
"""

from .ekf import (
    FilterStep,
    LogRecord,
    OnlineFilter,
    ProcessNoiseParams,
    PseudoMeasurement,
    Sensor,
    SingularUpdateError,
    TrajectoryLog,
    correct,
    discretize,
    dynamics,
    jacobian_discrete,
    measurement_matrix,
    predict,
    process_noise,
    run_filter,
)
from .evaluation import (
    CHI2_2DOF_LOWER_95,
    CHI2_2DOF_UPPER_95,
    ErrorReport,
    EvaluationError,
    compute_errors,
    export_csv,
    read_log_csv,
    render_plots,
    write_log_csv,
    write_report_json,
)
from .geometry import (
    DegenerateOrientationError,
    Pose2,
    Transform3,
    transform_to_planar,
    wrap_angle,
    wrap_angle_array,
)
from .lidar_sim import LidarModel, ray_directions, render_scan
from .pointcloud import (
    Correspondences,
    NormalEstimate,
    PointCloud,
    associate,
    estimate_normals,
    read_ply,
    voxel_downsample,
    write_ply,
)
from .registration import (
    RegistrationFailedError,
    RegistrationParams,
    RegistrationResult,
    compute_alpha,
    odometry_to_pseudo,
    register,
    solve_step,
)
from .scenario import (
    ConfigError,
    DataError,
    OutageWindow,
    ScenarioConfig,
    ScenarioResult,
    load_config,
    parse_config,
    read_events_csv,
    read_truth_csv,
    run_scenario,
    write_events_csv,
    write_truth_csv,
)
from .state import IDX_PSI, IDX_PSIDOT, IDX_V, IDX_X, IDX_Y, STATE_DIM, StateVector
from .thermal import (
    ThermalOdomParams,
    ThermalOdomState,
    init_thermal_state,
    thermal_quality,
    thermal_step,
)
from .tunnel import (
    ArcSegment,
    CrossSection,
    GroundTruthSample,
    InvalidMapError,
    InvalidPoseError,
    SpeedTarget,
    StraightSegment,
    Trajectory,
    TunnelMap,
    build_map,
    generate_trajectory,
)

__version__ = "0.1.0"

__all__ = [
    "ArcSegment",
    "CHI2_2DOF_LOWER_95",
    "CHI2_2DOF_UPPER_95",
    "ConfigError",
    "Correspondences",
    "CrossSection",
    "DataError",
    "DegenerateOrientationError",
    "ErrorReport",
    "EvaluationError",
    "FilterStep",
    "GroundTruthSample",
    "IDX_PSI",
    "IDX_PSIDOT",
    "IDX_V",
    "IDX_X",
    "IDX_Y",
    "InvalidMapError",
    "InvalidPoseError",
    "LidarModel",
    "LogRecord",
    "NormalEstimate",
    "OnlineFilter",
    "OutageWindow",
    "PointCloud",
    "Pose2",
    "ProcessNoiseParams",
    "PseudoMeasurement",
    "RegistrationFailedError",
    "RegistrationParams",
    "RegistrationResult",
    "STATE_DIM",
    "ScenarioConfig",
    "ScenarioResult",
    "Sensor",
    "SingularUpdateError",
    "SpeedTarget",
    "StateVector",
    "StraightSegment",
    "ThermalOdomParams",
    "ThermalOdomState",
    "Trajectory",
    "TrajectoryLog",
    "Transform3",
    "TunnelMap",
    "associate",
    "build_map",
    "compute_alpha",
    "compute_errors",
    "correct",
    "discretize",
    "dynamics",
    "estimate_normals",
    "export_csv",
    "generate_trajectory",
    "init_thermal_state",
    "jacobian_discrete",
    "load_config",
    "measurement_matrix",
    "odometry_to_pseudo",
    "parse_config",
    "predict",
    "process_noise",
    "ray_directions",
    "read_events_csv",
    "read_log_csv",
    "read_ply",
    "read_truth_csv",
    "register",
    "render_plots",
    "render_scan",
    "run_filter",
    "run_scenario",
    "solve_step",
    "thermal_quality",
    "thermal_step",
    "transform_to_planar",
    "voxel_downsample",
    "wrap_angle",
    "wrap_angle_array",
    "write_events_csv",
    "write_log_csv",
    "write_ply",
    "write_report_json",
    "write_truth_csv",
]
