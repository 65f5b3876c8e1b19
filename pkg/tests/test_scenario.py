"""Scenario config parsing, simulation orchestration and stream file IO."""

import json
import math

import numpy as np
import pytest

from tunnelfusion.ekf import SOURCE_ORDER, PseudoMeasurement, Sensor
from tunnelfusion.geometry import Pose2
from tunnelfusion.lidar_sim import render_scan
from tunnelfusion.pointcloud import read_ply
from tunnelfusion.registration import RegistrationParams
from tunnelfusion.scenario import (
    EVENTS_HEADER,
    TRUTH_HEADER,
    ConfigError,
    DataError,
    OutageWindow,
    load_config,
    parse_config,
    read_events_csv,
    read_truth_csv,
    run_scenario,
    write_events_csv,
    write_scan_archive,
    write_truth_csv,
)
from tunnelfusion.thermal import thermal_quality
from tunnelfusion.tunnel import ArcSegment, StraightSegment


def _doc(duration=12.0):
    """Small straight-corridor scenario that simulates in a few seconds."""
    return {
        "name": "mini",
        "seed": 7,
        "map": {
            "segments": [{"type": "straight", "length": 80.0}],
            "half_width": 3.0,
            "wall_height": 4.0,
            "feature_density": 1.0,
            "closed_loop": False,
        },
        "trajectory": {
            "speed_targets": [{"start_s": 0.0, "speed": 2.0}],
            "accel_limit": 1.0,
            "duration_s": duration,
            "truth_rate_hz": 50.0,
        },
        "sensors": {
            "lidar": {
                "rate_hz": 2.0,
                "rays_horizontal": 64,
                "rays_vertical": 6,
                "vertical_fov_deg": 40.0,
                "max_range": 15.0,
                "range_noise_sigma": 0.01,
                "base_noise_v": 0.05,
                "base_noise_psi_dot": 0.004,
                "voxel_size": None,
                "normal_neighbors": 8,
                "planarity_threshold": 0.15,
                "max_correspondence_dist": 0.3,
                "max_iterations": 8,
            },
            "thermal": {
                "frame_rate_hz": 3.0,
                "keyframe_interval": 5,
                "scale_bias_walk_sigma": 0.005,
                "v_noise_sigma": 0.15,
                "psi_dot_noise_sigma": 0.02,
                "dropout_probability": 0.0,
                "quality_degradation": 0.0,
            },
        },
        "outages": [],
        "filter": {
            "jerk_psd": 0.5,
            "yaw_jerk_psd": 0.2,
            "ts_max": 0.02,
            "initial_cov_diag": [1e-4, 1e-4, 1e-4, 0.01, 1e-6, 1e-4, 1e-4],
        },
    }


# --------------------------------------------------------------------------
# Parsing


def test_parse_accessors_roundtrip():
    cfg = parse_config(_doc())
    assert cfg.name == "mini"
    assert cfg.seed == 7
    assert cfg.map.segments == (StraightSegment(length=80.0),)
    assert cfg.map.closed_loop is False
    assert cfg.trajectory.speed_targets[0].speed == 2.0
    assert cfg.lidar.voxel_size is None

    model = cfg.lidar_model()
    assert (model.rays_horizontal, model.rays_vertical) == (64, 6)
    assert model.vertical_fov == pytest.approx(math.radians(40.0))
    assert model.max_range == 15.0
    override = cfg.lidar_model((32, 4))
    assert (override.rays_horizontal, override.rays_vertical) == (32, 4)
    assert override.max_range == 15.0

    assert cfg.registration_params() == RegistrationParams(
        voxel_size=None,
        normal_neighbors=8,
        planarity_threshold=0.15,
        max_correspondence_dist=0.3,
        max_iterations=8,
    )

    tparams = cfg.thermal_params()
    assert tparams.frame_rate == 3.0
    assert tparams.keyframe_interval == 5
    assert tparams.v_noise_sigma == 0.15
    assert tparams.dropout_probability == 0.0

    proc = cfg.process_params()
    assert (proc.jerk_psd, proc.yaw_jerk_psd) == (0.5, 0.2)
    np.testing.assert_array_equal(
        cfg.initial_cov(), np.diag([1e-4, 1e-4, 1e-4, 0.01, 1e-6, 1e-4, 1e-4])
    )


def test_quality_degradation_rescales_thermal_params():
    doc = _doc()
    doc["sensors"]["thermal"]["quality_degradation"] = 0.5
    doc["sensors"]["thermal"]["dropout_probability"] = 0.1
    degraded = parse_config(doc).thermal_params()
    doc["sensors"]["thermal"]["quality_degradation"] = 0.0
    base = parse_config(doc).thermal_params()
    assert degraded == thermal_quality(0.5, base)
    assert degraded.v_noise_sigma == pytest.approx(0.15 * 1.5)


def test_arc_segments_parse():
    doc = _doc()
    doc["map"]["segments"].append({"type": "arc", "radius": 10.0, "angle_deg": -90.0})
    cfg = parse_config(doc)
    assert cfg.map.segments[1] == ArcSegment(radius=10.0, angle=math.radians(-90.0))


@pytest.mark.parametrize(
    "mutate, pattern",
    [
        (lambda d: d.update(bogus=1), "document: unknown key"),
        (lambda d: d["map"].update(slope=0.1), "map: unknown key"),
        (lambda d: d["sensors"]["lidar"].update(fov=1.0), r"sensors\.lidar: unknown key"),
        (lambda d: d["map"]["segments"][0].update(radius=5.0), r"map\.segments\[0\]: unknown key"),
        (lambda d: d["trajectory"]["speed_targets"][0].update(jerk=1), "unknown key"),
    ],
)
def test_unknown_keys_rejected(mutate, pattern):
    doc = _doc()
    mutate(doc)
    with pytest.raises(ConfigError, match=pattern):
        parse_config(doc)


def test_missing_field_names_path():
    doc = _doc()
    del doc["map"]["half_width"]
    with pytest.raises(ConfigError, match=r"map\.half_width: missing required field"):
        parse_config(doc)


@pytest.mark.parametrize("seed", [True, -1, 2**64, "7", 1.5, None])
def test_seed_must_be_u64(seed):
    doc = _doc()
    doc["seed"] = seed
    with pytest.raises(ConfigError, match="unsigned 64-bit"):
        parse_config(doc)


def test_seed_accepts_u64_bounds():
    for seed in (0, 2**64 - 1):
        doc = _doc()
        doc["seed"] = seed
        assert parse_config(doc).seed == seed


def test_scalar_type_checks():
    doc = _doc()
    doc["map"]["half_width"] = True
    with pytest.raises(ConfigError, match="expected a finite number"):
        parse_config(doc)
    doc = _doc()
    doc["map"]["half_width"] = float("nan")
    with pytest.raises(ConfigError, match="expected a finite number"):
        parse_config(doc)
    doc = _doc()
    doc["sensors"]["lidar"]["rays_horizontal"] = 2.5
    with pytest.raises(ConfigError, match="expected an integer"):
        parse_config(doc)
    doc = _doc()
    doc["map"]["closed_loop"] = 1
    with pytest.raises(ConfigError, match="expected a boolean"):
        parse_config(doc)
    doc = _doc()
    doc["name"] = 12
    with pytest.raises(ConfigError, match="expected a string"):
        parse_config(doc)


def test_segment_validation():
    doc = _doc()
    doc["map"]["segments"] = []
    with pytest.raises(ConfigError, match="at least one segment"):
        parse_config(doc)
    doc = _doc()
    doc["map"]["segments"][0]["type"] = "spiral"
    with pytest.raises(ConfigError, match="expected one of"):
        parse_config(doc)
    doc = _doc()
    doc["map"]["segments"] = [{"type": "arc", "radius": 10.0, "angle_deg": 0.0}]
    with pytest.raises(ConfigError, match="must be nonzero"):
        parse_config(doc)
    doc = _doc()
    doc["map"]["segments"][0]["length"] = 0.0
    with pytest.raises(ConfigError, match="must be >="):
        parse_config(doc)


def test_speed_targets_required():
    doc = _doc()
    doc["trajectory"]["speed_targets"] = []
    with pytest.raises(ConfigError, match="at least one target"):
        parse_config(doc)


def test_vertical_fov_bounds():
    doc = _doc()
    doc["sensors"]["lidar"]["vertical_fov_deg"] = 180.0
    with pytest.raises(ConfigError, match="must be <= 179"):
        parse_config(doc)


def test_outage_validation():
    doc = _doc()
    doc["outages"] = [{"sensor": "lidar", "start_s": 5.0, "end_s": 5.0}]
    with pytest.raises(ConfigError, match="start_s must be < end_s"):
        parse_config(doc)
    doc = _doc()
    doc["outages"] = [
        {"sensor": "lidar", "start_s": 0.0, "end_s": 5.0},
        {"sensor": "lidar", "start_s": 4.0, "end_s": 8.0},
    ]
    with pytest.raises(ConfigError, match="overlap for sensor lidar"):
        parse_config(doc)
    doc = _doc()
    doc["outages"] = [{"sensor": "sonar", "start_s": 0.0, "end_s": 1.0}]
    with pytest.raises(ConfigError, match="expected one of"):
        parse_config(doc)
    # Same span on different sensors is fine.
    doc = _doc()
    doc["outages"] = [
        {"sensor": "lidar", "start_s": 0.0, "end_s": 5.0},
        {"sensor": "thermal", "start_s": 2.0, "end_s": 8.0},
    ]
    cfg = parse_config(doc)
    assert len(cfg.outages) == 2


def test_initial_cov_diag_validation():
    doc = _doc()
    doc["filter"]["initial_cov_diag"] = [1e-4] * 6
    with pytest.raises(ConfigError, match="expected 7 entries"):
        parse_config(doc)
    for bad in (0.0, -1.0, True, "x", float("inf")):
        doc = _doc()
        doc["filter"]["initial_cov_diag"][3] = bad
        with pytest.raises(ConfigError, match="positive number"):
            parse_config(doc)


def test_outage_contains_half_open():
    w = OutageWindow(sensor=Sensor.LIDAR, start_s=274.0, end_s=334.0)
    assert w.contains(274.0)
    assert w.contains(333.999)
    assert not w.contains(334.0)
    assert not w.contains(273.999)

    doc = _doc()
    doc["outages"] = [{"sensor": "lidar", "start_s": 1.0, "end_s": 2.0}]
    cfg = parse_config(doc)
    assert cfg.outage_contains(Sensor.LIDAR, 1.0)
    assert not cfg.outage_contains(Sensor.LIDAR, 2.0)
    assert not cfg.outage_contains(Sensor.THERMAL, 1.5)


def test_load_config_roundtrip(tmp_path):
    path = tmp_path / "mini.json"
    path.write_text(json.dumps(_doc()), encoding="utf-8")
    assert load_config(path) == parse_config(_doc())


def test_load_config_rejects_bad_json(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json", encoding="utf-8")
    with pytest.raises(ConfigError, match="not valid JSON"):
        load_config(path)


# --------------------------------------------------------------------------
# Simulation


@pytest.fixture(scope="module")
def mini_result():
    return run_scenario(parse_config(_doc()), keep_scans=True)


def test_event_counts(mini_result):
    # 12 s at 2 Hz gives frames t = 0, 0.5, .., 11.5: 24 scans, 23 pairs.
    # Thermal at 3 Hz emits from k = 1: t = 1/3 .. 35/3, 35 frames.
    lidar = [m for m in mini_result.events if m.source is Sensor.LIDAR]
    thermal = [m for m in mini_result.events if m.source is Sensor.THERMAL]
    assert len(lidar) == 23
    assert len(thermal) == 35
    assert len(mini_result.registrations) == 23
    assert [m.timestamp for m in lidar] == [r.timestamp for r in mini_result.registrations]
    assert lidar[0].timestamp == 0.5
    assert thermal[0].timestamp == pytest.approx(1.0 / 3.0)


def test_events_sorted_lidar_first_on_ties(mini_result):
    keys = [(m.timestamp, SOURCE_ORDER[m.source]) for m in mini_result.events]
    assert keys == sorted(keys)
    # Both sensors fire at t = 1.0 exactly; the LiDAR event must come first.
    at_one = [m.source for m in mini_result.events if m.timestamp == 1.0]
    assert at_one == [Sensor.LIDAR, Sensor.THERMAL]


def test_truth_sampling(mini_result):
    truth = mini_result.truth
    assert len(truth) == 601
    assert truth[0].timestamp == 0.0
    assert truth[-1].timestamp == pytest.approx(12.0)
    # Constant 2 m/s down a straight tunnel from the origin.
    assert truth[-1].state.x == pytest.approx(24.0, abs=1e-9)
    assert truth[-1].state.y == pytest.approx(0.0, abs=1e-9)


def test_registration_records_reasonable(mini_result):
    for rec in mini_result.registrations:
        assert rec.iterations >= 1
        assert rec.final_cost >= 0.0
        assert 0.0 <= rec.alpha <= 1.0
        assert rec.correspondence_count >= 6
    # A box-studded corridor should not look like a featureless plane.
    degenerate = sum(r.degenerate for r in mini_result.registrations)
    assert degenerate < len(mini_result.registrations) / 2


def test_kept_scans(mini_result):
    scans = mini_result.scans
    assert scans is not None
    assert set(scans) == set(range(24))
    for idx, cloud in scans.items():
        assert cloud.timestamp == pytest.approx(idx / 2.0)
        assert cloud.points.shape[0] > 0


def test_scans_match_direct_render(mini_result):
    # Per-frame noise streams are keyed (seed, 3, frame) so any frame can
    # be re-rendered in isolation.
    cfg = mini_result.config
    traj = cfg.build_trajectory(cfg.build_tunnel_map())
    for idx in (0, 7):
        pose = traj.pose_at(idx / 2.0)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, idx]))
        direct = render_scan(
            mini_result.tmap,
            pose.x,
            pose.y,
            pose.psi,
            cfg.lidar_model(),
            cfg.lidar.range_noise_sigma,
            rng,
            timestamp=idx / 2.0,
        )
        np.testing.assert_array_equal(direct.points, mini_result.scans[idx].points)


def test_run_scenario_deterministic(mini_result):
    again = run_scenario(parse_config(_doc()))
    assert len(again.events) == len(mini_result.events)
    for a, b in zip(again.events, mini_result.events):
        assert a.timestamp == b.timestamp
        assert a.source is b.source
        assert a.v_meas == b.v_meas
        assert a.psi_dot_meas == b.psi_dot_meas
        np.testing.assert_array_equal(a.noise, b.noise)
    assert again.registrations == mini_result.registrations
    assert again.scans is None


def test_total_lidar_outage_yields_no_lidar_events():
    doc = _doc(duration=6.0)
    doc["outages"] = [{"sensor": "lidar", "start_s": 0.0, "end_s": 100.0}]
    result = run_scenario(parse_config(doc), keep_scans=True)
    assert not [m for m in result.events if m.source is Sensor.LIDAR]
    assert result.registrations == []
    assert result.scans == {}
    # Thermal is untouched: k = 1 .. 17 at 3 Hz over 6 s.
    assert len([m for m in result.events if m.source is Sensor.THERMAL]) == 17


def test_lidar_outage_restarts_pairing():
    # Outage swallows only the frame at t = 1.0; registration needs two
    # consecutive live scans, so the events at 1.0 and 1.5 both vanish.
    doc = _doc(duration=6.0)
    doc["outages"] = [{"sensor": "lidar", "start_s": 0.7, "end_s": 1.2}]
    result = run_scenario(parse_config(doc))
    times = [m.timestamp for m in result.events if m.source is Sensor.LIDAR]
    assert times == [0.5] + [0.5 * k for k in range(4, 12)]


def test_thermal_outage_gates_emission_only():
    # Bias walk advances through the outage, so post-outage measurements
    # match the outage-free run exactly.
    doc = _doc(duration=6.0)
    clean = run_scenario(parse_config(doc))
    doc["outages"] = [{"sensor": "thermal", "start_s": 1.0, "end_s": 3.0}]
    gated = run_scenario(parse_config(doc))
    clean_th = {m.timestamp: m for m in clean.events if m.source is Sensor.THERMAL}
    gated_th = [m for m in gated.events if m.source is Sensor.THERMAL]
    assert all(not 1.0 <= m.timestamp < 3.0 for m in gated_th)
    assert len(gated_th) < len(clean_th)
    for m in gated_th:
        assert m.v_meas == clean_th[m.timestamp].v_meas
        assert m.psi_dot_meas == clean_th[m.timestamp].psi_dot_meas


def test_rays_override_shrinks_scans():
    doc = _doc(duration=3.0)
    result = run_scenario(parse_config(doc), rays=(16, 2), keep_scans=True)
    assert result.scans
    for cloud in result.scans.values():
        assert cloud.points.shape[0] <= 32


# --------------------------------------------------------------------------
# Stream files


def _meas(t, source=Sensor.THERMAL, v=1.25, pd=0.1):
    return PseudoMeasurement(
        v_meas=v, psi_dot_meas=pd, noise=np.diag([0.01, 1e-4]), source=source, timestamp=t
    )


def test_events_csv_roundtrip(mini_result, tmp_path):
    path = tmp_path / "events.csv"
    write_events_csv(mini_result.events, path)
    text = path.read_text(encoding="utf-8")
    assert text.startswith(EVENTS_HEADER + "\n")
    assert text.endswith("\n")
    back = read_events_csv(path)
    assert len(back) == len(mini_result.events)
    for a, b in zip(back, mini_result.events):
        assert a.source is b.source
        assert a.timestamp == pytest.approx(b.timestamp, rel=1e-8, abs=1e-12)
        assert a.v_meas == pytest.approx(b.v_meas, rel=1e-8, abs=1e-12)
        assert a.psi_dot_meas == pytest.approx(b.psi_dot_meas, rel=1e-8, abs=1e-12)
        np.testing.assert_allclose(a.noise, b.noise, rtol=1e-8, atol=1e-15)
    # Serialization is reproducible byte for byte.
    twice = tmp_path / "events2.csv"
    write_events_csv(mini_result.events, twice)
    assert twice.read_bytes() == path.read_bytes()


def test_events_csv_rejections(tmp_path):
    path = tmp_path / "events.csv"
    path.write_text("nope\n", encoding="utf-8")
    with pytest.raises(DataError, match="missing event header"):
        read_events_csv(path)
    path.write_text(EVENTS_HEADER + "\n1.0,lidar,2.0\n", encoding="utf-8")
    with pytest.raises(DataError, match="expected 7 fields"):
        read_events_csv(path)
    path.write_text(
        EVENTS_HEADER + "\n1.0,sonar,2.0,0.1,0.01,0,0.0001\n", encoding="utf-8"
    )
    with pytest.raises(DataError):
        read_events_csv(path)
    write_events_csv([_meas(1.0), _meas(0.5)], path)
    with pytest.raises(DataError, match="events not sorted"):
        read_events_csv(path)
    # Equal timestamps must keep LiDAR ahead of thermal.
    write_events_csv([_meas(1.0, source=Sensor.THERMAL), _meas(1.0, source=Sensor.LIDAR)], path)
    with pytest.raises(DataError, match="events not sorted"):
        read_events_csv(path)


def test_truth_csv_roundtrip(mini_result, tmp_path):
    path = tmp_path / "truth.csv"
    write_truth_csv(mini_result.truth, path)
    assert path.read_text(encoding="utf-8").startswith(TRUTH_HEADER + "\n")
    back = read_truth_csv(path)
    assert len(back) == len(mini_result.truth)
    for a, b in zip(back, mini_result.truth):
        assert a.timestamp == pytest.approx(b.timestamp, rel=1e-8, abs=1e-12)
        np.testing.assert_allclose(
            a.state.as_array(), b.state.as_array(), rtol=1e-8, atol=1e-12
        )


def test_truth_csv_rejections(tmp_path):
    path = tmp_path / "truth.csv"
    path.write_text("t,x\n", encoding="utf-8")
    with pytest.raises(DataError, match="missing truth header"):
        read_truth_csv(path)
    path.write_text(TRUTH_HEADER + "\n0,0,0,1\n", encoding="utf-8")
    with pytest.raises(DataError, match="expected 8 fields"):
        read_truth_csv(path)
    row = "0,0,0,1,0,0,0,0"
    path.write_text(TRUTH_HEADER + f"\n{row}\n{row}\n", encoding="utf-8")
    with pytest.raises(DataError, match="not increasing"):
        read_truth_csv(path)
    path.write_text(TRUTH_HEADER + "\n0,0,oops,1,0,0,0,0\n", encoding="utf-8")
    with pytest.raises(DataError):
        read_truth_csv(path)


def test_scan_archive_naming(mini_result, tmp_path):
    out = tmp_path / "scans"
    subset = {0: mini_result.scans[0], 13: mini_result.scans[13]}
    write_scan_archive(subset, out)
    names = sorted(p.name for p in out.iterdir())
    assert names == ["scan_000000.ply", "scan_000013.ply"]
    back = read_ply(out / "scan_000013.ply")
    np.testing.assert_allclose(back.points, subset[13].points, rtol=1e-7)
