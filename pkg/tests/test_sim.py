import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from gnss_pds.errors import ConfigError, InvalidInputError, TraceFormatError
from gnss_pds.sim import (
    Anchor,
    AnchorKind,
    AttackConfig,
    DriftConfig,
    Shape,
    Source,
    TraceConfig,
    apply_spoofing,
    dead_reckon_path,
    generate_truth_trace,
    load_trace,
    place_anchors,
    synth_gnss,
    synth_imu,
    synth_network_positions,
    synthesize,
    weighted_centroid,
    write_trace,
)


@pytest.fixture(scope="module")
def short_trace():
    return synthesize(TraceConfig(duration=30.0, rng_seed=5), Shape.RANDOM_WAYPOINT)


def test_straight_line_spacing():
    truth = generate_truth_trace(TraceConfig(duration=10.0, speed=10.0), Shape.STRAIGHT)
    xy = truth.positions.xy
    assert len(xy) == 11
    np.testing.assert_allclose(np.linalg.norm(np.diff(xy, axis=0), axis=1), 10.0, atol=1e-9)
    # collinear: zero cross product with the first step
    d = xy - xy[0]
    assert np.abs(d[:, 0] * d[-1, 1] - d[:, 1] * d[-1, 0]).max() < 1e-6


def test_arc_heading_change():
    truth = generate_truth_trace(TraceConfig(duration=10.0, yaw_rate=0.1), Shape.ARC)
    h = truth.epoch_heading
    assert h[10] - h[0] == pytest.approx(1.0, abs=1e-9)


@pytest.mark.parametrize("shape", list(Shape))
def test_truth_is_kinematically_consistent(shape):
    truth = generate_truth_trace(TraceConfig(duration=60.0, rng_seed=2), shape)
    dt = np.diff(truth.t)
    vel = np.diff(truth.xy, axis=0) / dt[:, None]
    speed_mid = 0.5 * (truth.speed[1:] + truth.speed[:-1])
    # chord speed can only undershoot the mean arc speed, and only slightly
    assert np.abs(np.linalg.norm(vel, axis=1) - speed_mid).max() < 1e-3
    assert truth.speed.max() <= 25.0
    np.testing.assert_allclose(np.diff(truth.speed), truth.motion.a[:-1, 1] * dt, atol=1e-9)


def test_truth_replay_is_bit_identical():
    cfg = TraceConfig(duration=60.0, rng_seed=11)
    a, _ = synthesize(cfg, Shape.RANDOM_WAYPOINT)
    b, _ = synthesize(cfg, Shape.RANDOM_WAYPOINT)
    for src, s in a.streams().items():
        t = b.streams()[src]
        assert s.xy.tobytes() == t.xy.tobytes()
        assert s.available.tobytes() == t.available.tobytes()
    assert a.motion.a.tobytes() == b.motion.a.tobytes()


def test_gnss_zero_noise_is_truth():
    cfg = TraceConfig(duration=20.0, gnss_noise_var=0.0)
    truth = generate_truth_trace(cfg)
    g = synth_gnss(truth, cfg)
    np.testing.assert_array_equal(g.xy, truth.positions.xy)
    assert g.available.all()


def test_gnss_noise_variance():
    cfg = TraceConfig(duration=9999.0, imu_rate=1.0, rng_seed=1)
    truth = generate_truth_trace(cfg)
    g = synth_gnss(truth, cfg)
    assert len(g) == 10_000
    var = (g.xy - truth.positions.xy).var(axis=0, ddof=1)
    # chi-square 99% interval for the sample variance at n = 10 000
    n = len(g)
    lo, hi = 0.9 * stats.chi2.ppf([0.005, 0.995], n - 1) / (n - 1)
    assert 0.85 < lo and hi < 0.95
    assert np.all((var >= 0.85) & (var <= 0.95))


def test_wcl_square_centre():
    corners = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], float)
    d = np.linalg.norm(corners - [5, 5], axis=1)
    est = weighted_centroid(corners, 20 - 20 * np.log10(d))
    np.testing.assert_allclose(est, [5, 5], atol=1e-12)


def test_wcl_dominant_anchor():
    anchors = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], float)
    est = weighted_centroid(anchors, np.array([-30.0, -400.0, -400.0, -400.0]))
    np.testing.assert_allclose(est, [0, 0], atol=1e-30)


@settings(max_examples=200, deadline=None)
@given(
    pts=st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=3, max_size=8, unique=True),
    rss=st.lists(st.floats(-120, 40), min_size=8, max_size=8),
)
def test_wcl_inside_convex_hull(pts, rss):
    pts = np.array(pts)
    est = weighted_centroid(pts, np.array(rss[: len(pts)]))
    # within the axis-aligned bounds and a convex combination (LP-free check)
    lo, hi = pts.min(0), pts.max(0)
    assert np.all(est >= lo - 1e-9) and np.all(est <= hi + 1e-9)
    w = np.power(10.0, (np.array(rss[: len(pts)]) - max(rss[: len(pts)])) / 10)
    assert np.all(w >= 0)


def test_network_requires_three_anchors():
    cfg = TraceConfig(duration=5.0)
    truth = generate_truth_trace(cfg)
    anchors = [Anchor(i, (float(i), 0.0), AnchorKind.AP, 20.0) for i in range(2)]
    with pytest.raises(ConfigError):
        synth_network_positions(truth, anchors, cfg)


def test_unavailability_count():
    cfg = TraceConfig(duration=9999.0, imu_rate=1.0, rng_seed=4, unavailability=0.05)
    truth = generate_truth_trace(cfg)
    s = synth_network_positions(truth, place_anchors(truth, cfg, AnchorKind.AP), cfg)
    lo, hi = stats.binom.ppf([0.005, 0.995], 10_000, 0.05)
    assert 420 <= lo and hi <= 580
    assert 420 <= (~s.available).sum() <= 580


def test_anchors_distinct_and_near_path():
    cfg = TraceConfig(duration=120.0, rng_seed=9)
    truth = generate_truth_trace(cfg, Shape.RANDOM_WAYPOINT)
    anchors = place_anchors(truth, cfg, AnchorKind.BS)
    pos = np.array([a.p for a in anchors])
    assert len(np.unique(pos, axis=0)) == len(pos)
    assert len({a.id for a in anchors}) == len(anchors)


def test_network_bias_small_without_noise():
    cfg = TraceConfig(duration=300.0, rng_seed=3, wifi_noise_var=0.0)
    truth = generate_truth_trace(cfg, Shape.RANDOM_WAYPOINT)
    s = synth_network_positions(truth, place_anchors(truth, cfg, AnchorKind.AP), cfg)
    err = np.linalg.norm(s.xy - truth.positions.xy, axis=1)
    assert np.sqrt((err**2).mean()) < 3.0


def test_imu_identity_without_drift():
    truth = generate_truth_trace(TraceConfig(duration=10.0), Shape.ARC)
    m = synth_imu(truth.motion, DriftConfig.zero())
    for name in ("v", "a", "attitude"):
        np.testing.assert_array_equal(getattr(m, name), getattr(truth.motion, name))


def test_constant_accel_bias_double_integrates():
    b, big_t = 0.05, 40.0
    cfg = TraceConfig(duration=big_t, speed=0.0)
    truth = generate_truth_trace(cfg)
    drift = DriftConfig(0.0, 0.0, 0.0, (0.0, b, 0.0), 0.0, 0.0, 0.0, 0.0)
    m = synth_imu(truth.motion, drift)
    dr = dead_reckon_path(m, (0.0, 0.0), use_speed=False)
    assert np.linalg.norm(dr[-1]) == pytest.approx(0.5 * b * big_t**2, rel=1e-9)


def test_default_drift_exceeds_five_meters_after_a_minute():
    truth = generate_truth_trace(TraceConfig(duration=60.0), Shape.STRAIGHT)
    errs = []
    for seed in range(20):
        m = synth_imu(truth.motion, DriftConfig(), seed=seed)
        dr = dead_reckon_path(m, truth.xy[0])
        errs.append(np.linalg.norm(dr[-1] - truth.xy[-1]))
    # regression floor measured on these 20 seeds (median ~7.2 m)
    assert np.median(errs) > 5.0


@pytest.mark.parametrize(
    "t, expected",
    [(19.9, 0.0), (20.0, 1.0), (29.9, 1.0), (30.0, 1.0), (33.0, 8.0), (40.0, 10.0), (500.0, 10.0)],
)
def test_deviation_profile(t, expected):
    atk = AttackConfig(onset=20.0, profile_offset=1.0, growth_rate=2.0, max_deviation=10.0, stage1_duration=10.0)
    assert float(atk.deviation(t)) == pytest.approx(expected)


@pytest.mark.parametrize(
    "kwargs",
    [dict(growth_rate=1.0), dict(profile_offset=-1.0), dict(max_deviation=0.5), dict(onset=-1.0), dict(direction=(1.0, 1.0))],
)
def test_attack_config_invariants(kwargs):
    base = dict(onset=10.0, profile_offset=1.0, growth_rate=1.5, max_deviation=10.0)
    base.update(kwargs)
    with pytest.raises(ConfigError):
        AttackConfig(**base)


@settings(max_examples=50, deadline=None)
@given(
    onset=st.floats(0, 50),
    offset=st.floats(0, 5),
    growth=st.floats(1.01, 4),
    extra=st.floats(0, 20),
    heading_seed=st.integers(0, 1000),
)
def test_spoofing_adds_exact_deviation(onset, offset, growth, extra, heading_seed):
    cfg = TraceConfig(duration=80.0, imu_rate=1.0)
    g = synth_gnss(generate_truth_trace(cfg), cfg)
    heading = np.random.default_rng(heading_seed).uniform(-math.pi, math.pi, len(g))
    atk = AttackConfig(onset=onset, profile_offset=offset, growth_rate=growth, max_deviation=offset + extra)
    s = apply_spoofing(g, atk, heading)
    delta = s.xy - g.xy
    d = atk.deviation(g.t)
    np.testing.assert_allclose(np.linalg.norm(delta, axis=1), d, atol=1e-12)
    np.testing.assert_array_equal(s.xy[g.t < onset], g.xy[g.t < onset])
    # lateral: perpendicular to the heading direction
    fwd = np.column_stack([-np.sin(heading), np.cos(heading)])
    assert np.abs((delta * fwd).sum(1)).max() < 1e-12
    assert np.linalg.norm(delta, axis=1).max() <= offset + extra + 1e-12


def test_spoofing_cap_reached():
    cfg = TraceConfig(duration=80.0, imu_rate=1.0)
    g = synth_gnss(generate_truth_trace(cfg), cfg)
    s = apply_spoofing(g, AttackConfig(onset=5.0, direction=(0.0, 1.0), max_deviation=10.0))
    assert np.linalg.norm(s.xy - g.xy, axis=1).max() == pytest.approx(10.0, abs=1e-12)


def test_spoofing_onset_beyond_trace():
    cfg = TraceConfig(duration=10.0, imu_rate=1.0)
    g = synth_gnss(generate_truth_trace(cfg), cfg)
    with pytest.raises(InvalidInputError):
        apply_spoofing(g, AttackConfig(onset=11.0, direction=(1.0, 0.0)))


def test_csv_round_trip(tmp_path, short_trace):
    trace, _ = short_trace
    write_trace(trace, tmp_path)
    back = load_trace(tmp_path)
    for src, s in trace.streams().items():
        t = back.streams()[src]
        np.testing.assert_array_equal(s.t, t.t)
        np.testing.assert_array_equal(s.xy, t.xy)
        np.testing.assert_array_equal(s.available, t.available)
    for name in ("t", "v", "a", "attitude"):
        np.testing.assert_array_equal(getattr(trace.motion, name), getattr(back.motion, name))


def test_csv_without_motion(tmp_path, short_trace):
    trace, _ = short_trace
    trace = type(trace)(trace.truth, trace.gnss, {}, None)
    write_trace(trace, tmp_path)
    back = load_trace(tmp_path / "positions.csv")
    assert back.motion is None
    assert back.networks == {}


def test_csv_empty_file(tmp_path):
    (tmp_path / "positions.csv").write_text("")
    with pytest.raises(TraceFormatError):
        load_trace(tmp_path)


def test_csv_malformed_row_names_line(tmp_path):
    (tmp_path / "positions.csv").write_text(
        "t,src,east,north,avail\n0.0,TRUTH,0,0,1\n0.0,GNSS,abc,0,1\n"
    )
    with pytest.raises(TraceFormatError) as exc:
        load_trace(tmp_path)
    assert exc.value.line == 3
    assert "line 3" in str(exc.value)


def test_csv_non_monotonic(tmp_path):
    (tmp_path / "positions.csv").write_text(
        "t,src,east,north,avail\n1.0,TRUTH,0,0,1\n0.5,TRUTH,0,0,1\n1.0,GNSS,0,0,1\n"
    )
    with pytest.raises(TraceFormatError) as exc:
        load_trace(tmp_path)
    assert exc.value.line == 3


def test_csv_requires_truth_and_gnss(tmp_path):
    (tmp_path / "positions.csv").write_text("t,src,east,north,avail\n1.0,TRUTH,0,0,1\n")
    with pytest.raises(TraceFormatError):
        load_trace(tmp_path)


def test_written_csv_is_byte_identical(tmp_path):
    cfg = TraceConfig(duration=20.0, rng_seed=8)
    for name in ("a", "b"):
        trace, _ = synthesize(cfg, Shape.ARC)
        write_trace(trace, tmp_path / name)
    for f in ("positions.csv", "motion.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
