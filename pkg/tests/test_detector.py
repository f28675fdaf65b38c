import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gnss_pds.detector import (
    AlignmentWarning,
    Detector,
    DetectorConfig,
    Epoch,
    Mode,
    build_epochs,
    fused_log_likelihood,
    initialize,
    run,
)
from gnss_pds.errors import ConfigError, InitializationError, InvalidInputError
from gnss_pds.fusion import categorical_fuse, log_likelihood
from gnss_pds.sim import (
    AttackConfig,
    PositionStream,
    Shape,
    Source,
    Trace,
    TraceConfig,
    apply_spoofing,
    synthesize,
    with_gnss,
)


@pytest.fixture(scope="module")
def calib_trace():
    return synthesize(TraceConfig(duration=300, rng_seed=11), Shape.RANDOM_WAYPOINT)[0]


@pytest.fixture(scope="module")
def test_pair():
    return synthesize(TraceConfig(duration=200, rng_seed=12), Shape.RANDOM_WAYPOINT)


@pytest.fixture(scope="module")
def all_detector(calib_trace):
    return initialize(DetectorConfig(mode=Mode.ALL), calib_trace)


@pytest.fixture(scope="module")
def spoofed(test_pair):
    trace, truth = test_pair
    atk = AttackConfig(onset=100, profile_offset=10, max_deviation=20)
    return with_gnss(trace, apply_spoofing(trace.gnss, atk, truth.epoch_heading))


def _without_motion(trace):
    return Trace(trace.truth, trace.gnss, trace.networks, None)


def _without_networks(trace):
    dead = {
        src: PositionStream(src, s.t, s.xy, np.zeros(len(s.t), dtype=bool))
        for src, s in trace.networks.items()
    }
    return Trace(trace.truth, trace.gnss, dead, trace.motion)


# --- configuration and initialization ---------------------------------------

@pytest.mark.parametrize("kwargs", [
    {"window": 3},
    {"p_fp_max": 1.0},
    {"eps": -1.0},
    {"readmit_after": -1},
    {"warmup": 25},
    {"mode": "BOTH"},
])
def test_config_rejects(kwargs):
    with pytest.raises((ConfigError, ValueError)):
        DetectorConfig(**kwargs)


def test_init_happy_path(all_detector):
    assert math.isfinite(all_detector.gamma)
    assert all(math.isfinite(g) for g in all_detector.regime_gammas.values())
    assert Source.GNSS in all_detector.covariances


def test_init_deterministic(calib_trace, all_detector):
    again = initialize(DetectorConfig(mode=Mode.ALL), calib_trace)
    assert again.gamma == all_detector.gamma
    assert again.regime_gammas == all_detector.regime_gammas


def test_init_short_trace():
    short, _ = synthesize(TraceConfig(duration=10, rng_seed=3))
    with pytest.raises(InitializationError):
        initialize(DetectorConfig(mode=Mode.NETWORKS_ONLY), short)


def test_networks_only_without_networks(calib_trace):
    with pytest.raises(InitializationError):
        initialize(DetectorConfig(mode=Mode.NETWORKS_ONLY), _without_networks(calib_trace))


@pytest.mark.parametrize("mode", [Mode.SENSORS_ONLY, Mode.ALL])
def test_sensor_modes_need_imu(calib_trace, mode):
    with pytest.raises(ConfigError):
        initialize(DetectorConfig(mode=mode), _without_motion(calib_trace))


def test_run_needs_calibration(test_pair):
    with pytest.raises(InitializationError):
        run(test_pair[0], DetectorConfig(mode=Mode.NETWORKS_ONLY))


# --- stepping ------------------------------------------------------------------

def test_one_verdict_per_epoch(all_detector, test_pair):
    verdicts = run(test_pair[0], all_detector.config, all_detector)
    assert len(verdicts) == len(test_pair[0].gnss)
    assert [v.t for v in verdicts] == list(test_pair[0].gnss.t)


def test_warmup_epochs_undecided(all_detector, test_pair):
    verdicts = run(test_pair[0], all_detector.config, all_detector)
    assert not any(v.decided for v in verdicts[: all_detector.config.warmup])
    assert all(v.decided for v in verdicts[all_detector.config.warmup + 5 : 60])


def test_replay_identical(all_detector, spoofed):
    a = run(spoofed, all_detector.config, all_detector)
    b = run(spoofed, all_detector.config, all_detector)
    assert [(v.log_likelihood, v.is_attack) for v in a] == [(v.log_likelihood, v.is_attack) for v in b]
    np.testing.assert_array_equal([v.alt_position for v in a], [v.alt_position for v in b])


def test_time_must_increase(all_detector, test_pair):
    det = copy.deepcopy(all_detector)
    det.reset()
    epochs = build_epochs(test_pair[0])
    det.step(epochs[5])
    with pytest.raises(InvalidInputError):
        det.step(epochs[5])
    with pytest.raises(InvalidInputError):
        det.step(epochs[4])


def test_snapshot_is_independent(all_detector, test_pair):
    det = copy.deepcopy(all_detector)
    det.reset()
    epochs = build_epochs(test_pair[0])
    for e in epochs[:40]:
        det.step(e)
    branch = det.snapshot()
    before = [e.t for e in branch.window]
    for e in epochs[40:50]:
        det.step(e)
    assert [e.t for e in branch.window] == before
    assert branch.step(epochs[40]).t == 40.0


def test_golden_spoofed_epoch(all_detector, spoofed):
    verdicts = run(spoofed, all_detector.config, all_detector)
    v = verdicts[100]
    assert v.t == 100.0
    assert v.is_attack
    assert v.regime == ("GNSS", "WIFI", "CELLULAR")
    assert v.log_likelihood == pytest.approx(-44.737028139369755, rel=1e-6)
    assert all(w.is_attack for w in verdicts[100:105])


def test_golden_benign_prefix(all_detector, spoofed):
    verdicts = run(spoofed, all_detector.config, all_detector)
    pre = [v.is_attack for v in verdicts[:100] if v.decided]
    assert np.mean(pre) <= 0.2


def test_alt_position_excludes_spoofed_gnss(all_detector, spoofed):
    verdicts = run(spoofed, all_detector.config, all_detector)
    alt = np.array([v.alt_position for v in verdicts[100:]])
    truth = spoofed.truth.xy[100:]
    alt_err = np.linalg.norm(alt - truth, axis=1)
    gnss_err = np.linalg.norm(spoofed.gnss.xy[100:] - truth, axis=1)
    assert alt_err.mean() < gnss_err.mean()


# --- invariants ------------------------------------------------------------------

def test_quarantine_property(all_detector, spoofed):
    det = copy.deepcopy(all_detector)
    det.reset()
    flagged = set()
    for e in build_epochs(spoofed):
        v = det.step(e)
        if v.is_attack:
            flagged.add(v.t)
        for t, sources in det.window_sources():
            if t in flagged:
                assert Source.GNSS not in sources
    assert flagged


def test_quarantine_holds_until_readmitted(all_detector, spoofed):
    det = copy.deepcopy(all_detector)
    det.reset()
    streak = None
    for e in build_epochs(spoofed):
        v = det.step(e)
        has_gnss = Source.GNSS in det.window_sources()[-1][1]
        if v.is_attack:
            streak = 0
            assert not has_gnss
        elif streak is not None:
            streak += 1
            if streak < det.config.readmit_after:
                assert not has_gnss
            else:
                streak = None


@settings(max_examples=10, deadline=None)
@given(window=st.integers(4, 30), start=st.integers(0, 100))
def test_window_capacity(test_pair, window, start):
    cfg = DetectorConfig(mode=Mode.NETWORKS_ONLY, window=window, warmup=min(10, window))
    det = Detector(cfg, gamma=-math.inf)
    for e in build_epochs(test_pair[0])[start : start + 60]:
        det.step(e)
        ts = [x.t for x in det.window]
        assert len(ts) <= window
        assert ts[-1] - ts[0] < window
        assert all(np.diff(ts) > 0)


def test_all_without_imu_matches_networks_only(all_detector, spoofed):
    epochs = build_epochs(_without_motion(spoofed))
    net_cfg = copy.deepcopy(all_detector.config)
    net_cfg.mode = Mode.NETWORKS_ONLY
    a = Detector(all_detector.config, all_detector.covariances, all_detector.gamma, all_detector.regime_gammas)
    b = Detector(net_cfg, all_detector.covariances, all_detector.gamma, all_detector.regime_gammas)
    va, vb = a.run(epochs), b.run(epochs)
    lla = np.array([v.log_likelihood for v in va])
    llb = np.array([v.log_likelihood for v in vb])
    np.testing.assert_allclose(lla, llb, rtol=0, atol=1e-9, equal_nan=True)
    assert [v.is_attack for v in va] == [v.is_attack for v in vb]
    np.testing.assert_allclose([v.alt_position for v in va], [v.alt_position for v in vb], atol=1e-9)


def test_sensors_only_runs(calib_trace, spoofed):
    det = initialize(DetectorConfig(mode=Mode.SENSORS_ONLY), calib_trace)
    verdicts = run(spoofed, det.config, det)
    assert all(v.per_source == [] or v.per_source[0][0] is Source.GNSS for v in verdicts)
    # sensors alone drift, so readmission erodes the rate after the first alarms
    assert verdicts[100].is_attack
    pre = np.mean([v.is_attack for v in verdicts[:100] if v.decided])
    assert np.mean([v.is_attack for v in verdicts[100:]]) > pre + 0.3


# --- degenerate epochs -------------------------------------------------------------

def test_all_sources_unavailable_carries_forward(test_pair):
    cfg = DetectorConfig(mode=Mode.NETWORKS_ONLY)
    det = Detector(cfg, gamma=-20.0)
    epochs = build_epochs(test_pair[0])
    for e in epochs[:40]:
        det.step(e)
    sources = list(epochs[40].positions)
    verdicts = [det.step(Epoch(e.t, e.gnss, {s: None for s in sources}, None)) for e in epochs[40:50]]
    last = [v for v in verdicts if v.decided][-1]
    tail = verdicts[int(cfg.stale_after) + 1 :]
    assert tail
    for v in tail:
        assert not v.decided and v.unavailable
        assert v.is_attack == last.is_attack
        np.testing.assert_array_equal(v.alt_position, last.alt_position)


def test_misaligned_stream_warns(test_pair):
    trace = test_pair[0]
    wifi = trace.networks[Source.WIFI]
    keep = (wifi.t < 50) | (wifi.t >= 60)
    gappy = PositionStream(Source.WIFI, wifi.t[keep], wifi.xy[keep], wifi.available[keep])
    bad = Trace(trace.truth, trace.gnss, {**trace.networks, Source.WIFI: gappy}, trace.motion)
    with pytest.warns(AlignmentWarning):
        epochs = build_epochs(bad)
    assert len(epochs) == len(trace.gnss)
    gap = [e for e in epochs if 50.5 < e.t < 59.5]
    assert gap and all(e.misaligned and e.positions[Source.WIFI] is None for e in gap)
    assert not any(e.misaligned for e in epochs if e.t < 50 or e.t >= 60)
    det = Detector(DetectorConfig(mode=Mode.NETWORKS_ONLY), gamma=-20.0)
    verdicts = det.run(epochs)
    assert len(verdicts) == len(epochs)
    assert all(v.misaligned for v in verdicts if 50.5 < v.t < 59.5)
    assert all(v.decided for v in verdicts if 50.5 < v.t < 59.5)


# --- statistic ------------------------------------------------------------------------

def test_fused_ll_shared_gnss_is_product_form():
    rng = np.random.default_rng(5)
    zm, zs = rng.normal(0, 3, (3, 2)), rng.uniform(0.5, 3, (3, 2))
    g = np.tile(rng.normal(0, 3, 2), (3, 1))
    expect = log_likelihood(categorical_fuse(zm, zs), g[0])
    assert fused_log_likelihood(zm, zs, g) == pytest.approx(expect, rel=1e-12)


def test_fused_ll_distinct_gnss_is_sum():
    rng = np.random.default_rng(6)
    zm, zs = rng.normal(0, 3, (2, 2)), rng.uniform(0.5, 3, (2, 2))
    g = rng.normal(0, 3, (2, 2))
    expect = sum(
        -np.log(2 * np.pi * zs[k].prod()) - 0.5 * (((g[k] - zm[k]) / zs[k]) ** 2).sum() for k in range(2)
    )
    assert fused_log_likelihood(zm, zs, g) == pytest.approx(expect, rel=1e-12)
