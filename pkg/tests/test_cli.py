import csv
import time

import numpy as np
import pytest
import yaml

from gnss_pds import cli
from gnss_pds.detector import initialize, run
from gnss_pds.evaluation import CSV_COLUMNS
from gnss_pds.sim import load_trace

SHORT = ["--set", "trace.duration=200", "--set", "calibration.duration=200", "--set", "calibration.n_traces=2"]


def read_verdicts(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def benign(tmp_path_factory):
    out = tmp_path_factory.mktemp("benign")
    assert cli.main(["simulate", "--out", str(out), "--seed", "7", *SHORT]) == 0
    return out


# ---------------------------------------------------------------------------
# configuration


def test_precedence(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("detector:\n  window: 30\n  eps: 2.0\nseed: 4\n")
    cfg = cli.resolve_config(cfg_file, ["detector.window=25"])
    assert cfg["detector"]["window"] == 25
    assert cfg["detector"]["eps"] == 2.0
    assert cfg["detector"]["order"] == 2
    assert cfg["seed"] == 4
    assert cli.resolve_config(cfg_file, [], seed=9)["seed"] == 9


def test_seeds_derive_from_master_seed():
    cfg = cli.resolve_config(None, ["experiment.n_seeds=3", "calibration.n_traces=2"], seed=10)
    assert cfg["experiment"]["seeds"] == [10, 11, 12]
    assert cfg["calibration"]["seeds"] == [100_010, 100_011]


@pytest.mark.parametrize("override", ["detector.nope=1", "nope.window=3", "detector", "detector.noise_var.LIDAR=1"])
def test_unknown_override_rejected(override):
    with pytest.raises(cli.ConfigError):
        cli.resolve_config(None, [override])


def test_unknown_file_key_rejected(tmp_path):
    cfg_file = tmp_path / "c.yaml"
    cfg_file.write_text("detector:\n  windw: 30\n")
    assert cli.main(["simulate", "--out", str(tmp_path / "o"), "--config", str(cfg_file)]) == 1


def test_defaults_validate():
    cli.validate(cli.resolve_config())


@pytest.mark.parametrize("argv", [
    ["simulate", "--out", "x", "--config", "does-not-exist.yaml"],
    ["simulate"],
    ["frobnicate", "--out", "x"],
    ["simulate", "--out", "x", "--set", "detector.window=2"],
    ["simulate", "--out", "x", "--set", "detect.detector=magic"],
    ["simulate", "--out", "x", "--set", "shape=CIRCLE"],
])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert cli.main(argv) == 1


# ---------------------------------------------------------------------------
# simulate


def test_simulate_round_trip(benign):
    trace = load_trace(benign)
    assert len(trace.gnss) == 201
    assert trace.motion is not None
    echoed = yaml.safe_load((benign / "config.yaml").read_text())
    assert echoed["seed"] == 7
    assert echoed["trace"]["duration"] == 200


def test_simulate_deterministic(benign, tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "--seed", "7", *SHORT]) == 0
    for name in ("positions.csv", "motion.csv", "config.yaml"):
        assert (tmp_path / name).read_bytes() == (benign / name).read_bytes()


def test_simulate_attack(benign, tmp_path):
    assert cli.main(["simulate", "--out", str(tmp_path), "--seed", "7", *SHORT,
                     "--set", "attack.onset=100"]) == 0
    clean, spoofed = load_trace(benign), load_trace(tmp_path)
    shift = np.linalg.norm(spoofed.gnss.xy - clean.gnss.xy, axis=1)
    assert np.all(shift[clean.gnss.t < 100] == 0)
    assert np.all(shift[clean.gnss.t >= 100] > 9.9)


def test_simulate_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert cli.main(["simulate", "--out", str(blocker / "sub"), *SHORT]) in (2, 3)


# ---------------------------------------------------------------------------
# detect and calibrate


@pytest.fixture(scope="module")
def pds_verdicts(benign, tmp_path_factory):
    out = tmp_path_factory.mktemp("detect")
    assert cli.main(["detect", str(benign), "--out", str(out), "--seed", "7", *SHORT]) == 0
    return out


def test_detect_output(pds_verdicts):
    rows = read_verdicts(pds_verdicts / "verdicts.csv")
    assert tuple(rows[0]) == cli.VERDICT_COLUMNS
    assert len(rows) == 201
    assert (pds_verdicts / "config.yaml").exists()


def test_detect_matches_library(benign, pds_verdicts):
    cfg = cli.resolve_config(None, SHORT[1::2], seed=7)
    dcfg = cli.detector_config(cfg)
    det = initialize(dcfg, cli._calibration_traces(cfg, None))
    expected = run(load_trace(benign), dcfg, detector=det)
    rows = read_verdicts(pds_verdicts / "verdicts.csv")
    assert [r["is_attack"] == "1" for r in rows] == [bool(v.is_attack) for v in expected]
    assert [float(r["threshold"]) for r in rows] == [float(v.threshold) for v in expected]


def test_detect_deterministic(benign, pds_verdicts, tmp_path):
    assert cli.main(["detect", str(benign), "--out", str(tmp_path), "--seed", "7", *SHORT]) == 0
    assert (tmp_path / "verdicts.csv").read_bytes() == (pds_verdicts / "verdicts.csv").read_bytes()


def test_calibration_file_replays(benign, pds_verdicts, tmp_path):
    assert cli.main(["calibrate", "--out", str(tmp_path / "cal"), "--seed", "7", *SHORT]) == 0
    cal = yaml.safe_load((tmp_path / "cal" / "calibration.yaml").read_text())
    assert cal["detector"] == "pds"
    assert set(cal["covariances"]) == {"GNSS", "WIFI", "CELLULAR"}
    assert cli.main(["detect", str(benign), "--out", str(tmp_path / "d"), *SHORT,
                     "--calibration", str(tmp_path / "cal" / "calibration.yaml")]) == 0
    assert (tmp_path / "d" / "verdicts.csv").read_bytes() == (pds_verdicts / "verdicts.csv").read_bytes()


def test_calibration_file_for_other_detector(benign, tmp_path):
    assert cli.main(["calibrate", "--out", str(tmp_path / "cal"), *SHORT, "--set", "detect.detector=wcl"]) == 0
    cal = yaml.safe_load((tmp_path / "cal" / "calibration.yaml").read_text())
    assert cal["detector"] == "wcl"
    assert cli.main(["detect", str(benign), "--out", str(tmp_path / "d"), *SHORT,
                     "--calibration", str(tmp_path / "cal" / "calibration.yaml")]) == 2


def test_calibrate_on_given_traces(benign, tmp_path):
    assert cli.main(["calibrate", str(benign), "--out", str(tmp_path), *SHORT,
                     "--set", "detector.mode=NETWORKS_ONLY"]) == 0
    assert "gamma" in yaml.safe_load((tmp_path / "calibration.yaml").read_text())


@pytest.mark.parametrize("name", ["wcl", "ekf", "combined"])
def test_detect_baselines(benign, tmp_path, name):
    assert cli.main(["detect", str(benign), "--out", str(tmp_path), *SHORT, "--set", f"detect.detector={name}"]) == 0
    rows = read_verdicts(tmp_path / "verdicts.csv")
    assert len(rows) == 201


def test_sensors_only_without_motion_is_data_error(tmp_path, capsys):
    trace = tmp_path / "nomotion"
    assert cli.main(["simulate", "--out", str(trace), "--no-motion", *SHORT]) == 0
    assert not (trace / "motion.csv").exists()
    code = cli.main(["detect", str(trace), "--out", str(tmp_path / "d"), *SHORT,
                     "--set", "detector.mode=SENSORS_ONLY"])
    assert code == 2
    assert "motion.csv" in capsys.readouterr().err


def test_detect_missing_trace(tmp_path):
    assert cli.main(["detect", str(tmp_path / "none"), "--out", str(tmp_path / "d"), *SHORT]) == 2


# ---------------------------------------------------------------------------
# benchmark

ONE_CELL = ["--set", "experiment.detectors=[pds]", "--set", "experiment.modes=[NETWORKS_ONLY]",
            "--set", "experiment.deviations=[10]", "--set", "experiment.pfp_max=[0.1]",
            "--set", "experiment.n_seeds=1", "--set", "calibration.n_traces=1"]


def test_benchmark_one_cell_smoke(tmp_path):
    t0 = time.perf_counter()
    assert cli.main(["benchmark", "--out", str(tmp_path), *ONE_CELL]) == 0
    assert time.perf_counter() - t0 < 60
    with open(tmp_path / "report.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 2
    assert rows[1][:5] == ["pds", "NETWORKS_ONLY", "10.000000", "0.100000", "0"]
    assert (tmp_path / "summary.csv").exists()
    assert yaml.safe_load((tmp_path / "config.yaml").read_text())["experiment"]["seeds"] == [0]


def test_benchmark_failure_exit_code_and_resume(tmp_path, monkeypatch):
    from gnss_pds import evaluation

    real = evaluation._make_detector
    args = ["benchmark", "--out", str(tmp_path), *SHORT, *ONE_CELL,
            "--set", "experiment.detectors=[pds, wcl]", "--set", "experiment.duration=200",
            "--set", "experiment.onset=100"]

    def broken(name, *a):
        if name == "wcl":
            raise RuntimeError("boom")
        return real(name, *a)

    monkeypatch.setattr(evaluation, "_make_detector", broken)
    assert cli.main(args) == 2
    assert (tmp_path / "failures.txt").exists()
    monkeypatch.setattr(evaluation, "_make_detector", real)
    assert cli.main([*args, "--resume"]) == 0
    assert not (tmp_path / "failures.txt").exists()
