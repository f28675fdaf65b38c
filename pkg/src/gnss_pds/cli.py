"""Command-line entry points.

``gnss-pds simulate | calibrate | detect | benchmark``.  Every run starts
from the shipped ``defaults.yaml``, merges ``--config FILE`` over it and
then applies each ``--set section.key=value``; the effective configuration
is validated before any work starts and written to ``OUT/config.yaml``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 internal error.  ``benchmark`` also exits 2 when any cell failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import math
import sys
from importlib import resources
from pathlib import Path

import yaml

from .baselines import BASELINES, calibrate as calibrate_baseline
from .detector import Detector, DetectorConfig, Mode, build_epochs, initialize
from .errors import ConfigError, PDSError
from .evaluation import BASELINE_MODES, ExperimentConfig, run_experiment
from .gp import CovarianceFn
from .sim import (
    AttackConfig,
    DriftConfig,
    Shape,
    Source,
    TraceConfig,
    apply_spoofing,
    load_trace,
    synthesize,
    with_gnss,
    write_trace,
)

log = logging.getLogger("gnss_pds")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CALIBRATION_SEED_OFFSET = 100_000
VERDICT_COLUMNS = ("t", "log_likelihood", "threshold", "is_attack", "decided", "alt_east", "alt_north")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


def load_defaults() -> dict:
    text = resources.files("gnss_pds").joinpath("defaults.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text)


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Deep-merge ``update`` into a copy of ``base``; unknown keys are rejected."""
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be a mapping")
            out[key] = merge(out[key], value, where + ".")
        else:
            out[key] = value
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = yaml.safe_load(raw)


def resolve_config(config_path=None, overrides=(), seed=None) -> dict:
    """Defaults, then the file, then ``--set`` overrides, then ``--seed``."""
    cfg = load_defaults()
    if config_path is not None:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path} must hold a mapping")
        cfg = merge(cfg, loaded)
    for item in overrides:
        apply_override(cfg, item)
    if seed is not None:
        cfg["seed"] = seed
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed must be an integer")
    cal = cfg["calibration"]
    if cal["seeds"] is None:
        cal["seeds"] = [cfg["seed"] + CALIBRATION_SEED_OFFSET + k for k in range(int(cal["n_traces"]))]
    exp = cfg["experiment"]
    if exp["seeds"] is None:
        exp["seeds"] = [cfg["seed"] + k for k in range(int(exp["n_seeds"]))]
    return cfg


def _build(kind, **kw):
    try:
        return kind(**kw)
    except TypeError as exc:
        raise ConfigError(f"{kind.__name__}: {exc}") from exc


def trace_config(cfg: dict, seed: int, duration: float | None = None) -> TraceConfig:
    kw = dict(cfg["trace"], rng_seed=int(seed))
    if duration is not None:
        kw["duration"] = float(duration)
    return _build(TraceConfig, **kw)


def drift_config(cfg: dict) -> DriftConfig:
    kw = dict(cfg["drift"])
    kw["accel_bias"] = tuple(kw["accel_bias"])
    return _build(DriftConfig, **kw)


def detector_config(cfg: dict) -> DetectorConfig:
    return _build(DetectorConfig, **cfg["detector"])


def attack_config(cfg: dict) -> AttackConfig | None:
    if cfg["attack"]["onset"] is None:
        return None
    return _build(AttackConfig, **cfg["attack"])


def make_baseline(cfg: dict, name: str):
    if name not in BASELINES:
        raise ConfigError(f"unknown detector {name!r}; expected pds or one of {sorted(BASELINES)}")
    kw = dict(cfg["baselines"].get(name) or {})
    kw.setdefault("noise_var", cfg["detector"]["noise_var"])
    try:
        return BASELINES[name](**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"baseline {name}: {exc}") from exc


def experiment_config(cfg: dict) -> ExperimentConfig:
    exp = cfg["experiment"]
    noise = cfg["detector"]["noise_var"]
    baselines = {k: {"noise_var": noise, **(v or {})} for k, v in cfg["baselines"].items()}
    attack = {k: v for k, v in cfg["attack"].items() if k in ("growth_rate", "stage1_duration")}
    return _build(
        ExperimentConfig,
        detectors=list(exp["detectors"]),
        modes=list(exp["modes"]),
        deviations=[float(d) for d in exp["deviations"]],
        pfp_max=[float(p) for p in exp["pfp_max"]],
        seeds=[int(s) for s in exp["seeds"]],
        calibration_seeds=[int(s) for s in cfg["calibration"]["seeds"]],
        duration=float(exp["duration"]),
        calibration_duration=float(cfg["calibration"]["duration"]),
        onset=float(exp["onset"]),
        shape=Shape(cfg["shape"]).value,
        trace=dict(cfg["trace"]),
        drift={**cfg["drift"], "accel_bias": tuple(cfg["drift"]["accel_bias"])},
        attack=attack,
        pds=dict(cfg["detector"]),
        baselines=baselines,
        workers=int(exp["workers"]),
    )


def validate(cfg: dict) -> None:
    """Build every configuration object once so bad values fail before any work."""
    try:
        Shape(cfg["shape"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    trace_config(cfg, cfg["seed"])
    drift_config(cfg)
    detector_config(cfg)
    attack_config(cfg)
    name = cfg["detect"]["detector"]
    if name != "pds":
        make_baseline(cfg, name)
    for b in cfg["baselines"]:
        make_baseline(cfg, b)
    experiment_config(cfg)


def echo_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=False)


# --------------------------------------------------------------------------
# calibration files


def _regime_key(regime: tuple) -> str:
    return "+".join(regime)


def _regime_tuple(key: str) -> tuple:
    return tuple(key.split("+")) if key else ()


def detector_to_dict(det: Detector) -> dict:
    return {
        "detector": "pds",
        "mode": det.config.mode.value,
        "p_fp_max": det.config.p_fp_max,
        "gamma": float(det.gamma),
        "regime_gammas": {_regime_key(r): float(g) for r, g in sorted(det.regime_gammas.items())},
        "covariances": {
            src.value: {"length_scale": float(c.length_scale), "variance_scale": float(c.variance_scale),
                        "nugget": float(c.nugget), "kind": c.kind}
            for src, c in det.covariances.items()
        },
    }


def detector_from_dict(config: DetectorConfig, data: dict) -> Detector:
    try:
        covs = {Source(k): CovarianceFn(**v) for k, v in (data.get("covariances") or {}).items()}
        regimes = {_regime_tuple(k): float(v) for k, v in (data.get("regime_gammas") or {}).items()}
        return Detector(config, covs, float(data["gamma"]), regimes)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed calibration file: {exc}") from exc


def read_calibration(path, name: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"calibration file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if data.get("detector") != name:
        raise DataError(f"{path} calibrates {data.get('detector')!r}, not {name!r}")
    return data


# --------------------------------------------------------------------------
# subcommands


def _needs_motion(name: str, mode: Mode) -> bool:
    if name == "pds":
        return mode is not Mode.NETWORKS_ONLY
    return BASELINE_MODES[name] is Mode.SENSORS_ONLY


def _check_trace(trace, name: str, mode: Mode, label: str) -> None:
    if _needs_motion(name, mode) and (trace.motion is None or len(trace.motion) == 0):
        what = f"{mode.value} mode" if name == "pds" else f"the {name} baseline"
        raise DataError(f"{label} has no on-board sensor data (motion.csv), which {what} requires")


def _calibration_traces(cfg: dict, paths) -> list:
    if paths:
        return [_load(p) for p in paths]
    dur = cfg["calibration"]["duration"]
    drift = drift_config(cfg)
    return [synthesize(trace_config(cfg, s, dur), cfg["shape"], drift)[0] for s in cfg["calibration"]["seeds"]]


def _load(path):
    try:
        return load_trace(path)
    except PDSError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _calibrate(cfg: dict, name: str, traces):
    if name == "pds":
        dcfg = detector_config(cfg)
        for k, tr in enumerate(traces):
            _check_trace(tr, name, dcfg.mode, f"calibration trace {k}")
        if dcfg.gamma is not None:
            return Detector(dcfg)
        return initialize(dcfg, traces)
    b = make_baseline(cfg, name)
    for k, tr in enumerate(traces):
        _check_trace(tr, name, BASELINE_MODES[name], f"calibration trace {k}")
    calibrate_baseline(b, traces, float(cfg["detector"]["p_fp_max"]))
    return b


def cmd_simulate(cfg: dict, args) -> int:
    out = Path(args.out)
    tcfg = trace_config(cfg, cfg["seed"])
    trace, truth = synthesize(tcfg, cfg["shape"], drift_config(cfg), with_imu=not args.no_motion)
    atk = attack_config(cfg)
    if atk is not None:
        trace = with_gnss(trace, apply_spoofing(trace.gnss, atk, truth.epoch_heading))
    try:
        write_trace(trace, out)
    except OSError as exc:
        raise DataError(f"cannot write trace to {out}: {exc}") from exc
    echo_config(cfg, out)
    log.info("wrote %d epochs to %s", len(trace.gnss), out)
    return EXIT_OK


def cmd_calibrate(cfg: dict, args) -> int:
    out = Path(args.out)
    name = cfg["detect"]["detector"]
    det = _calibrate(cfg, name, _calibration_traces(cfg, args.traces))
    if name == "pds":
        data = detector_to_dict(det)
    else:
        data = {"detector": name, "p_fp_max": float(cfg["detector"]["p_fp_max"]),
                "threshold": float(det.threshold)}
    echo_config(cfg, out)
    with open(out / "calibration.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(data, fh, sort_keys=False)
    return EXIT_OK


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def cmd_detect(cfg: dict, args) -> int:
    out = Path(args.out)
    name = cfg["detect"]["detector"]
    trace = _load(args.trace)
    mode = detector_config(cfg).mode if name == "pds" else BASELINE_MODES[name]
    _check_trace(trace, name, mode, str(args.trace))
    if args.calibration is not None:
        data = read_calibration(args.calibration, name)
        if name == "pds":
            det = detector_from_dict(detector_config(cfg), data)
        else:
            det = make_baseline(cfg, name)
            det.threshold = float(data["threshold"])
    else:
        det = _calibrate(cfg, name, _calibration_traces(cfg, args.calibration_traces))
    if name == "pds":
        epochs = build_epochs(trace, mode is not Mode.NETWORKS_ONLY, float(cfg["detector"]["align_tolerance"]))
    else:
        epochs = build_epochs(trace, mode is not Mode.NETWORKS_ONLY)
    det.reset()
    verdicts = det.run(epochs)

    echo_config(cfg, out)
    with open(out / "verdicts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_COLUMNS)
        for v in verdicts:
            score = v.log_likelihood if name == "pds" else v.score
            alt = (math.nan, math.nan) if v.alt_position is None else v.alt_position
            w.writerow([_fmt(v.t), _fmt(score), _fmt(v.threshold), _fmt(bool(v.is_attack)),
                        _fmt(bool(v.decided)), _fmt(alt[0]), _fmt(alt[1])])
    flagged = sum(v.is_attack for v in verdicts)
    log.info("%d of %d epochs flagged", flagged, len(verdicts))
    return EXIT_OK


def cmd_benchmark(cfg: dict, args) -> int:
    out = Path(args.out)
    ecfg = experiment_config(cfg)
    echo_config(cfg, out)
    report = run_experiment(ecfg, out_dir=out, resume=args.resume)
    log.info("%d cells, %d failed; report in %s", len(report.cells), len(report.failures), out)
    if not report.complete:
        print(f"{len(report.failures)} cell(s) failed; see {out / 'failures.txt'}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file merged over the shipped defaults")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value by dotted path, e.g. detector.window=30")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="gnss-pds", description="GNSS spoofing detection from opportunistic sources")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", parents=[common], help="write a synthetic trace")
    p.add_argument("--no-motion", action="store_true", help="omit the on-board sensor stream")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", parents=[common], help="fit covariances and thresholds")
    p.add_argument("traces", nargs="*", help="benign trace directories (default: synthesize)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", parents=[common], help="run one detector over one trace")
    p.add_argument("trace", help="trace directory or positions CSV")
    p.add_argument("--calibration", help="calibration.yaml written by the calibrate command")
    p.add_argument("--calibration-traces", nargs="+", default=None,
                   help="benign traces to calibrate on (default: synthesize)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("benchmark", parents=[common], help="run the experiment matrix")
    p.add_argument("--resume", action="store_true", help="reuse completed groups cached in --out")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, args.overrides, args.seed)
        validate(cfg)
        return args.func(cfg, args)
    except (UsageError, ConfigError) as exc:
        print(f"gnss-pds: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, PDSError) as exc:
        print(f"gnss-pds: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"gnss-pds: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
