"""Detection metrics and the experiment harness.

Per-epoch rates follow the usual indicator-count definitions:
``P_TP = N_TP / N_P`` over attacked epochs and ``P_FP = N_FP / (N - N_P)``
over benign ones.  A rate whose denominator is zero is reported as NaN
rather than 0, and the same marker is used for a detection delay when the
attack was never flagged.

``run_experiment`` sweeps detectors x modes x deviations x P_FP_max x seeds.
Each (detector, mode, P_FP_max) group is calibrated once on benign traces
whose seeds are disjoint from the evaluation seeds; each evaluation seed is
then run once up to the attack onset and branched into one continuation per
deviation, so every deviation shares the same benign prefix.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import pickle
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baselines import BASELINES, calibrate
from .detector import DetectorConfig, Mode, build_epochs, initialize
from .errors import ConfigError, InvalidInputError
from .sim import (
    AttackConfig,
    DriftConfig,
    Shape,
    TraceConfig,
    apply_spoofing,
    attack_labels,
    synthesize,
    with_gnss,
)

log = logging.getLogger(__name__)

UNDEFINED = math.nan

CSV_COLUMNS = ("detector", "mode", "deviation_m", "pfp_max", "seed", "p_tp", "p_fp", "delta_t_s",
               "mae_mean_m", "mae_top20_m", "mae_bot20_m")

# the streams each baseline consumes, named after the detector mode that sees the same data
BASELINE_MODES = {"wcl": Mode.NETWORKS_ONLY, "ekf": Mode.SENSORS_ONLY, "pf": Mode.SENSORS_ONLY,
                  "combined": Mode.ALL}


@dataclass(frozen=True)
class EpochLabel:
    t: float
    truth_attack: bool
    verdict_attack: bool


def label_epochs(times, truth_attack, verdict_attack) -> list[EpochLabel]:
    times, truth_attack, verdict_attack = list(times), list(truth_attack), list(verdict_attack)
    if not len(times) == len(truth_attack) == len(verdict_attack):
        raise InvalidInputError("labels and verdicts must align one to one")
    return [EpochLabel(float(t), bool(a), bool(v)) for t, a, v in zip(times, truth_attack, verdict_attack)]


def tpr_fpr(labels) -> tuple[float, float]:
    """``(P_TP, P_FP)``; a rate with an empty denominator is NaN."""
    labels = list(labels)
    if not labels:
        raise InvalidInputError("no labelled epochs")
    n_p = sum(lab.truth_attack for lab in labels)
    n_n = len(labels) - n_p
    n_tp = sum(lab.truth_attack and lab.verdict_attack for lab in labels)
    n_fp = sum(not lab.truth_attack and lab.verdict_attack for lab in labels)
    return (n_tp / n_p if n_p else UNDEFINED), (n_fp / n_n if n_n else UNDEFINED)


def detection_delay(labels) -> float:
    """Seconds from the first attacked epoch to the first flagged attacked epoch.

    NaN when the attack is never flagged.
    """
    attacked = [lab for lab in labels if lab.truth_attack]
    if not attacked:
        raise InvalidInputError("detection delay needs an attacked epoch")
    onset = min(lab.t for lab in attacked)
    hits = [lab.t for lab in attacked if lab.verdict_attack]
    return min(hits) - onset if hits else UNDEFINED


def mae_stats(errors) -> tuple[float, float, float]:
    """Mean, mean of the largest 20 % and mean of the smallest 20 % of ``errors``.

    The 20 % count is rounded up, so at least one sample enters each tail.
    """
    e = np.sort(np.asarray(errors, dtype=float).ravel())
    if e.size == 0:
        raise InvalidInputError("no errors to summarize")
    k = math.ceil(0.2 * e.size)
    return float(e.mean()), float(e[-k:].mean()), float(e[:k].mean())


# ---------------------------------------------------------------------------
# experiment harness


@dataclass
class ExperimentConfig:
    """Experiment matrix.

    ``deviations`` are in meters: a deviation ``d`` spoofs with a stage-one
    offset of ``d`` that then grows to at most ``2 d``.  ``modes`` applies
    to the PDS detector; each baseline runs once, in the mode matching the
    streams it consumes.
    """

    detectors: list = field(default_factory=lambda: ["pds", "wcl", "ekf", "pf", "combined"])
    modes: list = field(default_factory=lambda: [m.value for m in Mode])
    deviations: list = field(default_factory=lambda: [float(d) for d in range(1, 11)])
    pfp_max: list = field(default_factory=lambda: [0.05, 0.1, 0.15])
    seeds: list = field(default_factory=lambda: list(range(20)))
    calibration_seeds: list = field(default_factory=lambda: [100_000, 100_001, 100_002])
    duration: float = 600.0
    calibration_duration: float = 600.0
    onset: float = 300.0
    shape: str = Shape.RANDOM_WAYPOINT.value
    trace: dict = field(default_factory=dict)
    drift: dict = field(default_factory=dict)
    attack: dict = field(default_factory=dict)
    pds: dict = field(default_factory=dict)
    baselines: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        unknown = [d for d in self.detectors if d != "pds" and d not in BASELINES]
        if unknown:
            raise ConfigError(f"unknown detectors {unknown}")
        for m in self.modes:
            Mode(m)
        if set(self.seeds) & set(self.calibration_seeds):
            raise ConfigError("calibration seeds must be disjoint from evaluation seeds")
        if not self.calibration_seeds or not self.seeds:
            raise ConfigError("need at least one evaluation and one calibration seed")
        if any(d <= 0 for d in self.deviations):
            raise ConfigError("deviations must be positive")
        if any(not 0 < p < 1 for p in self.pfp_max):
            raise ConfigError("P_FP_max values must lie in (0, 1)")
        if not 0 < self.onset < self.duration:
            raise ConfigError("attack onset must fall inside the trace")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    def groups(self) -> list[tuple[str, str, float]]:
        out = []
        for det in self.detectors:
            modes = self.modes if det == "pds" else [BASELINE_MODES[det].value]
            for mode in modes:
                for p in self.pfp_max:
                    out.append((det, mode, float(p)))
        return out

    def trace_config(self, seed: int, duration: float) -> TraceConfig:
        return TraceConfig(**{**self.trace, "duration": duration, "rng_seed": int(seed)})

    def synthesize(self, seed: int, duration: float):
        drift = DriftConfig(**self.drift) if self.drift else None
        return synthesize(self.trace_config(seed, duration), self.shape, drift)

    def attack_config(self, deviation: float) -> AttackConfig:
        kw = {"profile_offset": deviation, "max_deviation": 2.0 * deviation, **self.attack}
        return AttackConfig(onset=self.onset, **kw)


@dataclass
class CellResult:
    detector: str
    mode: str
    deviation_m: float
    pfp_max: float
    seed: int
    p_tp: float = UNDEFINED
    p_fp: float = UNDEFINED
    delta_t_s: float = UNDEFINED
    mae_mean_m: float = UNDEFINED
    mae_top20_m: float = UNDEFINED
    mae_bot20_m: float = UNDEFINED
    gnss_error_m: float = UNDEFINED
    runtime_s: float = 0.0
    error: str | None = None
    counts: tuple = (0, 0, 0, 0)
    alt_errors: np.ndarray = field(default=None, repr=False)

    @property
    def key(self):
        return (self.detector, self.mode, self.deviation_m, self.pfp_max)


@dataclass
class Summary:
    detector: str
    mode: str
    deviation_m: float
    pfp_max: float
    seeds: int
    p_tp: float
    p_fp: float
    delta_t_s: float
    mae_mean_m: float
    mae_top20_m: float
    mae_bot20_m: float
    gnss_error_m: float
    runtime_s: float


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.6f}"


@dataclass
class ExperimentReport:
    cells: list
    failures: list = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for c in self.cells:
            w.writerow([_fmt(getattr(c, k)) for k in CSV_COLUMNS])
        return buf.getvalue()

    def summary(self) -> list[Summary]:
        """Pool every seed of a (detector, mode, deviation, P_FP_max) cell."""
        groups: dict = {}
        for c in self.cells:
            if c.error is None:
                groups.setdefault(c.key, []).append(c)
        out = []
        for key, cells in groups.items():
            tp, p, fp, n = np.sum([c.counts for c in cells], axis=0)
            delays = [c.delta_t_s for c in cells if not math.isnan(c.delta_t_s)]
            errs = [c.alt_errors for c in cells if c.alt_errors is not None and len(c.alt_errors)]
            mae = mae_stats(np.concatenate(errs)) if errs else (UNDEFINED,) * 3
            gnss = [c.gnss_error_m for c in cells if not math.isnan(c.gnss_error_m)]
            out.append(Summary(*key, len(cells), tp / p if p else UNDEFINED, fp / n if n else UNDEFINED,
                               float(np.mean(delays)) if delays else UNDEFINED, *mae,
                               float(np.mean(gnss)) if gnss else UNDEFINED,
                               float(sum(c.runtime_s for c in cells))))
        return out

    def summary_csv(self) -> str:
        rows = self.summary()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = [f for f in Summary.__dataclass_fields__ if f != "runtime_s"]
        w.writerow(names)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in names])
        return buf.getvalue()

    def lookup(self, detector, mode, deviation, pfp_max) -> Summary | None:
        for s in self.summary():
            if (s.detector, s.mode, s.deviation_m, s.pfp_max) == (detector, mode, float(deviation), float(pfp_max)):
                return s
        return None

    def write(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.csv").write_text(self.to_csv(), encoding="utf-8")
        (directory / "summary.csv").write_text(self.summary_csv(), encoding="utf-8")
        failed = directory / "failures.txt"
        if self.failures:
            lines = [f"{d},{m},{dev},{p},{s}: {err}" for (d, m, dev, p, s), err in self.failures]
            failed.write_text("\n".join(lines) + "\n", encoding="utf-8")
        elif failed.exists():
            failed.unlink()
        return directory / "report.csv"


def _truth_at(trace, times) -> np.ndarray:
    tt = trace.truth.t
    return np.column_stack([np.interp(times, tt, trace.truth.xy[:, k]) for k in range(2)])


def _make_detector(name: str, mode: str, p: float, cfg: ExperimentConfig, calibration):
    if name == "pds":
        dcfg = DetectorConfig(**{**cfg.pds, "mode": Mode(mode), "p_fp_max": p})
        return initialize(dcfg, calibration)
    b = BASELINES[name](**cfg.baselines.get(name, {}))
    calibrate(b, calibration, p)
    return b


def _runner(det):
    """A fresh stepping copy of a calibrated detector."""
    det = copy.deepcopy(det)
    det.reset()
    return det


def _score(name, mode, dev, p, seed, trace, epochs, verdicts, atk) -> CellResult:
    times = np.array([e.t for e in epochs])
    truth_attack = attack_labels(times, atk)
    labels = label_epochs(times, truth_attack, [v.is_attack for v in verdicts])
    p_tp, p_fp = tpr_fpr(labels)
    truth = _truth_at(trace, times)
    alt = np.array([np.full(2, np.nan) if v.alt_position is None else v.alt_position for v in verdicts])
    err = np.linalg.norm(alt - truth, axis=1)[truth_attack]
    err = err[np.isfinite(err)]
    mae = mae_stats(err) if err.size else (UNDEFINED,) * 3
    gnss_err = np.linalg.norm(np.array([e.gnss for e in epochs]) - truth, axis=1)[truth_attack]
    n_p = int(truth_attack.sum())
    tp = sum(lab.truth_attack and lab.verdict_attack for lab in labels)
    fp = sum(not lab.truth_attack and lab.verdict_attack for lab in labels)
    return CellResult(name, mode, float(dev), p, int(seed), p_tp, p_fp, detection_delay(labels), *mae,
                      float(gnss_err.mean()), counts=(tp, n_p, fp, len(labels) - n_p), alt_errors=err)


def _run_group(args) -> tuple[list, list]:
    name, mode, p, cfg = args
    cells, failures = [], []
    use_motion = Mode(mode) is not Mode.NETWORKS_ONLY or name != "pds"
    try:
        calibration = [cfg.synthesize(s, cfg.calibration_duration)[0] for s in cfg.calibration_seeds]
        det = _make_detector(name, mode, p, cfg, calibration)
    except Exception as exc:  # noqa: BLE001 - every cell of the group is recorded as failed
        msg = f"calibration failed: {type(exc).__name__}: {exc}"
        log.error("%s/%s/P=%s %s", name, mode, p, msg)
        for seed in cfg.seeds:
            for dev in cfg.deviations:
                cells.append(CellResult(name, mode, float(dev), p, int(seed), error=msg))
                failures.append(((name, mode, float(dev), p, int(seed)), msg))
        return cells, failures

    for seed in cfg.seeds:
        t0 = time.perf_counter()
        try:
            trace, truth = cfg.synthesize(seed, cfg.duration)
            benign = build_epochs(trace, use_motion)
            k0 = int(np.searchsorted([e.t for e in benign], cfg.onset, side="left"))
            prefix_det = _runner(det)
            prefix = [prefix_det.step(e) for e in benign[:k0]]
            prefix_time = time.perf_counter() - t0
        except Exception as exc:  # noqa: BLE001
            msg = f"{type(exc).__name__}: {exc}"
            for dev in cfg.deviations:
                cells.append(CellResult(name, mode, float(dev), p, int(seed), error=msg))
                failures.append(((name, mode, float(dev), p, int(seed)), msg))
            continue
        for dev in cfg.deviations:
            t1 = time.perf_counter()
            try:
                atk = cfg.attack_config(dev)
                spoofed = with_gnss(trace, apply_spoofing(trace.gnss, atk, truth.epoch_heading))
                epochs = build_epochs(spoofed, use_motion)
                branch = copy.deepcopy(prefix_det)
                verdicts = prefix + [branch.step(e) for e in epochs[k0:]]
                cell = _score(name, mode, dev, p, seed, trace, epochs, verdicts, atk)
                cell.runtime_s = prefix_time / len(cfg.deviations) + time.perf_counter() - t1
            except Exception as exc:  # noqa: BLE001
                msg = f"{type(exc).__name__}: {exc}"
                log.error("%s/%s/P=%s dev=%s seed=%s failed: %s", name, mode, p, dev, seed, msg)
                cell = CellResult(name, mode, float(dev), p, int(seed), error=msg)
                failures.append((cell.key + (int(seed),), msg))
            cells.append(cell)
    return cells, failures


def _fingerprint(cfg: ExperimentConfig) -> str:
    d = asdict(cfg)
    d.pop("workers")
    return json.dumps(d, sort_keys=True, default=str)


def run_experiment(cfg: ExperimentConfig, out_dir=None, resume: bool = False) -> ExperimentReport:
    """Run the matrix; per-cell failures are recorded and the matrix continues.

    Groups run in parallel when ``cfg.workers > 1``; the report is assembled
    in matrix order either way, so its CSV does not depend on scheduling.
    With ``out_dir``, every group that finishes without failures is cached
    under ``out_dir/cells``; ``resume=True`` reuses those caches when the
    configuration is unchanged and recomputes only the rest.
    """
    groups = cfg.groups()
    cache = None if out_dir is None else Path(out_dir) / "cells"
    fingerprint = _fingerprint(cfg)
    results: dict = {}
    if cache is not None and resume:
        for k, g in enumerate(groups):
            path = cache / f"group_{k:03d}.pkl"
            if path.exists():
                with open(path, "rb") as fh:
                    saved = pickle.load(fh)
                if saved.get("fingerprint") == fingerprint and saved.get("group") == g:
                    results[k] = (saved["cells"], [])
        if results:
            log.info("resuming: %d of %d groups cached", len(results), len(groups))
    todo = [k for k in range(len(groups)) if k not in results]
    jobs = [(*groups[k], cfg) for k in todo]
    if cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            fresh = list(pool.map(_run_group, jobs))
    else:
        fresh = [_run_group(j) for j in jobs]
    for k, res in zip(todo, fresh):
        results[k] = res
        if cache is not None and not res[1]:
            cache.mkdir(parents=True, exist_ok=True)
            with open(cache / f"group_{k:03d}.pkl", "wb") as fh:
                pickle.dump({"fingerprint": fingerprint, "group": groups[k], "cells": res[0]}, fh)
    cells, failures = [], []
    for k in range(len(groups)):
        cells += results[k][0]
        failures += results[k][1]
    order = {g: i for i, g in enumerate(groups)}
    dev_order = {float(d): i for i, d in enumerate(cfg.deviations)}
    seed_order = {int(s): i for i, s in enumerate(cfg.seeds)}
    cells.sort(key=lambda c: (order[(c.detector, c.mode, c.pfp_max)], dev_order[c.deviation_m], seed_order[c.seed]))
    report = ExperimentReport(cells, failures)
    if out_dir is not None:
        report.write(out_dir)
    return report

