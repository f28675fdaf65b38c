"""Window-based screening of GNSS against opportunistic sources.

Every GNSS epoch the detector

1. fits each interval source's recent positions with a (possibly
   motion-constrained) local polynomial and predicts the current position,
2. corrects that prediction with the kriged residual to get a Gaussian
   interval,
3. averages each source's intervals over the window and multiplies the
   per-source results,
4. scores the recency-weighted GNSS average under that product and flags an
   attack when the log-likelihood falls to the calibrated threshold,
5. appends the epoch to the window, leaving GNSS out while it is suspect.

Which sources produce intervals depends on the mode: network positions only,
GNSS with on-board sensors only, or all of them with the sensor constraint
applied to every source.  A GNSS interval is only built when the sensor
constraint is available, so losing the sensors in ``ALL`` mode falls back to
``NETWORKS_ONLY`` behavior.

A flag quarantines GNSS until ``readmit_after`` consecutive benign
verdicts.  Meanwhile ``ALL`` mode decides on the network intervals alone,
while ``SENSORS_ONLY`` mode follows the sensor track started from the last
trusted GNSS sample.  Since the statistic's scale depends on which
intervals enter it, the threshold is calibrated per such regime.
"""

from __future__ import annotations

import copy
import enum
import logging
import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import (
    ConfigError,
    DegenerateFitError,
    InitializationError,
    InvalidInputError,
    SingularSystemError,
)
from .fusion import calibrate_threshold, categorical_fuse, log_likelihood, temporal_fuse, temporal_weights
from .geo import Attitude, MotionSample, propagate_state
from .gp import CovarianceFn, build_interval, fit_covariance
from .regression import KernelSpec, MotionConstraint, dead_reckon_anchor, fit_constrained, predict
from .sim import NETWORK_SOURCES, Source, Trace

log = logging.getLogger(__name__)


class Mode(str, enum.Enum):
    NETWORKS_ONLY = "NETWORKS_ONLY"
    SENSORS_ONLY = "SENSORS_ONLY"
    ALL = "ALL"


class AlignmentWarning(UserWarning):
    pass


DEFAULT_NOISE_VAR = {Source.GNSS: 0.9, Source.WIFI: 33.0, Source.CELLULAR: 9.0}


@dataclass
class DetectorConfig:
    mode: Mode = Mode.ALL
    window: int = 20
    p_fp_max: float = 0.1
    order: int = 2
    eps: float = 3.0
    loc_bandwidth: float = 10.0
    loc_kernel_kind: str = "RBF"
    temporal_bandwidth: float = 1.0
    readmit_after: int = 5
    warmup: int = 10
    stale_after: float = 5.0
    drift_rate: float = 0.5
    align_tolerance: float = 0.5
    cov_length_scale: float = 1.0
    nugget: float = 1e-6
    noise_var: dict = field(default_factory=lambda: dict(DEFAULT_NOISE_VAR))
    gamma: float | None = None

    def __post_init__(self):
        self.mode = Mode(self.mode)
        if self.window < self.order + 2:
            raise ConfigError("window must hold at least order + 2 epochs")
        if not 0.0 <= self.p_fp_max < 1.0:
            raise ConfigError("p_fp_max must lie in [0, 1)")
        if self.eps < 0 or self.readmit_after < 0 or self.drift_rate < 0:
            raise ConfigError("eps, readmit_after and drift_rate must be non-negative")
        if not self.stale_after > 0:
            raise ConfigError("stale_after must be positive")
        if not 0 <= self.warmup <= self.window:
            raise ConfigError("warmup must lie in [0, window]")
        self.noise_var = {Source(k): float(v) for k, v in self.noise_var.items()}
        if not self.temporal_bandwidth > 0:
            raise ConfigError("temporal_bandwidth must be positive")
        try:
            self.loc_kernel
        except (InvalidInputError, ValueError) as exc:
            raise ConfigError(f"invalid location kernel: {exc}") from exc

    @property
    def loc_kernel(self) -> KernelSpec:
        return KernelSpec(self.loc_kernel_kind, self.loc_bandwidth)

    def default_covariance(self, source: Source) -> CovarianceFn:
        var = self.noise_var.get(Source(source), 1.0)
        return CovarianceFn(self.cov_length_scale, var, self.nugget)


@dataclass
class Epoch:
    """Observations at one GNSS epoch.

    ``positions`` maps a source to its east/north sample, or ``None`` when
    the source is unavailable.  ``motion`` carries speed and attitude at the
    previous epoch and the mean acceleration since then.
    """

    t: float
    gnss: np.ndarray
    positions: dict = field(default_factory=dict)
    motion: MotionSample | None = None
    misaligned: bool = False


@dataclass
class Verdict:
    t: float
    log_likelihood: float
    threshold: float
    is_attack: bool
    alt_position: np.ndarray | None
    per_source: list = field(default_factory=list)
    decided: bool = True
    unavailable: bool = False
    misaligned: bool = False
    regime: tuple = ()


@dataclass
class _Entry:
    t: float
    obs: dict
    resid: dict
    interval: dict


def _nearest_index(times: np.ndarray, t: float) -> int:
    j = int(np.searchsorted(times, t))
    if j == 0:
        return 0
    if j >= len(times):
        return len(times) - 1
    return j if times[j] - t < t - times[j - 1] else j - 1


def fused_log_likelihood(z_means, z_sigmas, g_means) -> float:
    """Sum over sources of the GNSS log-density under each source's ``Z``.

    When every source sees the same GNSS average this is the log-likelihood
    under the fused product Gaussian; otherwise the per-source terms are
    added directly.
    """
    if np.all(g_means == g_means[0]):
        return log_likelihood(categorical_fuse(z_means, z_sigmas), g_means[0])
    return float(sum(
        log_likelihood(categorical_fuse(zm[None], zs[None]), g)
        for zm, zs, g in zip(z_means, z_sigmas, g_means)
    ))


def build_epochs(trace: Trace, use_motion: bool = True, align_tolerance: float = 0.5) -> list[Epoch]:
    """Resample every stream onto the GNSS clock.

    Network samples further than ``align_tolerance`` from an epoch count as
    unavailable and mark the epoch misaligned (an ``AlignmentWarning`` is
    issued once per call).  IMU samples between consecutive epochs are
    reduced to speed and attitude at the earlier epoch and the mean
    acceleration over the interval.  A trace without a speed channel gets
    the running integral of acceleration in its place.
    """
    gnss = trace.gnss
    epochs = []
    motion = trace.motion if use_motion else None
    if motion is not None and len(motion) == 0:
        motion = None
    v_stream = None
    if motion is not None:
        v_stream = motion.v
        if not motion.has_speed and motion.has_accel:
            v_stream = cumulative_trapezoid(np.nan_to_num(motion.a), motion.t, axis=0, initial=0.0)
    warned = False
    for k, t in enumerate(gnss.t):
        misaligned = False
        positions = {}
        for src, stream in trace.networks.items():
            if len(stream) == 0:
                continue
            j = _nearest_index(stream.t, t)
            if abs(stream.t[j] - t) > align_tolerance:
                misaligned = True
                positions[src] = None
            else:
                positions[src] = stream.xy[j].copy() if stream.available[j] else None
        m = None
        if motion is not None and k > 0:
            t0 = gnss.t[k - 1]
            i0 = max(int(np.searchsorted(motion.t, t0, side="right")) - 1, 0)
            i1 = int(np.searchsorted(motion.t, t, side="left"))
            seg = motion.a[i0 : max(i1, i0 + 1)]
            a = None if np.isnan(seg).all() else np.nanmean(seg, axis=0)
            v = v_stream[i0]
            v = None if np.isnan(v).all() else np.asarray(v, float)
            att = np.nan_to_num(motion.attitude[i0])
            if abs(motion.t[i0] - t0) > align_tolerance:
                misaligned = True
            m = MotionSample(float(t0), v, a, Attitude(*att))
        if misaligned and not warned:
            warnings.warn(f"stream gap larger than {align_tolerance} s at t={t}", AlignmentWarning, stacklevel=2)
            warned = True
        epochs.append(Epoch(float(t), gnss.xy[k].copy(), positions, m, misaligned))
    return epochs


class Detector:
    """Stateful per-trace detector; ``copy.deepcopy`` gives an independent branch."""

    def __init__(self, config: DetectorConfig, covariances: dict | None = None, gamma: float | None = None,
                 regime_gammas: dict | None = None):
        self.config = config
        self.covariances = {}
        for src in (Source.GNSS, *NETWORK_SOURCES):
            cov = (covariances or {}).get(src)
            self.covariances[src] = cov if cov is not None else config.default_covariance(src)
        self.gamma = config.gamma if gamma is None else gamma
        # thresholds per regime, i.e. per set of interval sources: the scale
        # of the statistic depends on which sources enter it
        self.regime_gammas = {} if config.gamma is not None else dict(regime_gammas or {})
        self.reset()

    def reset(self):
        self.window: deque = deque(maxlen=self.config.window)
        self.last_t = -math.inf
        self.quarantined = False
        self.benign_streak = 0
        self.last_attack = False
        self.last_alt = None
        # per-source (t, position) the next sensor anchor is propagated from
        self.dr_base: dict = {}
        self.quarantine_start = None
        self.trusted_var = None
        self.epochs_seen = 0

    def snapshot(self) -> "Detector":
        return copy.deepcopy(self)

    # ------------------------------------------------------------------
    def interval_sources(self, motion_available: bool) -> list:
        mode = self.config.mode
        out = []
        if mode is not Mode.NETWORKS_ONLY and motion_available:
            out.append(Source.GNSS)
        if mode is not Mode.SENSORS_ONLY:
            out.extend(NETWORK_SOURCES)
        return out

    def _anchor(self, src, epoch: Epoch):
        """IMU-propagated position of ``src`` at the epoch, or None."""
        m = epoch.motion
        if m is None or self.config.mode is Mode.NETWORKS_ONLY or not self.window:
            return None
        prev = self.window[-1]
        if not math.isclose(prev.t, m.t, abs_tol=1e-6):
            return None
        base = self.dr_base.get(src)
        if base is None or base[0] != prev.t:
            return None
        return dead_reckon_anchor((base[1], m), epoch.t)

    def _interval(self, src, epoch: Epoch):
        cfg = self.config
        ts, xs, rts, rxs = [], [], [], []
        for e in self.window:
            obs = e.obs.get(src)
            if obs is not None:
                ts.append(e.t)
                xs.append(obs)
            r = e.resid.get(src)
            if r is not None:
                rts.append(e.t)
                rxs.append(r)
        anchor = self._anchor(src, epoch)
        if src is Source.GNSS:
            if anchor is None:
                return None, None, None
            if self.quarantined:
                if cfg.mode is not Mode.SENSORS_ONLY:
                    # the network intervals carry the decision meanwhile
                    return None, None, anchor
                # no trusted GNSS since the flag: the sensors alone carry the
                # source forward, and their drift widens the interval
                age = epoch.t - self.quarantine_start
                base = self.trusted_var
                if base is None:
                    base = np.full(2, self.covariances[src].sill)
                var = np.asarray(base, float) + (cfg.drift_rate * age) ** 2
                return (anchor, var), None, anchor
        if len(ts) < cfg.order + 2 or epoch.t - ts[-1] > cfg.stale_after:
            # too little history, or too old to extrapolate
            return None, None, anchor
        constraint = None
        if anchor is not None:
            constraint = MotionConstraint.from_slot(anchor, epoch.t - self.window[-1].t, cfg.eps)
        try:
            fit = fit_constrained(np.array(ts), np.array(xs), epoch.t, cfg.order, cfg.loc_kernel, constraint)
        except DegenerateFitError:
            return None, None, anchor
        p_hat = predict(fit, epoch.t)
        if not rts:
            return None, p_hat, anchor
        try:
            iv = build_interval(fit, np.array(rts), np.array(rxs), epoch.t, self.covariances[src], src)
        except SingularSystemError:
            return None, p_hat, anchor
        var = np.maximum(iv.var, cfg.nugget)
        return (iv.mean, var), p_hat, anchor

    def step(self, epoch: Epoch) -> Verdict:
        cfg = self.config
        t = float(epoch.t)
        if not t > self.last_t:
            raise InvalidInputError(f"epoch time {t} does not follow {self.last_t}")
        while self.window and self.window[0].t <= t - cfg.window:
            self.window.popleft()

        motion_ok = epoch.motion is not None and cfg.mode is not Mode.NETWORKS_ONLY
        sources = self.interval_sources(motion_ok)
        intervals, p_hats, anchors = {}, {}, {}
        for src in sources:
            iv, p_hat, anchor = self._interval(src, epoch)
            if iv is not None:
                intervals[src] = iv
            if p_hat is not None:
                p_hats[src] = p_hat
            if anchor is not None:
                anchors[src] = anchor

        # per-source temporal fusion over the window plus the current epoch;
        # the GNSS average for a source uses that source's weights, so both
        # sides of the comparison carry the same lag behind the platform
        z_means, z_sigmas, g_means, per_source = [], [], [], []
        for src, (mean, var) in intervals.items():
            past = [e for e in self.window if src in e.interval]
            ts = np.array([e.t for e in past] + [t])
            means = np.array([e.interval[src][0] for e in past] + [mean])
            vars_ = np.array([e.interval[src][1] for e in past] + [var])
            w = temporal_weights(ts - t, cfg.temporal_bandwidth)
            zm, zs = temporal_fuse(means, vars_, w)
            g_means.append(w @ np.array([e.obs["gnss_raw"] for e in past] + [epoch.gnss]))
            z_means.append(zm)
            z_sigmas.append(zs)
            per_source.append((src, zm, zs))

        # a quarantined GNSS interval is the sensor track, scored on its own
        tracked = self.quarantined and Source.GNSS in intervals
        regime = tuple(s.value + ("-track" if tracked and s is Source.GNSS else "") for s in intervals)
        gamma = self.regime_gammas.get(regime, self.gamma)
        gamma = -math.inf if gamma is None else gamma
        self.epochs_seen += 1
        decided = bool(z_means) and self.epochs_seen > cfg.warmup
        if decided:
            ll = fused_log_likelihood(np.array(z_means), np.array(z_sigmas), np.array(g_means))
            if tracked and len(z_sigmas) == 1:
                # the track widens with age; scoring the whitened residual keeps
                # the statistic's benign distribution independent of that age
                ll += float(np.sum(np.log(z_sigmas[0])))
            attack = bool(ll <= gamma)
        else:
            ll = math.nan
            attack = self.last_attack

        # alternative position from the fused Z distributions; the sensor
        # track never used the suspect samples, so it may stand in
        alt_src = [k for k, (s, _, _) in enumerate(per_source)
                   if not (attack and s is Source.GNSS and not tracked)]
        unavailable = False
        if alt_src:
            fused_alt = categorical_fuse(np.array([z_means[k] for k in alt_src]),
                                         np.array([z_sigmas[k] for k in alt_src]))
            alt = fused_alt.mean
        elif self.epochs_seen <= cfg.warmup and not attack:
            alt = np.asarray(epoch.gnss, float).copy()
        else:
            unavailable = True
            alt = self.last_alt
            if alt is not None and epoch.motion is not None and cfg.mode is not Mode.NETWORKS_ONLY:
                dt = t - epoch.motion.t
                if dt > 0:
                    alt, _ = propagate_state(alt, epoch.motion, dt)

        # quarantine with hysteresis
        if Source.GNSS in intervals and not self.quarantined:
            self.trusted_var = np.asarray(intervals[Source.GNSS][1], float)
        if attack:
            if not self.quarantined:
                self.quarantine_start = self.last_t
            self.quarantined = True
            self.benign_streak = 0
        elif self.quarantined:
            self.benign_streak += 1
            if self.benign_streak >= cfg.readmit_after:
                self.quarantined = False
        include_gnss = not attack and not self.quarantined

        obs = {"gnss_raw": np.asarray(epoch.gnss, float).copy()}
        if include_gnss:
            obs[Source.GNSS] = obs["gnss_raw"]
        for src, p in epoch.positions.items():
            if p is not None and src is not Source.GNSS:
                obs[Source(src)] = np.asarray(p, float)
        resid = {}
        for src, p_hat in p_hats.items():
            if obs.get(src) is not None:
                resid[src] = p_hat - obs[src]
        self.window.append(_Entry(t, obs, resid, dict(intervals)))
        # a source seen this epoch restarts its dead-reckoning chain from the
        # observation; otherwise the chain keeps integrating the sensors, so
        # stale windows cannot make it creep
        for src in sources:
            if obs.get(src) is not None:
                self.dr_base[src] = (t, obs[src])
            elif src in anchors:
                self.dr_base[src] = (t, anchors[src])
            else:
                self.dr_base.pop(src, None)
        self.last_t = t
        self.last_attack = attack
        self.last_alt = None if alt is None else np.asarray(alt, float)
        return Verdict(t, ll, gamma, attack, self.last_alt, per_source, decided, unavailable,
                       epoch.misaligned, regime)

    def window_sources(self) -> list:
        """``(t, sources with a stored observation)`` for every window entry."""
        return [(e.t, {k for k in e.obs if k != "gnss_raw"}) for e in self.window]

    def run(self, epochs) -> list[Verdict]:
        return [self.step(e) for e in epochs]


def _check_streams(config: DetectorConfig, trace: Trace):
    if config.mode is not Mode.NETWORKS_ONLY and (trace.motion is None or len(trace.motion) == 0):
        raise ConfigError(f"{config.mode.value} mode needs on-board sensor data")
    if config.mode is not Mode.SENSORS_ONLY:
        usable = [s for s in trace.networks.values() if len(s) and s.available.any()]
        if not usable:
            raise InitializationError(f"{config.mode.value} mode needs at least one available network source")


def initialize(config: DetectorConfig, calibration: Trace | list, calibration_rounds: int = 4,
               min_regime_samples: int = 50) -> Detector:
    """Fit per-source covariances and calibrate the threshold on a benign trace.

    ``calibration`` is a trace or a list of traces.  The first pass runs with
    default covariances and collects one-step residuals; later passes run
    with the fitted covariances and collect benign log-likelihoods, at most
    ``calibration_rounds`` times after the first so that the threshold
    reflects the quarantine it triggers.
    """
    traces = calibration if isinstance(calibration, (list, tuple)) else [calibration]
    for tr in traces:
        _check_streams(config, tr)
        if len(tr.gnss) < config.window:
            raise InitializationError(f"calibration trace has {len(tr.gnss)} epochs, need {config.window}")
    epoch_sets = [build_epochs(tr, config.mode is not Mode.NETWORKS_ONLY, config.align_tolerance) for tr in traces]

    probe = Detector(config, gamma=-math.inf)
    history: dict = {}
    for k, epochs in enumerate(epoch_sets):
        probe.reset()
        for e in epochs:
            probe.step(e)
            last = probe.window[-1]
            for src, r in last.resid.items():
                ts, xs = history.setdefault(src, ([], []))
                # shift each trace far apart so no lag pairs span two traces
                ts.append(last.t + 1e7 * k)
                xs.append(r)
    covs = {}
    for src in (Source.GNSS, *NETWORK_SOURCES):
        if src in history:
            ts, xs = history[src]
            covs[src] = fit_covariance(np.array(ts), np.array(xs), config.default_covariance(src))

    def score(gamma, regime_gammas):
        scorer = Detector(config, covs, gamma, regime_gammas)
        out = []
        for epochs in epoch_sets:
            scorer.reset()
            for e in epochs:
                v = scorer.step(e)
                if v.decided and math.isfinite(v.log_likelihood):
                    out.append((v.regime, v.log_likelihood))
        if not out:
            raise InitializationError("calibration produced no decisions")
        return out

    def thresholds(scored):
        lls = np.array([ll for _, ll in scored])
        pooled = calibrate_threshold(lls, config.p_fp_max)
        by_regime: dict = {}
        for regime, ll in scored:
            by_regime.setdefault(regime, []).append(ll)
        per = {r: calibrate_threshold(np.array(v), config.p_fp_max)
               for r, v in by_regime.items() if len(v) >= min_regime_samples}
        return pooled, per, lls

    # flags quarantine GNSS and so change which regimes later epochs fall
    # in; recalibrate under those dynamics until the thresholds settle
    gamma, per, lls = thresholds(score(-math.inf, {}))
    for _ in range(calibration_rounds):
        new_gamma, new_per, lls = thresholds(score(gamma, per))
        if new_gamma == gamma and new_per == per:
            break
        gamma, per = new_gamma, new_per
    det = Detector(config, covs, gamma, per)
    det.calibration_lls = lls
    log.info("calibrated gamma %.4f with %d regime thresholds", gamma, len(per))
    return det


def run(trace: Trace, config: DetectorConfig, detector: Detector | None = None,
        calibration: Trace | list | None = None) -> list[Verdict]:
    """One verdict per GNSS epoch of ``trace``."""
    _check_streams(config, trace)
    if detector is None:
        if calibration is None:
            raise InitializationError("need a calibrated detector or a calibration trace")
        detector = initialize(config, calibration)
    detector.reset()
    epochs = build_epochs(trace, config.mode is not Mode.NETWORKS_ONLY, config.align_tolerance)
    return detector.run(epochs)
