"""Reference detectors the screening pipeline is compared against.

* ``WCLBaseline``: distance between GNSS and one network's weighted-centroid
  position (base stations by default).
* ``EKFBaseline``: GNSS/IMU Kalman filter, normalized innovation squared.
* ``PFBaseline``: GNSS/IMU particle filter, distance to the predicted mean.
* ``CombinedMetricsBaseline``: sum of Gaussian log-likelihoods of
  per-source position distances, plus a GNSS-versus-sensor speed metric,
  all on one shared scale with no per-source uncertainty or motion model.

Every baseline consumes the same epochs as the detector and exposes a score
where lower means more suspicious, so the threshold comes from
``fusion.calibrate_threshold`` exactly as for the detector.  A flagged
epoch's GNSS sample is withheld from the baseline's state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .detector import DEFAULT_NOISE_VAR, Epoch, build_epochs
from .errors import CalibrationError, InvalidInputError, NumericalError
from .fusion import LOG_2PI, calibrate_threshold
from .geo import propagate_state, rotation_matrix
from .sim import NETWORK_SOURCES, Source, Trace


@dataclass
class BaselineVerdict:
    t: float
    score: float
    threshold: float
    is_attack: bool
    alt_position: np.ndarray | None
    decided: bool = True


def wcl_distance_detect(y_est, p_gnss, threshold: float):
    """``True`` when GNSS lies further than ``threshold`` from the network estimate.

    Returns ``None`` (no decision) when the estimate is unavailable.
    """
    if y_est is None:
        return None
    d = float(np.linalg.norm(np.asarray(y_est, float) - np.asarray(p_gnss, float)))
    return d > threshold


def combined_metrics_detect(metric_lls, gamma: float):
    """Threshold the summed metric log-likelihoods; ``None`` without metrics."""
    lls = list(metric_lls)
    if not lls:
        return None
    return bool(math.fsum(lls) <= gamma)


def gaussian_distance_ll(x, mean, var: float) -> float:
    """Isotropic 2-D Gaussian log-density of ``x``."""
    d = np.asarray(x, float) - np.asarray(mean, float)
    return float(-LOG_2PI - math.log(var) - 0.5 * (d @ d) / var)


def network_mean(epoch: Epoch):
    """Unweighted mean of the network positions seen at the epoch."""
    xs = [epoch.positions[s] for s in NETWORK_SOURCES if epoch.positions.get(s) is not None]
    return np.mean(np.asarray(xs, float), axis=0) if xs else None


class Baseline:
    """Shared stepping and thresholding; subclasses implement ``_score``."""

    name = "baseline"

    def __init__(self, threshold: float = -math.inf, noise_var: dict | None = None):
        self.threshold = threshold
        self.noise_var = dict(DEFAULT_NOISE_VAR)
        self.noise_var.update({Source(k): float(v) for k, v in (noise_var or {}).items()})
        self.reset()

    def reset(self):
        self.last_t = -math.inf
        self.last_attack = False
        self.last_alt = None

    def _score(self, epoch: Epoch):
        """Return ``(score, prior_alt)``; score ``None`` means no decision."""
        raise NotImplementedError

    def _commit(self, epoch: Epoch, accept_gnss: bool):
        """Fold the epoch into the state; return the posterior alternative."""
        raise NotImplementedError

    def step(self, epoch: Epoch) -> BaselineVerdict:
        t = float(epoch.t)
        if not t > self.last_t:
            raise InvalidInputError(f"epoch time {t} does not follow {self.last_t}")
        score, prior_alt = self._score(epoch)
        decided = score is not None and math.isfinite(score)
        attack = bool(score <= self.threshold) if decided else self.last_attack
        alt = self._commit(epoch, accept_gnss=decided and not attack)
        if alt is None:
            alt = prior_alt if prior_alt is not None else self.last_alt
        self.last_t = t
        self.last_attack = attack
        self.last_alt = None if alt is None else np.asarray(alt, float)
        return BaselineVerdict(t, math.nan if score is None else float(score), self.threshold,
                               attack, self.last_alt, decided)

    def run(self, epochs) -> list[BaselineVerdict]:
        self.reset()
        return [self.step(e) for e in epochs]


class WCLBaseline(Baseline):
    """Alarm when GNSS strays from one network's weighted-centroid estimate."""

    name = "wcl"

    def __init__(self, threshold: float = -math.inf, noise_var: dict | None = None,
                 source: Source | str = Source.CELLULAR):
        self.source = Source(source)
        if self.source not in NETWORK_SOURCES:
            raise InvalidInputError(f"{self.source.value} is not a network source")
        super().__init__(threshold, noise_var)

    def _score(self, epoch):
        y = epoch.positions.get(self.source)
        y = None if y is None else np.asarray(y, float)
        self._y = y
        if y is None:
            return None, None
        return -float(np.linalg.norm(y - np.asarray(epoch.gnss, float))), y

    def _commit(self, epoch, accept_gnss):
        return self._y


_I2 = np.eye(2)
_Z2 = np.zeros((2, 2))
_H_POS = np.hstack([_I2, _Z2])
_H_VEL = np.hstack([_Z2, _I2])
_SHIFT = np.block([[_Z2, _I2], [_Z2, _Z2]])
_Q_PP = np.block([[_I2, _Z2], [_Z2, _Z2]])
_Q_PV = np.block([[_Z2, _I2], [_I2, _Z2]])
_Q_VV = np.block([[_Z2, _Z2], [_Z2, _I2]])


class EKFBaseline(Baseline):
    """Constant-velocity Kalman filter driven by IMU acceleration.

    State is east/north position and velocity.  Process noise is the
    continuous white-noise acceleration model with spectral density ``q``;
    the speed sensor, when present, enters as a velocity measurement.  The
    GNSS innovation's squared Mahalanobis norm is the test statistic.
    """

    name = "ekf"

    def __init__(self, threshold: float = -math.inf, noise_var: dict | None = None,
                 q: float = 0.1, vel_noise_var: float = 0.1, init_vel_var: float = 25.0):
        if q < 0 or vel_noise_var <= 0 or init_vel_var <= 0:
            raise InvalidInputError("EKF noise parameters must be positive")
        self.q = q
        self.vel_noise_var = vel_noise_var
        self.init_vel_var = init_vel_var
        super().__init__(threshold, noise_var)

    def reset(self):
        super().reset()
        self.x = None
        self.P = None
        self._prior = None

    @staticmethod
    def _joseph(P, H, R, K):
        a = np.eye(len(P)) - K @ H
        return a @ P @ a.T + K @ R @ K.T

    def _update(self, z, H, R):
        nu = z - H @ self.x
        S = H @ self.P @ H.T + R
        K = np.linalg.solve(S, H @ self.P).T
        self.x = self.x + K @ nu
        self.P = self._joseph(self.P, H, R, K)
        self._check_psd()

    def _check_psd(self):
        P = self.P
        if np.abs(P - P.T).max() > 1e-9 * max(1.0, np.abs(P).max()):
            raise NumericalError("EKF covariance lost symmetry")
        self.P = P = 0.5 * (P + P.T)
        if np.linalg.eigvalsh(P).min() < -1e-9 * max(1.0, np.trace(P)):
            raise NumericalError("EKF covariance is not positive semi-definite")

    def predict(self, dt: float, motion=None):
        """Propagate over ``dt`` seconds with the motion sample's acceleration."""
        if not dt > 0:
            raise InvalidInputError("dt must be positive")
        a = np.zeros(2)
        if motion is not None:
            r = rotation_matrix(motion.attitude)
            if motion.v is not None:
                self._update((r @ motion.v)[:2], _H_VEL, self.vel_noise_var * _I2)
            if motion.a is not None:
                a = (r @ motion.a)[:2]
        F = np.eye(4) + dt * _SHIFT
        Q = self.q * (dt**3 / 3 * _Q_PP + dt**2 / 2 * _Q_PV + dt * _Q_VV)
        self.x = F @ self.x + np.concatenate([0.5 * dt * dt * a, dt * a])
        self.P = F @ self.P @ F.T + Q
        self._check_psd()

    def _score(self, epoch):
        z = np.asarray(epoch.gnss, float)
        r_var = self.noise_var[Source.GNSS]
        if self.x is None:
            self._prior = None
            return None, z
        self.predict(epoch.t - self.last_t, epoch.motion)
        nu = z - _H_POS @ self.x
        S = self.P[:2, :2] + r_var * _I2
        nis = float(nu @ np.linalg.solve(S, nu))
        return -nis, self.x[:2].copy()

    def _commit(self, epoch, accept_gnss):
        z = np.asarray(epoch.gnss, float)
        r_var = self.noise_var[Source.GNSS]
        if self.x is None:
            v0 = np.zeros(2)
            if epoch.motion is not None and epoch.motion.v is not None:
                v0 = (rotation_matrix(epoch.motion.attitude) @ epoch.motion.v)[:2]
            self.x = np.concatenate([z, v0])
            self.P = np.diag([r_var, r_var, self.init_vel_var, self.init_vel_var])
            return z
        if accept_gnss:
            self._update(z, _H_POS, r_var * _I2)
        return self.x[:2].copy()


class PFBaseline(Baseline):
    """Bootstrap particle filter over 2-D position.

    Particles move by the IMU dead-reckoning displacement plus Gaussian
    diffusion and are weighted by the GNSS likelihood.  Resampling is
    systematic and happens when the effective sample size falls below half
    the particle count.
    """

    name = "pf"

    def __init__(self, threshold: float = -math.inf, noise_var: dict | None = None,
                 n_particles: int = 1000, diffusion: float = 0.5, reinit_radius: float = 20.0,
                 seed: int = 0):
        if n_particles < 1 or diffusion < 0 or reinit_radius <= 0:
            raise InvalidInputError("invalid particle filter parameters")
        self.n_particles = n_particles
        self.diffusion = diffusion
        self.reinit_radius = reinit_radius
        self.seed = seed
        super().__init__(threshold, noise_var)

    def reset(self):
        super().reset()
        self.rng = np.random.default_rng(self.seed)
        self.particles = None
        self.weights = None
        self.reinitialized = False

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def estimate(self) -> np.ndarray:
        return self.weights @ self.particles

    def propagate(self, dt: float, motion=None):
        if motion is not None:
            disp, _ = propagate_state(np.zeros(2), motion, dt)
            self.particles = self.particles + disp
        if self.diffusion > 0:
            self.particles = self.particles + self.rng.normal(0.0, self.diffusion, self.particles.shape)

    def reweight(self, z, var: float):
        """Multiply in the GNSS likelihood; reinitialize if every weight vanishes."""
        d2 = np.sum((self.particles - np.asarray(z, float)) ** 2, axis=1)
        w = self.weights * np.exp(-0.5 * d2 / var)
        total = w.sum()
        self.reinitialized = not total > 0
        if self.reinitialized:
            centre = self.estimate()
            self.particles = centre + self.rng.uniform(-self.reinit_radius, self.reinit_radius,
                                                       self.particles.shape)
            self.weights = np.full(self.n_particles, 1.0 / self.n_particles)
            return
        self.weights = w / total
        if self.ess < self.n_particles / 2:
            self.resample()

    def resample(self):
        n = self.n_particles
        positions = (self.rng.random() + np.arange(n)) / n
        cum = np.cumsum(self.weights)
        cum[-1] = 1.0
        idx = np.searchsorted(cum, positions, side="right")
        self.particles = self.particles[np.minimum(idx, n - 1)]
        self.weights = np.full(n, 1.0 / n)

    def _score(self, epoch):
        z = np.asarray(epoch.gnss, float)
        if self.particles is None:
            return None, z
        self.propagate(epoch.t - self.last_t, epoch.motion)
        prior = self.estimate()
        return -float(np.linalg.norm(prior - z)), prior

    def _commit(self, epoch, accept_gnss):
        z = np.asarray(epoch.gnss, float)
        var = self.noise_var[Source.GNSS]
        if self.particles is None:
            self.particles = z + self.rng.normal(0.0, math.sqrt(var), (self.n_particles, 2))
            self.weights = np.full(self.n_particles, 1.0 / self.n_particles)
            return z
        if accept_gnss:
            self.reweight(z, var)
        return self.estimate()

    def step(self, epoch: Epoch) -> BaselineVerdict:
        v = super().step(epoch)
        if self.reinitialized:
            v.is_attack = True
            self.last_attack = True
            self.reinitialized = False
        return v


class CombinedMetricsBaseline(Baseline):
    """Sum of independent per-metric Gaussian log-likelihoods.

    Each available network source contributes the log-density of GNSS at
    that source's position, and with sensors the GNSS-derived speed is
    scored against the sensed speed.  Every metric uses the same variance
    ``metric_var``: the scheme has no model of how uncertain each source or
    the motion is.  The alternative position is the plain mean of the
    network positions.
    """

    name = "combined"

    def __init__(self, threshold: float = -math.inf, noise_var: dict | None = None,
                 metric_var: float = 1.0):
        if not metric_var > 0:
            raise InvalidInputError("metric_var must be positive")
        self.metric_var = metric_var
        super().__init__(threshold, noise_var)

    def reset(self):
        super().reset()
        self.prev_gnss = None

    def metrics(self, epoch: Epoch) -> list[float]:
        z = np.asarray(epoch.gnss, float)
        out = []
        for src in NETWORK_SOURCES:
            p = epoch.positions.get(src)
            if p is not None:
                out.append(gaussian_distance_ll(z, p, self.metric_var))
        motion = epoch.motion
        if motion is not None and motion.v is not None and self.prev_gnss is not None:
            t0, g0 = self.prev_gnss
            speed = np.linalg.norm(z - g0) / (epoch.t - t0)
            sensed = np.linalg.norm(motion.v)
            out.append(-0.5 * LOG_2PI - 0.5 * math.log(self.metric_var)
                       - 0.5 * (speed - sensed) ** 2 / self.metric_var)
        return out

    def _score(self, epoch):
        lls = self.metrics(epoch)
        return (math.fsum(lls) if lls else None), network_mean(epoch)

    def _commit(self, epoch, accept_gnss):
        self.prev_gnss = (float(epoch.t), np.asarray(epoch.gnss, float))
        return network_mean(epoch)


BASELINES = {
    "wcl": WCLBaseline,
    "ekf": EKFBaseline,
    "pf": PFBaseline,
    "combined": CombinedMetricsBaseline,
}


@dataclass
class CalibrationResult:
    threshold: float
    scores: np.ndarray = field(repr=False)
    rounds: int = 0


def calibrate(baseline: Baseline, calibration, p_fp_max: float, rounds: int = 10,
              use_motion: bool = True) -> CalibrationResult:
    """Set ``baseline.threshold`` from benign traces at level ``p_fp_max``.

    A flag withholds GNSS from the state, which shifts later scores, so the
    open-loop quantile can overshoot once the threshold is live.  When it
    does, the quantile level is bisected in ``[0, p_fp_max]`` for ``rounds``
    steps, keeping the largest level whose closed-loop flag rate on the
    calibration data stays within ``p_fp_max``.
    """
    traces = calibration if isinstance(calibration, (list, tuple)) else [calibration]
    epoch_sets = [c if not isinstance(c, Trace) else build_epochs(c, use_motion) for c in traces]

    def replay(threshold):
        baseline.threshold = threshold
        verdicts = [v for epochs in epoch_sets for v in baseline.run(epochs) if v.decided]
        if not verdicts:
            raise CalibrationError(f"{baseline.name} made no decisions on the calibration data")
        return np.array([v.score for v in verdicts]), np.mean([v.is_attack for v in verdicts])

    open_loop, _ = replay(-math.inf)
    gamma = calibrate_threshold(open_loop, p_fp_max)
    scores, rate = replay(gamma)
    k = 0
    if rate > p_fp_max:
        lo, hi = 0.0, p_fp_max
        gamma = calibrate_threshold(open_loop, 0.0)
        scores, rate = replay(gamma)
        for k in range(1, rounds + 1):
            mid = 0.5 * (lo + hi)
            g = calibrate_threshold(open_loop, mid)
            s, r = replay(g)
            if r <= p_fp_max:
                lo, gamma, scores = mid, g, s
            else:
                hi = mid
    baseline.threshold = gamma
    baseline.reset()
    return CalibrationResult(gamma, scores, k)
