"""Trace and attack simulation.

Synthesizes a kinematically consistent ground-truth drive, the opportunistic
streams observed by the platform (GNSS, Wi-Fi and cellular positions from
weighted-centroid localization, IMU/speed sensors) and the two-stage lateral
spoofing attack.  Streams are stored column-wise in numpy arrays; the CSV
layer at the bottom of the module reads and writes the interchange format.

Every random draw comes from a generator keyed on ``(rng_seed, stream id)``
so each stream is reproducible on its own.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError, TraceFormatError


class Source(str, enum.Enum):
    GNSS = "GNSS"
    WIFI = "WIFI"
    CELLULAR = "CELLULAR"
    TRUTH = "TRUTH"


NETWORK_SOURCES = (Source.WIFI, Source.CELLULAR)


class Shape(str, enum.Enum):
    STRAIGHT = "STRAIGHT"
    ARC = "ARC"
    RANDOM_WAYPOINT = "RANDOM_WAYPOINT"


class AnchorKind(str, enum.Enum):
    AP = "AP"
    BS = "BS"


# stream ids used to key the random generators
_STREAM_KEYS = {
    "truth": 1,
    "gnss": 2,
    Source.WIFI: 3,
    Source.CELLULAR: 4,
    "imu": 5,
    "anchors_wifi": 6,
    "anchors_cell": 7,
}


def stream_rng(seed: int, key) -> np.random.Generator:
    return np.random.default_rng([int(seed), _STREAM_KEYS.get(key, key)])


@dataclass(frozen=True)
class TraceConfig:
    duration: float = 600.0
    gnss_rate: float = 1.0
    imu_rate: float = 200.0
    gnss_noise_var: float = 0.9
    wifi_noise_var: float = 33.0
    cell_noise_var: float = 9.0
    unavailability: float = 0.05
    anchor_count: int = 4
    anchor_offset: float = 50.0
    # mean along-path distance between anchor sites
    anchor_spacing: float = 2.0
    wifi_tx_power: float = 20.0
    cell_tx_power: float = 43.0
    path_loss_exponent: float = 2.0
    speed: float = 10.0
    yaw_rate: float = 0.1
    heading: float = 0.0
    max_speed: float = 25.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        if self.gnss_rate <= 0 or self.imu_rate <= 0:
            raise ConfigError("rates must be positive")
        if min(self.gnss_noise_var, self.wifi_noise_var, self.cell_noise_var) < 0:
            raise ConfigError("noise variances must be non-negative")
        if not 0.0 <= self.unavailability < 1.0:
            raise ConfigError("unavailability must lie in [0, 1)")
        if self.anchor_count < 3:
            raise ConfigError("at least 3 anchors are required")
        if self.anchor_spacing <= 0 or self.anchor_offset <= 0:
            raise ConfigError("anchor spacing and offset must be positive")
        ratio = self.imu_rate / self.gnss_rate
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("imu_rate must be an integer multiple of gnss_rate")
        if not 0 <= self.speed <= self.max_speed:
            raise ConfigError("speed must lie in [0, max_speed]")

    def noise_var(self, source: Source) -> float:
        return {
            Source.GNSS: self.gnss_noise_var,
            Source.WIFI: self.wifi_noise_var,
            Source.CELLULAR: self.cell_noise_var,
            Source.TRUTH: 0.0,
        }[Source(source)]


@dataclass
class PositionStream:
    source: Source
    t: np.ndarray
    xy: np.ndarray
    available: np.ndarray

    def __post_init__(self):
        self.source = Source(self.source)
        self.t = np.asarray(self.t, dtype=float)
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.available = np.asarray(self.available, dtype=bool)
        if not (len(self.t) == len(self.xy) == len(self.available)):
            raise InvalidInputError("position stream columns differ in length")

    def __len__(self):
        return len(self.t)

    def copy(self) -> "PositionStream":
        return PositionStream(self.source, self.t.copy(), self.xy.copy(), self.available.copy())


@dataclass
class MotionStream:
    """Body-frame speed and acceleration plus attitude (roll, pitch, yaw).

    Missing channels are stored as NaN columns.
    """

    t: np.ndarray
    v: np.ndarray
    a: np.ndarray
    attitude: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        n = len(self.t)
        self.v = np.asarray(self.v, dtype=float).reshape(n, 3)
        self.a = np.asarray(self.a, dtype=float).reshape(n, 3)
        self.attitude = np.asarray(self.attitude, dtype=float).reshape(n, 3)

    def __len__(self):
        return len(self.t)

    @property
    def has_speed(self) -> bool:
        return len(self) > 0 and not np.isnan(self.v).all()

    @property
    def has_accel(self) -> bool:
        return len(self) > 0 and not np.isnan(self.a).all()


@dataclass
class TruthTrace:
    """Dense ground truth at the IMU rate plus its GNSS-rate subsample."""

    t: np.ndarray
    xy: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    motion: MotionStream
    positions: PositionStream
    epoch_index: np.ndarray

    @property
    def epoch_heading(self) -> np.ndarray:
        return self.heading[self.epoch_index]


@dataclass
class Trace:
    """Everything the platform observes, plus truth for scoring."""

    truth: PositionStream
    gnss: PositionStream
    networks: dict = field(default_factory=dict)
    motion: MotionStream | None = None

    def streams(self) -> dict:
        out = {Source.TRUTH: self.truth, Source.GNSS: self.gnss}
        out.update(self.networks)
        return out


@dataclass(frozen=True)
class Anchor:
    id: int
    p: tuple
    kind: AnchorKind
    tx_power: float
    path_loss_exponent: float = 2.0
    # along-path position of the site the anchor was placed at (NaN if unknown)
    arclength: float = float("nan")


@dataclass(frozen=True)
class AttackConfig:
    onset: float
    profile_offset: float = 1.0
    growth_rate: float = 1.5
    max_deviation: float = 10.0
    stage1_duration: float = 10.0
    # None: perpendicular to the instantaneous heading (to the right)
    direction: tuple | None = None

    def __post_init__(self):
        if self.onset < 0:
            raise ConfigError("onset must be non-negative")
        if self.profile_offset < 0:
            raise ConfigError("profile_offset must be non-negative")
        if not self.growth_rate > 1.0:
            raise ConfigError("growth_rate must exceed 1")
        if self.max_deviation < self.profile_offset:
            raise ConfigError("max_deviation must be at least profile_offset")
        if self.stage1_duration < 0:
            raise ConfigError("stage1_duration must be non-negative")
        if self.direction is not None:
            norm = math.hypot(*self.direction)
            if not abs(norm - 1.0) < 1e-9:
                raise ConfigError("direction must be a unit vector")

    def deviation(self, t) -> np.ndarray:
        """Deviation magnitude d(t) in meters (zero before onset)."""
        t = np.asarray(t, dtype=float)
        t2 = self.onset + self.stage1_duration
        with np.errstate(over="ignore"):
            grown = self.profile_offset * np.power(self.growth_rate, np.maximum(t - t2, 0.0))
        d = np.where(t >= t2, np.minimum(grown, self.max_deviation), self.profile_offset)
        return np.where(t >= self.onset, d, 0.0)


@dataclass(frozen=True)
class DriftConfig:
    """IMU and speed-sensor error model (per-sample noise at the IMU rate)."""

    accel_noise_std: float = 0.05
    accel_bias_std: float = 0.02
    accel_bias_walk: float = 0.002
    accel_bias: tuple = (0.0, 0.0, 0.0)
    speed_noise_std: float = 0.05
    speed_bias_std: float = 0.15
    speed_bias_walk: float = 0.02
    attitude_noise_std: float = 0.002

    @classmethod
    def zero(cls) -> "DriftConfig":
        return cls(0.0, 0.0, 0.0, (0.0, 0.0, 0.0), 0.0, 0.0, 0.0, 0.0)


# --------------------------------------------------------------------------
# ground truth


def _waypoint_commands(cfg: TraceConfig, rng: np.random.Generator, n_ctrl: int, dt_ctrl: float):
    """Yaw-rate and longitudinal acceleration commands of a waypoint follower."""
    yaw_cmd = np.empty(n_ctrl)
    acc_cmd = np.empty(n_ctrl)
    pos = np.zeros(2)
    heading = cfg.heading
    speed = min(cfg.speed, cfg.max_speed)
    target = pos + rng.uniform(-400.0, 400.0, 2)
    target_speed = rng.uniform(3.0, min(20.0, cfg.max_speed))
    pause = 0.0
    for k in range(n_ctrl):
        offset = target - pos
        if np.hypot(*offset) < 20.0:
            target = pos + rng.uniform(-400.0, 400.0, 2)
            target_speed = rng.uniform(3.0, min(20.0, cfg.max_speed))
            if rng.random() < 0.15:
                pause = rng.uniform(3.0, 10.0)
            offset = target - pos
        desired = math.atan2(-offset[0], offset[1])
        err = (desired - heading + math.pi) % (2.0 * math.pi) - math.pi
        yaw = float(np.clip(0.5 * err, -0.15, 0.15))
        goal = 0.0 if pause > 0.0 else target_speed
        acc = float(np.clip(0.5 * (goal - speed), -2.0, 1.5))
        pause = max(pause - dt_ctrl, 0.0) if speed < 0.5 else pause
        yaw_cmd[k] = yaw if speed > 0.5 else 0.0
        acc_cmd[k] = acc
        speed = min(max(speed + acc * dt_ctrl, 0.0), cfg.max_speed)
        heading += yaw_cmd[k] * dt_ctrl
        pos = pos + speed * dt_ctrl * np.array([-math.sin(heading), math.cos(heading)])
    return yaw_cmd, acc_cmd


def generate_truth_trace(cfg: TraceConfig, shape: Shape | str = Shape.STRAIGHT) -> TruthTrace:
    """Integrate a drive of ``cfg.duration`` seconds at the IMU rate.

    Speed and heading are integrated from piecewise-constant acceleration and
    yaw-rate commands; positions are the trapezoidal integral of the
    resulting velocities, so the motion and position streams agree exactly.
    """
    shape = Shape(shape)
    dt = 1.0 / cfg.imu_rate
    n = int(round(cfg.duration * cfg.imu_rate)) + 1
    t = np.arange(n) * dt

    if shape is Shape.RANDOM_WAYPOINT:
        dt_ctrl = 0.1
        per = max(int(round(dt_ctrl * cfg.imu_rate)), 1)
        n_ctrl = -(-n // per)
        yaw_c, acc_c = _waypoint_commands(cfg, stream_rng(cfg.rng_seed, "truth"), n_ctrl, per * dt)
        yaw_rate = np.repeat(yaw_c, per)[:n]
        accel = np.repeat(acc_c, per)[:n]
    else:
        yaw_rate = np.full(n, cfg.yaw_rate if shape is Shape.ARC else 0.0)
        accel = np.zeros(n)

    speed = np.empty(n)
    speed[0] = cfg.speed
    speed[1:] = cfg.speed + np.cumsum(accel[:-1] * dt)
    # the waypoint follower saturates at 0 and max_speed; keep accel consistent
    clipped = np.clip(speed, 0.0, cfg.max_speed)
    if not np.array_equal(clipped, speed):
        speed = clipped
        accel[:-1] = np.diff(speed) / dt
        accel[-1] = accel[-2] if n > 1 else 0.0
    heading = cfg.heading + np.concatenate([[0.0], np.cumsum(yaw_rate[:-1] * dt)])

    vel = speed[:, None] * np.column_stack([-np.sin(heading), np.cos(heading)])
    xy = np.zeros((n, 2))
    xy[1:] = np.cumsum(0.5 * (vel[1:] + vel[:-1]) * dt, axis=0)

    zeros = np.zeros(n)
    v_body = np.column_stack([zeros, speed, zeros])
    a_body = np.column_stack([-speed * yaw_rate, accel, zeros])
    att = np.column_stack([zeros, zeros, (heading + np.pi) % (2 * np.pi) - np.pi])
    motion = MotionStream(t, v_body, a_body, att)

    step = int(round(cfg.imu_rate / cfg.gnss_rate))
    idx = np.arange(0, n, step)
    positions = PositionStream(Source.TRUTH, t[idx], xy[idx], np.ones(len(idx), bool))
    return TruthTrace(t, xy, speed, heading, motion, positions, idx)


# --------------------------------------------------------------------------
# observed streams


def synth_gnss(truth: TruthTrace, cfg: TraceConfig, rng: np.random.Generator | None = None) -> PositionStream:
    if len(truth.positions) == 0:
        raise InvalidInputError("empty truth trace")
    rng = stream_rng(cfg.rng_seed, "gnss") if rng is None else rng
    pos = truth.positions
    noise = rng.normal(0.0, math.sqrt(cfg.gnss_noise_var), pos.xy.shape)
    return PositionStream(Source.GNSS, pos.t.copy(), pos.xy + noise, np.ones(len(pos), bool))


def _path_point(truth: TruthTrace, arclength: np.ndarray):
    """Position and heading at the given arclengths, extrapolating past the ends."""
    step = np.hypot(*np.diff(truth.xy, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(step)])
    total = s[-1]
    keep = np.concatenate([[True], step > 1e-9])
    s_k, xy_k, hd_k = s[keep], truth.xy[keep], truth.heading[keep]
    if len(s_k) > 1:
        x = np.interp(arclength, s_k, xy_k[:, 0])
        y = np.interp(arclength, s_k, xy_k[:, 1])
        hd = np.interp(arclength, s_k, np.unwrap(hd_k))
    else:
        x = np.full_like(arclength, xy_k[0, 0])
        y = np.full_like(arclength, xy_k[0, 1])
        hd = np.full_like(arclength, hd_k[0])
    # extend straight along the terminal headings
    for mask, ref, h in ((arclength < 0, 0.0, truth.heading[0]), (arclength > total, total, truth.heading[-1])):
        extra = arclength[mask] - ref
        base = truth.xy[0] if ref == 0.0 else truth.xy[-1]
        x[mask] = base[0] - extra * math.sin(h)
        y[mask] = base[1] + extra * math.cos(h)
        hd[mask] = h
    return np.column_stack([x, y]), hd, total


def place_anchors(truth: TruthTrace, cfg: TraceConfig, kind: AnchorKind | str,
                  rng: np.random.Generator | None = None) -> list[Anchor]:
    """Mirrored anchor pairs along the path, ~``anchor_offset`` meters to each side.

    Sites are spaced at exponentially distributed arclength gaps with mean
    ``anchor_spacing`` and extend a few offsets beyond either end of the path.
    """
    kind = AnchorKind(kind)
    key = "anchors_wifi" if kind is AnchorKind.AP else "anchors_cell"
    rng = stream_rng(cfg.rng_seed, key) if rng is None else rng
    tx = cfg.wifi_tx_power if kind is AnchorKind.AP else cfg.cell_tx_power
    _, _, total = _path_point(truth, np.zeros(1))
    margin = 4.0 * cfg.anchor_offset
    n_sites = int((total + 2 * margin) / cfg.anchor_spacing * 1.5) + 8
    gaps = rng.exponential(cfg.anchor_spacing, n_sites)
    s = -margin + np.cumsum(gaps)
    s = s[s <= total + margin]
    centre, hd, _ = _path_point(truth, s)
    lateral = cfg.anchor_offset * rng.uniform(0.9, 1.1, len(s))
    right = np.column_stack([np.cos(hd), np.sin(hd)])
    anchors = []
    for i, (c, r, d) in enumerate(zip(centre, right, lateral)):
        for side in (1.0, -1.0):
            p = c + side * d * r
            anchors.append(Anchor(len(anchors), (float(p[0]), float(p[1])), kind, tx,
                                  cfg.path_loss_exponent, float(s[i])))
    return anchors


def received_power_dbm(anchor_xy: np.ndarray, tx_power, exponent, p: np.ndarray) -> np.ndarray:
    """Log-distance path loss with a 1 m reference distance."""
    d = np.maximum(np.linalg.norm(np.asarray(anchor_xy) - np.asarray(p), axis=-1), 1.0)
    return np.asarray(tx_power) - 10.0 * np.asarray(exponent) * np.log10(d)


def weighted_centroid(anchor_xy: np.ndarray, rss_dbm: np.ndarray) -> np.ndarray:
    """Weighted centroid with linear-power weights ``10**(RSS/10)``."""
    rss = np.asarray(rss_dbm, dtype=float)
    # shift by the max before exponentiating; the ratio is unchanged
    w = np.power(10.0, (rss - np.max(rss)) / 10.0)
    return w @ np.asarray(anchor_xy, dtype=float) / w.sum()


def synth_network_positions(truth: TruthTrace, anchors: list[Anchor], cfg: TraceConfig,
                            source: Source | str | None = None,
                            rng: np.random.Generator | None = None) -> PositionStream:
    """WCL positions from the ``anchor_count`` strongest anchors plus Gaussian noise."""
    if len(anchors) < 3:
        raise ConfigError("network positioning needs at least 3 anchors")
    if source is None:
        source = Source.WIFI if anchors[0].kind is AnchorKind.AP else Source.CELLULAR
    source = Source(source)
    rng = stream_rng(cfg.rng_seed, source) if rng is None else rng
    axy = np.array([a.p for a in anchors])
    tx = np.array([a.tx_power for a in anchors])
    ple = np.array([a.path_loss_exponent for a in anchors])
    k = min(cfg.anchor_count, len(anchors))
    pos = truth.positions
    site_s = np.array([a.arclength for a in anchors])
    if np.isfinite(site_s).all():
        # hear the anchors placed along the current stretch of road; anchors
        # next to earlier or later passes through the same area stay silent
        order = np.argsort(site_s, kind="stable")
        step = np.hypot(*np.diff(truth.xy, axis=0).T)
        s_path = np.concatenate([[0.0], np.cumsum(step)])[truth.epoch_index]
        idx = np.empty((len(pos), k), dtype=int)
        for i, s_now in enumerate(s_path):
            j = np.searchsorted(site_s[order], s_now)
            lo, hi = max(j - k, 0), min(j + k, len(order))
            cand = order[lo:hi]
            idx[i] = cand[np.argsort(np.abs(site_s[cand] - s_now), kind="stable")[:k]]
    else:
        rss_all = np.array([received_power_dbm(axy, tx, ple, p) for p in pos.xy])
        idx = np.argsort(-rss_all, axis=1, kind="stable")[:, :k]
    est = np.empty_like(pos.xy)
    for i, p in enumerate(pos.xy):
        sel = idx[i]
        est[i] = weighted_centroid(axy[sel], received_power_dbm(axy[sel], tx[sel], ple[sel], p))
    noise = rng.normal(0.0, math.sqrt(cfg.noise_var(source)), est.shape)
    available = rng.random(len(pos)) >= cfg.unavailability
    return PositionStream(source, pos.t.copy(), est + noise, available)


def synth_imu(motion: MotionStream, drift: DriftConfig | None = None,
              rng: np.random.Generator | None = None, seed: int = 0) -> MotionStream:
    """Corrupt true body-frame motion with white noise and random-walk biases."""
    drift = DriftConfig() if drift is None else drift
    rng = stream_rng(seed, "imu") if rng is None else rng
    n = len(motion)
    if n == 0:
        return motion
    dt = np.diff(motion.t, prepend=motion.t[0])

    def walk(std0, walk_std, shape):
        b0 = rng.normal(0.0, std0, shape[1:]) if std0 > 0 else np.zeros(shape[1:])
        if walk_std > 0:
            steps = rng.normal(0.0, 1.0, shape) * (walk_std * np.sqrt(dt))[:, None]
            return b0 + np.cumsum(steps, axis=0)
        return np.broadcast_to(b0, shape)

    shape = (n, 3)

    def white(std, shape):
        return rng.normal(0.0, std, shape) if std > 0 else np.zeros(shape)

    a_noise = white(drift.accel_noise_std, shape)
    a_bias = walk(drift.accel_bias_std, drift.accel_bias_walk, shape) + np.asarray(drift.accel_bias)
    v_noise = white(drift.speed_noise_std, n)
    v_bias = walk(drift.speed_bias_std, drift.speed_bias_walk, (n, 1))[:, 0]
    att_noise = white(drift.attitude_noise_std, shape)

    a = motion.a + a_noise + a_bias
    # the speed sensor only measures along the forward axis
    v = motion.v.copy()
    v[:, 1] += v_noise + v_bias
    att = motion.attitude + att_noise
    att = (att + np.pi) % (2 * np.pi) - np.pi
    return MotionStream(motion.t.copy(), v, a, att)


def dead_reckon_path(motion: MotionStream, p0, use_speed: bool = True, v0=None) -> np.ndarray:
    """Integrate a motion stream into east/north positions (trapezoidal rule).

    With ``use_speed=False`` the acceleration channel is integrated twice,
    starting from the local-level velocity ``v0`` (default: at rest).
    """
    from .geo import rotation_matrix

    t = motion.t
    dt = np.diff(t)
    rot = np.array([rotation_matrix(att) for att in motion.attitude])
    if use_speed:
        vel = np.einsum("kij,kj->ki", rot, np.nan_to_num(motion.v))[:, :2]
    else:
        acc = np.einsum("kij,kj->ki", rot, np.nan_to_num(motion.a))[:, :2]
        vel = np.zeros_like(acc)
        vel[:] = np.zeros(2) if v0 is None else np.asarray(v0, dtype=float)[:2]
        vel[1:] += np.cumsum(0.5 * (acc[1:] + acc[:-1]) * dt[:, None], axis=0)
    out = np.zeros((len(t), 2))
    out[0] = p0
    out[1:] = p0 + np.cumsum(0.5 * (vel[1:] + vel[:-1]) * dt[:, None], axis=0)
    return out


def apply_spoofing(gnss: PositionStream, atk: AttackConfig, heading: np.ndarray | None = None) -> PositionStream:
    """Add the two-stage lateral deviation to benign GNSS samples."""
    if len(gnss) and atk.onset > gnss.t[-1]:
        raise InvalidInputError("attack onset lies beyond the end of the trace")
    d = atk.deviation(gnss.t)
    if atk.direction is not None:
        direction = np.broadcast_to(np.asarray(atk.direction, dtype=float), gnss.xy.shape)
    else:
        if heading is None:
            raise InvalidInputError("lateral attacks need the platform heading")
        heading = np.asarray(heading, dtype=float)
        direction = np.column_stack([np.cos(heading), np.sin(heading)])
    out = gnss.copy()
    out.xy = gnss.xy + d[:, None] * direction
    return out


def attack_labels(t: np.ndarray, atk: AttackConfig | None) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    if atk is None:
        return np.zeros(len(t), bool)
    return t >= atk.onset


def synthesize(cfg: TraceConfig, shape: Shape | str = Shape.RANDOM_WAYPOINT,
               drift: DriftConfig | None = None, with_imu: bool = True,
               truth: TruthTrace | None = None) -> tuple[Trace, TruthTrace]:
    """Generate truth and every observed stream for one benign trace."""
    truth = generate_truth_trace(cfg, shape) if truth is None else truth
    gnss = synth_gnss(truth, cfg)
    networks = {}
    for src, kind in ((Source.WIFI, AnchorKind.AP), (Source.CELLULAR, AnchorKind.BS)):
        anchors = place_anchors(truth, cfg, kind)
        networks[src] = synth_network_positions(truth, anchors, cfg, src)
    motion = synth_imu(truth.motion, drift, seed=cfg.rng_seed) if with_imu else None
    return Trace(truth.positions, gnss, networks, motion), truth


# --------------------------------------------------------------------------
# CSV interchange

POSITION_HEADER = ["t", "src", "east", "north", "avail"]
MOTION_HEADER = ["t", "vx", "vy", "vz", "ax", "ay", "az", "roll", "pitch", "yaw"]
POSITIONS_FILE = "positions.csv"
MOTION_FILE = "motion.csv"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_trace(trace: Trace, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for src, stream in trace.streams().items():
        for t, (e, n), av in zip(stream.t, stream.xy, stream.available):
            rows.append((t, src.value, e, n, av))
    rows.sort(key=lambda r: r[0])  # stable: source order is kept within an epoch
    with open(directory / POSITIONS_FILE, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(POSITION_HEADER) + "\n")
        for t, src, e, n, av in rows:
            fh.write(f"{_fmt(t)},{src},{_fmt(e)},{_fmt(n)},{int(bool(av))}\n")
    motion_path = directory / MOTION_FILE
    if trace.motion is not None:
        m = trace.motion
        with open(motion_path, "w", newline="\n", encoding="utf-8") as fh:
            fh.write(",".join(MOTION_HEADER) + "\n")
            buf = io.StringIO()
            for k in range(len(m)):
                vals = [m.t[k], *m.v[k], *m.a[k], *m.attitude[k]]
                buf.write(",".join(_fmt(x) for x in vals) + "\n")
            fh.write(buf.getvalue())
    elif motion_path.exists():
        motion_path.unlink()
    return directory


def _read_rows(path: Path, header: list[str]):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise TraceFormatError(f"{path.name} is empty", line=1) from None
        if [c.strip() for c in first] != header:
            raise TraceFormatError(f"expected header {','.join(header)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TraceFormatError(f"expected {len(header)} fields, got {len(row)}", line=lineno)
            yield lineno, row


def _load_positions(path: Path) -> dict:
    cols: dict = {}
    for lineno, row in _read_rows(path, POSITION_HEADER):
        try:
            t = float(row[0])
            src = Source(row[1].strip())
            e, n = float(row[2]), float(row[3])
            av = row[4].strip()
            if av not in ("0", "1"):
                raise ValueError(f"avail must be 0 or 1, got {av!r}")
        except ValueError as exc:
            raise TraceFormatError(str(exc), line=lineno) from None
        ts, xy, avail, lines = cols.setdefault(src, ([], [], [], []))
        if ts and t <= ts[-1]:
            raise TraceFormatError(f"non-monotonic timestamp {t} for {src.value}", line=lineno)
        ts.append(t)
        xy.append((e, n))
        avail.append(av == "1")
        lines.append(lineno)
    if not cols:
        raise TraceFormatError(f"{path.name} has no samples", line=2)
    return {src: PositionStream(src, ts, xy, av) for src, (ts, xy, av, _) in cols.items()}


def _load_motion(path: Path) -> MotionStream | None:
    ts, vals = [], []
    for lineno, row in _read_rows(path, MOTION_HEADER):
        try:
            rec = [float(x) for x in row]
        except ValueError as exc:
            raise TraceFormatError(str(exc), line=lineno) from None
        if ts and rec[0] <= ts[-1]:
            raise TraceFormatError(f"non-monotonic timestamp {rec[0]}", line=lineno)
        ts.append(rec[0])
        vals.append(rec[1:])
    if not ts:
        return None
    arr = np.array(vals)
    return MotionStream(np.array(ts), arr[:, 0:3], arr[:, 3:6], arr[:, 6:9])


def load_trace(path) -> Trace:
    """Load a trace directory (or its positions CSV).

    The motion file is optional; traces without on-board sensors come back
    with ``motion=None``.
    """
    path = Path(path)
    pos_path = path / POSITIONS_FILE if path.is_dir() else path
    if not pos_path.exists():
        raise TraceFormatError(f"no such file: {pos_path}")
    streams = _load_positions(pos_path)
    for required in (Source.TRUTH, Source.GNSS):
        if required not in streams:
            raise TraceFormatError(f"trace lacks a {required.value} stream")
    motion_path = pos_path.parent / MOTION_FILE
    motion = _load_motion(motion_path) if motion_path.exists() else None
    networks = {s: streams[s] for s in NETWORK_SOURCES if s in streams}
    return Trace(streams[Source.TRUTH], streams[Source.GNSS], networks, motion)


def with_gnss(trace: Trace, gnss: PositionStream) -> Trace:
    return replace(trace, gnss=gnss)
