"""Coordinate handling and rigid-motion propagation.

All detector math runs in a local east/north frame in meters.  WGS84
coordinates only appear at the ingestion boundary, where they are projected
onto the tangent plane at a per-trace origin.

Body-frame vectors use the right-forward-up convention: x points right,
y forward, z up.  With zero attitude the body frame coincides with
east-north-up, and a positive yaw turns the platform to the left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidInputError

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


class GeoPoint(NamedTuple):
    lat: float
    lon: float


class EnuPoint(NamedTuple):
    east: float
    north: float


def wrap_angle(a: float) -> float:
    """Map an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class Attitude:
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("roll", "pitch", "yaw"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InvalidInputError(f"{name} must be finite, got {value}")
            object.__setattr__(self, name, wrap_angle(float(value)))

    def as_array(self) -> np.ndarray:
        return np.array([self.roll, self.pitch, self.yaw])


@dataclass(frozen=True)
class MotionSample:
    """On-board sensor sample.

    ``v`` and ``a`` are body-frame 3-vectors.  Either may be ``None`` when the
    platform lacks the corresponding sensor.
    """

    t: float
    v: np.ndarray | None
    a: np.ndarray | None
    attitude: Attitude = Attitude()


def _check_geo(p: GeoPoint):
    lat, lon = p
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise InvalidInputError(f"non-finite coordinate {p}")
    if not -90.0 <= lat <= 90.0:
        raise InvalidInputError(f"latitude {lat} outside [-90, 90]")
    if not -180.0 <= lon <= 180.0:
        raise InvalidInputError(f"longitude {lon} outside [-180, 180]")


def _radii(lat_rad: float) -> tuple[float, float]:
    # meridional (M) and prime-vertical (N) radii of curvature
    s = math.sin(lat_rad)
    denom = math.sqrt(1.0 - WGS84_E2 * s * s)
    return WGS84_A * (1.0 - WGS84_E2) / denom**3, WGS84_A / denom


def _wrap_lon_delta(dlon: float) -> float:
    return (dlon + 180.0) % 360.0 - 180.0


def wgs84_to_enu(p: GeoPoint, origin: GeoPoint) -> EnuPoint:
    """Project ``p`` onto the tangent plane at ``origin``.

    Uses the two principal radii of curvature at the origin latitude, which is
    accurate to well below GNSS noise for offsets of a few tens of km.
    """
    _check_geo(p)
    _check_geo(origin)
    lat0 = math.radians(origin[0])
    m, n = _radii(lat0)
    dlat = math.radians(p[0] - origin[0])
    dlon = math.radians(_wrap_lon_delta(p[1] - origin[1]))
    return EnuPoint(n * math.cos(lat0) * dlon, m * dlat)


def enu_to_wgs84(p: EnuPoint, origin: GeoPoint) -> GeoPoint:
    _check_geo(origin)
    lat0 = math.radians(origin[0])
    m, n = _radii(lat0)
    east, north = p
    lat = origin[0] + math.degrees(north / m)
    lon = origin[1] + math.degrees(east / (n * math.cos(lat0)))
    return GeoPoint(lat, _wrap_lon_delta(lon))


def rotation_matrix(att: Attitude | np.ndarray | tuple) -> np.ndarray:
    """Body (right-forward-up) to local-level rotation ``R = R_yaw R_pitch R_roll``."""
    if isinstance(att, Attitude):
        roll, pitch, yaw = att.roll, att.pitch, att.yaw
    else:
        roll, pitch, yaw = (float(x) for x in att)
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    r_yaw = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    r_pitch = np.array([[cp, 0.0, sp], [0.0, 1.0, 0.0], [-sp, 0.0, cp]])
    r_roll = np.array([[1.0, 0.0, 0.0], [0.0, cr, -sr], [0.0, sr, cr]])
    return r_yaw @ r_pitch @ r_roll


def transition_matrices(att, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """State-transition ``F`` and control-input ``B`` for the state (p, v).

    ``p`` is a local-level 3-vector and ``v`` the body-frame velocity; the
    propagated velocity is expressed in the local-level frame, hence the
    rotation in the lower-right block.
    """
    r = rotation_matrix(att)
    f = np.block([[np.eye(3), r * dt], [np.zeros((3, 3)), r]])
    b = np.vstack([r * (0.5 * dt * dt), r * dt])
    return f, b


def propagate_state(p, m: MotionSample, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Dead-reckon a 2-D position over ``dt`` seconds.

    Returns the propagated east/north position and the local-level velocity.
    A missing velocity or acceleration channel is treated as zero.
    """
    if not dt > 0.0:
        raise InvalidInputError(f"dt must be positive, got {dt}")
    r = rotation_matrix(m.attitude)
    v = np.zeros(3) if m.v is None else np.asarray(m.v, dtype=float)
    a = np.zeros(3) if m.a is None else np.asarray(m.a, dtype=float)
    rv = r @ v
    ra = r @ a
    disp = rv * dt + 0.5 * ra * dt * dt
    p_new = np.asarray(p, dtype=float)[:2] + disp[:2]
    return p_new, rv + ra * dt
