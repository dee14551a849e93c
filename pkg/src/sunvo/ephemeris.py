"""Sun direction from date, time and location, plus the camera-frame
zenith/azimuth parameterization used by the sun measurements.

The ephemeris is the low-precision analytic series of the Astronomical
Almanac (mean longitude and anomaly -> ecliptic longitude -> right ascension
and declination -> hour angle), good to roughly 0.01 deg between 1950 and
2050. Refraction, nutation and Earth-orientation corrections are ignored.

World frame is local East-North-Up. World azimuth is clockwise from north.
Camera-frame angles follow ``zenith = acos(-s_y)``, ``azimuth = atan2(s_x, s_z)``
for an x-right, y-down, z-forward camera.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone

import numpy as np

from .errors import TimestampOutOfRange
from .se3 import Pose

_J2000 = datetime(2000, 1, 1, 12, 0, 0, tzinfo=timezone.utc)
_MIN_TIME = datetime(1950, 1, 1, tzinfo=timezone.utc)
_MAX_TIME = datetime(2100, 1, 1, tzinfo=timezone.utc)


def parse_utc(value) -> datetime:
    """Accept a datetime or ISO-8601 string; naive values are taken as UTC."""
    if isinstance(value, datetime):
        dt = value
    else:
        text = str(value).strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_utc(dt: datetime) -> str:
    return parse_utc(dt).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


@dataclass(frozen=True)
class GeodeticAnchor:
    latitude: float
    longitude: float
    timestamp: datetime

    def __post_init__(self):
        object.__setattr__(self, "timestamp", parse_utc(self.timestamp))
        if abs(self.latitude) > 90.0 or abs(self.longitude) > 180.0:
            raise ValueError(f"invalid latitude/longitude {self.latitude}, {self.longitude}")

    def at(self, seconds: float) -> "GeodeticAnchor":
        """Same location, ``seconds`` later."""
        return GeodeticAnchor(self.latitude, self.longitude, self.timestamp + timedelta(seconds=seconds))

    def to_dict(self) -> dict:
        return {"latitude": self.latitude, "longitude": self.longitude, "utc": format_utc(self.timestamp)}

    @classmethod
    def from_dict(cls, d: dict) -> "GeodeticAnchor":
        return cls(float(d["latitude"]), float(d["longitude"]), parse_utc(d["utc"]))


@dataclass(frozen=True)
class SolarPosition:
    declination: float  # rad
    hour_angle: float  # rad, wrapped to (-pi, pi]
    zenith: float  # rad
    azimuth: float  # rad, clockwise from north, [0, 2 pi)
    enu: np.ndarray


def julian_date(dt: datetime) -> float:
    return 2451545.0 + (parse_utc(dt) - _J2000).total_seconds() / 86400.0


def _wrap_pi(a):
    return (a + math.pi) % (2.0 * math.pi) - math.pi


def solar_position(anchor: GeodeticAnchor) -> SolarPosition:
    ts = anchor.timestamp
    if not (_MIN_TIME <= ts < _MAX_TIME):
        raise TimestampOutOfRange(f"{format_utc(ts)} is outside 1950-2100")
    n = julian_date(ts) - 2451545.0
    d2r = math.pi / 180.0

    mean_long = (280.460 + 0.9856474 * n) % 360.0
    mean_anom = ((357.528 + 0.9856003 * n) % 360.0) * d2r
    ecl_long = (mean_long + 1.915 * math.sin(mean_anom) + 0.020 * math.sin(2.0 * mean_anom)) * d2r
    obliquity = (23.439 - 0.0000004 * n) * d2r

    ra = math.atan2(math.cos(obliquity) * math.sin(ecl_long), math.cos(ecl_long))
    dec = math.asin(math.sin(obliquity) * math.sin(ecl_long))

    # n carries the day fraction, so GMST accrues 24.0657 h per day
    ut_hours = (ts - ts.replace(hour=0, minute=0, second=0, microsecond=0)).total_seconds() / 3600.0
    gmst = (6.697375 + 0.0657098242 * n + ut_hours) % 24.0
    lmst = (gmst + anchor.longitude / 15.0) % 24.0
    ha = _wrap_pi(lmst * 15.0 * d2r - ra)

    lat = anchor.latitude * d2r
    east = -math.cos(dec) * math.sin(ha)
    north = math.sin(dec) * math.cos(lat) - math.cos(dec) * math.sin(lat) * math.cos(ha)
    up = math.sin(dec) * math.sin(lat) + math.cos(dec) * math.cos(lat) * math.cos(ha)
    enu = np.array([east, north, up])
    enu /= np.linalg.norm(enu)
    zen = math.acos(max(-1.0, min(1.0, enu[2])))
    az = math.atan2(enu[0], enu[1]) % (2.0 * math.pi)
    return SolarPosition(dec, ha, zen, az, enu)


def sun_direction_enu(anchor: GeodeticAnchor) -> np.ndarray:
    """Unit ENU vector from the observer toward the sun."""
    return solar_position(anchor).enu


def enu_to_azzen(s) -> tuple:
    """World (zenith, azimuth) of an ENU direction, azimuth clockwise from north."""
    s = np.asarray(s, dtype=float)
    return math.acos(max(-1.0, min(1.0, s[2]))), math.atan2(s[0], s[1]) % (2.0 * math.pi)


def vec_to_azzen(s) -> np.ndarray:
    """Camera-frame unit vector(s) to ``(zenith, azimuth)`` in rad.

    Works on ``(3,)`` or ``(n, 3)``; ``atan2(0, 0)`` is 0.
    """
    s = np.asarray(s, dtype=float)
    out = np.empty(s.shape[:-1] + (2,))
    out[..., 0] = np.arccos(np.clip(-s[..., 1], -1.0, 1.0))
    out[..., 1] = np.arctan2(s[..., 0], s[..., 2])
    return out


def azzen_to_vec(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    zen, az = a[..., 0], a[..., 1]
    st = np.sin(zen)
    return np.stack([st * np.sin(az), -np.cos(zen), st * np.cos(az)], axis=-1)


def azzen_jacobian(s) -> np.ndarray:
    """d(zenith, azimuth)/ds for a camera-frame direction ``(3,)`` -> ``(2, 3)``."""
    sx, sy, sz = float(s[0]), float(s[1]), float(s[2])
    J = np.zeros((2, 3))
    J[0, 1] = 1.0 / math.sqrt(max(1.0 - sy * sy, 1e-300))
    h = sx * sx + sz * sz
    J[1, 0] = sz / h
    J[1, 2] = -sx / h
    return J


def expected_sun_in_camera(T_k0: Pose, s_0) -> np.ndarray:
    """Rotate the world sun direction into camera ``k``; translation cannot act on a direction."""
    return T_k0.rotation @ np.asarray(s_0, dtype=float)
