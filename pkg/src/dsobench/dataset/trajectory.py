"""Constant-speed flight paths: polylines with circular fillets at the corners."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import Pose
from ..keyvalue import ConfigError, parse_keyvalue


@dataclass
class TrajectoryConfig:
    waypoints: list[tuple[float, ...]] = field(
        default_factory=lambda: [(0.0, 0.0), (157.0, 0.0), (157.0, 80.0), (0.0, 80.0)]
    )
    altitude: float = 16.0
    altitude_band: tuple[float, float] = (12.0, 20.0)
    speed: float = 18.0
    frame_rate: float = 10.0
    pitch: float = math.radians(35.0)   # below the horizon
    turn_radius: float = 40.0
    max_frames: int = 0   # 0: sample the whole path

    def __post_init__(self):
        lo, hi = self.altitude_band
        if not lo <= self.altitude <= hi:
            raise ConfigError(f"altitude {self.altitude} outside band {self.altitude_band}")
        if not self.speed > 0:
            raise ConfigError("speed must be positive")
        if not self.frame_rate > 0:
            raise ConfigError("frame rate must be positive")
        if len(self.waypoints) < 2:
            raise ConfigError("need at least two waypoints")

    @property
    def step(self) -> float:
        return self.speed / self.frame_rate

    @classmethod
    def from_dict(cls, kv: dict[str, str]) -> "TrajectoryConfig":
        args = {}
        for key, raw in kv.items():
            if key == "waypoints":
                args[key] = [tuple(float(c) for c in p.replace(",", " ").split())
                             for p in raw.split(";") if p.strip()]
            elif key == "altitude_band":
                args[key] = tuple(float(c) for c in raw.replace(",", " ").split())
            elif key == "pitch_deg":
                args["pitch"] = math.radians(float(raw))
            elif key == "max_frames":
                args[key] = int(raw)
            elif key in ("altitude", "speed", "frame_rate", "pitch", "turn_radius"):
                args[key] = float(raw)
            else:
                raise ConfigError(f"unknown trajectory key {key!r}")
        return cls(**args)

    @classmethod
    def from_text(cls, text: str) -> "TrajectoryConfig":
        return cls.from_dict(parse_keyvalue(text, "trajectory"))


class Path2D:
    """Arc-length parameterised polyline with circular fillets."""

    def __init__(self, points: np.ndarray, radius: float):
        pts = np.asarray(points, dtype=float)
        self.segments = []
        start = pts[0]
        for k in range(1, len(pts) - 1):
            p0, p1, p2 = pts[k - 1], pts[k], pts[k + 1]
            d0 = (p1 - p0) / np.linalg.norm(p1 - p0)
            d1 = (p2 - p1) / np.linalg.norm(p2 - p1)
            cross = d0[0] * d1[1] - d0[1] * d1[0]
            phi = math.acos(float(np.clip(d0 @ d1, -1.0, 1.0)))
            if phi < 1e-9 or radius <= 0:
                self._line(start, p1)
                start = p1
                continue
            tl = radius * math.tan(phi / 2.0)
            a = p1 - d0 * tl
            b = p1 + d1 * tl
            if (a - start) @ d0 < -1e-9 or (p2 - b) @ d1 < -1e-9:
                raise ConfigError("turn radius too large for the waypoint spacing")
            self._line(start, a)
            sign = 1.0 if cross > 0 else -1.0
            normal = np.array([-d0[1], d0[0]]) * sign
            center = a + normal * radius
            ang0 = math.atan2(a[1] - center[1], a[0] - center[0])
            self.segments.append(("arc", center, radius, ang0, sign * phi, radius * phi))
            start = b
        self._line(start, pts[-1])
        self.length = sum(s[-1] for s in self.segments)

    def _line(self, a, b):
        L = float(np.linalg.norm(b - a))
        if L > 1e-12:
            self.segments.append(("line", a.copy(), (b - a) / L, L))

    def at(self, s: float) -> tuple[np.ndarray, float]:
        """Position and heading (radians) at arc length ``s``."""
        for seg in self.segments:
            L = seg[-1]
            if s <= L + 1e-9 or seg is self.segments[-1]:
                s = min(s, L)
                if seg[0] == "line":
                    _, a, d, _ = seg
                    return a + d * s, math.atan2(d[1], d[0])
                _, c, r, ang0, sweep, _ = seg
                ang = ang0 + sweep * (s / L)
                pos = c + r * np.array([math.cos(ang), math.sin(ang)])
                heading = ang + math.copysign(math.pi / 2.0, sweep)
                return pos, heading
            s -= L
        raise AssertionError("unreachable")


def camera_rotation(yaw: float, pitch: float) -> np.ndarray:
    """Camera-to-world rotation; x right, y down, z forward, pitched down."""
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    z = np.array([cp * cy, cp * sy, -sp])
    x = np.array([sy, -cy, 0.0])
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def sample_trajectory(cfg: TrajectoryConfig) -> tuple[list[Pose], np.ndarray]:
    wp = np.asarray(cfg.waypoints, dtype=float)
    xy = wp[:, :2]
    alt = wp[:, 2] if wp.shape[1] > 2 else np.full(len(wp), cfg.altitude)
    path = Path2D(xy, cfg.turn_radius)
    # altitude interpolated linearly along the raw polyline length
    seg_len = np.linalg.norm(np.diff(xy, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)]) * (path.length / seg_len.sum())
    n = int(math.floor(path.length / cfg.step + 1e-9)) + 1
    if cfg.max_frames:
        n = min(n, cfg.max_frames)
    poses, times = [], []
    for k in range(n):
        s = k * cfg.step
        pos, heading = path.at(s)
        z = float(np.interp(s, cum, alt))
        poses.append(Pose(camera_rotation(heading, cfg.pitch), [pos[0], pos[1], z]))
        times.append(k / cfg.frame_rate)
    return poses, np.array(times)
