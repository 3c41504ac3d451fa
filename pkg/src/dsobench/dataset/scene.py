"""Procedural scenes: a textured ground plane with boxes and ramps on it.

Every surface is shaded by one continuous 3-D value-noise field, so the
rendered images carry gradient almost everywhere and stay consistent between
viewpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..keyvalue import ConfigError, as_floats, parse_keyvalue


@dataclass
class SceneConfig:
    extent: float = 260.0                  # half side of the ground square, metres
    center: tuple[float, float] = (80.0, 40.0)
    n_boxes: int = 24
    n_ramps: int = 4
    placement: tuple[float, float, float, float] = (-30.0, 190.0, -50.0, 130.0)  # xmin xmax ymin ymax
    box_size: tuple[float, float] = (6.0, 18.0)
    box_height: tuple[float, float] = (1.5, 5.0)
    ramp_height: tuple[float, float] = (1.5, 3.5)
    texture_scale: float = 2.0            # metres, coarsest noise cell
    texture_octaves: int = 6
    texture_persistence: float = 0.75
    texture_contrast: float = 0.8
    sky: float = 0.85
    seed: int = 7

    def __post_init__(self):
        if not self.extent > 0:
            raise ConfigError("scene extent must be positive")
        if self.texture_octaves < 1:
            raise ConfigError("need at least one texture octave")

    @classmethod
    def from_dict(cls, kv: dict[str, str]) -> "SceneConfig":
        cfg = cls()
        for key, raw in kv.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown scene key {key!r}")
            cur = getattr(cfg, key)
            if isinstance(cur, tuple):
                val = tuple(as_floats(raw))
                if len(val) != len(cur):
                    raise ConfigError(f"{key}: expected {len(cur)} numbers")
            elif isinstance(cur, int):
                val = int(raw)
            else:
                val = float(raw)
            setattr(cfg, key, val)
        cfg.__post_init__()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "SceneConfig":
        return cls.from_dict(parse_keyvalue(text, "scene"))


@dataclass
class ConvexSolid:
    """Intersection of half-spaces ``normals @ x <= offsets``."""

    normals: np.ndarray
    offsets: np.ndarray
    albedo: float = 0.0
    aabb: np.ndarray = field(default=None)  # (2, 3) min/max corners

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        """Max of plane distances: exact on the surface and inside."""
        return np.max(points @ self.normals.T - self.offsets, axis=-1)

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        """Entry distance along each ray or ``inf``; ``origin`` must lie outside."""
        denom = dirs @ self.normals.T                      # (N, m)
        num = self.offsets - self.normals @ origin          # (m,)
        with np.errstate(divide="ignore", invalid="ignore"):
            tt = num / denom
        t_enter = np.where(denom < 0, tt, -np.inf).max(axis=1)
        t_exit = np.where(denom > 0, tt, np.inf).min(axis=1)
        parallel_out = np.any((denom == 0) & (num < 0), axis=1)
        hit = (t_enter <= t_exit) & (t_enter > 0) & ~parallel_out
        return np.where(hit, t_enter, np.inf)


def make_box(x0, x1, y0, y1, height, albedo=0.0) -> ConvexSolid:
    n = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]], float)
    c = np.array([x1, -x0, y1, -y0, height, 0.0])
    return ConvexSolid(n, c, albedo, np.array([[x0, y0, 0.0], [x1, y1, height]]))


def make_ramp(x0, x1, y0, y1, height, direction: int, albedo=0.0) -> ConvexSolid:
    """Wedge rising to ``height`` towards one side (0:+x, 1:-x, 2:+y, 3:-y)."""
    normals = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, -1]]
    offsets = [x1, -x0, y1, -y0, 0.0]
    if direction in (0, 1):
        run = x1 - x0
        # z <= h (x - x0) / run   or   z <= h (x1 - x) / run
        if direction == 0:
            normals.append([-height / run, 0, 1]); offsets.append(-height * x0 / run)
        else:
            normals.append([height / run, 0, 1]); offsets.append(height * x1 / run)
    else:
        run = y1 - y0
        if direction == 2:
            normals.append([0, -height / run, 1]); offsets.append(-height * y0 / run)
        else:
            normals.append([0, height / run, 1]); offsets.append(height * y1 / run)
    n = np.array(normals, float)
    c = np.array(offsets, float)
    norm = np.linalg.norm(n, axis=1)
    return ConvexSolid(n / norm[:, None], c / norm, albedo, np.array([[x0, y0, 0.0], [x1, y1, height]]))


class ValueNoise:
    """Multi-octave 3-D value noise with quintic interpolation (C2 smooth)."""

    def __init__(self, rng: np.random.Generator, scale: float, octaves: int, persistence: float):
        self.perm = np.concatenate([rng.permutation(256)] * 2).astype(np.int64)
        self.values = rng.random(256)
        self.scale = scale
        self.octaves = octaves
        self.persistence = persistence

    def _octave(self, p: np.ndarray) -> np.ndarray:
        pi = np.floor(p)
        f = p - pi
        pi = pi.astype(np.int64) & 255
        w = f * f * f * (f * (f * 6.0 - 15.0) + 10.0)
        perm, vals = self.perm, self.values
        out = np.zeros(len(p))
        for dx in (0, 1):
            wx = w[:, 0] if dx else 1.0 - w[:, 0]
            hx = perm[pi[:, 0] + dx]
            for dy in (0, 1):
                wy = w[:, 1] if dy else 1.0 - w[:, 1]
                hy = perm[hx + pi[:, 1] + dy]
                for dz in (0, 1):
                    wz = w[:, 2] if dz else 1.0 - w[:, 2]
                    out += wx * wy * wz * vals[perm[hy + pi[:, 2] + dz]]
        return out

    def __call__(self, points: np.ndarray, footprint: np.ndarray | None = None) -> np.ndarray:
        """Noise in [0, 1]; octaves finer than ~3 px of ``footprint`` fade out."""
        points = np.asarray(points, dtype=float)
        total = np.zeros(len(points))
        norm = 0.0
        amp = 1.0
        cell = self.scale
        for k in range(self.octaves):
            weight = amp
            if footprint is not None:
                px = cell / np.maximum(footprint, 1e-9)
                fade = np.clip((px - 2.0) / 2.0, 0.0, 1.0)
                weight = amp * fade * fade * (3.0 - 2.0 * fade)
            # decorrelate octaves with a fixed offset
            total += weight * (self._octave(points / cell + 17.13 * k) - 0.5)
            norm += amp
            amp *= self.persistence
            cell *= 0.5
        return 0.5 + total / norm


class Scene:
    def __init__(self, config: SceneConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.noise = ValueNoise(rng, config.texture_scale, config.texture_octaves, config.texture_persistence)
        self.solids: list[ConvexSolid] = []
        xmin, xmax, ymin, ymax = config.placement
        for _ in range(config.n_boxes):
            sx, sy = rng.uniform(*config.box_size, size=2)
            x0 = rng.uniform(xmin, xmax - sx)
            y0 = rng.uniform(ymin, ymax - sy)
            h = rng.uniform(*config.box_height)
            self.solids.append(make_box(x0, x0 + sx, y0, y0 + sy, h, rng.uniform(-0.08, 0.08)))
        for _ in range(config.n_ramps):
            sx, sy = rng.uniform(*config.box_size, size=2) * 1.5
            x0 = rng.uniform(xmin, xmax - sx)
            y0 = rng.uniform(ymin, ymax - sy)
            h = rng.uniform(*config.ramp_height)
            self.solids.append(make_ramp(x0, x0 + sx, y0, y0 + sy, h, int(rng.integers(4)),
                                         rng.uniform(-0.08, 0.08)))
        cx, cy = config.center
        e = config.extent
        self.ground_bounds = (cx - e, cx + e, cy - e, cy + e)

    def on_ground(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x0, x1, y0, y1 = self.ground_bounds
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    def signed_distance(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        d = points[:, 2].copy()
        for s in self.solids:
            d = np.minimum(d, s.signed_distance(points))
        return d

    def height_at(self, x: float, y: float) -> float:
        """Terrain height under ``(x, y)``."""
        top = 0.0
        for s in self.solids:
            lo, hi = s.aabb
            if lo[0] <= x <= hi[0] and lo[1] <= y <= hi[1]:
                # ramps: largest z with (x, y, z) inside
                zs = np.linspace(hi[2], 0.0, 2001)
                pts = np.column_stack([np.full_like(zs, x), np.full_like(zs, y), zs])
                inside = s.signed_distance(pts) <= 1e-9
                if inside.any():
                    top = max(top, float(zs[np.argmax(inside)]))
        return top

    def is_inside(self, point) -> bool:
        return bool(self.signed_distance(np.asarray(point, float)[None])[0] <= 0.0)

    def texture(self, points: np.ndarray, footprint: np.ndarray | None = None,
                albedo: np.ndarray | float = 0.0) -> np.ndarray:
        n = self.noise(points, footprint)
        c = self.config.texture_contrast
        return np.clip(0.5 + c * (n - 0.5) + albedo, 0.0, 1.0)

    def cast(self, origin: np.ndarray, dirs: np.ndarray, candidates=None):
        """Nearest hit distance and albedo for each ray (``inf`` when no hit)."""
        origin = np.asarray(origin, dtype=float)
        t = np.full(len(dirs), np.inf)
        albedo = np.zeros(len(dirs))
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(dirs[:, 2] < 0, -origin[2] / dirs[:, 2], np.inf)
        hit = np.isfinite(tg)
        hp = origin + dirs[hit] * tg[hit, None]
        ok = self.on_ground(hp[:, 0], hp[:, 1])
        idx = np.flatnonzero(hit)[~ok]
        tg[idx] = np.inf
        t = tg
        for k, s in enumerate(self.solids):
            sel = slice(None) if candidates is None else candidates[k]
            if sel is None:
                continue
            ts = s.intersect(origin, dirs[sel])
            cur = t[sel]
            closer = ts < cur
            if np.any(closer):
                cur = np.where(closer, ts, cur)
                t[sel] = cur
                a = albedo[sel]
                albedo[sel] = np.where(closer, s.albedo, a)
        return t, albedo


def generate_scene(config: SceneConfig) -> Scene:
    return Scene(config)
