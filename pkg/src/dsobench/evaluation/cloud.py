"""Point clouds and their PCD / PLY serialisation."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class CloudError(ValueError):
    pass


@dataclass(eq=False)
class PointCloud:
    """World-frame points, optional grey values in [0, 255] and optional host depth."""

    points: np.ndarray
    color: np.ndarray | None = None
    source: str = ""
    depth: np.ndarray | None = None   # depth in the host keyframe at estimation time

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise CloudError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise CloudError("point coordinates must be finite")
        self.points = pts
        for name in ("color", "depth"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=float).reshape(-1)
            if len(v) != len(pts):
                raise CloudError(f"{name} has {len(v)} entries for {len(pts)} points")
            setattr(self, name, v)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, source: str = "") -> "PointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0), source, np.zeros(0))

    def transformed(self, transform) -> "PointCloud":
        return PointCloud(transform.apply(self.points), self.color, self.source, self.depth)

    def subset(self, idx) -> "PointCloud":
        pick = lambda a: None if a is None else a[idx]
        return PointCloud(self.points[idx], pick(self.color), self.source, pick(self.depth))


# --------------------------------------------------------------------------
# PCD: binary, little endian, fields x y z intensity (float32)


def write_pcd(path, cloud: PointCloud) -> None:
    n = len(cloud)
    data = np.zeros((n, 4), dtype="<f4")
    data[:, :3] = cloud.points
    if cloud.color is not None:
        data[:, 3] = cloud.color
    header = (
        "# .PCD v0.7 - Point Cloud Data file format\n"
        "VERSION 0.7\n"
        "FIELDS x y z intensity\n"
        "SIZE 4 4 4 4\n"
        "TYPE F F F F\n"
        "COUNT 1 1 1 1\n"
        f"WIDTH {n}\n"
        "HEIGHT 1\n"
        "VIEWPOINT 0 0 0 1 0 0 0\n"
        f"POINTS {n}\n"
        "DATA binary\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())


def read_pcd(path) -> PointCloud:
    raw = Path(path).read_bytes()
    fields, sizes, types, counts = [], [], [], []
    n, fmt, pos = None, None, 0
    while fmt is None:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise CloudError(f"{path}: truncated PCD header")
        line = raw[pos:end].decode("ascii", "replace").strip()
        pos = end + 1
        if not line or line.startswith("#"):
            continue
        key, *vals = line.split()
        key = key.upper()
        if key == "FIELDS":
            fields = vals
        elif key == "SIZE":
            sizes = [int(v) for v in vals]
        elif key == "TYPE":
            types = vals
        elif key == "COUNT":
            counts = [int(v) for v in vals]
        elif key == "POINTS":
            n = int(vals[0])
        elif key == "DATA":
            fmt = vals[0].lower()
    if n is None or not fields:
        raise CloudError(f"{path}: PCD header lacks FIELDS or POINTS")
    counts = counts or [1] * len(fields)
    if any(c != 1 for c in counts):
        raise CloudError(f"{path}: multi-count PCD fields are not supported")
    codes = {("F", 4): "<f4", ("F", 8): "<f8", ("U", 1): "u1", ("U", 2): "<u2", ("U", 4): "<u4",
             ("I", 1): "i1", ("I", 2): "<i2", ("I", 4): "<i4"}
    try:
        dtype = np.dtype([(f, codes[(t.upper(), s)]) for f, t, s in zip(fields, types, sizes)])
    except KeyError as exc:
        raise CloudError(f"{path}: unsupported PCD field type {exc}") from None
    if fmt == "binary":
        if len(raw) - pos < n * dtype.itemsize:
            raise CloudError(f"{path}: PCD data shorter than {n} points")
        rec = np.frombuffer(raw, dtype=dtype, count=n, offset=pos)
    elif fmt == "ascii":
        table = np.loadtxt(raw[pos:].decode("ascii").splitlines(), ndmin=2) if n else np.zeros((0, len(fields)))
        if len(table) != n:
            raise CloudError(f"{path}: expected {n} rows, found {len(table)}")
        rec = np.zeros(n, dtype=dtype)
        for i, f in enumerate(fields):
            rec[f] = table[:, i]
    else:
        raise CloudError(f"{path}: unsupported PCD data format {fmt!r}")
    for f in ("x", "y", "z"):
        if f not in fields:
            raise CloudError(f"{path}: PCD lacks field {f}")
    pts = np.column_stack([rec["x"], rec["y"], rec["z"]]).astype(float)
    color = None
    for f in ("intensity", "gray", "rgb"):
        if f in fields:
            color = rec[f].astype(float)
            break
    return PointCloud(pts, color, str(path))


# --------------------------------------------------------------------------
# PLY: ASCII, x y z gray


def write_ply(path, cloud: PointCloud) -> None:
    n = len(cloud)
    gray = np.zeros(n) if cloud.color is None else cloud.color
    gray = np.clip(np.rint(gray), 0, 255).astype(int)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {n}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nproperty uchar gray\n")
        fh.write("end_header\n")
        # 9 significant digits round-trip float32 exactly
        for (x, y, z), g in zip(cloud.points.astype(np.float32).tolist(), gray):
            fh.write(f"{x:.9g} {y:.9g} {z:.9g} {g}\n")


def read_ply(path) -> PointCloud:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise CloudError(f"{path}: not a PLY file")
    n, props, body = None, [], None
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise CloudError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element" and parts[1] == "vertex":
            n = int(parts[2])
        elif parts[0] == "property" and n is not None:
            props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i + 1
            break
    if n is None or body is None:
        raise CloudError(f"{path}: malformed PLY header")
    rows = [l.split() for l in lines[body:body + n]]
    if len(rows) != n:
        raise CloudError(f"{path}: expected {n} vertices, found {len(rows)}")
    table = np.array(rows, dtype=float).reshape(n, len(props))
    col = {p: table[:, k] for k, p in enumerate(props)}
    pts = np.column_stack([col["x"], col["y"], col["z"]]).astype(np.float32).astype(float)
    color = col.get("gray", col.get("intensity"))
    return PointCloud(pts, color, str(path))


def read_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".pcd":
        return read_pcd(path)
    if suffix == ".ply":
        return read_ply(path)
    raise CloudError(f"{path}: unknown point cloud format")


def depth_sidecar(path) -> Path:
    """Raw float32 host depths stored next to a map cloud."""
    p = Path(path)
    return p.with_name(p.stem + "_depth.f32")


def write_map(path, cloud: PointCloud) -> None:
    """PCD (or PLY, by suffix) plus the host-depth sidecar."""
    path = Path(path)
    if path.suffix.lower() == ".ply":
        write_ply(path, cloud)
    else:
        write_pcd(path, cloud)
    if cloud.depth is not None:
        cloud.depth.astype("<f4").tofile(depth_sidecar(path))


def read_map(path) -> PointCloud:
    cloud = read_cloud(path)
    side = depth_sidecar(path)
    if side.exists():
        d = np.fromfile(side, dtype="<f4").astype(float)
        if len(d) == len(cloud):
            cloud.depth = d
    return cloud
