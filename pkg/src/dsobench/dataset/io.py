"""Dataset directory format.

::

    calib.txt            key = value calibration
    left/000000.pgm      8-bit binary PGM (P5)
    right/000000.pgm
    depth/000000.f32     raw little-endian float32, row-major, width x height
    poses.csv            frame,tx,ty,tz,qw,qx,qy,qz  (left camera to world)
    times.csv            frame,timestamp
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..geometry import Pose, StereoRig, read_calibration, write_calibration
from ..photometric import Frame


class DatasetError(IOError):
    pass


@dataclass(eq=False)
class DatasetSequence:
    rig: StereoRig
    left: np.ndarray        # (N, H, W) uint8
    right: np.ndarray       # (N, H, W) uint8
    depth: np.ndarray       # (N, H, W) float32 z-depth, 0 where no hit
    poses: list[Pose] = field(default_factory=list)
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        n = len(self.left)
        if not (len(self.right) == len(self.depth) == len(self.poses) == len(self.timestamps) == n):
            raise DatasetError("per-frame lists differ in length")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise DatasetError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.left)

    def frame(self, k: int) -> Frame:
        return Frame(k, float(self.timestamps[k]), self.left[k] / 255.0, right=self.right[k] / 255.0)

    def subsequence(self, stop: int, start: int = 0) -> "DatasetSequence":
        return DatasetSequence(self.rig, self.left[start:stop], self.right[start:stop],
                               self.depth[start:stop], self.poses[start:stop],
                               self.timestamps[start:stop])


def write_pgm(path: Path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 2:
        raise DatasetError("PGM writer expects a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path: Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1
    if tokens[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DatasetError(f"{path}: only 8-bit PGM supported")
    body = data[pos:pos + w * h]
    if len(body) != w * h:
        raise DatasetError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).copy()


def save_sequence(seq: DatasetSequence, path: str | Path) -> None:
    root = Path(path)
    for sub in ("left", "right", "depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    write_calibration(root / "calib.txt", seq.rig)
    for k in range(len(seq)):
        write_pgm(root / "left" / f"{k:06d}.pgm", seq.left[k])
        write_pgm(root / "right" / f"{k:06d}.pgm", seq.right[k])
        seq.depth[k].astype("<f4").tofile(root / "depth" / f"{k:06d}.f32")
    with open(root / "poses.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])
        for k, p in enumerate(seq.poses):
            wr.writerow([k, *map(repr, p.translation.tolist()), *map(repr, p.quaternion_wxyz().tolist())])
    with open(root / "times.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "timestamp"])
        for k, t in enumerate(seq.timestamps):
            wr.writerow([k, repr(float(t))])


def _read_csv(path: Path) -> list[list[str]]:
    if not path.exists():
        raise DatasetError(f"missing {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[1:]


def load_sequence(path: str | Path) -> DatasetSequence:
    root = Path(path)
    calib = root / "calib.txt"
    if not calib.exists():
        raise DatasetError(f"missing {calib}")
    rig = read_calibration(calib)
    W, H = rig.left.width, rig.left.height
    pose_rows = _read_csv(root / "poses.csv")
    time_rows = _read_csv(root / "times.csv")
    if len(pose_rows) != len(time_rows):
        raise DatasetError("poses.csv and times.csv differ in length")
    n = len(pose_rows)
    left = np.empty((n, H, W), np.uint8)
    right = np.empty((n, H, W), np.uint8)
    depth = np.empty((n, H, W), np.float32)
    poses = []
    for k, row in enumerate(pose_rows):
        if len(row) != 8 or int(row[0]) != k:
            raise DatasetError(f"poses.csv: malformed row for frame {k}")
        vals = [float(x) for x in row[1:]]
        q = np.array(vals[3:])
        poses.append(Pose.from_quaternion(q / np.linalg.norm(q), vals[:3]))
        for name, store in (("left", left), ("right", right)):
            f = root / name / f"{k:06d}.pgm"
            if not f.exists():
                raise DatasetError(f"missing {f} (frame {k})")
            img = read_pgm(f)
            if img.shape != (H, W):
                raise DatasetError(f"{f}: size {img.shape[::-1]} does not match calibration (frame {k})")
            store[k] = img
        f = root / "depth" / f"{k:06d}.f32"
        if not f.exists():
            raise DatasetError(f"missing {f} (frame {k})")
        raw = np.fromfile(f, dtype="<f4")
        if raw.size != W * H:
            raise DatasetError(f"{f}: expected {W * H} floats, found {raw.size} (frame {k})")
        depth[k] = raw.reshape(H, W)
    times = np.array([float(r[1]) for r in time_rows])
    return DatasetSequence(rig, left, right, depth, poses, times)
