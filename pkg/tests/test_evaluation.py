import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dsobench.evaluation import (
    CloudError,
    MetricsError,
    PointCloud,
    RegistrationFailed,
    accuracy_stats,
    depth_binned_errors,
    error_histogram,
    evaluate_map,
    fuse_ground_truth,
    gauge_scale,
    icp_align,
    initial_alignment,
    read_cloud,
    read_map,
    summarize,
    timing_stats,
    trajectory_scale,
    umeyama,
    write_map,
    write_pcd,
    write_ply,
    write_report,
)
from dsobench.evaluation.report import REPORT_FILES, read_csv_rows
from dsobench.geometry import CameraIntrinsics, Pose, SimilarityTransform, pixel_rays

INTR = CameraIntrinsics(100.0, 100.0, 39.5, 29.5, 80, 60)


def structured_cloud(n, rng, half=5.0):
    """Points on a ground patch and on the walls and roofs of a few boxes."""
    boxes = [(-3.0, -1.0, -2.5, 0.5, 2.0), (0.5, 3.5, 1.0, 3.0, 3.0), (1.0, 2.0, -4.0, -2.0, 1.2)]
    m = n // 2
    pts = [np.column_stack([rng.uniform(-half, half, (m, 2)), np.zeros(m)])]
    per = (n - m) // len(boxes)
    for x0, x1, y0, y1, h in boxes:
        face = rng.integers(0, 5, per)
        p = np.column_stack([rng.uniform(x0, x1, per), rng.uniform(y0, y1, per), rng.uniform(0, h, per)])
        p[face == 0, 0], p[face == 1, 0] = x0, x1
        p[face == 2, 1], p[face == 3, 1] = y0, y1
        p[face == 4, 2] = h
        pts.append(p)
    return np.vstack(pts)


def rotation_about_centroid(pts, axis, deg, t):
    R = Rotation.from_rotvec(np.radians(deg) * np.asarray(axis) / np.linalg.norm(axis)).as_matrix()
    c = pts.mean(axis=0)
    return Pose(R, c - R @ c + np.asarray(t))


def rot_err_deg(A: Pose, B: Pose) -> float:
    return math.degrees((A.inverse() @ B).rotation_angle())


# -- ICP -------------------------------------------------------------------------


def test_icp_identical_clouds():
    rng = np.random.default_rng(0)
    pc = PointCloud(structured_cloud(4000, rng))
    res = icp_align(pc, pc)
    assert res.iterations <= 2 and res.rmse == 0.0
    assert np.allclose(res.transform.matrix, np.eye(4), atol=1e-12)
    assert res.transform.scale == 1.0


def test_icp_known_rigid_transform():
    rng = np.random.default_rng(1)
    src = structured_cloud(10_000, rng)
    T = rotation_about_centroid(src, [0.2, 0.3, 1.0], 2.0, [0.12, -0.1, 0.12])  # 2 deg, 0.2 m shift
    dst = T.apply(src) + rng.normal(scale=0.01, size=src.shape)
    res = icp_align(PointCloud(src), PointCloud(dst))
    assert rot_err_deg(res.transform.pose, T) < 0.2
    assert np.linalg.norm(res.transform.pose.translation - T.translation) < 0.02
    assert res.transform.scale == 1.0
    trace = np.array(res.rmse_trace)
    assert np.all(np.diff(trace) <= 0)
    assert res.distances.max() <= 0.5


def test_icp_similarity_recovers_scale():
    s_true = 35.98
    rng = np.random.default_rng(2)
    src = structured_cloud(10_000, rng) / s_true           # map in arbitrary units
    T = Pose(Rotation.from_rotvec([0.1, -0.2, 0.4]).as_matrix(), [3.0, -1.0, 2.0])
    truth = SimilarityTransform(s_true, T)
    dst = truth.apply(src) + rng.normal(scale=0.01, size=src.shape)
    # initial guess of the kind a GT trajectory gives: 1 % scale, 0.3 deg off
    dR = Rotation.from_rotvec(np.radians(0.3) * np.array([0, 0, 1.0])).as_matrix()
    init = SimilarityTransform(s_true * 1.01, Pose(dR @ T.rotation, T.translation + [0.05, 0.05, 0.0]))
    res = icp_align(PointCloud(src), PointCloud(dst), with_scale=True, initial=init)
    assert abs(res.transform.scale / s_true - 1) < 1e-3
    acc = accuracy_stats(res, len(src))
    assert acc.estimated_scale == res.transform.scale


def test_icp_without_scale_keeps_unit_scale():
    rng = np.random.default_rng(3)
    src = structured_cloud(3000, rng)
    dst = 1.01 * src
    res = icp_align(PointCloud(src), PointCloud(dst), with_scale=False)
    assert res.transform.scale == 1.0


def test_icp_no_correspondences():
    a = PointCloud(np.zeros((10, 3)))
    b = PointCloud(np.full((10, 3), 100.0))
    with pytest.raises(RegistrationFailed):
        icp_align(a, b)
    with pytest.raises(RegistrationFailed):
        icp_align(PointCloud.empty(), b)


def test_umeyama_exact():
    rng = np.random.default_rng(4)
    src = rng.normal(size=(50, 3))
    truth = SimilarityTransform(2.5, Pose(Rotation.random(random_state=4).as_matrix(), [1.0, 2.0, 3.0]))
    est = umeyama(src, truth.apply(src), with_scale=True)
    assert np.allclose(est.matrix, truth.matrix, atol=1e-10)


# -- accuracy statistics -----------------------------------------------------------


def exact_stats(ds):
    # rational-arithmetic oracle for the mean and the population variance
    fr = [Fraction(d) for d in ds]
    mean = sum(fr) / len(fr)
    var = sum((d - mean) ** 2 for d in fr) / len(fr)
    return float(mean), math.sqrt(float(var))


FIXTURES = [
    [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
    [0.013, 0.021, 0.5, 0.0, 0.25, 0.125, 0.3, 0.031, 0.4, 0.07],
    [0.2] * 10,
]


@pytest.mark.parametrize("ds", FIXTURES)
def test_accuracy_stats_fixtures(ds):
    a = accuracy_stats(np.array(ds), 25)
    mean, std = exact_stats(ds)
    assert abs(a.mean - mean) < 1e-12 and abs(a.std - std) < 1e-12
    assert a.n_points == 25 and a.n_correspondences == 10


def test_accuracy_stats_examples():
    a = accuracy_stats(np.array([1.0, 2.0, 3.0]), 3)
    assert a.mean == 2.0 and a.std == pytest.approx(math.sqrt(2 / 3), abs=1e-15)
    a = accuracy_stats(np.zeros(5), 5)
    assert a.mean == 0.0 and a.std == 0.0
    with pytest.raises(MetricsError):
        accuracy_stats(np.zeros(0), 5)
    with pytest.raises(MetricsError):
        accuracy_stats(np.zeros(6), 5)


def test_accuracy_from_self_alignment():
    rng = np.random.default_rng(5)
    pc = PointCloud(structured_cloud(2000, rng))
    a = accuracy_stats(icp_align(pc, pc), len(pc))
    assert a.mean == 0.0 and a.std == 0.0 and a.estimated_scale is None


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 0.5), min_size=1, max_size=60), st.randoms())
def test_prop_accuracy_reorder_invariant(ds, rnd):
    shuffled = list(ds)
    rnd.shuffle(shuffled)
    a, b = accuracy_stats(np.array(ds), 100), accuracy_stats(np.array(shuffled), 100)
    assert a.mean == b.mean and a.std == b.std and a.mean >= 0 and a.std >= 0


# -- binning ---------------------------------------------------------------------------


def test_depth_bins_single():
    b = depth_binned_errors(np.full(7, 0.1), np.full(7, 22.0))
    nz = np.flatnonzero(b.counts)
    assert len(nz) == 1 and (b.edges[nz[0]], b.edges[nz[0] + 1]) == (20.0, 25.0)
    assert b.counts.sum() == 7 and b.mean_error[nz[0]] == pytest.approx(0.1)
    assert np.all(np.isnan(np.delete(b.mean_error, nz)))


def test_depth_bins_use_source_index():
    rng = np.random.default_rng(6)
    pts = structured_cloud(1000, rng)
    depth = np.where(np.arange(len(pts)) % 2 == 0, 12.0, 41.0)
    pc = PointCloud(pts, depth=depth)
    res = icp_align(pc, PointCloud(pts + 0.01))
    b = depth_binned_errors(res, pc)
    assert b.counts.sum() == res.n_correspondences
    assert set(np.flatnonzero(b.counts)) == {2, 8}
    with pytest.raises(MetricsError):
        depth_binned_errors(res, PointCloud(pts))


def test_error_histogram_examples():
    h = error_histogram(np.zeros(9))
    assert h.counts[0] == 9 and h.counts[1:].sum() == 0
    assert h.edges[0] == 0.0 and h.edges[-1] == 0.5 and len(h.counts) == 20
    assert np.allclose(np.diff(h.edges), 0.025)
    h = error_histogram(np.array([0.5]))
    assert h.counts[-1] == 1


def test_error_histogram_uniform_roughly_flat():
    rng = np.random.default_rng(7)
    h = error_histogram(rng.uniform(0, 0.5, 20_000))
    expected = 20_000 / 20
    chi2 = float(np.sum((h.counts - expected) ** 2 / expected))
    assert chi2 < 60      # 19 dof; p ~ 1e-6 tail


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**32 - 1), st.floats(0.5, 10.0))
def test_prop_bin_counts_sum_to_n(n, seed, width):
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 0.5, n)
    z = rng.uniform(0.1, 120, n)
    assert error_histogram(d).counts.sum() == n
    assert depth_binned_errors(d, z, width).counts.sum() == n


# -- timing ----------------------------------------------------------------------------


def test_timing_examples():
    t = timing_stats([{"creation_ms": "10"}])
    assert (t.total_keyframes, t.min, t.max, t.mean, t.std) == (1, 10.0, 10.0, 10.0, 0.0)
    t = timing_stats([{"creation_ms": 2.0}, {"creation_ms": 4.0}])
    assert t.mean == 3.0 and t.std == 1.0
    t = timing_stats([])
    assert t.total_keyframes == 0 and t.mean is None and t.min is None


def test_timing_bootstrap_row_counted_not_averaged():
    t = timing_stats([{"creation_ms": 900.0, "bootstrap": "1"}, {"creation_ms": 5.0, "bootstrap": "0"},
                      {"creation_ms": 7.0, "bootstrap": "0"}])
    assert t.total_keyframes == 3 and t.mean == 6.0 and t.min <= t.mean <= t.max


def test_timing_tracking_bands():
    trk = [dict(tracking_ms=ms, is_keyframe=kf, is_post_keyframe=post) for ms, kf, post in [
        (5, "0", "0"), (6, "1", "0"), (9, "0", "1"), (5, "0", "0"), (7, "1", "0"), (11, "1", "1"), (8, "0", "1")]]
    t = timing_stats([{"creation_ms": 1}] * 3, trk)
    assert t.mean_regular == 5.0 and t.mean_post_keyframe == 8.5
    assert t.mean_tracking == pytest.approx(51 / 7)


# -- ground-truth fusion ---------------------------------------------------------------------


def test_fuse_single_frame_identity():
    depth = np.full((60, 80), 10.0)
    depth[:5] = 0.0                      # sky
    cloud = fuse_ground_truth([Pose()], [depth], [np.full((60, 80), 128, np.uint8)], INTR, 1, voxel=1e-3)
    v, u = np.nonzero(depth > 0)
    expect = pixel_rays(np.column_stack([u, v]).astype(float), INTR) * 10.0
    got = cloud.points[np.lexsort(cloud.points.T[::-1])]
    exp = expect[np.lexsort(expect.T[::-1])]
    assert got.shape == exp.shape and np.abs(got - exp).max() < 1e-9
    assert np.all(cloud.color == 128)


def _plane_frames():
    # the plane z = 0 seen from two poses looking down
    down = np.array([[1.0, 0, 0], [0, -1.0, 0], [0, 0, -1.0]])
    poses = [Pose(down, [0.0, 0.0, 10.0]), Pose(down @ Rotation.from_rotvec([0.05, 0.02, 0.1]).as_matrix(), [1.0, 0.5, 12.0])]
    depths = []
    rays = pixel_rays(np.stack(np.meshgrid(np.arange(80.0), np.arange(60.0)), -1), INTR)
    for p in poses:
        d = rays @ p.rotation.T
        t = -p.translation[2] / d[..., 2]
        depths.append(t)       # unit-z rays: t is the z-depth
    return poses, depths


def test_fuse_plane_thickness():
    poses, depths = _plane_frames()
    cloud = fuse_ground_truth(poses, depths, None, INTR, 1)
    assert len(cloud) > 1000
    assert np.abs(cloud.points[:, 2]).max() < 1e-6


def test_fuse_idempotent_and_permutation_invariant():
    poses, depths = _plane_frames()
    a = fuse_ground_truth(poses, depths, None, INTR, 2)
    b = fuse_ground_truth(poses + poses, depths + depths, None, INTR, 2)
    c = fuse_ground_truth(poses[::-1], depths[::-1], None, INTR, 2)
    assert len(a) == len(b) == len(c)
    key = lambda pc: np.lexsort(np.round(pc.points / 0.05).T)
    for other in (b, c):
        assert np.abs(a.points[key(a)] - other.points[key(other)]).max() < 0.05


def test_fuse_errors():
    poses, depths = _plane_frames()
    with pytest.raises(CloudError):
        fuse_ground_truth(poses, depths[:1], None, INTR)
    with pytest.raises(CloudError):
        fuse_ground_truth(poses, depths, None, INTR, 0)


# -- clouds and reports ------------------------------------------------------------------------


def test_cloud_invariants():
    with pytest.raises(CloudError):
        PointCloud(np.array([[0, 0, np.nan]]))
    with pytest.raises(CloudError):
        PointCloud(np.zeros((3, 3)), color=np.zeros(2))


@pytest.mark.parametrize("suffix", [".pcd", ".ply"])
def test_cloud_round_trip(tmp_path, suffix):
    rng = np.random.default_rng(8)
    pc = PointCloud(rng.normal(size=(500, 3)).astype(np.float32), rng.integers(0, 256, 500).astype(float))
    path = tmp_path / f"c{suffix}"
    (write_pcd if suffix == ".pcd" else write_ply)(path, pc)
    back = read_cloud(path)
    assert np.array_equal(back.points, pc.points) and np.array_equal(back.color, pc.color)


def test_pcd_binary_layout(tmp_path):
    pc = PointCloud(np.array([[1.0, 2.0, 3.0]]), np.array([7.0]))
    write_pcd(tmp_path / "m.pcd", pc)
    raw = (tmp_path / "m.pcd").read_bytes()
    head, body = raw.split(b"DATA binary\n")
    assert b"FIELDS x y z intensity" in head and b"SIZE 4 4 4 4" in head and b"TYPE F F F F" in head
    assert np.array_equal(np.frombuffer(body, "<f4"), [1, 2, 3, 7])


def test_map_depth_sidecar(tmp_path):
    pc = PointCloud(np.ones((4, 3)), np.zeros(4), depth=np.array([1.0, 2.0, 3.0, 4.0]))
    write_map(tmp_path / "map.pcd", pc)
    assert np.array_equal(read_map(tmp_path / "map.pcd").depth, pc.depth)


def test_evaluate_and_report(tmp_path):
    rng = np.random.default_rng(9)
    pts = structured_cloud(3000, rng)
    depth = rng.uniform(10, 50, len(pts))
    rep = evaluate_map(PointCloud(pts + 0.02, rng.integers(0, 255, len(pts)), depth=depth), PointCloud(pts))
    assert rep.histogram.counts.sum() == rep.accuracy.n_correspondences == rep.depth_bins.counts.sum()
    rep.timing = timing_stats([{"creation_ms": 3.0}], [{"tracking_ms": 1.0}])
    write_report(rep, tmp_path / "r")
    for f in REPORT_FILES:
        assert (tmp_path / "r" / f).exists()
    acc = read_csv_rows(tmp_path / "r" / "accuracy.csv")[0]
    assert list(acc) == ["points", "correspondences", "mean_m", "std_m", "scale"]
    assert int(acc["points"]) == 3000 and float(acc["scale"]) == 1.0
    kf = read_csv_rows(tmp_path / "r" / "keyframes.csv")[0]
    assert list(kf) == ["total_kfs", "min_ms", "max_ms", "mean_ms", "std_ms"]
    rows = summarize([tmp_path / "r"])
    assert rows[0]["report"] == "r" and rows[0]["kf_total_kfs"] == "1"


def test_alignment_helpers():
    rng = np.random.default_rng(10)
    gt = [Pose.exp(np.concatenate([rng.normal(size=3) * 5, rng.normal(size=3) * 0.1])) for _ in range(10)]
    s = 2.0
    # an estimate in anchor-camera coordinates with positions divided by s
    est = {k: Pose((gt[0].inverse() @ gt[k]).rotation, (gt[0].inverse() @ gt[k]).translation / s) for k in range(10)}
    init = initial_alignment(est, gt, s)
    for k in range(10):
        assert np.allclose(init.apply(est[k].translation[None])[0], gt[k].translation, atol=1e-9)
    fit = trajectory_scale(est, gt)
    assert fit.scale == pytest.approx(s, rel=1e-9)
    assert gauge_scale(gt, 0, 3) == pytest.approx(np.linalg.norm(gt[3].translation - gt[0].translation))
