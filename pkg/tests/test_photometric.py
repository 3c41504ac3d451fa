import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsobench.geometry import CameraIntrinsics, Pose
from dsobench.photometric import (
    DSO_PATTERN,
    GRADIENT_WEIGHT_C,
    HUBER_GAMMA,
    CandidatePoint,
    Frame,
    HostPatch,
    InvalidResidual,
    PhotometricError,
    ResidualPattern,
    build_pyramid,
    compute_residuals,
    gradient_weight,
    huber,
    idepth_jacobian,
    interpolate,
    photometric_residual,
    pose_jacobian,
    pyramid_intrinsics,
    select_candidates,
    warp_pattern,
)

W, H = 160, 120
INTR = CameraIntrinsics(150.0, 150.0, 79.5, 59.5, W, H)


def smooth_image(rng, w=W, h=H, lo=0.1, hi=0.9):
    v, u = np.mgrid[0:h, 0:w].astype(float)
    img = np.zeros((h, w))
    for _ in range(6):
        f = rng.uniform(0.02, 0.15, 2)
        img += rng.normal() * np.sin(f[0] * u + rng.uniform(0, 6)) * np.cos(f[1] * v + rng.uniform(0, 6))
    img = (img - img.min()) / (np.ptp(img) + 1e-12)
    return lo + (hi - lo) * img


def ramp_image(rng, w=W, h=H):
    v, u = np.mgrid[0:h, 0:w].astype(float)
    a, b = rng.uniform(-0.4, 0.4, 2) / np.array([w, h])
    img = 0.5 + a * (u - w / 2) + b * (v - h / 2)
    return img


# -- frames / pyramid / interpolation ---------------------------------------


def test_frame_invariants():
    with pytest.raises(PhotometricError):
        Frame(0, 0.0, np.full((4, 4), 1.5))
    with pytest.raises(PhotometricError):
        Frame(0, 0.0, np.zeros((4, 4)), exposure=0.0)
    with pytest.raises(PhotometricError):
        Frame(0, 0.0, np.zeros((4, 4)), gradient=np.zeros((4, 3, 2)))
    f = Frame(0, 0.0, np.zeros((4, 6)))
    assert f.gradient.shape == (4, 6, 2)


def test_gradient_central_and_one_sided():
    img = np.array([[0.0, 0.1, 0.4, 0.9]] * 3)
    g = Frame(0, 0.0, img).gradient[..., 0][0]
    assert np.allclose(g, [0.1, 0.2, 0.4, 0.5])


def test_pyramid_constant_image():
    pyr = build_pyramid(Frame(0, 0.0, np.full((64, 48), 0.3)), 4)
    assert len(pyr) == 4
    for lv in pyr:
        assert np.all(lv.intensity == 0.3)


def test_pyramid_checkerboard():
    img = (np.indices((4, 4)).sum(axis=0) % 2).astype(float)
    pyr = build_pyramid(Frame(0, 0.0, img), 2)
    assert pyr[0].intensity is not None and np.array_equal(pyr[0].intensity, img)
    assert np.array_equal(pyr[1].intensity, np.full((2, 2), 0.5))


def test_pyramid_odd_size_padded_and_level_limit():
    pyr = build_pyramid(Frame(0, 0.0, np.full((5, 7), 0.2)), 2)
    assert pyr[1].intensity.shape == (3, 4)
    with pytest.raises(PhotometricError):
        build_pyramid(Frame(0, 0.0, np.zeros((8, 8))), 4)
    with pytest.raises(PhotometricError):
        build_pyramid(Frame(0, 0.0, np.zeros((8, 8))), 0)


def test_pyramid_intrinsics_halve():
    intr = CameraIntrinsics(500.0, 480.0, 319.5, 239.5, 640, 480)
    for k, c in enumerate(pyramid_intrinsics(intr, 4)):
        assert c.fx == 500.0 / 2**k and c.fy == 480.0 / 2**k
    # box-filter centre convention: the image centre stays the image centre
    c3 = intr.scaled(3)
    assert (c3.cx, c3.cy, c3.width, c3.height) == (39.5, 29.5, 80, 60)


def test_interpolate_examples():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(10, 12))
    f = Frame(0, 0.0, img)
    val, _ = interpolate(f, (3, 7))
    assert val == img[7, 3]
    img2 = np.zeros((4, 4))
    img2[1, 1], img2[1, 2] = 0.2, 0.4
    val, _ = interpolate(Frame(0, 0.0, img2), (1.5, 1))
    assert val == pytest.approx(0.3, abs=1e-15)
    with pytest.raises(PhotometricError):
        interpolate(f, (11.5, 2))


def test_interpolate_ramp_gradient():
    v, u = np.mgrid[0:50, 0:64].astype(float)
    f = Frame(0, 0.0, u / 64)
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = rng.uniform([1, 1], [62, 48])
        _, g = interpolate(f, p)
        assert np.allclose(g, [1 / 64, 0], atol=1e-15)


# -- huber / weights ----------------------------------------------------------


def test_huber_examples():
    g = HUBER_GAMMA
    assert huber(0.0, g) == 0.0
    assert huber(g, g) == pytest.approx(g * g, rel=1e-15)
    assert huber(2 * g, g) == pytest.approx(3 * g * g, rel=1e-15)
    assert HUBER_GAMMA == 9.0 / 255.0


def test_huber_smooth_at_knee():
    g = 0.1
    eps = 1e-7
    left = (huber(g, g) - huber(g - eps, g)) / eps
    right = (huber(g + eps, g) - huber(g, g)) / eps
    assert left == pytest.approx(2 * g, rel=1e-5) and right == pytest.approx(2 * g, rel=1e-5)


@settings(max_examples=300, deadline=None)
@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(1e-3, 1.0))
def test_prop_huber_even_monotone(r, s, g):
    assert huber(r, g) == huber(-r, g)
    if abs(r) <= abs(s):
        assert huber(r, g) <= huber(s, g)


def test_gradient_weight_examples():
    c = GRADIENT_WEIGHT_C
    assert gradient_weight([0.0, 0.0]) == 1.0
    assert gradient_weight([c, 0.0]) == pytest.approx(0.5, rel=1e-15)
    assert gradient_weight([0.6 * c, 0.8 * c]) == pytest.approx(0.5, rel=1e-15)
    mags = np.linspace(0, 2, 500)
    w = gradient_weight(np.column_stack([mags, np.zeros_like(mags)]))
    assert np.all(np.diff(w) < 0) and np.all(w > 0) and np.all(w <= 1)


def test_pattern():
    assert len(DSO_PATTERN) == 8
    assert any((o == 0).all() for o in DSO_PATTERN.offsets)
    assert np.hypot(*DSO_PATTERN.offsets.T).max() <= 2
    with pytest.raises(PhotometricError):
        ResidualPattern([[1, 0], [0, 1]])
    with pytest.raises(PhotometricError):
        ResidualPattern([[0, 0], [3, 0]])


# -- the residual ---------------------------------------------------------------


def _point(pix, d=0.1):
    return CandidatePoint(0, np.asarray(pix, float), d, 1.0)


def test_residual_zero_identity():
    rng = np.random.default_rng(2)
    host = Frame(0, 0.0, smooth_image(rng))
    for _ in range(20):
        p = _point(rng.integers([3, 3], [W - 3, H - 3]), rng.uniform(0.01, 1))
        cost, r = photometric_residual(p, host, host, Pose(), INTR)
        assert cost < 1e-12 and np.abs(r).max() < 1e-12


def test_residual_zero_brightness_transfer():
    rng = np.random.default_rng(3)
    base = smooth_image(rng, lo=0.05, hi=0.7)
    host = Frame(0, 0.0, base, affine_a=0.1)
    target = Frame(1, 0.1, base * math.exp(0.3), affine_a=0.4)
    for _ in range(20):
        p = _point(rng.integers([3, 3], [W - 3, H - 3]))
        cost, r = photometric_residual(p, host, target, Pose(), INTR)
        assert cost < 1e-12 and np.abs(r).max() < 1e-12


def test_residual_constant_offset_closed_form():
    rng = np.random.default_rng(4)
    base = smooth_image(rng, lo=0.05, hi=0.8)
    host = Frame(0, 0.0, base)
    target = Frame(1, 0.1, base + 0.1)
    p = _point([50, 40])
    cost, r = photometric_residual(p, host, target, Pose(), INTR)
    pix = np.array([50, 40]) + DSO_PATTERN.offsets
    w = gradient_weight(host.gradient[pix[:, 1], pix[:, 0]])
    assert np.allclose(r, 0.1, atol=1e-15)
    assert cost == pytest.approx(np.sum(w * HUBER_GAMMA * (0.2 - HUBER_GAMMA)), rel=1e-12)


def test_residual_exposure_invariance():
    rng = np.random.default_rng(5)
    host = Frame(0, 0.0, smooth_image(rng), exposure=0.02, affine_a=0.05, affine_b=0.01)
    target = Frame(1, 0.1, smooth_image(rng), exposure=0.03, affine_a=-0.1, affine_b=0.02)
    rel = Pose.exp([0.01, 0.0, 0.02, 0.0, 0.003, 0.0])
    for k in (0.5, 2.0, 7.3):
        host_k = Frame(0, 0.0, host.intensity, exposure=0.02, affine_a=0.05 + math.log(k), affine_b=0.01)
        target_k = Frame(1, 0.1, target.intensity, exposure=0.03 * k, affine_a=-0.1, affine_b=0.02)
        for _ in range(10):
            p = _point(rng.integers([10, 10], [W - 10, H - 10]), 0.2)
            e0, _ = photometric_residual(p, host, target, rel, INTR)
            e1, _ = photometric_residual(p, host_k, target_k, rel, INTR)
            assert abs(e0 - e1) < 1e-12


def test_residual_invalid_cases():
    rng = np.random.default_rng(6)
    host = Frame(0, 0.0, smooth_image(rng))
    with pytest.raises(InvalidResidual):
        photometric_residual(_point([50, 50], float("nan")), host, host, Pose(), INTR)
    # shifted so that most of the pattern leaves the image
    rel = Pose(np.eye(3), [0.0, 0.0, 0.0])
    with pytest.raises(InvalidResidual):
        photometric_residual(_point([W - 1, 60]), host, host, Pose(np.eye(3), [0.004, 0, 0]), INTR)
    with pytest.raises(InvalidResidual, match="not visible"):
        photometric_residual(_point([60, 60], 0.1), host, host, Pose(np.eye(3), [0, 0, -20.0]), INTR)
    cost, r = photometric_residual(_point([W - 2, 60]), host, host, rel, INTR)
    assert np.isnan(r).sum() == 1 and np.isfinite(cost)


# -- Jacobians vs finite differences ----------------------------------------------


def _random_config(rng):
    host = Frame(0, 0.0, ramp_image(rng), exposure=rng.uniform(0.5, 2), affine_a=rng.normal(scale=0.1),
                 affine_b=rng.normal(scale=0.02))
    target = Frame(1, 0.1, ramp_image(rng))
    rel = Pose.exp(np.concatenate([rng.normal(scale=0.1, size=3), rng.normal(scale=0.02, size=3)]))
    pix = rng.uniform([20, 20], [W - 20, H - 20], size=(4, 2))
    d = rng.uniform(0.05, 0.5, 4)
    taff = (rng.uniform(0.5, 2), rng.normal(scale=0.1), rng.normal(scale=0.02))
    return host, target, rel, pix, d, taff


def _residual_vector(host, target, rel, pix, d, haff, taff):
    patch = HostPatch.from_frame(host, pix, DSO_PATTERN.offsets)
    return compute_residuals(patch, d, rel, target, INTR, DSO_PATTERN.offsets, haff, taff, margin=0.0).r


def _dual_route(analytic, fd):
    for c in range(fd.shape[-1]):
        a, f = analytic[..., c].ravel(), fd[..., c].ravel()
        scale = max(np.linalg.norm(f), 1e-8)
        assert np.linalg.norm(a - f) <= 1e-4 * scale, c


def test_residual_jacobians_match_finite_differences():
    rng = np.random.default_rng(7)
    h = 1e-6
    for _ in range(100):
        host, target, rel, pix, d, taff = _random_config(rng)
        haff = (host.exposure, host.affine_a, host.affine_b)
        patch = HostPatch.from_frame(host, pix, DSO_PATTERN.offsets)
        blk = compute_residuals(patch, d, rel, target, INTR, DSO_PATTERN.offsets, haff, taff,
                                jacobians=True, margin=0.0)
        assert blk.valid.all()
        fd = np.empty(blk.r.shape + (6,))
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            rp = _residual_vector(host, target, Pose.exp(e) @ rel, pix, d, haff, taff)
            rm = _residual_vector(host, target, Pose.exp(-e) @ rel, pix, d, haff, taff)
            fd[..., k] = (rp - rm) / (2 * h)
        _dual_route(blk.J_pose, fd)
        rp = _residual_vector(host, target, rel, pix, d + h, haff, taff)
        rm = _residual_vector(host, target, rel, pix, d - h, haff, taff)
        _dual_route(blk.J_idepth[..., None], ((rp - rm) / (2 * h))[..., None])
        fa = np.empty(blk.r.shape + (2,))
        fh = np.empty(blk.r.shape + (2,))
        for k in range(2):
            dt = np.zeros(3)
            dt[k + 1] = h
            fa[..., k] = (_residual_vector(host, target, rel, pix, d, haff, tuple(np.add(taff, dt)))
                          - _residual_vector(host, target, rel, pix, d, haff, tuple(np.subtract(taff, dt)))) / (2 * h)
            fh[..., k] = (_residual_vector(host, target, rel, pix, d, tuple(np.add(haff, dt)), taff)
                          - _residual_vector(host, target, rel, pix, d, tuple(np.subtract(haff, dt)), taff)) / (2 * h)
        _dual_route(blk.J_aff_target, fa)
        _dual_route(blk.J_aff_host, fh)


def test_warp_jacobians_match_finite_differences():
    # image-independent half of the chain rule: d(u, v) / d(pose, idepth)
    rng = np.random.default_rng(8)
    h = 1e-6
    off = DSO_PATTERN.offsets
    for _ in range(100):
        rel = Pose.exp(np.concatenate([rng.normal(scale=0.3, size=3), rng.normal(scale=0.05, size=3)]))
        pix = rng.uniform([0, 0], [W, H], size=(5, 2))
        d = rng.uniform(0.05, 1.0, 5)
        w = warp_pattern(pix, d, rel, INTR, off)
        if not w.front.all():
            continue
        ones, zeros = np.ones(w.xn.shape), np.zeros(w.xn.shape)
        Ju = pose_jacobian(w, INTR, ones, zeros)
        Jv = pose_jacobian(w, INTR, zeros, ones)
        fd_u, fd_v = np.empty_like(Ju), np.empty_like(Jv)
        for k in range(6):
            e = np.zeros(6)
            e[k] = h
            up = warp_pattern(pix, d, Pose.exp(e) @ rel, INTR, off).uv
            um = warp_pattern(pix, d, Pose.exp(-e) @ rel, INTR, off).uv
            fd_u[..., k] = (up[..., 0] - um[..., 0]) / (2 * h)
            fd_v[..., k] = (up[..., 1] - um[..., 1]) / (2 * h)
        _dual_route(Ju, fd_u)
        _dual_route(Jv, fd_v)
        up = warp_pattern(pix, d + h, rel, INTR, off).uv
        um = warp_pattern(pix, d - h, rel, INTR, off).uv
        du = idepth_jacobian(w, rel, INTR, ones, zeros)
        dv = idepth_jacobian(w, rel, INTR, zeros, ones)
        _dual_route(du[..., None], ((up[..., 0] - um[..., 0]) / (2 * h))[..., None])
        _dual_route(dv[..., None], ((up[..., 1] - um[..., 1]) / (2 * h))[..., None])


# -- candidate selection ---------------------------------------------------------


def test_select_constant_image_empty():
    assert select_candidates(Frame(0, 0.0, np.full((96, 128), 0.4)), 200) == []


def test_select_single_dot():
    img = np.zeros((96, 128))
    img[50, 70] = 1.0
    pts = select_candidates(Frame(0, 0.0, img), 100)
    assert len(pts) >= 1
    cells = {(int(p.pixel[0]) // 32, int(p.pixel[1]) // 32) for p in pts}
    assert cells == {(70 // 32, 50 // 32)}
    for p in pts:
        assert abs(p.pixel[0] - 70) <= 1 and abs(p.pixel[1] - 50) <= 1


def test_select_count_and_threshold():
    rng = np.random.default_rng(9)
    f = Frame(0, 0.0, smooth_image(rng, 320, 240))
    gmag = np.linalg.norm(f.gradient, axis=-1)
    for n in (1, 50, 300, 2000):
        pts = select_candidates(f, n)
        assert len(pts) <= n
        for p in pts:
            x, y = int(p.pixel[0]), int(p.pixel[1])
            cx, cy = x // 32 * 32, y // 32 * 32
            assert gmag[y, x] > np.median(gmag[cy:cy + 32, cx:cx + 32])
    with pytest.raises(PhotometricError):
        select_candidates(f, 0)
