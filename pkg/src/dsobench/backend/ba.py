"""Sliding-window photometric bundle adjustment.

Unknowns are, for every keyframe except the oldest (the gauge), a pose
increment applied on the right (``T <- T exp(xi)``) and the affine pair
``(a, b)``; plus one inverse depth per active point.  The point block of the
normal equations is diagonal and is eliminated with the Schur complement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..geometry import Pose
from ..photometric import DSO_PATTERN, MIN_VALID_OFFSETS, compute_residuals, huber, huber_weight
from .window import DROPPED, BundleAdjustmentError, SlidingWindowState

CAM = 8  # pose (6) + affine (2)


@dataclass
class BAReport:
    iterations: int = 0
    energies: list = field(default_factory=list)
    accepted: int = 0
    n_points: int = 0
    n_residuals: int = 0
    dropped_points: int = 0
    outlier_observations: int = 0


def _pair_map(rel: Pose) -> np.ndarray:
    """10 relative-residual parameters -> (xi_h, aff_h, xi_t, aff_t)."""
    M = np.zeros((10, 16))
    M[:6, :6] = rel.adjoint()
    M[:6, 8:14] = -np.eye(6)
    M[6:8, 6:8] = np.eye(2)
    M[8:10, 14:16] = np.eye(2)
    return M


class _Problem:
    def __init__(self, window: SlidingWindowState, config):
        self.window = window
        self.config = config
        self.kfs = window.keyframes
        self.intr = window.intrinsics
        self.gamma = config.huber_gamma
        self.offsets = DSO_PATTERN.offsets
        self.stereo = config.stereo and window.rig is not None
        self.m = len(self.kfs)
        self.P = (self.m - 1) * CAM
        self.act = [np.flatnonzero(kf.active) for kf in self.kfs]
        sizes = [len(a) for a in self.act]
        self.start = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.N = int(self.start[-1])
        self.patches = [kf.patch.subset(a) for kf, a in zip(self.kfs, self.act)]
        # priors
        self.prior_d = np.concatenate([kf.prior_idepth[a] for kf, a in zip(self.kfs, self.act)]) if self.N else np.zeros(0)
        self.prior_w = np.concatenate([kf.prior_weight[a] for kf, a in zip(self.kfs, self.act)]) if self.N else np.zeros(0)
        self.prior_w = np.where(np.isfinite(self.prior_d), self.prior_w, 0.0)
        self.prior_d = np.nan_to_num(self.prior_d)
        self.penalty = huber(config.outlier_threshold * self.gamma, self.gamma)
        self._select_observations()

    def state(self):
        poses = [kf.pose for kf in self.kfs]
        aff = np.array([[kf.frame.affine_a, kf.frame.affine_b] for kf in self.kfs], dtype=float)
        d = np.concatenate([kf.idepth[a] for kf, a in zip(self.kfs, self.act)]) if self.N else np.zeros(0)
        return poses, aff, d

    def _select_observations(self):
        """Fix, for each host/target pair, the points whose centre lands in the target."""
        poses, _, d = self.state()
        self.pairs = []
        for h in range(self.m):
            if len(self.act[h]) == 0:
                continue
            kh = self.kfs[h]
            dh = d[self.start[h]:self.start[h + 1]]
            rays = np.column_stack([(self.patches[h].pix - [self.intr.cx, self.intr.cy]) / [self.intr.fx, self.intr.fy],
                                    np.ones(len(dh))])
            for t in range(self.m):
                if t == h:
                    continue
                rel = poses[t].inverse() @ poses[h]
                Y = rays @ rel.rotation.T + rel.translation * dh[:, None]
                ok = Y[:, 2] > 1e-9
                uv = np.where(ok[:, None], Y[:, :2] / np.where(ok, Y[:, 2], 1.0)[:, None], -1e9)
                uv = uv * [self.intr.fx, self.intr.fy] + [self.intr.cx, self.intr.cy]
                ok &= self.intr.in_bounds(uv, 2.0)
                ok &= ~kh.outliers_for(self.kfs[t].id)[self.act[h]]
                sel = np.flatnonzero(ok)
                if len(sel):
                    self.pairs.append((h, t, sel))

    # --------------------------------------------------------------------------

    def _pair_block(self, h, t, sel, poses, aff, d, jac):
        kh, kt = self.kfs[h], self.kfs[t]
        rel = poses[t].inverse() @ poses[h]
        gd = d[self.start[h] + sel]
        block = compute_residuals(
            self.patches[h].subset(sel), gd, rel, kt.frame, self.intr, self.offsets,
            (kh.frame.exposure, aff[h, 0], aff[h, 1]), (kt.frame.exposure, aff[t, 0], aff[t, 1]),
            jacobians=jac,
        )
        return rel, block

    def _stereo_block(self, h, poses, aff, d, jac):
        kh = self.kfs[h]
        gd = d[self.start[h]:self.start[h + 1]]
        a = (kh.frame.exposure, aff[h, 0], aff[h, 1])
        return compute_residuals(self.patches[h], gd, self.window.rig.left_to_right, kh.right,
                                 self.intr, self.offsets, a, a, jacobians=jac)

    def _cost(self, block):
        c = np.where(block.valid, block.weights * huber(block.r, self.gamma), block.weights * self.penalty)
        return float(c.sum())

    def energy(self, poses, aff, d) -> float:
        E = 0.0
        for h, t, sel in self.pairs:
            _, block = self._pair_block(h, t, sel, poses, aff, d, False)
            E += self._cost(block)
        if self.stereo:
            for h in range(self.m):
                if len(self.act[h]):
                    E += self.config.stereo_weight * self._cost(self._stereo_block(h, poses, aff, d, False))
        E += float(np.sum(self.prior_w * (d - self.prior_d) ** 2))
        E += self.config.affine_prior * float(np.sum(aff[1:] ** 2))
        return E

    def linearize(self, poses, aff, d):
        P, N = self.P, self.N
        Hcc = np.zeros((P, P))
        gc = np.zeros(P)
        Hcp = np.zeros((P, N))
        Hdd = np.zeros(N)
        gd = np.zeros(N)
        E = 0.0
        nres = 0
        for h, t, sel in self.pairs:
            rel, b = self._pair_block(h, t, sel, poses, aff, d, True)
            E += self._cost(b)
            ok = b.valid & (b.valid.sum(axis=1) >= MIN_VALID_OFFSETS)[:, None]
            W = np.where(ok, b.weights * huber_weight(b.r, self.gamma), 0.0)
            nres += int(ok.sum())
            J = np.concatenate([b.J_pose, b.J_aff_host, b.J_aff_target], axis=-1)
            JW = J * W[..., None]
            Hp = JW.reshape(-1, 10).T @ J.reshape(-1, 10)
            gp = JW.reshape(-1, 10).T @ b.r.reshape(-1)
            Hpd = np.einsum("nki,nk->ni", JW, b.J_idepth)
            gi = self.start[h] + sel
            Hdd[gi] += np.sum(W * b.J_idepth ** 2, axis=1)
            gd[gi] += np.sum(W * b.J_idepth * b.r, axis=1)
            M = _pair_map(rel)
            H16 = M.T @ Hp @ M
            g16 = M.T @ gp
            Hpd16 = Hpd @ M
            idx = []
            for k, off in ((h, 0), (t, 8)):
                if k > 0:
                    idx.append(((k - 1) * CAM, off))
            for (ca, oa) in idx:
                gc[ca:ca + CAM] += g16[oa:oa + CAM]
                Hcp[ca:ca + CAM, gi] += Hpd16[:, oa:oa + CAM].T
                for (cb, ob) in idx:
                    Hcc[ca:ca + CAM, cb:cb + CAM] += H16[oa:oa + CAM, ob:ob + CAM]
        if self.stereo:
            sw = self.config.stereo_weight
            for h in range(self.m):
                if not len(self.act[h]):
                    continue
                b = self._stereo_block(h, poses, aff, d, True)
                E += sw * self._cost(b)
                W = np.where(b.valid, sw * b.weights * huber_weight(b.r, self.gamma), 0.0)
                nres += int(b.valid.sum())
                sl = slice(self.start[h], self.start[h + 1])
                Hdd[sl] += np.sum(W * b.J_idepth ** 2, axis=1)
                gd[sl] += np.sum(W * b.J_idepth * b.r, axis=1)
        E += float(np.sum(self.prior_w * (d - self.prior_d) ** 2))
        E += self.config.affine_prior * float(np.sum(aff[1:] ** 2))
        for k in range(1, self.m):
            c = (k - 1) * CAM + 6
            Hcc[c:c + 2, c:c + 2] += self.config.affine_prior * np.eye(2)
            gc[c:c + 2] += self.config.affine_prior * aff[k]
        Hdd += self.prior_w
        gd += self.prior_w * (d - self.prior_d)
        return dict(Hcc=Hcc, gc=gc, Hcp=Hcp, Hdd=Hdd, gd=gd, E=E, nres=nres)

    def solve(self, lin, lam):
        Hdd = lin["Hdd"] * (1.0 + lam)
        inv = np.where(Hdd > 1e-12, 1.0 / np.maximum(Hdd, 1e-300), 0.0)
        dc = np.zeros(self.P)
        if self.P:
            Hcc = lin["Hcc"] + lam * np.diag(np.diag(lin["Hcc"]))
            Hcp = lin["Hcp"]
            S = Hcc - (Hcp * inv) @ Hcp.T
            rhs = lin["gc"] - Hcp @ (inv * lin["gd"])
            if not np.all(np.isfinite(S)) or np.any(np.diag(lin["Hcc"]) <= 0):
                raise BundleAdjustmentError("rank-deficient window system")
            try:
                dc = -cho_solve(cho_factor(S), rhs)
            except LinAlgError:
                raise BundleAdjustmentError("rank-deficient window system") from None
            ddp = -inv * (lin["gd"] + Hcp.T @ dc)
        else:
            ddp = -inv * lin["gd"]
        return dc, ddp

    def apply(self, poses, aff, d, dc, ddp):
        poses = list(poses)
        aff = aff.copy()
        for k in range(1, self.m):
            x = dc[(k - 1) * CAM:k * CAM]
            poses[k] = poses[k] @ Pose.exp(x[:6])
            aff[k] += x[6:]
        dn = d + ddp
        dn = np.where(dn > 1e-5, dn, 0.5 * d)
        return poses, aff, dn

    def write_back(self, poses, aff, d, lin):
        for k, kf in enumerate(self.kfs):
            if k > 0:
                kf.pose = poses[k]
                kf.frame.affine_a, kf.frame.affine_b = float(aff[k, 0]), float(aff[k, 1])
            sl = slice(self.start[k], self.start[k + 1])
            kf.idepth[self.act[k]] = d[sl]
            kf.hdd[self.act[k]] = lin["Hdd"][sl] - self.prior_w[sl]

    def flag_outliers(self, poses, aff, d, report: BAReport):
        thr = self.config.outlier_threshold * self.gamma
        inliers = np.zeros(self.N, dtype=np.int64)
        for h, t, sel in self.pairs:
            _, b = self._pair_block(h, t, sel, poses, aff, d, False)
            nv = b.valid.sum(axis=1)
            mean_abs = np.where(nv > 0, np.sum(np.abs(b.r) * b.valid, axis=1) / np.maximum(nv, 1), np.inf)
            good = nv >= MIN_VALID_OFFSETS
            bad = good & (mean_abs > thr)
            kh = self.kfs[h]
            mask = kh.outliers_for(self.kfs[t].id)
            mask[self.act[h][sel[bad]]] = True
            report.outlier_observations += int(bad.sum())
            inliers[self.start[h] + sel[good & ~bad]] += 1
        drop = ~np.isfinite(d) | (d <= 1e-5)
        if self.stereo:
            for h in range(self.m):
                if not len(self.act[h]):
                    continue
                b = self._stereo_block(h, poses, aff, d, False)
                nv = b.valid.sum(axis=1)
                mean_abs = np.sum(np.abs(b.r) * b.valid, axis=1) / np.maximum(nv, 1)
                sl = slice(self.start[h], self.start[h + 1])
                drop[sl] |= (nv >= MIN_VALID_OFFSETS) & (mean_abs > thr)
        for k, kf in enumerate(self.kfs):
            sl = slice(self.start[k], self.start[k + 1])
            idx = self.act[k]
            kf.n_obs[idx] = np.maximum(kf.n_obs[idx], 1 + inliers[sl])
            kf.status[idx[drop[sl]]] = DROPPED
            report.dropped_points += int(drop[sl].sum())


def bundle_adjust_window(window: SlidingWindowState, config, max_iterations: int | None = None) -> BAReport:
    """Damped Gauss-Newton over the whole window; updates the window in place."""
    report = BAReport()
    if len(window) < 2:
        raise BundleAdjustmentError("bundle adjustment needs at least two keyframes")
    prob = _Problem(window, config)
    report.n_points = prob.N
    iters = config.ba_iterations if max_iterations is None else max_iterations
    poses, aff, d = prob.state()
    lin = prob.linearize(poses, aff, d)
    E = lin["E"]
    report.energies.append(E)
    report.n_residuals = lin["nres"]
    lam = 1e-4
    fresh = True
    for _ in range(iters):
        report.iterations += 1
        dc, ddp = prob.solve(lin, lam)
        cand = prob.apply(poses, aff, d, dc, ddp)
        E_new = prob.energy(*cand)
        if E_new <= E:
            rel = (E - E_new) / max(E, 1e-300)
            poses, aff, d = cand
            E = E_new
            report.energies.append(E)
            report.accepted += 1
            lam = max(lam * 0.5, 1e-8)
            if rel < config.ba_tolerance:
                fresh = False
                break
            lin = prob.linearize(poses, aff, d)
            fresh = True
        else:
            lam *= 4.0
            if lam > 1e6:
                break
    if not fresh:
        lin = prob.linearize(poses, aff, d)
    prob.write_back(poses, aff, d, lin)
    prob.flag_outliers(poses, aff, d, report)
    return report
