import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geonlf.cloud import PointCloud, RangeImage
from geonlf.errors import EmptyCloud, FrameMismatch, ShapeMismatch
from geonlf.geometry import Se3Param, Trajectory, se3_decoupled, so3_exp
from geonlf.metrics import (METRIC_COLUMNS, chamfer_fscore, drop_accuracy,
                            image_metrics, metrics_rows_to_csv, pose_metrics)
from oracles import brute_chamfer, brute_fscore


def _traj(positions, seed=0):
    rng = np.random.default_rng(seed)
    poses = []
    for p in positions:
        t = np.eye(4)
        t[:3, :3] = so3_exp(rng.normal(size=3) * 0.2)
        t[:3, 3] = p
        poses.append(t)
    return Trajectory(list(range(len(positions))), np.array(poses))


class TestPoseMetrics:
    def test_identical_all_zero(self):
        traj = _traj(np.random.default_rng(1).normal(size=(6, 3)))
        pm = pose_metrics(traj, traj)
        assert pm.ate_m < 1e-12
        assert pm.rpe_t_cm < 1e-10
        assert pm.rpe_r_deg < 1e-6

    def test_constant_offset_absorbed(self):
        ref = _traj(np.random.default_rng(2).normal(size=(5, 3)))
        shifted = ref.poses.copy()
        shifted[:, :3, 3] += np.array([0.3, -0.2, 0.5])
        est = Trajectory(list(ref.frame_ids), shifted)
        pm = pose_metrics(est, ref)
        assert pm.ate_m < 1e-12
        assert pm.rpe_t_cm < 1e-10

    def test_single_displaced_frame_matches_direct_solve(self):
        rng = np.random.default_rng(3)
        pos = rng.normal(size=(8, 3))
        ref = _traj(pos, seed=3)
        moved = pos.copy()
        moved[4] += [0.1, 0.0, 0.0]
        est = Trajectory(list(ref.frame_ids),
                         np.concatenate([ref.poses[:4],
                                         ref.poses[4:5], ref.poses[5:]]))
        est.poses = est.poses.copy()
        est.poses[4, :3, 3] = moved[4]
        pm = pose_metrics(est, ref)
        # oracle: optimal rigid alignment residual via scipy descent
        from scipy.optimize import minimize

        def cost(v):
            rot = so3_exp(v[:3])
            return (((moved @ rot.T + v[3:]) - pos) ** 2).sum()

        best = min(minimize(cost, np.concatenate([rng.normal(scale=0.2, size=3),
                                                  rng.normal(scale=0.2, size=3)]),
                            method="Nelder-Mead",
                            options={"xatol": 1e-12, "fatol": 1e-14,
                                     "maxiter": 40000}).fun
                   for _ in range(6))
        np.testing.assert_allclose(pm.ate_m, np.sqrt(best / 8), atol=1e-6)

    def test_invariant_under_common_rigid_transform(self):
        rng = np.random.default_rng(4)
        ref = _traj(rng.normal(size=(7, 3)), seed=4)
        est_pos = ref.positions() + rng.normal(scale=0.05, size=(7, 3))
        est = _traj(est_pos, seed=5)
        pm0 = pose_metrics(est, ref)
        g = se3_decoupled(Se3Param([2.0, -1.0, 0.7], [0.4, 0.2, -0.6]))
        est_g = Trajectory(list(est.frame_ids),
                           np.array([g @ p for p in est.poses]))
        pm1 = pose_metrics(est_g, ref)
        np.testing.assert_allclose(pm1.ate_m, pm0.ate_m, atol=1e-9)
        np.testing.assert_allclose(pm1.rpe_t_cm, pm0.rpe_t_cm, atol=1e-9)
        np.testing.assert_allclose(pm1.rpe_r_deg, pm0.rpe_r_deg, atol=1e-9)

    def test_mismatch_raises(self):
        a = _traj(np.random.default_rng(5).normal(size=(4, 3)))
        b = Trajectory([0, 1, 2, 9], a.poses)
        with pytest.raises(FrameMismatch):
            pose_metrics(a, b)


class TestChamferFscore:
    def test_identical(self):
        pts = PointCloud(np.random.default_rng(6).uniform(size=(50, 3)))
        cd, fs = chamfer_fscore(pts, pts, 0.05)
        assert cd == 0.0 and fs == 1.0

    def test_large_offset_zero_fscore(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(size=(40, 3))
        b = a + np.array([1.0, 0.0, 0.0])
        cd, fs = chamfer_fscore(PointCloud(a), PointCloud(b), 0.05)
        assert fs == 0.0
        assert cd > 0.5

    def test_matches_brute_force(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            a = rng.uniform(size=(100, 3))
            b = rng.uniform(size=(100, 3))
            cd, fs = chamfer_fscore(PointCloud(a), PointCloud(b), 0.12)
            np.testing.assert_allclose(cd, brute_chamfer(a, b), atol=1e-9)
            np.testing.assert_allclose(fs, brute_fscore(a, b, 0.12), atol=1e-12)

    @given(st.floats(0.01, 0.5), st.floats(0.01, 0.5))
    @settings(max_examples=30, deadline=None)
    def test_fscore_monotone_in_threshold(self, t1, t2):
        rng = np.random.default_rng(9)
        a = PointCloud(rng.uniform(size=(60, 3)))
        b = PointCloud(rng.uniform(size=(60, 3)))
        lo, hi = sorted([t1, t2])
        _, f_lo = chamfer_fscore(a, b, lo)
        _, f_hi = chamfer_fscore(a, b, hi)
        assert 0.0 <= f_lo <= f_hi <= 1.0

    def test_empty_raises(self):
        with pytest.raises(EmptyCloud):
            chamfer_fscore(PointCloud(np.zeros((0, 3))),
                           PointCloud([[0.0, 0.0, 0.0]]), 0.05)


class TestImageMetrics:
    def _pair(self, err=0.0, seed=10):
        rng = np.random.default_rng(seed)
        depth = rng.uniform(1.0, 10.0, size=(8, 16))
        valid = rng.uniform(size=(8, 16)) > 0.2
        gt = RangeImage(depth, rng.uniform(size=(8, 16)), valid)
        pred = RangeImage(depth + err, gt.intensity.copy(), valid.copy())
        return pred, gt

    def test_identical_capped_psnr(self):
        pred, gt = self._pair()
        rmse, medae, psnr = image_metrics(pred, gt, "depth")
        assert rmse == 0.0 and medae == 0.0 and psnr == 99.0

    def test_constant_error(self):
        rng = np.random.default_rng(11)
        depth = np.full((4, 8), 5.0)
        depth[0, 0] = 10.0
        gt = RangeImage(depth, np.zeros((4, 8)), np.ones((4, 8), bool))
        pred = RangeImage(depth + 1.0, np.zeros((4, 8)), np.ones((4, 8), bool))
        rmse, medae, psnr = image_metrics(pred, gt, "depth")
        np.testing.assert_allclose(rmse, 1.0)
        np.testing.assert_allclose(medae, 1.0)
        np.testing.assert_allclose(psnr, 20.0)  # 10*log10(100/1)

    def test_matches_scalar_recompute(self):
        rng = np.random.default_rng(12)
        pred, gt = self._pair(seed=12)
        pred.depth += rng.normal(scale=0.2, size=pred.depth.shape)
        rmse, medae, psnr = image_metrics(pred, gt, "depth")
        errs = (pred.depth - gt.depth)[gt.valid]
        np.testing.assert_allclose(rmse, np.sqrt((errs ** 2).mean()))
        np.testing.assert_allclose(medae, np.median(np.abs(errs)))
        peak = gt.depth[gt.valid].max()
        np.testing.assert_allclose(psnr, 10 * np.log10(peak ** 2 / (errs ** 2).mean()))

    def test_psnr_decreasing_in_mse(self):
        _, gt = self._pair(seed=13)
        vals = []
        for err in (0.1, 0.2, 0.5, 1.0):
            pred = RangeImage(gt.depth + err, gt.intensity, gt.valid)
            vals.append(image_metrics(pred, gt, "depth")[2])
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_shape_mismatch(self):
        pred, gt = self._pair()
        small = RangeImage(np.ones((2, 2)), np.zeros((2, 2)),
                           np.ones((2, 2), bool))
        with pytest.raises(ShapeMismatch):
            image_metrics(small, gt)

    def test_drop_accuracy(self):
        pred, gt = self._pair()
        assert drop_accuracy(pred, gt) == 1.0
        flipped = RangeImage(pred.depth, pred.intensity, ~pred.valid)
        assert drop_accuracy(flipped, gt) == 0.0


class TestCsv:
    def test_column_order_and_mean_row(self):
        rows = [{"seq": "a", "ate": 1.0, "rpe_t": 2.0, "rpe_r": 3.0,
                 "cd": 0.5, "fscore": 0.9, "rmse_d": 0.1, "medae_d": 0.05,
                 "psnr_d": 30.0, "rmse_i": 0.01, "medae_i": 0.005,
                 "psnr_i": 40.0}]
        text = metrics_rows_to_csv(rows)
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(METRIC_COLUMNS)
        assert lines[1].startswith("a,1,2,3,0.5,0.9,")
        assert lines[2].startswith("mean,1,2,3,")

    def test_missing_values_are_nan(self):
        text = metrics_rows_to_csv([{"seq": "s", "ate": 0.0}])
        line = text.strip().split("\n")[1]
        assert line.split(",")[4] == "nan"
