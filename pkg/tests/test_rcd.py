import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geonlf.cloud import PointCloud
from geonlf.errors import (DegenerateCorrespondences, EmptyCloud, EmptyList,
                           TooFewFrames)
from geonlf.geometry import Se3Param, rotation_angle, se3_decoupled, so3_exp
from geonlf.icp import icp_pairwise
from geonlf.rcd import (RcdConfig, build_graph, correspondence_weights,
                        geo_optimize, graph_denominator, graph_loss,
                        robust_chamfer, temperature_at)
from oracles import brute_chamfer, numeric_gradient


class TestBuildGraph:
    def test_m5_n2(self):
        g = build_graph(5, 2)
        assert len(g.edges) == 2 * 5 - 3
        assert set(g.edges) == {(0, 1), (1, 2), (2, 3), (3, 4),
                                (0, 2), (1, 3), (2, 4)}
        assert g.edges == sorted(g.edges)

    def test_m2_n1(self):
        assert build_graph(2, 1).edges == [(0, 1)]

    def test_paper_scale(self):
        assert len(build_graph(36, 4).edges) == 4 * 36 - 10

    def test_count_formula_exhaustive(self):
        for m in range(2, 21):
            for n in range(1, 6):
                if n >= m:
                    continue
                g = build_graph(m, n)
                assert len(g.edges) == graph_denominator(m, n)
                assert len(set(g.edges)) == len(g.edges)
                assert all(0 < j - i <= n for i, j in g.edges)

    def test_window_clamped(self):
        with pytest.warns(RuntimeWarning):
            g = build_graph(3, 10)
        assert g.window == 2
        assert len(g.edges) == 3

    def test_too_few_frames(self):
        with pytest.raises(TooFewFrames):
            build_graph(1, 1)


class TestCorrespondenceWeights:
    def test_zero_temperature_uniform(self):
        w = correspondence_weights([0.5, 1.0, 2.0, 7.0], 0.0, 0.1)
        np.testing.assert_allclose(w, 0.25)

    def test_reference_values(self):
        w = correspondence_weights([0.5, 1.0], 0.5, 0.1)
        e = np.exp([0.5 / 0.5, 0.5 / 1.0])
        np.testing.assert_allclose(w, e / e.sum(), rtol=1e-12)
        np.testing.assert_allclose(w, [0.62245933, 0.37754067], atol=1e-7)

    def test_equal_distances_split_evenly(self):
        for t in (0.0, 0.5, 13.0):
            np.testing.assert_allclose(
                correspondence_weights([0.2, 0.2], t, 0.05), [0.5, 0.5])

    def test_clip_enters_below_voxel(self):
        # distances below the voxel size are indistinguishable
        w = correspondence_weights([0.001, 0.05, 0.1], 1.0, 0.1)
        assert w[0] == w[1] == w[2]

    def test_large_t_selects_minimum(self):
        w = correspondence_weights([0.2, 0.5, 1.1, 2.4], 50.0, 0.01)
        assert w[0] > 0.99

    def test_no_overflow_at_high_sharpness(self):
        w = correspondence_weights([0.011, 5.0], 50.0, 0.01)
        assert np.isfinite(w).all() and abs(w.sum() - 1.0) < 1e-12

    @given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=40),
           st.floats(0.0, 50.0))
    @settings(max_examples=100, deadline=None)
    def test_sums_to_one_and_monotone(self, distances, t):
        w = correspondence_weights(distances, t, 0.05)
        assert abs(w.sum() - 1.0) < 1e-12
        clipped = np.maximum(0.05, np.asarray(distances))
        order = np.argsort(clipped)
        assert (np.diff(w[order]) <= 1e-12).all()

    def test_empty_raises(self):
        with pytest.raises(EmptyList):
            correspondence_weights([], 0.5, 0.1)


class TestTemperature:
    def test_endpoints(self):
        cfg = RcdConfig(t0=0.5)
        assert temperature_at(0.0, cfg) == 0.0
        np.testing.assert_allclose(temperature_at(1.0, cfg), 0.5)
        np.testing.assert_allclose(temperature_at(0.5, cfg), 0.25)

    def test_exponential_schedule(self):
        cfg = RcdConfig(t0=0.5, schedule="exponential")
        assert temperature_at(0.0, cfg) == 0.0
        np.testing.assert_allclose(temperature_at(1.0, cfg), 0.5, rtol=1e-12)
        np.testing.assert_allclose(temperature_at(0.5, cfg),
                                   0.5 * (2 ** 0.5 - 1), rtol=1e-12)


class TestRobustChamfer:
    def test_identical_aligned_zero(self):
        pts = np.random.default_rng(0).uniform(size=(60, 3))
        cloud = PointCloud(pts)
        loss, gp, gq = robust_chamfer(cloud, cloud, Se3Param(), Se3Param(),
                                      RcdConfig(), 0.0)
        assert loss == 0.0
        np.testing.assert_array_equal(gp, np.zeros(6))
        np.testing.assert_array_equal(gq, np.zeros(6))

    def test_single_point_pair(self):
        p = PointCloud([[0.0, 0.0, 0.0]])
        q = PointCloud([[1.0, 0.0, 0.0]])
        loss, _, _ = robust_chamfer(p, q, Se3Param(), Se3Param(),
                                    RcdConfig(), 0.0)
        np.testing.assert_allclose(loss, 2.0)

    def test_matches_uniform_brute_force(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a = rng.uniform(size=(50, 3))
            b = rng.uniform(size=(50, 3))
            loss, _, _ = robust_chamfer(PointCloud(a), PointCloud(b),
                                        Se3Param(), Se3Param(), RcdConfig(), 0.0)
            np.testing.assert_allclose(loss, brute_chamfer(a, b), atol=1e-9)

    def test_posed_matches_brute_force_on_transformed(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(size=(40, 3))
        b = rng.uniform(size=(40, 3))
        xp = Se3Param([0.05, -0.02, 0.01], [0.02, 0.03, -0.01])
        xq = Se3Param([-0.01, 0.04, 0.0], [0.0, -0.02, 0.05])
        loss, _, _ = robust_chamfer(PointCloud(a), PointCloud(b), xp, xq,
                                    RcdConfig(), 0.0)
        aw = a @ so3_exp(xp.phi).T + xp.rho
        bw = b @ so3_exp(xq.phi).T + xq.rho
        np.testing.assert_allclose(loss, brute_chamfer(aw, bw), atol=1e-9)

    def test_empty_raises(self):
        with pytest.raises(EmptyCloud):
            robust_chamfer(PointCloud(np.zeros((0, 3))),
                           PointCloud([[0.0, 0.0, 0.0]]),
                           Se3Param(), Se3Param(), RcdConfig(), 0.0)


def _surrogate_edge_loss(a, b, xp6, xq6, t, voxel):
    """Independent reimplementation: world-frame NN by double loop, weights
    from the softmax formula, loss on frozen correspondences/weights.

    Returns a closure over the frozen pairing, evaluable at any poses.
    """
    def world(pts, x6):
        return pts @ so3_exp(x6[3:]).T + x6[:3]

    aw = world(a, xp6)
    bw = world(b, xq6)
    d_ab = np.sqrt(((aw[:, None, :] - bw[None, :, :]) ** 2).sum(axis=2))
    idx_ab = d_ab.argmin(axis=1)
    idx_ba = d_ab.argmin(axis=0)
    w_ab = correspondence_weights(d_ab.min(axis=1), t, voxel)
    w_ba = correspondence_weights(d_ab.min(axis=0), t, voxel)

    def value(xp6v, xq6v):
        awv = world(a, xp6v)
        bwv = world(b, xq6v)
        term1 = (w_ab * ((awv - bwv[idx_ab]) ** 2).sum(axis=1)).sum()
        term2 = (w_ba * ((bwv - awv[idx_ba]) ** 2).sum(axis=1)).sum()
        return term1 + term2

    return value


class TestGradients:
    def test_robust_chamfer_gradients_match_fd(self):
        rng = np.random.default_rng(3)
        a = rng.uniform(size=(50, 3))
        b = rng.uniform(size=(50, 3)) + 0.05
        cfg = RcdConfig(voxel_size=0.02)
        t = 0.3
        xp = np.array([0.02, -0.01, 0.03, 0.05, -0.04, 0.02])
        xq = np.array([-0.03, 0.02, 0.0, -0.02, 0.03, 0.01])
        loss, gp, gq = robust_chamfer(
            PointCloud(a), PointCloud(b),
            Se3Param(xp[:3], xp[3:]), Se3Param(xq[:3], xq[3:]), cfg, t)
        surrogate = _surrogate_edge_loss(a, b, xp, xq, t, cfg.voxel_size)
        np.testing.assert_allclose(loss, surrogate(xp, xq), atol=1e-12)
        fd_p = numeric_gradient(lambda v: surrogate(v, xq), xp, h=1e-6)
        fd_q = numeric_gradient(lambda v: surrogate(xp, v), xq, h=1e-6)
        np.testing.assert_allclose(gp, fd_p, rtol=1e-5, atol=1e-10)
        np.testing.assert_allclose(gq, fd_q, rtol=1e-5, atol=1e-10)

    def test_graph_loss_gradients_match_fd(self):
        rng = np.random.default_rng(4)
        clouds = [PointCloud(rng.uniform(size=(50, 3)) + 0.02 * k)
                  for k in range(3)]
        base = rng.normal(scale=0.03, size=(3, 6))
        cfg = RcdConfig(voxel_size=0.02)
        t = 0.25
        graph = build_graph(3, 2)
        poses = [Se3Param(v[:3], v[3:]) for v in base]
        loss, grads = graph_loss(clouds, poses, graph, cfg, t)

        surrogates = {(i, j): _surrogate_edge_loss(
            clouds[i].points, clouds[j].points, base[i], base[j], t,
            cfg.voxel_size) for i, j in graph.edges}
        denom = graph_denominator(3, 2)

        def total(flat):
            vs = flat.reshape(3, 6)
            return sum(s(vs[i], vs[j]) for (i, j), s in surrogates.items()) / denom

        np.testing.assert_allclose(loss, total(base.ravel()), atol=1e-12)
        fd = numeric_gradient(total, base.ravel(), h=1e-6).reshape(3, 6)
        for f in range(3):
            for c in range(6):
                ref = fd[f, c]
                got = grads[f, c]
                denom_val = max(abs(ref), 1e-8)
                assert abs(got - ref) / denom_val < 1e-5, (f, c, got, ref)

    def test_non_detached_weights_gradient(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(30, 3))
        b = rng.uniform(size=(30, 3)) + 0.1
        cfg = RcdConfig(voxel_size=0.02, detach_weights=False)
        t = 0.4
        xp = np.array([0.01, 0.02, -0.01, 0.03, 0.01, -0.02])
        xq = np.zeros(6)
        _, gp, _ = robust_chamfer(PointCloud(a), PointCloud(b),
                                  Se3Param(xp[:3], xp[3:]), Se3Param(), cfg, t)

        def value(xp6v):
            # frozen correspondences, differentiable weights
            aw = a @ so3_exp(xp6v[3:]).T + xp6v[:3]
            bw = b @ so3_exp(xq[3:]).T + xq[:3]
            d_ab = np.sqrt(((aw[:, None, :] - bw[None, :, :]) ** 2).sum(axis=2))
            base_aw = a @ so3_exp(xp[3:]).T + xp[:3]
            base_d = np.sqrt(((base_aw[:, None, :] - bw[None, :, :]) ** 2).sum(axis=2))
            i_ab = base_d.argmin(axis=1)
            i_ba = base_d.argmin(axis=0)
            d1 = np.linalg.norm(aw - bw[i_ab], axis=1)
            d2 = np.linalg.norm(bw - aw[i_ba], axis=1)
            w1 = correspondence_weights(d1, t, cfg.voxel_size)
            w2 = correspondence_weights(d2, t, cfg.voxel_size)
            return float((w1 * d1 ** 2).sum() + (w2 * d2 ** 2).sum())

        fd = numeric_gradient(value, xp, h=1e-6)
        np.testing.assert_allclose(gp, fd, rtol=1e-5, atol=1e-9)


class TestGraphLoss:
    def test_identical_frames_zero(self):
        pts = PointCloud(np.random.default_rng(6).uniform(size=(40, 3)))
        clouds = [pts, pts, pts]
        poses = [Se3Param() for _ in range(3)]
        loss, grads = graph_loss(clouds, poses, build_graph(3, 1),
                                 RcdConfig(), 0.0)
        assert loss == 0.0
        np.testing.assert_array_equal(grads, np.zeros((3, 6)))

    def test_three_frames_denominator(self):
        rng = np.random.default_rng(7)
        base = PointCloud(rng.uniform(size=(30, 3)))
        clouds = [base, base, base]
        poses = [Se3Param(), Se3Param([0.1, 0, 0], np.zeros(3)),
                 Se3Param([0.2, 0, 0], np.zeros(3))]
        cfg = RcdConfig()
        l01, _, _ = robust_chamfer(clouds[0], clouds[1], poses[0], poses[1], cfg, 0.0)
        l12, _, _ = robust_chamfer(clouds[1], clouds[2], poses[1], poses[2], cfg, 0.0)
        total, _ = graph_loss(clouds, poses, build_graph(3, 1), cfg, 0.0)
        np.testing.assert_allclose(total, (l01 + l12) / 2.0, atol=1e-12)

    def test_four_frames_window_two_edge_sum(self):
        rng = np.random.default_rng(8)
        clouds = [PointCloud(rng.uniform(size=(25, 3))) for _ in range(4)]
        poses = [Se3Param(rng.normal(scale=0.02, size=3),
                          rng.normal(scale=0.02, size=3)) for _ in range(4)]
        cfg = RcdConfig()
        graph = build_graph(4, 2)
        assert graph_denominator(4, 2) == 5
        total, _ = graph_loss(clouds, poses, graph, cfg, 0.1)
        explicit = sum(robust_chamfer(clouds[i], clouds[j], poses[i],
                                      poses[j], cfg, 0.1)[0]
                       for i, j in graph.edges)
        np.testing.assert_allclose(total, explicit / 5.0, atol=1e-12)

    def test_gauge_symmetry(self):
        rng = np.random.default_rng(9)
        clouds = [PointCloud(rng.uniform(size=(40, 3))) for _ in range(3)]
        poses = [Se3Param(rng.normal(scale=0.05, size=3),
                          rng.normal(scale=0.05, size=3)) for _ in range(3)]
        cfg = RcdConfig()
        base, _ = graph_loss(clouds, poses, build_graph(3, 2), cfg, 0.3)
        g = se3_decoupled(Se3Param([0.3, -0.2, 0.1], [0.2, 0.1, -0.3]))
        moved = []
        for p in poses:
            m = g @ se3_decoupled(p)
            moved.append(Se3Param.from_matrix(m))
        after, _ = graph_loss(clouds, moved, build_graph(3, 2), cfg, 0.3)
        np.testing.assert_allclose(after, base, atol=1e-10)

    def test_empty_cloud_reports_frame(self):
        clouds = [PointCloud(np.random.default_rng(0).uniform(size=(5, 3))),
                  PointCloud(np.zeros((0, 3)))]
        with pytest.raises(EmptyCloud, match="frame 1"):
            graph_loss(clouds, [Se3Param(), Se3Param()], build_graph(2, 1),
                       RcdConfig(), 0.0)


class TestGeoOptimize:
    def test_aligned_clouds_stay_put(self):
        rng = np.random.default_rng(10)
        cloud = PointCloud(rng.uniform(size=(200, 3)))
        clouds = [cloud, cloud]
        poses = [Se3Param(), Se3Param()]
        out = geo_optimize(clouds, poses, build_graph(2, 1),
                           RcdConfig(voxel_size=0.02), steps=100,
                           lr_rot=5e-3, lr_trans=1e-3)
        for p in out:
            assert np.abs(p.rho).max() < 1e-6
            assert np.abs(p.phi).max() < 1e-6

    def test_recovers_offset_pair(self):
        rng = np.random.default_rng(11)
        pts = rng.uniform(size=(500, 3))
        cloud = PointCloud(pts)
        true_rel = Se3Param([0.21, -0.15, 0.12],
                            np.deg2rad(10.0) * np.array([0.0, 0.0, 1.0]))
        # cloud 1 observed from a pose offset by true_rel
        moved = PointCloud(
            (pts - true_rel.rho) @ so3_exp(true_rel.phi))
        clouds = [cloud, moved]
        init = [Se3Param(), Se3Param()]
        losses = []
        out = geo_optimize(clouds, init, build_graph(2, 1),
                           RcdConfig(voxel_size=0.02), steps=500,
                           lr_rot=1e-2, lr_trans=5e-3, loss_log=losses)
        est = se3_decoupled(out[1])
        ref = se3_decoupled(true_rel)
        rot_err = np.degrees(rotation_angle(est[:3, :3].T @ ref[:3, :3]))
        trans_err = np.linalg.norm(est[:3, 3] - ref[:3, 3])
        assert rot_err < 0.5
        assert trans_err < 0.01
        # loss broadly decreases
        assert losses[-1] < losses[0] * 0.05

    def test_gauge_and_relative_recovery(self):
        rng = np.random.default_rng(12)
        pts = rng.uniform(size=(400, 3))
        world = PointCloud(pts)
        gt = [Se3Param(),
              Se3Param([0.1, 0.05, 0.0], [0.0, 0.0, 0.1]),
              Se3Param([0.2, 0.1, 0.05], [0.0, 0.0, 0.2])]
        clouds = [PointCloud((pts - g.rho) @ so3_exp(g.phi)) for g in gt]
        noisy = [gt[0].copy(),
                 Se3Param(gt[1].rho + [0.05, -0.04, 0.02], gt[1].phi + 0.05),
                 Se3Param(gt[2].rho + [-0.03, 0.05, -0.02], gt[2].phi - 0.04)]
        out = geo_optimize(clouds, noisy, build_graph(3, 2),
                           RcdConfig(voxel_size=0.02), steps=400,
                           lr_rot=1e-2, lr_trans=5e-3)
        assert np.array_equal(out[0].rho, gt[0].rho)  # gauge frozen
        for est, ref in zip(out[1:], gt[1:]):
            assert np.linalg.norm(est.rho - ref.rho) < 0.02
            assert np.degrees(np.linalg.norm(est.phi - ref.phi)) < 1.0


class TestIcp:
    def test_identity(self):
        pts = np.random.default_rng(13).uniform(size=(200, 3))
        t = icp_pairwise(PointCloud(pts), PointCloud(pts))
        np.testing.assert_allclose(t, np.eye(4), atol=1e-8)

    def test_recovers_small_transform(self):
        rng = np.random.default_rng(14)
        pts = rng.uniform(size=(400, 3))
        true = se3_decoupled(Se3Param([0.02, 0.05, -0.03],
                                      np.deg2rad(2.0) * np.array([0.2, 0.3, 0.93])))
        target = PointCloud(pts @ true[:3, :3].T + true[:3, 3])
        est = icp_pairwise(PointCloud(pts), target, max_iters=100, tol=1e-12)
        assert np.abs(est - true).max() < 1e-4

    def test_large_rotation_of_symmetric_shape_fails(self):
        # a square of points rotated 90 degrees looks locally aligned;
        # classic failure mode of point-to-point ICP
        rng = np.random.default_rng(15)
        square = np.column_stack([rng.uniform(-1, 1, 600),
                                  rng.uniform(-1, 1, 600),
                                  np.zeros(600)])
        true = se3_decoupled(Se3Param(np.zeros(3), [0.0, 0.0, np.pi / 2]))
        target = PointCloud(square @ true[:3, :3].T + true[:3, 3])
        est = icp_pairwise(PointCloud(square), target, max_iters=100)
        # converges, but to a different optimum than the true transform
        assert np.abs(est - true).max() > 0.5

    def test_degenerate_raises(self):
        pts = np.array([[0.0, 0.0, 0.0]] * 5)
        with pytest.raises(DegenerateCorrespondences):
            icp_pairwise(PointCloud(pts), PointCloud(pts))

    def test_needs_three_points(self):
        with pytest.raises(EmptyCloud):
            icp_pairwise(PointCloud([[0.0, 0.0, 0.0]]),
                         PointCloud([[1.0, 1.0, 1.0]]))
