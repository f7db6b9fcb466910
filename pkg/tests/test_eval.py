import math

import numpy as np
import pytest

from fkb import camera, evalbench, features, warp
from fkb.errors import EmptyInput, InsufficientMatches
from fkb.evalbench import EvalConfig, GroundTruthMap
from fkb.features import KeypointSet

from conftest import make_blocky_image


def kpset(coords):
    coords = np.asarray(coords, dtype=float)
    return KeypointSet(coords, np.ones(len(coords)))


def brute_repeatability(a, b, map_fn, inv_fn, eps):
    """Independent per-point neighbour count (symmetric definition)."""
    if len(a) == 0 and len(b) == 0:
        return math.nan
    correct = 0
    for p in a:
        mp = map_fn(p)
        if any(np.hypot(mp[0] - q[0], mp[1] - q[1]) <= eps for q in b):
            correct += 1
    for q in b:
        mq = inv_fn(q)
        if any(np.hypot(mq[0] - p[0], mq[1] - p[1]) <= eps for p in a):
            correct += 1
    return correct / (len(a) + len(b))


class TestMapPoints:
    def test_identity(self):
        pts = kpset([[3, 4], [10, 20]])
        out = evalbench.map_points(pts, GroundTruthMap.identity())
        assert np.array_equal(out.xy, pts.xy)

    def test_scaling_homography(self):
        H = np.diag([2.0, 2.0, 1.0])
        gt = GroundTruthMap(kind="homography", homography=H)
        out = evalbench.map_points(kpset([[3, 4]]), gt)
        assert np.allclose(out.xy, [[6, 8]])

    def test_homography_inverse_direction(self):
        H = np.array([[1.1, 0.02, 3.0], [-0.01, 0.95, -2.0], [1e-4, 0, 1.0]])
        gt = GroundTruthMap(kind="homography", homography=H)
        pts = kpset([[10, 20], [40, 7]])
        fwd = evalbench.map_points(pts, gt, "forward")
        back = evalbench.map_points(fwd, gt, "inverse")
        assert np.abs(back.xy - pts.xy).max() < 1e-9

    def test_fisheye_pair_consistency(self):
        m = camera.equidistant_model(64, 64)
        T = warp.sample_transform(5)
        fwd, inv = warp.bake_field_pair(m, T)
        gt = GroundTruthMap(kind="fisheye-warp", model=m, forward=fwd,
                            inverse=inv)
        pts = kpset(np.random.default_rng(0).uniform(15, 48, (50, 2)))
        mapped = evalbench.map_points(pts, gt, "forward")
        back = evalbench.map_points(mapped, gt, "inverse")
        ok = ~np.isnan(back.xy).any(axis=1)
        assert ok.sum() > 30
        assert np.abs(back.xy[ok] - pts.xy[ok]).max() < 1e-4


class TestRepeatability:
    def test_single_identical_point(self):
        r = evalbench.repeatability(kpset([[10, 10]]), kpset([[10, 10]]),
                                    GroundTruthMap.identity(), 3)
        assert r == 1.0

    def test_worked_two_thirds(self):
        # sqrt(8) ~ 2.83 <= 3, so (10,10)~(12,12) count both ways
        a = kpset([[10, 10], [50, 50]])
        b = kpset([[12, 12]])
        r = evalbench.repeatability(a, b, GroundTruthMap.identity(), 3)
        assert np.isclose(r, 2 / 3)

    def test_identical_sets(self):
        pts = kpset(np.random.default_rng(1).uniform(0, 100, (30, 2)))
        r = evalbench.repeatability(pts, pts, GroundTruthMap.identity(), 3)
        assert r == 1.0

    def test_empty_sets_nan(self):
        r = evalbench.repeatability(KeypointSet.empty(), KeypointSet.empty(),
                                    GroundTruthMap.identity(), 3)
        assert math.isnan(r)

    def test_symmetry_under_swap(self):
        rng = np.random.default_rng(2)
        H = np.array([[1.05, 0.01, 4.0], [0.0, 0.98, -3.0], [0, 0, 1.0]])
        gt = GroundTruthMap(kind="homography", homography=H)
        gt_inv = GroundTruthMap(kind="homography",
                                homography=np.linalg.inv(H))
        a = kpset(rng.uniform(10, 90, (15, 2)))
        b = kpset(rng.uniform(10, 90, (12, 2)))
        r1 = evalbench.repeatability(a, b, gt, 3)
        r2 = evalbench.repeatability(b, a, gt_inv, 3)
        assert abs(r1 - r2) < 1e-9

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        H = np.array([[1.0, 0.0, 2.0], [0.0, 1.0, -1.0], [0, 0, 1.0]])
        gt = GroundTruthMap(kind="homography", homography=H)
        for _ in range(20):
            a = kpset(rng.uniform(0, 50, (rng.integers(0, 15), 2)))
            b = kpset(rng.uniform(0, 50, (rng.integers(1, 15), 2)))
            got = evalbench.repeatability(a, b, gt, 3)
            exp = brute_repeatability(
                a.xy, b.xy,
                lambda p: (p[0] + 2, p[1] - 1),
                lambda q: (q[0] - 2, q[1] + 1), 3)
            if math.isnan(exp):
                assert math.isnan(got)
            else:
                assert abs(got - exp) < 1e-12

    def test_monotone_in_epsilon(self):
        rng = np.random.default_rng(4)
        a = kpset(rng.uniform(0, 50, (20, 2)))
        b = kpset(rng.uniform(0, 50, (20, 2)))
        gt = GroundTruthMap.identity()
        vals = [evalbench.repeatability(a, b, gt, e)
                for e in (0.5, 1, 2, 3, 5, 10)]
        assert all(x <= y + 1e-12 for x, y in zip(vals, vals[1:]))


class TestMatchingCorrectness:
    @staticmethod
    def make_matches(residual_offsets):
        # keypoints in A at fixed spots; B displaced by given residuals
        a = kpset([[10.0 * (i + 1), 10.0] for i in range(len(residual_offsets))])
        b = kpset([[10.0 * (i + 1) + r, 10.0]
                   for i, r in enumerate(residual_offsets)])
        n = len(residual_offsets)
        matches = features.MatchSet(np.arange(n), np.arange(n), np.zeros(n))
        return matches, a, b

    def test_worked_two_thirds(self):
        matches, a, b = self.make_matches([1.0, 2.0, 5.0])
        m_c, residuals = evalbench.matching_correctness(
            matches, a, b, GroundTruthMap.identity(), 3)
        assert np.isclose(m_c, 2 / 3)
        assert np.allclose(sorted(residuals), [1, 2, 5])

    def test_exact_matches(self):
        matches, a, _ = self.make_matches([0.0, 0.0])
        m_c, _ = evalbench.matching_correctness(
            matches, a, a, GroundTruthMap.identity(), 3)
        assert m_c == 1.0

    def test_strict_inequality_at_epsilon(self):
        matches, a, b = self.make_matches([3.0])
        m_c, _ = evalbench.matching_correctness(
            matches, a, b, GroundTruthMap.identity(), 3)
        assert m_c == 0.0

    def test_no_matches_nan(self):
        empty = features.MatchSet(np.zeros(0), np.zeros(0), np.zeros(0))
        m_c, _ = evalbench.matching_correctness(
            empty, KeypointSet.empty(), KeypointSet.empty(),
            GroundTruthMap.identity(), 3)
        assert math.isnan(m_c)


class TestRmse:
    def test_worked_example(self):
        assert np.isclose(evalbench.rmse([3, 4]), np.sqrt(25 / 2))

    def test_zeros(self):
        assert evalbench.rmse([0, 0, 0]) == 0.0

    def test_singleton(self):
        assert evalbench.rmse([7.3]) == 7.3

    def test_order_invariant(self):
        rng = np.random.default_rng(5)
        r = rng.uniform(0, 10, 50)
        assert np.isclose(evalbench.rmse(r), evalbench.rmse(r[::-1]))

    def test_empty(self):
        with pytest.raises(EmptyInput):
            evalbench.rmse([])


class TestHomographyEstimation:
    @staticmethod
    def synth_matches(H, n, seed, noise=0.0, outliers=0):
        rng = np.random.default_rng(seed)
        pts_a = rng.uniform(20, 480, (n, 2))
        ones = np.ones((n, 1))
        proj = np.hstack([pts_a, ones]) @ H.T
        pts_b = proj[:, :2] / proj[:, 2:]
        if noise:
            pts_b += rng.normal(0, noise, pts_b.shape)
        if outliers:
            idx = rng.choice(n, outliers, replace=False)
            pts_b[idx] = rng.uniform(0, 500, (outliers, 2))
        a = KeypointSet(pts_a, np.ones(n))
        b = KeypointSet(pts_b, np.ones(n))
        matches = features.MatchSet(np.arange(n), np.arange(n), np.zeros(n))
        return matches, a, b

    def test_exact_scaling(self):
        H = np.diag([2.0, 2.0, 1.0])
        matches, a, b = self.synth_matches(H, 20, 6)
        est = evalbench.estimate_homography(matches, a, b)
        assert np.abs(est - H).max() < 1e-6

    def test_identity(self):
        matches, a, b = self.synth_matches(np.eye(3), 15, 7)
        est = evalbench.estimate_homography(matches, a, b)
        assert np.abs(est - np.eye(3)).max() < 1e-6

    def test_insufficient(self):
        matches, a, b = self.synth_matches(np.eye(3), 3, 8)
        with pytest.raises(InsufficientMatches):
            evalbench.estimate_homography(matches, a, b)

    def test_outlier_robustness(self):
        H = np.array([[1.2, 0.05, 10.0], [-0.03, 0.9, -5.0],
                      [1e-4, -5e-5, 1.0]])
        matches, a, b = self.synth_matches(H, 60, 9, outliers=18)
        est = evalbench.estimate_homography(matches, a, b, seed=1)
        assert np.abs(est - H).max() < 1e-4


class TestHomographyCorrectness:
    def test_equal_homographies(self):
        H = np.diag([1.5, 0.8, 1.0])
        assert evalbench.homography_correctness(H, H, 100, 100, 3)

    def test_translation_by_2_2_true(self):
        H_est = np.array([[1, 0, 2.0], [0, 1, 2.0], [0, 0, 1.0]])
        assert evalbench.homography_correctness(H_est, np.eye(3), 100, 100, 3)
        assert np.isclose(evalbench.corner_error(H_est, np.eye(3), 100, 100),
                          np.sqrt(8))

    def test_translation_by_4_0_false(self):
        H_est = np.array([[1, 0, 4.0], [0, 1, 0.0], [0, 0, 1.0]])
        assert not evalbench.homography_correctness(H_est, np.eye(3),
                                                    100, 100, 3)

    def test_translation_swap_symmetry(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            t = rng.uniform(-5, 5, 2)
            H = np.array([[1, 0, t[0]], [0, 1, t[1]], [0, 0, 1.0]])
            d1 = evalbench.homography_correctness(H, np.eye(3), 64, 64, 3)
            d2 = evalbench.homography_correctness(np.linalg.inv(H),
                                                  np.eye(3), 64, 64, 3)
            assert d1 == d2


class TestTestset:
    def test_illumination_pairs(self):
        imgs = [make_blocky_image(64, s) for s in range(5)]
        pairs = evalbench.make_testset(imgs, 3, "illumination")
        assert len(pairs) == 5
        for p in pairs:
            assert p.gt.kind == "identity"
            assert p.mask_a.all() and p.mask_b.all()
            assert 0.1 <= p.params["gamma"] <= 2.0

    def test_illumination_deterministic(self):
        imgs = [make_blocky_image(64, s) for s in range(3)]
        g1 = [p.params["gamma"]
              for p in evalbench.make_testset(imgs, 3, "illumination")]
        g2 = [p.params["gamma"]
              for p in evalbench.make_testset(imgs, 3, "illumination")]
        assert g1 == g2

    def test_viewpoint_identity_lut(self):
        m = camera.equidistant_model(64, 64)
        imgs = [make_blocky_image(64, 9)]
        luts = [warp.bake_field_pair(m, warp.RigidTransform.identity())]
        pairs = evalbench.make_testset(imgs, 0, "viewpoint", luts=luts,
                                       model=m)
        assert np.array_equal(pairs[0].img_a, pairs[0].img_b)
        assert pairs[0].mask_a.all() and pairs[0].mask_b.all()

    def test_save_load_roundtrip(self, tmp_path):
        m = camera.equidistant_model(64, 64)
        imgs = [make_blocky_image(64, s) for s in range(2)]
        luts = warp.bake_lut_set(m, 2, seed=44)
        pairs = evalbench.make_testset(imgs, 1, "viewpoint", luts=luts,
                                       model=m)
        evalbench.save_testset(pairs, tmp_path, model=m)
        loaded, model2 = evalbench.load_testset(tmp_path)
        assert model2 == m
        assert len(loaded) == 2
        assert np.array_equal(loaded[0].img_a, pairs[0].img_a)
        assert np.array_equal(loaded[0].mask_b, pairs[0].mask_b)
        assert loaded[0].gt.kind == "fisheye-warp"


class TestRunBenchmark:
    def test_identity_testset_degenerate(self):
        imgs = [make_blocky_image(96, s, n_blocks=20) for s in range(4)]
        pairs = [evalbench.TestPair(
            pair_id=i, img_a=img, img_b=img,
            gt=GroundTruthMap.identity(),
            mask_a=np.ones(img.shape, bool), mask_b=np.ones(img.shape, bool),
            condition="illumination") for i, img in enumerate(imgs)]
        cfg = EvalConfig(epsilon=3, k=100, nms_size=4)
        for algo in ("harris", "shi", "fast"):
            report = evalbench.run_benchmark(pairs, cfg, algorithm=algo)
            assert report.aggregates["repeatability"] == 1.0
            assert report.aggregates["m_c"] == 1.0
            assert report.aggregates["rmse"] == 0.0

    def test_internal_consistency(self):
        m = camera.equidistant_model(128, 128)
        imgs = [make_blocky_image(128, 50 + s, n_blocks=20) for s in range(3)]
        luts = warp.bake_lut_set(m, 3, seed=77, rot_range_deg=15,
                                 trans_range=0.15)
        pairs = evalbench.make_testset(imgs, 5, "viewpoint", luts=luts,
                                       model=m)
        cfg = EvalConfig(epsilon=3, k=300, nms_size=8)
        report = evalbench.run_benchmark(pairs, cfg, algorithm="harris")
        for r in report.pairs:
            assert 0 <= r.repeatability <= 1
            assert r.n_inliers <= r.n_matches <= cfg.k
            if r.n_matches:
                assert np.isclose(r.m_c, r.n_inliers / r.n_matches)

    def test_external_ingestion_schema(self, tmp_path):
        rng = np.random.default_rng(12)
        imgs = [make_blocky_image(64, 60)]
        pairs = evalbench.make_testset(imgs, 0, "illumination")
        kps = KeypointSet(rng.uniform(20, 44, (30, 2)), rng.uniform(0, 1, 30))
        desc = features.DescriptorSet(
            "binary", 256, rng.integers(0, 256, (30, 32), dtype=np.uint8))
        external = {0: ((kps, desc), (kps, desc))}
        cfg = EvalConfig(epsilon=3, k=30, nms_size=4)
        report = evalbench.run_benchmark(pairs, cfg, algorithm="external",
                                         external=external)
        assert report.aggregates["repeatability"] == 1.0
        assert report.aggregates["m_c"] == 1.0

    def test_report_files(self, tmp_path):
        imgs = [make_blocky_image(64, 61)]
        pairs = evalbench.make_testset(imgs, 0, "illumination")
        cfg = EvalConfig(epsilon=3, k=50, nms_size=4)
        report = evalbench.run_benchmark(pairs, cfg, algorithm="harris",
                                         estimate_h=True)
        report.to_csv(tmp_path / "report.csv", cfg)
        report.to_json(tmp_path / "report.json")
        header = (tmp_path / "report.csv").read_text().splitlines()[0]
        assert header == ("pair_id,condition,algorithm,nms,k,epsilon,"
                          "repeatability,n_matches,n_inliers,m_c,"
                          "h_correct,rmse_pair")

    def test_hpatches_homography_file(self, tmp_path):
        (tmp_path / "h.txt").write_text("2 0 0  0 2 0  0 0 1\n")
        H = evalbench.load_hpatches_homography(tmp_path / "h.txt")
        assert np.allclose(H, np.diag([2.0, 2.0, 1.0]))
