import numpy as np
import pytest

from geolatent import geometry as geo
from geolatent import metrics as mx


def random_pose(rng, k=16):
    return rng.normal(scale=300.0, size=(k, 3))


def random_similarity(rng):
    return geo.SimilarityTransform(
        scale=float(rng.uniform(0.2, 4.0)),
        rotation=geo.rotation_from_euler(*rng.uniform(-np.pi, np.pi, 3)),
        translation=rng.uniform(-500, 500, size=3),
    )


class TestCentering:
    def test_centered_pose_unchanged(self):
        rng = np.random.default_rng(0)
        pose = random_pose(rng)
        pose -= pose[0]
        assert np.allclose(mx.center_at_pelvis(pose), pose)

    def test_translation_invariance(self):
        rng = np.random.default_rng(1)
        pose = random_pose(rng)
        shifted = pose + np.array([5.0, -3.0, 11.0])
        assert np.allclose(mx.center_at_pelvis(shifted), mx.center_at_pelvis(pose))

    def test_root_at_origin(self):
        pose = random_pose(np.random.default_rng(2))
        assert np.allclose(mx.center_at_pelvis(pose)[0], 0.0)


class TestMpjpe:
    def test_zero_for_exact(self):
        pose = random_pose(np.random.default_rng(3))
        assert mx.mpjpe(pose, pose) == 0.0

    def test_single_joint_displacement(self):
        pose = random_pose(np.random.default_rng(4))
        pred = pose.copy()
        pred[5] += np.array([32.0, 0.0, 0.0])
        assert mx.mpjpe(pred, pose) == pytest.approx(2.0)

    def test_uniform_translation_removed(self):
        pose = random_pose(np.random.default_rng(5))
        assert mx.mpjpe(pose + 17.0, pose) == pytest.approx(0.0, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mx.mpjpe(np.zeros((16, 3)), np.zeros((15, 3)))


class TestNMpjpe:
    def test_scale_recovery(self):
        pose = random_pose(np.random.default_rng(6))
        assert mx.n_mpjpe(2.0 * pose, pose) == pytest.approx(0.0, abs=1e-9)

    def test_exact_prediction(self):
        pose = random_pose(np.random.default_rng(7))
        assert mx.n_mpjpe(pose, pose) == 0.0

    def test_matches_golden_section_oracle(self):
        from scipy.optimize import minimize_scalar

        rng = np.random.default_rng(8)
        for _ in range(20):
            pred, gt = random_pose(rng), random_pose(rng)
            got = mx.n_mpjpe(pred, gt)
            p = mx.center_at_pelvis(pred)
            q = mx.center_at_pelvis(gt)

            def err(s):
                return float(np.mean(np.linalg.norm(s * p - q, axis=-1)))

            res = minimize_scalar(err, bounds=(0.0, 100.0), method="bounded",
                                  options={"xatol": 1e-12})
            assert got == pytest.approx(err(res.x), abs=1e-6)

    def test_degenerate_flagged(self):
        gt = random_pose(np.random.default_rng(9))
        with pytest.warns(UserWarning):
            val = mx.n_mpjpe(np.zeros_like(gt), gt)
        q = mx.center_at_pelvis(gt)
        assert val == pytest.approx(float(np.mean(np.linalg.norm(q, axis=-1))))


class TestPMpjpe:
    def test_similarity_invariance(self):
        rng = np.random.default_rng(10)
        for _ in range(50):
            gt = random_pose(rng)
            pred = random_similarity(rng).apply(gt)
            assert mx.p_mpjpe(pred, gt) < 1e-6

    def test_mirror_not_absorbed(self):
        rng = np.random.default_rng(11)
        gt = random_pose(rng)
        mirrored = gt * np.array([-1.0, 1.0, 1.0])
        assert mx.p_mpjpe(mirrored, gt) > 1.0

    def test_nesting_property(self):
        rng = np.random.default_rng(12)
        for _ in range(200):
            pred, gt = random_pose(rng), random_pose(rng)
            p = mx.p_mpjpe(pred, gt)
            n = mx.n_mpjpe(pred, gt)
            m = mx.mpjpe(pred, gt)
            assert p <= n + 1e-9
            assert n <= m + 1e-9


class TestReport:
    def test_aggregate_is_mean_of_samples(self):
        rng = np.random.default_rng(13)
        pairs = [(random_pose(rng), random_pose(rng)) for _ in range(20)]
        report = mx.report_from_pairs(pairs)
        assert report.mpjpe == pytest.approx(
            np.mean([mx.mpjpe(a, b) for a, b in pairs]), abs=1e-9
        )
        assert report.sample_count == 20

    def test_order_invariance(self):
        rng = np.random.default_rng(14)
        pairs = [(random_pose(rng), random_pose(rng)) for _ in range(10)]
        a = mx.report_from_pairs(pairs)
        b = mx.report_from_pairs(list(reversed(pairs)))
        assert a.mpjpe == pytest.approx(b.mpjpe, abs=1e-12)
        assert a.p_mpjpe == pytest.approx(b.p_mpjpe, abs=1e-12)

    def test_json_round_trip(self):
        rng = np.random.default_rng(15)
        pairs = [(random_pose(rng), random_pose(rng)) for _ in range(4)]
        report = mx.report_from_pairs(pairs)
        back = mx.MetricReport.from_json(report.to_json())
        assert back.mpjpe == report.mpjpe
        assert np.allclose(back.per_joint, report.per_joint)

    def test_perfect_predictions(self):
        rng = np.random.default_rng(16)
        pairs = [(p, p) for p in (random_pose(rng) for _ in range(5))]
        report = mx.report_from_pairs(pairs)
        assert report.mpjpe == 0.0
        assert report.p_mpjpe == 0.0
