"""Tests for the loss module: fixed points, arithmetic, symmetry, gradients."""

import numpy as np
import pytest
import torch

import geolatent.losses as losses
import geolatent.nets as nets
from test_nets import tiny_config, random_rotation


def passthrough_model():
    """A tiny model whose output is exactly the background plate."""
    model = nets.build_model(config=tiny_config()).eval()
    model.fusion.set_passthrough()
    return model


def make_batch(rng, model, background=None):
    bg = background if background is not None else rng.random((8, 8, 3))
    return {
        "source": rng.random((2, 8, 8, 3)).astype(np.float32),
        "target": np.stack([bg, bg]).astype(np.float32),
        "donor": rng.random((2, 8, 8, 3)).astype(np.float32),
        "background": np.stack([bg, bg]).astype(np.float32),
        "rotation": np.stack([random_rotation(rng), random_rotation(rng)]).astype(np.float32),
        "subject": np.array([0, 0]),
    }


class TestLossReport:
    def test_decomposition_enforced(self):
        one = torch.ones(())
        with pytest.raises(ValueError):
            losses.LossReport(one, one, one, batch_size=2, feature_weight=2.0)
        rep = losses.LossReport(one, one, 3 * one, batch_size=2, feature_weight=2.0)
        assert rep.to_json()["total"] == 3.0

    def test_bad_batch_size(self):
        zero = torch.zeros(())
        with pytest.raises(ValueError):
            losses.LossReport(zero, zero, zero, batch_size=0)


class TestReconstructionLoss:
    def test_passthrough_background_is_zero(self):
        rng = np.random.default_rng(0)
        model = passthrough_model()
        batch = make_batch(rng, model)
        rep = losses.reconstruction_loss(batch, model)
        assert float(rep.pixel_term) == pytest.approx(0.0, abs=1e-10)
        assert float(rep.feature_term) == pytest.approx(0.0, abs=1e-10)
        assert float(rep.total) == pytest.approx(0.0, abs=1e-10)

    def test_uniform_offset_mse(self):
        rng = np.random.default_rng(1)
        model = passthrough_model()
        batch = make_batch(rng, model)
        batch["target"] = batch["background"] + 0.1
        rep = losses.reconstruction_loss(batch, model, feature_weight=0.0)
        assert float(rep.pixel_term) == pytest.approx(0.01, rel=1e-5)
        assert float(rep.total) == pytest.approx(0.01, rel=1e-5)

    def test_total_weighting(self):
        rng = np.random.default_rng(2)
        model = nets.build_model(config=tiny_config()).eval()
        batch = make_batch(rng, model)
        batch["target"] = rng.random((2, 8, 8, 3)).astype(np.float32)
        rep = losses.reconstruction_loss(batch, model, feature_weight=2.0)
        assert float(rep.total) == pytest.approx(
            float(rep.pixel_term) + 2.0 * float(rep.feature_term), rel=1e-6
        )
        assert rep.feature_weight == 2.0

    def test_order_invariance(self):
        rng = np.random.default_rng(3)
        model = nets.build_model(config=tiny_config()).eval()
        batch = make_batch(rng, model)
        flipped = {k: v[::-1].copy() for k, v in batch.items()}
        a = losses.reconstruction_loss(batch, model)
        b = losses.reconstruction_loss(flipped, model)
        assert float(a.total) == pytest.approx(float(b.total), rel=1e-6)

    def test_empty_batch_rejected(self):
        model = nets.build_model(config=tiny_config())
        with pytest.raises(ValueError):
            losses.reconstruction_loss([], model)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(4)
        model = nets.build_model(config=tiny_config()).double().eval()
        batch = make_batch(rng, model)

        def loss():
            return losses.reconstruction_loss(batch, model, feature_weight=2.0,
                                              feature_net=losses.default_feature_net(torch.float64)).total

        model.zero_grad()
        loss().backward()
        params = [p for p in model.parameters() if p.grad is not None]
        eps = 1e-6
        for _ in range(20):
            p = params[rng.integers(len(params))]
            idx = tuple(rng.integers(s) for s in p.shape)
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + eps
                hi = loss().item()
                p[idx] = orig - eps
                lo = loss().item()
                p[idx] = orig
            fd = (hi - lo) / (2 * eps)
            an = p.grad[idx].item()
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-3), (fd, an)


class TestPerceptualLoss:
    def test_zero_at_equality(self):
        img = torch.rand(1, 3, 8, 8)
        assert float(losses.perceptual_loss(img, img)) == 0.0

    def test_symmetry(self):
        torch.manual_seed(5)
        a, b = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
        assert float(losses.perceptual_loss(a, b)) == float(losses.perceptual_loss(b, a))

    def test_monotone_under_noise(self):
        torch.manual_seed(6)
        for _ in range(20):
            img = torch.rand(1, 3, 8, 8)
            noise = torch.randn_like(img)
            vals = [float(losses.perceptual_loss(img, img + eps * noise))
                    for eps in (0.01, 0.1, 0.5)]
            assert vals[0] < vals[1] < vals[2]

    def test_frozen_and_deterministic(self):
        net_a = losses.FrozenFeatureNet()
        net_b = losses.FrozenFeatureNet()
        for pa, pb in zip(net_a.parameters(), net_b.parameters()):
            assert torch.equal(pa, pb)
            assert not pa.requires_grad
        assert not net_a.train().training

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            losses.perceptual_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 4, 4))


class TestPoseLoss:
    def test_perfect_prediction_is_zero(self):
        model = nets.build_model(config=tiny_config()).eval()
        imgs = torch.rand(3, 3, 8, 8)
        with torch.no_grad():
            targets = model.pose_head(model.encode(imgs).geometry)
        val = losses.pose_loss(imgs, targets, model)
        assert float(val) == pytest.approx(0.0, abs=1e-6)

    def test_known_residual_norm(self):
        model = nets.build_model(config=tiny_config()).eval()
        with torch.no_grad():
            for p in model.pose_head.parameters():
                p.zero_()
        pose = torch.zeros(1, 3, 3)
        pose[0, 0, 0] = 5.0
        val = losses.pose_loss(torch.rand(1, 3, 8, 8), pose, model)
        assert float(val) == pytest.approx(5.0, abs=1e-6)

    def test_codes_variant_matches(self):
        model = nets.build_model(config=tiny_config()).eval()
        imgs = torch.rand(2, 3, 8, 8)
        poses = torch.randn(2, 3, 3)
        with torch.no_grad():
            geometry = model.encode(imgs).geometry
            a = losses.pose_loss(imgs, poses, model)
            b = losses.pose_loss_from_codes(geometry, poses, model.pose_head)
        assert float(a) == pytest.approx(float(b), rel=1e-6)

    def test_gradient_finite_difference(self):
        rng = np.random.default_rng(7)
        model = nets.build_model(config=tiny_config()).double().eval()
        head = model.pose_head
        geometry = torch.rand(2, 3, 4, dtype=torch.float64)
        poses = torch.randn(2, 3, 3, dtype=torch.float64)

        def loss():
            return losses.pose_loss_from_codes(geometry, poses, head)

        head.zero_grad()
        loss().backward()
        params = list(head.parameters())
        eps = 1e-6
        for _ in range(20):
            p = params[rng.integers(len(params))]
            idx = tuple(rng.integers(s) for s in p.shape)
            with torch.no_grad():
                orig = p[idx].item()
                p[idx] = orig + eps
                hi = loss().item()
                p[idx] = orig - eps
                lo = loss().item()
                p[idx] = orig
            fd = (hi - lo) / (2 * eps)
            an = p.grad[idx].item()
            assert abs(fd - an) <= 1e-4 * max(abs(fd), abs(an), 1e-3), (fd, an)

    def test_batch_size_mismatch(self):
        model = nets.build_model(config=tiny_config())
        with pytest.raises(ValueError):
            losses.pose_loss(torch.rand(2, 3, 8, 8), torch.zeros(3, 3, 3), model)
