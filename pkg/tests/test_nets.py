"""Tests for the network module: shapes, algebra, gradients, serialization."""

import numpy as np
import pytest
import torch

import geolatent.geometry as geo
import geolatent.nets as nets


def tiny_config(variant="unet_style"):
    return nets.ArchitectureConfig(
        variant=variant, image_size=8, num_points=4, appearance_dim=2,
        base_channels=2, head_hidden=8, num_joints=3, seed=0,
    )


def random_rotation(rng):
    return geo.rotation_from_euler(
        rng.uniform(-np.pi, np.pi), rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)
    )


class TestArchitectureConfig:
    def test_reference_dimensions(self):
        cfg = nets.ArchitectureConfig(image_size=128)
        assert (cfg.top_channels, cfg.feature_size) == (256, 16)
        assert (cfg.num_points, cfg.appearance_dim) == (200, 128)
        assert cfg.head_hidden == 2048

    def test_desk_scale_dimensions(self):
        cfg = nets.ArchitectureConfig(image_size=64)
        assert (cfg.top_channels, cfg.feature_size) == (128, 8)
        assert (cfg.num_points, cfg.appearance_dim) == (100, 64)
        assert cfg.head_hidden == 256

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            nets.ArchitectureConfig(variant="transformer")

    def test_bad_size(self):
        with pytest.raises(ValueError):
            nets.ArchitectureConfig(image_size=60)

    def test_json_round_trip(self):
        cfg = tiny_config()
        assert nets.ArchitectureConfig.from_json(cfg.to_json()) == cfg


class TestEncoderShapes:
    def test_reference_feature_map(self):
        cfg = nets.ArchitectureConfig(image_size=128)
        enc = nets.Encoder(cfg)
        with torch.no_grad():
            h = enc.features(torch.zeros(1, 3, 128, 128))
        assert tuple(h.shape) == (1, 256, 16, 16)

    def test_desk_feature_map(self):
        cfg = nets.ArchitectureConfig(image_size=64)
        enc = nets.Encoder(cfg)
        with torch.no_grad():
            h = enc.features(torch.zeros(1, 3, 64, 64))
        assert tuple(h.shape) == (1, 128, 8, 8)

    def test_encode_shapes_and_size_check(self):
        model = nets.build_model(config=tiny_config())
        code = model.encode(torch.rand(2, 3, 8, 8))
        assert tuple(code.geometry.shape) == (2, 3, 4)
        assert tuple(code.appearance.shape) == (2, 2)
        with pytest.raises(ValueError):
            model.encode(torch.rand(2, 3, 16, 16))

    def test_eval_mode_deterministic(self):
        model = nets.build_model(config=tiny_config()).eval()
        img = torch.rand(1, 3, 8, 8)
        with torch.no_grad():
            a = model.encode(img)
            b = model.encode(img)
        assert torch.equal(a.geometry, b.geometry)
        assert torch.equal(a.appearance, b.appearance)

    def test_train_mode_dropout_varies(self):
        model = nets.build_model(config=tiny_config()).train()
        img = torch.rand(2, 3, 8, 8)
        torch.manual_seed(0)
        with torch.no_grad():
            outs = [model.encode(img).geometry for _ in range(4)]
        assert any(not torch.equal(outs[0], o) for o in outs[1:])


class TestRotateLatent:
    def test_identity(self):
        code = nets.LatentCode(torch.rand(2, 3, 5), torch.rand(2, 4))
        out = nets.rotate_latent(code, np.eye(3))
        assert torch.allclose(out.geometry, code.geometry)
        assert torch.equal(out.appearance, code.appearance)

    def test_composition_and_isometry(self):
        rng = np.random.default_rng(1)
        code = nets.LatentCode(torch.rand(1, 3, 8, dtype=torch.float64), torch.rand(1, 2, dtype=torch.float64))
        for _ in range(20):
            r1, r2 = random_rotation(rng), random_rotation(rng)
            once = nets.rotate_latent(nets.rotate_latent(code, r1), r2)
            combined = nets.rotate_latent(code, r2 @ r1)
            assert torch.allclose(once.geometry, combined.geometry, atol=1e-6)
            norms_before = code.geometry.norm(dim=1)
            norms_after = once.geometry.norm(dim=1)
            assert torch.allclose(norms_before, norms_after, atol=1e-6)

    def test_bad_rotation_shape(self):
        code = nets.LatentCode(torch.rand(2, 3, 5), torch.rand(2, 4))
        with pytest.raises(ValueError):
            nets.rotate_latent(code, np.eye(4))


class TestDecoder:
    def test_output_shape(self):
        model = nets.build_model(config=tiny_config()).eval()
        out = model.decode(torch.rand(2, 3, 4), torch.rand(2, 2), torch.rand(2, 3, 8, 8))
        assert tuple(out.shape) == (2, 3, 8, 8)

    def test_appearance_sensitivity(self):
        model = nets.build_model(config=tiny_config()).eval()
        geom, bg = torch.rand(1, 3, 4), torch.rand(1, 3, 8, 8)
        with torch.no_grad():
            a = model.decode(geom, torch.full((1, 2), 0.1), bg)
            b = model.decode(geom, torch.full((1, 2), 2.0), bg)
        assert (a - b).abs().mean() > 0

    def test_background_sensitivity(self):
        model = nets.build_model(config=tiny_config()).eval()
        geom, app = torch.rand(1, 3, 4), torch.rand(1, 2)
        with torch.no_grad():
            a = model.decode(geom, app, torch.zeros(1, 3, 8, 8))
            b = model.decode(geom, app, torch.ones(1, 3, 8, 8))
        assert (a - b).abs().mean() > 0

    def test_background_size_check(self):
        model = nets.build_model(config=tiny_config())
        with pytest.raises(ValueError):
            model.decode(torch.rand(1, 3, 4), torch.rand(1, 2), torch.rand(1, 3, 4, 4))


class TestBackgroundFusion:
    def test_passthrough_weights(self):
        fusion = nets.BackgroundFusion()
        fusion.set_passthrough()
        fg, bg = torch.rand(2, 3, 8, 8), torch.rand(2, 3, 8, 8)
        with torch.no_grad():
            out = fusion(fg, bg)
        assert torch.equal(out, bg)

    def test_perturbation_locality(self):
        torch.manual_seed(2)
        fusion = nets.BackgroundFusion()
        fg, bg = torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8)
        with torch.no_grad():
            base = fusion(fg, bg)
            bg2 = bg.clone()
            bg2[0, 1, 5, 3] += 1.0
            diff = (fusion(fg, bg2) - base).abs().sum(dim=1)[0]
        hot = diff > 1e-9
        assert hot[5, 3]
        assert hot.sum() == 1

    def test_weight_gradient_finite_difference(self):
        torch.manual_seed(3)
        fusion = nets.BackgroundFusion().double()
        fg = torch.rand(1, 3, 4, 4, dtype=torch.float64)
        bg = torch.rand(1, 3, 4, 4, dtype=torch.float64)
        target = torch.rand(1, 3, 4, 4, dtype=torch.float64)

        def loss():
            return ((fusion(fg, bg) - target) ** 2).mean()

        loss().backward()
        eps = 1e-6
        rng = np.random.default_rng(4)
        params = list(fusion.parameters())
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
            assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd))


class TestPoseHead:
    def test_shape_and_determinism(self):
        model = nets.build_model(config=tiny_config()).eval()
        geom = torch.rand(3, 3, 4)
        with torch.no_grad():
            a = model.regress_pose(geom)
            b = model.regress_pose(geom)
        assert tuple(a.shape) == (3, 3, 3)
        assert torch.equal(a, b)

    def test_zero_weights_zero_pose(self):
        head = nets.PoseHead(tiny_config())
        with torch.no_grad():
            for p in head.parameters():
                p.zero_()
            out = head(torch.rand(2, 3, 4))
        assert torch.equal(out, torch.zeros(2, 3, 3))

    def test_shallow_head_fewer_params(self):
        deep = nets.PoseHead(tiny_config())
        cfg = nets.ArchitectureConfig(
            variant="unet_style", image_size=8, num_points=4, appearance_dim=2,
            base_channels=2, head_hidden=8, num_joints=3, head_layers=1,
        )
        shallow = nets.PoseHead(cfg)
        count = lambda m: sum(p.numel() for p in m.parameters())
        assert count(shallow) < count(deep)


class TestVariants:
    def test_deep_residual_feature_map(self):
        cfg = nets.ArchitectureConfig(variant="deep_residual", image_size=64)
        enc = nets.Encoder(cfg)
        with torch.no_grad():
            h = enc.features(torch.zeros(1, 3, 64, 64))
        assert tuple(h.shape) == (1, 128, 8, 8)

    def test_no3d_requires_rotation(self):
        model = nets.build_model("no3d_baseline", config=tiny_config("no3d_baseline")).eval()
        geom, app, bg = torch.rand(1, 3, 4), torch.rand(1, 2), torch.rand(1, 3, 8, 8)
        with pytest.raises(ValueError):
            model.decode(geom, app, bg)
        out = model.decode(geom, app, bg, rotation=np.eye(3))
        assert tuple(out.shape) == (1, 3, 8, 8)

    def test_3d_variant_rejects_rotation_conditioning(self):
        model = nets.build_model(config=tiny_config()).eval()
        with pytest.raises(ValueError):
            model.decode(torch.rand(1, 3, 4), torch.rand(1, 2),
                         torch.rand(1, 3, 8, 8), rotation=np.eye(3))

    def test_no3d_graph_has_no_latent_rotation(self, monkeypatch):
        model = nets.build_model("no3d_baseline", config=tiny_config("no3d_baseline")).eval()

        def forbidden(*args, **kwargs):
            raise AssertionError("rotate_latent used in the flat-latent baseline")

        monkeypatch.setattr(nets, "rotate_latent", forbidden)
        rng = np.random.default_rng(5)
        src, donor, bg = (torch.rand(1, 3, 8, 8) for _ in range(3))
        with torch.no_grad():
            out = model.reconstruct(src, random_rotation(rng), donor, bg)
        assert tuple(out.shape) == (1, 3, 8, 8)

    def test_no3d_rotation_changes_output(self):
        model = nets.build_model("no3d_baseline", config=tiny_config("no3d_baseline")).eval()
        rng = np.random.default_rng(6)
        src, donor, bg = (torch.rand(1, 3, 8, 8) for _ in range(3))
        with torch.no_grad():
            a = model.reconstruct(src, np.eye(3), donor, bg)
            b = model.reconstruct(src, random_rotation(rng), donor, bg)
        assert (a - b).abs().mean() > 0


class TestGradients:
    def run_check(self, variant, num_params, seed):
        cfg = tiny_config(variant)
        model = nets.build_model(variant, config=cfg).double().eval()
        rng = np.random.default_rng(seed)
        src = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        donor = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        bg = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        target = torch.rand(1, 3, 8, 8, dtype=torch.float64)
        rot = random_rotation(rng)

        def loss():
            out = model.reconstruct(src, rot, donor, bg)
            pose = model.regress_pose(model.encode(src).geometry)
            return ((out - target) ** 2).mean() + pose.square().mean()

        model.zero_grad()
        loss().backward()
        params = [p for p in model.parameters() if p.grad is not None]
        eps = 1e-6
        checked = 0
        while checked < num_params:
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
            scale = max(abs(fd), abs(an), 1e-3)
            assert abs(fd - an) <= 1e-4 * scale, (fd, an)
            checked += 1

    def test_unet_parameter_gradients(self):
        self.run_check("unet_style", 200, seed=7)

    def test_no3d_parameter_gradients(self):
        self.run_check("no3d_baseline", 40, seed=8)


class TestSerialization:
    def test_bitwise_round_trip(self, tmp_path):
        model = nets.build_model(config=tiny_config()).eval()
        img = torch.rand(2, 3, 8, 8)
        bg = torch.rand(2, 3, 8, 8)
        with torch.no_grad():
            before = model.reconstruct(img, np.eye(3), img, bg)
        nets.save_model(model, str(tmp_path / "ckpt"))
        loaded = nets.load_model(str(tmp_path / "ckpt")).eval()
        with torch.no_grad():
            after = loaded.reconstruct(img, np.eye(3), img, bg)
        assert torch.equal(before, after)

    def test_same_seed_same_weights(self):
        a = nets.build_model(config=tiny_config())
        b = nets.build_model(config=tiny_config())
        for (ka, pa), (kb, pb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            assert torch.equal(pa, pb)

    def test_different_seed_different_weights(self):
        cfg2 = nets.ArchitectureConfig(
            variant="unet_style", image_size=8, num_points=4, appearance_dim=2,
            base_channels=2, head_hidden=8, num_joints=3, seed=1,
        )
        a = nets.build_model(config=tiny_config())
        b = nets.build_model(config=cfg2)
        assert not torch.equal(a.encoder.latent_fc.weight, b.encoder.latent_fc.weight)


class TestCodeStandardization:
    def test_none_stats_pass_through(self):
        geom = torch.randn(3, 3, 4)
        out = nets.standardize_codes(geom, object())
        assert torch.equal(out, geom)

    def test_whitening_round_trip(self):
        class Stats:
            code_mean = np.arange(12, dtype=np.float64)
            code_std = np.linspace(0.5, 3.0, 12)

        geom = torch.randn(5, 3, 4, dtype=torch.float64)
        out = nets.standardize_codes(geom, Stats())
        flat = geom.flatten(1)
        expect = (flat - torch.tensor(Stats.code_mean)) / torch.tensor(Stats.code_std)
        assert torch.allclose(out.flatten(1), expect)
        assert out.shape == geom.shape


class TestImageConversion:
    def test_round_trip(self):
        rng = np.random.default_rng(9)
        imgs = rng.random((2, 8, 8, 3)).astype(np.float32)
        back = nets.to_image(nets.to_tensor(imgs))
        assert np.array_equal(imgs, back)
