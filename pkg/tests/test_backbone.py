import numpy as np
import pytest
import torch

from conftest import tiny_model
from snapkit.backbone import (BATCH_NORM_KEY, DegenerateBatchError, DomainNorm,
                              EncoderConfig, domain_norm, encode_point_cloud,
                              norm_key_for)
from snapkit.pcdata import DomainId, SceneSample, SyntheticSceneConfig, \
    generate_synthetic_scene


def make_scene(seed=0, n_objects=4, total=256, domain="indoor"):
    return generate_synthetic_scene(SyntheticSceneConfig(
        seed=seed, domain=domain, n_objects=n_objects, total_points=total))


DOMAINS = [d.value for d in DomainId]


class TestDomainNorm:
    def test_identity_parameters_inference(self):
        norm = DomainNorm(8, DOMAINS)
        norm.eval()
        x = torch.randn(32, 8)
        out = norm(x, "indoor")  # running stats (0, 1), gamma 1, beta 0
        assert torch.allclose(out, x, atol=1e-4)

    def test_constant_column_training(self):
        norm = DomainNorm(4, DOMAINS)
        norm.train()
        x = torch.ones(16, 4) * 3.5
        out = norm(x, "outdoor")
        assert torch.allclose(out, torch.zeros_like(x), atol=1e-6)

    def test_training_normalizes_by_batch_stats(self):
        norm = DomainNorm(4, DOMAINS)
        norm.train()
        x = torch.randn(512, 4) * 5 + 2
        out = norm(x, "aerial")
        assert abs(out.mean().item()) < 1e-5
        assert abs(out.var(unbiased=False).item() - 1.0) < 1e-2

    def test_degenerate_batch(self):
        norm = DomainNorm(4, DOMAINS)
        norm.train()
        with pytest.raises(DegenerateBatchError):
            norm(torch.randn(1, 4), "indoor")

    def test_other_domain_state_untouched(self):
        norm = DomainNorm(4, DOMAINS)
        norm.train()
        snapshot = {k: (p.running_mean.clone(), p.running_var.clone(),
                        p.gamma.clone(), p.beta.clone())
                    for k, p in norm.keys.items()}
        norm(torch.randn(64, 4) * 3 + 1, "indoor")
        norm(torch.randn(64, 4) * 30 + 10, "outdoor")
        for key in ("aerial",):
            rm, rv, g, b = snapshot[key]
            p = norm.keys[key]
            assert torch.equal(p.running_mean, rm) and torch.equal(p.running_var, rv)
            assert torch.equal(p.gamma, g) and torch.equal(p.beta, b)
        # indoor stats not affected by the later outdoor pass
        after_indoor = norm.keys["indoor"].running_mean.clone()
        norm(torch.randn(64, 4) * 100, "outdoor")
        assert torch.equal(norm.keys["indoor"].running_mean, after_indoor)

    def test_running_stats_update_rule(self):
        norm = DomainNorm(2, DOMAINS, momentum=0.1)
        norm.train()
        x = torch.tensor([[1.0, 0.0], [3.0, 0.0]])
        norm(x, "indoor")
        p = norm.keys["indoor"]
        #mean 2, biased var 1 -> running = 0.9*prev + 0.1*batch
        assert torch.allclose(p.running_mean, torch.tensor([0.2, 0.0]))
        assert torch.allclose(p.running_var, torch.tensor([1.0, 0.9]))

    def test_gradient_isolation_exact(self):
        norm = DomainNorm(4, DOMAINS)
        norm.train()
        out = norm(torch.randn(16, 4), "indoor")
        out.sum().backward()
        assert norm.keys["indoor"].gamma.grad is not None
        for other in ("outdoor", "aerial"):
            for p in (norm.keys[other].gamma, norm.keys[other].beta):
                assert p.grad is None or bool((p.grad == 0).all())

    def test_functional_wrapper_restores_mode(self):
        norm = DomainNorm(4, DOMAINS)
        norm.eval()
        domain_norm(torch.randn(8, 4), DomainId.INDOOR, norm, training=True)
        assert not norm.training


class TestEncoderConfig:
    def test_head_divisibility(self):
        with pytest.raises(ValueError):
            EncoderConfig(embed_dim=30, n_heads=4)

    def test_voxel_sizes_increasing(self):
        with pytest.raises(ValueError):
            EncoderConfig(voxel_sizes={"indoor": (0.4, 0.2, 0.8),
                                       "outdoor": (1, 2, 3), "aerial": (1, 2, 3)})

    def test_norm_keys(self):
        assert EncoderConfig(norm_mode="batch").norm_keys() == [BATCH_NORM_KEY]
        assert set(EncoderConfig(norm_mode="domain").norm_keys()) == set(DOMAINS)
        cfg = EncoderConfig(norm_mode="dataset", dataset_names=("a", "b"))
        assert cfg.norm_keys() == ["a", "b"]
        with pytest.raises(ValueError):
            EncoderConfig(norm_mode="dataset").norm_keys()

    def test_norm_key_routing(self):
        scene = make_scene()
        assert norm_key_for(EncoderConfig(norm_mode="domain"), scene) == "indoor"
        assert norm_key_for(EncoderConfig(norm_mode="batch"), scene) == BATCH_NORM_KEY
        cfg = EncoderConfig(norm_mode="dataset", dataset_names=("indoor-synth",))
        assert norm_key_for(cfg, scene) == scene.scene_id.split("/")[0]

    def test_round_trip_dict(self):
        cfg = EncoderConfig(embed_dim=32, n_stages=2,
                            voxel_sizes={"indoor": (0.1, 0.2), "outdoor": (1, 2),
                                         "aerial": (1, 2)},
                            n_attention_blocks=(1, 1))
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg


class TestPointEncoder:
    def encoder(self):
        return tiny_model().backbone

    def test_single_point_inference(self):
        enc = self.encoder()
        scene = SceneSample(np.array([[1.0, 2.0, 3.0]], np.float32),
                            np.array([-1], np.int32), np.array([-1], np.int32),
                            "indoor", [], "single")
        with torch.no_grad():
            f = encode_point_cloud(scene, enc)
        assert f.shape == (1, enc.cfg.embed_dim)
        assert torch.isfinite(f).all()

    def test_deterministic_inference(self):
        enc = self.encoder()
        scene = make_scene()
        with torch.no_grad():
            a = encode_point_cloud(scene, enc)
            b = encode_point_cloud(scene, enc)
        assert torch.equal(a, b)

    def test_permutation_equivariance(self):
        enc = self.encoder()
        scene = make_scene(seed=5)
        perm = np.random.default_rng(0).permutation(scene.n_points)
        permuted = SceneSample(scene.positions[perm], scene.instance_ids[perm],
                               scene.class_ids[perm], scene.domain,
                               scene.class_names, scene.scene_id)
        with torch.no_grad():
            a = encode_point_cloud(scene, enc)
            b = encode_point_cloud(permuted, enc)
        assert torch.equal(b, a[torch.from_numpy(perm)])

    def test_finite_across_random_scenes(self):
        enc = self.encoder()
        for seed in range(1000):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(1, 64))
            scene = SceneSample(rng.uniform(-5, 5, (n, 3)).astype(np.float32),
                                np.full(n, -1, np.int32), np.full(n, -1, np.int32),
                                rng.choice(DOMAINS), [], f"r{seed}")
            with torch.no_grad():
                f = encode_point_cloud(scene, enc)
            assert torch.isfinite(f).all()

    def test_domain_parameters_change_output(self):
        enc = self.encoder()
        scene = make_scene(seed=2)
        with torch.no_grad():
            indoor = encode_point_cloud(scene, enc, norm_key="indoor")
            # emulate divergent training: shift the outdoor parameters
            for module in enc.modules():
                if isinstance(module, DomainNorm):
                    module.keys["outdoor"].beta.add_(0.5)
            outdoor = encode_point_cloud(scene, enc, norm_key="outdoor")
        assert not torch.allclose(indoor, outdoor)

    def test_training_gradient_isolation_end_to_end(self):
        model = tiny_model()
        scene = make_scene(seed=3, domain="indoor")
        f = encode_point_cloud(scene, model.backbone, training=True)
        f.square().mean().backward()
        leaked = []
        for name, p in model.backbone.named_parameters():
            if ".keys." in name and ".keys.indoor." not in name:
                if p.grad is not None and bool((p.grad != 0).any()):
                    leaked.append(name)
        assert leaked == []
