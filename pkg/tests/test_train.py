import json

import numpy as np
import pytest
import torch

import snapkit.train as train_mod
from conftest import tiny_model
from snapkit.datagen import generate_corpus
from snapkit.model import load_checkpoint, predict
from snapkit.pcdata import SceneSample, SyntheticSceneConfig, generate_synthetic_scene
from snapkit.promptenc import PromptSet
from snapkit.train import (TrainConfig, TrainConfigError, _VocabCache, fit,
                           round_robin_batches, train_step)


def tiny_corpus(n_scenes=2, seed=0, domain="indoor", total=192):
    return generate_corpus(domain, n_scenes, seed, total_points=total,
                           n_objects_range=(3, 4), corpus_name=f"{domain}-t{seed}")


def tiny_cfg(**kw):
    defaults = dict(epochs=2, objects_per_scene=4, max_click_budget=3, seed=0)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestRoundRobin:
    def test_repetition_rule(self):
        small = [f"A{i}" for i in range(2)]
        large = [f"B{i}" for i in range(6)]
        out = list(round_robin_batches([small, large], seed=0))
        assert len(out) == 12
        assert sum(1 for s in out if s.startswith("A")) == 6
        assert sum(1 for s in out if s.startswith("B")) == 6
        assert all(s.startswith("A") for s in out[0::2])
        assert all(s.startswith("B") for s in out[1::2])

    def test_single_dataset_plain_shuffle(self):
        data = list(range(10))
        out = list(round_robin_batches([data], seed=1))
        assert sorted(out) == data
        assert out != data  # shuffled with overwhelming probability

    def test_deterministic(self):
        data = [list(range(5)), list(range(100, 104))]
        a = list(round_robin_batches(data, seed=3))
        b = list(round_robin_batches(data, seed=3))
        assert a == b

    def test_empty_dataset_rejected(self):
        with pytest.raises(TrainConfigError):
            list(round_robin_batches([[1], []], seed=0))


class TestTrainStep:
    def test_object_count_min_rule(self, monkeypatch):
        captured = {}
        real_predict = train_mod.predict

        def spy(model, scene, prompts, **kw):
            captured["m"] = prompts.n_objects
            return real_predict(model, scene, prompts, **kw)

        monkeypatch.setattr(train_mod, "predict", spy)
        model = tiny_model()
        scene = generate_synthetic_scene(
            SyntheticSceneConfig(seed=1, n_objects=5, total_points=200))
        cfg = tiny_cfg(objects_per_scene=32)
        opt = torch.optim.AdamW(model.parameters())
        report = train_step(model, scene, cfg, np.random.default_rng(0), opt,
                            _VocabCache(model.cfg.d_clip))
        assert captured["m"] == 5
        assert report.total > 0

    def test_scene_without_instances_skipped(self):
        model = tiny_model()
        n = 64
        scene = SceneSample(np.random.default_rng(0).normal(size=(n, 3)),
                            np.full(n, -1, np.int32), np.full(n, -1, np.int32),
                            "indoor", [], "bare")
        opt = torch.optim.AdamW(model.parameters())
        out = train_step(model, scene, tiny_cfg(), np.random.default_rng(0), opt,
                         _VocabCache(model.cfg.d_clip))
        assert out is None

    def test_loss_report_components(self):
        model = tiny_model()
        scene = generate_synthetic_scene(
            SyntheticSceneConfig(seed=2, n_objects=3, total_points=192))
        opt = torch.optim.AdamW(model.parameters())
        report = train_step(model, scene, tiny_cfg(), np.random.default_rng(1), opt,
                            _VocabCache(model.cfg.d_clip))
        for field in ("focal", "dice", "aux", "score", "text"):
            assert getattr(report, field) >= 0
        assert abs(report.total - (report.focal + report.dice + report.aux +
                                   report.score + report.text)) < 1e-9

    def test_grad_isolation_checked_each_step(self):
        model = tiny_model()
        scene = generate_synthetic_scene(
            SyntheticSceneConfig(seed=3, n_objects=3, total_points=192))
        cfg = tiny_cfg(check_grad_isolation=True)
        opt = torch.optim.AdamW(model.parameters())
        train_step(model, scene, cfg, np.random.default_rng(0), opt,
                   _VocabCache(model.cfg.d_clip))  # must not raise

    def test_loss_decreases_on_repeated_scene(self):
        model = tiny_model()
        scene = generate_synthetic_scene(
            SyntheticSceneConfig(seed=4, n_objects=3, total_points=192))
        cfg = tiny_cfg(max_click_budget=3)
        opt = torch.optim.AdamW(model.parameters(), lr=1e-3)
        rng = np.random.default_rng(0)
        cache = _VocabCache(model.cfg.d_clip)
        losses = [train_step(model, scene, cfg, rng, opt, cache).total
                  for _ in range(50)]
        assert np.mean(losses[-10:]) < np.mean(losses[:10])


class TestFit:
    def test_artifacts_and_determinism(self, tmp_path):
        datasets = [tiny_corpus(2, seed=5)]

        def run(out):
            model = tiny_model(seed=7)
            return fit(model, datasets, tiny_cfg(epochs=2, seed=9), out)

        ckpt_a, reports_a = run(tmp_path / "a")
        ckpt_b, reports_b = run(tmp_path / "b")
        assert [r.to_dict() for r in reports_a] == [r.to_dict() for r in reports_b]
        assert ckpt_a.exists()
        log_lines = (tmp_path / "a" / "train_log.jsonl").read_text().splitlines()
        assert len(log_lines) == len(reports_a)
        assert json.loads(log_lines[0])["epoch"] == 0

    def test_checkpoint_round_trip_inference(self, tmp_path):
        datasets = [tiny_corpus(2, seed=6)]
        model = tiny_model(seed=1)
        ckpt, _ = fit(model, datasets, tiny_cfg(epochs=1), tmp_path)
        restored = load_checkpoint(ckpt)
        scene = datasets[0][0]
        prompts = PromptSet([scene.positions[:1]])
        model.eval()
        a = predict(model, scene, prompts)
        b = predict(restored, scene, prompts)
        assert torch.equal(a.mask_logits, b.mask_logits)

    def test_domain_mode_updates_only_active_domain_stats(self, tmp_path):
        model = tiny_model()
        scene = tiny_corpus(1, seed=8)[0]  # indoor
        before = {
            name: buf.clone()
            for name, buf in model.backbone.named_buffers()
        }
        opt = torch.optim.AdamW(model.parameters())
        train_step(model, scene, tiny_cfg(), np.random.default_rng(0), opt,
                   _VocabCache(model.cfg.d_clip))
        changed, unchanged = [], []
        for name, buf in model.backbone.named_buffers():
            same = torch.equal(buf, before[name])
            if ".keys.indoor." in name:
                changed.append((name, same))
            else:
                unchanged.append((name, same))
        assert all(not same for _, same in changed)
        assert all(same for _, same in unchanged)

    def test_dataset_norm_mode_trains(self, tmp_path):
        a = tiny_corpus(2, seed=10, domain="indoor")
        b = tiny_corpus(2, seed=11, domain="outdoor")
        names = tuple(s.scene_id.split("/")[0] for s in (a[0], b[0]))
        model = tiny_model(norm_mode="dataset", dataset_names=names)
        cfg = tiny_cfg(epochs=1, norm_mode="dataset")
        ckpt, reports = fit(model, [a, b], cfg, tmp_path)
        assert len(reports) == 4
