import numpy as np
import pytest
import torch

import snapkit.autoprompt as ap
import snapkit.model as model_mod
from oracles import nms_reference
from snapkit.autoprompt import (AutoPromptConfig, generate_auto_masks, nms,
                                nms_keep_indices, uniform_grid_prompt_count)
from snapkit.geometry import voxel_downsample
from snapkit.pcdata import SyntheticSceneConfig, generate_synthetic_scene


def mask_from(indices, n):
    m = np.zeros(n, dtype=bool)
    m[list(indices)] = True
    return m


class TestNms:
    def test_identical_masks_keep_best(self):
        n = 10
        masks = [mask_from({1, 2, 3}, n), mask_from({1, 2, 3}, n)]
        kept_masks, kept_scores, _ = nms(masks, [0.9, 0.8], [None, None], 0.6)
        assert len(kept_masks) == 1
        assert kept_scores == [0.9]

    def test_disjoint_all_survive(self):
        n = 12
        masks = [mask_from({0, 1}, n), mask_from({4, 5}, n), mask_from({8, 9}, n)]
        kept, scores, _ = nms(masks, [0.3, 0.9, 0.6], [None] * 3, 0.5)
        assert len(kept) == 3
        assert scores == [0.9, 0.6, 0.3]  # keep order = score order

    def test_score_tie_lower_index_first(self):
        n = 6
        masks = [mask_from({0, 1}, n), mask_from({0, 1}, n)]
        kept = nms_keep_indices(masks, [0.5, 0.5], 0.4)
        assert kept == [0]

    def test_matches_reference_on_random_sets(self):
        rng = np.random.default_rng(0)
        for _ in range(25):
            n = 40
            masks = [rng.uniform(size=n) > 0.6 for _ in range(20)]
            scores = rng.uniform(size=20).tolist()
            tau = float(rng.uniform(0.2, 0.8))
            assert nms_keep_indices(masks, scores, tau) == \
                nms_reference(masks, scores, tau)

    def test_pairwise_iou_bounded_after_nms(self):
        rng = np.random.default_rng(1)
        n = 30
        masks = [rng.uniform(size=n) > 0.5 for _ in range(15)]
        scores = rng.uniform(size=15).tolist()
        tau = 0.55
        kept, _, _ = nms(masks, scores, [None] * 15, tau)
        from snapkit.metrics import mask_iou
        for i in range(len(kept)):
            for j in range(i + 1, len(kept)):
                assert mask_iou(kept[i], kept[j]) <= tau


class _OracleModel:
    """Stands in for a trained model: a 1-click prompt returns the clicked
    point's ground-truth instance with a confident score."""

    class _Cfg:
        d_clip = 32

    cfg = _Cfg()

    def __init__(self, scene, score=0.9):
        self.scene = scene
        self.score = score


def _oracle_encode(model, scene, domain=None):
    return {"scene": scene}


def _oracle_predict(model, enc, prompts, training=False):
    scene = model.scene
    n = scene.n_points
    masks, scores = [], []
    for clicks in prompts.objects:
        d = np.linalg.norm(scene.positions - clicks[0], axis=1)
        inst = scene.instance_ids[np.argmin(d)]
        mask = scene.instance_ids == inst if inst >= 0 else np.zeros(n, bool)
        masks.append(torch.from_numpy(mask.astype(np.float32)))
        scores.append(model.score if inst >= 0 else 0.0)
    from snapkit.maskdec import MaskPrediction
    logits = torch.stack(masks) * 40.0 - 20.0
    m = len(prompts.objects)
    return MaskPrediction(
        mask_logits=logits, mask_probs=torch.sigmoid(logits),
        score=torch.tensor(scores),
        clip_embedding=torch.ones(m, 32) / np.sqrt(32.0),
    )


@pytest.fixture
def oracle_env(monkeypatch):
    scene = generate_synthetic_scene(
        SyntheticSceneConfig(seed=6, n_objects=6, total_points=600))
    model = _OracleModel(scene)
    monkeypatch.setattr(model_mod, "encode_scene", _oracle_encode)
    monkeypatch.setattr(model_mod, "predict_with_encoding", _oracle_predict)
    return model, scene


class TestGenerateAutoMasks:
    def test_voxel_sizes_halve(self, oracle_env, monkeypatch):
        model, scene = oracle_env
        seen = []
        real = voxel_downsample

        def recorder(positions, voxel_size):
            seen.append(voxel_size)
            return real(positions, voxel_size)

        monkeypatch.setattr(ap, "voxel_downsample", recorder)
        cfg = AutoPromptConfig(v0={"indoor": 4.0, "outdoor": 8.0, "aerial": 12.0},
                               k_max=4, tau_s=0.99, tau_nms=0.6)
        generate_auto_masks(model, scene, cfg=cfg)
        assert seen == [4.0, 2.0, 1.0, 0.5]
        assert seen[2] == 4.0 / 2 ** 2

    def test_full_coverage_short_circuits(self, oracle_env, monkeypatch):
        model, scene = oracle_env

        def cover_all(model_, enc, prompts, training=False):
            from snapkit.maskdec import MaskPrediction
            m = len(prompts.objects)
            n = scene.n_points
            logits = torch.full((m, n), 20.0)
            return MaskPrediction(mask_logits=logits,
                                  mask_probs=torch.sigmoid(logits),
                                  score=torch.ones(m),
                                  clip_embedding=torch.ones(m, 32) / np.sqrt(32.0))

        monkeypatch.setattr(model_mod, "predict_with_encoding", cover_all)
        result = generate_auto_masks(model, scene, cfg=AutoPromptConfig(k_max=4))
        assert result.prompts_issued[0] > 0
        assert result.prompts_issued[1:] == [0, 0, 0]

    def test_oracle_model_recovers_instances(self, oracle_env):
        model, scene = oracle_env
        result = generate_auto_masks(model, scene, cfg=AutoPromptConfig(k_max=3))
        covered = np.zeros(scene.n_points, bool)
        for m in result.masks:
            covered |= m
        assert covered.mean() > 0.99
        # each instance recovered exactly once after NMS
        assert result.n_masks == 6
        for m in result.masks:
            inst = np.unique(scene.instance_ids[m])
            assert len(inst) == 1

    def test_coverage_prompts_bounded_by_uncovered_voxels(self, oracle_env,
                                                          monkeypatch):
        model, scene = oracle_env
        uncovered_counts = []
        real = voxel_downsample

        def recorder(positions, voxel_size):
            reps, assign = real(positions, voxel_size)
            uncovered_counts.append((positions.shape[0], reps.shape[0]))
            return reps, assign

        monkeypatch.setattr(ap, "voxel_downsample", recorder)
        result = generate_auto_masks(model, scene, cfg=AutoPromptConfig(k_max=3))
        for issued, (n_unc, n_vox) in zip(
                [p for p in result.prompts_issued if p > 0], uncovered_counts):
            assert issued == n_vox <= n_unc

    def test_fewer_prompts_than_finest_uniform_grid(self, oracle_env):
        model, scene = oracle_env
        cfg = AutoPromptConfig(k_max=3)
        result = generate_auto_masks(model, scene, cfg=cfg)
        finest = cfg.v0["indoor"] / 2 ** (cfg.k_max - 1)
        grid = uniform_grid_prompt_count(scene.positions, finest)
        assert sum(result.prompts_issued) < grid

    def test_scores_above_threshold(self, oracle_env):
        model, scene = oracle_env
        result = generate_auto_masks(model, scene,
                                     cfg=AutoPromptConfig(tau_s=0.5, k_max=2))
        assert all(s >= 0.5 for s in result.scores)

    def test_low_scores_are_dropped(self, oracle_env):
        model, scene = oracle_env
        model.score = 0.2
        result = generate_auto_masks(model, scene,
                                     cfg=AutoPromptConfig(tau_s=0.5, k_max=2))
        assert result.n_masks == 0

    def test_provenance_aligned(self, oracle_env):
        model, scene = oracle_env
        result = generate_auto_masks(model, scene, cfg=AutoPromptConfig(k_max=2))
        assert len(result.provenance) == result.n_masks
        for iteration, point in result.provenance:
            assert 0 <= iteration < 2
            assert len(point) == 3


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            AutoPromptConfig(k_max=0)
        with pytest.raises(ValueError):
            AutoPromptConfig(tau_s=1.5)
        with pytest.raises(ValueError):
            AutoPromptConfig(v0={"indoor": -1.0})
