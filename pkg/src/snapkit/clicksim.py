"""Simulated user clicks for training and evaluation.

Clicks land uniformly on the not-yet-segmented part of the target object:
the whole object for initial clicks, the false-negative region for
refinement clicks. Two inference strategies are supported: sampling a full
click budget up front (``random``) and adding one refinement click per round
against the previous prediction (``iterative``).
"""

from __future__ import annotations

import numpy as np

from .metrics import mask_iou
from .promptenc import PromptSet


class ClickError(ValueError):
    pass


def _rng(rng) -> np.random.Generator:
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def sample_initial_clicks(gt_mask: np.ndarray, k: int, rng) -> np.ndarray:
    """k point indices drawn uniformly from the object's points.

    Sampling is without replacement; only when k exceeds the object size does
    it fall back to sampling with replacement.
    """
    if k < 1:
        raise ClickError("k must be >= 1")
    positives = np.flatnonzero(np.asarray(gt_mask))
    if positives.size == 0:
        raise ClickError("object mask is empty")
    gen = _rng(rng)
    replace = k > positives.size
    return gen.choice(positives, size=k, replace=replace)


def sample_refinement_click(gt_mask: np.ndarray, pred_mask: np.ndarray, rng
                            ) -> "int | None":
    """Uniform sample from the false-negative region; None when covered."""
    gt = np.asarray(gt_mask).astype(bool)
    pred = np.asarray(pred_mask).astype(bool)
    if gt.shape != pred.shape:
        raise ClickError("gt and prediction masks must be aligned")
    candidates = np.flatnonzero(gt & ~pred)
    if candidates.size == 0:
        return None
    return int(_rng(rng).choice(candidates))


def simulate_interaction(model, scene, instance_ids, budget: int, strategy: str,
                         rng, domain=None, binarize: float = 0.5) -> dict:
    """IoU trajectories over 1..budget clicks for each requested object.

    ``strategy='random'`` issues the whole budget up front and evaluates
    prefixes; ``'iterative'`` adds one refinement click per round based on
    the previous prediction. Returns {instance_id: [IoU@1, ..., IoU@budget]}.
    """
    from .model import encode_scene, predict_with_encoding  # local: avoid cycle

    if budget < 1:
        raise ClickError("budget must be >= 1")
    if strategy not in ("random", "iterative"):
        raise ClickError(f"unknown strategy {strategy!r}")
    gen = _rng(rng)
    instance_ids = list(instance_ids)
    gt = {i: scene.instance_mask(i) for i in instance_ids}
    enc = encode_scene(model, scene, domain)
    positions = scene.positions

    trajectories = {i: [] for i in instance_ids}

    if strategy == "random":
        picks = {i: sample_initial_clicks(gt[i], budget, gen) for i in instance_ids}
        for k in range(1, budget + 1):
            prompts = PromptSet([positions[picks[i][:k]] for i in instance_ids])
            pred = predict_with_encoding(model, enc, prompts)
            binary = pred.binarized(binarize)
            for row, i in enumerate(instance_ids):
                trajectories[i].append(mask_iou(binary[row], gt[i]))
        return trajectories

    clicks = {i: [int(sample_initial_clicks(gt[i], 1, gen)[0])] for i in instance_ids}
    for k in range(1, budget + 1):
        prompts = PromptSet([positions[np.array(clicks[i])] for i in instance_ids])
        pred = predict_with_encoding(model, enc, prompts)
        binary = pred.binarized(binarize)
        for row, i in enumerate(instance_ids):
            trajectories[i].append(mask_iou(binary[row], gt[i]))
            if k < budget:
                nxt = sample_refinement_click(gt[i], binary[row], gen)
                if nxt is not None:
                    clicks[i].append(nxt)
    return trajectories
