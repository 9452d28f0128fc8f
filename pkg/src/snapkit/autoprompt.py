"""Automatic mask-proposal generation by coarse-to-fine voxel prompting.

Iteration k prompts the model with one click per occupied voxel of the still
uncovered points, at voxel size v0 / 2^k. Confident predictions are kept and
folded into the coverage mask, so later (finer) iterations only spend
prompts where earlier ones failed. A final greedy NMS removes duplicates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import voxel_downsample
from .metrics import mask_iou
from .pcdata import DomainId, SceneSample
from .promptenc import PromptSet

DEFAULT_V0 = {"indoor": 1.6, "outdoor": 8.0, "aerial": 12.0}


@dataclass
class AutoPromptConfig:
    v0: dict = field(default_factory=lambda: dict(DEFAULT_V0))
    k_max: int = 4
    tau_s: float = 0.5
    tau_nms: float = 0.6
    batch_limit: int = 64
    binarize: float = 0.5

    def __post_init__(self):
        for dom, v in self.v0.items():
            DomainId.parse(dom)
            if v <= 0:
                raise ValueError(f"v0[{dom}] must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        for name in ("tau_s", "tau_nms"):
            if not (0 < getattr(self, name) < 1):
                raise ValueError(f"{name} must be in (0, 1)")
        if self.batch_limit < 1:
            raise ValueError("batch_limit must be >= 1")


@dataclass
class SegmentationResult:
    """Aligned lists of masks, confidence scores, and text-space embeddings.

    ``provenance[i]`` records (iteration, prompt point) of mask i;
    ``prompts_issued[k]`` counts prompts spent at iteration k (diagnostics
    for the efficiency property of coarse-to-fine prompting).
    """

    masks: list
    scores: list
    clip_embeddings: list
    provenance: list = field(default_factory=list)
    prompts_issued: list = field(default_factory=list)

    @property
    def n_masks(self) -> int:
        return len(self.masks)


def nms_keep_indices(masks, scores, tau_nms: float) -> "list[int]":
    """Greedy suppression order: by descending score, ties by lower index.
    A mask survives iff its IoU with every already kept mask is <= tau_nms."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(scores.size), -scores))
    kept: list[int] = []
    for idx in order:
        if all(mask_iou(masks[idx], masks[j]) <= tau_nms for j in kept):
            kept.append(int(idx))
    return kept


def nms(masks, scores, clip_embeddings, tau_nms: float):
    """Filtered (masks, scores, clip_embeddings) in keep order."""
    kept = nms_keep_indices(masks, scores, tau_nms)
    return ([masks[i] for i in kept], [scores[i] for i in kept],
            [clip_embeddings[i] for i in kept])


def uniform_grid_prompt_count(positions: np.ndarray, voxel_size: float) -> int:
    """Prompts a single uniform grid at ``voxel_size`` would issue."""
    _, assignment = voxel_downsample(positions, voxel_size)
    return int(assignment.max()) + 1


def generate_auto_masks(model, scene: SceneSample,
                        domain: "DomainId | str | None" = None,
                        cfg: "AutoPromptConfig | None" = None) -> SegmentationResult:
    """Run the iterative prompting loop and return the deduplicated masks."""
    from .model import encode_scene, predict_with_encoding  # local: avoid cycle

    cfg = cfg or AutoPromptConfig()
    dom = DomainId.parse(domain) if domain is not None else scene.domain
    v0 = cfg.v0[dom.value]
    enc = encode_scene(model, scene, dom)
    positions = scene.positions
    n = scene.n_points

    coverage = np.zeros(n, dtype=bool)
    masks: list[np.ndarray] = []
    scores: list[float] = []
    clips: list[np.ndarray] = []
    provenance: list[tuple] = []
    prompts_issued: list[int] = []

    for k in range(cfg.k_max):
        uncovered = np.flatnonzero(~coverage)
        if uncovered.size == 0:
            prompts_issued.append(0)
            continue
        v_k = v0 / (2 ** k)
        reps, _ = voxel_downsample(positions[uncovered], v_k)
        prompts_issued.append(reps.shape[0])

        for start in range(0, reps.shape[0], cfg.batch_limit):
            batch = reps[start:start + cfg.batch_limit]
            prompts = PromptSet([row.reshape(1, 3) for row in batch])
            pred = predict_with_encoding(model, enc, prompts)
            binary = pred.binarized(cfg.binarize)
            batch_scores = pred.score.detach().numpy()
            clip_emb = pred.clip_embedding.detach().numpy()
            for j in range(batch.shape[0]):
                if batch_scores[j] >= cfg.tau_s:
                    masks.append(binary[j])
                    scores.append(float(batch_scores[j]))
                    clips.append(clip_emb[j])
                    provenance.append((k, tuple(float(x) for x in batch[j])))
                    coverage |= binary[j]

    kept = nms_keep_indices(masks, scores, cfg.tau_nms)
    return SegmentationResult(
        masks=[masks[i] for i in kept],
        scores=[scores[i] for i in kept],
        clip_embeddings=[clips[i] for i in kept],
        provenance=[provenance[i] for i in kept],
        prompts_issued=prompts_issued,
    )
