"""Training losses: weighted focal + dice mask losses, per-click auxiliary
masks, confidence-score regression, and prototype text classification.

The total objective is the plain unweighted sum of the five terms. Mask
losses take a per-point weight vector that emphasizes points near the user's
clicks (see :func:`click_weight`).
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F


class LossInputError(ValueError):
    pass


@dataclass
class ClickWeightConfig:
    """Distance-based loss weighting around clicks.

    Distances are normalized by the scene bounding-box diagonal. Below
    ``tau_d`` the weight decays linearly in the *normalized* distance
    (``w_max - (w_max - w_min) * d``), elsewhere it is ``w_min``; with the
    stock constants this leaves a step at ``tau_d``. Set ``continuous=True``
    for the variant that rescales the decay to reach ``w_min`` exactly at
    ``tau_d``.
    """

    w_max: float = 2.0
    w_min: float = 1.0
    tau_d: float = 0.5
    distance_normalizer: str = "scene_bbox_diagonal"
    continuous: bool = False

    def __post_init__(self):
        if not (self.w_max >= self.w_min > 0):
            raise ValueError("need w_max >= w_min > 0")
        if not (0 < self.tau_d <= 1):
            raise ValueError("tau_d must be in (0, 1]")
        if self.distance_normalizer != "scene_bbox_diagonal":
            raise ValueError(f"unknown normalizer {self.distance_normalizer!r}")


@dataclass
class LossReport:
    focal: float
    dice: float
    aux: float
    score: float
    text: float
    total: float

    def to_dict(self) -> dict:
        return asdict(self)


def click_weight(positions: np.ndarray, clicks, cfg: ClickWeightConfig) -> np.ndarray:
    """Per-point loss weights from the distance to the nearest click."""
    positions = np.asarray(positions, dtype=np.float64)
    clicks = np.asarray(clicks, dtype=np.float64).reshape(-1, 3)
    if clicks.shape[0] < 1:
        raise LossInputError("need at least one click")
    diag = float(np.linalg.norm(positions.max(axis=0) - positions.min(axis=0)))
    if diag <= 0:
        raise LossInputError("scene bounding-box diagonal is zero")
    d = np.sqrt(((positions[:, None, :] - clicks[None, :, :]) ** 2).sum(-1)).min(axis=1)
    d = d / diag
    slope = (cfg.w_max - cfg.w_min) / (cfg.tau_d if cfg.continuous else 1.0)
    return np.where(d < cfg.tau_d, cfg.w_max - slope * d, cfg.w_min)


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    return torch.as_tensor(x, dtype=like.dtype)


def _check_binary(targets: torch.Tensor):
    if not bool(((targets == 0) | (targets == 1)).all()):
        raise LossInputError("targets must be binary (0/1)")


def _focal_per_mask(logits: torch.Tensor, targets: torch.Tensor,
                    weights: torch.Tensor, gamma: float, alpha: float) -> torch.Tensor:
    """Weighted focal loss per mask, mean over points. Shapes (..., N)."""
    t = targets.to(logits.dtype)
    log_p = F.logsigmoid(logits)
    log_q = F.logsigmoid(-logits)
    p = torch.sigmoid(logits)
    pos = -alpha * (1 - p).pow(gamma) * log_p
    neg = -(1 - alpha) * p.pow(gamma) * log_q
    per_point = (t * pos + (1 - t) * neg) * weights
    return per_point.mean(dim=-1)


def _dice_per_mask(probs: torch.Tensor, targets: torch.Tensor,
                   weights: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    t = targets.to(probs.dtype)
    inter = (weights * probs * t).sum(dim=-1)
    denom = (weights * probs).sum(dim=-1) + (weights * t).sum(dim=-1)
    return 1.0 - (2.0 * inter + smooth) / (denom + smooth)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, weights,
               gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Binary focal loss with per-point click weights, mean over points then
    objects. ``gamma=0, alpha=0.5`` reduces to half the binary cross-entropy."""
    if logits.shape != targets.shape:
        raise LossInputError("logits and targets must share a shape")
    _check_binary(targets)
    w = _as_tensor(weights, logits)
    return _focal_per_mask(logits, targets, w, gamma, alpha).mean()


def dice_loss(probs: torch.Tensor, targets: torch.Tensor, weights) -> torch.Tensor:
    """Smoothed dice loss (s=1), weighted per point, averaged over objects."""
    if probs.shape != targets.shape:
        raise LossInputError("probs and targets must share a shape")
    w = _as_tensor(weights, probs)
    return _dice_per_mask(probs, targets, w).mean()


def aux_loss(aux_logits: torch.Tensor, targets: torch.Tensor, weights,
             pad_mask: "torch.Tensor | None" = None,
             gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Focal + dice applied to every per-click auxiliary mask.

    ``aux_logits`` is (M, P, N); each click slot is scored against its
    object's target and the result is averaged over non-padded slots.
    """
    m, p, n = aux_logits.shape
    if targets.shape != (m, n):
        raise LossInputError("targets must be (M, N)")
    _check_binary(targets)
    w = _as_tensor(weights, aux_logits)
    t = targets.unsqueeze(1).expand(m, p, n)
    per_slot = (
        _focal_per_mask(aux_logits, t, w, gamma, alpha)
        + _dice_per_mask(torch.sigmoid(aux_logits), t, w)
    )
    if pad_mask is None:
        return per_slot.mean()
    valid = ~pad_mask
    count = valid.sum()
    if count == 0:
        raise LossInputError("all auxiliary slots are padded")
    return (per_slot * valid.to(per_slot.dtype)).sum() / count


def mask_iou_target(probs: torch.Tensor, gt: torch.Tensor, tau: float) -> torch.Tensor:
    """IoU between a binarized prediction and ground truth; empty/empty -> 1."""
    bp = probs.detach() > tau
    bg = gt > 0.5
    inter = (bp & bg).sum(dim=-1).to(torch.float64)
    union = (bp | bg).sum(dim=-1).to(torch.float64)
    return torch.where(union > 0, inter / union.clamp(min=1), torch.ones_like(union))


def score_loss(pred_scores: torch.Tensor, mask_probs: torch.Tensor,
               gt_masks: torch.Tensor, tau: float = 0.5) -> torch.Tensor:
    """MSE between the predicted confidence and the binarized-mask IoU target."""
    if not (0 < tau < 1):
        raise LossInputError("tau must be in (0, 1)")
    target = mask_iou_target(mask_probs, gt_masks, tau).to(pred_scores.dtype)
    return ((pred_scores - target) ** 2).mean()


def text_loss(clip_embeddings: torch.Tensor, vocab_embeddings: torch.Tensor,
              labels, gamma: float = 2.0, temperature: float = 0.07) -> torch.Tensor:
    """Focal classification of mask embeddings against the text vocabulary.

    Both embedding sets must be L2-normalized; cosine logits are divided by
    ``temperature`` before the softmax.
    """
    for name, emb in (("clip_embeddings", clip_embeddings),
                      ("vocab_embeddings", vocab_embeddings)):
        norms = torch.linalg.norm(emb.detach(), dim=-1)
        if bool((norms - 1.0).abs().max() > 1e-4):
            raise LossInputError(f"{name} must be L2-normalized")
    labels = torch.as_tensor(labels, dtype=torch.long)
    if bool((labels < 0).any()) or bool((labels >= vocab_embeddings.shape[0]).any()):
        raise LossInputError("labels out of vocabulary range")
    logits = clip_embeddings @ vocab_embeddings.transpose(0, 1) / temperature
    log_probs = F.log_softmax(logits, dim=-1)
    log_p = log_probs[torch.arange(labels.shape[0]), labels]
    p = log_p.exp()
    return ((1 - p).pow(gamma) * (-log_p)).mean()


def total_loss(focal, dice, aux, score, text) -> LossReport:
    """Unit-weight sum of the five components, recorded per component."""
    vals = [float(v) for v in (focal, dice, aux, score, text)]
    return LossReport(*vals, total=float(sum(vals)))


def combined_loss(focal: torch.Tensor, dice: torch.Tensor, aux: torch.Tensor,
                  score: torch.Tensor, text: torch.Tensor) -> torch.Tensor:
    """Differentiable sum matching :func:`total_loss` component-for-component."""
    return focal + dice + aux + score + text
