"""Spatial click prompts: per-click embeddings and per-object token sequences.

Each object's sequence starts with the three learned task tokens (mask,
score, clip) followed by its click embeddings; objects with fewer clicks than
the batch maximum are padded, and the padding mask keeps pads out of every
attention reduction downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .geometry import FourierConfig, fourier_encode, nearest_neighbor, scene_frame

N_TASK_TOKENS = 3  # mask, score, clip — fixed slot order


class PromptInputError(ValueError):
    pass


@dataclass
class PromptSet:
    """Up to P clicks for each of M objects.

    ``objects[m]`` is a (k_m, 3) array of click coordinates in meters.
    ``object_ids`` optionally carries ground-truth instance ids for training.
    """

    objects: list
    object_ids: "list[int] | None" = None

    def __post_init__(self):
        if len(self.objects) < 1:
            raise PromptInputError("a prompt set needs at least one object")
        cleaned = []
        for m, clicks in enumerate(self.objects):
            arr = np.asarray(clicks, dtype=np.float64).reshape(-1, 3)
            if arr.shape[0] < 1:
                raise PromptInputError(f"object {m} has no clicks")
            if not np.isfinite(arr).all():
                raise PromptInputError(f"object {m} has non-finite click coordinates")
            cleaned.append(arr)
        self.objects = cleaned
        if self.object_ids is not None and len(self.object_ids) != len(self.objects):
            raise PromptInputError("object_ids must align with objects")

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    @property
    def max_clicks(self) -> int:
        return max(arr.shape[0] for arr in self.objects)


class TaskTokens(nn.Module):
    """The three learned task tokens, tiled per object at assembly time."""

    def __init__(self, dim: int):
        super().__init__()
        self.mask_token = nn.Parameter(torch.zeros(dim))
        self.score_token = nn.Parameter(torch.zeros(dim))
        self.clip_token = nn.Parameter(torch.zeros(dim))

    def stacked(self) -> torch.Tensor:
        return torch.stack([self.mask_token, self.score_token, self.clip_token])


class PromptProjection(nn.Module):
    """Linear map from [point feature || positional encoding] to the token width."""

    def __init__(self, dim: int, fourier: FourierConfig):
        super().__init__()
        self.fourier = fourier
        self.proj = nn.Linear(dim + fourier.output_dim, dim)


def encode_prompt_point(f_pc: torch.Tensor, positions: np.ndarray, p_sp: np.ndarray,
                        projection: PromptProjection,
                        frame: "tuple[np.ndarray, float] | None" = None) -> torch.Tensor:
    """Embed a single click: nearest point's feature plus its own positional code.

    The click coordinate is encoded relative to the scene frame, so two clicks
    snapping to the same nearest point still produce distinct embeddings.
    """
    positions = np.asarray(positions)
    if positions.shape[0] < 1:
        raise PromptInputError("empty point cloud")
    if f_pc.shape[0] != positions.shape[0]:
        raise PromptInputError("F_pc and positions must be aligned")
    center, scale = scene_frame(positions) if frame is None else frame
    idx = nearest_neighbor(positions, p_sp)
    f_sem = f_pc[idx]
    f_pos = fourier_encode(np.asarray(p_sp, dtype=np.float64) - center,
                           projection.fourier, scale)
    f_pos = torch.from_numpy(f_pos.astype(np.float32))
    return projection.proj(torch.cat([f_sem, f_pos]))


def assemble_token_sequence(prompts: PromptSet, f_pc: torch.Tensor,
                            positions: np.ndarray, tokens: TaskTokens,
                            projection: PromptProjection,
                            frame: "tuple[np.ndarray, float] | None" = None
                            ) -> tuple[torch.Tensor, torch.Tensor]:
    """Token sequences for a prompt set.

    Returns ``(seq, pad_mask)`` with ``seq`` of shape (M, P+3, D) in slot
    order [mask, score, clip, click_1..click_P] and ``pad_mask`` (M, P+3)
    True at padded click slots. Pad slots hold zeros.
    """
    positions = np.asarray(positions)
    if frame is None:
        frame = scene_frame(positions)
    m = prompts.n_objects
    p = prompts.max_clicks
    dim = tokens.mask_token.shape[0]

    seq = torch.zeros(m, p + N_TASK_TOKENS, dim)
    pad_mask = torch.zeros(m, p + N_TASK_TOKENS, dtype=torch.bool)
    task = tokens.stacked()
    seq[:, :N_TASK_TOKENS] = task.unsqueeze(0)

    # one projection call per object: an object's click embeddings never
    # depend on which other objects share the batch
    center, scale = frame
    pos64 = positions.astype(np.float64)
    for i, clicks in enumerate(prompts.objects):
        d2 = ((clicks[:, None, :] - pos64[None, :, :]) ** 2).sum(-1)
        nn_idx = torch.from_numpy(d2.argmin(axis=1))
        f_pos = fourier_encode(clicks - center, projection.fourier, scale)
        emb = projection.proj(torch.cat(
            [f_pc[nn_idx], torch.from_numpy(f_pos.astype(np.float32))], dim=1
        ))
        seq[i, N_TASK_TOKENS:N_TASK_TOKENS + clicks.shape[0]] = emb
        pad_mask[i, N_TASK_TOKENS + clicks.shape[0]:] = True
    return seq, pad_mask
