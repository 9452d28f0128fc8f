"""Mask decoder: prompt/point cross-attention refinement and prediction heads.

Each decoder block runs, in order: self-attention over the token sequence,
token-to-point cross-attention, a feedforward on the tokens, and
point-to-token cross-attention. Point embeddings are (logically) tiled per
object and carry Fourier positional encodings in every cross-attention.
Objects never attend to each other.

Inference decodes objects one at a time through fixed-shape computations
(B=1, no pad slots in the math), which makes per-object outputs independent
of batch composition and padding down to the bit level. Training uses a
single batched pass over the same blocks for throughput; the two paths are
algebraically identical and differ only by float-rounding of batched GEMMs.
The first block's point-side projections are computed once and broadcast in
both paths: every object sees the identical tiled point tensor there.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .backbone import ModelStateError
from .geometry import FourierConfig, fourier_encode, scene_frame
from .promptenc import N_TASK_TOKENS

MASK_SLOT, SCORE_SLOT, CLIP_SLOT = 0, 1, 2


class DecoderInputError(ValueError):
    pass


@dataclass
class DecoderConfig:
    n_blocks: int = 3
    n_heads: int = 4
    ffn_hidden: int = 128
    head_mlp_depth: int = 2

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")


@dataclass
class MaskPrediction:
    """Per-object segmentation output.

    ``mask_probs`` is the sigmoid of ``mask_logits``; ``clip_embedding`` rows
    are L2-normalized. ``aux_logits`` (one mask per click slot, zeros at
    padded slots) and the matching ``click_pad_mask`` are present only in
    training mode.
    """

    mask_logits: torch.Tensor           # (M, N)
    mask_probs: torch.Tensor            # (M, N)
    score: torch.Tensor                 # (M,)
    clip_embedding: torch.Tensor        # (M, D_clip)
    aux_logits: "torch.Tensor | None" = None      # (M, P, N)
    click_pad_mask: "torch.Tensor | None" = None  # (M, P) True at pads

    def binarized(self, threshold: float = 0.5) -> np.ndarray:
        return (self.mask_probs.detach().numpy() > threshold)


class _Attention(nn.Module):
    """Batched multi-head attention.

    2-D inputs and the ``pre_*`` head-split overrides are shared across the
    batch: projected once and broadcast, bitwise equivalent to projecting an
    explicit tile row by row.
    """

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def split_shared(self, proj, x: torch.Tensor) -> torch.Tensor:
        """Project a shared (L, D) input and split heads -> (H, L, dh)."""
        length = x.shape[0]
        return proj(x).view(length, self.n_heads, self.head_dim).permute(1, 0, 2)

    def _heads(self, proj, x, pre, batch):
        if pre is not None:
            return pre.unsqueeze(0).expand(batch, *pre.shape)
        if x.dim() == 2:
            return self.split_shared(proj, x).unsqueeze(0).expand(
                batch, self.n_heads, x.shape[0], self.head_dim)
        b, length, _ = x.shape
        return proj(x).view(b, length, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, q_in=None, k_in=None, v_in=None, key_keep_mask=None,
                pre_q=None, pre_k=None, pre_v=None, batch=None):
        if batch is None:
            for t in (q_in, k_in, v_in):
                if t is not None and t.dim() == 3:
                    batch = t.shape[0]
                    break
            else:
                batch = 1
        q = self._heads(self.q, q_in, pre_q, batch)
        k = self._heads(self.k, k_in, pre_k, batch)
        v = self._heads(self.v, v_in, pre_v, batch)
        mask = None
        if key_keep_mask is not None:
            mask = key_keep_mask.view(batch, 1, 1, k.shape[2])
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        return self.out(out.transpose(1, 2).reshape(batch, q.shape[2], -1))


class DecoderBlock(nn.Module):
    """One four-step refinement block (pre-norm, residual)."""

    def __init__(self, cfg: DecoderConfig, dim: int):
        super().__init__()
        self.self_attn = _Attention(dim, cfg.n_heads)
        self.cross_t2p = _Attention(dim, cfg.n_heads)
        self.cross_p2t = _Attention(dim, cfg.n_heads)
        self.ffn = nn.Sequential(
            nn.Linear(dim, cfg.ffn_hidden), nn.GELU(), nn.Linear(cfg.ffn_hidden, dim)
        )
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)
        self.norm3 = nn.LayerNorm(dim)
        self.norm4 = nn.LayerNorm(dim)
        self.norm_points_kv = nn.LayerNorm(dim)
        self.norm_points_q = nn.LayerNorm(dim)

    def shared_point_streams(self, points: torch.Tensor, pe: torch.Tensor) -> dict:
        """Point-side projections of the tiled (not yet object-specific)
        point tensor entering the first block; (H, N, dh) each."""
        p_kv = self.norm_points_kv(points)
        return {
            "k": self.cross_t2p.split_shared(self.cross_t2p.k, p_kv + pe),
            "v": self.cross_t2p.split_shared(self.cross_t2p.v, p_kv),
            "q": self.cross_p2t.split_shared(self.cross_p2t.q,
                                             self.norm_points_q(points) + pe),
        }

    def forward(self, tokens, points, pe, token_keep=None, shared=None):
        """``tokens``: (B, T, D); ``points``: (B, N, D); ``pe``: (N, D)
        projected positional codes; ``shared``: first-block point streams."""
        b = tokens.shape[0]
        # (1) self-attention over the token sequence, pads masked as keys
        t = self.norm1(tokens)
        tokens = tokens + self.self_attn(t, t, t, key_keep_mask=token_keep)
        # (2) tokens attend to points; positional codes ride on the keys
        if shared is None:
            p_kv = self.norm_points_kv(points)
            tokens = tokens + self.cross_t2p(self.norm2(tokens), p_kv + pe, p_kv,
                                             batch=b)
        else:
            tokens = tokens + self.cross_t2p(self.norm2(tokens),
                                             pre_k=shared["k"], pre_v=shared["v"],
                                             batch=b)
        # (3) position-wise feedforward on tokens
        tokens = tokens + self.ffn(self.norm3(tokens))
        # (4) points attend back to the refined tokens
        t_kv = self.norm4(tokens)
        if shared is None:
            points = points + self.cross_p2t(self.norm_points_q(points) + pe,
                                             t_kv, t_kv, key_keep_mask=token_keep,
                                             batch=b)
        else:
            points = points + self.cross_p2t(None, t_kv, t_kv,
                                             key_keep_mask=token_keep,
                                             pre_q=shared["q"], batch=b)
        return tokens, points


class MaskDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, dim: int, fourier: FourierConfig):
        super().__init__()
        self.cfg = cfg
        self.fourier = fourier
        self.pe_proj = nn.Linear(fourier.output_dim, dim)
        self.blocks = nn.ModuleList(DecoderBlock(cfg, dim) for _ in range(cfg.n_blocks))
        self.final_norm_tokens = nn.LayerNorm(dim)
        self.final_norm_points = nn.LayerNorm(dim)


def _canonical_order(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    n = positions.shape[0]
    order = np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0]))
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    return order, inverse, bool(np.array_equal(order, np.arange(n)))


def decode(f_pc: torch.Tensor, positions: np.ndarray, token_seq: torch.Tensor,
           pad_mask: torch.Tensor, decoder: MaskDecoder,
           point_pe: "torch.Tensor | None" = None, batched: bool = False,
           assume_sorted: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Refine tokens and points; returns (Z_sp (M, P+3, D), Z_pc (M, N, D)).

    Points are processed in a canonical coordinate-sorted order internally,
    so outputs are permutation equivariant; rows of Z_pc come back in the
    caller's point order. Pad slots of Z_sp are zero-filled.

    The default path decodes objects one at a time (fixed shapes, bitwise
    batch independence); ``batched=True`` runs one padded batch instead,
    used by the training loop.
    """
    if decoder is None:
        raise ModelStateError("decoder weights not initialized")
    positions = np.asarray(positions)
    n = positions.shape[0]
    m, seq_len, dim = token_seq.shape
    if f_pc.shape[0] != n or f_pc.shape[1] != dim:
        raise DecoderInputError(
            f"F_pc {tuple(f_pc.shape)} does not match positions ({n}) and token width {dim}"
        )
    if pad_mask.shape != (m, seq_len):
        raise DecoderInputError("pad_mask must match the token sequence shape")

    if assume_sorted:
        order = inverse = None
        already_sorted = True
    else:
        order, inverse, already_sorted = _canonical_order(positions)
    if point_pe is None:
        center, scale = scene_frame(positions)
        pe_feat = fourier_encode(positions.astype(np.float64) - center,
                                 decoder.fourier, scale)
        point_pe = torch.from_numpy(pe_feat.astype(np.float32))
    if not already_sorted:
        f_pc = f_pc[torch.from_numpy(order)]
        point_pe = point_pe[torch.from_numpy(order)]

    pe = decoder.pe_proj(point_pe)
    shared0 = decoder.blocks[0].shared_point_streams(f_pc, pe)
    token_keep = ~pad_mask

    if batched:
        tokens = token_seq
        points = f_pc.unsqueeze(0).expand(m, n, dim)
        for i, block in enumerate(decoder.blocks):
            tokens, points = block(tokens, points, pe, token_keep,
                                   shared=shared0 if i == 0 else None)
        z_sp = decoder.final_norm_tokens(tokens) * token_keep.unsqueeze(-1)
        z_pc = decoder.final_norm_points(points)
    else:
        z_sp = torch.zeros(m, seq_len, dim, dtype=token_seq.dtype)
        z_pc_rows = []
        for obj in range(m):
            n_real = int(token_keep[obj].sum())
            tokens = token_seq[obj:obj + 1, :n_real]
            points = f_pc.unsqueeze(0)
            for i, block in enumerate(decoder.blocks):
                tokens, points = block(tokens, points, pe,
                                       shared=shared0 if i == 0 else None)
            z_sp[obj, :n_real] = decoder.final_norm_tokens(tokens[0])
            z_pc_rows.append(decoder.final_norm_points(points[0]))
        z_pc = torch.stack(z_pc_rows)

    if not already_sorted:
        z_pc = z_pc[:, torch.from_numpy(inverse)]
    return z_sp, z_pc


class MaskHead(nn.Module):
    """Dot product between a refined mask token and every point embedding."""

    def __init__(self, dim: int, depth: int = 2):
        super().__init__()
        layers = []
        for _ in range(depth - 1):
            layers += [nn.Linear(dim, dim), nn.GELU()]
        layers += [nn.Linear(dim, dim)]
        self.mlp = nn.Sequential(*layers)

    def forward(self, z_tokens: torch.Tensor, z_pc: torch.Tensor
                ) -> tuple[torch.Tensor, torch.Tensor]:
        """``z_tokens``: (M, T, D) token embeddings (T masks per object) or
        (M, D); ``z_pc``: (M, N, D). Returns (logits, probs)."""
        squeeze = z_tokens.dim() == 2
        if squeeze:
            z_tokens = z_tokens.unsqueeze(1)
        f_mask = self.mlp(z_tokens)
        logits = torch.einsum("mnd,mtd->mtn", z_pc, f_mask)
        if squeeze:
            logits = logits.squeeze(1)
        return logits, torch.sigmoid(logits)


class ScoreHead(nn.Module):
    def __init__(self, dim: int, depth: int = 2):
        super().__init__()
        layers = []
        for _ in range(depth - 1):
            layers += [nn.Linear(dim, dim), nn.GELU()]
        layers += [nn.Linear(dim, 1)]
        self.mlp = nn.Sequential(*layers)

    def forward(self, z_score: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.mlp(z_score)).squeeze(-1)


class ClipHead(nn.Module):
    """Projects the clip token to the text-embedding space, L2-normalized."""

    def __init__(self, dim: int, d_clip: int = 32, depth: int = 2, eps: float = 1.0e-8):
        super().__init__()
        self.eps = eps
        layers = []
        for _ in range(depth - 1):
            layers += [nn.Linear(dim, dim), nn.GELU()]
        layers += [nn.Linear(dim, d_clip)]
        self.mlp = nn.Sequential(*layers)

    def forward(self, z_clip: torch.Tensor) -> torch.Tensor:
        raw = self.mlp(z_clip)
        # epsilon guard keeps the zero vector finite instead of dividing by 0
        return raw / torch.linalg.norm(raw, dim=-1, keepdim=True).clamp_min(self.eps)


class Heads(nn.Module):
    def __init__(self, dim: int, d_clip: int, depth: int):
        super().__init__()
        self.mask = MaskHead(dim, depth)
        self.score = ScoreHead(dim, depth)
        self.clip = ClipHead(dim, d_clip, depth)


def mask_head(z_mask: torch.Tensor, z_pc: torch.Tensor, head: MaskHead
              ) -> tuple[torch.Tensor, torch.Tensor]:
    """Functional entry point for the mask head."""
    return head(z_mask, z_pc)


def run_heads(z_sp: torch.Tensor, z_pc: torch.Tensor, pad_mask: torch.Tensor,
              heads: Heads, training: bool) -> MaskPrediction:
    """Apply the three heads (plus per-click auxiliary masks when training).

    Inference applies the heads object by object so per-object outputs stay
    independent of the batch; training batches them.
    """
    m, seq_len, _ = z_sp.shape
    n = z_pc.shape[1]
    p_max = seq_len - N_TASK_TOKENS

    if training:
        mask_logits, mask_probs = heads.mask(z_sp[:, MASK_SLOT], z_pc)
        score = heads.score(z_sp[:, SCORE_SLOT])
        clip = heads.clip(z_sp[:, CLIP_SLOT])
        aux_logits, _ = heads.mask(z_sp[:, N_TASK_TOKENS:], z_pc)
        return MaskPrediction(
            mask_logits=mask_logits, mask_probs=mask_probs, score=score,
            clip_embedding=clip, aux_logits=aux_logits,
            click_pad_mask=pad_mask[:, N_TASK_TOKENS:],
        )

    logits_rows, score_rows, clip_rows = [], [], []
    for obj in range(m):
        f_mask = heads.mask.mlp(z_sp[obj, MASK_SLOT])
        logits_rows.append(z_pc[obj] @ f_mask)
        score_rows.append(heads.score(z_sp[obj, SCORE_SLOT]))
        clip_rows.append(heads.clip(z_sp[obj, CLIP_SLOT]))
    mask_logits = torch.stack(logits_rows)
    return MaskPrediction(
        mask_logits=mask_logits,
        mask_probs=torch.sigmoid(mask_logits),
        score=torch.stack(score_rows),
        clip_embedding=torch.stack(clip_rows),
    )
