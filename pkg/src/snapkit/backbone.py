"""Per-point embedding extractor with domain-specific normalization.

A compact U-shaped encoder stands in for a full point transformer: per-stage
voxel pooling, windowed self-attention over the pooled points, and unpooling
with skip connections back to full resolution. Every normalization site is a
:class:`DomainNorm` holding a separate (gamma, beta, running stats) tuple per
routing key, so indoor, outdoor, and aerial statistics never mix.

All point reductions run over a canonical, content-derived point order
(lexicographic by coordinates), which makes the encoder permutation
equivariant down to the bit level in practice.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .geometry import FourierConfig, fourier_encode, scene_frame
from .pcdata import DomainId, SceneSample


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two rows."""


class ModelStateError(RuntimeError):
    """Model weights missing or not initialized."""


BATCH_NORM_KEY = "shared"


@dataclass
class EncoderConfig:
    """Shape and routing of the point encoder.

    ``voxel_sizes`` maps each domain to its per-stage pooling sizes in meters
    (strictly increasing). ``norm_mode`` selects how normalization parameters
    are keyed: one shared tuple (``batch``), one per dataset (``dataset``,
    keyed by the scene_id prefix before the first ``/``), or one per domain
    (``domain``).
    """

    embed_dim: int = 64
    n_stages: int = 3
    voxel_sizes: dict = field(default_factory=lambda: {
        "indoor": (0.08, 0.16, 0.32),
        "outdoor": (0.4, 0.8, 1.6),
        "aerial": (0.4, 0.8, 1.6),
    })
    n_attention_blocks: tuple = (1, 1, 1)
    n_heads: int = 4
    norm_mode: str = "domain"
    window_factor: float = 8.0
    ffn_hidden: int = 128
    momentum: float = 0.1
    eps: float = 1.0e-5
    fourier: FourierConfig = field(default_factory=FourierConfig)
    dataset_names: tuple = ()

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.norm_mode not in ("batch", "dataset", "domain"):
            raise ValueError(f"unknown norm_mode {self.norm_mode!r}")
        if len(self.n_attention_blocks) != self.n_stages:
            raise ValueError("n_attention_blocks must have one entry per stage")
        for dom, sizes in self.voxel_sizes.items():
            DomainId.parse(dom)
            if len(sizes) != self.n_stages:
                raise ValueError(f"voxel_sizes[{dom}] must have {self.n_stages} entries")
            if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] <= 0:
                raise ValueError(f"voxel_sizes[{dom}] must be positive and strictly increasing")

    def norm_keys(self) -> list[str]:
        if self.norm_mode == "batch":
            return [BATCH_NORM_KEY]
        if self.norm_mode == "domain":
            return [d.value for d in DomainId]
        if not self.dataset_names:
            raise ValueError("norm_mode='dataset' requires dataset_names")
        return list(self.dataset_names)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["voxel_sizes"] = {k: list(v) for k, v in self.voxel_sizes.items()}
        d["n_attention_blocks"] = list(self.n_attention_blocks)
        d["dataset_names"] = list(self.dataset_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["voxel_sizes"] = {k: tuple(v) for k, v in d["voxel_sizes"].items()}
        d["n_attention_blocks"] = tuple(d["n_attention_blocks"])
        d["dataset_names"] = tuple(d.get("dataset_names", ()))
        d["fourier"] = FourierConfig(**d["fourier"]) if isinstance(d.get("fourier"), dict) else d["fourier"]
        return cls(**d)


def norm_key_for(cfg: EncoderConfig, scene: SceneSample) -> str:
    """Routing key of a scene under the configured normalization mode."""
    if cfg.norm_mode == "batch":
        return BATCH_NORM_KEY
    if cfg.norm_mode == "domain":
        return scene.domain.value
    return scene.scene_id.split("/", 1)[0]


class DomainNormParams(nn.Module):
    """One (gamma, beta, running stats) tuple for a single routing key."""

    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim))
        self.beta = nn.Parameter(torch.zeros(dim))
        self.register_buffer("running_mean", torch.zeros(dim))
        self.register_buffer("running_var", torch.ones(dim))


class DomainNorm(nn.Module):
    """Feature normalization with per-key scale/shift and running statistics.

    Training mode normalizes by the batch's own statistics (population
    variance) and folds them into the active key's running estimates; other
    keys' state is untouched. Inference normalizes by the active key's
    running statistics.
    """

    def __init__(self, dim: int, keys: list[str], momentum: float = 0.1,
                 eps: float = 1.0e-5):
        super().__init__()
        self.keys = nn.ModuleDict({k: DomainNormParams(dim) for k in keys})
        self.momentum = momentum
        self.eps = eps
        # when set, running stats accumulate as a cumulative mean instead of
        # an EMA (used to re-estimate statistics under frozen weights)
        self._stat_counts: "dict[str, int] | None" = None

    def begin_stat_reestimation(self):
        self._stat_counts = {}

    def end_stat_reestimation(self):
        self._stat_counts = None

    def forward(self, x: torch.Tensor, key: str) -> torch.Tensor:
        if key not in self.keys:
            raise KeyError(f"no normalization parameters for key {key!r}")
        p = self.keys[key]
        if self.training:
            if x.shape[0] < 2:
                raise DegenerateBatchError(
                    f"batch statistics need >= 2 rows, got {x.shape[0]}"
                )
            # statistics in float64 (order-stable), normalization in the
            # input dtype
            xd = x.double()
            mean = xd.mean(dim=0).to(x.dtype)
            var = xd.var(dim=0, unbiased=False).to(x.dtype)
            with torch.no_grad():
                if self._stat_counts is not None:
                    count = self._stat_counts.get(key, 0) + 1
                    self._stat_counts[key] = count
                    m = 1.0 / count
                else:
                    m = self.momentum
                p.running_mean.mul_(1.0 - m).add_(m * mean.detach().to(p.running_mean.dtype))
                p.running_var.mul_(1.0 - m).add_(m * var.detach().to(p.running_var.dtype))
            x_hat = (x - mean) / torch.sqrt(var + self.eps)
        else:
            mean = p.running_mean
            var = p.running_var
            x_hat = (x - mean) / torch.sqrt(var + self.eps)
        return x_hat * p.gamma + p.beta


def domain_norm(x: torch.Tensor, domain: "DomainId | str", params: DomainNorm,
                training: bool) -> torch.Tensor:
    """Functional entry point for a single normalization site."""
    key = domain.value if isinstance(domain, DomainId) else str(domain)
    was_training = params.training
    params.train(training)
    try:
        return params(x, key)
    finally:
        params.train(was_training)


@dataclass
class _WindowPlan:
    pad_index: torch.Tensor   # (W, L) long, row index or 0 at pads
    keep_mask: torch.Tensor   # (W, 1, 1, L) bool, True where a real point sits
    win_of_row: torch.Tensor  # (K,) long
    rank_of_row: torch.Tensor  # (K,) long


@dataclass
class _LevelPlan:
    assign: torch.Tensor      # (N_prev,) long: point -> pooled cell
    counts: torch.Tensor      # (K, 1) float
    n_cells: int
    window: _WindowPlan


@dataclass
class ScenePlan:
    """Geometry-derived constants of one (scene, domain) pair.

    Everything here depends only on point coordinates and the voxel table, so
    plans are cached across training steps.
    """

    order: np.ndarray         # canonical sort of the input points
    inverse: np.ndarray
    stem_feats: torch.Tensor  # (N, 3 + fourier_dim) canonical order
    pos_encoding: torch.Tensor  # (N, fourier_dim) canonical order
    positions_sorted: np.ndarray
    center: np.ndarray
    scale: float
    levels: list


def _build_window_plan(positions: np.ndarray, window_size: float) -> _WindowPlan:
    cells = np.floor(positions / window_size).astype(np.int64)
    _, win_ids = np.unique(cells, axis=0, return_inverse=True)
    order = np.argsort(win_ids, kind="stable")
    sorted_wins = win_ids[order]
    starts = np.flatnonzero(np.r_[True, sorted_wins[1:] != sorted_wins[:-1]])
    counts = np.diff(np.r_[starts, sorted_wins.size])
    n_windows = starts.size
    l_max = int(counts.max())

    rank = np.arange(sorted_wins.size) - np.repeat(starts, counts)
    win_compact = np.repeat(np.arange(n_windows), counts)

    win_of_row = np.empty(win_ids.size, dtype=np.int64)
    rank_of_row = np.empty(win_ids.size, dtype=np.int64)
    win_of_row[order] = win_compact
    rank_of_row[order] = rank

    pad_index = np.zeros((n_windows, l_max), dtype=np.int64)
    real = np.zeros((n_windows, l_max), dtype=bool)
    pad_index[win_compact, rank] = order
    real[win_compact, rank] = True

    return _WindowPlan(
        pad_index=torch.from_numpy(pad_index),
        keep_mask=torch.from_numpy(real).view(n_windows, 1, 1, l_max),
        win_of_row=torch.from_numpy(win_of_row),
        rank_of_row=torch.from_numpy(rank_of_row),
    )


def build_scene_plan(positions: np.ndarray, domain: DomainId, cfg: EncoderConfig) -> ScenePlan:
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    order = np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0]))
    inverse = np.empty(n, dtype=np.int64)
    inverse[order] = np.arange(n)
    pos_sorted = positions[order]

    center, scale = scene_frame(pos_sorted)
    centered = pos_sorted - center
    pe = fourier_encode(centered, cfg.fourier, scale)
    stem = np.concatenate([centered, pe], axis=1)

    voxel_sizes = cfg.voxel_sizes[domain.value]
    levels = []
    level_pos = pos_sorted
    for stage in range(cfg.n_stages):
        v = voxel_sizes[stage]
        cells = np.floor(level_pos / v).astype(np.int64)
        _, assign, counts = np.unique(cells, axis=0, return_inverse=True, return_counts=True)
        k = counts.shape[0]
        pooled_pos = np.zeros((k, 3))
        np.add.at(pooled_pos, assign, level_pos)
        pooled_pos /= counts[:, None]
        window = _build_window_plan(pooled_pos, v * cfg.window_factor)
        levels.append(_LevelPlan(
            assign=torch.from_numpy(assign.astype(np.int64)),
            counts=torch.from_numpy(counts.astype(np.float64)).view(-1, 1),
            n_cells=k,
            window=window,
        ))
        level_pos = pooled_pos

    return ScenePlan(
        order=order,
        inverse=inverse,
        stem_feats=torch.from_numpy(stem.astype(np.float32)),
        pos_encoding=torch.from_numpy(pe.astype(np.float32)),
        positions_sorted=pos_sorted,
        center=center,
        scale=scale,
        levels=levels,
    )


def _scatter_mean(x: torch.Tensor, assign: torch.Tensor, counts: torch.Tensor,
                  n_cells: int) -> torch.Tensor:
    acc = torch.zeros(n_cells, x.shape[1], dtype=torch.float64)
    acc = acc.index_add(0, assign, x.double())
    return (acc / counts).to(x.dtype)


class WindowAttention(nn.Module):
    """Multi-head self-attention restricted to grid-cell windows."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, window: _WindowPlan) -> torch.Tensor:
        w, l = window.pad_index.shape
        qkv = self.qkv(x)[window.pad_index]  # (W, L, 3D)
        qkv = qkv.view(w, l, 3, self.n_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=window.keep_mask)
        out = out.permute(0, 2, 1, 3).reshape(w, l, -1)
        rows = out[window.win_of_row, window.rank_of_row]
        return self.proj(rows)


class EncoderBlock(nn.Module):
    """Pre-norm residual block: windowed attention then a feedforward."""

    def __init__(self, cfg: EncoderConfig, keys: list[str]):
        super().__init__()
        d = cfg.embed_dim
        self.norm1 = DomainNorm(d, keys, cfg.momentum, cfg.eps)
        self.attn = WindowAttention(d, cfg.n_heads)
        self.norm2 = DomainNorm(d, keys, cfg.momentum, cfg.eps)
        self.ffn = nn.Sequential(
            nn.Linear(d, cfg.ffn_hidden), nn.GELU(), nn.Linear(cfg.ffn_hidden, d)
        )

    def forward(self, x: torch.Tensor, key: str, window: _WindowPlan) -> torch.Tensor:
        x = x + self.attn(self.norm1(x, key), window)
        x = x + self.ffn(self.norm2(x, key))
        return x


class _Stage(nn.Module):
    def __init__(self, cfg: EncoderConfig, n_blocks: int, keys: list[str]):
        super().__init__()
        self.blocks = nn.ModuleList(EncoderBlock(cfg, keys) for _ in range(n_blocks))

    def forward(self, x, key, window):
        for block in self.blocks:
            x = block(x, key, window)
        return x


class _UpBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig, keys: list[str]):
        super().__init__()
        d = cfg.embed_dim
        self.fuse = nn.Linear(2 * d, d)
        self.norm = DomainNorm(d, keys, cfg.momentum, cfg.eps)

    def forward(self, skip, up, key):
        return F.gelu(self.norm(self.fuse(torch.cat([skip, up], dim=1)), key))


class _Stem(nn.Module):
    def __init__(self, cfg: EncoderConfig, keys: list[str]):
        super().__init__()
        in_dim = 3 + cfg.fourier.output_dim
        self.proj = nn.Linear(in_dim, cfg.embed_dim)
        self.norm = DomainNorm(cfg.embed_dim, keys, cfg.momentum, cfg.eps)

    def forward(self, feats, key):
        return F.gelu(self.norm(self.proj(feats), key))


class PointEncoder(nn.Module):
    """U-shaped hierarchical encoder producing one embedding per point."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        keys = cfg.norm_keys()
        self.stem = _Stem(cfg, keys)
        self.stages = nn.ModuleList(
            _Stage(cfg, cfg.n_attention_blocks[i], keys) for i in range(cfg.n_stages)
        )
        self.ups = nn.ModuleList(_UpBlock(cfg, keys) for _ in range(cfg.n_stages))
        self._plan_cache: dict = {}

    def plan_for(self, positions: np.ndarray, domain: DomainId) -> ScenePlan:
        digest = hashlib.blake2b(
            np.ascontiguousarray(positions, dtype=np.float32).tobytes(), digest_size=16
        ).digest()
        cache_key = (digest, domain.value)
        plan = self._plan_cache.get(cache_key)
        if plan is None:
            plan = build_scene_plan(positions, domain, self.cfg)
            if len(self._plan_cache) >= 256:
                self._plan_cache.pop(next(iter(self._plan_cache)))
            self._plan_cache[cache_key] = plan
        return plan

    def forward(self, plan: ScenePlan, norm_key: str) -> torch.Tensor:
        """Embeddings in the plan's canonical point order, shape (N, D)."""
        skips = [self.stem(plan.stem_feats, norm_key)]
        for stage, level in zip(self.stages, plan.levels):
            pooled = _scatter_mean(skips[-1], level.assign, level.counts, level.n_cells)
            skips.append(stage(pooled, norm_key, level.window))

        h = skips[-1]
        for i in range(self.cfg.n_stages - 1, -1, -1):
            h = self.ups[i](skips[i], h[plan.levels[i].assign], norm_key)
        return h


def encode_point_cloud(scene: SceneSample, encoder: PointEncoder,
                       training: bool = False, norm_key: "str | None" = None
                       ) -> torch.Tensor:
    """Per-point features of a scene, in the scene's original point order."""
    if encoder is None:
        raise ModelStateError("encoder weights not initialized")
    if norm_key is None:
        norm_key = norm_key_for(encoder.cfg, scene)
    plan = encoder.plan_for(scene.positions, scene.domain)
    was_training = encoder.training
    encoder.train(training)
    try:
        feats = encoder(plan, norm_key)
    finally:
        encoder.train(was_training)
    return feats[torch.from_numpy(plan.inverse)]
