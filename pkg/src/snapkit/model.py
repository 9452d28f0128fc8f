"""Full segmentation model: backbone + prompt encoder + decoder + heads,
with deterministic initialization and a language-neutral checkpoint format.

Checkpoints are zip archives holding a JSON config echo plus one raw
little-endian float32 binary per named parameter. Parameter names follow the
``backbone.stage{i}.block{j}...`` / ``decoder.block{j}...`` / ``heads.*``
convention; loading a saved checkpoint reproduces inference bit-exactly.
"""

from __future__ import annotations

import json
import math
import re
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbone import (EncoderConfig, ModelStateError, PointEncoder, ScenePlan,
                       norm_key_for)
from .maskdec import (DecoderConfig, Heads, MaskDecoder, MaskPrediction, decode,
                      run_heads)
from .pcdata import DomainId, SceneSample
from .promptenc import PromptProjection, PromptSet, TaskTokens, assemble_token_sequence


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    d_clip: int = 32
    temperature: float = 0.07
    init_seed: int = 0

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "decoder": vars(self.decoder).copy(),
            "d_clip": self.d_clip,
            "temperature": self.temperature,
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            encoder=EncoderConfig.from_dict(d["encoder"]),
            decoder=DecoderConfig(**d["decoder"]),
            d_clip=int(d["d_clip"]),
            temperature=float(d["temperature"]),
            init_seed=int(d.get("init_seed", 0)),
        )


class SnapModel(nn.Module):
    def __init__(self, cfg: "ModelConfig | None" = None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        d = self.cfg.encoder.embed_dim
        fourier = self.cfg.encoder.fourier
        self.backbone = PointEncoder(self.cfg.encoder)
        self.prompt = PromptProjection(d, fourier)
        self.tokens = TaskTokens(d)
        self.decoder = MaskDecoder(self.cfg.decoder, d, fourier)
        self.heads = Heads(d, self.cfg.d_clip, self.cfg.decoder.head_mlp_depth)
        # when True, normalization sites stay in inference mode (frozen
        # running stats) even while the rest of the model trains
        self.norm_stats_frozen = False
        self._reset_parameters(self.cfg.init_seed)

    def train(self, mode: bool = True) -> "SnapModel":
        super().train(mode)
        if mode and self.norm_stats_frozen:
            from .backbone import DomainNorm
            for module in self.modules():
                if isinstance(module, DomainNorm):
                    module.eval()
        return self

    def _reset_parameters(self, seed: int):
        """Deterministic init from a private generator, independent of the
        global RNG state."""
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
                if p.dim() >= 2:
                    fan_in, fan_out = p.shape[1], p.shape[0]
                    bound = math.sqrt(6.0 / (fan_in + fan_out))
                    p.uniform_(-bound, bound, generator=g)
                elif name.endswith("_token"):
                    p.normal_(0.0, 0.02, generator=g)
                elif name.endswith(".gamma") or "norm" in name and name.endswith(".weight"):
                    p.fill_(1.0)
                else:
                    p.zero_()

    @property
    def embed_dim(self) -> int:
        return self.cfg.encoder.embed_dim


@dataclass
class SceneEncoding:
    """Cached backbone output for one (scene, domain) pair.

    ``features`` is in the plan's canonical point order; masks produced from
    it are mapped back to the scene's original order before leaving
    :func:`predict_with_encoding`.
    """

    plan: ScenePlan
    features: torch.Tensor
    norm_key: str
    domain: DomainId


def resolve_norm_key(model: SnapModel, scene: SceneSample, domain: DomainId) -> str:
    cfg = model.cfg.encoder
    if cfg.norm_mode == "domain":
        return domain.value
    return norm_key_for(cfg, scene)


def encode_scene(model: SnapModel, scene: SceneSample,
                 domain: "DomainId | str | None" = None) -> SceneEncoding:
    """Run the backbone once in inference mode and cache the result."""
    dom = DomainId.parse(domain) if domain is not None else scene.domain
    key = resolve_norm_key(model, scene, dom)
    plan = model.backbone.plan_for(scene.positions, dom)
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = model.backbone(plan, key)
    finally:
        model.train(was)
    return SceneEncoding(plan=plan, features=feats, norm_key=key, domain=dom)


def predict_with_encoding(model: SnapModel, enc: SceneEncoding, prompts: PromptSet,
                          training: bool = False) -> MaskPrediction:
    """Prompt-conditioned prediction against cached backbone features."""
    plan = enc.plan
    frame = (plan.center, plan.scale)
    token_seq, pad_mask = assemble_token_sequence(
        prompts, enc.features, plan.positions_sorted, model.tokens, model.prompt, frame
    )
    z_sp, z_pc = decode(enc.features, plan.positions_sorted, token_seq, pad_mask,
                        model.decoder, point_pe=plan.pos_encoding, batched=training,
                        assume_sorted=True)
    pred = run_heads(z_sp, z_pc, pad_mask, model.heads, training)
    inv = torch.from_numpy(plan.inverse)
    pred.mask_logits = pred.mask_logits[:, inv]
    pred.mask_probs = pred.mask_probs[:, inv]
    if pred.aux_logits is not None:
        pred.aux_logits = pred.aux_logits[:, :, inv]
    return pred


def predict(model: SnapModel, scene: SceneSample, prompts: PromptSet,
            domain: "DomainId | str | None" = None,
            training: bool = False) -> MaskPrediction:
    """End-to-end composition: encode points, encode prompts, decode, heads.

    In inference mode everything runs under ``no_grad`` and outputs are
    detached; in training mode gradients flow end to end and per-click
    auxiliary mask logits are included.
    """
    if model is None:
        raise ModelStateError("model not initialized")
    dom = DomainId.parse(domain) if domain is not None else scene.domain
    key = resolve_norm_key(model, scene, dom)
    plan = model.backbone.plan_for(scene.positions, dom)

    was = model.training
    model.train(training)
    try:
        if training:
            feats = model.backbone(plan, key)
            enc = SceneEncoding(plan=plan, features=feats, norm_key=key, domain=dom)
            return predict_with_encoding(model, enc, prompts, training=True)
        with torch.no_grad():
            feats = model.backbone(plan, key)
            enc = SceneEncoding(plan=plan, features=feats, norm_key=key, domain=dom)
            return predict_with_encoding(model, enc, prompts, training=False)
    finally:
        model.train(was)


# --- checkpoint I/O ---------------------------------------------------------

_TO_CANONICAL = [
    (re.compile(r"\.stages\.(\d+)\."), r".stage\1."),
    (re.compile(r"\.blocks\.(\d+)\."), r".block\1."),
    (re.compile(r"\.ups\.(\d+)\."), r".up\1."),
    (re.compile(r"\.keys\.([^.]+)\."), r".\1."),
]

_FROM_CANONICAL = [
    (re.compile(r"\.stage(\d+)\."), r".stages.\1."),
    (re.compile(r"\.block(\d+)\."), r".blocks.\1."),
    (re.compile(r"\.up(\d+)\."), r".ups.\1."),
    (re.compile(r"\.(norm\d*)\.([^.]+)\.(gamma|beta|running_mean|running_var)$"),
     r".\1.keys.\2.\3"),
]


def _canonical_name(state_key: str) -> str:
    for pat, repl in _TO_CANONICAL:
        state_key = pat.sub(repl, state_key)
    return state_key


def _state_key(canonical: str) -> str:
    for pat, repl in _FROM_CANONICAL:
        canonical = pat.sub(repl, canonical)
    return canonical


def save_checkpoint(model: SnapModel, path: "str | Path") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    manifest = {}
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("config.json", json.dumps(
            {"format": 1, "model": model.cfg.to_dict()}, indent=2
        ))
        for key in sorted(state):
            name = _canonical_name(key)
            arr = state[key].detach().cpu().numpy().astype("<f4")
            manifest[name] = {"dtype": "f32", "shape": list(arr.shape)}
            zf.writestr(f"params/{name}.bin", arr.tobytes())
        zf.writestr("manifest.json", json.dumps(manifest, indent=2))


def load_checkpoint(path: "str | Path") -> SnapModel:
    path = Path(path)
    if not path.exists():
        raise ModelStateError(f"checkpoint {path} does not exist")
    with zipfile.ZipFile(path) as zf:
        config = json.loads(zf.read("config.json"))
        manifest = json.loads(zf.read("manifest.json"))
        model = SnapModel(ModelConfig.from_dict(config["model"]))
        state = {}
        for name, meta in manifest.items():
            raw = np.frombuffer(zf.read(f"params/{name}.bin"), dtype="<f4")
            arr = raw.reshape(meta["shape"]).copy()
            state[_state_key(name)] = torch.from_numpy(arr)
    model.load_state_dict(state, strict=True)
    model.eval()
    return model
