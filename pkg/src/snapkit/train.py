"""Training loop: round-robin multi-dataset loading, per-scene object
sampling, a randomized click budget, and AdamW optimization of the summed
mask / auxiliary / score / text losses.

A batch is one scene. For each step the loop samples up to
``objects_per_scene`` objects, draws a click count k ~ U{1..max_click_budget}
shared by the step, clicks each object k times, and backpropagates the total
loss. With domain-keyed normalization, only the active domain's
normalization parameters receive gradient or running-statistics updates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from .clicksim import sample_initial_clicks
from .losses import (ClickWeightConfig, LossReport, aux_loss, click_weight,
                     combined_loss, dice_loss, focal_loss, score_loss,
                     text_loss, total_loss)
from .model import SnapModel, predict, save_checkpoint
from .pcdata import SceneSample
from .promptenc import PromptSet
from .textsem import HashEmbeddingProvider, TextVocabulary, build_vocabulary


class TrainConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    objects_per_scene: int = 32
    max_click_budget: int = 10
    learning_rate: float = 1.0e-3
    weight_decay: float = 1.0e-2
    seed: int = 0
    norm_mode: str = "domain"
    click_weights: ClickWeightConfig = field(default_factory=ClickWeightConfig)
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    score_tau: float = 0.5
    text_gamma: float = 2.0
    checkpoint_every: int = 0  # epochs; 0 = only at the end
    check_grad_isolation: bool = False
    # last N epochs train against frozen (re-estimated) running statistics,
    # closing the batch-stats/running-stats gap at inference; None = epochs/4
    freeze_stats_epochs: "int | None" = None
    # fraction of steps whose click sets mix initial clicks with refinement
    # clicks sampled from the current model's false-negative regions, so the
    # click patterns seen at iterative inference are covered in training
    refinement_click_prob: float = 0.5

    def __post_init__(self):
        if self.objects_per_scene < 1:
            raise TrainConfigError("objects_per_scene must be >= 1")
        if self.max_click_budget < 1:
            raise TrainConfigError("max_click_budget must be >= 1")

    def resolved_freeze_epochs(self) -> int:
        if self.freeze_stats_epochs is None:
            return self.epochs // 4
        return min(self.freeze_stats_epochs, self.epochs)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("click_weights"), dict):
            d["click_weights"] = ClickWeightConfig(**d["click_weights"])
        return cls(**d)


def round_robin_batches(datasets: "list[list]", seed: int):
    """One epoch of scenes, cycling the datasets in fixed order.

    Every dataset contributes the same number of scenes per epoch: each is
    shuffled (per seed) and smaller ones are repeated until they match the
    largest. Yields one scene at a time, alternating datasets.
    """
    if not datasets or any(len(d) == 0 for d in datasets):
        raise TrainConfigError("every dataset must be nonempty")
    rng = np.random.default_rng(seed)
    length = max(len(d) for d in datasets)
    orders = []
    for d in datasets:
        perm = rng.permutation(len(d))
        orders.append(np.resize(perm, length))  # cyclic repetition
    for i in range(length):
        for d, order in zip(datasets, orders):
            yield d[order[i]]


class _VocabCache:
    def __init__(self, d_clip: int):
        self.provider = HashEmbeddingProvider(dimension=d_clip)
        self._cache: dict = {}

    def get(self, class_names: "list[str]") -> TextVocabulary:
        key = tuple(class_names)
        if key not in self._cache:
            self._cache[key] = build_vocabulary(self.provider, list(class_names))
        return self._cache[key]


def _object_class(scene: SceneSample, instance_id: int) -> int:
    idx = np.flatnonzero(scene.instance_ids == instance_id)
    return int(scene.class_ids[idx[0]])


def _assert_grad_isolation(model: SnapModel, active_key: str):
    for name, p in model.named_parameters():
        if ".keys." not in name:
            continue
        key = name.split(".keys.")[1].split(".")[0]
        if key != active_key and p.grad is not None:
            if bool((p.grad != 0).any()):
                raise AssertionError(
                    f"gradient leaked into inactive normalization key: {name}"
                )


def _sample_click_sets(model: SnapModel, scene: SceneSample, chosen, k: int,
                       cfg: TrainConfig, rng: np.random.Generator) -> list:
    """Click index sets for the sampled objects.

    Plain steps draw all k clicks uniformly from each object. Refinement
    steps draw an initial subset, run the current model once (inference
    mode), and draw the remaining clicks from each object's false-negative
    region, mirroring iterative inference.
    """
    from .clicksim import sample_refinement_click

    refine = k >= 2 and float(rng.uniform()) < cfg.refinement_click_prob
    if not refine:
        return [sample_initial_clicks(scene.instance_mask(i), k, rng).tolist()
                for i in chosen]

    j = int(rng.integers(1, k))  # initial clicks; the rest are refinements
    clicks = [sample_initial_clicks(scene.instance_mask(i), j, rng).tolist()
              for i in chosen]
    was = model.training
    model.eval()
    try:
        with torch.no_grad():
            pred = predict(model, scene,
                           PromptSet([scene.positions[np.array(c)] for c in clicks]))
    finally:
        model.train(was)
    binary = pred.binarized()
    for row, inst in enumerate(chosen):
        gt = scene.instance_mask(int(inst))
        for _ in range(k - j):
            nxt = sample_refinement_click(gt, binary[row], rng)
            if nxt is None:
                break
            clicks[row].append(nxt)
    return clicks


def train_step(model: SnapModel, scene: SceneSample, cfg: TrainConfig,
               rng: np.random.Generator, optimizer: torch.optim.Optimizer,
               vocab_cache: "_VocabCache | None" = None) -> "LossReport | None":
    """One optimization step on one scene; None if the scene has no objects."""
    instances = scene.present_instances()
    if instances.size == 0:
        return None
    m = min(cfg.objects_per_scene, instances.size)
    chosen = instances[rng.choice(instances.size, size=m, replace=False)]
    k = int(rng.integers(1, cfg.max_click_budget + 1))

    click_sets = _sample_click_sets(model, scene, chosen, k, cfg, rng)
    click_arrays = [scene.positions[np.array(idx)] for idx in click_sets]
    prompts = PromptSet(objects=click_arrays, object_ids=[int(i) for i in chosen])

    pred = predict(model, scene, prompts, training=True)

    targets = torch.from_numpy(np.stack(
        [scene.instance_mask(int(i)) for i in chosen]
    ).astype(np.float32))
    weights = click_weight(scene.positions, np.concatenate(click_arrays),
                           cfg.click_weights).astype(np.float32)

    if vocab_cache is None:
        vocab_cache = _VocabCache(model.cfg.d_clip)
    vocab = vocab_cache.get(scene.class_names)
    labels = [_object_class(scene, int(i)) for i in chosen]
    vocab_t = torch.from_numpy(vocab.embeddings.astype(np.float32))

    l_focal = focal_loss(pred.mask_logits, targets, weights,
                         gamma=cfg.focal_gamma, alpha=cfg.focal_alpha)
    l_dice = dice_loss(pred.mask_probs, targets, weights)
    l_aux = aux_loss(pred.aux_logits, targets, weights, pred.click_pad_mask,
                     gamma=cfg.focal_gamma, alpha=cfg.focal_alpha)
    l_score = score_loss(pred.score, pred.mask_probs, targets, tau=cfg.score_tau)
    l_text = text_loss(pred.clip_embedding, vocab_t, labels,
                       gamma=cfg.text_gamma, temperature=model.cfg.temperature)

    loss = combined_loss(l_focal, l_dice, l_aux, l_score, l_text)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.check_grad_isolation and cfg.norm_mode == "domain":
        _assert_grad_isolation(model, scene.domain.value)
    optimizer.step()

    return total_loss(l_focal.item(), l_dice.item(), l_aux.item(),
                      l_score.item(), l_text.item())


def reestimate_running_stats(model: SnapModel,
                             datasets: "list[list[SceneSample]]",
                             passes: int = 2) -> None:
    """Refit normalization running statistics under frozen weights.

    The training-time EMA is biased toward the scenes seen last (and toward
    stale weights); a cumulative average over the whole corpus at the final
    weights is what inference should normalize with. Weights are untouched.
    """
    from .backbone import DomainNorm
    from .model import resolve_norm_key

    norms = [m for m in model.modules() if isinstance(m, DomainNorm)]
    for norm in norms:
        norm.begin_stat_reestimation()
    was = model.training
    model.train(True)
    try:
        with torch.no_grad():
            for _ in range(passes):
                for dataset in datasets:
                    for scene in dataset:
                        key = resolve_norm_key(model, scene, scene.domain)
                        plan = model.backbone.plan_for(scene.positions, scene.domain)
                        model.backbone(plan, key)
    finally:
        model.train(was)
        for norm in norms:
            norm.end_stat_reestimation()


def fit(model: SnapModel, datasets: "list[list[SceneSample]]", cfg: TrainConfig,
        out_dir: "str | Path", progress=None) -> tuple[Path, "list[LossReport]"]:
    """Run the full schedule; writes checkpoint.zip and train_log.jsonl.

    Deterministic for a fixed config: data order, object sampling, clicks,
    and weight updates all derive from ``cfg.seed``. After the last epoch,
    normalization running statistics are re-estimated over the corpus at the
    final weights.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate,
                                  weight_decay=cfg.weight_decay)
    vocab_cache = _VocabCache(model.cfg.d_clip)
    reports: list[LossReport] = []
    log_path = out_dir / "train_log.jsonl"
    ckpt_path = out_dir / "checkpoint.zip"

    freeze_at = cfg.epochs - cfg.resolved_freeze_epochs()
    with log_path.open("w") as log:
        for epoch in range(cfg.epochs):
            if epoch == freeze_at:
                reestimate_running_stats(model, datasets)
                model.norm_stats_frozen = True
            seq = np.random.SeedSequence(entropy=cfg.seed, spawn_key=(epoch,))
            data_seed, click_seed = seq.generate_state(2)
            rng = np.random.default_rng(click_seed)
            for scene in round_robin_batches(datasets, int(data_seed)):
                report = train_step(model, scene, cfg, rng, optimizer, vocab_cache)
                if report is None:
                    log.write(json.dumps({"epoch": epoch, "skipped": scene.scene_id}) + "\n")
                    continue
                reports.append(report)
                log.write(json.dumps({"epoch": epoch, **report.to_dict()}) + "\n")
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, ckpt_path)
            if progress is not None:
                progress(epoch, reports)

    if freeze_at >= cfg.epochs:  # freeze never kicked in
        reestimate_running_stats(model, datasets)
    model.norm_stats_frozen = False
    save_checkpoint(model, ckpt_path)
    return ckpt_path, reports
