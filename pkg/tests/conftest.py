"""Shared fixtures. Heavy trained-model fixtures cache their artifacts under
.cache/ keyed by a config digest, so repeated test runs skip retraining."""

from __future__ import annotations

import hashlib
import json
import sys
import time
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from snapkit.backbone import EncoderConfig
from snapkit.datagen import generate_corpus
from snapkit.maskdec import DecoderConfig
from snapkit.model import ModelConfig, SnapModel, load_checkpoint
from snapkit.train import TrainConfig, fit

CACHE_ROOT = Path(__file__).resolve().parent.parent / ".cache"


def tiny_model(norm_mode: str = "domain", seed: int = 0,
               dataset_names: tuple = ()) -> SnapModel:
    """Small model for fast unit tests."""
    enc = EncoderConfig(
        embed_dim=32, n_stages=2,
        voxel_sizes={"indoor": (0.2, 0.4), "outdoor": (2.0, 4.0), "aerial": (1.0, 2.0)},
        n_attention_blocks=(1, 1), n_heads=2, norm_mode=norm_mode,
        ffn_hidden=64, dataset_names=dataset_names,
    )
    dec = DecoderConfig(n_blocks=2, n_heads=2, ffn_hidden=64)
    return SnapModel(ModelConfig(encoder=enc, decoder=dec, init_seed=seed))


def _digest(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def cached_training(tag: str, key: dict, train_fn):
    """Run train_fn(out_dir) once per (tag, key); reuse artifacts afterwards.

    train_fn must write checkpoint.zip into out_dir and return a metadata
    dict; the metadata is stored next to the checkpoint and returned on
    cache hits together with the loaded model.
    """
    out_dir = CACHE_ROOT / f"{tag}-{_digest(key)}"
    meta_path = out_dir / "meta.json"
    ckpt_path = out_dir / "checkpoint.zip"
    if not (meta_path.exists() and ckpt_path.exists()):
        out_dir.mkdir(parents=True, exist_ok=True)
        started = time.time()
        meta = train_fn(out_dir) or {}
        meta["train_seconds"] = time.time() - started
        meta["n_threads"] = torch.get_num_threads()
        meta_path.write_text(json.dumps(meta, indent=2))
    meta = json.loads(meta_path.read_text())
    return load_checkpoint(ckpt_path), meta, out_dir


OVERFIT_KEY = {
    "corpus": {"domain": "indoor", "n_scenes": 20, "seed": 11,
               "total_points": 2048, "objects": [4, 8]},
    "train": {"epochs": 200, "seed": 3, "lr": 1.0e-3},
    "model": {"embed_dim": 64, "init_seed": 3},
    "rev": 2,
}


def overfit_scenes():
    c = OVERFIT_KEY["corpus"]
    return generate_corpus(c["domain"], c["n_scenes"], c["seed"],
                           total_points=c["total_points"],
                           n_objects_range=tuple(c["objects"]),
                           corpus_name="overfit")


@pytest.fixture(scope="session")
def overfit_bundle():
    """The acceptance overfit experiment: scenes + trained model + metadata."""
    scenes = overfit_scenes()

    def train_fn(out_dir):
        cfg = TrainConfig(epochs=OVERFIT_KEY["train"]["epochs"],
                          seed=OVERFIT_KEY["train"]["seed"],
                          learning_rate=OVERFIT_KEY["train"]["lr"])
        model = SnapModel(ModelConfig(init_seed=OVERFIT_KEY["model"]["init_seed"]))
        fit(model, [scenes], cfg, out_dir)
        return {"epochs": cfg.epochs, "n_scenes": len(scenes)}

    model, meta, out_dir = cached_training("overfit", OVERFIT_KEY, train_fn)
    return {"model": model, "scenes": scenes, "meta": meta, "out_dir": out_dir}


ABLATION_KEY = {
    "corpus": {"n_scenes": 8, "seed": 23, "total_points": 1024, "objects": [4, 8]},
    "train": {"epochs": 120, "seed": 5, "lr": 1.0e-3},
    "rev": 1,
}


def ablation_scenes():
    c = ABLATION_KEY["corpus"]
    indoor = generate_corpus("indoor", c["n_scenes"], c["seed"],
                             total_points=c["total_points"],
                             n_objects_range=tuple(c["objects"]),
                             corpus_name="abl-indoor")
    outdoor = generate_corpus("outdoor", c["n_scenes"], c["seed"] + 100,
                              total_points=c["total_points"],
                              n_objects_range=tuple(c["objects"]),
                              corpus_name="abl-outdoor")
    return indoor, outdoor


def _train_ablation(norm_mode: str):
    indoor, outdoor = ablation_scenes()

    def train_fn(out_dir):
        cfg = TrainConfig(epochs=ABLATION_KEY["train"]["epochs"],
                          seed=ABLATION_KEY["train"]["seed"],
                          learning_rate=ABLATION_KEY["train"]["lr"],
                          norm_mode=norm_mode)
        enc = EncoderConfig(norm_mode=norm_mode)
        model = SnapModel(ModelConfig(encoder=enc,
                                      init_seed=ABLATION_KEY["train"]["seed"]))
        fit(model, [indoor, outdoor], cfg, out_dir)
        return {"norm_mode": norm_mode}

    key = dict(ABLATION_KEY, norm_mode=norm_mode)
    model, meta, out_dir = cached_training(f"ablation-{norm_mode}", key, train_fn)
    return {"model": model, "scenes": (indoor, outdoor), "meta": meta,
            "out_dir": out_dir}


@pytest.fixture(scope="session")
def ablation_domain_bundle():
    return _train_ablation("domain")


@pytest.fixture(scope="session")
def ablation_batch_bundle():
    return _train_ablation("batch")
