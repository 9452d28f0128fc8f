"""Corpus-level synthetic data helpers shared by the CLI and experiments."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .pcdata import (DomainId, SyntheticSceneConfig, generate_synthetic_scene,
                     save_scene)


def generate_corpus(domain: "DomainId | str", n_scenes: int, seed: int,
                    total_points: "int | None" = 2048,
                    n_objects_range: tuple = (4, 8),
                    extent: "float | None" = None,
                    corpus_name: "str | None" = None) -> "list[SceneSample]":
    """Deterministic list of scenes; scene_ids are prefixed with the corpus
    name so dataset-keyed normalization can route by prefix."""
    domain = DomainId.parse(domain)
    corpus_name = corpus_name or f"{domain.value}-synth"
    rng = np.random.default_rng(seed)
    scenes = []
    for i in range(n_scenes):
        cfg = SyntheticSceneConfig(
            seed=int(rng.integers(0, 2**31 - 1)),
            domain=domain,
            n_objects=int(rng.integers(n_objects_range[0], n_objects_range[1] + 1)),
            extent=extent,
            total_points=total_points,
            scene_id=f"{corpus_name}/scene_{i:03d}",
        )
        scenes.append(generate_synthetic_scene(cfg))
    return scenes


def write_corpus(scenes: "list[SceneSample]", out_dir: "str | Path") -> "list[Path]":
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for scene in scenes:
        name = scene.scene_id.split("/")[-1]
        path = out_dir / name
        save_scene(scene, path)
        paths.append(path)
    return paths


def load_corpus(data_dir: "str | Path") -> "list[SceneSample]":
    """All scene archives (subdirectories or .zip files) under a directory."""
    from .pcdata import load_scene

    data_dir = Path(data_dir)
    paths = sorted(
        [p for p in data_dir.iterdir()
         if (p.is_dir() and (p / "manifest.json").exists()) or p.suffix == ".zip"]
    )
    return [load_scene(p) for p in paths]
