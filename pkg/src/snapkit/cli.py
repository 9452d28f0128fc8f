"""snapkit command line: data generation, training, auto-segmentation,
metric evaluation, and the inference service."""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from .autoprompt import AutoPromptConfig, generate_auto_masks
from .backbone import EncoderConfig
from .datagen import generate_corpus, load_corpus, write_corpus
from .metrics import average_precision, iou_at_k, panoptic_quality
from .model import ModelConfig, SnapModel, load_checkpoint
from .pcdata import DomainId, load_scene
from .rle import rle_decode, rle_encode
from .textsem import HashEmbeddingProvider, assemble_panoptic, build_vocabulary, \
    classify_masks
from .train import TrainConfig, fit


@click.group()
def main():
    """Promptable point-cloud segmentation toolkit."""


@main.command("gen-data")
@click.option("--domain", "-d", required=True,
              type=click.Choice([d.value for d in DomainId]))
@click.option("--n-scenes", "-k", default=20, show_default=True)
@click.option("--seed", "-s", default=0, show_default=True)
@click.option("--out", "-o", required=True, type=click.Path(path_type=Path))
@click.option("--points", default=2048, show_default=True,
              help="total points per scene")
@click.option("--min-objects", default=4, show_default=True)
@click.option("--max-objects", default=8, show_default=True)
def gen_data(domain, n_scenes, seed, out, points, min_objects, max_objects):
    """Generate a synthetic scene corpus of labeled primitives."""
    scenes = generate_corpus(domain, n_scenes, seed, total_points=points,
                             n_objects_range=(min_objects, max_objects),
                             corpus_name=out.name)
    paths = write_corpus(scenes, out)
    click.echo(f"wrote {len(paths)} scenes to {out}")


@main.command()
@click.option("--config", "-c", type=click.Path(exists=True, path_type=Path),
              help="JSON file mirroring TrainConfig field names")
@click.option("--data-dirs", required=True,
              help="comma-separated scene archive directories, one per dataset")
@click.option("--out", "-o", required=True, type=click.Path(path_type=Path))
@click.option("--epochs", type=int, default=None, help="override config epochs")
def train(config, data_dirs, out, epochs):
    """Train a model on one or more scene corpora."""
    cfg = TrainConfig.from_dict(json.loads(config.read_text())) if config else TrainConfig()
    if epochs is not None:
        cfg.epochs = epochs
    dirs = [Path(d) for d in data_dirs.split(",")]
    datasets = [load_corpus(d) for d in dirs]
    for d, scenes in zip(dirs, datasets):
        if not scenes:
            raise click.ClickException(f"no scenes found in {d}")

    encoder_cfg = EncoderConfig(norm_mode=cfg.norm_mode,
                                dataset_names=tuple(d.name for d in dirs))
    model = SnapModel(ModelConfig(encoder=encoder_cfg, init_seed=cfg.seed))

    def progress(epoch, reports):
        if (epoch + 1) % max(1, cfg.epochs // 20) == 0:
            recent = reports[-sum(len(ds) for ds in datasets):]
            mean_total = float(np.mean([r.total for r in recent])) if recent else float("nan")
            click.echo(f"epoch {epoch + 1}/{cfg.epochs}  loss {mean_total:.4f}")

    ckpt, reports = fit(model, datasets, cfg, out, progress=progress)
    click.echo(f"checkpoint: {ckpt}")
    click.echo(f"log: {Path(out) / 'train_log.jsonl'} ({len(reports)} steps)")


@main.command()
@click.option("--scene", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--domain", "-d", default=None,
              type=click.Choice([d.value for d in DomainId]))
@click.option("--checkpoint", required=True, type=click.Path(exists=True, path_type=Path))
@click.option("--out", "-o", required=True, type=click.Path(path_type=Path))
@click.option("--v0", type=float, default=None, help="initial voxel size override")
@click.option("--k-max", type=int, default=None)
@click.option("--tau-s", type=float, default=None)
@click.option("--tau-nms", type=float, default=None)
def auto(scene, domain, checkpoint, out, v0, k_max, tau_s, tau_nms):
    """Segment everything in a scene via iterative auto-prompting."""
    model = load_checkpoint(checkpoint)
    sample = load_scene(scene)
    dom = DomainId.parse(domain) if domain else sample.domain
    cfg = AutoPromptConfig()
    if v0 is not None:
        cfg.v0[dom.value] = v0
    if k_max is not None:
        cfg.k_max = k_max
    if tau_s is not None:
        cfg.tau_s = tau_s
    if tau_nms is not None:
        cfg.tau_nms = tau_nms
    result = generate_auto_masks(model, sample, dom, cfg)

    payload = {
        "scene_id": sample.scene_id,
        "n_masks": result.n_masks,
        "masks": [rle_encode(m) for m in result.masks],
        "scores": [float(s) for s in result.scores],
        "provenance": [{"iteration": it, "prompt_point": list(pt)}
                       for it, pt in result.provenance],
    }
    if sample.class_names and result.n_masks:
        vocab = build_vocabulary(HashEmbeddingProvider(model.cfg.d_clip),
                                 sample.class_names)
        class_ids, _ = classify_masks(np.stack(result.clip_embeddings), vocab,
                                      model.cfg.temperature)
        payload["class_ids"] = [int(c) for c in class_ids]
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(payload))
    click.echo(f"{result.n_masks} masks -> {out}")


@main.command("eval")
@click.option("--pred", required=True, type=click.Path(exists=True, path_type=Path),
              help="directory of <scene>.result.json prediction files")
@click.option("--gt", required=True, type=click.Path(exists=True, path_type=Path),
              help="directory of ground-truth scene archives")
@click.option("--ks", default="1,3,5,7,10", show_default=True)
@click.option("--report", required=True, type=click.Path(path_type=Path))
@click.option("--things", default=None, help="comma-separated thing class ids")
@click.option("--stuff", default=None, help="comma-separated stuff class ids")
@click.option("--class-agnostic", is_flag=True, default=False)
def eval_cmd(pred, gt, ks, report, things, stuff, class_agnostic):
    """Score stored predictions against ground-truth scenes.

    Emits IoU@k (when prediction files carry click trajectories), AP, and
    PQ/SQ/RQ, aggregated over scenes.
    """
    ks = [int(k) for k in ks.split(",")]
    scenes = {p.name.replace(".zip", ""): p for p in sorted(gt.iterdir())
              if p.is_dir() or p.suffix == ".zip"}
    out: dict = {"scenes": {}, "IoU@k": None}
    trajectories = []
    pq_accum, ap_accum = [], []

    for name, scene_path in scenes.items():
        pred_path = pred / f"{name}.result.json"
        if not pred_path.exists():
            continue
        scene = load_scene(scene_path)
        data = json.loads(pred_path.read_text())
        masks = [rle_decode(r) for r in data.get("masks", [])]
        scores = data.get("scores", [])
        class_ids = data.get("class_ids")
        scene_report = {}

        if data.get("trajectories"):
            trajectories.extend(data["trajectories"].values())

        if masks and class_ids is not None:
            gt_ids = scene.present_instances()
            gt_masks = [scene.instance_mask(i) for i in gt_ids]
            gt_classes = [int(scene.class_ids[scene.instance_ids == i][0]) for i in gt_ids]
            ap = average_precision(masks, scores, class_ids, gt_masks, gt_classes)
            ap_accum.append(ap)
            scene_report["AP"] = ap["AP"]

            from .autoprompt import SegmentationResult
            result = SegmentationResult(masks=masks, scores=scores,
                                        clip_embeddings=[None] * len(masks))
            pred_inst, pred_cls = assemble_panoptic(result, class_ids, scene.n_points)
            all_classes = set(gt_classes) | set(int(c) for c in class_ids)
            things_set = set(int(c) for c in things.split(",")) if things else all_classes
            stuff_set = set(int(c) for c in stuff.split(",")) if stuff else set()
            pq = panoptic_quality((pred_inst, pred_cls),
                                  (scene.instance_ids, scene.class_ids),
                                  things_set, stuff_set, class_agnostic=class_agnostic)
            pq_accum.append(pq)
            scene_report.update({k: pq[k] for k in ("PQ", "SQ", "RQ", "PQ_th", "PQ_st")})
        out["scenes"][name] = scene_report

    if trajectories:
        usable = [t for t in trajectories if len(t) >= max(ks)]
        if usable:
            out["IoU@k"] = {str(k): v for k, v in iou_at_k(usable, ks).items()}
    if pq_accum:
        out["PQ"] = float(np.mean([p["PQ"] for p in pq_accum]))
        out["SQ"] = float(np.mean([p["SQ"] for p in pq_accum]))
        out["RQ"] = float(np.mean([p["RQ"] for p in pq_accum]))
    if ap_accum:
        out["AP"] = float(np.mean([a["AP"] for a in ap_accum]))
        out["AP50"] = float(np.mean([a["AP50"] for a in ap_accum]))
        out["AP25"] = float(np.mean([a["AP25"] for a in ap_accum]))

    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(json.dumps(out, indent=2))
    click.echo(f"report -> {report}")


@main.command()
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path),
              default=None, help="omit to serve a freshly initialized model")
@click.option("--port", default=8080, show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
def serve(checkpoint, port, host):
    """Run the HTTP inference service."""
    import uvicorn

    from .service import create_app

    model = load_checkpoint(checkpoint) if checkpoint else SnapModel()
    model.eval()
    app = create_app(model)
    uvicorn.run(app, host=host, port=port, log_level="warning")


@main.command("export-openapi")
@click.option("--out", "-o", required=True, type=click.Path(path_type=Path))
def export_openapi(out):
    """Write the service's OpenAPI schema to a JSON file."""
    from .service import create_app

    app = create_app(SnapModel())
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(app.openapi(), indent=2))
    click.echo(f"schema -> {out}")


if __name__ == "__main__":
    main()
