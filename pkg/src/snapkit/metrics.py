"""Evaluation metrics: mask IoU, IoU@k curves, average precision, and
panoptic quality with things/stuff splits."""

from __future__ import annotations

import numpy as np


class MetricInputError(ValueError):
    pass


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two binary masks; empty/empty -> 1."""
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise MetricInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_at_k(trajectories, ks) -> dict:
    """Mean IoU after k clicks, averaged over objects.

    ``trajectories`` is a list (or dict values) of per-object IoU lists, each
    at least max(ks) long.
    """
    if isinstance(trajectories, dict):
        trajectories = list(trajectories.values())
    if not trajectories:
        raise MetricInputError("no trajectories")
    ks = list(ks)
    need = max(ks)
    for t in trajectories:
        if len(t) < need:
            raise MetricInputError(f"trajectory of length {len(t)} < k={need}")
    return {k: float(np.mean([t[k - 1] for t in trajectories])) for k in ks}


def _segments(instance_ids: np.ndarray, class_ids: np.ndarray) -> dict:
    """{instance_id: (point index array, class id)} for labeled segments."""
    out = {}
    for inst in np.unique(instance_ids):
        if inst < 0:
            continue
        idx = np.flatnonzero(instance_ids == inst)
        cls = int(class_ids[idx[0]])
        out[int(inst)] = (idx, cls)
    return out


def panoptic_quality(pred: tuple, gt: tuple, things: set, stuff: set,
                     class_agnostic: bool = False) -> dict:
    """PQ / SQ / RQ with per-class table and things/stuff aggregates.

    ``pred`` and ``gt`` are (instance_ids, class_ids) per-point pairs. A
    prediction matches a ground-truth segment of the same class when their
    IoU exceeds 0.5 (such matches are necessarily one-to-one). Unmatched
    predictions that overlap unlabeled ground truth (instance id < 0) by more
    than half are ignored rather than counted as false positives. Per class,
    PQ is computed as SQ * RQ, which makes the identity exact.
    """
    pred_inst, pred_cls = (np.asarray(a) for a in pred)
    gt_inst, gt_cls = (np.asarray(a) for a in gt)
    n = gt_inst.shape[0]
    if not (pred_inst.shape == pred_cls.shape == gt_inst.shape == gt_cls.shape == (n,)):
        raise MetricInputError("prediction and ground-truth maps must share length")

    if class_agnostic:
        # treat predicted classes as correct: match purely by IoU
        pred_cls = np.zeros_like(pred_cls)
        gt_cls = np.zeros_like(gt_cls)
        things = {0}
        stuff = set()

    pred_segs = _segments(pred_inst, pred_cls)
    gt_segs = _segments(gt_inst, gt_cls)
    void = gt_inst < 0

    classes = sorted({c for _, c in pred_segs.values()} | {c for _, c in gt_segs.values()})
    per_class = {}
    for c in classes:
        preds_c = [(pid, idx) for pid, (idx, pc) in sorted(pred_segs.items()) if pc == c]
        gts_c = [(gid, idx) for gid, (idx, gc) in sorted(gt_segs.items()) if gc == c]
        matched_pred, matched_gt = set(), set()
        iou_sum = 0.0
        tp = 0
        gt_membership = {gid: np.zeros(n, dtype=bool) for gid, _ in gts_c}
        for gid, idx in gts_c:
            gt_membership[gid][idx] = True
        for pid, pidx in preds_c:
            pmask = np.zeros(n, dtype=bool)
            pmask[pidx] = True
            for gid, gidx in gts_c:
                if gid in matched_gt:
                    continue
                inter = np.count_nonzero(pmask & gt_membership[gid])
                union = pidx.size + gidx.size - inter
                iou = inter / union if union else 0.0
                if iou > 0.5:
                    matched_pred.add(pid)
                    matched_gt.add(gid)
                    iou_sum += iou
                    tp += 1
                    break
        fp = 0
        for pid, pidx in preds_c:
            if pid in matched_pred:
                continue
            if np.count_nonzero(void[pidx]) / pidx.size > 0.5:
                continue  # mostly over unlabeled ground truth: ignore
            fp += 1
        fn = len(gts_c) - len(matched_gt)
        denom = tp + 0.5 * fp + 0.5 * fn
        sq = iou_sum / tp if tp else 0.0
        rq = tp / denom if denom else 0.0
        per_class[c] = {
            "TP": tp, "FP": fp, "FN": fn,
            "SQ": sq, "RQ": rq, "PQ": sq * rq,
        }

    def _agg(class_subset):
        rows = [per_class[c] for c in class_subset
                if c in per_class and per_class[c]["TP"] + per_class[c]["FP"] + per_class[c]["FN"] > 0]
        if not rows:
            return {"PQ": 0.0, "SQ": 0.0, "RQ": 0.0}
        return {k: float(np.mean([r[k] for r in rows])) for k in ("PQ", "SQ", "RQ")}

    overall = _agg(per_class.keys())
    return {
        "PQ": overall["PQ"], "SQ": overall["SQ"], "RQ": overall["RQ"],
        "PQ_th": _agg(things)["PQ"], "PQ_st": _agg(stuff)["PQ"],
        "per_class": per_class,
    }


DEFAULT_AP_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


def _ap_from_matches(is_tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated area under the precision-recall curve."""
    if n_gt == 0:
        return float("nan")
    tp_cum = np.cumsum(is_tp)
    fp_cum = np.cumsum(~is_tp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1)
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def average_precision(pred_masks, pred_scores, pred_classes, gt_masks, gt_classes,
                      thresholds=DEFAULT_AP_THRESHOLDS) -> dict:
    """Greedy-matched AP per class and IoU threshold.

    Predictions are visited by descending score (ties by original index) and
    matched to the best still-unmatched ground truth of the same class with
    IoU at or above the threshold. AP averages IoU thresholds 0.50:0.05:0.95;
    AP50/AP25 use a single threshold. Classes absent from the ground truth
    are excluded from the means.
    """
    pred_scores = np.asarray(pred_scores, dtype=np.float64)
    pred_classes = np.asarray(pred_classes)
    gt_classes = np.asarray(gt_classes)
    classes = sorted(set(gt_classes.tolist()))

    def class_ap(c, thr):
        sel = np.flatnonzero(pred_classes == c)
        order = sel[np.lexsort((sel, -pred_scores[sel]))]
        gts = [np.asarray(gt_masks[i]).astype(bool) for i in np.flatnonzero(gt_classes == c)]
        taken = np.zeros(len(gts), dtype=bool)
        is_tp = np.zeros(order.size, dtype=bool)
        for rank, pi in enumerate(order):
            pmask = np.asarray(pred_masks[pi]).astype(bool)
            best, best_iou = -1, 0.0
            for gi, gmask in enumerate(gts):
                if taken[gi]:
                    continue
                iou = mask_iou(pmask, gmask)
                if iou >= thr and iou > best_iou:
                    best, best_iou = gi, iou
            if best >= 0:
                taken[best] = True
                is_tp[rank] = True
        return _ap_from_matches(is_tp, len(gts))

    per_class = {}
    for c in classes:
        aps = [class_ap(c, t) for t in thresholds]
        per_class[int(c)] = {
            "AP": float(np.mean(aps)),
            "AP50": float(class_ap(c, 0.5)),
            "AP25": float(class_ap(c, 0.25)),
        }
    if not per_class:
        return {"AP": 0.0, "AP50": 0.0, "AP25": 0.0, "per_class": {}}
    return {
        "AP": float(np.mean([v["AP"] for v in per_class.values()])),
        "AP50": float(np.mean([v["AP50"] for v in per_class.values()])),
        "AP25": float(np.mean([v["AP25"] for v in per_class.values()])),
        "per_class": per_class,
    }
