"""Segmentation and flow metrics.

Instance metrics take, per sample, a list of predicted binary masks (with
scores for mAP) and a list of ground-truth moving-object masks.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .losses import hungarian_match

COCO_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def iou(a, b):
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"iou: shape mismatch {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_matrix(preds, gts):
    return np.array([[iou(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))


def _union(masks, shape):
    out = np.zeros(shape, dtype=bool)
    for m in masks:
        out |= np.asarray(m, dtype=bool)
    return out


# ------------------------------------------------------------------ mIoU


def miou_ins_sample(preds, gts):
    """Mean IoU over GT objects after IoU-maximizing one-to-one matching."""
    if len(gts) == 0:
        return None
    if len(preds) == 0:
        return 0.0
    ious = iou_matrix(gts, preds)  # gts × preds
    if len(gts) <= len(preds):
        total = -hungarian_match(-ious).total_cost
    else:
        total = -hungarian_match(-ious.T).total_cost
    return total / len(gts)


def miou_ins(samples):
    """Dataset mean over samples that have at least one GT moving object."""
    vals = [v for v in (miou_ins_sample(p, g) for p, g in samples) if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def miou_01_sample(preds, gts, shape=None):
    if shape is None:
        ref = list(preds) + list(gts)
        if not ref:
            return 1.0
        shape = np.asarray(ref[0]).shape
    return iou(_union(preds, shape), _union(gts, shape))


def miou_01(samples, shape=None):
    return float(np.mean([miou_01_sample(p, g, shape) for p, g in samples]))


# ------------------------------------------------------------------ mAP


def _match_sample(pred_masks, scores, gts, thr):
    """COCO greedy matching for one sample; returns (scores, tp flags)."""
    order = np.argsort(-np.asarray(scores, dtype=float), kind="mergesort")
    ious = iou_matrix(pred_masks, gts)
    taken = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(order), dtype=bool)
    for rank, p in enumerate(order):
        best, best_iou = -1, min(thr, 1 - 1e-10)
        for g in range(len(gts)):
            if taken[g] or ious[p, g] < best_iou:
                continue
            best, best_iou = g, ious[p, g]
        if best >= 0:
            taken[best] = True
            tp[rank] = True
    return np.asarray(scores, dtype=float)[order], tp


def average_precision(samples, thr):
    """101-point interpolated AP at one IoU threshold.

    ``samples`` is a list of (pred_masks, scores, gt_masks).
    """
    all_scores, all_tp, n_gt = [], [], 0
    for preds, scores, gts in samples:
        s, tp = _match_sample(preds, scores, gts, thr)
        all_scores.append(s)
        all_tp.append(tp)
        n_gt += len(gts)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tps = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    if n_gt == 0:
        return 1.0 if len(scores) == 0 else 0.0
    if len(scores) == 0:
        return 0.0
    order = np.argsort(-scores, kind="mergesort")
    tps = tps[order]
    tp_cum = np.cumsum(tps)
    fp_cum = np.cumsum(~tps)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(float).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def map_coco(samples, thresholds=COCO_THRESHOLDS):
    """Single-category mask mAP averaged over IoU thresholds 0.50:0.05:0.95."""
    return float(np.mean([average_precision(samples, t) for t in thresholds]))


# ------------------------------------------------------------------ flow


def _endpoint_errors(F_pred, F_gt, valid):
    F_pred, F_gt = np.asarray(F_pred, dtype=np.float64), np.asarray(F_gt, dtype=np.float64)
    if F_pred.shape != F_gt.shape:
        raise ValueError("flow shapes differ")
    err = np.sqrt(((F_pred - F_gt) ** 2).sum(axis=0))
    if valid is not None:
        err = err[np.asarray(valid, dtype=bool)]
    if err.size == 0:
        raise ValueError("empty valid set")
    return err


def epe(F_pred, F_gt, valid=None):
    return float(_endpoint_errors(F_pred, F_gt, valid).mean())


def ratio_1px(F_pred, F_gt, valid=None):
    return float((_endpoint_errors(F_pred, F_gt, valid) < 1.0).mean())


# -------------------------------------------------------------- F-measure


def f_measure(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    tp = np.count_nonzero(pred & gt)
    fp = np.count_nonzero(pred & ~gt)
    fn = np.count_nonzero(~pred & gt)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return 2 * p * r / (p + r) if p + r else 0.0


def static_rejected(preds, static_mask, max_cover=0.5):
    """True when selected instances cover less than ``max_cover`` of a static object."""
    static_mask = np.asarray(static_mask, dtype=bool)
    area = np.count_nonzero(static_mask)
    if area == 0:
        return True
    covered = np.count_nonzero(_union(preds, static_mask.shape) & static_mask)
    return covered / area < max_cover


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    mAP: float
    mIoU_ins: float
    mIoU_01: float
    f_measure: float
    EPE: float | None = None
    ratio_1px: float | None = None
    samples: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    def to_csv(self):
        cols = ["id", "num_gt", "num_pred", "AP", "mIoU_ins", "mIoU_01", "f_measure", "EPE", "ratio_1px"]
        lines = [",".join(cols)]
        for s in self.samples:
            lines.append(",".join("" if s.get(c) is None else f"{s[c]}" for c in cols))
        return "\n".join(lines) + "\n"


def evaluate(records):
    """Build an EvalReport.

    ``records`` is a list of dicts with keys ``id``, ``pred_masks``, ``scores``,
    ``gt_masks`` and optionally ``flow_pred``, ``flow_gt``.
    """
    rows = []
    epes, r1s = [], []
    ins_pairs, fg_pairs, ap_samples, fms = [], [], [], []
    for rec in records:
        preds, scores, gts = rec["pred_masks"], rec["scores"], rec["gt_masks"]
        shape = rec.get("shape") or (np.asarray((preds or gts)[0]).shape if (preds or gts) else None)
        ins_pairs.append((preds, gts))
        fg_pairs.append((preds, gts))
        ap_samples.append((preds, scores, gts))
        row = {
            "id": rec["id"],
            "num_gt": len(gts),
            "num_pred": len(preds),
            "AP": map_coco([(preds, scores, gts)]),
            "mIoU_ins": miou_ins_sample(preds, gts),
            "mIoU_01": miou_01_sample(preds, gts, shape),
        }
        if shape is not None:
            row["f_measure"] = f_measure(_union(preds, shape), _union(gts, shape))
            fms.append(row["f_measure"])
        if rec.get("flow_pred") is not None and rec.get("flow_gt") is not None:
            row["EPE"] = epe(rec["flow_pred"], rec["flow_gt"])
            row["ratio_1px"] = ratio_1px(rec["flow_pred"], rec["flow_gt"])
            epes.append(row["EPE"])
            r1s.append(row["ratio_1px"])
        rows.append(row)
    return EvalReport(
        mAP=map_coco(ap_samples),
        mIoU_ins=miou_ins(ins_pairs),
        mIoU_01=float(np.mean([r["mIoU_01"] for r in rows])) if rows else float("nan"),
        f_measure=float(np.mean(fms)) if fms else float("nan"),
        EPE=float(np.mean(epes)) if epes else None,
        ratio_1px=float(np.mean(r1s)) if r1s else None,
        samples=rows,
    )
