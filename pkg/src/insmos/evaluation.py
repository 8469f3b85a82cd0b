"""Running a trained model over scenes and scoring the predictions."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import infer
from . import metrics as MT
from .data import build_item
from .model import InsMOSModel
from .synth import SceneSample, read_flags, scene_dirs
from . import io


def predict(model: InsMOSModel, sample: SceneSample, theta=infer.DEFAULT_THRESHOLD, event_fraction=1.0,
            flow=False):
    """(SegOutput, flow or None) for the first frame of ``sample``."""
    cfg = model.config
    item = build_item(sample, cfg.modality, cfg.bins, 1, cfg.downsample, event_fraction,
                      np.float64 if cfg.dtype == "f64" else np.float32)
    batch = [tuple(a[None] for a in item.frames[0])]
    out = model.forward_frame(*batch[0], decode=True, flow=flow and cfg.ffe)
    H, W = sample.images.shape[1:]
    seg = infer.select_instances(out.S_all.data[0], out.ms_mov.data[0], theta, H, W)
    F = out.F_pred.data[0] if out.F_pred is not None else None
    return seg, F


@dataclass
class ModelEval:
    report: MT.EvalReport
    static_rejected: list = field(default_factory=list)  # per scene, all static sprites rejected
    counts: list = field(default_factory=list)  # selected instances per scene
    miou_01: list = field(default_factory=list)

    @property
    def static_rejection_rate(self):
        return float(np.mean(self.static_rejected)) if self.static_rejected else float("nan")


def evaluate_model(model: InsMOSModel, samples, theta=infer.DEFAULT_THRESHOLD, event_fraction=1.0,
                   flow=False) -> ModelEval:
    records, rejected, counts = [], [], []
    for i, s in enumerate(samples):
        seg, F = predict(model, s, theta, event_fraction, flow)
        preds = [inst.mask for inst in seg.instances]
        rec = {
            "id": i,
            "pred_masks": preds,
            "scores": [inst.probability for inst in seg.instances],
            "gt_masks": s.moving_masks(0),
            "shape": s.images.shape[1:],
        }
        if F is not None:
            rec["flow_pred"], rec["flow_gt"] = F, s.flows[0]
        records.append(rec)
        rejected.append(all(MT.static_rejected(preds, m) for m in s.static_masks(0)))
        counts.append(seg.count)
    report = MT.evaluate(records)
    return ModelEval(report, rejected, counts, [r["mIoU_01"] for r in report.samples])


# ------------------------------------------------------------ on-disk archives


def gt_from_scene(scene_dir):
    """Moving-object masks of frame 0 from a scene directory."""
    d = Path(scene_dir)
    ids = io.read_pgm(d / "mask_0.pgm")
    flags = read_flags(d / "flags_0.txt")
    return [ids == i for i in sorted(flags) if flags[i] == 1 and np.any(ids == i)]


def evaluate_dirs(pred_dir, gt_dir) -> MT.EvalReport:
    """Score a prediction archive (or another dataset directory) against a dataset.

    When ``pred_dir`` holds scene directories, their ground truth is read as
    predictions with score 1.
    """
    gts = scene_dirs(gt_dir)
    if not gts:
        raise FileNotFoundError(f"no scenes under {gt_dir}")
    pred_root = Path(pred_dir)
    records = []
    for d in gts:
        gt_masks = gt_from_scene(d)
        shape = io.read_pgm(d / "mask_0.pgm").shape
        if (pred_root / d.name).is_dir():
            preds = gt_from_scene(pred_root / d.name)
            scores = [1.0] * len(preds)
        else:
            if not (pred_root / f"pred_{d.name}.pgm").exists():
                raise FileNotFoundError(f"missing prediction for {d.name}")
            preds, scores = infer.read_prediction(pred_root, d.name)
        records.append({"id": d.name, "pred_masks": preds, "scores": scores, "gt_masks": gt_masks,
                        "shape": shape})
    return MT.evaluate(records)
