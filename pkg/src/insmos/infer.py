"""Turning embeddings into full-resolution moving-instance masks."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .model import fuse
from .tensor import Tensor, resize_matrix

DEFAULT_THRESHOLD = 0.3
MOVING = 1  # row of ms_mov holding the moving-class logit


@dataclass
class Instance:
    mask: np.ndarray  # H×W bool
    probability: float
    index: int  # embedding index


@dataclass
class SegOutput:
    S_all: np.ndarray  # n×h×w logits
    S_full: np.ndarray  # n×H×W logits
    probabilities: np.ndarray  # n moving probabilities
    instances: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.instances)

    def foreground(self):
        fg = np.zeros(self.S_full.shape[1:], dtype=bool)
        for inst in self.instances:
            fg |= inst.mask
        return fg


def fuse_embeddings(me_mov, me_mask) -> np.ndarray:
    """S_all = me_movᵀ · me_mask for c×n and c×h×w arrays."""
    return fuse(Tensor(np.asarray(me_mov, dtype=np.float64)), Tensor(np.asarray(me_mask, dtype=np.float64))).data


def moving_probability(ms_mov) -> np.ndarray:
    ms = np.asarray(ms_mov, dtype=np.float64)
    z = ms - ms.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e[MOVING] / e.sum(axis=0)


def upsample_logits(S_all, height, width) -> np.ndarray:
    S = np.asarray(S_all, dtype=np.float64)
    ry = resize_matrix(S.shape[-2], height)
    rx = resize_matrix(S.shape[-1], width)
    return ry @ S @ rx.T


def select_instances(S_all, ms_mov, theta=DEFAULT_THRESHOLD, height=None, width=None) -> SegOutput:
    """Keep embeddings whose moving probability exceeds ``theta``.

    Mask logits are upsampled first and then binarized at sigmoid > 0.5.
    Instances may overlap.
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must lie in [0, 1]")
    S = np.asarray(S_all.data if isinstance(S_all, Tensor) else S_all, dtype=np.float64)
    ms = np.asarray(ms_mov.data if isinstance(ms_mov, Tensor) else ms_mov, dtype=np.float64)
    height = height or S.shape[-2]
    width = width or S.shape[-1]
    S_full = upsample_logits(S, height, width)
    probs = moving_probability(ms)
    instances = [
        Instance(S_full[i] > 0.0, float(probs[i]), i) for i in range(S.shape[0]) if probs[i] > theta
    ]
    return SegOutput(S, S_full, probs, instances)


# ------------------------------------------------------------ prediction archive


def write_prediction(out_dir, sample_id, seg: SegOutput, flow=None):
    """``pred_<id>.pgm`` holds instance ids (1-based, higher probability on top);
    ``pred_<id>.json`` lists per-instance probability and embedding index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ids = np.zeros(seg.S_full.shape[1:], dtype=np.uint8)
    order = sorted(range(seg.count), key=lambda i: seg.instances[i].probability)
    for i in order:
        ids[seg.instances[i].mask] = i + 1
    io.write_pgm(out / f"pred_{sample_id}.pgm", ids)
    meta = {
        "instances": [
            {"id": i + 1, "probability": inst.probability, "embedding": inst.index}
            for i, inst in enumerate(seg.instances)
        ]
    }
    (out / f"pred_{sample_id}.json").write_text(json.dumps(meta, indent=2))
    if flow is not None:
        io.write_flo(out / f"pred_{sample_id}.flo", flow)


def read_prediction(out_dir, sample_id):
    """(list of masks, list of scores) from the archive."""
    out = Path(out_dir)
    ids = io.read_pgm(out / f"pred_{sample_id}.pgm")
    meta = json.loads((out / f"pred_{sample_id}.json").read_text())
    masks, scores = [], []
    for entry in meta["instances"]:
        masks.append(ids == entry["id"])
        scores.append(float(entry["probability"]))
    return masks, scores
