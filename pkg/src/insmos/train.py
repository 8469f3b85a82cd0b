"""Toy-scale training loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from . import tensor as T
from .data import Item, build_item, flip_item, stack_frames
from .model import InsMOSModel, ModelConfig

log = logging.getLogger(__name__)

FFE_MODES = ("sf", "uf", "sf+uf", "off")
CSV_HEADER = "step,loss,L_mos,L_cl,L_f"
ALPHA_MAX = 10.0


@dataclass
class TrainConfig:
    steps: int = 5000
    lr: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 4
    frames: int = 2
    cma: bool = True
    cfl: bool = True
    ffe: str = "sf"
    modality: str = "fused"
    flip: bool = True
    vflip: bool = False
    seed: int = 0
    dtype: str = "f32"
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    grad_clip: float = 5.0
    cs_exclude_self: bool = False
    # training items are built once per fraction and drawn uniformly
    event_fractions: tuple = (1.0,)
    alpha_min: float = 0.05
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.ffe not in FFE_MODES:
            raise ValueError(f"ffe must be one of {FFE_MODES}")
        if self.dtype not in ("f32", "f64"):
            raise ValueError("dtype must be f32 or f64")
        if self.cfl and self.batch_size < 2:
            raise ValueError("contrastive learning needs batch_size >= 2")
        if self.cfl and self.frames < 2:
            raise ValueError("contrastive learning needs at least two frames")
        if self.frames < 1:
            raise ValueError("frames must be positive")
        self.event_fractions = tuple(self.event_fractions)
        if not self.event_fractions or any(not 0.0 < f <= 1.0 for f in self.event_fractions):
            raise ValueError("event_fractions must be non-empty values in (0, 1]")
        if self.alpha_min <= 0:
            raise ValueError("alpha_min must be positive")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError("pct_start must lie in (0, 1)")

    def model_config(self) -> ModelConfig:
        kw = dict(self.model)
        kw.setdefault("modality", self.modality)
        kw.setdefault("cma", "dual" if self.cma else "off")
        kw.setdefault("ffe", self.ffe != "off")
        kw.setdefault("dtype", self.dtype)
        kw.setdefault("seed", self.seed)
        return ModelConfig(**kw)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def one_cycle_lr(step, total, max_lr, pct_start=0.3, div_factor=25.0, final_div_factor=1e4):
    """Cosine one-cycle schedule: warm up to ``max_lr`` then anneal far below the start."""
    initial = max_lr / div_factor
    final = initial / final_div_factor
    up = max(int(total * pct_start), 1)
    if step < up:
        frac = step / up
        lo, hi = initial, max_lr
    else:
        frac = (step - up) / max(total - 1 - up, 1)
        lo, hi = max_lr, final
    frac = min(max(frac, 0.0), 1.0)
    return hi + (lo - hi) * (1 + math.cos(math.pi * frac)) / 2


class AdamW:
    """Adaptive moments with decoupled weight decay over a parameter dict."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None or not p.trainable:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data * (1 - self.lr * self.wd) - self.lr * update).astype(p.data.dtype)


def clip_gradients(params, max_norm):
    grads = [p.grad for p in params.values() if p.grad is not None]
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads))
    if max_norm > 0 and norm > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / norm)
    return norm


@dataclass
class StepLosses:
    total: T.Tensor
    mos: T.Tensor
    cl: T.Tensor | None
    flow: T.Tensor | None


def compute_losses(model: InsMOSModel, items: list, cfg: TrainConfig, weights=None) -> StepLosses:
    """Forward a batch and assemble the total objective.

    Only the first frame's segmentation is supervised; further frames feed
    the contrastive term.
    """
    w = weights or L.LossWeights()
    frames = [stack_frames(items, k) for k in range(cfg.frames)]
    out = model.forward_full(frames, "train")
    n_batch = len(items)

    mos_terms = []
    for b, it in enumerate(items):
        S, ms = out.S_all[b], out.ms_mov[b]
        tg = it.targets
        assignment = L.hungarian_match(L.match_cost(S, ms, tg.masks_low, tg.flags, w))
        mos_terms.append(L.mos_loss(S, ms, tg.masks_low, tg.flags, assignment, w))
    l_mos = T.mean(T.stack(mos_terms))

    l_cl = None
    if cfg.cfl:
        feats = [[(ft[b], fm[b]) for ft, fm in out.frame_features] for b in range(n_batch)]
        l_cl = L.contrastive_loss(feats, model.alpha, cfg.cs_exclude_self)

    l_flow = None
    if cfg.ffe != "off" and out.F_pred is not None:
        parts = []
        if "sf" in cfg.ffe:
            parts.append(L.flow_supervised(out.F_pred, np.stack([it.targets.flow for it in items])))
        if "uf" in cfg.ffe:
            parts.append(L.flow_photometric(frames[0][0], np.stack([it.targets.next_image for it in items]),
                                            out.F_pred))
        l_flow = parts[0] if len(parts) == 1 else parts[0] + parts[1]

    return StepLosses(L.total_loss(l_mos, l_cl, l_flow, w), l_mos, l_cl, l_flow)


def _value(t):
    return 0.0 if t is None else float(t.data)


def train(samples, cfg: TrainConfig, out_dir=None, weights=None, progress_every=0, model=None):
    """Train on a list of SceneSamples; returns (model, loss rows).

    With ``out_dir`` set, writes ``model.ckpt``, ``model.json``, ``train.json``
    and ``losses.csv``.
    """
    if not samples:
        raise ValueError("empty training set")
    mcfg = cfg.model_config()
    model = model or InsMOSModel(mcfg)
    dtype = T.DTYPES[cfg.dtype]
    variants: list[list[Item]] = [
        [build_item(s, mcfg.modality, mcfg.bins, cfg.frames, mcfg.downsample, f, dtype) for f in cfg.event_fractions]
        for s in samples
    ]
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.params, cfg.lr, weight_decay=cfg.weight_decay)
    rows = []
    t0 = time.perf_counter()
    for step in range(cfg.steps):
        opt.lr = one_cycle_lr(step, cfg.steps, cfg.lr, cfg.pct_start, cfg.div_factor, cfg.final_div_factor)
        idx = rng.choice(len(variants), size=cfg.batch_size, replace=len(variants) < cfg.batch_size)
        batch = []
        for i in idx:
            it = variants[i][rng.integers(len(variants[i]))]
            if cfg.flip and rng.random() < 0.5:
                it = flip_item(it)
            if cfg.vflip and rng.random() < 0.5:
                it = flip_item(it, horizontal=False)
            batch.append(it)
        model.zero_grad()
        res = compute_losses(model, batch, cfg, weights)
        T.backward(res.total)
        clip_gradients(model.params, cfg.grad_clip)
        opt.step()
        la = model.params["cfl.log_alpha"]
        la.data = np.clip(la.data, math.log(cfg.alpha_min), math.log(ALPHA_MAX)).astype(la.data.dtype)
        rows.append((step + 1, _value(res.total), _value(res.mos), _value(res.cl), _value(res.flow)))
        if progress_every and (step + 1) % progress_every == 0:
            log.info("step %d loss %.4f (%.1fs)", step + 1, rows[-1][1], time.perf_counter() - t0)
    if out_dir is not None:
        save_run(out_dir, model, cfg, rows)
    return model, rows


def format_loss_csv(rows):
    lines = [CSV_HEADER] + [f"{s},{a:.6g},{b:.6g},{c:.6g},{d:.6g}" for s, a, b, c, d in rows]
    return "\n".join(lines) + "\n"


def save_run(out_dir, model: InsMOSModel, cfg: TrainConfig, rows):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "model.ckpt")
    (out / "model.json").write_text(model.config.to_json())
    (out / "train.json").write_text(cfg.to_json())
    (out / "losses.csv").write_text(format_loss_csv(rows))


def load_run(run_dir) -> InsMOSModel:
    run = Path(run_dir)
    cfg = ModelConfig.from_json((run / "model.json").read_text())
    return InsMOSModel.load(run / "model.ckpt", cfg)
