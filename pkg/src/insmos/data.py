"""Model-ready inputs and targets built from synthetic scenes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .events import event_mask, slice_by_time, voxelize
from .losses import downsample_nearest
from .synth import SceneSample, generate_scene, load_scene, random_scene_spec, scene_dirs

MODALITIES = ("fused", "events", "image_pair")


def frame_inputs(sample: SceneSample, k, modality="fused", bins=10, event_fraction=1.0, dtype=np.float32):
    """(image 1×H×W, event input C×H×W, mask 1×H×W) for frame ``k``.

    ``event_fraction`` < 1 keeps only the leading part of the slice in time.
    The image-pair modality feeds frame ``k+1`` through the event branch with
    an all-ones mask.
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    if not 0.0 < event_fraction <= 1.0:
        raise ValueError("event_fraction must lie in (0, 1]")
    image = (sample.images[k][None] - 0.5).astype(dtype)
    if modality == "image_pair":
        nxt = (sample.images[k + 1][None] - 0.5).astype(dtype)
        return image, nxt, np.ones_like(image)
    ev = sample.events[k]
    if event_fraction < 1.0:
        ev = slice_by_time(ev, ev.t_start, ev.t_start + int(ev.duration * event_fraction))
    vox = np.ascontiguousarray(np.moveaxis(voxelize(ev, bins, dtype=dtype).data, -1, 0))
    em = event_mask(ev).data[None].astype(dtype)
    return image, vox, em


@dataclass
class Targets:
    """First-frame supervision at full and decoder resolution."""

    masks: list  # full-resolution H×W bool, every object
    flags: list  # 1 moving, 0 static
    masks_low: list  # nearest-downsampled to decoder size
    flow: np.ndarray  # 2×H×W
    next_image: np.ndarray  # 1×H×W, same normalization as inputs

    @property
    def moving_masks(self):
        return [m for m, f in zip(self.masks, self.flags) if f]


@dataclass
class Item:
    frames: list  # K tuples of (image, event input, mask)
    targets: Targets
    static_masks: list = field(default_factory=list)


def build_item(sample: SceneSample, modality="fused", bins=10, frames=2, downsample=4, event_fraction=1.0,
               dtype=np.float32) -> Item:
    if frames < 1 or frames > sample.num_frames - 1:
        raise ValueError(f"scene provides at most {sample.num_frames - 1} input frames")
    inputs = [frame_inputs(sample, k, modality, bins, event_fraction, dtype) for k in range(frames)]
    pairs = sample.masks(0)
    masks = [m for _, m in pairs]
    flags = [sample.motion_flags[i] for i, _ in pairs]
    H, W = sample.images.shape[1:]
    low = [downsample_nearest(m, H // downsample, W // downsample) for m in masks]
    tg = Targets(masks, flags, low, sample.flows[0].astype(dtype), (sample.images[1][None] - 0.5).astype(dtype))
    return Item(inputs, tg, sample.static_masks(0))


def flip_item(item: Item, horizontal=True) -> Item:
    """Mirror every input and target; flow components flip sign accordingly."""
    ax = -1 if horizontal else -2
    frames = [tuple(np.ascontiguousarray(np.flip(a, ax)) for a in fr) for fr in item.frames]
    fl = np.ascontiguousarray(np.flip(item.targets.flow, ax))
    fl[0 if horizontal else 1] *= -1
    t = item.targets
    tg = Targets(
        [np.flip(m, ax) for m in t.masks],
        list(t.flags),
        [np.flip(m, ax) for m in t.masks_low],
        fl,
        np.ascontiguousarray(np.flip(t.next_image, ax)),
    )
    return Item(frames, tg, [np.flip(m, ax) for m in item.static_masks])


def generate_samples(count, seed=0, ranges=None):
    """Random scenes with per-scene seeds ``seed + i``."""
    return [generate_scene(random_scene_spec(seed + i, ranges)) for i in range(count)]


def load_samples(root):
    dirs = scene_dirs(root)
    if not dirs:
        raise FileNotFoundError(f"no scenes under {root}")
    return [load_scene(d) for d in dirs]


def stack_frames(items, k):
    """Batch frame ``k`` of each item into N×C×H×W arrays."""
    return tuple(np.stack([it.frames[k][j] for it in items]) for j in range(3))
