"""Synthetic supervised scenes: sprites over a textured world seen by a panning camera.

Screen-motion convention: a camera moving with velocity ``v_cam`` (pixels per
frame) displaces static content by ``-v_cam`` on the image plane, so a sprite
with world velocity ``v`` moves by ``v - v_cam`` on screen.  Motion flags come
from the world velocity only.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .events import EventSlice, load_events_binary, write_events_binary

LOG_EPS = 1e-3
FRAME_INTERVAL_US = 10_000


@dataclass
class Sprite:
    kind: str  # "rect" or "disk"
    size: tuple  # (w, h); a disk uses w as its diameter
    position: tuple  # top-left (x, y) on screen at frame 0
    velocity: tuple = (0.0, 0.0)  # world velocity, pixels/frame
    intensity: float = 0.9
    depth: int = 0  # smaller is nearer; ties go to the lower index
    texture: float = 0.05  # amplitude of the sprite's own surface pattern

    @property
    def moving(self):
        return bool(self.velocity[0] != 0 or self.velocity[1] != 0)


@dataclass
class SceneSpec:
    width: int = 48
    height: int = 48
    frames: int = 3
    camera_velocity: tuple = (0.0, 0.0)
    sprites: list = field(default_factory=list)
    contrast_threshold: float = 0.15
    rng_seed: int = 0
    frame_interval_us: int = FRAME_INTERVAL_US

    @property
    def num_moving(self):
        return sum(s.moving for s in self.sprites)

    @property
    def num_static(self):
        return len(self.sprites) - self.num_moving

    def screen_position(self, index, k):
        s = self.sprites[index]
        return (
            s.position[0] + k * (s.velocity[0] - self.camera_velocity[0]),
            s.position[1] + k * (s.velocity[1] - self.camera_velocity[1]),
        )

    def validate(self):
        if self.frames < 2:
            raise ValueError("infeasible spec: need at least two frames")
        if self.contrast_threshold <= 0:
            raise ValueError("infeasible spec: contrast threshold must be positive")
        for i, s in enumerate(self.sprites):
            if s.kind not in ("rect", "disk"):
                raise ValueError(f"infeasible spec: unknown sprite kind {s.kind!r}")
            w, h = s.size if s.kind == "rect" else (s.size[0], s.size[0])
            step = max(abs(s.velocity[0] - self.camera_velocity[0]), abs(s.velocity[1] - self.camera_velocity[1]))
            if step > 0.25 * min(w, h) + 1e-9:
                raise ValueError(f"infeasible spec: sprite {i} moves more than 25% of its size per frame")
            for k in range(self.frames):
                x, y = self.screen_position(i, k)
                if x < 0 or y < 0 or x + w > self.width or y + h > self.height:
                    raise ValueError(f"infeasible spec: sprite {i} leaves the canvas at frame {k}")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["sprites"] = [Sprite(**{**s, "size": tuple(s["size"]), "position": tuple(s["position"]),
                                  "velocity": tuple(s.get("velocity", (0, 0)))}) for s in d.get("sprites", [])]
        d["camera_velocity"] = tuple(d.get("camera_velocity", (0, 0)))
        return cls(**d)


@dataclass
class SceneSample:
    images: np.ndarray  # (K+1)×H×W float64 in [0, 1], quantized to 1/255
    events: list  # K EventSlices, one per inter-frame interval
    instance_maps: np.ndarray  # (K+1)×H×W uint8; 0 background, i+1 for sprite i
    motion_flags: dict  # object id -> 0/1
    flows: np.ndarray  # K×2×H×W float32, screen pixels per frame

    @property
    def num_frames(self):
        return len(self.images)

    def masks(self, k):
        """Visible objects at frame ``k`` as (id, binary mask) pairs."""
        ids = np.unique(self.instance_maps[k])
        return [(int(i), self.instance_maps[k] == i) for i in ids if i != 0]

    def flags(self, k):
        return [(i, self.motion_flags[i]) for i, _ in self.masks(k)]

    def moving_masks(self, k):
        return [m for i, m in self.masks(k) if self.motion_flags[i] == 1]

    def static_masks(self, k):
        return [m for i, m in self.masks(k) if self.motion_flags[i] == 0]


# ------------------------------------------------------------------ rendering


def _background(seed):
    rng = np.random.default_rng([seed, 7])
    n = 4
    lam = rng.uniform(6.0, 16.0, n)
    theta = rng.uniform(0, np.pi, n)
    kx, ky = 2 * np.pi / lam * np.cos(theta), 2 * np.pi / lam * np.sin(theta)
    amp = rng.dirichlet(np.ones(n)) * 0.22
    phase = rng.uniform(0, 2 * np.pi, n)

    def texture(X, Y):
        out = np.full(np.broadcast(X, Y).shape, 0.5)
        for i in range(n):
            out += amp[i] * np.sin(kx[i] * X + ky[i] * Y + phase[i])
        return out

    return texture


def _sprite_pattern(seed, index):
    rng = np.random.default_rng([seed, 11, index])
    lam = rng.uniform(5.0, 10.0)
    theta = rng.uniform(0, np.pi)
    return 2 * np.pi / lam * np.cos(theta), 2 * np.pi / lam * np.sin(theta), rng.uniform(0, 2 * np.pi)


def _coverage(sprite, sx, sy, cx, cy):
    if sprite.kind == "rect":
        w, h = sprite.size
        return (cx >= sx) & (cx < sx + w) & (cy >= sy) & (cy < sy + h)
    r = sprite.size[0] / 2
    return (cx - sx - r) ** 2 + (cy - sy - r) ** 2 <= r * r


def _draw_order(spec):
    # far to near; among equal depth the lower index ends up on top
    return sorted(range(len(spec.sprites)), key=lambda i: (-spec.sprites[i].depth, -i))


def render_frame(spec: SceneSpec, k):
    """Frame ``k`` as (image in [0, 1], instance-id map)."""
    h, w = spec.height, spec.width
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = xs + 0.5, ys + 0.5
    cam = (k * spec.camera_velocity[0], k * spec.camera_velocity[1])
    img = _background(spec.rng_seed)(cx + cam[0], cy + cam[1])
    ids = np.zeros((h, w), dtype=np.uint8)
    for i in _draw_order(spec):
        s = spec.sprites[i]
        sx, sy = spec.screen_position(i, k)
        cover = _coverage(s, sx, sy, cx, cy)
        kx, ky, ph = _sprite_pattern(spec.rng_seed, i)
        surface = s.intensity + s.texture * np.sin(kx * (cx - sx) + ky * (cy - sy) + ph)
        img = np.where(cover, surface, img)
        ids[cover] = i + 1
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    return img, ids


def gt_flow(spec: SceneSpec, k) -> np.ndarray:
    """Screen flow from frame ``k`` to ``k + 1`` as a 2×H×W field."""
    _, ids = render_frame(spec, k)
    cam = np.asarray(spec.camera_velocity, dtype=np.float64)
    flow = np.empty((2, spec.height, spec.width), dtype=np.float32)
    flow[0], flow[1] = -cam[0], -cam[1]
    for i, s in enumerate(spec.sprites):
        sel = ids == i + 1
        flow[0][sel] = s.velocity[0] - cam[0]
        flow[1][sel] = s.velocity[1] - cam[1]
    return flow


def emit_events(frame_a, frame_b, t_a, t_b, threshold, eps=LOG_EPS) -> EventSlice:
    """Ideal contrast-threshold events between two frames.

    A pixel whose log intensity changes by d fires floor(|d| / threshold)
    events of polarity sign(d); the j-th fires at t_a + j*threshold/|d| of the
    interval.  ``uint8`` frames are scaled to [0, 1] first.
    """
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if np.asarray(frame_a).dtype == np.uint8:
        a = a / 255.0
    if np.asarray(frame_b).dtype == np.uint8:
        b = b / 255.0
    if a.shape != b.shape:
        raise ValueError("frames must have the same size")
    if threshold <= 0:
        raise ValueError("contrast threshold must be positive")
    h, w = a.shape
    d = np.log(b + eps) - np.log(a + eps)
    mag = np.abs(d).reshape(-1)
    count = np.floor(mag / threshold + 1e-9).astype(np.int64)
    pix = np.repeat(np.arange(h * w), count)
    if len(pix) == 0:
        return EventSlice.empty(w, h, t_a, t_b)
    starts = np.cumsum(count) - count
    j = np.arange(len(pix)) - np.repeat(starts, count) + 1
    frac = np.minimum(j * threshold / mag[pix], 1.0)
    t = np.minimum(t_a + np.rint(frac * (t_b - t_a)).astype(np.int64), t_b)
    y, x = np.divmod(pix, w)
    p = np.sign(d.reshape(-1)[pix]).astype(np.int8)
    order = np.lexsort((x, y, t))
    return EventSlice(t[order], x[order], y[order], p[order], w, h, t_a, t_b)


def generate_scene(spec: SceneSpec) -> SceneSample:
    spec.validate()
    frames, maps = zip(*(render_frame(spec, k) for k in range(spec.frames)))
    images = np.stack(frames)
    dt = spec.frame_interval_us
    events = [
        emit_events(images[k], images[k + 1], k * dt, (k + 1) * dt, spec.contrast_threshold)
        for k in range(spec.frames - 1)
    ]
    flows = np.stack([gt_flow(spec, k) for k in range(spec.frames - 1)])
    flags = {i + 1: int(s.moving) for i, s in enumerate(spec.sprites)}
    return SceneSample(images, events, np.stack(maps), flags, flows)


# ---------------------------------------------------------------- random specs


@dataclass
class SceneRanges:
    """Distribution of random scenes used for training and evaluation."""

    width: int = 48
    height: int = 48
    frames: int = 3
    moving: tuple = (1, 3)
    static: tuple = (1, 1)
    size: tuple = (12, 18)
    camera_max: int = 1
    screen_speed: tuple = (2, 3)
    contrast_threshold: float = 0.15

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def _boxes_clear(boxes, box, margin=1):
    x0, y0, x1, y1 = box
    for a0, b0, a1, b1 in boxes:
        if x0 < a1 + margin and a0 < x1 + margin and y0 < b1 + margin and b0 < y1 + margin:
            return False
    return True


def random_scene_spec(seed, ranges: SceneRanges | None = None, max_tries=200) -> SceneSpec:
    """Sample a feasible scene; sprites do not overlap over the sequence.

    A scene whose sprites cannot all be placed is redrawn from scratch so the
    sprite counts always follow ``ranges``.
    """
    r = ranges or SceneRanges()
    if r.screen_speed[1] > 0.25 * r.size[0] + 1e-9:
        raise ValueError("infeasible ranges: top screen speed exceeds 25% of the smallest sprite size")
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        spec = _try_scene(rng, r, seed, max_tries)
        if spec is not None:
            spec.validate()
            return spec
    raise ValueError(f"could not place all sprites after {max_tries} scene draws")


def _try_scene(rng, r: SceneRanges, seed, max_tries):
    cam = tuple(float(v) for v in rng.integers(-r.camera_max, r.camera_max + 1, 2))
    n_mov = int(rng.integers(r.moving[0], r.moving[1] + 1))
    n_sta = int(rng.integers(r.static[0], r.static[1] + 1))
    sprites, boxes = [], []
    span = r.frames - 1
    lo, hi = r.screen_speed
    for idx in range(n_mov + n_sta):
        moving = idx < n_mov
        for _ in range(max_tries):
            kind = "rect" if rng.random() < 0.5 else "disk"
            if kind == "rect":
                size = tuple(float(v) for v in rng.integers(r.size[0], r.size[1] + 1, 2))
            else:
                d = float(rng.integers(r.size[0], r.size[1] + 1))
                size = (d, d)
            if moving:
                while True:
                    u = rng.integers(-hi, hi + 1, 2)
                    if lo <= np.abs(u).max() <= hi:
                        break
                vel = (float(u[0] + cam[0]), float(u[1] + cam[1]))
            else:
                vel = (0.0, 0.0)
            u = (vel[0] - cam[0], vel[1] - cam[1])
            w, h = size
            # screen travel over the sequence
            xmin = max(0.0, -u[0] * span)
            ymin = max(0.0, -u[1] * span)
            xmax = r.width - w - max(0.0, u[0] * span)
            ymax = r.height - h - max(0.0, u[1] * span)
            if xmax < xmin or ymax < ymin:
                continue
            x0 = float(rng.integers(int(np.ceil(xmin)), int(np.floor(xmax)) + 1))
            y0 = float(rng.integers(int(np.ceil(ymin)), int(np.floor(ymax)) + 1))
            box = (
                min(x0, x0 + u[0] * span), min(y0, y0 + u[1] * span),
                max(x0, x0 + u[0] * span) + w, max(y0, y0 + u[1] * span) + h,
            )
            if not _boxes_clear(boxes, box):
                continue
            dark = rng.random() < 0.5
            intensity = float(rng.uniform(0.05, 0.2) if dark else rng.uniform(0.8, 0.95))
            sprites.append(Sprite(kind, size, (x0, y0), vel, intensity, depth=idx))
            boxes.append(box)
            break
        else:
            return None
    return SceneSpec(r.width, r.height, r.frames, cam, sprites, r.contrast_threshold, int(seed))


# ------------------------------------------------------------- dataset on disk


def write_scene(sample: SceneSample, directory, spec: SceneSpec | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(sample.images):
        io.write_pgm(d / f"frame_{k}.pgm", np.round(img * 255.0).astype(np.uint8))
        io.write_pgm(d / f"mask_{k}.pgm", sample.instance_maps[k])
        lines = [f"{i} {f}" for i, f in sample.flags(k)]
        (d / f"flags_{k}.txt").write_text("\n".join(lines) + ("\n" if lines else ""))
    for k, ev in enumerate(sample.events):
        write_events_binary(ev, d / f"events_{k}.evt")
        io.write_flo(d / f"flow_{k}.flo", sample.flows[k])
    if spec is not None:
        (d / "spec.json").write_text(spec.to_json())


def read_flags(path):
    flags = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            i, f = line.split()
            flags[int(i)] = int(f)
    return flags


def load_scene(directory) -> SceneSample:
    d = Path(directory)
    k_frames = len(list(d.glob("frame_*.pgm")))
    if k_frames == 0:
        raise FileNotFoundError(f"no frames in {d}")
    images = np.stack([io.read_pgm(d / f"frame_{k}.pgm") / 255.0 for k in range(k_frames)])
    maps = np.stack([io.read_pgm(d / f"mask_{k}.pgm") for k in range(k_frames)])
    flags = {}
    for k in range(k_frames):
        flags.update(read_flags(d / f"flags_{k}.txt"))
    events = [load_events_binary(d / f"events_{k}.evt") for k in range(k_frames - 1)]
    flows = np.stack([io.read_flo(d / f"flow_{k}.flo") for k in range(k_frames - 1)])
    return SceneSample(images, events, maps, flags, flows)


def scene_dirs(root):
    return sorted(Path(root).glob("scene_*"), key=lambda p: p.name)


def simulate_dataset(out, count, template: dict | None = None, seed=0):
    """Write ``count`` scenes under ``out``.

    ``template`` is either a full SceneSpec document (with a ``sprites`` list;
    each scene reuses it with seed ``rng_seed + i``) or a SceneRanges document.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    template = template or {}
    for i in range(count):
        if "sprites" in template:
            spec = SceneSpec.from_dict({**template, "rng_seed": template.get("rng_seed", seed) + i})
        else:
            spec = random_scene_spec(seed + i, SceneRanges.from_dict(template))
        write_scene(generate_scene(spec), out / f"scene_{i:05d}", spec)
    return out


__all__ = [
    "EventSlice",
    "SceneRanges",
    "SceneSample",
    "SceneSpec",
    "Sprite",
    "emit_events",
    "generate_scene",
    "gt_flow",
    "load_scene",
    "random_scene_spec",
    "render_frame",
    "simulate_dataset",
    "write_scene",
]
