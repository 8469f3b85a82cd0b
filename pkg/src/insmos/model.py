"""Toy image+event segmentation network.

Three stride-4 convolutional encoders (image, event voxels, event mask), the
dual-branch cross-modal masked attention block, a query-based motion decoder,
a mask-embedding head and an optical-flow head used only for training.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io
from . import tensor as T
from .tensor import Parameter, Tensor

MODALITIES = ("fused", "events", "image_pair")
CMA_MODES = ("dual", "texture", "motion", "off")


@dataclass
class ModelConfig:
    channels: int = 16
    embeddings: int = 8
    bins: int = 10
    image_channels: int = 1
    strides: tuple = (2, 2)
    ffe: bool = True
    modality: str = "fused"
    cma: str = "dual"
    dtype: str = "f32"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.strides = tuple(self.strides)
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.cma not in CMA_MODES:
            raise ValueError(f"unknown CMA mode {self.cma!r}")
        if any(s not in (1, 2) for s in self.strides) or len(self.strides) != 2:
            raise ValueError("strides must be two values in {1, 2}")

    @property
    def event_channels(self):
        # the image-pair ablation routes the second frame through the event encoder
        return self.image_channels if self.modality == "image_pair" else self.bins

    @property
    def downsample(self):
        return int(np.prod(self.strides))

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass
class ModelOutputs:
    f_T: Tensor
    f_M: Tensor
    me_mask: Tensor
    me_mov: Tensor
    ms_mov: Tensor
    S_all: Tensor
    F_pred: Tensor | None = None
    attn_texture: np.ndarray | None = None
    attn_motion: np.ndarray | None = None
    frame_features: list = field(default_factory=list)  # (f_T, f_M) per frame in train mode


def positional_encoding(channels, h, w, dtype=np.float32):
    """Fixed 2-D sinusoidal encoding, channels×h×w."""
    quarter = max(channels // 4, 1)
    freqs = 1.0 / (10.0 ** (np.arange(quarter) / quarter))
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    ys = ys / max(h - 1, 1) * np.pi
    xs = xs / max(w - 1, 1) * np.pi
    planes = []
    for f in freqs:
        planes += [np.sin(f * xs * 4), np.cos(f * xs * 4), np.sin(f * ys * 4), np.cos(f * ys * 4)]
    pe = np.stack(planes)[:channels]
    if len(pe) < channels:
        pe = np.concatenate([pe, np.zeros((channels - len(pe), h, w))])
    return pe.astype(dtype)


class InsMOSModel:
    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        self.params: OrderedDict[str, Parameter] = OrderedDict()
        self._rng = np.random.default_rng(self.config.seed)
        self._dtype = T.DTYPES[self.config.dtype]
        self._pe_cache = {}
        self._build()

    # ------------------------------------------------------------ parameters

    def _add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = Parameter(np.asarray(value, dtype=self._dtype), name)
        return self.params[name]

    def _uniform(self, shape, fan_in):
        bound = np.sqrt(3.0 / fan_in)
        return self._rng.uniform(-bound, bound, shape)

    def _conv(self, name, cin, cout):
        self._add(f"{name}.w", self._uniform((cout, cin, 3, 3), cin * 9) * np.sqrt(2.0))
        self._add(f"{name}.b", np.zeros(cout))

    def _linear(self, name, cin, cout, zero=False):
        # weights stored out×in, applied as W @ x on channel-first features
        w = np.zeros((cout, cin)) if zero else self._uniform((cout, cin), cin)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros((cout, 1)))

    def _build(self):
        cfg = self.config
        c, n = cfg.channels, cfg.embeddings
        for name, cin in (("enc_img", cfg.image_channels), ("enc_evt", cfg.event_channels), ("enc_em", 1)):
            self._conv(f"{name}.0", cin, c)
            self._conv(f"{name}.1", c, c)
            self._conv(f"{name}.2", c, c)
        if cfg.cma == "off":
            self._linear("fuse", 2 * c, c)
        else:
            for br in ("tex", "mot"):
                self._linear(f"cma.{br}.q", c, c)
                self._linear(f"cma.{br}.k", c, c)
                self._linear(f"cma.{br}.v", c, c)
                self._linear(f"cma.{br}.o", c, c, zero=True)
                self._add(f"cma.{br}.log_tau", np.zeros(()))
        self._add("dec.queries", self._rng.normal(0.0, 1.0, (n, c)))
        self._linear("dec.q", c, c)
        self._linear("dec.k", c, c)
        self._linear("dec.v", c, c)
        self._linear("dec.o", c, c)
        self._linear("dec.mlp1", c, 2 * c)
        self._linear("dec.mlp2", 2 * c, c)
        self._linear("dec.embed", c, c)
        self._linear("dec.score", c, 2)
        self._conv("mask.0", c, c)
        self._conv("mask.1", c, c)
        self._conv("flow.0", c, c)
        self._conv("flow.1", c, 2)
        # contrastive temperature; lives here so checkpoints carry it
        self._add("cfl.log_alpha", np.zeros(()))

    def state_dict(self):
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.asarray(state[k], dtype=self._dtype).copy()

    def save(self, path):
        io.save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path, config: ModelConfig):
        model = cls(config)
        model.load_state_dict(io.load_checkpoint(path))
        return model

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_parameters(self):
        return int(sum(p.data.size for p in self.params.values()))

    # -------------------------------------------------------------- helpers

    @property
    def alpha(self):
        return T.exp(self._p("cfl.log_alpha"))

    def _p(self, name):
        return self.params[name]

    def _conv_apply(self, name, x, stride=1):
        return T.conv2d(x, self._p(f"{name}.w"), self._p(f"{name}.b"), stride=stride)

    def _lin(self, name, x):
        return T.matmul(self._p(f"{name}.w"), x) + self._p(f"{name}.b")

    def _pe(self, h, w):
        key = (h, w)
        if key not in self._pe_cache:
            self._pe_cache[key] = Tensor(positional_encoding(self.config.channels, h, w, self._dtype))
        return self._pe_cache[key]

    def _encoder(self, name, x):
        s1, s2 = self.config.strides
        x = T.relu(self._conv_apply(f"{name}.0", x, s1))
        x = T.relu(self._conv_apply(f"{name}.1", x, s2))
        return self._conv_apply(f"{name}.2", x)

    # -------------------------------------------------------------- forward

    def encode(self, image, voxel, em):
        """(f_I, f_E, f_EM), each N×c×h×w (or c×h×w for unbatched inputs)."""
        image, voxel, em = (T.as_tensor(a) for a in (image, voxel, em))
        if image.shape[-2:] != voxel.shape[-2:] or em.shape[-2:] != image.shape[-2:]:
            raise ValueError("image, voxel and event mask must share spatial size")
        f_E = self._encoder("enc_evt", voxel)
        f_I = f_E if self.config.modality == "events" else self._encoder("enc_img", image)
        f_EM = self._encoder("enc_em", em)
        return f_I, f_E, f_EM

    def _attention_branch(self, br, query_src, kv_src):
        # channel-transposed attention: the attention map is c×c
        q = self._lin(f"cma.{br}.q", query_src)
        k = self._lin(f"cma.{br}.k", kv_src)
        v = self._lin(f"cma.{br}.v", kv_src)
        q = _normalize(q)
        k = _normalize(k)
        inv_tau = T.exp(T.scale(self._p(f"cma.{br}.log_tau"), -1.0))
        attn = T.softmax(T.matmul(q, T.transpose(k)) * inv_tau, axis=-1)
        return self._lin(f"cma.{br}.o", T.matmul(attn, v)), attn

    def cma_forward(self, f_I, f_E, f_EM):
        """(f_T, f_M, attn_texture, attn_motion)."""
        if not (f_I.shape == f_E.shape == f_EM.shape):
            raise ValueError("CMA inputs must all be c×h×w")
        shape = f_I.shape
        flat = shape[:-2] + (shape[-2] * shape[-1],)
        g = f_E * f_EM
        I, G = T.reshape(f_I, flat), T.reshape(g, flat)
        mode = self.config.cma
        if mode == "off":
            fused = T.reshape(self._lin("fuse", T.concat([I, G], axis=-2)), shape)
            return fused, fused, None, None
        f_T, f_M, a_t, a_m = f_I, f_E, None, None
        if mode in ("dual", "texture"):
            out, attn = self._attention_branch("tex", I, G)
            f_T = T.reshape(out, shape) + f_I
            a_t = attn.data
        if mode in ("dual", "motion"):
            out, attn = self._attention_branch("mot", G, I)
            f_M = T.reshape(out, shape) + f_E
            a_m = attn.data
        return f_T, f_M, a_t, a_m

    def decode_masks(self, f_T):
        pe = self._pe(*f_T.shape[-2:])
        x = T.relu(self._conv_apply("mask.0", f_T + pe))
        return self._conv_apply("mask.1", x)

    def decode_motion(self, f_M):
        """(me_mov c×n, ms_mov 2×n), batched over leading dims."""
        shape = f_M.shape
        flat = shape[:-2] + (shape[-2] * shape[-1],)
        pe = self._pe(*shape[-2:])
        mem = T.reshape(f_M + pe, flat)  # (N,) c × L
        c = self.config.channels
        queries = T.transpose(self._p("dec.queries"))  # c × n
        q = self._lin("dec.q", queries)
        k = self._lin("dec.k", mem)
        v = self._lin("dec.v", mem)
        logits = T.matmul(T.transpose(k), q) * (1.0 / np.sqrt(c))  # (N,) L × n
        attn = T.softmax(logits, axis=-2)
        gathered = T.matmul(v, attn)  # (N,) c × n
        x = queries + self._lin("dec.o", gathered)
        x = x + self._lin("dec.mlp2", T.relu(self._lin("dec.mlp1", x)))
        return self._lin("dec.embed", x), self._lin("dec.score", x)

    def decode_flow(self, f_M, height, width):
        x = T.relu(self._conv_apply("flow.0", f_M))
        return T.upsample_bilinear(self._conv_apply("flow.1", x), height, width)

    def forward_frame(self, image, voxel, em, decode=True, flow=False):
        f_I, f_E, f_EM = self.encode(image, voxel, em)
        f_T, f_M, a_t, a_m = self.cma_forward(f_I, f_E, f_EM)
        if not decode:
            return f_T, f_M
        me_mask = self.decode_masks(f_T)
        me_mov, ms_mov = self.decode_motion(f_M)
        S_all = fuse(me_mov, me_mask)
        F_pred = self.decode_flow(f_M, *T.as_tensor(image).shape[-2:]) if flow else None
        return ModelOutputs(f_T, f_M, me_mask, me_mov, ms_mov, S_all, F_pred, a_t, a_m)

    def forward_full(self, frames, mode="infer"):
        """Run the pipeline on a list of per-frame inputs ``(image, voxel, em)``.

        Infer mode uses the first frame only and never runs the flow head.  Train
        mode decodes the first frame (plus flow when enabled) and keeps
        ``(f_T, f_M)`` of every frame for the contrastive objective.
        """
        if mode not in ("train", "infer"):
            raise ValueError("mode must be 'train' or 'infer'")
        train = mode == "train"
        out = self.forward_frame(*frames[0], decode=True, flow=train and self.config.ffe)
        if train:
            out.frame_features = [(out.f_T, out.f_M)]
            for fr in frames[1:]:
                out.frame_features.append(self.forward_frame(*fr, decode=False))
        return out


def _normalize(x, eps=1e-6):
    """Scale rows along the last axis to unit length."""
    return x * T.power(T.l2norm(x, axis=-1, keepdims=True) + eps, -1.0)


def fuse(me_mov, me_mask):
    """Instance mask logits: me_movᵀ · me_mask, contracting the channel axis."""
    me_mov, me_mask = T.as_tensor(me_mov), T.as_tensor(me_mask)
    c = me_mask.shape[-3]
    if me_mov.shape[-2] != c:
        raise ValueError(f"fuse: channel mismatch {me_mov.shape} vs {me_mask.shape}")
    h, w = me_mask.shape[-2:]
    lead = me_mask.shape[:-3]
    flat = T.reshape(me_mask, lead + (c, h * w))
    out = T.matmul(T.transpose(me_mov), flat)
    return T.reshape(out, lead + (me_mov.shape[-1], h, w))
