"""Finite-difference gradient suite over ops, attention, losses and the full model.

Every case reduces its output to a scalar through a fixed random weighting so
no coordinate has an identically-zero true gradient by symmetry.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as L
from . import tensor as T
from .model import InsMOSModel, ModelConfig
from .tensor import Tensor

OP_TOL = 1e-5
LOSS_TOL = 1e-4


@dataclass
class CaseResult:
    name: str
    kind: str  # op | cma | loss | model
    shapes: str
    error: float
    tol: float

    @property
    def passed(self):
        return self.error <= self.tol


def _away_from(rng, shape, lo=0.2, hi=1.5):
    """Values with |x| in [lo, hi] and random sign (keeps kinks out of reach)."""
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _check(name, kind, fn, inputs, rng, tol, h=1e-5):
    """grad_check ``fn`` with respect to each input in turn."""
    worst = 0.0
    for i in range(len(inputs)):
        def f(x, i=i):
            args = [Tensor(a) if j != i else x for j, a in enumerate(inputs)]
            return fn(*args)

        worst = max(worst, T.grad_check(f, inputs[i], h=h))
    shapes = ",".join("x".join(map(str, np.shape(a))) or "scalar" for a in inputs)
    return CaseResult(name, kind, shapes, worst, tol)


def op_cases(rng):
    n = rng.normal
    R = {}

    def w(shape):
        key = tuple(shape)
        if key not in R:
            R[key] = rng.normal(size=shape)
        return Tensor(R[key])

    def red(out):
        return T.sum(out * w(out.shape))

    pos = lambda s: rng.uniform(0.5, 2.0, s)  # noqa: E731
    cases = [
        ("add", lambda a, b: red(a + b), [n(size=(3, 4)), n(size=(4,))]),
        ("sub", lambda a, b: red(a - b), [n(size=(3, 1)), n(size=(3, 4))]),
        ("mul", lambda a, b: red(a * b), [n(size=(2, 3, 4)), n(size=(3, 1))]),
        ("scale", lambda a: red(T.scale(a, -1.7)), [n(size=(5,))]),
        ("exp", lambda a: red(T.exp(a)), [n(size=(3, 3))]),
        ("log", lambda a: red(T.log(a)), [pos((3, 3))]),
        ("power", lambda a: red(T.power(a, 1.7)), [pos((3, 3))]),
        ("sqrt", lambda a: red(T.sqrt(a)), [pos((4,))]),
        ("abs", lambda a: red(T.abs_(a)), [_away_from(rng, (4, 3))]),
        ("relu", lambda a: red(T.relu(a)), [_away_from(rng, (4, 3))]),
        ("sigmoid", lambda a: red(T.sigmoid(a)), [n(size=(4, 3))]),
        ("clamp", lambda a: red(T.clamp(a, -0.1, 0.1)), [_away_from(rng, (4, 3))]),
        ("sum", lambda a: red(T.sum(a, axis=1, keepdims=True)), [n(size=(3, 4, 2))]),
        ("mean", lambda a: red(T.mean(a, axis=(0, 2))), [n(size=(3, 4, 2))]),
        ("max", lambda a: red(T.max(a, axis=-1)), [rng.permutation(24).reshape(4, 6) * 0.3]),
        ("l2norm", lambda a: red(T.l2norm(a, axis=0)), [n(size=(5, 3))]),
        ("reshape", lambda a: red(T.reshape(a, (4, 6))), [n(size=(2, 3, 4))]),
        ("transpose", lambda a: red(T.transpose(a, (2, 0, 1))), [n(size=(2, 3, 4))]),
        ("index_select", lambda a: red(a[np.array([2, 0, 2])]), [n(size=(3, 4))]),
        ("concat", lambda a, b: red(T.concat([a, b], axis=1)), [n(size=(2, 3)), n(size=(2, 2))]),
        ("stack", lambda a, b: red(T.stack([a, b], axis=0)), [n(size=(2, 3)), n(size=(2, 3))]),
        ("matmul", lambda a, b: red(T.matmul(a, b)), [n(size=(2, 3, 4)), n(size=(4, 5))]),
        ("softmax", lambda a: red(T.softmax(a, axis=-1)), [n(size=(3, 5))]),
        ("conv2d_s1", lambda x, k, b: red(T.conv2d(x, k, b, stride=1)),
         [n(size=(2, 3, 6, 5)), n(size=(4, 3, 3, 3)), n(size=(4,))]),
        ("conv2d_s2", lambda x, k, b: red(T.conv2d(x, k, b, stride=2)),
         [n(size=(3, 7, 6)), n(size=(2, 3, 3, 3)), n(size=(2,))]),
        ("upsample_bilinear", lambda a: red(T.upsample_bilinear(a, 7, 9)), [n(size=(2, 3, 4))]),
    ]
    # sample points strictly inside cells so the bilinear kinks stay out of reach
    grid = np.stack(np.meshgrid(np.arange(5.0), np.arange(4.0), indexing="xy"))
    coords = grid + rng.uniform(0.2, 0.8, grid.shape) * rng.choice([-1, 1], grid.shape)
    cases.append(("bilinear_sample", lambda img, c: red(T.bilinear_sample(img, c)),
                  [n(size=(2, 4, 5)), coords]))
    cases.append(("softmax_matmul", lambda a, b: red(T.softmax(T.matmul(a, b), axis=-1)),
                  [n(size=(3, 4)), n(size=(4, 3))]))
    return cases


def loss_cases(rng):
    n = rng.normal
    gt = (rng.random((6, 6)) > 0.5).astype(float)
    frames = [[(n(size=(3, 2, 2)), n(size=(3, 2, 2))) for _ in range(2)] for _ in range(3)]
    flat = [a for item in frames for pair in item for a in pair]

    def unpack(parts):
        it = iter(parts)
        return [[(next(it), next(it)) for _ in range(2)] for _ in range(3)]

    def contrastive(*parts):
        return L.contrastive_loss(unpack(parts[:-1]), T.exp(parts[-1]))

    S_all = n(size=(4, 6, 6))
    ms = n(size=(2, 4))
    gts = [gt, 1 - gt]
    flags = [1, 0]

    def mos(S, m):
        a = L.hungarian_match(L.match_cost(S, m, gts, flags))
        return L.mos_loss(S, m, gts, flags, a)

    grid = np.stack(np.meshgrid(np.arange(6.0), np.arange(5.0), indexing="xy"))
    F = rng.uniform(0.2, 0.8, (2, 5, 6)) * rng.choice([-1, 1], (2, 5, 6))
    F = F + np.round(rng.normal(size=(2, 5, 6)))
    F = np.clip(F + grid, 0.2, np.array([5, 4])[:, None, None] - 0.2) - grid
    I0, I1 = rng.random((1, 5, 6)), rng.random((1, 5, 6))

    return [
        ("similarity", lambda a, b, al: L.similarity(a, b, al), [n(size=5), n(size=5), np.array(0.7)]),
        ("contrastive", contrastive, flat + [np.array(-0.3)]),
        ("focal", lambda p: L.focal_loss(p, gt), [rng.uniform(0.05, 0.95, (6, 6))]),
        ("dice", lambda p: L.dice_loss(p, gt), [rng.uniform(0.05, 0.95, (6, 6))]),
        ("mask_loss", lambda s: L.mask_loss(s, gt, L.LossWeights()), [n(size=(6, 6))]),
        ("class_ce", lambda z: L.class_ce(z, 1), [n(size=2)]),
        ("mos_loss", mos, [S_all, ms]),
        ("flow_supervised", lambda f: L.flow_supervised(f, np.full((2, 5, 6), 0.5), gt[:5] > 0), [F]),
        ("robust_penalty", lambda x: T.sum(L.robust_penalty(x)), [_away_from(rng, (4, 4))]),
        ("flow_photometric", lambda f: L.flow_photometric(I0, I1, f), [F]),
        ("total_loss", lambda a, b, c: L.total_loss(a, b, c), [np.array(1.3), np.array(0.4), np.array(2.2)]),
    ]


def cma_case(rng):
    cfg = ModelConfig(channels=4, embeddings=3, bins=3, dtype="f64", seed=1)
    model = InsMOSModel(cfg)
    for p in model.params.values():
        if p.name.startswith("cma."):
            p.data = rng.normal(0, 0.5, p.shape)
    shape = (4, 3, 3)
    inputs = [rng.normal(size=shape) for _ in range(3)]
    R1, R2 = rng.normal(size=shape), rng.normal(size=shape)

    def fn(a, b, c):
        f_T, f_M, _, _ = model.cma_forward(a, b, c)
        return T.sum(f_T * R1) + T.sum(f_M * R2)

    yield _check("cma_inputs", "cma", fn, inputs, rng, LOSS_TOL)

    worst = 0.0
    names = [k for k in model.params if k.startswith("cma.")]
    for name in names:
        original = model.params[name]

        def f(x, name=name):
            model.params[name] = x
            try:
                return fn(*(Tensor(a) for a in inputs))
            finally:
                model.params[name] = original

        worst = max(worst, T.grad_check(f, original.data))
    yield CaseResult("cma_params", "cma", f"{len(names)} tensors", worst, LOSS_TOL)


def model_case(rng, per_tensor=3, h=1e-5):
    """Total training loss of a tiny 64-bit model against sampled parameter coordinates."""
    from .data import build_item
    from .synth import SceneRanges, generate_scene, random_scene_spec
    from .train import TrainConfig, compute_losses

    ranges = SceneRanges(width=24, height=24, moving=(1, 1), size=(8, 8), screen_speed=(2, 2), camera_max=1)
    cfg = TrainConfig(steps=1, batch_size=2, dtype="f64", ffe="sf+uf",
                      model={"channels": 4, "embeddings": 3, "bins": 3, "seed": 2})
    model = InsMOSModel(cfg.model_config())
    for p in model.params.values():
        # zero biases on all-zero event pixels would sit exactly on the relu kink
        if p.name.endswith(".o.w") or p.name.endswith(".b"):
            p.data = p.data + rng.normal(0, 0.3, p.shape)
    samples = [generate_scene(random_scene_spec(s, ranges)) for s in (5, 6)]
    items = [build_item(s, "fused", 3, 2, model.config.downsample, dtype=np.float64) for s in samples]

    def loss():
        return compute_losses(model, items, cfg).total

    model.zero_grad()
    T.backward(loss())
    grads = {k: (np.zeros(p.shape) if p.grad is None else np.asarray(p.grad)) for k, p in model.params.items()}
    scale = max(float(np.abs(g).max()) for g in grads.values())
    worst, checked = 0.0, 0
    for name, original in list(model.params.items()):
        g = np.abs(grads[name]).reshape(-1)
        # round-off in the loss (~1e-16 * |L| / h) swamps coordinates with tiny gradients
        candidates = np.flatnonzero(g > 1e-4 * scale)
        if candidates.size == 0:
            continue
        idx = rng.choice(candidates, size=min(per_tensor, candidates.size), replace=False)

        def f(x, name=name, original=original):
            model.params[name] = x
            try:
                return loss()
            finally:
                model.params[name] = original

        worst = max(worst, T.grad_check(f, original.data, h=h, indices=list(idx)))
        checked += len(idx)
    return CaseResult("full_model", "model", f"{checked} coords, 24x24, B=2, K=2", worst, LOSS_TOL)


def run_suite(seed=0, include_model=True):
    """List of CaseResult for every case."""
    rng = np.random.default_rng(seed)
    results = [_check(name, "op", fn, inputs, rng, OP_TOL) for name, fn, inputs in op_cases(rng)]
    results += list(cma_case(rng))
    results += [_check(name, "loss", fn, inputs, rng, LOSS_TOL) for name, fn, inputs in loss_cases(rng)]
    if include_model:
        results.append(model_case(rng))
    return results


def format_report(results):
    lines = [f"{'case':<20} {'kind':<6} {'max_rel_err':>12} {'tol':>8}  status  shapes"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<20} {r.kind:<6} {r.error:>12.3e} {r.tol:>8.0e}  {status:<6}  {r.shapes}")
    return "\n".join(lines)
