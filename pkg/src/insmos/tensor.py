"""Dense tensors with a small reverse-mode autodiff tape.

Every op here builds its output from numpy arrays and records a closure that
maps the output gradient to input gradients.  ``backward`` walks the graph in
reverse topological order.  The vocabulary is closed on purpose: it covers what
the model and the losses need and nothing more, so each backward rule can be
checked against central differences with :func:`grad_check`.
"""

from __future__ import annotations

import builtins

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return mul(self, power(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return index_select(self, index)


class Parameter(Tensor):
    """A named trainable leaf."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name, trainable=True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents, backward, op):
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    out.op = op
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def backward(g):
        return (g * c,)

    return _result(a.data * a.data.dtype.type(c), (a,), backward, "scale")


def exp(a):
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # overflow is reported by _result
        out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _result(out, (a,), backward, "exp")


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")

    def backward(g):
        return (g / a.data,)

    return _result(np.log(a.data), (a,), backward, "log")


def power(a, p):
    a = as_tensor(a)
    p = float(p)
    if p != int(p) and np.any(a.data < 0):
        raise ValueError("power: negative base with non-integer exponent")
    if p < 0 and np.any(a.data == 0):
        raise ValueError("power: zero base with negative exponent")
    out = a.data ** a.data.dtype.type(p)

    def backward(g):
        return (g * p * a.data ** a.data.dtype.type(p - 1),)

    return _result(out, (a,), backward, "power")


def sqrt(a):
    return power(a, 0.5)


def abs_(a):
    a = as_tensor(a)

    def backward(g):
        return (g * np.sign(a.data),)

    return _result(np.abs(a.data), (a,), backward, "abs")


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _result(a.data * mask, (a,), backward, "relu")


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (a,), backward, "sigmoid")


def clamp(a, lo, hi):
    """Clip values; the gradient is zero where clipping is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)

    def backward(g):
        return (g * inside,)

    return _result(np.clip(a.data, lo, hi), (a,), backward, "clamp")


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axes, keepdims=keepdims), 1.0 / builtins.max(count, 1))


def max(a, axis=None, keepdims=False):  # noqa: A001
    """Maximum along ``axis``; ties route the gradient to the first maximum."""
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.max(axis=axes, keepdims=True)
    hit = a.data == out
    # keep only the first hit per reduced slice
    moved = np.moveaxis(hit, axes, tuple(range(a.ndim - len(axes), a.ndim)))
    flat = moved.reshape(moved.shape[: a.ndim - len(axes)] + (-1,))
    first = np.zeros_like(flat)
    idx = flat.argmax(axis=-1)
    np.put_along_axis(first, idx[..., None], True, axis=-1)
    first = np.moveaxis(first.reshape(moved.shape), tuple(range(a.ndim - len(axes), a.ndim)), axes)

    def backward(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * first,)

    result = out if keepdims else np.squeeze(out, axis=axes)
    return _result(np.asarray(result), (a,), backward, "max")


def l2norm(a, axis, keepdims=False):
    """Euclidean norm along ``axis`` with a zero subgradient at the origin."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * a.data / safe, 0.0),)

    return _result(out if keepdims else np.squeeze(out, axis=axis), (a,), backward, "l2norm")


# ------------------------------------------------------------------ structure


def reshape(a, shape):
    a = as_tensor(a)

    def backward(g):
        return (g.reshape(a.shape),)

    return _result(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _result(a.data.transpose(axes), (a,), backward, "transpose")


def index_select(a, index):
    """Basic or integer-array indexing; gradient scatters back with add."""
    a = as_tensor(a)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _result(np.array(a.data[index]), (a,), backward, "index")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


# --------------------------------------------------------------- linear algebra


def matmul(a, b):
    """``a @ b`` with numpy batching; 2-D operands are the plain m×k · k×n case."""
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward, "softmax")


# -------------------------------------------------------------------- spatial


def _conv_cols(xp, stride, ho, wo):
    # xp: (N, C, H+2, W+2) -> (N, Ho, Wo, C*9)
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * 9)


def conv2d(x, w, b=None, stride=1, pad=1):
    """3×3 cross-correlation with zero padding.

    ``x`` is C×H×W or N×C×H×W, ``w`` is C_out×C_in×3×3, ``b`` optional C_out.
    """
    x = as_tensor(x)
    w = as_tensor(w, like=x)
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: kernel must be C_out×C_in×3×3, got {w.shape}")
    if stride not in (1, 2):
        raise ValueError("conv2d: stride must be 1 or 2")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    if xd.ndim != 4 or xd.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, c, h, wd = xd.shape
    co = w.shape[0]
    ho = (h + 2 * pad - 3) // stride + 1
    wo = (wd + 2 * pad - 3) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _conv_cols(xp, stride, ho, wo)
    wmat = w.data.reshape(co, c * 9)
    out = cols @ wmat.T  # N, Ho, Wo, Co
    if b is not None:
        b = as_tensor(b, like=x)
        out = out + b.data
    out = out.transpose(0, 3, 1, 2)
    if not batched:
        out = out[0]

    def backward(g):
        gd = g if batched else g[None]
        gt = gd.transpose(0, 2, 3, 1)  # N, Ho, Wo, Co
        gw = (gt.reshape(-1, co).T @ cols.reshape(-1, c * 9)).reshape(w.shape)
        gcols = (gt @ wmat).reshape(n, ho, wo, c, 3, 3)
        gxp = np.zeros_like(xp)
        for i in range(3):
            for j in range(3):
                gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += (
                    gcols[..., i, j].transpose(0, 3, 1, 2)
                )
        gx = gxp[:, :, pad : pad + h, pad : pad + wd]
        if not batched:
            gx = gx[0]
        grads = [np.ascontiguousarray(gx), gw]
        if b is not None:
            grads.append(gt.sum(axis=(0, 1, 2)))
        return tuple(grads)

    parents = (x, w) if b is None else (x, w, b)
    return _result(np.ascontiguousarray(out), parents, backward, "conv2d")


def bilinear_sample(img, coords):
    """Sample ``img`` at absolute pixel positions with border clamping.

    ``img`` is C×H×W (or N×C×H×W); ``coords`` is 2×H'×W' (or N×2×H'×W') with
    channel 0 the column (x) and channel 1 the row (y).
    """
    img = as_tensor(img)
    coords = as_tensor(coords, like=img)
    batched = img.ndim == 4
    im = img.data if batched else img.data[None]
    co = coords.data if batched else coords.data[None]
    n, c, h, w = im.shape
    x = co[:, 0]
    y = co[:, 1]
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (xc - x0)[:, None]
    wy = (yc - y0)[:, None]
    bidx = np.arange(n)[:, None, None]

    def gather(yy, xx):
        return im[bidx, :, yy, xx].transpose(0, 3, 1, 2)  # N, C, H', W'

    v00, v01, v10, v11 = gather(y0, x0), gather(y0, x1), gather(y1, x0), gather(y1, x1)
    out = (1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v01 + (1 - wx) * wy * v10 + wx * wy * v11
    inx = ((x >= 0) & (x <= w - 1))[:, None]
    iny = ((y >= 0) & (y <= h - 1))[:, None]

    def backward(g):
        gd = g if batched else g[None]
        gimg = np.zeros_like(im)
        for yy, xx, wt in (
            (y0, x0, (1 - wx) * (1 - wy)),
            (y0, x1, wx * (1 - wy)),
            (y1, x0, (1 - wx) * wy),
            (y1, x1, wx * wy),
        ):
            flat = (bidx * h + yy) * w + xx  # N, H', W'
            contrib = (gd * wt).transpose(1, 0, 2, 3).reshape(c, -1)
            idx = flat.reshape(-1)
            for ch in range(c):
                gimg[:, ch] += np.bincount(idx, weights=contrib[ch], minlength=n * h * w).reshape(n, h, w)
        dx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * gd
        dy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * gd
        gco = np.stack([(dx * inx).sum(axis=1), (dy * iny).sum(axis=1)], axis=1)
        if not batched:
            gimg, gco = gimg[0], gco[0]
        return gimg, gco

    if not batched:
        out = out[0]
    return _result(out.astype(im.dtype, copy=False), (img, coords), backward, "bilinear_sample")


def resize_matrix(n_in, n_out, dtype=np.float64):
    """Row-stochastic n_out×n_in linear-interpolation matrix, align-corners-false."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale_ = n_in / n_out
    for i in range(n_out):
        src = builtins.max((i + 0.5) * scale_ - 0.5, 0.0)
        i0 = min(int(np.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        lam = src - i0
        m[i, i0] += 1 - lam
        m[i, i1] += lam
    return m


def upsample_bilinear(x, height, width):
    """Bilinear resize of the last two axes (align-corners-false)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    if height < h or width < w:
        raise ValueError("upsample_bilinear: target must not be smaller than input")
    ry = resize_matrix(h, height, x.dtype)
    rx = resize_matrix(w, width, x.dtype)
    out = ry @ x.data @ rx.T

    def backward(g):
        return (ry.T @ g @ rx,)

    return _result(out, (x,), backward, "upsample_bilinear")


# ------------------------------------------------------------------- autodiff


def _topo(root):
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient at leaf {node!r}")
            node.grad = g.astype(node.dtype, copy=False) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg


def grad_check(f, x, h=1e-5, indices=None):
    """Max relative error between the tape gradient and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  ``indices`` optionally limits the
    check to a list of flat positions in ``x`` (useful for large inputs).
    Error per element is |a - n| / max(1e-12, |a| + |n|).
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x0.copy(), requires_grad=True)
    backward(f(xt))
    if xt.grad is None:
        analytic = np.zeros_like(x0)
    else:
        analytic = np.asarray(xt.grad, dtype=np.float64).reshape(x0.shape)
    flat = x0.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in positions:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(Tensor(x0.copy())).data)
        flat[i] = orig - h
        fm = float(f(Tensor(x0.copy())).data)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - num) / builtins.max(1e-12, abs(a) + abs(num))
        if np.isnan(err):
            raise FloatingPointError("grad_check: NaN encountered")
        worst = err if err > worst else worst
    return worst
