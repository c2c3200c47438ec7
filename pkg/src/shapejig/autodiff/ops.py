"""Differentiable primitives.

Every primitive computes its output with numpy, checks it is finite and
registers a vector-Jacobian rule on the active tape.
"""

from __future__ import annotations

from numbers import Number

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, record


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        c = float(b)
        return record("add", a.data + c, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return record("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        c = float(b)
        return record("sub", a.data - c, (a,), lambda g: (g,))
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if isinstance(b, Number):
        c = float(b)
        return record("mul", a.data * c, (a,), lambda g: (g * c,))
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    return record("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return record("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n, dtype=a.dtype),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return record("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def take_rows(a, rows) -> Tensor:
    """Select entries along the first axis (repeats allowed)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    src = a.shape

    def vjp(g):
        out = np.zeros(src, dtype=g.dtype)
        np.add.at(out, rows, g)
        return (out,)

    return record("take_rows", a.data[rows], (a,), vjp)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def norm(a, axis=None) -> Tensor:
    """Euclidean norm, of the whole tensor or along ``axis``.

    The subgradient at the origin is taken as zero.
    """
    a = as_tensor(a)
    x = a.data
    n = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))

    def vjp(g):
        safe = np.where(n > 0, n, 1.0)
        gg = g if axis is None else np.expand_dims(g, axis)
        return (np.where(n > 0, x / safe, 0.0) * gg,)

    out = n.reshape(()) if axis is None else np.squeeze(n, axis=axis)
    return record("norm", out, (a,), vjp)


def dense(x, weight, bias) -> Tensor:
    """Affine map ``x @ weight + bias`` for ``x`` of shape N x D."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ShapeError(f"dense: expected 2-D input/weight and 1-D bias, got {x.shape}, {weight.shape}, {bias.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input has {x.shape[1]} features but weight expects {weight.shape[0]}")
    if bias.shape[0] != weight.shape[1]:
        raise ShapeError(f"dense: bias length {bias.shape[0]} != output width {weight.shape[1]}")
    xd, wd = x.data, weight.data

    def vjp(g):
        return g @ wd.T, xd.T @ g, g.sum(axis=0)

    return record("dense", xd @ wd + bias.data, (x, weight, bias), vjp)


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with an OIHW kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    n, c, h, w = x.shape
    o, ci, kh, kw = kernel.shape
    if c != ci:
        raise ShapeError(f"conv2d: input has {c} channels but kernel expects {ci}")
    ho, wo = _conv_out(h, kh, stride, padding), _conv_out(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    inputs = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({o},)")
        inputs.append(bias)

    # columns laid out (c, kh, kw) x (n, ho, wo) so every copy moves contiguous rows
    hp, wp = h + 2 * padding, w + 2 * padding
    xp = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x.data.transpose(1, 0, 2, 3)
    offsets = [(i, j) for i in range(kh) for j in range(kw)]
    cols = np.empty((c, kh * kw, n, ho, wo), dtype=x.dtype)
    for q, (i, j) in enumerate(offsets):
        cols[:, q] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    cols = cols.reshape(c * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(o, c * kh * kw)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(o, n * ho * wo)
        grads = [None, (g2 @ cols.T).reshape(o, c, kh, kw)]
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, kh * kw, n, ho, wo)
            gxp = np.zeros((c, n, hp, wp), dtype=g.dtype)
            for q, (i, j) in enumerate(offsets):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, q]
            grads[0] = np.ascontiguousarray(gxp[:, :, padding : padding + h, padding : padding + w].transpose(1, 0, 2, 3))
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    return record("conv2d", out, inputs, vjp)


def maxpool2d(x, window: int, stride: int | None = None) -> Tensor:
    """Max pooling; the gradient goes to the first maximum in scan order."""
    x = as_tensor(x)
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d: expected NCHW input, got {x.shape}")
    if window < 1 or stride < 1:
        raise ValueError("maxpool2d: window and stride must be positive")
    n, c, h, w = x.shape
    if h < window or w < window:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    offsets = [(a, b) for a in range(window) for b in range(window)]

    def view(arr, a, b):
        return arr[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]

    out = view(x.data, 0, 0).copy()
    for a, b in offsets[1:]:
        np.maximum(out, view(x.data, a, b), out=out)

    def vjp(g):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        taken = np.zeros(out.shape, dtype=bool)
        for a, b in offsets:
            hit = view(x.data, a, b) == out
            hit &= ~taken
            taken |= hit
            view(gx, a, b)[...] += g * hit
        return (gx,)

    return record("maxpool2d", out, (x,), vjp)


def check_labels(labels, n_classes: int, n_rows: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != n_rows:
        raise ShapeError(f"expected {n_rows} labels, got shape {labels.shape}")
    if labels.size and not np.issubdtype(labels.dtype, np.integer):
        if not np.all(labels == np.round(labels)):
            raise ValueError("labels must be integer class indices")
    labels = labels.astype(np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    return labels


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: expected N x C logits, got {logits.shape}")
    n, c = logits.shape
    labels = check_labels(labels, c, n)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((lse - z[rows, labels]).mean())

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return record("softmax_cross_entropy", loss, (logits,), vjp)


def channel_stats(x) -> tuple[Tensor, Tensor]:
    """Per-sample, per-channel mean and population std over spatial positions."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"channel_stats: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    hw = h * w
    mu = x.data.mean(axis=(2, 3))
    centered = x.data - mu[:, :, None, None]
    sd = np.sqrt((centered * centered).mean(axis=(2, 3)))

    mean_t = record("channel_mean", mu, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy(),))

    def std_vjp(g):
        safe = np.where(sd > 0, sd, 1.0)
        scale = np.where(sd > 0, g / (hw * safe), 0.0)
        return (centered * scale[:, :, None, None],)

    std_t = record("channel_std", sd, (x,), std_vjp)
    return mean_t, std_t
