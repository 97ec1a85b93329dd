"""Minimal dense-tensor reverse-mode autodiff.

Tensors carry numpy arrays (float32 for training, float64 for gradient
checking) and are recorded on a Tape in topological order. Every forward op
validates finiteness; `backward` walks the tape once, accumulating gradients.
Only the ops needed by a small U-Net and an unrolled mean-field layer are
provided: conv2d (stride 1, same zero padding), relu, 2x2 max pooling, 2x
bilinear upsampling, channel concat, inverted dropout, channel softmax and
elementwise arithmetic.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, NumericError

FLOAT_DTYPES = (np.float32, np.float64)


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered op record for one forward pass; inputs always precede users."""

    def __init__(self):
        self.nodes = []

    def leaf(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        return record(self, "leaf", arr, (), None)


class Tensor:
    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape, nid):
        self.data = data
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, nid={self.nid})"


def record(tape, op, out_data, parents, backward_fn):
    """Append one op to the tape and return its output tensor.

    `backward_fn(grad_out) -> tuple of grads` must align with `parents`;
    entries may be None for inputs with no gradient.
    """
    if not np.isfinite(out_data).all():
        raise NumericError(f"non-finite output from op '{op}' (node {len(tape.nodes)})")
    nid = len(tape.nodes)
    tape.nodes.append(_Node(op, tuple(p.nid for p in parents), backward_fn))
    return Tensor(out_data, tape, nid)


class Gradients:
    """Result of `backward`: gradient lookup per tensor of the same tape."""

    def __init__(self, grads, tape):
        self._grads = grads
        self._tape = tape

    def __getitem__(self, t):
        if t.tape is not self._tape:
            raise ConfigurationError("tensor does not belong to the differentiated tape")
        if t.nid >= len(self._grads):
            return np.zeros_like(t.data)
        g = self._grads[t.nid]
        return np.zeros_like(t.data) if g is None else g


def backward(tape, loss):
    """Reverse sweep from a scalar loss; returns Gradients for the tape."""
    if loss.tape is not tape:
        raise ConfigurationError("loss tensor is not on the given tape")
    if loss.data.size != 1:
        raise ConfigurationError("backward requires a scalar loss")
    grads = [None] * (loss.nid + 1)
    grads[loss.nid] = np.ones_like(loss.data)
    for nid in range(loss.nid, -1, -1):
        node = tape.nodes[nid]
        g = grads[nid]
        if g is None or node.backward is None:
            continue
        for pid, pg in zip(node.parents, node.backward(g)):
            if pg is None:
                continue
            # accumulate out of place: parent grads may alias other nodes' grads
            grads[pid] = pg if grads[pid] is None else grads[pid] + pg
    return Gradients(grads, tape)


def _same_tape(*tensors):
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ConfigurationError("operands recorded on different tapes")
    return tape


def add(a, b):
    """Elementwise add; also accepts a per-channel bias (C,) for 4-d inputs."""
    tape = _same_tape(a, b)
    if a.shape == b.shape:
        return record(tape, "add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 4 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        out = a.data + b.data[None, :, None, None]
        return record(tape, "add_bias", out, (a, b), lambda g: (g, g.sum(axis=(0, 2, 3))))
    raise ConfigurationError(f"add: incompatible shapes {a.shape} and {b.shape}")


def mul(a, b):
    tape = _same_tape(a, b)
    if a.shape != b.shape:
        raise ConfigurationError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return record(tape, "mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a, s):
    s = float(s)
    return record(a.tape, "scale", a.data * s, (a,), lambda g: (g * s,))


def sub(a, b):
    return add(a, scale(b, -1.0))


def relu(x):
    mask = x.data > 0
    return record(x.tape, "relu", np.where(mask, x.data, 0), (x,), lambda g: (g * mask,))


def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    shape, dtype = x.shape, x.dtype
    return record(x.tape, "sum", out, (x,), lambda g: (np.full(shape, float(g), dtype),))


def _im2col(x, kh, kw):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # (n, c, h, w, kh, kw)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def conv2d(x, w, b=None, stride=1):
    """Cross-correlation with same zero padding and odd kernel, stride 1."""
    if stride != 1:
        raise ConfigurationError("conv2d supports stride 1 only")
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigurationError("conv2d expects 4-d input and kernel")
    cout, cin, kh, kw = w.shape
    if cin != x.shape[1]:
        raise ConfigurationError(f"conv2d: kernel expects {cin} channels, input has {x.shape[1]}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError("conv2d requires odd kernel extents for same padding")
    n, _, h, wid = x.shape
    cols = _im2col(x.data, kh, kw)  # (n*h*w, cin*kh*kw)
    out = cols @ w.data.reshape(cout, -1).T
    if b is not None:
        if b.shape != (cout,):
            raise ConfigurationError("conv2d bias must be (out_channels,)")
        out += b.data
    out = out.reshape(n, h, wid, cout).transpose(0, 3, 1, 2)

    wdata = w.data
    parents = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gflat.T @ cols).reshape(wdata.shape)
        # grad wrt input = same-pad correlation of g with the flipped kernel
        wt = wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(cin, -1)
        gcols = _im2col(g, kh, kw)
        gx = (gcols @ wt.T).reshape(n, h, wid, cin).transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return record(x.tape, "conv2d", np.ascontiguousarray(out), parents, bwd)


def max_pool2(x):
    """2x2 max pooling, stride 2; ties resolve to the first window position."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigurationError(f"max_pool2 requires even spatial dims, got {h}x{w}")
    v = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    v = v.reshape(n, c, h // 2, w // 2, 4)
    idx = v.argmax(axis=-1)
    out = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        z = np.zeros(v.shape, dtype=g.dtype)
        np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
        gx = z.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return record(x.tape, "max_pool2", np.ascontiguousarray(out), (x,), bwd)


def _up_axis(a, axis):
    # half-pixel-centered 2x bilinear: out[2i] = .75 a[i] + .25 a[i-1] (clamped)
    a = np.moveaxis(a, axis, 0)
    prev = np.concatenate([a[:1], a[:-1]], axis=0)
    nxt = np.concatenate([a[1:], a[-1:]], axis=0)
    out = np.empty((2 * a.shape[0],) + a.shape[1:], dtype=a.dtype)
    out[0::2] = 0.75 * a + 0.25 * prev
    out[1::2] = 0.75 * a + 0.25 * nxt
    return np.moveaxis(out, 0, axis)


def _up_axis_adjoint(g, axis):
    g = np.moveaxis(g, axis, 0)
    ge, go = g[0::2], g[1::2]
    ga = 0.75 * (ge + go)
    ga[:-1] += 0.25 * ge[1:]
    ga[0] += 0.25 * ge[0]
    ga[1:] += 0.25 * go[:-1]
    ga[-1] += 0.25 * go[-1]
    return np.moveaxis(ga, 0, axis)


def upsample_bilinear2(x):
    """2x bilinear upsampling with half-pixel alignment, separable per axis."""
    if x.data.ndim != 4:
        raise ConfigurationError("upsample_bilinear2 expects 4-d input")
    out = _up_axis(_up_axis(x.data, 2), 3)

    def bwd(g):
        return (_up_axis_adjoint(_up_axis_adjoint(g, 3), 2),)

    return record(x.tape, "upsample_bilinear2", out, (x,), bwd)


def concat_channels(a, b):
    tape = _same_tape(a, b)
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ConfigurationError("concat_channels expects 4-d inputs")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ConfigurationError(f"concat_channels: shapes {a.shape} / {b.shape} disagree")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return record(tape, "concat_channels", out, (a, b),
                  lambda g: (g[:, :ca], g[:, ca:]))


def dropout(x, p, rng, enabled):
    """Inverted dropout: survivors scaled by 1/(1-p); identity when disabled."""
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout probability must be in [0, 1), got {p}")
    if not enabled or p == 0.0:
        return record(x.tape, "dropout_off", x.data, (x,), lambda g: (g,))
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return record(x.tape, "dropout", x.data * mask, (x,), lambda g: (g * mask,))


def softmax_channels(x):
    """Softmax over axis 1, shifted by the channel max for stability."""
    m = x.data.max(axis=1, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=1, keepdims=True)

    def bwd(g):
        return ((g - (g * s).sum(axis=1, keepdims=True)) * s,)

    return record(x.tape, "softmax_channels", s, (x,), bwd)
