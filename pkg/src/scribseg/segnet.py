"""Scaled-down U-Net segmentation network and its M-step trainer.

Encoder/decoder blocks of two 3x3 conv+relu layers, 2x2 max pooling down,
bilinear upsampling + skip concat up, 1x1 output conv. Dropout sits on the
innermost blocks. Training minimizes UNKNOWN-masked pixel-wise cross entropy
with ADAM under a stepped learning-rate decay.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DataError, NumericError
from .util import UNKNOWN

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class NetConfig:
    depth: int = 3
    base_channels: int = 16
    num_labels: int = 2
    dropout_p: float = 0.5
    dropout_blocks: int = 5

    def validate(self):
        if self.depth < 2:
            raise ConfigurationError("depth must be >= 2")
        if self.num_labels < 2:
            raise ConfigurationError("num_labels must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")
        if self.dropout_blocks > self.total_blocks:
            raise ConfigurationError(
                f"dropout_blocks {self.dropout_blocks} exceeds {self.total_blocks} blocks")
        return self

    @property
    def total_blocks(self):
        return 2 * self.depth - 1

    def blocks(self):
        """Block keys in network order: encoders down, decoders up."""
        enc = [("enc", i) for i in range(self.depth)]
        dec = [("dec", i) for i in range(self.depth - 2, -1, -1)]
        return enc + dec

    def dropout_set(self):
        """The `dropout_blocks` innermost blocks (nearest the bottleneck)."""
        order = self.blocks()
        ranked = sorted(range(len(order)),
                        key=lambda k: (self.depth - 1 - order[k][1], k))
        return {order[k] for k in ranked[: self.dropout_blocks]}

    def conv_specs(self):
        """(name, cin, cout, ksize) in registration order."""
        ch = [self.base_channels * 2 ** i for i in range(self.depth)]
        specs = []
        for i in range(self.depth):
            cin = 1 if i == 0 else ch[i - 1]
            specs.append((f"enc{i}_conv1", cin, ch[i], 3))
            specs.append((f"enc{i}_conv2", ch[i], ch[i], 3))
        for i in range(self.depth - 2, -1, -1):
            specs.append((f"dec{i}_conv1", ch[i + 1] + ch[i], ch[i], 3))
            specs.append((f"dec{i}_conv2", ch[i], ch[i], 3))
        specs.append(("out_conv", ch[0], self.num_labels, 1))
        return specs


class NetParams:
    """Ordered parameter tensors plus ADAM moments and the step counter."""

    def __init__(self, tensors):
        self.tensors = dict(tensors)
        self.m = {k: np.zeros_like(v) for k, v in self.tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.tensors.items()}
        self.t = 0

    def copy(self):
        out = NetParams({k: v.copy() for k, v in self.tensors.items()})
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.t = self.t
        return out

    def blob(self):
        return b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes()
                        for v in self.tensors.values())


def init_params(cfg, rng, dtype=np.float32):
    """He-uniform conv kernels, zero biases."""
    cfg.validate()
    tensors = {}
    for name, cin, cout, k in cfg.conv_specs():
        limit = np.sqrt(6.0 / (cin * k * k))
        tensors[f"{name}_w"] = rng.uniform(-limit, limit, size=(cout, cin, k, k)).astype(dtype)
        tensors[f"{name}_b"] = np.zeros(cout, dtype=dtype)
    return NetParams(tensors)


def _conv_block(tape, leaves, name, h):
    h = ad.relu(ad.conv2d(h, leaves[f"{name}_conv1_w"], leaves[f"{name}_conv1_b"]))
    return ad.relu(ad.conv2d(h, leaves[f"{name}_conv2_w"], leaves[f"{name}_conv2_b"]))


def forward_tape(tape, params, cfg, batch, dropout_enabled, rng):
    """Taped forward pass on a padded batch (B,1,H,W); returns (logits, leaves)."""
    h_dim, w_dim = batch.shape[2], batch.shape[3]
    grid = 2 ** (cfg.depth - 1)
    if h_dim % grid or w_dim % grid:
        raise ConfigurationError(f"batch dims {h_dim}x{w_dim} not divisible by {grid}")
    leaves = {k: tape.leaf(v) for k, v in params.tensors.items()}
    drop = cfg.dropout_set()

    def maybe_dropout(h, key):
        if key in drop and cfg.dropout_p > 0:
            return ad.dropout(h, cfg.dropout_p, rng, dropout_enabled)
        return h

    x = tape.leaf(batch)
    skips = []
    h = x
    for i in range(cfg.depth):
        if i > 0:
            h = ad.max_pool2(h)
        h = _conv_block(tape, leaves, f"enc{i}", h)
        h = maybe_dropout(h, ("enc", i))
        if i < cfg.depth - 1:
            skips.append(h)
    for i in range(cfg.depth - 2, -1, -1):
        h = ad.upsample_bilinear2(h)
        h = ad.concat_channels(h, skips[i])
        h = _conv_block(tape, leaves, f"dec{i}", h)
        h = maybe_dropout(h, ("dec", i))
    logits = ad.conv2d(h, leaves["out_conv_w"], leaves["out_conv_b"])
    return logits, leaves


def pad_to_grid(image, depth):
    """Reflect-pad a 2-d image to the next multiple of 2**(depth-1)."""
    grid = 2 ** (depth - 1)
    h, w = image.shape
    ph = (-h) % grid
    pw = (-w) % grid
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw)), mode="reflect")
    return image, (h, w)


def forward(params, cfg, image, dropout_enabled=False, rng=None):
    """Single-image forward pass. Returns (logits, probs) as (L, H, W) arrays."""
    if rng is None:
        rng = np.random.default_rng(0)
    padded, (h, w) = pad_to_grid(np.asarray(image, dtype=np.float32), cfg.depth)
    tape = ad.Tape()
    logits, _ = forward_tape(tape, params, cfg, padded[None, None], dropout_enabled, rng)
    probs = ad.softmax_channels(logits)
    return logits.data[0, :, :h, :w], probs.data[0, :, :h, :w]


def predict(params, cfg, image):
    """Deterministic argmax labeling of one image."""
    _, probs = forward(params, cfg, image)
    return probs.argmax(axis=0).astype(np.uint8)


def masked_cross_entropy(logits, target):
    """Mean -log softmax at the target label over pixels with a known target.

    UNKNOWN pixels contribute exactly zero loss and zero gradient; a batch
    with no known pixel yields loss 0 (logged).
    """
    data = logits.data
    if target.shape != (data.shape[0],) + data.shape[2:]:
        raise ConfigurationError(f"targets {target.shape} do not match logits {data.shape}")
    mask = target != UNKNOWN
    n = int(mask.sum())
    if n == 0:
        log.warning("masked_cross_entropy: all targets UNKNOWN, loss is 0")
        shape = data.shape
        return ad.record(logits.tape, "masked_cross_entropy",
                         np.asarray(0.0, dtype=data.dtype), (logits,),
                         lambda g: (np.zeros(shape, dtype=data.dtype),))
    if int(target[mask].max()) >= data.shape[1]:
        raise DataError(f"target label {int(target[mask].max())} out of range")
    m = data.max(axis=1, keepdims=True)
    logp = data - (m + np.log(np.exp(data - m).sum(axis=1, keepdims=True)))
    tgt = np.where(mask, target, 0).astype(np.int64)[:, None]
    picked = np.take_along_axis(logp, tgt, axis=1)[:, 0]
    loss = -(picked * mask).sum() / n

    def bwd(g):
        gl = np.exp(logp)
        np.put_along_axis(gl, tgt, np.take_along_axis(gl, tgt, axis=1) - 1.0, axis=1)
        gl *= (mask / n)[:, None]
        return (gl * float(g),)

    return ad.record(logits.tape, "masked_cross_entropy",
                     np.asarray(loss, dtype=data.dtype), (logits,), bwd)


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_decay: float = 0.9
    lr_decay_every: int = 3000
    batch_size: int = 8
    iters_per_recursion: int = 2000
    seed: int = 0

    def validate(self):
        if self.lr0 <= 0:
            raise ConfigurationError("lr0 must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigurationError("lr_decay must be in (0, 1]")
        if self.iters_per_recursion < 0:
            raise ConfigurationError("iters_per_recursion must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        return self


def lr_at(tcfg, k):
    """Learning rate for 0-based global step k: lr0 * decay^(k // every)."""
    return tcfg.lr0 * tcfg.lr_decay ** (k // tcfg.lr_decay_every)


def adam_step(params, grads, tcfg):
    """Bias-corrected ADAM update over every registered parameter."""
    lr = lr_at(tcfg, params.t)
    params.t += 1
    t = params.t
    c1 = 1.0 - ADAM_BETA1 ** t
    c2 = 1.0 - ADAM_BETA2 ** t
    for name, p in params.tensors.items():
        g = grads[name]
        m = params.m[name]
        v = params.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)).astype(p.dtype)
    return params


class _BatchSampler:
    """Without-replacement shuffle per epoch, cycled across iterations."""

    def __init__(self, n, batch_size, rng):
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self.order = []
        self.pos = 0

    def next_batch(self):
        if self.pos + self.batch_size > len(self.order):
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        batch = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return batch


def train_m_step(params, cfg, tcfg, dataset, rng):
    """iters_per_recursion mini-batch ADAM steps; warm-starts from `params`.

    `dataset` is a list of (image, target label map) pairs of equal size.
    Returns the per-iteration loss history.
    """
    tcfg.validate()
    if not dataset:
        raise ConfigurationError("train_m_step: empty dataset")
    padded_images, padded_targets = [], []
    for image, target in dataset:
        pimg, _ = pad_to_grid(np.asarray(image, dtype=np.float32), cfg.depth)
        ptgt, _ = _pad_target(np.asarray(target, dtype=np.uint8), cfg.depth)
        padded_images.append(pimg)
        padded_targets.append(ptgt)
    shapes = {p.shape for p in padded_images}
    if len(shapes) != 1:
        raise ConfigurationError("train_m_step requires equally sized images")
    images = np.stack(padded_images)[:, None]  # (N,1,H,W)
    targets = np.stack(padded_targets)

    sampler = _BatchSampler(len(dataset), tcfg.batch_size, rng)
    losses = []
    for it in range(tcfg.iters_per_recursion):
        idx = sampler.next_batch()
        try:
            tape = ad.Tape()
            logits, leaves = forward_tape(tape, params, cfg, images[idx],
                                          dropout_enabled=True, rng=rng)
            loss = masked_cross_entropy(logits, targets[idx])
            grads = ad.backward(tape, loss)
        except NumericError as e:
            raise NumericError(f"training iteration {it}: {e}") from e
        adam_step(params, {k: grads[leaf] for k, leaf in leaves.items()}, tcfg)
        losses.append(float(loss.data))
    return losses


def _pad_target(target, depth):
    grid = 2 ** (depth - 1)
    h, w = target.shape
    ph = (-h) % grid
    pw = (-w) % grid
    if ph or pw:
        target = np.pad(target, ((0, ph), (0, pw)), constant_values=UNKNOWN)
    return target, (h, w)


# ------------------------------------------------------------- checkpoints

def save_checkpoint(path, params, cfg, rnn_params=None):
    """ASCII header + little-endian f32 blobs in registration order."""
    lines = [
        "SSEG-CKPT v1",
        f"net {cfg.depth} {cfg.base_channels} {cfg.num_labels} {cfg.dropout_p!r} {cfg.dropout_blocks}",
        f"t {params.t}",
    ]
    if rnn_params is None:
        lines.append("rnn 0")
        rnn_blob = b""
    else:
        lines.append("rnn 1 " + rnn_params.header_fields())
        rnn_blob = rnn_params.blob()
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("ascii"))
        f.write(params.blob())
        f.write(rnn_blob)


def load_checkpoint(path):
    """Returns (params, cfg, rnn_params-or-None)."""
    from .crfrnn import CrfRnnParams  # deferred: crfrnn imports this module

    raw = Path(path).read_bytes()
    pos = 0
    lines = []
    for _ in range(4):
        nl = raw.find(b"\n", pos)
        if nl < 0:
            raise DataError(f"{path}: truncated checkpoint header at byte {pos}")
        lines.append(raw[pos:nl].decode("ascii"))
        pos = nl + 1
    if lines[0] != "SSEG-CKPT v1":
        raise DataError(f"{path}: bad checkpoint magic {lines[0]!r}")
    net_fields = lines[1].split()
    if len(net_fields) != 6 or net_fields[0] != "net":
        raise DataError(f"{path}: bad net config line {lines[1]!r}")
    cfg = NetConfig(depth=int(net_fields[1]), base_channels=int(net_fields[2]),
                    num_labels=int(net_fields[3]), dropout_p=float(net_fields[4]),
                    dropout_blocks=int(net_fields[5])).validate()
    if not lines[2].startswith("t "):
        raise DataError(f"{path}: bad step line {lines[2]!r}")
    t = int(lines[2][2:])
    rnn_fields = lines[3].split()
    if rnn_fields[0] != "rnn" or rnn_fields[1] not in ("0", "1"):
        raise DataError(f"{path}: bad rnn line {lines[3]!r}")

    tensors = {}
    for name, cin, cout, k in cfg.conv_specs():
        for suffix, shape in ((f"{name}_w", (cout, cin, k, k)), (f"{name}_b", (cout,))):
            count = int(np.prod(shape))
            end = pos + 4 * count
            if end > len(raw):
                raise DataError(f"{path}: truncated parameter blob at byte {pos}")
            tensors[suffix] = np.frombuffer(raw, dtype="<f4", count=count,
                                            offset=pos).reshape(shape).copy()
            pos = end
    params = NetParams(tensors)
    params.t = t

    rnn_params = None
    if rnn_fields[1] == "1":
        rnn_params, pos = CrfRnnParams.from_header_fields(rnn_fields[2:], raw, pos,
                                                          cfg.num_labels)
    if pos != len(raw):
        raise DataError(f"{path}: {len(raw) - pos} trailing bytes at offset {pos}")
    return params, cfg, rnn_params
