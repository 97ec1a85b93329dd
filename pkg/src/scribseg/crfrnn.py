"""CRF-as-RNN: mean-field unrolled as a differentiable layer.

Per-class kernel weights and a label-compatibility matrix (Potts-initialized)
are learnable; the Gaussian bandwidths stay fixed. Seeds are clamped post hoc
on the argmax labeling, not inside the unroll. Training alternates blocks of
net-only ADAM steps with single plain-gradient steps on the layer parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import filters, segnet
from .errors import ConfigurationError, DataError, NumericError
from .util import UNKNOWN


@dataclass
class AlternatingSchedule:
    net_iters_per_cycle: int = 10
    rnn_lr: float = 1e-7

    def validate(self):
        if self.net_iters_per_cycle < 1:
            raise ConfigurationError("net_iters_per_cycle must be >= 1")
        if self.rnn_lr < 0:
            raise ConfigurationError("rnn_lr must be >= 0")
        return self


class CrfRnnParams:
    """Learnable kernel weights (per label) and compatibility matrix."""

    def __init__(self, num_labels, w1=1.0, w2=1.0, sigma_alpha=48.3, sigma_beta=3.0,
                 sigma_gamma=10.0, n_unroll=5, truncation_radius=None):
        self.num_labels = int(num_labels)
        self.kernel_weights1 = np.full(self.num_labels, w1, dtype=np.float32)
        self.kernel_weights2 = np.full(self.num_labels, w2, dtype=np.float32)
        # Potts start: 0 on the diagonal, 1 off it
        self.compat = (np.ones((self.num_labels, self.num_labels))
                       - np.eye(self.num_labels)).astype(np.float32)
        self.sigma_alpha = float(sigma_alpha)
        self.sigma_beta = float(sigma_beta)
        self.sigma_gamma = float(sigma_gamma)
        self.n_unroll = int(n_unroll)
        self.truncation_radius = truncation_radius
        self.steps = 0

    def validate(self):
        if min(self.sigma_alpha, self.sigma_beta, self.sigma_gamma) <= 0:
            raise ConfigurationError("bandwidths must be > 0")
        if self.n_unroll < 1:
            raise ConfigurationError("n_unroll must be >= 1")
        return self

    def radius(self):
        if self.truncation_radius is None:
            return 4.0 * max(self.sigma_alpha, self.sigma_gamma)
        return float(self.truncation_radius)

    def copy(self):
        out = CrfRnnParams(self.num_labels, sigma_alpha=self.sigma_alpha,
                           sigma_beta=self.sigma_beta, sigma_gamma=self.sigma_gamma,
                           n_unroll=self.n_unroll,
                           truncation_radius=self.truncation_radius)
        out.kernel_weights1 = self.kernel_weights1.copy()
        out.kernel_weights2 = self.kernel_weights2.copy()
        out.compat = self.compat.copy()
        out.steps = self.steps
        return out

    # checkpoint section ----------------------------------------------------
    def blob(self):
        return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                        for a in (self.kernel_weights1, self.kernel_weights2,
                                  self.compat))

    def header_fields(self):
        radius = ("none" if self.truncation_radius is None
                  else repr(float(self.truncation_radius)))
        return (f"{self.n_unroll} {self.sigma_alpha!r} {self.sigma_beta!r} "
                f"{self.sigma_gamma!r} {radius}")

    @classmethod
    def from_header_fields(cls, fields, raw, pos, num_labels):
        if len(fields) != 5:
            raise DataError(f"bad rnn header fields {fields!r}")
        radius = None if fields[4] == "none" else float(fields[4])
        out = cls(num_labels, sigma_alpha=float(fields[1]), sigma_beta=float(fields[2]),
                  sigma_gamma=float(fields[3]), n_unroll=int(fields[0]),
                  truncation_radius=radius)
        for name, shape in (("kernel_weights1", (num_labels,)),
                            ("kernel_weights2", (num_labels,)),
                            ("compat", (num_labels, num_labels))):
            count = int(np.prod(shape))
            end = pos + 4 * count
            if end > len(raw):
                raise DataError(f"truncated rnn blob at byte {pos}")
            setattr(out, name, np.frombuffer(raw, dtype="<f4", count=count,
                                             offset=pos).reshape(shape).copy())
            pos = end
        return out, pos


# ------------------------------------------------------------- custom ops

def _slice_channels(x, start, stop):
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        out[:, start:stop] = g
        return (out,)

    return ad.record(x.tape, "slice_channels",
                     np.ascontiguousarray(x.data[:, start:stop]), (x,), bwd)


def _slice_batch(x, b):
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        out[b] = g[0]
        return (out,)

    return ad.record(x.tape, "slice_batch",
                     np.ascontiguousarray(x.data[b : b + 1]), (x,), bwd)


def _scale_channels(x, w):
    xd, wd = x.data, w.data

    def bwd(g):
        return g * wd[None, :, None, None], (g * xd).sum(axis=(0, 2, 3))

    return ad.record(x.tape, "scale_channels", xd * wd[None, :, None, None],
                     (x, w), bwd)


def _mix_channels(x, m):
    xd, md = x.data, m.data

    def bwd(g):
        gx = np.einsum("kl,nkhw->nlhw", md, g)
        gm = np.einsum("nkhw,nlhw->kl", g, xd)
        return gx, gm

    return ad.record(x.tape, "mix_channels",
                     np.einsum("kl,nlhw->nkhw", md, xd), (x, m), bwd)


def _pairwise_filter_op(x, image, sa, sb, sg, radius):
    """(1, L, H, W) -> (1, 2L, H, W): bilateral sums stacked over Gaussian sums."""
    if x.shape[0] != 1:
        raise ConfigurationError("the filtering op runs per image")
    num = x.shape[1]
    bil, gau = filters.pairwise_filters(x.data[0], image, sa, sb, sg, radius)
    out = np.concatenate([bil, gau])[None].astype(x.dtype)

    def bwd(g):
        g0 = np.ascontiguousarray(g[0], dtype=np.float64)
        fb, fg = filters.pairwise_filters(g0, image, sa, sb, sg, radius)
        # both kernels are symmetric, so each adjoint is the filter itself
        return ((fb[:num] + fg[num:])[None].astype(x.dtype),)

    return ad.record(x.tape, "pairwise_filter", out, (x,), bwd)


# --------------------------------------------------------------- forward

def rnn_leaves(tape, rnn_params, dtype=np.float32):
    return {
        "kw1": tape.leaf(np.asarray(rnn_params.kernel_weights1, dtype=dtype)),
        "kw2": tape.leaf(np.asarray(rnn_params.kernel_weights2, dtype=dtype)),
        "compat": tape.leaf(np.asarray(rnn_params.compat, dtype=dtype)),
    }


def crfrnn_forward(logits, image, rnn_params, leaves=None):
    """Unrolled mean-field refinement of (1, L, H, W) logits.

    Q0 = softmax(logits); each step filters Q with the two fixed Gaussian
    kernels, weights the outputs per label, mixes labels through the
    compatibility matrix and renormalizes: Qt = softmax(logits - message).
    Returns (refined ProbMap tensor, final pre-softmax tensor, leaves).
    """
    rnn_params.validate()
    if logits.shape[0] != 1 or logits.shape[1] != rnn_params.num_labels:
        raise ConfigurationError(f"logits shape {logits.shape} does not fit the layer")
    if leaves is None:
        leaves = rnn_leaves(logits.tape, rnn_params, dtype=logits.dtype)
    num = rnn_params.num_labels
    radius = rnn_params.radius()
    pre = logits
    q = ad.softmax_channels(logits)
    for step in range(rnn_params.n_unroll):
        try:
            filt = _pairwise_filter_op(q, image, rnn_params.sigma_alpha,
                                       rnn_params.sigma_beta,
                                       rnn_params.sigma_gamma, radius)
            weighted = ad.add(_scale_channels(_slice_channels(filt, 0, num), leaves["kw1"]),
                              _scale_channels(_slice_channels(filt, num, 2 * num), leaves["kw2"]))
            message = _mix_channels(weighted, leaves["compat"])
            pre = ad.sub(logits, message)
            q = ad.softmax_channels(pre)
        except NumericError as e:
            raise NumericError(f"unroll step {step}: {e}") from e
    return q, pre, leaves


def crfrnn_infer(logits, image, rnn_params):
    """Numpy-in/numpy-out refinement of one image's (L, H, W) logits."""
    tape = ad.Tape()
    lt = tape.leaf(np.asarray(logits, dtype=np.float64)[None])
    q, _, _ = crfrnn_forward(lt, image, rnn_params)
    return q.data[0]


def crfrnn_relabel(net_params, net_cfg, rnn_params, image, seeds=None):
    """Forward pass through net + layer, argmax, then seed overwrite."""
    logits, _ = segnet.forward(net_params, net_cfg, image)
    q = crfrnn_infer(logits, image, rnn_params)
    labels = q.argmax(axis=0).astype(np.uint8)
    if seeds is not None:
        on = seeds != UNKNOWN
        labels[on] = seeds[on]
    return labels


# --------------------------------------------------------------- training

def _joint_pass(net_params, rnn_params, net_cfg, images, targets, idx, rng):
    """One batched forward/backward through net + layer; grads for both."""
    tape = ad.Tape()
    logits_b, net_leaves = segnet.forward_tape(tape, net_params, net_cfg,
                                               images[idx], dropout_enabled=True,
                                               rng=rng)
    layer_leaves = rnn_leaves(tape, rnn_params, dtype=logits_b.dtype)
    total = None
    for j, b in enumerate(range(len(idx))):
        one = _slice_batch(logits_b, b)
        _, pre, _ = crfrnn_forward(one, images[idx[j], 0], rnn_params,
                                   leaves=layer_leaves)
        item_loss = segnet.masked_cross_entropy(pre, targets[idx[j]][None])
        total = item_loss if total is None else ad.add(total, item_loss)
    loss = ad.scale(total, 1.0 / len(idx))
    grads = ad.backward(tape, loss)
    net_grads = {k: grads[leaf] for k, leaf in net_leaves.items()}
    layer_grads = {k: grads[leaf] for k, leaf in layer_leaves.items()}
    return float(loss.data), net_grads, layer_grads


def train_alternating(net_params, rnn_params, net_cfg, tcfg, schedule, dataset, rng):
    """Cycles of net-only ADAM steps then one rnn-only plain-GD step.

    The M-step budget is tcfg.iters_per_recursion network iterations; the
    layer is updated after every full cycle. Frozen parameters are untouched
    during the other phase. Returns the loss history.
    """
    tcfg.validate()
    schedule.validate()
    rnn_params.validate()
    if not dataset:
        raise ConfigurationError("train_alternating: empty dataset")
    padded = [(segnet.pad_to_grid(np.asarray(im, dtype=np.float32), net_cfg.depth)[0],
               segnet._pad_target(np.asarray(tg, dtype=np.uint8), net_cfg.depth)[0])
              for im, tg in dataset]
    if len({p[0].shape for p in padded}) != 1:
        raise ConfigurationError("train_alternating requires equally sized images")
    images = np.stack([p[0] for p in padded])[:, None]
    targets = np.stack([p[1] for p in padded])
    sampler = segnet._BatchSampler(len(dataset), tcfg.batch_size, rng)

    losses = []
    net_done = 0
    cycle_index = 0
    while net_done < tcfg.iters_per_recursion:
        cycle = min(schedule.net_iters_per_cycle, tcfg.iters_per_recursion - net_done)
        try:
            for _ in range(cycle):
                idx = sampler.next_batch()
                loss, net_grads, _ = _joint_pass(net_params, rnn_params, net_cfg,
                                                 images, targets, idx, rng)
                segnet.adam_step(net_params, net_grads, tcfg)
                losses.append(loss)
                net_done += 1
            if cycle == schedule.net_iters_per_cycle:
                idx = sampler.next_batch()
                _, _, layer_grads = _joint_pass(net_params, rnn_params, net_cfg,
                                                images, targets, idx, rng)
                rnn_params.kernel_weights1 -= (schedule.rnn_lr * layer_grads["kw1"]).astype(np.float32)
                rnn_params.kernel_weights2 -= (schedule.rnn_lr * layer_grads["kw2"]).astype(np.float32)
                rnn_params.compat -= (schedule.rnn_lr * layer_grads["compat"]).astype(np.float32)
                rnn_params.steps += 1
        except NumericError as e:
            raise NumericError(f"alternating cycle {cycle_index}: {e}") from e
        cycle_index += 1
    return losses
