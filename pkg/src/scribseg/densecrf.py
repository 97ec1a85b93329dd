"""E-step relabeling with a fully connected CRF.

Unaries come from the current network output (-log probabilities, floored);
seed pixels are clamped to their label after every update, which realizes the
infinite seed unary exactly. The pairwise potential is the two-kernel Potts
form (appearance bilateral + smoothness Gaussian); message passing runs over
the filter core with an optional truncation radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import filters, segnet
from .errors import (ClampViolationError, ConfigurationError, DataError,
                     NumericError)
from .util import UNKNOWN

PROB_FLOOR = 1e-10


@dataclass
class CrfParams:
    w1: float = 5.0
    w2: float = 10.0
    sigma_alpha: float = 2.0
    sigma_beta: float = 0.1
    sigma_gamma: float = 5.0
    n_mf_iters: int = 5
    truncation_radius: float | None = None  # None -> 4*max(sa, sg); inf -> exact

    def validate(self):
        if self.w1 < 0 or self.w2 < 0:
            raise ConfigurationError("kernel weights must be >= 0")
        if min(self.sigma_alpha, self.sigma_beta, self.sigma_gamma) <= 0:
            raise ConfigurationError("bandwidths must be > 0")
        if self.n_mf_iters < 1:
            raise ConfigurationError("n_mf_iters must be >= 1")
        return self

    def radius(self):
        if self.truncation_radius is None:
            return 4.0 * max(self.sigma_alpha, self.sigma_gamma)
        return float(self.truncation_radius)


@dataclass
class CrfProblem:
    unaries: np.ndarray  # (L, H, W) float64, finite
    seeds: np.ndarray    # (H, W) uint8, UNKNOWN where latent
    image: np.ndarray    # (H, W) intensities in [0, 1]

    def validate(self):
        if self.unaries.ndim != 3:
            raise ConfigurationError("unaries must be (L, H, W)")
        if self.seeds.shape != self.unaries.shape[1:] or self.image.shape != self.seeds.shape:
            raise ConfigurationError("unaries/seeds/image dims disagree")
        if not np.isfinite(self.unaries).all():
            raise NumericError("unaries must be finite (floor the probabilities)")
        if ((self.seeds != UNKNOWN) & (self.seeds >= self.unaries.shape[0])).any():
            raise DataError("seed label out of range")
        return self


def unaries_from_probs(probs):
    """-log of floored probabilities (the network-output unary)."""
    return -np.log(np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR))


def pairwise_potential(l_i, l_j, pos_i, pos_j, intensity_i, intensity_j, params):
    """Potts-modulated two-kernel energy between a single pixel pair."""
    if l_i == l_j:
        return 0.0
    d2 = float((pos_i[0] - pos_j[0]) ** 2 + (pos_i[1] - pos_j[1]) ** 2)
    di = float(intensity_i) - float(intensity_j)
    bil = math.exp(-d2 / (2.0 * params.sigma_alpha ** 2)
                   - di * di / (2.0 * params.sigma_beta ** 2))
    gau = math.exp(-d2 / (2.0 * params.sigma_gamma ** 2))
    return params.w1 * bil + params.w2 * gau


def _check_seeds(labeling, seeds):
    on = seeds != UNKNOWN
    if (labeling[on] != seeds[on]).any():
        bad = np.argwhere(on & (labeling != seeds))[0]
        raise ClampViolationError(
            f"labeling alters seed pixel at {tuple(int(v) for v in bad)}")


def energy(problem, labeling, params):
    """Exact Eq.-style energy: latent unaries + all pairwise cliques.

    The seed unary term is identically zero for admissible labelings; a
    labeling that alters a seed pixel raises ClampViolationError.
    """
    problem.validate()
    params.validate()
    labeling = np.asarray(labeling)
    if labeling.shape != problem.seeds.shape:
        raise ConfigurationError("labeling dims disagree with problem")
    if (labeling == UNKNOWN).any():
        raise DataError("labeling must be complete (no UNKNOWN)")
    _check_seeds(labeling, problem.seeds)
    num_labels = problem.unaries.shape[0]
    latent = problem.seeds == UNKNOWN
    unary = 0.0
    if latent.any():
        ys, xs = np.nonzero(latent)
        unary = float(problem.unaries[labeling[latent].astype(np.int64), ys, xs].sum())

    onehot = np.zeros((num_labels + 1,) + labeling.shape)
    for label in range(num_labels):
        onehot[label] = labeling == label
    onehot[num_labels] = 1.0
    bil, gau = filters.pairwise_filters(onehot, problem.image, params.sigma_alpha,
                                        params.sigma_beta, params.sigma_gamma,
                                        math.inf)
    k = params.w1 * bil + params.w2 * gau  # (L+1, H, W)
    same = np.take_along_axis(k[:num_labels], labeling[None].astype(np.int64), axis=0)[0]
    pair = 0.5 * float((k[num_labels] - same).sum())
    return unary + pair


def _softmax0(logits):
    m = logits.max(axis=0, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=0, keepdims=True)


def _clamp(q, seeds):
    on = seeds != UNKNOWN
    if on.any():
        ys, xs = np.nonzero(on)
        q[:, on] = 0.0
        q[seeds[on].astype(np.int64), ys, xs] = 1.0
    return q


def mean_field_infer(problem, params):
    """Parallel mean-field updates with seed clamping.

    Q_i(l) is proportional to exp(-unary_i(l) - sum_{j != i} K(i,j)(1 - Q_j(l)))
    under the Potts compatibility; seeds are one-hot before and after every
    update (so they send messages but never move). Returns (marginals, argmax
    labeling); argmax ties resolve to the lowest label.
    """
    problem.validate()
    params.validate()
    num_labels = problem.unaries.shape[0]
    radius = params.radius()
    q = _clamp(_softmax0(-problem.unaries), problem.seeds)
    use_pairwise = params.w1 > 0 or params.w2 > 0
    if use_pairwise:
        ones = np.ones((1,) + problem.image.shape)
        b1, g1 = filters.pairwise_filters(ones, problem.image, params.sigma_alpha,
                                          params.sigma_beta, params.sigma_gamma, radius)
        smear = params.w1 * b1[0] + params.w2 * g1[0]  # sum_j K(i,j)
    for it in range(params.n_mf_iters):
        if use_pairwise:
            bil, gau = filters.pairwise_filters(q, problem.image, params.sigma_alpha,
                                                params.sigma_beta, params.sigma_gamma,
                                                radius)
            message = smear[None] - (params.w1 * bil + params.w2 * gau)
        else:
            message = 0.0
        q = _softmax0(-problem.unaries - message)
        if not np.isfinite(q).all():
            raise NumericError(f"non-finite marginals at mean-field iteration {it}")
        q = _clamp(q, problem.seeds)
    labels = q.argmax(axis=0).astype(np.uint8)
    on = problem.seeds != UNKNOWN
    labels[on] = problem.seeds[on]
    return q, labels


def relabel_image(net_params, net_cfg, image, seeds, params):
    """Unaries from the deterministic network forward, then mean-field."""
    _, probs = segnet.forward(net_params, net_cfg, image)
    problem = CrfProblem(unaries=unaries_from_probs(probs), seeds=seeds, image=image)
    _, labels = mean_field_infer(problem, params)
    return labels


def relabel_dataset(net_params, net_cfg, images, seeds_per_image, params):
    if len(images) != len(seeds_per_image):
        raise ConfigurationError("one seed map per image required")
    out = []
    for i, (image, seeds) in enumerate(zip(images, seeds_per_image)):
        try:
            out.append(relabel_image(net_params, net_cfg, image, seeds, params))
        except (NumericError, DataError) as e:
            raise type(e)(f"image {i}: {e}") from e
    return out


def grid_search(param_grid, val_items, net_params, net_cfg):
    """Grid point maximizing mean foreground Dice of the relabeling against
    the validation masks; ties break to the earliest grid point.

    `val_items` are (image, full_mask, seeds) triples.
    """
    from .evaluation import score_predictions

    if not param_grid:
        raise ConfigurationError("empty parameter grid")
    cached = []
    for image, mask, seeds in val_items:
        _, probs = segnet.forward(net_params, net_cfg, image)
        cached.append((unaries_from_probs(probs), image, mask, seeds))
    num_labels = cached[0][0].shape[0]
    best, best_dice = None, -1.0
    for params in param_grid:
        preds = []
        for unaries, image, mask, seeds in cached:
            problem = CrfProblem(unaries=unaries, seeds=seeds, image=image)
            _, labels = mean_field_infer(problem, params)
            preds.append(labels)
        report = score_predictions("gridsearch", preds,
                                   [m for _, _, m, _ in cached], num_labels)
        if report.avg > best_dice:
            best, best_dice = params, report.avg
    return replace(best), best_dice
