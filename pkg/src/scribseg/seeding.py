"""Seed-area generation.

Random-walker segmentation (combinatorial Dirichlet problem on the
4-connected pixel lattice, edge weights exp(-beta * (I_i - I_j)^2)) followed
by confidence thresholding: pixels keep the argmax label only where its
probability exceeds tau, everything else becomes UNKNOWN.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from .errors import ConfigurationError, DataError, SolverError
from .util import UNKNOWN


@dataclass
class SeedConfig:
    tau: float = 0.99
    beta: float = 90.0
    cg_tol: float = 1e-8
    cg_max_iters: int | None = None  # defaults to 10 * n_pixels

    def validate(self, num_labels):
        if not (1.0 / num_labels < self.tau <= 1.0):
            raise ConfigurationError(
                f"tau must lie in (1/{num_labels}, 1], got {self.tau}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")


def _lattice_laplacian(image, beta):
    h, w = image.shape
    n = h * w
    img = np.asarray(image, dtype=np.float64)
    idx = np.arange(n).reshape(h, w)
    wh = np.exp(-beta * (img[:, :-1] - img[:, 1:]) ** 2).ravel()
    wv = np.exp(-beta * (img[:-1, :] - img[1:, :]) ** 2).ravel()
    rows = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    cols = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    weights = np.concatenate([wh, wv])
    adj = sparse.coo_matrix((weights, (rows, cols)), shape=(n, n))
    adj = (adj + adj.T).tocsr()
    deg = np.asarray(adj.sum(axis=1)).ravel()
    return (sparse.diags(deg) - adj).tocsr()


def random_walker(image, scribbles, num_labels, cfg):
    """Per-label hitting probabilities of the seeded random walk.

    One Dirichlet solve per label (one-vs-rest) on the unseeded pixels via
    Jacobi-preconditioned CG; the final label's field is one minus the rest,
    which makes the per-pixel normalization exact.
    """
    cfg.validate(num_labels)
    if image.shape != scribbles.shape:
        raise DataError(f"image {image.shape} vs scribbles {scribbles.shape}")
    h, w = image.shape
    n = h * w
    flat = scribbles.ravel()
    s_idx = np.flatnonzero(flat != UNKNOWN)
    if s_idx.size == 0:
        raise DataError("no scribbled pixels")
    s_labels = flat[s_idx].astype(np.int64)
    present = np.unique(s_labels)
    if present.size < 2:
        raise DataError("random walker needs scribbles for at least 2 labels")
    missing = sorted(set(range(num_labels)) - set(present.tolist()))
    if missing:
        raise DataError(f"labels without scribbles: {missing}")

    lap = _lattice_laplacian(image, cfg.beta)
    u_idx = np.flatnonzero(flat == UNKNOWN)
    probs = np.zeros((num_labels, n))
    if u_idx.size:
        luu = lap[u_idx][:, u_idx].tocsr()
        lus = lap[u_idx][:, s_idx].tocsr()
        inv_diag = 1.0 / luu.diagonal()
        precond = LinearOperator(luu.shape, matvec=lambda v: inv_diag * v)
        maxiter = cfg.cg_max_iters if cfg.cg_max_iters is not None else 10 * n
        degree = luu.diagonal()
        for label in range(num_labels - 1):
            b = -lus @ (s_labels == label).astype(np.float64)
            x, info = cg(luu, b, rtol=cfg.cg_tol, atol=0.0, maxiter=maxiter, M=precond)
            if info != 0:
                # rtol * ||b|| can be unreachable in f64 when beta makes the
                # seed connections tiny; accept a stalled solve if the
                # harmonicity defect (degree-scaled residual) is already met
                scaled = float(np.max(np.abs(luu @ x - b) / degree))
                if scaled > 100.0 * cfg.cg_tol:
                    residual = float(np.linalg.norm(luu @ x - b))
                    raise SolverError(
                        f"random walker CG for label {label} did not converge within "
                        f"{maxiter} iterations (residual {residual:.3e}, "
                        f"harmonicity defect {scaled:.3e})")
            probs[label, u_idx] = np.clip(x, 0.0, 1.0)
        probs[num_labels - 1, u_idx] = np.clip(1.0 - probs[:-1, u_idx].sum(axis=0), 0.0, 1.0)
    for label in range(num_labels):
        probs[label, s_idx] = s_labels == label
    return probs.reshape(num_labels, h, w)


def threshold_seeds(probmap, scribbles, tau):
    """Argmax label where the max probability exceeds tau, else UNKNOWN.
    Scribbled pixels always keep their scribble label."""
    amax = probmap.max(axis=0)
    arg = probmap.argmax(axis=0).astype(np.uint8)
    out = np.where(amax > tau, arg, np.uint8(UNKNOWN)).astype(np.uint8)
    on = scribbles != UNKNOWN
    out[on] = scribbles[on]
    return out


def generate_seeds(image, scribbles, num_labels, cfg):
    """random_walker + threshold_seeds in one step."""
    probs = random_walker(image, scribbles, num_labels, cfg)
    return threshold_seeds(probs, scribbles, cfg.tau)
