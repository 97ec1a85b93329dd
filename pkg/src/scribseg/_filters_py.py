"""Numpy fallback for the pairwise message-passing filter core.

Loops over window offsets, applying each shift as one vectorized update over
the whole image. The compiled backend (_filters_cy) computes the same sums
pixel by pixel; both accumulate in float64.
"""

import math

import numpy as np


def _offsets(h, w, radius):
    """Window offsets (dy, dx) != (0, 0) with dy^2 + dx^2 <= radius^2."""
    if math.isinf(radius):
        ry, rx = h - 1, w - 1
        r2 = float("inf")
    else:
        ry = rx = min(int(radius), max(h, w) - 1)
        r2 = radius * radius
    offs = []
    for dy in range(-ry, ry + 1):
        for dx in range(-rx, rx + 1):
            if dy == 0 and dx == 0:
                continue
            if dy * dy + dx * dx <= r2:
                offs.append((dy, dx))
    return offs


def pairwise_filters(values, image, sigma_alpha, sigma_beta, sigma_gamma, radius):
    """Bilateral and spatial-Gaussian sums over all in-window neighbors.

    For each channel c and pixel i (with d the Euclidean pixel distance):
      bilateral[c,i] = sum_{j!=i, d(i,j)<=radius}
                       exp(-d^2/(2 sa^2) - (I_i-I_j)^2/(2 sb^2)) * values[c,j]
      gauss[c,i]     = sum_{j!=i, d(i,j)<=radius} exp(-d^2/(2 sg^2)) * values[c,j]

    The diagonal j == i is always excluded; radius may be math.inf for the
    exact all-pairs sum. Returns (bilateral, gauss) as float64 arrays.
    """
    c, h, w = values.shape
    inv2a = 1.0 / (2.0 * sigma_alpha * sigma_alpha)
    inv2b = 1.0 / (2.0 * sigma_beta * sigma_beta)
    inv2g = 1.0 / (2.0 * sigma_gamma * sigma_gamma)
    out_b = np.zeros((c, h, w))
    out_g = np.zeros((c, h, w))
    for dy, dx in _offsets(h, w, radius):
        d2 = float(dy * dy + dx * dx)
        wa = math.exp(-d2 * inv2a)
        wg = math.exp(-d2 * inv2g)
        ty0, ty1 = max(0, -dy), h - max(0, dy)
        tx0, tx1 = max(0, -dx), w - max(0, dx)
        sy0, sy1 = ty0 + dy, ty1 + dy
        sx0, sx1 = tx0 + dx, tx1 + dx
        diff = image[ty0:ty1, tx0:tx1] - image[sy0:sy1, sx0:sx1]
        vb = values[:, sy0:sy1, sx0:sx1]
        wbil = np.exp(diff * diff * (-inv2b)) * wa
        out_b[:, ty0:ty1, tx0:tx1] += wbil * vb
        out_g[:, ty0:ty1, tx0:tx1] += wg * vb
    return out_b, out_g
