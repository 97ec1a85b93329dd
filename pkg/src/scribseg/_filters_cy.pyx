# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pairwise filter core: same contract as _filters_py.pairwise_filters."""

import math

import numpy as np

cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def pairwise_filters(values, image, double sigma_alpha, double sigma_beta,
                     double sigma_gamma, double radius):
    cdef Py_ssize_t c = values.shape[0]
    cdef Py_ssize_t h = values.shape[1]
    cdef Py_ssize_t w = values.shape[2]

    cdef double inv2a = 1.0 / (2.0 * sigma_alpha * sigma_alpha)
    cdef double inv2b = 1.0 / (2.0 * sigma_beta * sigma_beta)
    cdef double inv2g = 1.0 / (2.0 * sigma_gamma * sigma_gamma)

    cdef Py_ssize_t ry, rx
    cdef double r2
    if math.isinf(radius):
        ry, rx = h - 1, w - 1
        r2 = 1e300
    else:
        ry = rx = min(<Py_ssize_t> radius, max(h, w) - 1)
        r2 = radius * radius

    # offset table with precomputed spatial weights, same order as the fallback
    dys_l, dxs_l, was_l, wgs_l = [], [], [], []
    cdef long dy, dx
    cdef double d2
    for dy in range(-ry, ry + 1):
        for dx in range(-rx, rx + 1):
            if dy == 0 and dx == 0:
                continue
            d2 = <double> (dy * dy + dx * dx)
            if d2 <= r2:
                dys_l.append(dy)
                dxs_l.append(dx)
                was_l.append(math.exp(-d2 * inv2a))
                wgs_l.append(math.exp(-d2 * inv2g))
    cdef cnp.int64_t[::1] dys = np.asarray(dys_l, dtype=np.int64)
    cdef cnp.int64_t[::1] dxs = np.asarray(dxs_l, dtype=np.int64)
    cdef double[::1] was = np.asarray(was_l)
    cdef double[::1] wgs = np.asarray(wgs_l)
    cdef Py_ssize_t noff = dys.shape[0]

    # channel-last layout keeps the inner channel loop contiguous
    cdef double[:, :, ::1] vals = np.ascontiguousarray(np.moveaxis(values, 0, 2))
    cdef double[:, ::1] img = np.ascontiguousarray(image)
    out_b = np.zeros((h, w, c))
    out_g = np.zeros((h, w, c))
    cdef double[:, :, ::1] ob = out_b
    cdef double[:, :, ::1] og = out_g

    cdef Py_ssize_t y, x, k, ny, nx, ci
    cdef double iy, diff, wb, wg
    for y in range(h):
        for x in range(w):
            iy = img[y, x]
            for k in range(noff):
                ny = y + dys[k]
                if ny < 0 or ny >= h:
                    continue
                nx = x + dxs[k]
                if nx < 0 or nx >= w:
                    continue
                diff = iy - img[ny, nx]
                wb = exp(-diff * diff * inv2b) * was[k]
                wg = wgs[k]
                for ci in range(c):
                    ob[y, x, ci] += wb * vals[ny, nx, ci]
                    og[y, x, ci] += wg * vals[ny, nx, ci]
    return np.moveaxis(out_b, 2, 0).copy(), np.moveaxis(out_g, 2, 0).copy()
