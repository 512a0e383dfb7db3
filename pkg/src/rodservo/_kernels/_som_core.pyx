# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled SOM training and greedy chain ordering."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def som_train(const double[:, ::1] data, double[:, ::1] weights,
              const cnp.int64_t[::1] order, double lr0, double lr1,
              double sigma0, double sigma1):
    """Online 1-D Kohonen updates in place; see ``_fallback.som_train``."""
    cdef Py_ssize_t T = order.shape[0]
    cdef Py_ssize_t N = weights.shape[0]
    cdef Py_ssize_t t, j, bmu
    cdef double frac, lr, sigma, inv2s2, x0, x1, d, best, dj, h
    cdef double log_lr = log(lr1 / lr0)
    cdef double log_sig = log(sigma1 / sigma0)
    cdef double denom = <double>(T - 1) if T > 1 else 1.0
    with nogil:
        for t in range(T):
            frac = t / denom
            lr = lr0 * exp(frac * log_lr)
            sigma = sigma0 * exp(frac * log_sig)
            inv2s2 = 1.0 / (2.0 * sigma * sigma)
            x0 = data[order[t], 0]
            x1 = data[order[t], 1]
            bmu = 0
            best = (weights[0, 0] - x0) * (weights[0, 0] - x0) + (weights[0, 1] - x1) * (weights[0, 1] - x1)
            for j in range(1, N):
                d = (weights[j, 0] - x0) * (weights[j, 0] - x0) + (weights[j, 1] - x1) * (weights[j, 1] - x1)
                if d < best:
                    best = d
                    bmu = j
            for j in range(N):
                dj = <double>(j - bmu)
                h = lr * exp(-dj * dj * inv2s2)
                weights[j, 0] += h * (x0 - weights[j, 0])
                weights[j, 1] += h * (x1 - weights[j, 1])
    return np.asarray(weights)


def greedy_order(const double[:, ::1] points, Py_ssize_t start):
    """Nearest-neighbour visiting order from ``start``; ties go to the lower index."""
    cdef Py_ssize_t n = points.shape[0]
    cdef cnp.int64_t[::1] out = np.empty(n, dtype=np.int64)
    cdef cnp.uint8_t[::1] used = np.zeros(n, dtype=np.uint8)
    cdef Py_ssize_t k, j, cur = start, nxt
    cdef double best, d, dx, dy
    out[0] = start
    used[start] = 1
    with nogil:
        for k in range(1, n):
            best = -1.0
            nxt = -1
            for j in range(n):
                if used[j]:
                    continue
                dx = points[j, 0] - points[cur, 0]
                dy = points[j, 1] - points[cur, 1]
                d = dx * dx + dy * dy
                if nxt < 0 or d < best:
                    best = d
                    nxt = j
            out[k] = nxt
            used[nxt] = 1
            cur = nxt
    return np.asarray(out)
