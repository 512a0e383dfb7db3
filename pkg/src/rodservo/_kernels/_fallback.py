"""Pure numpy versions of the compiled kernels, with identical update order."""
import math

import numpy as np


def som_train(data, weights, order, lr0, lr1, sigma0, sigma1):
    """Online 1-D Kohonen training, modifying ``weights`` in place.

    Sample ``order[t]`` is presented at step ``t``; learning rate and
    neighbourhood width decay geometrically from their initial to final
    values over the ``len(order)`` steps.  The best-matching unit is the
    nearest neuron (lowest index on ties) and neuron ``j`` moves by
    ``lr * exp(-(j - bmu)**2 / (2 sigma**2))`` of its distance to the sample.
    """
    T = order.shape[0]
    N = weights.shape[0]
    lattice = np.arange(N, dtype=float)
    log_lr = math.log(lr1 / lr0)
    log_sig = math.log(sigma1 / sigma0)
    denom = float(T - 1) if T > 1 else 1.0
    for t in range(T):
        frac = t / denom
        lr = lr0 * math.exp(frac * log_lr)
        sigma = sigma0 * math.exp(frac * log_sig)
        x = data[order[t]]
        diff = weights - x
        bmu = int(np.argmin(np.einsum("ij,ij->i", diff, diff)))
        dj = lattice - bmu
        h = lr * np.exp(-dj * dj / (2.0 * sigma * sigma))
        weights -= h[:, None] * diff
    return weights


def greedy_order(points, start):
    n = points.shape[0]
    out = np.empty(n, dtype=np.int64)
    used = np.zeros(n, dtype=bool)
    out[0] = start
    used[start] = True
    cur = start
    for k in range(1, n):
        d = np.sum((points - points[cur]) ** 2, axis=1)
        d[used] = np.inf
        cur = int(np.argmin(d))
        out[k] = cur
        used[cur] = True
    return out
