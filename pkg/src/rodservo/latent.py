"""Latent shape features: an MLP autoencoder trained with Adam, and a PCA baseline.

Centerlines enter as flat ``2N`` vectors ``[u1, v1, ..., uN, vN]`` and are
mapped into the unit box with one affine map per image axis before the
encoder sees them.  Everything is plain numpy with hand-written backprop so
gradients can be checked against finite differences.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, Diverged, RankDeficient, ZeroRange
from .rodsim import Centerline

ACTIVATIONS = ("relu", "sigmoid", "linear")


def _as_flat(c) -> np.ndarray:
    if isinstance(c, Centerline):
        return c.flat
    return np.asarray(c, dtype=float)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormRecord:
    """Per-axis (u and v) extrema of the training centerlines."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(2)
        hi = np.asarray(self.hi, dtype=float).reshape(2)
        if np.any(hi - lo <= 0) or not np.all(np.isfinite(hi - lo)):
            raise ZeroRange(f"degenerate normalization range lo={lo} hi={hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def fit(cls, X) -> "NormRecord":
        pts = np.asarray(X, dtype=float).reshape(-1, 2)
        return cls(pts.min(axis=0), pts.max(axis=0))

    def _tile(self, width):
        return np.tile(self.lo, width // 2), np.tile(self.hi - self.lo, width // 2)


def normalize(c, record: NormRecord) -> np.ndarray:
    """Affine map of centerline coordinates into ``[0, 1]`` per axis."""
    x = _as_flat(c) if not isinstance(c, np.ndarray) else c
    lo, span = record._tile(x.shape[-1])
    return (x - lo) / span


def denormalize(z, record: NormRecord) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    lo, span = record._tile(z.shape[-1])
    return z * span + lo


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * z))
    return z


def _act_grad(name, z, a):
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass
class Dense:
    W: np.ndarray  # (out, in)
    b: np.ndarray
    activation: str = "relu"
    # optional batch normalization between the affine map and the activation
    bn: dict | None = None

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    def params(self):
        out = [self.W, self.b]
        if self.bn is not None:
            out += [self.bn["gamma"], self.bn["beta"]]
        return out


BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _forward(layers, X, training=False):
    """Forward pass keeping what backprop needs."""
    cache = []
    a = X
    for layer in layers:
        z = a @ layer.W.T + layer.b
        bn_cache = None
        if layer.bn is not None:
            bn = layer.bn
            if training:
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                bn["mean"] = (1 - BN_MOMENTUM) * bn["mean"] + BN_MOMENTUM * mu
                bn["var"] = (1 - BN_MOMENTUM) * bn["var"] + BN_MOMENTUM * var
            else:
                mu, var = bn["mean"], bn["var"]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            zhat = (z - mu) * inv
            bn_cache = (zhat, inv, training)
            z = bn["gamma"] * zhat + bn["beta"]
        out = _act(layer.activation, z)
        cache.append((a, z, out, bn_cache))
        a = out
    return a, cache


def _backward(layers, cache, grad_out):
    """Gradients of a scalar loss given dLoss/dOutput; returns list per layer."""
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        a_in, z, out, bn_cache = cache[i]
        dz = g * _act_grad(layer.activation, z, out)
        entry = {}
        if layer.bn is not None:
            zhat, inv, training = bn_cache
            entry["gamma"] = np.sum(dz * zhat, axis=0)
            entry["beta"] = np.sum(dz, axis=0)
            dzhat = dz * layer.bn["gamma"]
            if training:
                m = dzhat.shape[0]
                dz = inv / m * (m * dzhat - dzhat.sum(axis=0) - zhat * np.sum(dzhat * zhat, axis=0))
            else:
                dz = dzhat * inv
        entry["W"] = dz.T @ a_in
        entry["b"] = dz.sum(axis=0)
        grads[i] = entry
        g = dz @ layer.W
    return grads, g


def _init_layer(rng, n_in, n_out, activation, batchnorm):
    bound = 1.0 / math.sqrt(n_in)
    W = rng.uniform(-bound, bound, size=(n_out, n_in))
    b = rng.uniform(-bound, bound, size=n_out)
    bn = None
    if batchnorm:
        bn = {"gamma": np.ones(n_out), "beta": np.zeros(n_out),
              "mean": np.zeros(n_out), "var": np.ones(n_out)}
    return Dense(W, b, activation, bn)


@dataclass
class AutoencoderModel:
    """Encoder/decoder weight stacks plus the normalization record.

    ``widths`` lists every layer width from input to output, e.g.
    ``[2N, 256, 64, p, 64, 256, 2N]``; the encoder is the first half.
    """

    encoder: list
    decoder: list
    norm: NormRecord
    N: int
    p: int
    history: dict = field(default_factory=dict, repr=False)

    @property
    def widths(self):
        return [self.encoder[0].n_in] + [l.n_out for l in self.encoder + self.decoder]

    @property
    def layers(self):
        return self.encoder + self.decoder


def build_autoencoder(N, p, hidden=(256, 64), seed=0, batchnorm=False,
                      latent_activation="sigmoid", norm=None) -> AutoencoderModel:
    rng = np.random.default_rng(seed)
    enc_w = [2 * N, *hidden, p]
    dec_w = [p, *reversed(hidden), 2 * N]
    encoder = []
    for i in range(len(enc_w) - 1):
        last = i == len(enc_w) - 2
        encoder.append(_init_layer(rng, enc_w[i], enc_w[i + 1],
                                   latent_activation if last else "relu",
                                   batchnorm and not last))
    decoder = []
    for i in range(len(dec_w) - 1):
        last = i == len(dec_w) - 2
        decoder.append(_init_layer(rng, dec_w[i], dec_w[i + 1],
                                   "sigmoid" if last else "relu", batchnorm and not last))
    if norm is None:
        norm = NormRecord((0.0, 0.0), (1.0, 1.0))
    return AutoencoderModel(encoder, decoder, norm, N, p)


def _check_width(x, width, what):
    if x.shape[-1] != width:
        raise DimensionMismatch(f"{what} expects length {width}, got {x.shape[-1]}")


def encode(model: AutoencoderModel, c) -> np.ndarray:
    """Shape feature for one centerline (or a batch of flat rows)."""
    x = _as_flat(c)
    _check_width(x, 2 * model.N, "encode")
    s, _ = _forward(model.encoder, normalize(x, model.norm))
    return s


def decode(model: AutoencoderModel, s):
    s = np.asarray(s, dtype=float)
    _check_width(s, model.p, "decode")
    z, _ = _forward(model.decoder, s)
    flat = denormalize(z, model.norm)
    if flat.ndim == 1:
        return Centerline.from_flat(flat)
    return flat


def reconstruct_flat(model, X) -> np.ndarray:
    """Batch round trip in original units, rows of length 2N."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_width(X, 2 * model.N, "reconstruct")
    z, _ = _forward(model.layers, normalize(X, model.norm))
    return denormalize(z, model.norm)


def loss_and_grads(layers, Xn, training=False):
    """Mean squared reconstruction error over all 2N outputs and its gradients."""
    out, cache = _forward(layers, Xn, training=training)
    diff = out - Xn
    loss = float(np.mean(diff * diff))
    grads, _ = _backward(layers, cache, 2.0 * diff / diff.size)
    return loss, grads


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 500
    epochs: int = 50
    seed: int = 0
    val_fraction: float = 0.1
    patience: int = 5
    # learning rate decays geometrically to lr_final over the epoch budget
    lr_final: float | None = None
    hidden: tuple = (256, 64)
    batchnorm: bool = False
    # the code layer is squashed like the output; inner hidden layers are rectified
    latent_activation: str = "sigmoid"
    # float32 roughly halves training time; weights are returned as float64
    dtype: str = "float64"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.latent_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.latent_activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be 'float32' or 'float64'")


def split_indices(n, fraction, seed):
    """Deterministic train/validation split; validation gets ``ceil(n*fraction)`` rows."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = max(1, int(math.ceil(n * fraction)))
    if n_val >= n:
        return perm, perm
    return perm[n_val:], perm[:n_val]


class _Adam:
    def __init__(self, params, lr, b1, b2, eps):
        self.params = params
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _flat_grads(layers, grads):
    out = []
    for layer, g in zip(layers, grads):
        out += [g["W"], g["b"]]
        if layer.bn is not None:
            out += [g["gamma"], g["beta"]]
    return out


def _dataset_matrix(dataset) -> np.ndarray:
    rows = []
    for item in dataset:
        if isinstance(item, tuple):
            item = item[1]
        rows.append(_as_flat(item))
    widths = {r.size for r in rows}
    if len(widths) != 1:
        raise DimensionMismatch(f"dataset mixes centerline lengths {sorted(widths)}")
    return np.vstack(rows)


def train_autoencoder(dataset, p: int, cfg: TrainConfig = TrainConfig(),
                      widths=None, log=None) -> AutoencoderModel:
    """Fit an autoencoder by minibatch Adam on the mean squared error.

    ``dataset`` is an array of flat centerlines, a list of
    :class:`Centerline`, or ``(grasp, centerline)`` pairs.  ``widths``
    optionally overrides the hidden widths as a full list
    ``[2N, h1, ..., p, ..., 2N]``.  Training stops early once the
    validation error has not improved for ``cfg.patience`` epochs and the
    best-validation weights are returned.
    """
    X = np.asarray(dataset, dtype=float) if isinstance(dataset, np.ndarray) else _dataset_matrix(dataset)
    if X.shape[0] < cfg.batch_size:
        raise ValueError(f"dataset of {X.shape[0]} rows is smaller than batch size {cfg.batch_size}")
    N = X.shape[1] // 2
    hidden = cfg.hidden
    if widths is not None:
        widths = list(widths)
        if widths[0] != 2 * N or widths[-1] != 2 * N:
            raise DimensionMismatch("autoencoder widths must start and end at 2N")
        mid = len(widths) // 2
        if widths[mid] != p:
            raise DimensionMismatch("bottleneck width must equal p")
        hidden = tuple(widths[1:mid])
    train_idx, val_idx = split_indices(X.shape[0], cfg.val_fraction, cfg.seed)
    norm = NormRecord.fit(X[train_idx])
    model = build_autoencoder(N, p, hidden, cfg.seed, cfg.batchnorm, cfg.latent_activation, norm)
    dtype = np.dtype(cfg.dtype)
    Xn = normalize(X, norm).astype(dtype)
    Xtr, Xval = Xn[train_idx], Xn[val_idx]
    layers = model.layers
    _cast(layers, dtype)
    params = []
    for layer in layers:
        params.extend(layer.params())
    opt = _Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed + 1)

    def val_error():
        out, _ = _forward(layers, Xval)
        return float(np.mean((out - Xval) ** 2))

    history = {"train": [], "val": [val_error()]}
    best = (history["val"][0], _snapshot(layers))
    stale = 0
    for epoch in range(cfg.epochs):
        if cfg.lr_final is not None and cfg.epochs > 1:
            opt.lr = cfg.learning_rate * (cfg.lr_final / cfg.learning_rate) ** (epoch / (cfg.epochs - 1))
        order = rng.permutation(Xtr.shape[0])
        total = 0.0
        n_batches = 0
        for start in range(0, Xtr.shape[0] - cfg.batch_size + 1, cfg.batch_size):
            batch = Xtr[order[start:start + cfg.batch_size]]
            loss, grads = loss_and_grads(layers, batch, training=True)
            if not math.isfinite(loss):
                raise Diverged(f"training loss became {loss} at epoch {epoch}")
            opt.step(_flat_grads(layers, grads))
            total += loss
            n_batches += 1
        history["train"].append(total / max(n_batches, 1))
        err = val_error()
        if not math.isfinite(err):
            raise Diverged(f"validation loss became {err} at epoch {epoch}")
        history["val"].append(err)
        if log is not None:
            log(epoch, history["train"][-1], err)
        if err < best[0]:
            best = (err, _snapshot(layers))
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    _restore(layers, best[1])
    _cast(layers, np.float64)
    model.history = history
    return model


def _cast(layers, dtype):
    for layer in layers:
        layer.W = layer.W.astype(dtype)
        layer.b = layer.b.astype(dtype)
        if layer.bn is not None:
            layer.bn = {k: v.astype(dtype) for k, v in layer.bn.items()}


def _snapshot(layers):
    snap = []
    for layer in layers:
        entry = {"W": layer.W.copy(), "b": layer.b.copy()}
        if layer.bn is not None:
            entry["bn"] = {k: v.copy() for k, v in layer.bn.items()}
        snap.append(entry)
    return snap


def _restore(layers, snap):
    for layer, entry in zip(layers, snap):
        layer.W[...] = entry["W"]
        layer.b[...] = entry["b"]
        if layer.bn is not None:
            for k, v in entry["bn"].items():
                layer.bn[k][...] = v


# ---------------------------------------------------------------------------
# PCA baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (2N, k), orthonormal columns

    @property
    def k(self) -> int:
        return self.components.shape[1]

    @property
    def N(self) -> int:
        return self.mean.size // 2

    @property
    def p(self) -> int:
        return self.k


def pca_fit(dataset, k: int) -> PcaModel:
    """Top-``k`` right singular vectors of the mean-centred data.

    Warns with :class:`RankDeficient` and keeps fewer components when the
    data span fewer than ``k`` directions.
    """
    X = np.asarray(dataset, dtype=float) if isinstance(dataset, np.ndarray) else _dataset_matrix(dataset)
    if X.shape[0] <= k:
        raise ValueError(f"pca_fit needs more than k={k} samples, got {X.shape[0]}")
    if k > X.shape[1]:
        raise ValueError(f"k={k} exceeds the data dimension {X.shape[1]}")
    mean = X.mean(axis=0)
    _, S, Vt = np.linalg.svd(X - mean, full_matrices=False)
    tol = S[0] * max(X.shape) * np.finfo(float).eps if S.size and S[0] > 0 else 0.0
    rank = int(np.sum(S > tol))
    if rank < k:
        warnings.warn(f"data rank {rank} < requested k={k}; keeping {rank} components",
                      RankDeficient, stacklevel=2)
        k = rank
    return PcaModel(mean, Vt[:k].T.copy())


def pca_encode(model: PcaModel, c) -> np.ndarray:
    x = _as_flat(c)
    _check_width(x, model.mean.size, "pca_encode")
    return (x - model.mean) @ model.components


def pca_decode(model: PcaModel, s):
    s = np.asarray(s, dtype=float)
    _check_width(s, model.k, "pca_decode")
    flat = model.mean + s @ model.components.T
    if flat.ndim == 1:
        return Centerline.from_flat(flat)
    return flat


# ---------------------------------------------------------------------------
# shared evaluation
# ---------------------------------------------------------------------------

def feature_fn(model):
    """Encoder callable for either model type."""
    if isinstance(model, PcaModel):
        return lambda c: pca_encode(model, c)
    return lambda c: encode(model, c)


def reconstruct(model, c) -> np.ndarray:
    x = _as_flat(c)
    if isinstance(model, PcaModel):
        _check_width(x, model.mean.size, "reconstruct")
        return model.mean + ((x - model.mean) @ model.components) @ model.components.T
    return reconstruct_flat(model, x)[0] if x.ndim == 1 else reconstruct_flat(model, x)


def reconstruction_error(model, c) -> float | np.ndarray:
    """``||c - decode(encode(c))||`` in original units (row-wise for batches)."""
    x = _as_flat(c)
    diff = x - reconstruct(model, x)
    return np.linalg.norm(diff, axis=-1) if diff.ndim > 1 else float(np.linalg.norm(diff))
