"""Rod centerlines from binary masks with a one-dimensional self-organizing map.

Pipeline: mask -> set-pixel cloud -> SOM chain of N neurons -> greedy
nearest-neighbour ordering from an anchor -> equal arc-length resampling.
A k-means clustering baseline is provided for comparison.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.cluster.vq import kmeans2

from . import _kernels
from .errors import DegenerateChain, EmptyMask, ParseError
from .rodsim import Centerline, point_polyline_distance, resample_polyline

DEDUP_TOL = 1e-9
FORK_FACTOR = 3.0


@dataclass(frozen=True)
class PixelCloud:
    points: np.ndarray  # (M, 2) as (u, v) = (column, row)
    image_size: tuple | None = None  # (width, height)

    @property
    def M(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SomParams:
    n_neurons: int = 50
    epochs: int = 10
    initial_learning_rate: float = 0.5
    initial_radius: float | None = None  # default n_neurons / 4
    final_learning_rate: float = 0.01
    final_radius: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_neurons < 1:
            raise ValueError("n_neurons must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.initial_learning_rate <= 1:
            raise ValueError("initial_learning_rate must lie in (0, 1]")
        if not 0 < self.final_learning_rate <= 1:
            raise ValueError("final_learning_rate must lie in (0, 1]")
        if self.initial_radius is not None and not 0 < self.initial_radius <= self.n_neurons:
            raise ValueError("initial_radius must lie in (0, n_neurons]")
        if not self.final_radius > 0:
            raise ValueError("final_radius must be positive")

    @property
    def radius(self) -> float:
        if self.initial_radius is not None:
            return float(self.initial_radius)
        return max(1.0, self.n_neurons / 4.0)


@dataclass(frozen=True)
class NeuronChain:
    positions: np.ndarray  # (N, 2)
    lattice: np.ndarray  # (N,) lattice index per neuron
    fit_seconds: float = 0.0

    @property
    def N(self) -> int:
        return self.positions.shape[0]


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def parse_pgm(text: str) -> np.ndarray:
    """Plain (P2) portable graymap to a 2-D integer array."""
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ParseError("not a plain PGM (missing P2 magic)")
    try:
        width, height, maxval = (int(t) for t in tokens[1:4])
        values = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    except ValueError as exc:
        raise ParseError(f"malformed PGM token: {exc}") from exc
    if width < 1 or height < 1 or maxval < 1:
        raise ParseError("PGM dimensions and maxval must be positive")
    if values.size != width * height:
        raise ParseError(f"PGM holds {values.size} samples, header says {width * height}")
    if values.min() < 0 or values.max() > maxval:
        raise ParseError("PGM sample outside [0, maxval]")
    return values.reshape(height, width)


def format_pgm(mask) -> str:
    mask = np.asarray(mask)
    h, w = mask.shape
    rows = [" ".join(str(int(v)) for v in row) for row in mask]
    return f"P2\n{w} {h}\n255\n" + "\n".join(rows) + "\n"


def cloud_from_mask(mask) -> PixelCloud:
    mask = np.asarray(mask)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyMask("mask has no set pixels")
    pts = np.column_stack([cols, rows]).astype(float)
    return PixelCloud(pts, (mask.shape[1], mask.shape[0]))


def load_mask(mask_file) -> PixelCloud:
    """Set-pixel coordinates of a plain PGM mask file (path or open file)."""
    if hasattr(mask_file, "read"):
        text = mask_file.read()
    else:
        with open(mask_file) as fh:
            text = fh.read()
    return cloud_from_mask(parse_pgm(text))


def largest_component(mask) -> np.ndarray:
    """Keep only the largest 8-connected blob; strips isolated salt noise."""
    mask = np.asarray(mask)
    labels, n = ndimage.label(mask > 0, structure=np.ones((3, 3), dtype=int))
    if n <= 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    keep = labels == int(np.argmax(sizes))
    return np.where(keep, mask, 0).astype(mask.dtype)


def add_salt_noise(mask, fraction: float, rng) -> np.ndarray:
    """Set a random ``fraction`` of all pixels to 255."""
    out = np.array(mask, copy=True)
    n = int(round(fraction * out.size))
    idx = rng.choice(out.size, size=n, replace=False)
    out.flat[idx] = 255
    return out


# ---------------------------------------------------------------------------
# SOM
# ---------------------------------------------------------------------------

def _principal_axis_init(points, N):
    """Cloud points nearest to N evenly spaced quantiles along the main axis."""
    mean = points.mean(axis=0)
    centered = points - mean
    _, _, Vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ Vt[0]
    sorted_idx = np.argsort(proj, kind="stable")
    picks = np.round(np.linspace(0, points.shape[0] - 1, N)).astype(int)
    return points[sorted_idx[picks]].copy()


def som_fit(cloud: PixelCloud, params: SomParams) -> NeuronChain:
    """Train a chain of ``params.n_neurons`` neurons on the pixel cloud.

    Every update is a convex combination of a neuron and a cloud point and
    the neurons start on cloud points, so the chain stays inside the cloud's
    convex hull.
    """
    pts = np.ascontiguousarray(cloud.points, dtype=float)
    N = params.n_neurons
    if pts.shape[0] < N:
        raise ValueError(f"SOM needs at least {N} points, cloud has {pts.shape[0]}")
    weights = np.ascontiguousarray(_principal_axis_init(pts, N))
    rng = np.random.default_rng(params.seed)
    order = np.concatenate([rng.permutation(pts.shape[0]) for _ in range(params.epochs)])
    order = np.ascontiguousarray(order, dtype=np.int64)
    sigma0 = params.radius
    sigma1 = min(params.final_radius, sigma0)
    t0 = time.perf_counter()
    _kernels.som_train(pts, weights, order, params.initial_learning_rate,
                       params.final_learning_rate, sigma0, sigma1)
    elapsed = time.perf_counter() - t0
    return NeuronChain(weights, np.arange(N), elapsed)


def quantization_error(cloud: PixelCloud, chain: NeuronChain) -> float:
    """Mean distance from each cloud point to its nearest neuron."""
    d = np.linalg.norm(cloud.points[:, None, :] - chain.positions[None], axis=-1)
    return float(d.min(axis=1).mean())


# ---------------------------------------------------------------------------
# ordering and resampling
# ---------------------------------------------------------------------------

def _dedupe(points, tol=DEDUP_TOL):
    keep = []
    for i, p in enumerate(points):
        if all(np.linalg.norm(p - points[j]) > tol for j in keep):
            keep.append(i)
    return points[keep]


def sort_chain(points, anchor) -> Centerline:
    """Order points into a chain by greedy nearest-neighbour steps.

    The chain starts at the point closest to ``anchor``.  Duplicate points
    (within ``1e-9``) are merged first, keeping the lowest lattice index.

    Raises
    ------
    DegenerateChain
        A step is longer than three times the median nearest-neighbour
        spacing, which signals a fork or a disconnected cloud.
    """
    if isinstance(points, NeuronChain):
        points = points.positions[np.argsort(points.lattice, kind="stable")]
    elif isinstance(points, Centerline):
        points = points.points
    pts = _dedupe(np.asarray(points, dtype=float))
    if pts.shape[0] < 2:
        return Centerline(pts)
    anchor = np.asarray(anchor, dtype=float)
    start = int(np.argmin(np.linalg.norm(pts - anchor, axis=1)))
    order = _kernels.greedy_order(np.ascontiguousarray(pts), start)
    chain = pts[order]
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    median = float(np.median(d.min(axis=1)))
    steps = np.linalg.norm(np.diff(chain, axis=0), axis=1)
    if np.any(steps > FORK_FACTOR * median):
        k = int(np.argmax(steps))
        raise DegenerateChain(
            f"step {k} of length {steps[k]:.3g} exceeds {FORK_FACTOR:g}x median spacing {median:.3g}")
    return Centerline(chain)


def resample_equidistant(chain, N: int) -> Centerline:
    """N points at equal arc length along the chain, endpoints preserved."""
    pts = chain.points if isinstance(chain, Centerline) else np.asarray(chain, dtype=float)
    if N < 2:
        raise ValueError("resampling needs N >= 2")
    if pts.shape[0] < 2:
        raise ValueError("resampling needs a chain of at least 2 points")
    return Centerline(resample_polyline(pts, N))


def baseline_cluster(cloud: PixelCloud, N: int, seed: int = 0) -> np.ndarray:
    """Unordered k-means centroids, the clustering baseline."""
    pts = np.asarray(cloud.points, dtype=float)
    if pts.shape[0] < N:
        raise ValueError(f"clustering needs at least {N} points, cloud has {pts.shape[0]}")
    centroids, _ = kmeans2(pts, N, minit="++", seed=np.random.default_rng(seed))
    return centroids


def centerline_error(extracted, truth) -> float:
    """Mean distance from the extracted points to a densely sampled true curve."""
    pts = extracted.points if isinstance(extracted, Centerline) else np.asarray(extracted, float)
    truth = truth.points if isinstance(truth, Centerline) else np.asarray(truth, float)
    return float(point_polyline_distance(pts, truth).mean())


@dataclass(frozen=True)
class Extraction:
    centerline: Centerline
    chain: NeuronChain
    seconds: float


def extract_centerline(mask, N: int, anchor, som: SomParams | None = None,
                       denoise: bool = True) -> Extraction:
    """Full mask-to-centerline pipeline (optional blob filter, SOM, sort, resample)."""
    t0 = time.perf_counter()
    if denoise:
        mask = largest_component(mask)
    cloud = cloud_from_mask(mask)
    params = som if som is not None else SomParams(n_neurons=N)
    chain = som_fit(cloud, params)
    ordered = sort_chain(chain, anchor)
    line = resample_equidistant(ordered, N)
    return Extraction(line, chain, time.perf_counter() - t0)
