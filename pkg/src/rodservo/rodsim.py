"""Planar elastic-rod equilibria by constrained bending-energy minimization.

The rod is an inextensible chain of ``n_segments`` equal segments described
by one tangent angle per segment.  The base is clamped (position and
tangent); the grasped end is pinned in position and, when a yaw is given,
clamped in tangent as well.  Boundary tangents act through half-segment
ghost edges, which makes the discrete energy a midpoint-rule quadrature of
``integral(kappa**2 ds)`` and lets constant-curvature arcs come out exact to
second order.

All solves are carried out on a scaled system (lengths in units of the
segment length, energy divided by ``EI``), so KKT tolerances are
independent of the rod's physical size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import NoConvergence, OutOfFrame, Unreachable

EPS_REACH = 1e-3
KKT_TOL = 1e-8
ACCEPT_TOL = 1e-6
MAX_ITER = 500


@dataclass(frozen=True)
class RodParams:
    length: float = 1.0
    n_segments: int = 100
    flexural_scale: float = 1.0
    base_position: tuple = (0.0, 0.0)
    base_angle: float = 0.0

    def __post_init__(self):
        if not self.length > 0:
            raise ValueError("rod length must be positive")
        if self.n_segments < 10:
            raise ValueError("n_segments must be >= 10")
        if not self.flexural_scale > 0:
            raise ValueError("flexural_scale must be positive")

    @property
    def ds(self) -> float:
        return self.length / self.n_segments

    @property
    def base(self) -> np.ndarray:
        return np.asarray(self.base_position, dtype=float)


@dataclass(frozen=True)
class GraspPose:
    position: tuple
    yaw: float | None = None

    @property
    def q(self) -> int:
        return 2 if self.yaw is None else 3

    def as_command(self) -> np.ndarray:
        if self.yaw is None:
            return np.asarray(self.position, dtype=float)
        return np.array([self.position[0], self.position[1], self.yaw], dtype=float)

    @classmethod
    def from_command(cls, r) -> "GraspPose":
        r = np.asarray(r, dtype=float).ravel()
        if r.size == 2:
            return cls((float(r[0]), float(r[1])))
        if r.size == 3:
            return cls((float(r[0]), float(r[1])), float(r[2]))
        raise ValueError(f"command must have 2 or 3 entries, got {r.size}")


@dataclass(frozen=True)
class RodConfiguration:
    params: RodParams
    angles: np.ndarray
    multipliers: np.ndarray = field(default=None, repr=False)
    residual: float = 0.0
    iterations: int = 0
    end_yaw: float | None = None

    @property
    def positions(self) -> np.ndarray:
        """Vertex positions, shape ``(n_segments + 1, 2)``."""
        return positions_from_angles(self.params, self.angles)

    @property
    def energy(self) -> float:
        return bending_energy(self.params, self.angles, self.end_yaw)


@dataclass(frozen=True)
class Centerline:
    """Ordered chain of N planar points.

    ``flat`` interleaves coordinates as ``[u1, v1, u2, v2, ...]``.
    """

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"centerline points must have shape (N, 2), got {pts.shape}")
        object.__setattr__(self, "points", pts)

    @property
    def N(self) -> int:
        return self.points.shape[0]

    @property
    def flat(self) -> np.ndarray:
        return self.points.reshape(-1).copy()

    @classmethod
    def from_flat(cls, c) -> "Centerline":
        c = np.asarray(c, dtype=float).ravel()
        if c.size % 2:
            raise ValueError("flat centerline must have even length")
        return cls(c.reshape(-1, 2))

    def gap_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.points, axis=0), axis=1)

    def gap_cv(self) -> float:
        gaps = self.gap_lengths()
        return float(gaps.std() / gaps.mean())


# ---------------------------------------------------------------------------
# energy, constraints, derivatives (scaled system)
# ---------------------------------------------------------------------------

def positions_from_angles(params: RodParams, angles) -> np.ndarray:
    angles = np.asarray(angles, dtype=float)
    steps = params.ds * np.column_stack([np.cos(angles), np.sin(angles)])
    out = np.empty((angles.size + 1, 2))
    out[0] = params.base
    np.cumsum(steps, axis=0, out=out[1:])
    out[1:] += params.base
    return out


def _edge_diffs(theta, base_angle, end_yaw):
    """Angle differences across all edges, with their quadrature weights."""
    parts = [[theta[0] - base_angle], np.diff(theta)]
    weights = [[2.0], np.ones(theta.size - 1)]
    if end_yaw is not None:
        parts.append([end_yaw - theta[-1]])
        weights.append([2.0])
    return np.concatenate(parts), np.concatenate(weights)


def bending_energy(params: RodParams, angles, end_yaw=None) -> float:
    """Physical bending energy ``EI/ds * sum w_e (dtheta_e)**2``."""
    d, w = _edge_diffs(np.asarray(angles, dtype=float), params.base_angle, end_yaw)
    return float(params.flexural_scale / params.ds * np.sum(w * d * d))


def _scaled_energy(theta, base_angle, end_yaw):
    d, w = _edge_diffs(theta, base_angle, end_yaw)
    return 0.5 * float(np.sum(w * d * d))


def _energy_hessian(n, has_yaw):
    H = np.zeros((n, n))
    idx = np.arange(n - 1)
    H[idx, idx] += 1.0
    H[idx + 1, idx + 1] += 1.0
    H[idx, idx + 1] -= 1.0
    H[idx + 1, idx] -= 1.0
    H[0, 0] += 2.0
    if has_yaw:
        H[-1, -1] += 2.0
    return H


def _energy_gradient(theta, base_angle, end_yaw, H0):
    g = H0 @ theta
    g[0] -= 2.0 * base_angle
    if end_yaw is not None:
        g[-1] -= 2.0 * end_yaw
    return g


class _Problem:
    """Scaled KKT system for one boundary-value problem."""

    def __init__(self, params: RodParams, grasp: GraspPose, end_yaw):
        self.params = params
        self.n = params.n_segments
        self.base_angle = params.base_angle
        self.end_yaw = end_yaw
        # chord target in units of ds
        self.target = (np.asarray(grasp.position, dtype=float) - params.base) / params.ds
        self.H0 = _energy_hessian(self.n, end_yaw is not None)

    def constraint(self, theta):
        return np.array([np.cos(theta).sum(), np.sin(theta).sum()]) - self.target

    def constraint_jac(self, theta):
        return np.vstack([-np.sin(theta), np.cos(theta)])

    def grad(self, theta):
        return _energy_gradient(theta, self.base_angle, self.end_yaw, self.H0)

    def residual(self, theta, lam):
        G = self.constraint_jac(theta)
        return np.concatenate([self.grad(theta) - G.T @ lam, self.constraint(theta)])

    def lagrangian_hessian(self, theta, lam):
        H = self.H0.copy()
        H[np.diag_indices(self.n)] += lam[0] * np.cos(theta) + lam[1] * np.sin(theta)
        return H

    def kkt(self, theta, lam):
        n = self.n
        K = np.zeros((n + 2, n + 2))
        K[:n, :n] = self.lagrangian_hessian(theta, lam)
        G = self.constraint_jac(theta)
        K[:n, n:] = -G.T
        K[n:, :n] = G
        return K

    def multipliers_ls(self, theta):
        G = self.constraint_jac(theta)
        lam, *_ = np.linalg.lstsq(G.T, self.grad(theta), rcond=None)
        return lam

    def is_stable(self, theta, lam):
        """Reduced Hessian positive definite on the constraint tangent space."""
        G = self.constraint_jac(theta)
        Q, _ = np.linalg.qr(G.T, mode="complete")
        Z = Q[:, 2:]
        Hr = Z.T @ self.lagrangian_hessian(theta, lam) @ Z
        try:
            np.linalg.cholesky(Hr)
        except np.linalg.LinAlgError:
            return False
        return True


def _wrap_near(angle, reference):
    return angle + 2.0 * math.pi * round((reference - angle) / (2.0 * math.pi))


def _arc_guess(params: RodParams, grasp: GraspPose) -> np.ndarray:
    """Constant-curvature chain of length L hitting the grasp point exactly.

    Of the two mirror-image arcs through base and grasp, the one whose start
    tangent is closer to the clamped base tangent is returned.
    """
    d = np.asarray(grasp.position, dtype=float) - params.base
    ratio = float(np.linalg.norm(d)) / params.length
    # sin(x)/x = ratio, x = half the total turning
    if ratio >= 1.0 - 1e-14:
        x = 0.0
    else:
        x = optimize.brentq(lambda t: np.sinc(t / math.pi) - ratio, 1e-12, math.pi - 1e-12)
    phi = math.atan2(d[1], d[0])
    n = params.n_segments
    s_mid = (np.arange(n) + 0.5) / n
    best = None
    for sign in (1.0, -1.0):
        start = _wrap_near(phi - sign * x, params.base_angle)
        theta = start + sign * 2.0 * x * s_mid
        # exact midpoint-rule closure: rescale chord direction error away
        cost = abs(start - params.base_angle)
        if best is None or cost < best[0]:
            best = (cost, theta)
    theta = best[1]
    # midpoint rule misses the chord slightly; a rigid rotation fixes direction
    chord = params.ds * np.array([np.cos(theta).sum(), np.sin(theta).sum()])
    theta = theta + (phi - math.atan2(chord[1], chord[0]))
    return theta


def _check_reach(params: RodParams, grasp: GraspPose):
    dist = float(np.linalg.norm(np.asarray(grasp.position, dtype=float) - params.base))
    if dist > params.length * (1.0 - EPS_REACH):
        raise Unreachable(
            f"grasp at distance {dist:.6g} exceeds reach {params.length * (1 - EPS_REACH):.6g}"
        )


def _straight_solution(params: RodParams, grasp: GraspPose):
    """Fully extended rod along the base tangent, the one feasible shape at full reach."""
    tip = params.base + params.length * np.array([math.cos(params.base_angle),
                                                  math.sin(params.base_angle)])
    if np.linalg.norm(np.asarray(grasp.position, dtype=float) - tip) > 1e-12 * params.length:
        return None
    if grasp.yaw is not None and abs(_wrap_near(grasp.yaw, params.base_angle)
                                     - params.base_angle) > 1e-12:
        return None
    theta = np.full(params.n_segments, float(params.base_angle))
    return RodConfiguration(params, theta, np.zeros(2), 0.0, 0, grasp.yaw)


def _newton(prob: _Problem, theta, lam, max_iter):
    """Damped Newton on the KKT residual; returns (theta, lam, res, iters)."""
    res_vec = prob.residual(theta, lam)
    res = float(np.max(np.abs(res_vec)))
    it = 0
    n = prob.n
    while res > KKT_TOL and it < max_iter:
        it += 1
        K = prob.kkt(theta, lam)
        try:
            step = np.linalg.solve(K, -res_vec)
        except np.linalg.LinAlgError:
            break
        merit = float(res_vec @ res_vec)
        t = 1.0
        accepted = False
        while t > 1e-6:
            th_new = theta + t * step[:n]
            lam_new = lam + t * step[n:]
            r_new = prob.residual(th_new, lam_new)
            m_new = float(r_new @ r_new)
            if np.isfinite(m_new) and m_new <= (1.0 - 1e-4 * t) * merit:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        theta, lam, res_vec = th_new, lam_new, r_new
        res = float(np.max(np.abs(res_vec)))
    return theta, lam, res, it


def _penalty_descent(prob: _Problem, theta):
    """Quadratic-penalty minimization with increasing weight (fallback path)."""
    lam = np.zeros(2)
    for mu in (1e1, 1e3, 1e5, 1e7):
        def f(th):
            c = prob.constraint(th)
            e = _scaled_energy(th, prob.base_angle, prob.end_yaw)
            g = prob.grad(th) + mu * prob.constraint_jac(th).T @ c
            return e + 0.5 * mu * float(c @ c), g

        sol = optimize.minimize(f, theta, jac=True, method="L-BFGS-B",
                                options={"maxiter": 2000, "gtol": 1e-12, "ftol": 1e-15})
        theta = sol.x
        lam = -mu * prob.constraint(theta)
    return theta, lam


def solve_shape(params: RodParams, grasp: GraspPose,
                warm_start: RodConfiguration | None = None) -> RodConfiguration:
    """Equilibrium configuration for the given grasp.

    Starts from ``warm_start`` when given (tracks the current equilibrium
    branch), otherwise from a constant-curvature arc through the grasp.
    Newton steps on the KKT system are tried first; if they stall or land
    on an unstable equilibrium, a penalty/gradient-descent pass restarts
    them from a nearby minimizer.

    Raises
    ------
    Unreachable
        Grasp farther from the base than ``L * (1 - 1e-3)``.
    NoConvergence
        Iteration cap hit with KKT residual above ``1e-6``.
    """
    straight = _straight_solution(params, grasp)
    if straight is not None:
        return straight
    _check_reach(params, grasp)
    cold = warm_start is None or warm_start.angles.size != params.n_segments
    if not cold:
        theta0 = np.array(warm_start.angles, dtype=float)
    else:
        theta0 = _arc_guess(params, grasp)
    end_yaw = None if grasp.yaw is None else _wrap_near(grasp.yaw, theta0[-1])
    prob = _Problem(params, grasp, end_yaw)

    if not cold and warm_start.multipliers is not None:
        lam0 = np.array(warm_start.multipliers, dtype=float)
    else:
        lam0 = prob.multipliers_ls(theta0)

    if cold:
        # energy descent picks a stable branch; Newton alone may find saddles
        theta0, lam0 = _penalty_descent(prob, theta0)
    theta, lam, res, used = _newton(prob, theta0, lam0, MAX_ITER)
    if res > KKT_TOL or not prob.is_stable(theta, lam):
        start = theta0 if res > KKT_TOL else theta
        rng = np.random.default_rng(0)
        start = start + 1e-3 * rng.standard_normal(start.size)
        theta, lam = _penalty_descent(prob, start)
        theta, lam, res2, used2 = _newton(prob, theta, lam, MAX_ITER - used)
        used += used2
        res = res2
    if not np.isfinite(res) or res > ACCEPT_TOL:
        raise NoConvergence(f"rod solve stalled with KKT residual {res:.3g}", residual=res)
    return RodConfiguration(params, theta, lam, res, used, end_yaw)


def _kkt_residual_of(config: RodConfiguration, grasp: GraspPose) -> float:
    prob = _Problem(config.params, grasp, config.end_yaw)
    return float(np.max(np.abs(prob.residual(config.angles, config.multipliers))))


# ---------------------------------------------------------------------------
# sampling and datasets
# ---------------------------------------------------------------------------

def resample_polyline(points, N: int) -> np.ndarray:
    """N points at equal arc length along a polyline, endpoints kept."""
    points = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, s[-1], N)
    u = np.interp(targets, s, points[:, 0])
    v = np.interp(targets, s, points[:, 1])
    out = np.column_stack([u, v])
    out[0], out[-1] = points[0], points[-1]
    return out


def sample_centerline(config: RodConfiguration, N: int) -> Centerline:
    if N < 3:
        raise ValueError("sample_centerline needs N >= 3")
    return Centerline(resample_polyline(config.positions, N))


@dataclass(frozen=True)
class WorkspaceBox:
    """Axis-aligned box of grasp commands (x, y[, yaw])."""

    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.size not in (2, 3) or np.any(hi < lo):
            raise ValueError("workspace box needs matching lo <= hi of size 2 or 3")

    @property
    def lo_arr(self):
        return np.asarray(self.lo, dtype=float)

    @property
    def hi_arr(self):
        return np.asarray(self.hi, dtype=float)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.hi_arr[:2] - self.lo_arr[:2]))

    def corners(self) -> np.ndarray:
        lo, hi = self.lo_arr[:2], self.hi_arr[:2]
        return np.array([[lo[0], lo[1]], [hi[0], lo[1]], [lo[0], hi[1]], [hi[0], hi[1]]])

    def contains(self, r) -> bool:
        r = np.asarray(r, dtype=float)
        return bool(np.all(r >= self.lo_arr - 1e-12) and np.all(r <= self.hi_arr + 1e-12))

    def check_reachable(self, params: RodParams):
        reach = params.length * (1.0 - EPS_REACH)
        dist = np.linalg.norm(self.corners() - params.base, axis=1)
        if np.any(dist > reach):
            raise ValueError("workspace box extends beyond the rod's reach")


def _reflect(x, lo, hi):
    span = hi - lo
    out = x.copy()
    for i in range(x.size):
        if span[i] == 0:
            out[i] = lo[i]
            continue
        y = (x[i] - lo[i]) % (2 * span[i])
        out[i] = lo[i] + (y if y <= span[i] else 2 * span[i] - y)
    return out


def random_walk(box: WorkspaceBox, n_samples: int, step: float, rng, start=None) -> np.ndarray:
    """Bounded random walk of commands; steps reflect off the box walls.

    Step lengths are uniform in ``[0, step]`` along a uniformly random
    direction; reflection never lengthens a step.
    """
    lo, hi = box.lo_arr, box.hi_arr
    r = (lo + hi) / 2 if start is None else np.asarray(start, dtype=float)
    out = np.empty((n_samples, lo.size))
    for i in range(n_samples):
        if i:
            d = rng.standard_normal(lo.size)
            d /= np.linalg.norm(d)
            r = _reflect(r + step * rng.uniform() * d, lo, hi)
        out[i] = r
    return out


def generate_dataset(params: RodParams, workspace_box: WorkspaceBox, n_samples: int,
                     seed: int, N: int = 50, start=None):
    """Simulated (grasp, centerline) pairs along a bounded random walk.

    The walk starts at the box centre (or ``start``) and every solve is
    warm-started from the previous one, so consecutive shapes stay on one
    continuous equilibrium branch.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    workspace_box.check_reachable(params)
    rng = np.random.default_rng(seed)
    commands = random_walk(workspace_box, n_samples, 0.01 * params.length, rng, start)
    out = []
    config = None
    for i, r in enumerate(commands):
        grasp = GraspPose.from_command(r)
        try:
            config = solve_shape(params, grasp, config)
        except NoConvergence as exc:
            raise NoConvergence(f"sample {i}: {exc}", exc.residual, sample_index=i) from exc
        out.append((grasp, sample_centerline(config, N)))
    return out


# ---------------------------------------------------------------------------
# synthetic masks
# ---------------------------------------------------------------------------

def to_pixels(points, scale: float, origin=(0.0, 0.0)) -> np.ndarray:
    """World metres to image pixels: ``u = u0 + scale*x``, ``v = v0 - scale*y``."""
    points = np.asarray(points, dtype=float)
    return np.column_stack([origin[0] + scale * points[:, 0], origin[1] - scale * points[:, 1]])


def point_polyline_distance(points, polyline) -> np.ndarray:
    """Euclidean distance from each point to the nearest polyline segment."""
    P = np.asarray(points, dtype=float)[:, None, :]
    A = np.asarray(polyline, dtype=float)[:-1][None]
    B = np.asarray(polyline, dtype=float)[1:][None]
    AB = B - A
    denom = np.einsum("...k,...k", AB, AB)
    denom = np.where(denom > 0, denom, 1.0)
    t = np.clip(np.einsum("...k,...k", P - A, AB) / denom, 0.0, 1.0)
    proj = A + t[..., None] * AB
    return np.min(np.linalg.norm(P - proj, axis=-1), axis=1)


def rasterize_mask(config, image_size, rod_width_px: float, scale: float,
                   origin=None) -> np.ndarray:
    """Binary uint8 image (0/255) of the rod drawn with the given width.

    ``config`` may be a :class:`RodConfiguration` (world coordinates mapped
    with :func:`to_pixels`) or an ``(n, 2)`` polyline already in pixels.
    ``image_size`` is ``(width, height)``.  A pixel is set when its centre
    lies within ``rod_width_px / 2`` of the polyline.
    """
    if not rod_width_px > 0:
        raise ValueError("rod width must be positive")
    width, height = image_size
    if isinstance(config, RodConfiguration):
        if origin is None:
            origin = (width / 2.0, height / 2.0)
        poly = to_pixels(config.positions, scale, origin)
    else:
        poly = np.asarray(config, dtype=float)
    half = rod_width_px / 2.0
    lo = np.floor(poly.min(axis=0) - half).astype(int)
    hi = np.ceil(poly.max(axis=0) + half).astype(int)
    if lo[0] < 0 or lo[1] < 0 or hi[0] >= width or hi[1] >= height:
        raise OutOfFrame(f"rod spans pixels {lo.tolist()}..{hi.tolist()} outside {width}x{height}")
    mask = np.zeros((height, width), dtype=np.uint8)
    # a pixel is within reach of the polyline iff it is within reach of some
    # segment, so each segment only needs the pixels of its padded box
    for a, b in zip(poly[:-1], poly[1:]):
        s_lo = np.floor(np.minimum(a, b) - half).astype(int)
        s_hi = np.ceil(np.maximum(a, b) + half).astype(int)
        uu, vv = np.meshgrid(np.arange(s_lo[0], s_hi[0] + 1), np.arange(s_lo[1], s_hi[1] + 1))
        cand = np.column_stack([uu.ravel(), vv.ravel()]).astype(float)
        hit = cand[point_polyline_distance(cand, np.array([a, b])) <= half].astype(int)
        mask[hit[:, 1], hit[:, 0]] = 255
    return mask


# ---------------------------------------------------------------------------
# command interface
# ---------------------------------------------------------------------------

class RodPlant:
    """Simulated robot holding the rod: command ``r`` in, centerline out.

    Moves are tracked by continuation in sub-steps of at most
    ``max_substep`` so the rod stays on the equilibrium branch it started
    on.  Commands are clipped to ``box`` when one is given and always to
    the reachable disk.
    """

    def __init__(self, params: RodParams, r0, N: int = 50, box: WorkspaceBox | None = None,
                 reference=None, max_substep: float | None = None):
        self.params = params
        self.N = N
        self.box = box
        self.max_substep = 0.01 * params.length if max_substep is None else max_substep
        self.n_solves = 0
        r0 = np.asarray(r0, dtype=float)
        if reference is None:
            reference = box.lo_arr / 2 + box.hi_arr / 2 if box is not None else r0
        reference = np.asarray(reference, dtype=float)
        self._r = reference.copy()
        self._config = self._solve(reference, None)
        self.apply(r0)

    @property
    def q(self) -> int:
        return self._r.size

    @property
    def command(self) -> np.ndarray:
        return self._r.copy()

    @property
    def config(self) -> RodConfiguration:
        return self._config

    def _solve(self, r, warm):
        self.n_solves += 1
        return solve_shape(self.params, GraspPose.from_command(r), warm)

    def clip(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float).copy()
        if self.box is not None:
            r = np.clip(r, self.box.lo_arr, self.box.hi_arr)
        off = r[:2] - self.params.base
        limit = self.params.length * (1 - 2 * EPS_REACH)
        dist = np.linalg.norm(off)
        if dist > limit:
            r[:2] = self.params.base + off * (limit / dist)
        return r

    def measure(self) -> Centerline:
        return sample_centerline(self._config, self.N)

    def apply(self, r) -> Centerline:
        target = self.clip(r)
        if target.shape != self._r.shape:
            raise ValueError(f"command has {target.size} entries, plant expects {self._r.size}")
        delta = target - self._r
        n_sub = max(1, int(np.ceil(np.linalg.norm(delta) / self.max_substep)))
        config = self._config
        for k in range(1, n_sub + 1):
            config = self._solve(self._r + delta * (k / n_sub), config)
        self._config = config
        self._r = target
        return self.measure()
