"""Closed-form receding-horizon shape servoing in latent feature space.

The controller keeps one command ``u`` over a horizon of ``H`` steps and
minimizes the discounted distance between the predicted features and an
exponentially converging reference, plus a ``u' Q u`` penalty.  Setting the
gradient to zero gives the normal equations

    (a J'J + Q) u = (b - c) J' e

where ``a``, ``b``, ``c`` are horizon weights.  By default they are the
closed-form integral approximations of the horizon sums; ``horizon_mode =
"sum"`` switches to the exact discrete sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, DimensionMismatch, DivergenceDetected, SolveFailure
from .jacobian import DiffPair, JacobianEstimate, criterion_T2, init_estimate, update

# per-step saturation for one arm: |dx|, |dy| <= 0.01, |dyaw| <= 0.1 per step
LINEAR_LIMIT = 0.01
ANGULAR_LIMIT = 0.1


@dataclass(frozen=True)
class ServoConfig:
    horizon: int = 10
    alpha: float = 0.9
    rho: float = 0.1
    Q: np.ndarray | float = 0.1
    limits: tuple | None = None
    max_steps: int = 200
    threshold: float = 0.05
    horizon_mode: str = "integral"

    def __post_init__(self):
        if int(self.horizon) != self.horizon or self.horizon < 1:
            raise ConfigInvalid("horizon must be an integer >= 1")
        if not 0 < self.alpha < 1:
            raise ConfigInvalid("alpha must lie strictly between 0 and 1")
        if not self.rho > 0:
            raise ConfigInvalid("rho must be positive")
        if self.horizon_mode not in ("integral", "sum"):
            raise ConfigInvalid("horizon_mode must be 'integral' or 'sum'")
        if self.limits is not None and np.any(np.asarray(self.limits, float) <= 0):
            raise ConfigInvalid("saturation limits must be positive")
        if self.max_steps < 0:
            raise ConfigInvalid("max_steps must be non-negative")
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim == 2:
            if not np.allclose(Q, Q.T):
                raise ConfigInvalid("Q must be symmetric")
            if np.linalg.eigvalsh(Q).min() <= 0:
                raise ConfigInvalid("Q must be positive definite")
        elif not Q > 0:
            raise ConfigInvalid("Q scale must be positive")

    @property
    def beta(self) -> float:
        return math.exp(-self.rho)

    def Q_matrix(self, q: int) -> np.ndarray:
        Q = np.asarray(self.Q, dtype=float)
        if Q.ndim == 0:
            return float(Q) * np.eye(q)
        if Q.shape != (q, q):
            raise DimensionMismatch(f"Q is {Q.shape}, expected {(q, q)}")
        return Q

    def limit_vector(self, q: int) -> np.ndarray:
        if self.limits is None:
            return default_limits(q)
        lim = np.asarray(self.limits, dtype=float).ravel()
        if lim.size == 1:
            return np.full(q, float(lim[0]))
        if lim.size != q:
            raise DimensionMismatch(f"{lim.size} saturation limits for {q} command axes")
        return lim


def default_limits(q: int) -> np.ndarray:
    """Per-axis step limits: ``x, y`` linear and ``yaw`` angular per arm."""
    if q % 3 == 0:
        return np.tile([LINEAR_LIMIT, LINEAR_LIMIT, ANGULAR_LIMIT], q // 3)
    return np.full(q, LINEAR_LIMIT)


@dataclass(frozen=True)
class HorizonCoefficients:
    a: float
    b: float
    c: float


def _closed_form_b(x, H):
    """``integral_0^H w exp(x w) dw`` with ``x = ln(base)``."""
    if x == -math.inf:
        return 0.0
    eH = math.exp(H * x)
    return (H * eH * x - eH + 1.0) / (x * x)


def coefficients(cfg: ServoConfig) -> HorizonCoefficients:
    """Horizon weights ``a`` (quadratic), ``b`` and ``c`` (linear, reference).

    Raises :class:`ConfigInvalid` unless ``a > 0`` and ``b - c > 0``.
    """
    H, alpha, beta = cfg.horizon, cfg.alpha, cfg.beta
    if cfg.horizon_mode == "sum":
        w = np.arange(H + 1, dtype=float)
        a = float(np.sum(w * w * alpha ** w))
        b = float(np.sum(w * alpha ** w))
        c = float(np.sum(w * (alpha * beta) ** w))
    else:
        la = math.log(alpha)
        if la == 0.0:
            raise ConfigInvalid("alpha = 1 makes the closed-form weights singular")
        b = _closed_form_b(la, H)
        a = (H * H * alpha ** H - 2.0 * b) / la
        # rho -> inf drives alpha*beta to 0, where c -> 0
        lab = la - cfg.rho
        c = 0.0 if not math.isfinite(lab) or alpha * beta == 0.0 else _closed_form_b(lab, H)
    if not (a > 0 and b - c > 0):
        raise ConfigInvalid(f"horizon weights a={a:.6g}, b-c={b - c:.6g} must both be positive")
    return HorizonCoefficients(a, b, c)


def _as_J(est) -> np.ndarray:
    if isinstance(est, JacobianEstimate):
        return est.J_hat
    return np.atleast_2d(np.asarray(est, dtype=float))


def compute_command(est, e, cfg: ServoConfig, coeffs: HorizonCoefficients | None = None) -> np.ndarray:
    """Stationary point of the horizon cost: ``(a J'J + Q) u = (b - c) J' e``."""
    J = _as_J(est)
    e = np.asarray(e, dtype=float).ravel()
    if e.size != J.shape[0]:
        raise DimensionMismatch(f"error has {e.size} entries, Jacobian has {J.shape[0]} rows")
    co = coefficients(cfg) if coeffs is None else coeffs
    M = co.a * J.T @ J + cfg.Q_matrix(J.shape[1])
    rhs = (co.b - co.c) * J.T @ e
    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(rhs))):
        raise SolveFailure("non-finite Jacobian or error in command solve")
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise SolveFailure(str(exc)) from exc


def saturate(u, limits) -> np.ndarray:
    limits = np.asarray(limits, dtype=float)
    if np.any(limits <= 0):
        raise ValueError("saturation limits must be positive")
    return np.clip(np.asarray(u, dtype=float), -limits, limits)


# ---------------------------------------------------------------------------
# cost and gradient, used by the optimality checks
# ---------------------------------------------------------------------------

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def horizon_cost(u, J, e, cfg: ServoConfig) -> float:
    """Receding-horizon cost evaluated term by term.

    ``"sum"`` mode sums ``w = 0..H``; ``"integral"`` mode integrates the
    same integrand over ``[0, H]`` with Gauss-Legendre quadrature.
    """
    J = np.atleast_2d(np.asarray(J, float))
    u = np.asarray(u, float).ravel()
    e = np.asarray(e, float).ravel()
    H, alpha, beta = cfg.horizon, cfg.alpha, cfg.beta
    if cfg.horizon_mode == "sum":
        w = np.arange(H + 1, dtype=float)
        wt = alpha ** w
    else:
        w = 0.5 * H * (_GL_NODES + 1.0)
        wt = 0.5 * H * _GL_WEIGHTS * alpha ** w
    Ju = J @ u
    resid = (1.0 - beta ** w)[:, None] * e[None, :] - w[:, None] * Ju[None, :]
    Q = cfg.Q_matrix(J.shape[1])
    return 0.5 * (float(np.sum(wt * np.sum(resid * resid, axis=1))) + float(u @ Q @ u))


def horizon_gradient(u, J, e, cfg: ServoConfig) -> np.ndarray:
    """Gradient of :func:`horizon_cost` in ``u``, assembled per horizon term."""
    J = np.atleast_2d(np.asarray(J, float))
    u = np.asarray(u, float).ravel()
    e = np.asarray(e, float).ravel()
    H, alpha, beta = cfg.horizon, cfg.alpha, cfg.beta
    if cfg.horizon_mode == "sum":
        grad = cfg.Q_matrix(J.shape[1]) @ u
        for w in range(H + 1):
            grad = grad - w * alpha ** w * J.T @ ((1 - beta ** w) * e - w * J @ u)
        return grad
    co = coefficients(cfg)
    return co.a * J.T @ (J @ u) - (co.b - co.c) * J.T @ e + cfg.Q_matrix(J.shape[1]) @ u


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------

@dataclass
class ServoTrace:
    method: str
    T3: list = field(default_factory=list)
    feature_error: list = field(default_factory=list)
    commands: list = field(default_factory=list)
    T2: list = field(default_factory=list)
    skip_count: list = field(default_factory=list)
    converged: bool = False
    estimate: JacobianEstimate | None = None

    @property
    def steps(self) -> int:
        """Number of control steps executed (step 0 is the initial measurement)."""
        return len(self.T3) - 1

    def rows(self):
        for k, (t3, fe, u) in enumerate(zip(self.T3, self.feature_error, self.commands)):
            yield k, t3, fe, np.asarray(u)


def run_loop(plant, encoder, method: str, cfg: ServoConfig, target, estimate=None,
             init_magnitude: float = 0.005, seed: int = 0, on_step=None) -> ServoTrace:
    """Drive ``plant`` until its centerline matches ``target``.

    ``plant`` exposes ``command`` (current r), ``measure()`` and ``apply(r)``
    (both returning a centerline).  ``encoder`` maps a centerline to the
    feature vector.  Without an ``estimate`` the Jacobian is initialized by
    exploratory probing around the current command.  Each step measures,
    encodes, updates the estimate with the realized increment pair, then
    commands; it stops once ``T3 <= threshold * T3_0`` or after
    ``cfg.max_steps`` steps.

    Raises :class:`DivergenceDetected` when ``T3`` exceeds ten times its
    initial value.
    """
    target_flat = np.asarray(getattr(target, "flat", target), dtype=float)
    s_star = np.asarray(encoder(target), dtype=float)
    q = plant.q
    if estimate is None:
        probe = lambda r: encoder(plant.apply(r))
        estimate = init_estimate(probe, plant.command, init_magnitude, q, s_star.size,
                                 seed=seed, method=method).estimate
    else:
        estimate = estimate.with_method(method)
    limits = cfg.limit_vector(q)
    co = coefficients(cfg)

    trace = ServoTrace(estimate.method)
    c = plant.measure()
    s = np.asarray(encoder(c), dtype=float)
    t3_0 = float(np.linalg.norm(c.flat - target_flat))

    def record(t3, u, t2):
        trace.T3.append(t3)
        trace.feature_error.append(float(np.linalg.norm(s_star - s)))
        trace.commands.append(np.asarray(u, dtype=float))
        trace.T2.append(t2)
        trace.skip_count.append(estimate.skip_count)
        if on_step is not None:
            on_step(trace)

    record(t3_0, np.zeros(q), 0.0)
    if t3_0 <= cfg.threshold * t3_0:
        trace.converged = True
        trace.estimate = estimate
        return trace
    for _ in range(cfg.max_steps):
        u = saturate(compute_command(estimate, s_star - s, cfg, co), limits)
        r_prev = np.array(plant.command, dtype=float)
        c = plant.apply(r_prev + u)
        u_real = np.asarray(plant.command, dtype=float) - r_prev
        s_new = np.asarray(encoder(c), dtype=float)
        pair = DiffPair(s_new - s, u_real)
        t2 = criterion_T2(pair, estimate)
        if np.linalg.norm(u_real) >= 1e-12:
            estimate = update(estimate, pair)
        s = s_new
        t3 = float(np.linalg.norm(c.flat - target_flat))
        record(t3, u_real, t2)
        if t3 <= cfg.threshold * t3_0:
            trace.converged = True
            break
        if t3 > 10.0 * t3_0:
            trace.estimate = estimate
            raise DivergenceDetected(f"T3 grew to {t3:.4g} from {t3_0:.4g}", trace)
    trace.estimate = estimate
    return trace


# ---------------------------------------------------------------------------
# ideal-model stability recursion
# ---------------------------------------------------------------------------

def feedback_gain(J, cfg: ServoConfig) -> np.ndarray:
    """Matrix K with ``u = K e``."""
    J = _as_J(J)
    co = coefficients(cfg)
    M = co.a * J.T @ J + cfg.Q_matrix(J.shape[1])
    return (co.b - co.c) * np.linalg.solve(M, J.T)


def stability_check(J, cfg: ServoConfig, e0, n_steps: int) -> np.ndarray:
    """Error norms of the ideal recursion ``e_k - e_{k-1} = -J u_k``, ``u_k = K e_k``.

    The command is evaluated at the error it produces, so each step solves
    ``(I + J K) e_k = e_{k-1}``.  Returns ``||e_k||`` for ``k = 0..n_steps``.
    """
    J = _as_J(J)
    if np.linalg.matrix_rank(J) < J.shape[1]:
        raise ValueError("stability recursion needs a full-column-rank Jacobian")
    A = np.eye(J.shape[0]) + J @ feedback_gain(J, cfg)
    e = np.asarray(e0, dtype=float).ravel()
    norms = [float(np.linalg.norm(e))]
    for _ in range(n_steps):
        e = np.linalg.solve(A, e)
        norms.append(float(np.linalg.norm(e)))
    return np.array(norms)


def scalar_contraction(J: float, Q: float, cfg: ServoConfig) -> float:
    """Per-step factor ``(a + q~) / (a + q~ + b - c)`` with ``q~ = Q / J**2``."""
    co = coefficients(cfg)
    qt = Q / (J * J)
    return (co.a + qt) / (co.a + qt + co.b - co.c)
