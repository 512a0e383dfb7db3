"""Online deformation-Jacobian estimation with Broyden-family secant updates.

The estimate maps command increments ``u`` (length q) to feature increments
``y`` (length p).  R1, SR1, DFP and BFGS are square-matrix updates; for
``p != q`` the estimate is carried as an ``n x n`` matrix, ``n = max(p, q)``,
updated with zero-padded pairs, and the p x q Jacobian is its leading block.
The padded secant condition ``B [u; 0] = [y; 0]`` restricted to the leading
block is exactly ``J u = y``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import CollinearProbes, DimensionMismatch

METHODS = ("R1", "SR1", "DFP", "BFGS")
DENOM_TOL = 1e-10
MIN_STEP = 1e-12
COLLINEAR_COND = 1e6


@dataclass(frozen=True)
class DiffPair:
    y: np.ndarray
    u: np.ndarray

    @classmethod
    def from_samples(cls, s_prev, s_now, r_prev, r_now) -> "DiffPair":
        return cls(np.asarray(s_now, float) - np.asarray(s_prev, float),
                   np.asarray(r_now, float) - np.asarray(r_prev, float))


@dataclass(frozen=True)
class JacobianEstimate:
    lifted: np.ndarray
    p: int
    q: int
    method: str = "BFGS"
    skip_count: int = 0
    update_count: int = 0
    # "scaled" selects a DFP variant whose third term is norm-scaled
    dfp_variant: str = "classic"

    def __post_init__(self):
        method = self.method.upper()
        if method not in METHODS:
            raise ValueError(f"unknown update method {self.method!r}")
        object.__setattr__(self, "method", method)
        n = max(self.p, self.q)
        if self.lifted.shape != (n, n):
            raise DimensionMismatch(f"lifted estimate must be {n}x{n}, got {self.lifted.shape}")

    @property
    def J_hat(self) -> np.ndarray:
        return self.lifted[: self.p, : self.q]

    @property
    def n(self) -> int:
        return self.lifted.shape[0]

    @classmethod
    def from_matrix(cls, J, method="BFGS", dfp_variant="classic") -> "JacobianEstimate":
        J = np.asarray(J, dtype=float)
        if J.ndim != 2:
            raise DimensionMismatch("Jacobian must be a matrix")
        p, q = J.shape
        n = max(p, q)
        B = np.zeros((n, n))
        B[:p, :q] = J
        return cls(B, p, q, method, dfp_variant=dfp_variant)

    def with_method(self, method: str) -> "JacobianEstimate":
        return replace(self, method=method, skip_count=0, update_count=0)


def _pad(v, n):
    out = np.zeros(n)
    out[: v.size] = v
    return out


def _r1(B, u, y):
    den = u @ u
    if abs(den) < DENOM_TOL:
        return None
    return B + np.outer(y - B @ u, u) / den


def _sr1(B, u, y):
    r = y - B @ u
    den = r @ u
    if abs(den) < DENOM_TOL:
        return None
    return B + np.outer(r, r) / den


def _dfp(B, u, y, variant):
    yu = y @ u
    if abs(yu) < DENOM_TOL:
        return None
    r = y - B @ u
    if variant == "scaled":
        scale = np.linalg.norm(u) * np.linalg.norm(y)
        if scale < DENOM_TOL:
            return None
        return B + (np.outer(r, y) + np.outer(y, r)) / yu - (y @ y) / scale * np.outer(r, u)
    return B + (np.outer(r, y) + np.outer(y, r)) / yu - (r @ u) * np.outer(y, y) / yu ** 2


def _bfgs(B, u, y):
    Bu = B @ u
    uBu = u @ Bu
    yu = y @ u
    if abs(uBu) < DENOM_TOL or abs(yu) < DENOM_TOL:
        return None
    return B - np.outer(Bu, Bu) / uBu + np.outer(y, y) / yu


def update(est: JacobianEstimate, pair: DiffPair) -> JacobianEstimate:
    """One secant update; declined (and counted) when a denominator vanishes."""
    u = np.asarray(pair.u, dtype=float).ravel()
    y = np.asarray(pair.y, dtype=float).ravel()
    if u.size != est.q or y.size != est.p:
        raise DimensionMismatch(f"pair sizes (y={y.size}, u={u.size}) do not match "
                                f"estimate (p={est.p}, q={est.q})")
    if not np.linalg.norm(u) >= MIN_STEP:
        raise ValueError("command increment too small for a secant update")
    n = est.n
    ut, yt = _pad(u, n), _pad(y, n)
    B = est.lifted
    if est.method == "R1":
        new = _r1(B, ut, yt)
    elif est.method == "SR1":
        new = _sr1(B, ut, yt)
    elif est.method == "DFP":
        new = _dfp(B, ut, yt, est.dfp_variant)
    else:
        new = _bfgs(B, ut, yt)
    if new is None or not np.all(np.isfinite(new)):
        return replace(est, skip_count=est.skip_count + 1)
    return replace(est, lifted=new, update_count=est.update_count + 1)


def simplex_directions(q: int, rng=None) -> np.ndarray:
    """``q + 1`` unit vectors of a regular simplex in R^q, randomly rotated.

    The directions sum to zero and no two are parallel.
    """
    E = np.eye(q + 1) - 1.0 / (q + 1)
    # orthonormal basis of the sum-zero hyperplane
    U, _, _ = np.linalg.svd(E)
    D = E @ U[:, :q]
    D /= np.linalg.norm(D, axis=1, keepdims=True)
    if rng is not None:
        Qm, R = np.linalg.qr(rng.standard_normal((q, q)))
        D = D @ (Qm * np.sign(np.diag(R)))
    return D


@dataclass(frozen=True)
class InitResult:
    estimate: JacobianEstimate
    residual: float
    s0: np.ndarray
    commands: np.ndarray
    features: np.ndarray


def init_estimate(probe, r0, magnitude: float, q: int, p: int, seed: int = 0,
                  method: str = "BFGS", directions=None) -> InitResult:
    """Least-squares Jacobian from ``q + 1`` small exploratory moves around ``r0``.

    ``probe(r)`` returns the feature vector measured at command ``r``.  The
    probe is evaluated at ``r0`` and at ``r0 + magnitude * d_j`` for each
    exploration direction ``d_j`` (regular simplex by default), then back at
    ``r0`` so the caller's plant ends where it started.
    """
    if not magnitude > 0:
        raise ValueError("probe magnitude must be positive")
    r0 = np.asarray(r0, dtype=float).ravel()
    if r0.size != q:
        raise DimensionMismatch(f"r0 has {r0.size} entries, expected q={q}")
    if directions is None:
        directions = simplex_directions(q, np.random.default_rng(seed))
    D = np.atleast_2d(np.asarray(directions, dtype=float))
    if D.shape[1] != q:
        raise DimensionMismatch("probe directions must have q columns")
    U = magnitude * D
    sv = np.linalg.svd(U, compute_uv=False)
    if sv.size < q or sv[-1] == 0 or sv[0] / sv[-1] > COLLINEAR_COND:
        raise CollinearProbes("exploration increments do not span the command space")
    s0 = np.asarray(probe(r0), dtype=float).ravel()
    if s0.size != p:
        raise DimensionMismatch(f"probe returned {s0.size} features, expected p={p}")
    feats = [s0]
    cmds = [r0]
    Y = np.empty((U.shape[0], p))
    for j, du in enumerate(U):
        s = np.asarray(probe(r0 + du), dtype=float).ravel()
        Y[j] = s - s0
        feats.append(s)
        cmds.append(r0 + du)
    probe(r0)
    # Y = U J^T in least squares
    Jt, *_ = np.linalg.lstsq(U, Y, rcond=None)
    J = Jt.T
    residual = float(np.linalg.norm(U @ Jt - Y))
    est = JacobianEstimate.from_matrix(J, method)
    return InitResult(est, residual, s0, np.array(cmds), np.array(feats))


def central_difference_jacobian(probe, r0, step: float) -> np.ndarray:
    """Central finite-difference Jacobian of ``probe`` at ``r0``."""
    r0 = np.asarray(r0, dtype=float).ravel()
    cols = []
    for i in range(r0.size):
        e = np.zeros_like(r0)
        e[i] = step
        cols.append((np.asarray(probe(r0 + e)) - np.asarray(probe(r0 - e))) / (2 * step))
    probe(r0)
    return np.column_stack(cols)


def criterion_T1(s_k, s_hat_k) -> float:
    """Drift of the open-loop feature prediction, ``||s_k - s_hat_k||``."""
    s_k, s_hat_k = np.asarray(s_k, float), np.asarray(s_hat_k, float)
    if s_k.shape != s_hat_k.shape:
        raise DimensionMismatch("T1 operands differ in shape")
    return float(np.linalg.norm(s_k - s_hat_k))


def criterion_T2(pair: DiffPair, est: JacobianEstimate) -> float:
    """One-step prediction error ``||y_k - J_hat u_k||``."""
    y, u = np.asarray(pair.y, float).ravel(), np.asarray(pair.u, float).ravel()
    if y.size != est.p or u.size != est.q:
        raise DimensionMismatch("T2 pair does not match the estimate's dimensions")
    return float(np.linalg.norm(y - est.J_hat @ u))


def propagate(s_hat_prev, est: JacobianEstimate, u) -> np.ndarray:
    """Open-loop feature prediction ``s_hat_k = s_hat_{k-1} + J_hat u_k``."""
    return np.asarray(s_hat_prev, float) + est.J_hat @ np.asarray(u, float)
