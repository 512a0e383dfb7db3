import numpy as np
import pytest

from rodservo import servo as sv
from rodservo.errors import ConfigInvalid, DimensionMismatch, DivergenceDetected
from rodservo.jacobian import JacobianEstimate
from rodservo.rodsim import Centerline

from oracles import fd_gradient, numerical_minimizer, random_instance

CFG = sv.ServoConfig()


class LinearPlant:
    """Centerline = c0 + A r, so the flat centerline is its own feature."""

    def __init__(self, A, c0, r0):
        self.A, self.c0 = np.asarray(A, float), np.asarray(c0, float)
        self.command = np.asarray(r0, float)
        self.q = self.A.shape[1]

    def measure(self):
        return Centerline.from_flat(self.c0 + self.A @ self.command)

    def apply(self, r):
        self.command = np.asarray(r, float)
        return self.measure()


identity = lambda c: np.asarray(c.flat if hasattr(c, "flat") else c, float)


# --- coefficients and command ----------------------------------------------

def test_default_coefficients():
    co = sv.coefficients(CFG)
    assert co.a > 0 and co.b - co.c > 0
    assert co.a == pytest.approx(154.62, abs=0.01)
    assert co.b - co.c == pytest.approx(11.155, abs=0.001)


def test_sum_mode_coefficients_match_direct_sums():
    cfg = sv.ServoConfig(horizon_mode="sum")
    co = sv.coefficients(cfg)
    w = np.arange(11)
    assert co.a == pytest.approx(np.sum(w * w * 0.9 ** w))
    assert co.c == pytest.approx(np.sum(w * (0.9 * np.exp(-0.1)) ** w))


def test_scalar_command():
    u = sv.compute_command(np.array([[1.0]]), [1.0], sv.ServoConfig(Q=1.0))
    assert u[0] == pytest.approx(0.0717, abs=5e-5)


def test_zero_error_zero_command():
    J = np.random.default_rng(0).standard_normal((4, 6))
    assert np.array_equal(sv.compute_command(J, np.zeros(4), CFG), np.zeros(6))


@pytest.mark.parametrize("mode", ["integral", "sum"])
@pytest.mark.parametrize("seed", range(6))
def test_command_is_cost_minimizer(mode, seed):
    rng = np.random.default_rng(seed)
    J, e, lam = random_instance(rng, 4, (2, 6)[seed % 2], (0.01, 0.1, 1.0)[seed % 3])
    cfg = sv.ServoConfig(Q=lam, horizon_mode=mode)
    u = sv.compute_command(JacobianEstimate.from_matrix(J), e, cfg)
    ref = numerical_minimizer(J, e, cfg)
    assert np.linalg.norm(u - ref) <= 1e-6 * np.linalg.norm(ref)


@pytest.mark.parametrize("mode", ["integral", "sum"])
def test_gradient_matches_finite_differences(mode):
    rng = np.random.default_rng(1)
    cfg = sv.ServoConfig(horizon_mode=mode)
    J, e, _ = random_instance(rng, 4, 6, 0.1)
    u = rng.standard_normal(6)
    g = sv.horizon_gradient(u, J, e, cfg)
    num = fd_gradient(lambda x: sv.horizon_cost(x, J, e, cfg), u)
    assert np.linalg.norm(g - num) <= 1e-6 * np.linalg.norm(num)
    assert np.linalg.norm(sv.horizon_gradient(sv.compute_command(J, e, cfg), J, e, cfg)) <= 1e-9


def test_command_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        sv.compute_command(np.ones((4, 2)), np.ones(3), CFG)


@pytest.mark.parametrize("kwargs", [dict(alpha=1.0), dict(rho=0.0), dict(horizon=0),
                                    dict(Q=np.array([[1.0, 2.0], [0.0, 1.0]])),
                                    dict(Q=-1.0), dict(horizon_mode="exact")])
def test_config_validation(kwargs):
    with pytest.raises(ConfigInvalid):
        sv.ServoConfig(**kwargs)


# --- saturation ------------------------------------------------------------

def test_saturate():
    lim = sv.default_limits(3)
    assert lim.tolist() == [0.01, 0.01, 0.1]
    u = np.array([0.005, -0.002, 0.05])
    assert np.array_equal(sv.saturate(u, lim), u)
    assert sv.saturate([0.02, 0, 0], lim).tolist() == [0.01, 0, 0]
    assert np.array_equal(sv.saturate(-3 * lim, lim), -lim)
    with pytest.raises(ValueError):
        sv.saturate(u, [0.01, 0.0, 0.1])


# --- closed loop -----------------------------------------------------------

def linear_task(seed=0):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((6, 2))
    return A, rng.standard_normal(6)


def test_loop_target_equals_start():
    A, c0 = linear_task()
    plant = LinearPlant(A, c0, [0.3, 0.3])
    trace = sv.run_loop(plant, identity, "BFGS", CFG, plant.measure())
    assert trace.steps == 0 and trace.converged
    assert np.array_equal(trace.commands[0], np.zeros(2))


@pytest.mark.parametrize("method", ["R1", "SR1", "DFP", "BFGS"])
def test_loop_converges_on_linear_plant(method):
    A, c0 = linear_task(1)
    target = Centerline.from_flat(c0 + A @ np.array([0.45, 0.35]))
    plant = LinearPlant(A, c0, [0.3, 0.3])
    trace = sv.run_loop(plant, identity, method, CFG, target)
    assert trace.converged and trace.T3[-1] <= 0.05 * trace.T3[0]
    lim = sv.default_limits(2)
    assert all(np.all(np.abs(u) <= lim + 1e-15) for u in trace.commands)
    rows = list(trace.rows())
    assert len(rows) == trace.steps + 1 and rows[0][0] == 0


def test_loop_unreachable_target_plateaus():
    A, c0 = linear_task(2)
    plant = LinearPlant(A, c0, [0.3, 0.3])
    # a target off the plant's range can only be approached
    off = np.linalg.svd(A)[0][:, -1]
    target = c0 + A @ np.array([0.35, 0.32]) + 0.5 * off
    cfg = sv.ServoConfig(max_steps=60)
    trace = sv.run_loop(plant, identity, "BFGS", cfg, target)
    assert not trace.converged and trace.steps == 60
    assert trace.T3[-1] == pytest.approx(0.5, rel=1e-2)


class DriftingPlant(LinearPlant):
    """Adds a disturbance outside the command range that grows every step."""

    def __init__(self, A, c0, r0, drift):
        super().__init__(A, c0, r0)
        self.drift, self.k = drift, 0

    def apply(self, r):
        self.k += 1
        return super().apply(r)

    def measure(self):
        return Centerline.from_flat(self.c0 + self.A @ self.command + self.k * self.drift)


def test_loop_divergence_detected():
    A, c0 = linear_task(3)
    off = np.linalg.svd(A)[0][:, -1]
    plant = DriftingPlant(A, c0, [0.3, 0.3], 0.05 * off)
    target = Centerline.from_flat(c0 + A @ np.array([0.31, 0.3]))
    with pytest.raises(DivergenceDetected) as info:
        sv.run_loop(plant, identity, "BFGS", sv.ServoConfig(max_steps=500), target,
                    estimate=JacobianEstimate.from_matrix(A))
    assert info.value.trace.T3[-1] > 10 * info.value.trace.T3[0]


# --- stability recursion ---------------------------------------------------

def test_scalar_contraction_value():
    assert sv.scalar_contraction(1.0, 1.0, sv.ServoConfig(Q=1.0)) == pytest.approx(0.9331, abs=5e-5)


def test_scalar_recursion_matches_contraction():
    cfg = sv.ServoConfig(Q=0.3)
    norms = sv.stability_check(np.array([[2.0]]), cfg, [1.0], 30)
    rho = sv.scalar_contraction(2.0, 0.3, cfg)
    assert np.allclose(norms[1:] / norms[:-1], rho, rtol=0, atol=1e-12)


def test_stability_random_full_rank():
    rng = np.random.default_rng(0)
    J = rng.standard_normal((4, 4))
    norms = sv.stability_check(J, CFG, rng.standard_normal(4), 100)
    assert np.all(np.diff(norms) < 0)


def test_stability_zero_error_stays_zero():
    assert np.all(sv.stability_check(np.eye(2), CFG, np.zeros(2), 10) == 0.0)


def test_stability_rejects_rank_deficient():
    with pytest.raises(ValueError):
        sv.stability_check(np.ones((3, 2)), CFG, np.ones(3), 5)
