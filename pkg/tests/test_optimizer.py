import numpy as np
import pytest

from surfel_track.errors import LinearSolveFailure
from surfel_track.optimizer import (
    FunctionProblem,
    LmConfig,
    NlsProblem,
    damped_system,
    fd_jacobian,
    hessian_spectrum,
    lm_solve,
)


def rosenbrock(scale=1.0):
    """Residuals (10 (y - x^2), 1 - x) with ``x`` stored as ``x * scale``."""
    def r(p):
        x, y = p[0] / scale, p[1]
        return np.array([10.0 * (y - x * x), 1.0 - x])

    def J(p):
        x = p[0] / scale
        return np.array([[-20.0 * x / scale, 10.0], [-1.0 / scale, 0.0]])

    return FunctionProblem(r, J)


def test_linear_problem_converges_fast():
    a = np.array([3.0, -1.0, 2.5])
    prob = FunctionProblem(lambda x: x - a, lambda x: np.eye(3))
    # without the early damping floor a linear problem is solved in one step
    x, rep = lm_solve(prob, np.zeros(3), LmConfig(lambda0=1e-12, early_phase_iters=0))
    assert np.allclose(x, a)
    assert rep.final_cost < 1e-20
    assert rep.accepted <= 3


def test_linear_problem_under_early_floor():
    # lambda >= 1 with Dw = diag(H) at most halves the residual per step
    a = np.array([3.0, -1.0, 2.5])
    x, rep = lm_solve(FunctionProblem(lambda x: x - a, lambda x: np.eye(3)), np.zeros(3))
    assert np.allclose(x, a, atol=1e-8)
    costs = rep.accepted_costs()
    assert costs[1] == pytest.approx(costs[0] / 4)


def test_rosenbrock_from_standard_start():
    x, rep = lm_solve(rosenbrock(), np.array([-1.2, 1.0]))
    assert np.abs(x - 1.0).max() < 1e-6
    assert rep.iterations <= 50
    assert np.all(np.diff(rep.accepted_costs()) < 0)


def test_rosenbrock_is_scale_invariant():
    base, _ = lm_solve(rosenbrock(), np.array([-1.2, 1.0]))
    scaled, rep = lm_solve(rosenbrock(1000.0), np.array([-1200.0, 1.0]))
    assert abs(rep.final_cost - rosenbrock().cost(base)) < 1e-8
    assert scaled[0] / 1000.0 == pytest.approx(1.0, abs=1e-6)


def test_preconditioner_conditions_badly_scaled_system():
    H = np.diag([1.0, 1e8])
    g = np.array([1.0, 1.0])
    M, _, _ = damped_system(H, g, 1.0, precondition=True)
    assert np.linalg.cond(M) <= 10
    M_raw, _, _ = damped_system(H, g, 1.0, precondition=False)
    assert np.linalg.cond(M_raw) >= 1e7


def test_preconditioned_matrix_has_unit_diagonal(rng):
    J = rng.normal(size=(20, 6)) * np.logspace(-3, 3, 6)
    H = J.T @ J
    for lam in (1e-6, 1.0, 1e6):
        M, _, _ = damped_system(H, J.T @ rng.normal(size=20), lam)
        assert np.allclose(np.diag(M), 1.0, atol=1e-12)


def test_large_lambda_gives_scaled_steepest_descent(rng):
    J = rng.normal(size=(15, 4)) * [1, 10, 100, 0.1]
    r = rng.normal(size=15)
    H, g = J.T @ J, J.T @ r
    M, b, Ds = damped_system(H, g, 1e12)
    dx = Ds * np.linalg.solve(M, b)
    sd = -g / np.diag(H)
    assert dx @ sd / (np.linalg.norm(dx) * np.linalg.norm(sd)) > 1 - 1e-9


def test_accepted_steps_never_increase_cost(rng):
    A = rng.normal(size=(30, 5))
    b = rng.normal(size=30)
    prob = FunctionProblem(lambda x: np.tanh(A @ x) - 0.5 * b)
    _, rep = lm_solve(prob, np.zeros(5), LmConfig(max_iters=40))
    assert np.all(np.diff(rep.accepted_costs()) <= 0)


def test_early_phase_keeps_lambda_at_least_one():
    _, rep = lm_solve(rosenbrock(), np.array([-1.2, 1.0]), LmConfig(lambda0=1e-3, early_phase_iters=5))
    accepted_before = 0
    for _, _, lam, _, acc in rep.history:
        if accepted_before < 5:
            assert lam >= 1.0
        accepted_before += acc


def test_report_csv_lists_every_iteration():
    _, rep = lm_solve(rosenbrock(), np.array([-1.2, 1.0]))
    lines = rep.to_csv().strip().splitlines()
    assert lines[0] == "iteration,cost,lambda,step_norm,accepted"
    assert len(lines) == len(rep.history) + 1


def test_singular_system_raises():
    class Bad(NlsProblem):
        def residuals(self, x):
            return np.array([1.0])

        def linearize(self, x):
            return self.residuals(x), np.array([[np.nan]])

    with pytest.raises(LinearSolveFailure):
        lm_solve(Bad(), np.zeros(1))


def test_config_validation():
    with pytest.raises(ValueError):
        LmConfig(lambda_down=2.0)
    with pytest.raises(ValueError):
        LmConfig(max_iters=0)


# --- finite differences and spectra ----------------------------------------------------

def test_fd_jacobian_linear_exact(rng):
    A = rng.normal(size=(7, 4))
    J = fd_jacobian(FunctionProblem(lambda x: A @ x), rng.normal(size=4), 1e-3)
    assert np.abs(J - A).max() < 1e-10


def test_fd_step_sweep_is_v_shaped():
    def r(x):
        return np.array([np.exp(3 * x[0]) * np.sin(x[1]), np.cos(2 * x[0] * x[1])])

    def J(x):
        a, b = x
        return np.array([[3 * np.exp(3 * a) * np.sin(b), np.exp(3 * a) * np.cos(b)],
                         [-2 * b * np.sin(2 * a * b), -2 * a * np.sin(2 * a * b)]])

    prob = FunctionProblem(r)
    errs = {h: [] for h in (1e-3, 1e-5, 1e-8)}
    for x in np.random.default_rng(0).uniform(0.5, 1.5, (20, 2)):
        for h in errs:
            errs[h].append(np.abs(fd_jacobian(prob, x, h) - J(x)).max())
    med = {h: np.median(v) for h, v in errs.items()}
    assert med[1e-5] < med[1e-3] and med[1e-5] < med[1e-8]


def test_spectrum_of_identity():
    assert np.allclose(hessian_spectrum(np.eye(5)), 1.0)


def test_spectrum_detects_duplicated_column(rng):
    J = rng.normal(size=(10, 3))
    J = np.column_stack([J, J[:, 1]])
    s = hessian_spectrum(J)
    assert s[-1] < 1e-12 and np.all(np.diff(s) <= 0)


def test_spectrum_vectors():
    J = np.diag([3.0, 1.0, 2.0])
    s, Vt = hessian_spectrum(J, return_vectors=True)
    assert np.allclose(s, [9, 4, 1])
    assert abs(Vt[-1] @ [0, 1, 0]) == pytest.approx(1.0)
