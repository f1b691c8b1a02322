"""Levenberg-Marquardt with ellipsoidal damping and diagonal preconditioning.

Each iteration solves::

    Ds (H + lam * Dw) Ds dx* = -Ds J^T r,     dx = Ds dx*

with ``H = J^T J``, ``Dw = diag(H)`` and ``Ds = diag(H + lam * Dw)^(-1/2)`` so
the preconditioned system has a unit diagonal.  ``lam`` is kept at or above
``min_lambda_early`` for the first accepted steps, then left free.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import LinearSolveFailure

DW_FLOOR = 1e-12


class NlsProblem:
    """Residual/Jacobian provider.

    Subclasses implement :meth:`residuals` and :meth:`linearize`; manifold
    parameters override :meth:`apply_increment`.  :meth:`solve_normal` may be
    overridden to exploit structure in the damped system.
    """

    def residuals(self, x) -> np.ndarray:
        raise NotImplementedError

    def linearize(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(r, J)`` at ``x``."""
        raise NotImplementedError

    def apply_increment(self, x, dx):
        return np.asarray(x, dtype=float) + dx

    def normal_equations(self, x):
        """``(cost, H, g)`` with ``cost = r.r``, ``H = J^T J``, ``g = J^T r``."""
        r, J = self.linearize(x)
        return float(r @ r), J.T @ J, J.T @ r

    def cost(self, x) -> float:
        r = self.residuals(x)
        return float(r @ r)

    def solve_normal(self, M, b) -> np.ndarray:
        c = scipy.linalg.cho_factor(M, check_finite=False)
        return scipy.linalg.cho_solve(c, b, check_finite=False)


class FunctionProblem(NlsProblem):
    """Wrap plain callables ``r(x)`` and optionally ``J(x)`` (else finite differences)."""

    def __init__(self, residual_fn, jacobian_fn=None, fd_step=1e-7):
        self.residual_fn = residual_fn
        self.jacobian_fn = jacobian_fn
        self.fd_step = fd_step

    def residuals(self, x):
        return np.atleast_1d(np.asarray(self.residual_fn(np.asarray(x, dtype=float)), dtype=float))

    def linearize(self, x):
        r = self.residuals(x)
        if self.jacobian_fn is not None:
            J = np.atleast_2d(np.asarray(self.jacobian_fn(np.asarray(x, dtype=float)), dtype=float))
        else:
            J = fd_jacobian(self, x, self.fd_step)
        return r, J


@dataclass
class LmConfig:
    lambda0: float = 1.0
    lambda_up: float = 2.0
    lambda_down: float = 0.5
    min_lambda_early: float = 1.0
    early_phase_iters: int = 5
    max_iters: int = 50
    gradient_tol: float = 1e-8
    step_tol: float = 1e-8
    cost_tol: float = 1e-10
    max_solve_retries: int = 5
    precondition: bool = True

    def __post_init__(self):
        for name in ("lambda_up", "max_iters"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.lambda_down < 1 < self.lambda_up:
            raise ValueError("need 0 < lambda_down < 1 < lambda_up")


@dataclass
class SolveReport:
    iterations: int = 0
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    accepted: int = 0
    rejected: int = 0
    termination: str = ""
    history: list = field(default_factory=list)  # (iteration, cost, lambda, step_norm, accepted)

    def accepted_costs(self) -> list:
        return [self.initial_cost] + [h[1] for h in self.history if h[4]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "cost", "lambda", "step_norm", "accepted"])
        for it, cost, lam, step, acc in self.history:
            w.writerow([it, repr(cost), repr(lam), repr(step), int(acc)])
        return buf.getvalue()


def damped_system(H, g, lam, precondition=True):
    """Build the (optionally preconditioned) damped normal system.

    Returns ``(M, b, Ds)``; the increment is ``Ds @ solve(M, b)``.
    """
    Dw = np.maximum(np.diag(H), DW_FLOOR)
    A = H + lam * np.diag(Dw)
    if precondition:
        Ds = 1.0 / np.sqrt(np.diag(A))
    else:
        Ds = np.ones_like(Dw)
    M = Ds[:, None] * A * Ds[None, :]
    return M, -Ds * g, Ds


def lm_solve(problem: NlsProblem, x0, config: LmConfig | None = None):
    """Minimize ``||r(x)||^2``; returns ``(x, SolveReport)``."""
    cfg = config or LmConfig()
    x = x0
    cost, H, g = problem.normal_equations(x)
    report = SolveReport(initial_cost=cost)
    lam = cfg.lambda0
    it = 0
    reason = "max_iters"
    while it < cfg.max_iters:
        if not np.isfinite(cost):
            reason = "non_finite"
            break
        if np.max(np.abs(g), initial=0.0) < cfg.gradient_tol:
            reason = "gradient_tol"
            break
        if report.accepted < cfg.early_phase_iters:
            lam = max(lam, cfg.min_lambda_early)
        dx = None
        for _ in range(cfg.max_solve_retries + 1):
            M, b, Ds = damped_system(H, g, lam, cfg.precondition)
            try:
                dx = Ds * problem.solve_normal(M, b)
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                dx = None
            if dx is not None and np.all(np.isfinite(dx)):
                break
            dx = None
            lam *= 10.0
        if dx is None:
            reason = "linear_solve_failure"
            report.termination = reason
            raise LinearSolveFailure("damped normal equations remained singular")
        it += 1
        step = float(np.linalg.norm(dx))
        predicted = -(2.0 * g @ dx + dx @ H @ dx)
        if predicted <= cfg.cost_tol * cost:
            # the local model promises nothing worth taking
            report.history.append((it, cost, lam, step, False))
            report.rejected += 1
            reason = "cost_tol"
            break
        x_new = problem.apply_increment(x, dx)
        new_cost = problem.cost(x_new)
        if np.isfinite(new_cost) and new_cost < cost:
            decrease = cost - new_cost
            x = x_new
            report.accepted += 1
            report.history.append((it, new_cost, lam, step, True))
            lam = lam * cfg.lambda_down
            prev = cost
            cost, H, g = problem.normal_equations(x)
            if step < cfg.step_tol * (1.0 + _norm(x)):
                reason = "step_tol"
                break
            if decrease <= cfg.cost_tol * prev:
                reason = "cost_tol"
                break
        else:
            report.rejected += 1
            report.history.append((it, float(new_cost), lam, step, False))
            lam = lam * cfg.lambda_up
            if step < cfg.step_tol * (1.0 + _norm(x)):
                reason = "step_tol"
                break
    report.iterations = it
    report.final_cost = cost
    report.termination = reason
    return x, report


def _norm(x) -> float:
    try:
        return float(np.linalg.norm(np.asarray(x, dtype=float)))
    except (TypeError, ValueError):
        return 0.0


def fd_jacobian(problem: NlsProblem, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian through ``apply_increment``."""
    r0 = problem.residuals(x)
    n = _n_params(problem, x)
    J = np.empty((r0.size, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        J[:, i] = (problem.residuals(problem.apply_increment(x, e))
                   - problem.residuals(problem.apply_increment(x, -e))) / (2.0 * h)
    return J


def _n_params(problem, x) -> int:
    n = getattr(problem, "n_params", None)
    if n is not None:
        return int(n)
    return int(np.asarray(x, dtype=float).size)


def hessian_spectrum(J, return_vectors: bool = False):
    """Singular values of ``J^T J`` in descending order (and right vectors)."""
    J = np.asarray(J, dtype=float)
    H = J.T @ J
    if return_vectors:
        _, s, Vt = np.linalg.svd(H)
        return s, Vt
    return np.linalg.svd(H, compute_uv=False)
