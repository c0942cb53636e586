"""Marquardt-Levenberg damped least-squares minimizer.

Problems supply residuals and a Jacobian; the optimizer solves
``(J^T J + lam * diag(J^T J)) delta = -J^T r`` and accepts a step only when
the cost ``0.5 * ||r||^2`` decreases.
"""

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MLConfig",
    "MLOutcome",
    "OptimizationError",
    "DomainError",
    "LeastSquaresProblem",
    "FunctionProblem",
    "minimize",
    "check_jacobian",
]


class OptimizationError(RuntimeError):
    """The iteration could not continue (non-finite values, failed solve)."""


class DomainError(Exception):
    """Raised by a problem when the residuals are undefined at ``p``.

    At a trial point this counts as a rejected step; at the start it is
    re-raised to the caller.
    """


@dataclass(frozen=True)
class MLConfig:
    lambda0: float = 1e-3
    lambda_up: float = 10.0
    lambda_down: float = 0.1
    max_iters: int = 50
    step_tol: float = 1e-7
    cost_tol: float = 1e-9
    lambda_max: float = 1e16

    def __post_init__(self):
        for name in ("lambda0", "lambda_up", "lambda_down", "step_tol", "cost_tol", "lambda_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"MLConfig.{name} must be positive")
        if not self.lambda_up > 1.0 > self.lambda_down:
            raise ValueError("MLConfig requires lambda_up > 1 > lambda_down")
        if int(self.max_iters) != self.max_iters or self.max_iters < 1:
            raise ValueError("MLConfig.max_iters must be a positive integer")


@dataclass
class MLOutcome:
    params: np.ndarray
    cost: float
    iterations: int
    converged: bool
    reason: str
    # parameters and costs at the start and after every accepted step
    trace: list = field(default_factory=list)
    cost_trace: list = field(default_factory=list)


class LeastSquaresProblem:
    """Evaluation contract for ``minimize``.

    Subclasses implement ``residuals(p)`` and ``jacobian(p)``.  ``jacobian``
    is always called right after ``residuals`` at the same ``p``, so
    implementations may cache shared work.
    """

    def residuals(self, p):
        raise NotImplementedError

    def jacobian(self, p):
        raise NotImplementedError


class FunctionProblem(LeastSquaresProblem):
    """Wrap plain callables ``fun(p) -> r`` and ``jac(p) -> J``."""

    def __init__(self, fun, jac):
        self.fun = fun
        self.jac = jac

    def residuals(self, p):
        return self.fun(p)

    def jacobian(self, p):
        return self.jac(p)


def _evaluate(problem, p, what):
    r = np.asarray(problem.residuals(p), dtype=np.float64).ravel()
    if not np.all(np.isfinite(r)):
        raise OptimizationError(f"non-finite residuals {what} at params {p.tolist()}")
    # Correctly rounded sum: near convergence cost differences sit a few ulps
    # above the rounding noise of a plain dot product.
    return r, 0.5 * math.fsum(r * r)


def _normal_equations(problem, p, r):
    J = np.asarray(problem.jacobian(p), dtype=np.float64)
    if J.ndim != 2 or J.shape != (r.size, p.size):
        raise OptimizationError(f"Jacobian shape {J.shape} does not match ({r.size}, {p.size})")
    if not np.all(np.isfinite(J)):
        raise OptimizationError(f"non-finite Jacobian at params {p.tolist()}")
    return J.T @ J, J.T @ r


def minimize(problem, p0, cfg=None):
    """Minimize ``0.5 * ||r(p)||^2`` starting at ``p0``."""
    cfg = cfg or MLConfig()
    p = np.array(p0, dtype=np.float64).ravel()
    r, cost = _evaluate(problem, p, "at start")
    if r.size < p.size:
        raise OptimizationError(f"{r.size} residuals for {p.size} parameters")
    trace, cost_trace = [p.copy()], [cost]
    if cost == 0.0:
        return MLOutcome(p, cost, 0, True, "cost_tol", trace, cost_trace)

    H, g = _normal_equations(problem, p, r)
    lam = cfg.lambda0
    reason = "max_iters"
    iterations = 0
    stalls = 0
    while iterations < cfg.max_iters:
        iterations += 1
        diag = np.diag(H).copy()
        # parameters with no influence get unit damping so the system stays solvable
        diag[diag <= 0] = 1.0
        try:
            L = np.linalg.cholesky(H + lam * np.diag(diag))
        except np.linalg.LinAlgError:
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                raise OptimizationError("normal equations not positive definite up to lambda_max")
            continue
        delta = -np.linalg.solve(L.T, np.linalg.solve(L, g))
        # A step below step_tol is still taken unless it hurts, then we stop.
        # Its cost change can sit below float resolution, hence ``<=``.
        small = np.max(np.abs(delta)) <= cfg.step_tol
        p_new = p + delta
        try:
            r_new, cost_new = _evaluate(problem, p_new, "during iteration")
        except DomainError:
            r_new, cost_new = None, np.inf
        if cost_new < cost or (small and cost_new <= cost):
            assert cost_new <= cost_trace[-1]
            rel_decrease = (cost - cost_new) / cost
            p, r, cost = p_new, r_new, cost_new
            trace.append(p.copy())
            cost_trace.append(cost)
            lam *= cfg.lambda_down
            if small:
                reason = "step_tol"
                break
            # One small decrease can just reflect heavy damping, so cost_tol
            # must hold on two accepted steps in a row.
            stalls = stalls + 1 if rel_decrease <= cfg.cost_tol else 0
            if cost == 0.0 or stalls >= 2:
                reason = "cost_tol"
                break
            H, g = _normal_equations(problem, p, r)
        elif small:
            reason = "step_tol"
            break
        else:
            lam *= cfg.lambda_up
            if lam > cfg.lambda_max:
                reason = "step_tol"
                break
    converged = reason != "max_iters"
    return MLOutcome(p, cost, iterations, converged, reason, trace, cost_trace)


def check_jacobian(problem, p, h=1e-6):
    """Central finite-difference Jacobian of ``problem`` at ``p``."""
    p = np.asarray(p, dtype=np.float64)
    cols = []
    for i in range(p.size):
        e = np.zeros_like(p)
        e[i] = h
        cols.append((np.asarray(problem.residuals(p + e)) - np.asarray(problem.residuals(p - e))) / (2 * h))
    return np.stack(cols, axis=1)
