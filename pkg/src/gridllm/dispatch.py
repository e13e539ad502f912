"""Exact single-period dispatch via lambda bisection on the KKT conditions.

With strictly convex quadratic costs, the optimal output of every unit is the
box clamp of (lambda - b_i) / (2 a_i) for a common marginal price lambda.  The
aggregate supply curve is piecewise-linear and non-decreasing in lambda, so
bisection pins the demand-balancing price exactly to tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import Infeasible, UnsupportedCost
from .problems import DispatchProblem, DispatchSolution, cost_of

BALANCE_RTOL = 1e-8
MAX_BISECTIONS = 200


@dataclass(frozen=True)
class DispatchSolverReport:
    """Solver output: the solution, the marginal price, and diagnostics."""

    solution: DispatchSolution
    lam: float               # marginal cost of demand at the optimum ($/MW)
    iterations: int
    balance_residual: float  # |sum(P) - demand| when the demand floor binds

    def to_dict(self) -> dict:
        return {
            "solution": {
                "power": [round(p, 6) for p in self.solution.power],
                "cost": round(self.solution.cost, 6),
            },
            "lambda": round(self.lam, 6),
            "iterations": self.iterations,
            "balance_residual": self.balance_residual,
        }


def solve_dispatch(problem: DispatchProblem) -> DispatchSolverReport:
    """Return the unique global minimizer of the dispatch problem.

    Raises Infeasible when the boxes cannot cover demand and UnsupportedCost
    when any quadratic coefficient is non-positive.
    """
    a = np.array([u.a for u in problem.units])
    b = np.array([u.b for u in problem.units])
    p_min = problem.p_min
    p_max = problem.p_max
    demand = problem.demand

    if np.any(a <= 0):
        bad = int(np.argmin(a))
        raise UnsupportedCost(
            f"unit {bad + 1} has a={a[bad]}; the exact solver needs a > 0"
        )
    if p_max.sum() < demand:
        raise Infeasible(
            f"total capacity {p_max.sum():.6g} MW cannot cover demand {demand:.6g} MW"
        )

    tol = BALANCE_RTOL * max(1.0, demand)

    # Unconstrained per-unit vertex; if it already covers demand the floor is slack.
    vertex = np.clip(-b / (2.0 * a), p_min, p_max)
    if vertex.sum() >= demand - tol:
        power = vertex
        return _report(problem, power, lam=0.0, iterations=0,
                       balance_residual=0.0)

    def supply(lam: float) -> np.ndarray:
        return np.clip((lam - b) / (2.0 * a), p_min, p_max)

    lo = float(np.min(2.0 * a * p_min + b))
    hi = float(np.max(2.0 * a * p_max + b))
    if p_max.sum() - demand <= tol:
        # Demand saturates the fleet; the covering endpoint is the answer.
        return _report(problem, p_max, lam=hi, iterations=0,
                       balance_residual=abs(float(p_max.sum()) - demand))
    iterations = 0
    power = supply(hi)
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (lo + hi)
        iterations += 1
        total = supply(mid).sum()
        if abs(total - demand) <= tol:
            lo = hi = mid
            break
        if total < demand:
            lo = mid
        else:
            hi = mid
    # hi always sits on the covering side of the curve.
    lam = hi
    power = supply(lam)
    residual = abs(float(power.sum()) - demand)
    return _report(problem, power, lam=lam, iterations=iterations,
                   balance_residual=residual)


def solve_dispatch_for_demand(problem: DispatchProblem, demand: float
                              ) -> DispatchSolverReport:
    """Solve the same units against a replacement demand."""
    return solve_dispatch(problem.with_demand(demand))


def _report(problem: DispatchProblem, power: np.ndarray, *, lam: float,
            iterations: int, balance_residual: float) -> DispatchSolverReport:
    solution = DispatchSolution(
        power=tuple(float(p) for p in power),
        cost=cost_of(problem, power),
    )
    return DispatchSolverReport(
        solution=solution,
        lam=lam,
        iterations=iterations,
        balance_residual=balance_residual,
    )
