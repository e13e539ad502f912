"""Convex EV charging solver and schedule summaries.

The program minimizes the squared terminal deficit sum_j (x_j(T) - target_j)^2
over charging powers subject to availability windows, per-vehicle rate bounds,
a per-step aggregate capacity, linear SoC dynamics, and a no-overcharge cap on
the terminal state.

Solved by consensus operator splitting: one block projects each time column
onto {window mask, rate box, sum <= capacity}; the other applies the proximal
map of the separable terminal-deficit objective (restricted by the overcharge
cap, which only sees row sums); scaled dual variables tie the blocks together.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import Cancelled, ConvergenceFailure
from .problems import ChargingSchedule, EVProblem

RESIDUAL_TOL = 1e-6
MAX_ITERATIONS = 50_000
_RHO_ADJUST_EVERY = 100


def _project_column(y: np.ndarray, lo: np.ndarray, hi: np.ndarray,
                    cap: float) -> np.ndarray:
    """Project y onto {lo <= u <= hi, sum(u) <= cap} (all masked entries)."""
    clipped = np.clip(y, lo, hi)
    total = clipped.sum()
    if total <= cap:
        return clipped
    # Shift by a non-negative multiplier until the clamped sum meets the cap.
    nu_lo, nu_hi = 0.0, float(np.max(y - lo))
    for _ in range(100):
        nu = 0.5 * (nu_lo + nu_hi)
        if np.clip(y - nu, lo, hi).sum() > cap:
            nu_lo = nu
        else:
            nu_hi = nu
    return np.clip(y - nu_hi, lo, hi)


def solve_ev(
    problem: EVProblem,
    *,
    tol: float = RESIDUAL_TOL,
    max_iterations: int = MAX_ITERATIONS,
    rho: float = 1.0,
    should_stop: Optional[Callable[[], bool]] = None,
) -> ChargingSchedule:
    """Solve the charging program; the result always passes check_ev_feasible.

    Raises ConvergenceFailure (carrying both residuals) at the iteration cap and
    Cancelled when the cooperative should_stop callback returns True.
    """
    V, T = problem.n_vehicles, problem.timesteps
    mask = problem.window_mask()
    delta = problem.efficiency
    u_min = np.array([s.u_min for s in problem.sessions])
    u_max = np.array([s.u_max for s in problem.sessions])
    needed = np.array([s.needed for s in problem.sessions])
    cap = np.array(problem.capacity)

    # Per-column bounds: masked-out entries are pinned to zero.
    lo = np.where(mask, u_min[:, None], 0.0)
    hi = np.where(mask, u_max[:, None], 0.0)
    n_active = mask.sum(axis=1)  # window length per vehicle

    x = np.zeros((V, T))
    z = np.zeros((V, T))
    w = np.zeros((V, T))
    primal = dual = float("inf")

    for iteration in range(max_iterations):
        if should_stop is not None and should_stop():
            raise Cancelled(f"EV solve cancelled at iteration {iteration}")

        y = z - w
        for t in range(T):
            x[:, t] = _project_column(y[:, t], lo[:, t], hi[:, t], float(cap[t]))

        z_prev = z
        v = x + w
        z = np.zeros((V, T))
        for j in range(V):
            n_j = int(n_active[j])
            if n_j == 0:
                continue
            row_mask = mask[j]
            v_sum = float(v[j, row_mask].sum())
            rho_n = rho / n_j
            s = (2.0 * delta * needed[j] + rho_n * v_sum) / (2.0 * delta**2 + rho_n)
            s = min(s, needed[j] / delta)  # no-overcharge cap on the row sum
            z[j, row_mask] = v[j, row_mask] + (s - v_sum) / n_j

        w = w + x - z
        primal = float(np.max(np.abs(x - z)))
        dual = float(rho * np.max(np.abs(z - z_prev)))
        if primal < tol and dual < tol:
            break

        if (iteration + 1) % _RHO_ADJUST_EVERY == 0:
            if primal > 10.0 * dual:
                rho *= 2.0
                w /= 2.0
            elif dual > 10.0 * primal:
                rho /= 2.0
                w *= 2.0
    else:
        raise ConvergenceFailure(
            f"EV solver did not converge in {max_iterations} iterations",
            iterations=max_iterations, primal_residual=primal, dual_residual=dual,
        )

    power = _trim_overcharge(x, mask, lo, needed, delta)
    return ChargingSchedule.from_power(problem, power)


def _trim_overcharge(x: np.ndarray, mask: np.ndarray, lo: np.ndarray,
                     needed: np.ndarray, delta: float) -> np.ndarray:
    """Remove residual terminal overshoot by shaving rows toward their lower bounds.

    The column projection keeps every iterate inside the window/rate/capacity
    set but the overcharge cap is only enforced on the consensus block, so the
    final iterate may overshoot by up to the residual tolerance.
    """
    power = x.copy()
    power[~mask] = 0.0
    for j in range(power.shape[0]):
        excess = power[j].sum() - needed[j] / delta
        if excess <= 0:
            continue
        slack = np.where(mask[j], power[j] - lo[j], 0.0)
        slack = np.maximum(slack, 0.0)
        total = slack.sum()
        if total <= 0:
            continue
        power[j] -= slack * min(1.0, excess / total)
    return power


@dataclass(frozen=True)
class ScheduleSummary:
    """Per-vehicle delivery figures recomputed from the power matrix."""

    delivered: tuple[float, ...]        # kWh stored per vehicle
    terminal_soc: tuple[float, ...]     # kWh at the horizon
    deficits: tuple[float, ...]         # target - terminal, per vehicle
    objective: float                    # squared deficit
    objective_norm: float               # unsquared (2-norm) deficit
    peak_aggregate: float               # max over t of column sums (kW)
    capacity_bound_steps: tuple[int, ...]   # steps where capacity binds
    rate_bound_vehicles: tuple[int, ...]    # vehicles hitting u_max somewhere

    def to_text(self) -> str:
        lines = ["Charging schedule summary:"]
        for j, (d, soc, gap) in enumerate(
                zip(self.delivered, self.terminal_soc, self.deficits)):
            lines.append(
                f"  vehicle {j + 1}: delivered {d:.3f} kWh,"
                f" terminal SoC {soc:.3f} kWh, deficit {gap:.3f} kWh"
            )
        lines.append(f"  objective (squared deficit): {self.objective:.6f}")
        lines.append(f"  deficit norm: {self.objective_norm:.6f}")
        lines.append(f"  peak aggregate power: {self.peak_aggregate:.3f} kW")
        if self.capacity_bound_steps:
            steps = ", ".join(str(t) for t in self.capacity_bound_steps)
            lines.append(f"  capacity binds at steps: {steps}")
        if self.rate_bound_vehicles:
            vehicles = ", ".join(str(j + 1) for j in self.rate_bound_vehicles)
            lines.append(f"  rate limit binds for vehicles: {vehicles}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "delivered": list(self.delivered),
            "terminal_soc": list(self.terminal_soc),
            "deficits": list(self.deficits),
            "objective": self.objective,
            "objective_norm": self.objective_norm,
            "peak_aggregate": self.peak_aggregate,
            "capacity_bound_steps": list(self.capacity_bound_steps),
            "rate_bound_vehicles": list(self.rate_bound_vehicles),
        }


def summarize_schedule(problem: EVProblem, schedule: ChargingSchedule,
                       tol: float = 1e-6) -> ScheduleSummary:
    """Summarize a schedule; every number is recomputed from the power matrix."""
    power = np.asarray(schedule.power, dtype=float)
    delivered = problem.efficiency * power.sum(axis=1)
    initial = np.array([s.initial for s in problem.sessions])
    targets = np.array([s.target for s in problem.sessions])
    terminal = initial + delivered
    deficits = targets - terminal
    objective = float(np.sum(deficits**2))
    totals = power.sum(axis=0)
    cap = np.array(problem.capacity)
    capacity_bound = tuple(int(t) for t in np.nonzero(totals >= cap - tol)[0])
    u_max = np.array([s.u_max for s in problem.sessions])
    rate_bound = tuple(
        int(j) for j in range(problem.n_vehicles)
        if np.any(power[j] >= u_max[j] - tol)
    )
    return ScheduleSummary(
        delivered=tuple(float(d) for d in delivered),
        terminal_soc=tuple(float(x) for x in terminal),
        deficits=tuple(float(d) for d in deficits),
        objective=objective,
        objective_norm=float(np.sqrt(objective)),
        peak_aggregate=float(totals.max()) if totals.size else 0.0,
        capacity_bound_steps=capacity_bound,
        rate_bound_vehicles=rate_bound,
    )
