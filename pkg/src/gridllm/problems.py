"""Problem definitions shared by the solvers, the prompting loop, and the assistant.

Two problem families live here: single-period generator dispatch with quadratic
costs and a demand floor, and multi-vehicle EV charging against a coupling
capacity profile.  All types are immutable after construction; the operations
are pure functions.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError, EmptyProblem, InvalidInput

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULT_TOL = 1e-6


def _require_finite(name: str, value: float) -> float:
    value = float(value)
    if not math.isfinite(value):
        raise InvalidInput(f"{name} must be finite, got {value!r}")
    return value


def _as_vector(power: Sequence[float], expected: int, what: str) -> np.ndarray:
    arr = np.asarray(power, dtype=float)
    if arr.ndim != 1 or arr.shape[0] != expected:
        raise DimensionError(
            f"{what} must be a vector of length {expected}, got shape {arr.shape}"
        )
    return arr


# ---------------------------------------------------------------------------
# Generator dispatch
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorParams:
    """One thermal unit: quadratic cost a*P^2 + b*P + c on the box [p_min, p_max]."""

    a: float      # $/MW^2
    b: float      # $/MW
    c: float      # $
    p_min: float  # MW
    p_max: float  # MW

    def __post_init__(self) -> None:
        for name in ("a", "b", "c", "p_min", "p_max"):
            object.__setattr__(self, name, _require_finite(name, getattr(self, name)))
        if self.p_min > self.p_max:
            raise InvalidInput(f"p_min {self.p_min} exceeds p_max {self.p_max}")

    def cost(self, p: float) -> float:
        return self.a * p * p + self.b * p + self.c

    def marginal_cost(self, p: float) -> float:
        return 2.0 * self.a * p + self.b


@dataclass(frozen=True)
class DispatchProblem:
    """Dispatch a set of units so that total output covers the demand floor."""

    units: tuple[GeneratorParams, ...]
    demand: float  # MW

    def __post_init__(self) -> None:
        units = tuple(self.units)
        if not units:
            raise EmptyProblem("a dispatch problem needs at least one unit")
        object.__setattr__(self, "units", units)
        demand = _require_finite("demand", self.demand)
        if demand < 0:
            raise InvalidInput(f"demand must be non-negative, got {demand}")
        object.__setattr__(self, "demand", demand)

    @property
    def n_units(self) -> int:
        return len(self.units)

    @property
    def p_min(self) -> np.ndarray:
        return np.array([u.p_min for u in self.units])

    @property
    def p_max(self) -> np.ndarray:
        return np.array([u.p_max for u in self.units])

    def with_demand(self, demand: float) -> "DispatchProblem":
        return replace(self, demand=demand)


@dataclass(frozen=True)
class DispatchSolution:
    """A power vector together with its total generation cost."""

    power: tuple[float, ...]
    cost: float


def cost_of(problem: DispatchProblem, power: Sequence[float]) -> float:
    """Total generation cost sum_i a_i*P_i^2 + b_i*P_i + c_i."""
    arr = _as_vector(power, problem.n_units, "power")
    a = np.array([u.a for u in problem.units])
    b = np.array([u.b for u in problem.units])
    c = np.array([u.c for u in problem.units])
    return float(np.sum(a * arr * arr + b * arr + c))


# ---------------------------------------------------------------------------
# Feasibility verdicts
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Violation:
    """One violated constraint with its residual (how far past the limit)."""

    kind: str               # "p_min" | "p_max" | "demand" | "window" | ...
    where: tuple[int, ...]  # unit / (vehicle, t) indices, 0-based
    residual: float

    def __str__(self) -> str:
        loc = ", ".join(str(i + 1) for i in self.where)
        labels = {
            "p_min": f"unit {loc} below p_min",
            "p_max": f"unit {loc} above p_max",
            "demand": "demand shortfall",
            "window": f"vehicle {loc.split(',')[0]} charging outside its window",
            "rate_min": f"charging rate below u_min at ({loc})",
            "rate_max": f"charging rate above u_max at ({loc})",
            "capacity": f"aggregate power above capacity at t={loc}",
            "overcharge": f"vehicle {loc} charged past its target",
            "dynamics": f"stored SoC inconsistent with power at ({loc})",
        }
        base = labels.get(self.kind, f"{self.kind} at ({loc})")
        return f"{base} by {self.residual:.6g}"


@dataclass(frozen=True)
class Feasibility:
    """Verdict of a constraint check: ok, or the list of violations."""

    ok: bool
    violations: tuple[Violation, ...] = ()

    def __bool__(self) -> bool:
        return self.ok

    @staticmethod
    def from_violations(violations: Sequence[Violation]) -> "Feasibility":
        violations = tuple(violations)
        return Feasibility(ok=not violations, violations=violations)


def check_dispatch_feasible(
    problem: DispatchProblem,
    power: Sequence[float],
    tol: float = DEFAULT_TOL,
) -> Feasibility:
    """Check box limits and the demand floor, collecting every violation."""
    if tol < 0:
        raise InvalidInput(f"tol must be non-negative, got {tol}")
    arr = _as_vector(power, problem.n_units, "power")
    violations: list[Violation] = []
    for i, unit in enumerate(problem.units):
        if arr[i] < unit.p_min - tol:
            violations.append(Violation("p_min", (i,), float(unit.p_min - arr[i])))
        elif arr[i] > unit.p_max + tol:
            violations.append(Violation("p_max", (i,), float(arr[i] - unit.p_max)))
    shortfall = problem.demand - float(arr.sum())
    if shortfall > tol:
        violations.append(Violation("demand", (), shortfall))
    return Feasibility.from_violations(violations)


# ---------------------------------------------------------------------------
# EV charging
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EVSession:
    """One charging session: energy demand plus an availability window.

    The window is the half-open step range [arrival, depart).  A degenerate
    window (arrival == depart) is allowed and forces a zero charging row.
    """

    initial: float       # kWh at arrival
    target: float        # kWh wanted at departure
    u_max: float         # kW
    depart: int          # first step the vehicle is gone
    arrival: int = 0     # first step the vehicle is present
    u_min: float = 0.0   # kW, lower rate bound inside the window

    def __post_init__(self) -> None:
        for name in ("initial", "target", "u_max", "u_min"):
            object.__setattr__(self, name, _require_finite(name, getattr(self, name)))
        object.__setattr__(self, "arrival", int(self.arrival))
        object.__setattr__(self, "depart", int(self.depart))
        if self.initial < 0:
            raise InvalidInput(f"initial charge must be >= 0, got {self.initial}")
        if self.target < self.initial:
            raise InvalidInput(
                f"target {self.target} below initial charge {self.initial}"
            )
        if self.u_min < 0 or self.u_max < self.u_min:
            raise InvalidInput(
                f"need 0 <= u_min <= u_max, got [{self.u_min}, {self.u_max}]"
            )
        if self.arrival < 0 or self.depart < self.arrival:
            raise InvalidInput(
                f"need 0 <= arrival <= depart, got [{self.arrival}, {self.depart})"
            )

    @property
    def needed(self) -> float:
        """Energy still wanted at arrival (kWh)."""
        return self.target - self.initial


@dataclass(frozen=True)
class EVProblem:
    """Schedule charging power for every session under a shared capacity profile."""

    sessions: tuple[EVSession, ...]
    timesteps: int
    capacity: tuple[float, ...]   # kW per step
    efficiency: float = 1.0       # fraction of drawn power stored

    def __post_init__(self) -> None:
        sessions = tuple(self.sessions)
        if not sessions:
            raise EmptyProblem("an EV problem needs at least one session")
        object.__setattr__(self, "sessions", sessions)
        timesteps = int(self.timesteps)
        if timesteps < 1:
            raise InvalidInput(f"timesteps must be >= 1, got {timesteps}")
        object.__setattr__(self, "timesteps", timesteps)
        capacity = tuple(_require_finite("capacity", c) for c in self.capacity)
        if len(capacity) != timesteps:
            raise DimensionError(
                f"capacity must have {timesteps} entries, got {len(capacity)}"
            )
        if any(c < 0 for c in capacity):
            raise InvalidInput("capacity entries must be >= 0")
        object.__setattr__(self, "capacity", capacity)
        efficiency = _require_finite("efficiency", self.efficiency)
        if not 0 < efficiency <= 1:
            raise InvalidInput(f"efficiency must be in (0, 1], got {efficiency}")
        object.__setattr__(self, "efficiency", efficiency)
        for j, s in enumerate(sessions):
            if s.depart > timesteps:
                raise InvalidInput(
                    f"session {j}: depart {s.depart} exceeds horizon {timesteps}"
                )

    @property
    def n_vehicles(self) -> int:
        return len(self.sessions)

    def window_mask(self) -> np.ndarray:
        """Boolean (vehicles x T) mask of steps where charging is allowed."""
        t = np.arange(self.timesteps)
        mask = np.zeros((self.n_vehicles, self.timesteps), dtype=bool)
        for j, s in enumerate(self.sessions):
            mask[j] = (t >= s.arrival) & (t < s.depart)
        return mask


def _locked(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class ChargingSchedule:
    """Charging powers (vehicles x T), resulting SoC (vehicles x T+1), and objective.

    The objective is the squared terminal deficit sum_j (soc[j, T] - target_j)^2.
    """

    power: np.ndarray
    soc: np.ndarray
    objective: float

    @property
    def objective_norm(self) -> float:
        """Unsquared variant: the 2-norm of the terminal deficit vector."""
        return math.sqrt(max(self.objective, 0.0))

    @classmethod
    def from_power(cls, problem: EVProblem, power: Sequence[Sequence[float]]
                   ) -> "ChargingSchedule":
        """Build SoC trajectories and the objective from a power matrix."""
        arr = np.asarray(power, dtype=float)
        if arr.shape != (problem.n_vehicles, problem.timesteps):
            raise DimensionError(
                f"power must have shape {(problem.n_vehicles, problem.timesteps)},"
                f" got {arr.shape}"
            )
        if not np.all(np.isfinite(arr)):
            raise InvalidInput("power matrix contains non-finite entries")
        initial = np.array([s.initial for s in problem.sessions])
        soc = np.empty((problem.n_vehicles, problem.timesteps + 1))
        soc[:, 0] = initial
        soc[:, 1:] = initial[:, None] + problem.efficiency * np.cumsum(arr, axis=1)
        targets = np.array([s.target for s in problem.sessions])
        objective = float(np.sum((soc[:, -1] - targets) ** 2))
        return cls(power=_locked(arr), soc=_locked(soc), objective=objective)


def check_ev_feasible(
    problem: EVProblem,
    schedule: Union[ChargingSchedule, Sequence[Sequence[float]]],
    tol: float = DEFAULT_TOL,
) -> Feasibility:
    """Check window, rate, capacity, dynamics, and no-overcharge constraints.

    Accepts either a bare power matrix or a ChargingSchedule; for the latter the
    stored SoC is also checked against the dynamics recomputed from power.
    """
    if tol < 0:
        raise InvalidInput(f"tol must be non-negative, got {tol}")
    stored_soc = None
    if isinstance(schedule, ChargingSchedule):
        stored_soc = schedule.soc
        power = np.asarray(schedule.power, dtype=float)
    else:
        power = np.asarray(schedule, dtype=float)
    shape = (problem.n_vehicles, problem.timesteps)
    if power.shape != shape:
        raise DimensionError(f"schedule must have shape {shape}, got {power.shape}")

    violations: list[Violation] = []
    mask = problem.window_mask()
    for j, s in enumerate(problem.sessions):
        for t in range(problem.timesteps):
            u = power[j, t]
            if not mask[j, t]:
                if abs(u) > tol:
                    violations.append(Violation("window", (j, t), abs(float(u))))
            else:
                if u < s.u_min - tol:
                    violations.append(Violation("rate_min", (j, t), float(s.u_min - u)))
                elif u > s.u_max + tol:
                    violations.append(Violation("rate_max", (j, t), float(u - s.u_max)))

    totals = power.sum(axis=0)
    for t, cap in enumerate(problem.capacity):
        if totals[t] > cap + tol:
            violations.append(Violation("capacity", (t,), float(totals[t] - cap)))

    initial = np.array([s.initial for s in problem.sessions])
    soc = initial[:, None] + problem.efficiency * np.concatenate(
        [np.zeros((problem.n_vehicles, 1)), np.cumsum(power, axis=1)], axis=1
    )
    for j, s in enumerate(problem.sessions):
        over = soc[j, -1] - s.target
        if over > tol:
            violations.append(Violation("overcharge", (j,), float(over)))

    if stored_soc is not None:
        if stored_soc.shape != (problem.n_vehicles, problem.timesteps + 1):
            raise DimensionError(
                f"soc must have shape {(problem.n_vehicles, problem.timesteps + 1)},"
                f" got {stored_soc.shape}"
            )
        drift = np.abs(stored_soc - soc)
        worst = np.unravel_index(int(np.argmax(drift)), drift.shape)
        if drift[worst] > max(tol, 1e-9):
            violations.append(
                Violation("dynamics", (int(worst[0]), int(worst[1])), float(drift[worst]))
            )

    return Feasibility.from_violations(violations)


# ---------------------------------------------------------------------------
# Problem files
# ---------------------------------------------------------------------------
#
# Problems live in TOML files, one problem per file, with a `kind` key of
# "dispatch" or "ev" and fields named exactly like the types above.  EV files
# may give `capacity` as a scalar (uniform profile) or a length-T list.

def load_problem(path: Union[str, Path]) -> Union[DispatchProblem, EVProblem]:
    """Load a dispatch or EV problem from a TOML problem file."""
    raw = Path(path).read_bytes()
    try:
        doc = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise InvalidInput(f"cannot parse problem file {path}: {exc}") from exc
    kind = doc.get("kind")
    if kind == "dispatch":
        return dispatch_problem_from_dict(doc)
    if kind == "ev":
        return ev_problem_from_dict(doc)
    raise InvalidInput(f"problem file {path} has unknown kind {kind!r}")


def dispatch_problem_from_dict(doc: dict) -> DispatchProblem:
    try:
        units = tuple(
            GeneratorParams(a=u["a"], b=u["b"], c=u["c"],
                            p_min=u["p_min"], p_max=u["p_max"])
            for u in doc["units"]
        )
        return DispatchProblem(units=units, demand=doc["demand"])
    except (KeyError, TypeError) as exc:
        raise InvalidInput(f"malformed dispatch problem: missing {exc}") from exc


def ev_problem_from_dict(doc: dict) -> EVProblem:
    try:
        timesteps = int(doc["timesteps"])
        capacity = doc["capacity"]
        if isinstance(capacity, (int, float)):
            capacity = [float(capacity)] * timesteps
        sessions = tuple(
            EVSession(
                initial=s["initial"],
                target=s["target"],
                u_max=s["u_max"],
                depart=s["depart"],
                arrival=s.get("arrival", 0),
                u_min=s.get("u_min", 0.0),
            )
            for s in doc["sessions"]
        )
        return EVProblem(
            sessions=sessions,
            timesteps=timesteps,
            capacity=tuple(capacity),
            efficiency=doc.get("efficiency", 1.0),
        )
    except (KeyError, TypeError) as exc:
        raise InvalidInput(f"malformed EV problem: missing {exc}") from exc


def dispatch_problem_to_dict(problem: DispatchProblem) -> dict:
    return {
        "kind": "dispatch",
        "demand": problem.demand,
        "units": [
            {"a": u.a, "b": u.b, "c": u.c, "p_min": u.p_min, "p_max": u.p_max}
            for u in problem.units
        ],
    }


def ev_problem_to_dict(problem: EVProblem) -> dict:
    return {
        "kind": "ev",
        "timesteps": problem.timesteps,
        "capacity": list(problem.capacity),
        "efficiency": problem.efficiency,
        "sessions": [
            {
                "initial": s.initial, "target": s.target, "u_max": s.u_max,
                "u_min": s.u_min, "arrival": s.arrival, "depart": s.depart,
            }
            for s in problem.sessions
        ],
    }
