"""Optimization-by-prompting loop for the dispatch problem.

Each step renders the lowest-cost solution-cost pairs from a buffer into a
fixed prompt template, queries the model once, parses the single-line reply,
and keeps the proposal only if it is feasible and not a near-duplicate.
Rejected responses never enter the buffer and never trigger a retry: one step
is exactly one model call.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import Infeasible, InvalidInput, ParseFailure, TransportError
from .gateway import ChatMessage, ChatProvider, ChatRequest, ScriptedProvider
from .problems import DispatchProblem, check_dispatch_feasible, cost_of


# ---------------------------------------------------------------------------
# Number rendering (up to 6 decimals, trailing zeros trimmed)
# ---------------------------------------------------------------------------

def format_bound(x: float) -> str:
    """Bounds and demand print as bare integers when integral: 28, 400."""
    if x == int(x):
        return str(int(x))
    return format_number(x)


def format_number(x: float) -> str:
    """Solution values and costs keep one decimal when integral: 120.0."""
    if x == int(x):
        return f"{x:.1f}"
    text = f"{x:.6f}".rstrip("0")
    if text.endswith("."):
        text += "0"
    return text


def format_solution(values: Sequence[float]) -> str:
    names = ", ".join(f"p{i + 1}" for i in range(len(values)))
    rendered = ", ".join(format_number(float(v)) for v in values)
    return f"{names} = {rendered}"


# ---------------------------------------------------------------------------
# Solution-cost buffer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BufferEntry:
    solution: tuple[float, ...]
    cost: float
    order: int  # insertion index, used to break cost ties deterministically


class SolutionCostBuffer:
    """Feasible solution-cost pairs with near-duplicate suppression.

    Every stored solution satisfies the problem constraints at tol 1e-6; no two
    entries sit within L-infinity distance dedup_epsilon of each other; when the
    buffer overflows its capacity the worst-cost entry is dropped.
    """

    def __init__(self, problem: DispatchProblem, capacity: int = 256,
                 dedup_epsilon: float = 1e-3):
        if capacity < 1:
            raise InvalidInput(f"capacity must be >= 1, got {capacity}")
        self.problem = problem
        self.capacity = capacity
        self.dedup_epsilon = dedup_epsilon
        self.entries: list[BufferEntry] = []
        self._next_order = 0

    def __len__(self) -> int:
        return len(self.entries)

    def is_duplicate(self, solution: Sequence[float]) -> bool:
        arr = np.asarray(solution, dtype=float)
        for entry in self.entries:
            if np.max(np.abs(arr - np.asarray(entry.solution))) <= self.dedup_epsilon:
                return True
        return False

    def add(self, solution: Sequence[float], cost: Optional[float] = None) -> bool:
        """Insert a feasible pair; returns False when it is a near-duplicate."""
        verdict = check_dispatch_feasible(self.problem, solution)
        if not verdict:
            raise InvalidInput(
                "buffer only stores feasible solutions: "
                + "; ".join(str(v) for v in verdict.violations)
            )
        if self.is_duplicate(solution):
            return False
        if cost is None:
            cost = cost_of(self.problem, solution)
        entry = BufferEntry(tuple(float(v) for v in solution), float(cost),
                            self._next_order)
        self._next_order += 1
        self.entries.append(entry)
        if len(self.entries) > self.capacity:
            worst = max(self.entries, key=lambda e: (e.cost, e.order))
            self.entries.remove(worst)
        return True

    def best(self) -> BufferEntry:
        if not self.entries:
            raise InvalidInput("buffer is empty")
        return min(self.entries, key=lambda e: (e.cost, e.order))

    def top(self, k: int) -> list[BufferEntry]:
        """The k lowest-cost entries, ordered worst-first / best-last."""
        selected = sorted(self.entries, key=lambda e: (e.cost, e.order))[:k]
        return sorted(selected, key=lambda e: (-e.cost, e.order))

    def pairs(self) -> list[tuple[tuple[float, ...], float]]:
        return [(e.solution, e.cost) for e in self.entries]


def load_seed_pairs(path: Union[str, Path]) -> list[tuple[list[float], float]]:
    """Read verbatim (solution, cost) pairs from a JSON seed file."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return [(list(map(float, p["solution"])), float(p["cost"]))
            for p in doc["pairs"]]


# ---------------------------------------------------------------------------
# Configuration and records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OproConfig:
    steps: int = 300        # model queries per run
    top_k: int = 5          # pairs shown per prompt
    seed_count: int = 2     # initial sampled pairs
    temperature: float = 1.0
    dedup_epsilon: float = 1e-3
    capacity: int = 256

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise InvalidInput(f"steps must be >= 1, got {self.steps}")
        if self.top_k < 1:
            raise InvalidInput(f"top_k must be >= 1, got {self.top_k}")
        if self.seed_count < 1:
            raise InvalidInput(f"seed_count must be >= 1, got {self.seed_count}")


@dataclass(frozen=True)
class OproStep:
    index: int
    prompt: str
    response: Optional[str]
    parsed: Optional[tuple[float, ...]]
    feasible: Optional[bool]     # None when parsing (or transport) failed
    violations: tuple[str, ...]
    accepted: bool
    reason: str                  # accepted | parse_failure | infeasible | ...
    cost: Optional[float]
    best_cost: float             # best-so-far after this step

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "prompt": self.prompt,
            "response": self.response,
            "parsed": list(self.parsed) if self.parsed is not None else None,
            "feasible": self.feasible,
            "violations": list(self.violations),
            "accepted": self.accepted,
            "reason": self.reason,
            "cost": self.cost,
            "best_cost": self.best_cost,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "OproStep":
        return cls(
            index=obj["index"], prompt=obj["prompt"], response=obj["response"],
            parsed=tuple(obj["parsed"]) if obj["parsed"] is not None else None,
            feasible=obj["feasible"], violations=tuple(obj["violations"]),
            accepted=obj["accepted"], reason=obj["reason"], cost=obj["cost"],
            best_cost=obj["best_cost"],
        )


@dataclass
class OproRunRecord:
    """Append-only log of one optimization run."""

    config: OproConfig
    seed_pairs: list[tuple[tuple[float, ...], float]]
    steps: list[OproStep] = field(default_factory=list)
    final_pairs: list[tuple[tuple[float, ...], float]] = field(default_factory=list)
    best_solution: Optional[tuple[float, ...]] = None
    best_cost: float = float("inf")
    aborted: Optional[str] = None

    @property
    def accepted_steps(self) -> list[OproStep]:
        return [s for s in self.steps if s.accepted]

    def to_dict(self) -> dict:
        return {
            "config": {
                "steps": self.config.steps, "top_k": self.config.top_k,
                "seed_count": self.config.seed_count,
                "temperature": self.config.temperature,
                "dedup_epsilon": self.config.dedup_epsilon,
                "capacity": self.config.capacity,
            },
            "seed_pairs": [{"solution": list(s), "cost": c}
                           for s, c in self.seed_pairs],
            "steps": [s.to_dict() for s in self.steps],
            "final_pairs": [{"solution": list(s), "cost": c}
                            for s, c in self.final_pairs],
            "best_solution": (list(self.best_solution)
                              if self.best_solution is not None else None),
            "best_cost": self.best_cost,
            "aborted": self.aborted,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "OproRunRecord":
        cfg = OproConfig(**obj["config"])
        record = cls(
            config=cfg,
            seed_pairs=[(tuple(p["solution"]), p["cost"])
                        for p in obj["seed_pairs"]],
            steps=[OproStep.from_dict(s) for s in obj["steps"]],
            final_pairs=[(tuple(p["solution"]), p["cost"])
                         for p in obj["final_pairs"]],
            best_solution=(tuple(obj["best_solution"])
                           if obj["best_solution"] is not None else None),
            best_cost=obj["best_cost"],
            aborted=obj["aborted"],
        )
        return record


# ---------------------------------------------------------------------------
# Prompt construction and response parsing
# ---------------------------------------------------------------------------

_EXAMPLE_VALUES = ("123.11", "80.2", "99.67", "101.52", "37")


def _names_prose(dim: int) -> str:
    names = [f"p{i + 1}" for i in range(dim)]
    if dim == 1:
        return names[0]
    return ", ".join(names[:-1]) + ", and " + names[-1]


def build_prompt(problem: DispatchProblem, buffer: SolutionCostBuffer,
                 cfg: OproConfig) -> str:
    """Render the optimization prompt: task description, then the top pairs
    worst-first / best-last, then the strict one-line answer instruction."""
    if not buffer.entries:
        raise InvalidInput("cannot build a prompt from an empty buffer")
    dim = problem.n_units
    names = ", ".join(f"p{i + 1}" for i in range(dim))
    prose = _names_prose(dim)
    mins = ", ".join(format_bound(u.p_min) for u in problem.units)
    maxs = ", ".join(format_bound(u.p_max) for u in problem.units)
    noun = "variables" if dim != 1 else "variable"

    lines = [
        f"You need assistance in solving an optimization problem. This problem"
        f" involves {dim} optimization {noun}, namely {prose}. These variables"
        f" are subject to constraints defined by their minimum and maximum"
        f" values: p_min=[{mins}] and p_max=[{maxs}]. Additionally, the sum of"
        f" {prose} must be greater than or equal to {format_bound(problem.demand)}.",
        f"Your objective is to provide values for {prose} that satisfy the"
        f" constraints and minimize the optimization objective.",
        "Below are some previous solution and their objective value pairs. The"
        " pairs are arranged in descending order based on their function"
        " values, where lower values are better.",
        "",
    ]
    for rank, entry in enumerate(buffer.top(cfg.top_k), start=1):
        lines.append(f"Solution {rank}: {format_solution(entry.solution)}")
        lines.append(f"Objective value {rank}: {format_number(entry.cost)}")
    example = ", ".join(_EXAMPLE_VALUES[i % len(_EXAMPLE_VALUES)]
                        for i in range(dim))
    lines.append("")
    lines.append(
        f"Give me a new ({names}) pair that is different from all pairs above,"
        f" and has a function value lower than any of the above. Do not give me"
        f" any explanation, the form of response must strictly follow the"
        f" example: {names} = {example}"
    )
    return "\n".join(lines)


_CANDIDATE_LINE = re.compile(r"^\s*(p\d+(?:\s*,\s*p\d+)*)\s*=\s*(.*?)\s*$")


def parse_solution(text: str, dimension: int) -> tuple[float, ...]:
    """Parse the single `p1, ..., pD = v1, ..., vD` line out of a response.

    Surrounding prose lines are tolerated only when exactly one line matches;
    zero or multiple candidate lines, wrong arity, or non-finite values raise
    ParseFailure with the reason.
    """
    if dimension < 1:
        raise InvalidInput(f"dimension must be >= 1, got {dimension}")
    matches = [(_CANDIDATE_LINE.match(line), line)
               for line in text.splitlines()]
    candidates = [(m, line) for m, line in matches if m is not None]
    if not candidates:
        raise ParseFailure("no solution line of the form 'p1, ..., pD = ...' found")
    if len(candidates) > 1:
        raise ParseFailure(f"{len(candidates)} candidate solution lines found,"
                           " expected exactly one")
    match, line = candidates[0]
    names = [n.strip() for n in match.group(1).split(",")]
    expected = [f"p{i + 1}" for i in range(dimension)]
    if names != expected:
        raise ParseFailure(
            f"expected variables {', '.join(expected)}, got {', '.join(names)}"
        )
    raw_values = [v.strip() for v in match.group(2).split(",")]
    if len(raw_values) != dimension:
        raise ParseFailure(
            f"expected {dimension} values, got {len(raw_values)}"
        )
    values = []
    for token in raw_values:
        try:
            value = float(token)
        except ValueError:
            raise ParseFailure(f"non-numeric value {token!r}") from None
        if not np.isfinite(value):
            raise ParseFailure(f"non-finite value {token!r}")
        values.append(value)
    return tuple(values)


# ---------------------------------------------------------------------------
# Seeding
# ---------------------------------------------------------------------------

def seed_buffer(problem: DispatchProblem, count: int, seed: int = 0,
                cfg: Optional[OproConfig] = None) -> SolutionCostBuffer:
    """Sample `count` feasible pairs: uniform draws in the box, scaled onto the
    demand plane when short, re-clamped, and re-checked."""
    if count < 1:
        raise InvalidInput(f"count must be >= 1, got {count}")
    p_min, p_max = problem.p_min, problem.p_max
    if p_max.sum() < problem.demand:
        raise Infeasible(
            f"total capacity {p_max.sum():.6g} cannot cover demand"
            f" {problem.demand:.6g}"
        )
    cfg = cfg or OproConfig()
    buffer = SolutionCostBuffer(problem, capacity=max(cfg.capacity, count),
                                dedup_epsilon=cfg.dedup_epsilon)
    rng = np.random.default_rng(seed)
    attempts = 0
    max_attempts = 1000 * count
    while len(buffer) < count and attempts < max_attempts:
        attempts += 1
        sample = rng.uniform(p_min, p_max)
        total = sample.sum()
        if total < problem.demand:
            if total <= 0:
                continue
            sample = np.clip(sample * (problem.demand / total), p_min, p_max)
        if check_dispatch_feasible(problem, sample):
            buffer.add(sample)
    while len(buffer) < count:
        # Fallback for very tight boxes: walk the line p_min -> p_max, which
        # always crosses the demand plane for a feasible problem.
        span = p_max.sum() - p_min.sum()
        alpha = 0.0 if span <= 0 else (problem.demand - p_min.sum()) / span
        alpha = min(1.0, max(0.0, alpha))
        jitter = rng.uniform(alpha, 1.0)
        point = p_min + (p_max - p_min) * jitter
        if not buffer.add(point):
            jittered = np.clip(point + rng.uniform(0, 1e-2, size=point.shape),
                               p_min, p_max)
            if check_dispatch_feasible(problem, jittered):
                buffer.add(jittered)
    return buffer


def buffer_from_pairs(problem: DispatchProblem,
                      pairs: Sequence[tuple[Sequence[float], float]],
                      cfg: Optional[OproConfig] = None) -> SolutionCostBuffer:
    """Load verbatim pairs (for example from a seed file) into a fresh buffer."""
    cfg = cfg or OproConfig()
    buffer = SolutionCostBuffer(problem, capacity=cfg.capacity,
                                dedup_epsilon=cfg.dedup_epsilon)
    for solution, cost in pairs:
        buffer.add(solution, cost)
    return buffer


# ---------------------------------------------------------------------------
# The loop
# ---------------------------------------------------------------------------

class OproTransportError(TransportError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"transport failure at step {step}: {cause}")
        self.step = step


def opro_step(problem: DispatchProblem, buffer: SolutionCostBuffer,
              cfg: OproConfig, model: ChatProvider, index: int = 0) -> OproStep:
    """One optimization step: prompt, one model call, parse, filter, store."""
    prompt = build_prompt(problem, buffer, cfg)
    request = ChatRequest(
        messages=(ChatMessage.text("user", prompt),),
        temperature=cfg.temperature,
    )
    try:
        response = model.chat(request)
    except TransportError as exc:
        raise OproTransportError(index, exc) from exc
    text = response.message.text_content

    def finish(parsed, feasible, violations, accepted, reason, cost) -> OproStep:
        return OproStep(
            index=index, prompt=prompt, response=text, parsed=parsed,
            feasible=feasible, violations=tuple(violations), accepted=accepted,
            reason=reason, cost=cost, best_cost=buffer.best().cost,
        )

    try:
        parsed = parse_solution(text, problem.n_units)
    except ParseFailure as exc:
        return finish(None, None, (), False, f"parse_failure: {exc.reason}", None)

    verdict = check_dispatch_feasible(problem, parsed)
    if not verdict:
        return finish(parsed, False, [str(v) for v in verdict.violations],
                      False, "infeasible", None)
    if buffer.is_duplicate(parsed):
        return finish(parsed, True, (), False, "duplicate",
                      cost_of(problem, parsed))
    cost = cost_of(problem, parsed)
    buffer.add(parsed, cost)
    return finish(parsed, True, (), True, "accepted", cost)


def run_opro(problem: DispatchProblem, cfg: OproConfig, model: ChatProvider,
             *, seed: int = 0,
             initial_buffer: Optional[SolutionCostBuffer] = None,
             should_stop: Optional[Callable[[], bool]] = None,
             on_step: Optional[Callable[["OproRunRecord", OproStep], None]] = None,
             ) -> OproRunRecord:
    """Seed (unless a buffer is supplied), run cfg.steps steps, log everything.

    Three consecutive transport failures abort the run cleanly, returning the
    partial record with the abort reason.
    """
    buffer = initial_buffer if initial_buffer is not None else seed_buffer(
        problem, cfg.seed_count, seed, cfg)
    record = OproRunRecord(config=cfg, seed_pairs=buffer.pairs())
    best = buffer.best()
    record.best_solution, record.best_cost = best.solution, best.cost

    consecutive_failures = 0
    for index in range(cfg.steps):
        if should_stop is not None and should_stop():
            record.aborted = f"cancelled before step {index}"
            break
        try:
            step = opro_step(problem, buffer, cfg, model, index)
        except OproTransportError as exc:
            consecutive_failures += 1
            step = OproStep(
                index=index, prompt="", response=None, parsed=None,
                feasible=None, violations=(), accepted=False,
                reason=f"transport_error: {exc}", cost=None,
                best_cost=buffer.best().cost,
            )
            record.steps.append(step)
            if on_step is not None:
                on_step(record, step)
            if consecutive_failures >= 3:
                record.aborted = f"3 consecutive transport failures, last: {exc}"
                break
            continue
        consecutive_failures = 0
        record.steps.append(step)
        if step.accepted:
            best = buffer.best()
            record.best_solution, record.best_cost = best.solution, best.cost
        if on_step is not None:
            on_step(record, step)

    record.final_pairs = buffer.pairs()
    return record


def adapt_task(previous: OproRunRecord, new_problem: DispatchProblem,
               cfg: OproConfig, model: ChatProvider, *, seed: int = 0,
               should_stop: Optional[Callable[[], bool]] = None,
               on_step: Optional[Callable[[OproRunRecord, OproStep], None]] = None,
               ) -> OproRunRecord:
    """Warm-start on a changed problem: re-cost and re-filter the previous run's
    accepted solutions into the new buffer, then run cfg.steps steps."""
    if not previous.final_pairs:
        raise InvalidInput("previous run has no solutions to adapt from")
    buffer = SolutionCostBuffer(new_problem, capacity=cfg.capacity,
                                dedup_epsilon=cfg.dedup_epsilon)
    for solution, _ in previous.final_pairs:
        if check_dispatch_feasible(new_problem, solution):
            buffer.add(solution)  # cost recomputed against the new problem
    if not buffer.entries:
        buffer = seed_buffer(new_problem, cfg.seed_count, seed, cfg)
    return run_opro(new_problem, cfg, model, seed=seed, initial_buffer=buffer,
                    should_stop=should_stop, on_step=on_step)


# ---------------------------------------------------------------------------
# Transcript replay
# ---------------------------------------------------------------------------

def save_run_transcript(record: OproRunRecord, path: Union[str, Path]) -> None:
    """Write one JSONL line per step (prompt, response, verdict fields)."""
    with open(path, "w", encoding="utf-8") as fh:
        for step in record.steps:
            fh.write(json.dumps(step.to_dict(), sort_keys=True) + "\n")


def load_run_transcript(path: Union[str, Path]) -> list[OproStep]:
    steps = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            steps.append(OproStep.from_dict(json.loads(line)))
    return steps


def replay_provider(steps: Sequence[OproStep]) -> ScriptedProvider:
    """A provider answering recorded prompts with their recorded responses;
    prompts are deterministic, so replaying a run reproduces it bit-exactly."""
    by_prompt: dict[str, list[str]] = {}
    for step in steps:
        if step.response is not None:
            by_prompt.setdefault(step.prompt, []).append(step.response)
    cursors: dict[str, int] = {}

    def rule(request: ChatRequest) -> Optional[str]:
        prompt = request.messages[-1].text_content
        queue = by_prompt.get(prompt)
        if queue is None:
            return None
        i = cursors.get(prompt, 0)
        if i >= len(queue):
            i = len(queue) - 1  # repeated identical prompts replay the last answer
        cursors[prompt] = i + 1
        return queue[i]

    return ScriptedProvider(rules=[rule])
