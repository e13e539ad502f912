"""Conversational EV-charging assistant driven by tool-call extraction.

The model gathers the solve_EV parameters from the user in natural language and
eventually emits a code block invoking solve_EV.  That block is parsed with a
restricted grammar (numeric literals and flat numeric lists only) and mapped
onto an EVProblem for the native solver; generated text is never executed.
"""

from __future__ import annotations

import ast
import json
import re
import uuid
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .errors import ExtractionFailure, InvalidInput
from .ev import ScheduleSummary, solve_ev, summarize_schedule
from .gateway import (ChatMessage, ChatProvider, ChatRequest, message_from_wire,
                      message_to_wire)
from .problems import ChargingSchedule, EVProblem, EVSession

TOOL_NAME = "solve_EV"

ARG_NAMES = (
    "num_of_vehicles",
    "timesteps",
    "initial_states",
    "max_power",
    "terminal_states",
    "dept_time",
    "power_capacity",
    "plot_fig",
)
REQUIRED_ARGS = ARG_NAMES[:-1]  # plot_fig defaults to False
_LIST_ARGS = ("initial_states", "terminal_states", "dept_time")

GREETING = (
    "Hello! I can help you schedule EV charging. Tell me about the charging"
    " problem you want to solve."
)

_SYSTEM_PROMPT = """\
You are an AI assistant specialized in solving EV charging problems. You have \
been provided with a predefined function called solve_EV() that is capable of \
addressing various EV charging problems:

def solve_EV(num_of_vehicles, timesteps, initial_states, max_power, terminal_states, dept_time, power_capacity, plot_fig):
    \"\"\"Schedule charging power for every vehicle.

    num_of_vehicles: number of charging sessions
    timesteps: scheduling horizon length
    initial_states: list of initial charge levels, one per vehicle
    max_power: maximum charging power per vehicle
    terminal_states: list of desired final charge levels, one per vehicle
    dept_time: list of departure timesteps, one per vehicle
    power_capacity: total power available across all vehicles at any timestep
    plot_fig: whether to plot the resulting charging status
    \"\"\"

When a user requests you to solve an EV charging problem, you should ask the \
user in natural language to provide the necessary parameters. Then, based on \
user's response, you should generate code to invoke solve_EV() function. Here \
is an example:

num_of_vehicles = 3
timesteps = 10
initial_states = [0, 0, 0]
max_power = 10.0
terminal_states = [70, 50, 100]
dept_time = [8, 6, 10]
power_capacity = 20
solve_EV(num_of_vehicles, timesteps, initial_states, max_power, terminal_states, dept_time, power_capacity, plot_fig)
"""


def system_prompt() -> ChatMessage:
    """The fixed system message embedding the solve_EV documentation."""
    return ChatMessage.text("system", _SYSTEM_PROMPT)


# ---------------------------------------------------------------------------
# Invocation extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ToolInvocation:
    name: str
    args: dict

    def __post_init__(self) -> None:
        unknown = set(self.args) - set(ARG_NAMES)
        if unknown:
            raise ExtractionFailure(
                f"unknown argument names: {', '.join(sorted(unknown))}",
                fragment=str(sorted(unknown)),
            )


_FENCE = re.compile(r"```(?:[a-zA-Z0-9_+-]*)\n(.*?)```", re.DOTALL)
_CALL_TOKEN = re.compile(r"\bsolve_EV\s*\(", re.IGNORECASE)


def _literal_value(node: ast.expr, source: str):
    """Numbers, booleans, and flat numeric lists; anything else is rejected."""
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, bool)):
        return node.value
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        inner = _literal_value(node.operand, source)
        if isinstance(inner, (int, float)) and not isinstance(inner, bool):
            return -inner
    if isinstance(node, (ast.List, ast.Tuple)):
        values = []
        for element in node.elts:
            value = _literal_value(element, source)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ExtractionFailure(
                    "lists may contain numbers only",
                    fragment=ast.get_source_segment(source, node) or "",
                )
            values.append(value)
        return values
    raise ExtractionFailure(
        "only numeric literals and flat numeric lists are allowed",
        fragment=ast.get_source_segment(source, node) or "",
    )


def extract_invocation(text: str) -> Optional[ToolInvocation]:
    """Parse the first code block that assigns arguments and calls solve_EV.

    Returns None when the text contains nothing that looks like an invocation;
    raises ExtractionFailure when a block is present but malformed.  The code
    is parsed with a restricted grammar and never executed.
    """
    candidate = None
    for block in _FENCE.finditer(text):
        if _CALL_TOKEN.search(block.group(1)):
            candidate = block.group(1)
            break
    if candidate is None:
        if _FENCE.search(text) is None and _CALL_TOKEN.search(text):
            candidate = text  # unfenced reply, like the printed dialogue
        else:
            return None

    try:
        tree = ast.parse(candidate)
    except SyntaxError as exc:
        raise ExtractionFailure(
            f"code block does not parse: {exc.msg}",
            fragment=(exc.text or "").strip(),
        ) from exc

    assignments: dict[str, object] = {}
    call: Optional[ast.Call] = None
    for stmt in tree.body:
        if isinstance(stmt, ast.Assign):
            if len(stmt.targets) != 1 or not isinstance(stmt.targets[0], ast.Name):
                raise ExtractionFailure(
                    "only simple `name = value` assignments are allowed",
                    fragment=ast.get_source_segment(candidate, stmt) or "",
                )
            name = stmt.targets[0].id
            assignments[name] = _literal_value(stmt.value, candidate)
        elif (isinstance(stmt, ast.Expr) and isinstance(stmt.value, ast.Call)
                and isinstance(stmt.value.func, ast.Name)
                and stmt.value.func.id.lower() == TOOL_NAME.lower()):
            if call is None:
                call = stmt.value
        elif isinstance(stmt, ast.Expr) and isinstance(stmt.value, ast.Constant):
            continue  # bare strings / ellipsis are harmless
        else:
            raise ExtractionFailure(
                "statement outside the restricted grammar",
                fragment=ast.get_source_segment(candidate, stmt) or "",
            )
    if call is None:
        return None

    args: dict[str, object] = {}

    def resolve(node: ast.expr):
        if isinstance(node, ast.Name):
            if node.id not in assignments:
                if node.id == "plot_fig":
                    return False  # the documented example passes it unassigned
                raise ExtractionFailure(
                    f"call references unassigned name {node.id!r}",
                    fragment=node.id,
                )
            return assignments[node.id]
        return _literal_value(node, candidate)

    if len(call.args) > len(ARG_NAMES):
        raise ExtractionFailure(
            f"solve_EV takes at most {len(ARG_NAMES)} arguments,"
            f" got {len(call.args)}"
        )
    for position, node in enumerate(call.args):
        # Positional identifiers may carry their own (assigned) names.
        name = (node.id if isinstance(node, ast.Name) and node.id in ARG_NAMES
                else ARG_NAMES[position])
        args[name] = resolve(node)
    for keyword in call.keywords:
        if keyword.arg is None:
            raise ExtractionFailure("**kwargs is not allowed", fragment="**")
        args[keyword.arg] = resolve(keyword.value)

    missing = tuple(name for name in REQUIRED_ARGS if name not in args)
    if missing:
        raise ExtractionFailure(
            f"missing arguments: {', '.join(missing)}", missing=missing
        )
    invocation = ToolInvocation(name=TOOL_NAME, args=args)
    _check_arity(invocation)
    return invocation


def _check_arity(invocation: ToolInvocation) -> None:
    n = invocation.args["num_of_vehicles"]
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise ExtractionFailure(
            f"num_of_vehicles must be a positive integer, got {n!r}"
        )
    for name in _LIST_ARGS:
        value = invocation.args[name]
        if not isinstance(value, list):
            raise ExtractionFailure(f"{name} must be a list, got {value!r}")
        if len(value) != n:
            raise ExtractionFailure(
                f"{name} has {len(value)} entries for {n} vehicles"
            )


class DepartureClampWarning(UserWarning):
    """A departure time beyond the horizon was clamped to the last step."""


def bind_problem(invocation: ToolInvocation) -> EVProblem:
    """Map solve_EV arguments onto an EVProblem (arrival 0, u_min 0, delta 1).

    Departure entries beyond the horizon are clamped to it with a warning.
    """
    args = invocation.args
    timesteps = args["timesteps"]
    if not isinstance(timesteps, int) or isinstance(timesteps, bool) or timesteps < 1:
        raise InvalidInput(f"timesteps must be a positive integer, got {timesteps!r}")
    max_power = args["max_power"]
    if isinstance(max_power, bool) or not isinstance(max_power, (int, float)):
        raise InvalidInput(f"max_power must be numeric, got {max_power!r}")
    if max_power < 0:
        raise InvalidInput(f"max_power must be >= 0, got {max_power}")
    capacity = args["power_capacity"]
    if isinstance(capacity, bool) or not isinstance(capacity, (int, float)):
        raise InvalidInput(f"power_capacity must be numeric, got {capacity!r}")
    if capacity < 0:
        raise InvalidInput(f"power_capacity must be >= 0, got {capacity}")

    sessions = []
    for j in range(args["num_of_vehicles"]):
        depart = args["dept_time"][j]
        if depart > timesteps:
            warnings.warn(
                f"vehicle {j + 1}: departure {depart} clamped to horizon"
                f" {timesteps}",
                DepartureClampWarning,
            )
            depart = timesteps
        sessions.append(EVSession(
            initial=args["initial_states"][j],
            target=args["terminal_states"][j],
            u_max=float(max_power),
            depart=int(depart),
        ))
    return EVProblem(
        sessions=tuple(sessions),
        timesteps=timesteps,
        capacity=tuple([float(capacity)] * timesteps),
    )


# ---------------------------------------------------------------------------
# Sessions
# ---------------------------------------------------------------------------

STATES = ("gathering", "ready", "solved", "explained", "failed")


@dataclass
class AssistantSession:
    """One conversation: transcript, bound parameters, and lifecycle state."""

    session_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    transcript: list[ChatMessage] = field(default_factory=list)
    gathered: dict[str, dict] = field(default_factory=dict)  # name -> {value, turn}
    state: str = "gathering"
    problem: Optional[EVProblem] = None
    schedule: Optional[ChargingSchedule] = None
    summary: Optional[ScheduleSummary] = None
    consecutive_extraction_failures: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "state": self.state,
            "transcript": [message_to_wire(m) for m in self.transcript],
            "gathered": self.gathered,
            "warnings": list(self.warnings),
            "schedule": None if self.schedule is None else {
                "power": self.schedule.power.tolist(),
                "soc": self.schedule.soc.tolist(),
                "objective": self.schedule.objective,
                "objective_norm": self.schedule.objective_norm,
            },
            "summary": None if self.summary is None else self.summary.to_dict(),
        }

    def save(self, directory: Union[str, Path]) -> Path:
        """Persist as JSONL: one meta line, then one line per message."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.session_id}.jsonl"
        meta = self.to_dict()
        transcript = meta.pop("transcript")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"meta": meta}, sort_keys=True) + "\n")
            for message in transcript:
                fh.write(json.dumps({"message": message}, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AssistantSession":
        lines = [json.loads(line) for line
                 in Path(path).read_text(encoding="utf-8").splitlines()
                 if line.strip()]
        meta = lines[0]["meta"]
        session = cls(
            session_id=meta["session_id"],
            state=meta["state"],
            gathered=meta["gathered"],
            warnings=list(meta.get("warnings", [])),
        )
        session.transcript = [message_from_wire(obj["message"])
                              for obj in lines[1:]]
        return session


class AssistantEngine:
    """Drives assistant sessions: model turns, extraction, solving, explaining."""

    def __init__(self, provider: ChatProvider, temperature: float = 0.0):
        self.provider = provider
        self.temperature = temperature

    def new_session(self) -> AssistantSession:
        session = AssistantSession()
        session.transcript.append(system_prompt())
        session.transcript.append(ChatMessage.text("assistant", GREETING))
        return session

    def _model_turn(self, session: AssistantSession) -> ChatMessage:
        request = ChatRequest(messages=tuple(session.transcript),
                              temperature=self.temperature)
        response = self.provider.chat(request)
        message = response.message
        session.transcript.append(message)
        return message

    def handle_user_turn(self, session: AssistantSession, text: str
                         ) -> list[ChatMessage]:
        """Process one user turn; returns every message appended by this call."""
        if session.state == "failed":
            raise InvalidInput("session already failed; open a new one")
        if session.state in ("solved", "explained"):
            session.state = "gathering"  # an explicit user revision

        appended: list[ChatMessage] = []
        user_message = ChatMessage.text("user", text)
        session.transcript.append(user_message)
        appended.append(user_message)
        user_turn_index = len(session.transcript) - 1

        assistant_message = self._model_turn(session)
        appended.append(assistant_message)

        try:
            invocation = extract_invocation(assistant_message.text_content)
        except ExtractionFailure as exc:
            session.consecutive_extraction_failures += 1
            session.warnings.append(f"extraction failure: {exc.reason}")
            if session.consecutive_extraction_failures >= 2:
                session.state = "failed"
            return appended
        if invocation is None:
            return appended  # still gathering parameters

        session.consecutive_extraction_failures = 0
        for name in ARG_NAMES:
            if name in invocation.args:
                session.gathered[name] = {
                    "value": invocation.args[name], "turn": user_turn_index,
                }
        session.gathered.setdefault("plot_fig",
                                    {"value": False, "turn": None})
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", DepartureClampWarning)
            problem = bind_problem(invocation)
        session.warnings.extend(str(w.message) for w in caught)
        session.problem = problem
        session.state = "ready"

        schedule = solve_ev(problem)
        summary = summarize_schedule(problem, schedule)
        session.schedule = schedule
        session.summary = summary
        session.state = "solved"

        tool_message = ChatMessage.text(
            "user", f"Execution result of solve_EV:\n{summary.to_text()}"
        )
        session.transcript.append(tool_message)
        appended.append(tool_message)

        explanation = self._model_turn(session)
        appended.append(explanation)
        session.state = "explained"
        return appended

    def run_session(self, user_turns: Iterable[str],
                    session: Optional[AssistantSession] = None
                    ) -> AssistantSession:
        """Drive a whole conversation from an iterable of user turns."""
        session = session or self.new_session()
        for text in user_turns:
            self.handle_user_turn(session, text)
            if session.state in ("explained", "failed"):
                break
        return session
