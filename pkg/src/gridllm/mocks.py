"""Deterministic offline provider for demos and end-to-end tests.

The rules recognize the prompt shapes produced by this package (optimization
steps, the charging assistant, document QA, image classification) and answer
with fixed or mechanically derived text, so every workflow can run with no
network and reproducible output.
"""

from __future__ import annotations

import re
from typing import Optional

from .gateway import ChatRequest, ImagePart, ScriptedProvider

EIGHT_QUESTIONS = """\
Of course, I'd be happy to help. To provide the best result, I need some \
specific details from you. Could you please tell me the following:
1. How many vehicles do you have that you need to charge?
2. Over how many timesteps are you planning to charge your vehicles? A \
timestep could be an hour, for example.
3. What are the initial states (charge levels) of your vehicles? Please list \
for each vehicle if more than one.
4. What's the maximum power each of your vehicles can consume?
5. What are the final desired states (charge levels) for each of your \
vehicles?
6. Until what timestep does each of your vehicles not need to start charging? \
Please list for each vehicle if more than one.
7. What's the total power capacity you want to use for charging all your \
vehicles?
8. Finally, would you like a plot figure of the charging status?"""

PAPER_CODE_REPLY = """\
Thank you for the information. Based on your input, we can utilize our EV \
charging solver as follows:
```python
num_of_vehicles = 5
timesteps = 20
# starting from zero for all vehicles
initial_states = [0, 0, 0, 0, 0]
max_power = 10.0
# desired state is 100 for all vehicles
terminal_states = [100, 100, 100, 100, 100]
# staggered start times for charging
dept_time = [10, 12, 16, 18, 20]
power_capacity = 30
Solve_EV(num_of_vehicles, timesteps, initial_states, max_power, terminal_states, dept_time, power_capacity)
```"""

EXPLANATION_REPLY = (
    "The solver found a schedule meeting the stated targets within the shared"
    " capacity. The execution result above lists, per vehicle, the energy"
    " delivered, the terminal state of charge, and any remaining deficit,"
    " together with the peak aggregate power drawn."
)

_SOLUTION_LINE = re.compile(
    r"^Solution \d+: (?:p\d+(?:, )?)+ = (?P<values>.+)$", re.MULTILINE)
_BOUNDS = re.compile(r"p_min=\[(?P<mins>[^\]]*)\] and p_max=\[(?P<maxs>[^\]]*)\]")
_DEMAND = re.compile(r"greater than or equal to (?P<demand>[-0-9.]+)")


def _parse_vector(text: str) -> list[float]:
    return [float(v.strip()) for v in text.split(",")]


def _opro_rule(request: ChatRequest) -> Optional[str]:
    prompt = request.messages[-1].text_content
    if not prompt.startswith("You need assistance in solving an optimization"):
        return None
    bounds = _BOUNDS.search(prompt)
    demand_match = _DEMAND.search(prompt)
    solutions = [_parse_vector(m.group("values"))
                 for m in _SOLUTION_LINE.finditer(prompt)]
    if not (bounds and demand_match and solutions):
        return None
    p_min = _parse_vector(bounds.group("mins"))
    p_max = _parse_vector(bounds.group("maxs"))
    demand = float(demand_match.group("demand"))
    # Pairs print worst-first, so the tail holds the best solutions; propose
    # their midpoint (or a nudge toward the box middle when only one exists).
    best = solutions[-1]
    other = solutions[-2] if len(solutions) >= 2 else [
        0.5 * (lo + hi) for lo, hi in zip(p_min, p_max)
    ]
    proposal = [0.5 * (a + b) for a, b in zip(best, other)]
    proposal = [min(max(v, lo), hi)
                for v, lo, hi in zip(proposal, p_min, p_max)]
    total = sum(proposal)
    if total < demand and total > 0:
        proposal = [min(max(v * demand / total, lo), hi)
                    for v, lo, hi in zip(proposal, p_min, p_max)]
    from .opro import format_solution
    return format_solution([round(v, 4) for v in proposal])


def _assistant_rule(request: ChatRequest) -> Optional[str]:
    system = request.messages[0]
    if "solve_EV()" not in system.text_content:
        return None
    last = request.messages[-1].text_content
    if last.startswith("Execution result of solve_EV:"):
        return EXPLANATION_REPLY
    if "schedule the charging" in last.lower():
        return EIGHT_QUESTIONS
    # A turn answering the numbered questions carries the paper's instance.
    if re.search(r"\b1\.", last) and re.search(r"\b7\.", last):
        return PAPER_CODE_REPLY
    return EIGHT_QUESTIONS


def _sa_rule(request: ChatRequest) -> Optional[str]:
    last = request.messages[-1]
    has_image = any(isinstance(p, ImagePart) for p in last.parts)
    if not has_image:
        return None
    if "wildfire" not in last.text_content.lower():
        return None
    return "Yes."


def _doc_rule(request: ChatRequest) -> Optional[str]:
    last = request.messages[-1].text_content
    if "Document excerpts" in last:
        snippet = last.split("\n", 2)[-1][:200]
        return f"Based on the provided excerpts: {snippet}"
    if "summary" in last.lower():
        return f"Summary: {last[:160]}"
    if last.startswith("Question:") or "\nQuestion:" in last:
        return "I don't know."
    return None


def mock_provider() -> ScriptedProvider:
    """The offline provider used by `--provider mock` everywhere."""
    return ScriptedProvider(
        rules=[_opro_rule, _assistant_rule, _sa_rule, _doc_rule],
        default="I don't know.",
    )
