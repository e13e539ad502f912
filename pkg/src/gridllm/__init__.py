"""gridllm: exact power-system scheduling solvers plus LLM-driven workflows.

Submodules:
  problems   shared problem types, costs, and feasibility checks
  dispatch   exact generator dispatch (lambda bisection)
  ev         EV charging solver (operator splitting) and summaries
  opro       optimization-by-prompting loop with feasibility filtering
  gateway    provider-independent chat interface (scripted / replay / live)
  assistant  conversational EV scheduling assistant
  docqa      document chunking, retrieval, and grounded QA
  sa         few-shot multimodal situation-awareness harness
  service    HTTP service over all of the above
  store      file-backed persistence
"""

__version__ = "0.1.0"

from .problems import (  # noqa: F401
    ChargingSchedule,
    DispatchProblem,
    DispatchSolution,
    EVProblem,
    EVSession,
    GeneratorParams,
    check_dispatch_feasible,
    check_ev_feasible,
    cost_of,
    load_problem,
)
from .dispatch import DispatchSolverReport, solve_dispatch, solve_dispatch_for_demand  # noqa: F401
from .ev import solve_ev, summarize_schedule  # noqa: F401
