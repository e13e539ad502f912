from __future__ import annotations

import numpy as np
import pytest

from gridllm.assistant import (ARG_NAMES, AssistantEngine, AssistantSession,
                               DepartureClampWarning, ToolInvocation,
                               bind_problem, extract_invocation, system_prompt)
from gridllm.errors import ExtractionFailure, InvalidInput
from gridllm.gateway import ScriptedProvider
from gridllm.mocks import (EIGHT_QUESTIONS, EXPLANATION_REPLY,
                           PAPER_CODE_REPLY)

PAPER_ARGS = {
    "num_of_vehicles": 5,
    "timesteps": 20,
    "initial_states": [0, 0, 0, 0, 0],
    "max_power": 10.0,
    "terminal_states": [100, 100, 100, 100, 100],
    "dept_time": [10, 12, 16, 18, 20],
    "power_capacity": 30,
}


class TestSystemPrompt:
    def test_contains_signature_and_example(self):
        text = system_prompt().text_content
        assert ("def solve_EV(num_of_vehicles, timesteps, initial_states,"
                " max_power, terminal_states, dept_time, power_capacity,"
                " plot_fig):") in text
        assert "terminal_states = [70, 50, 100]" in text

    def test_deterministic(self):
        assert system_prompt() == system_prompt()

    def test_matches_golden_file(self, golden_dir):
        golden = (golden_dir / "assistant_system_prompt.txt").read_text()
        assert system_prompt().text_content == golden


class TestExtraction:
    def test_paper_reply_extracts_all_arguments(self):
        invocation = extract_invocation(PAPER_CODE_REPLY)
        assert invocation is not None
        assert invocation.args == PAPER_ARGS

    def test_prose_without_code_returns_none(self):
        assert extract_invocation("Could you tell me how many vehicles?") is None

    def test_unfenced_code_accepted(self):
        code = "\n".join(f"{k} = {v!r}" for k, v in PAPER_ARGS.items())
        code += ("\nsolve_EV(num_of_vehicles, timesteps, initial_states,"
                 " max_power, terminal_states, dept_time, power_capacity)")
        invocation = extract_invocation(code)
        assert invocation is not None and invocation.args == PAPER_ARGS

    def test_keyword_call_accepted(self):
        text = ("```python\nsolve_EV(num_of_vehicles=2, timesteps=3,"
                " initial_states=[0, 0], max_power=5, terminal_states=[4, 6],"
                " dept_time=[3, 3], power_capacity=8, plot_fig=False)\n```")
        invocation = extract_invocation(text)
        assert invocation is not None
        assert invocation.args["terminal_states"] == [4, 6]
        assert invocation.args["plot_fig"] is False

    def test_list_arity_mismatch_rejected(self):
        text = ("```python\nnum_of_vehicles = 3\ntimesteps = 5\n"
                "initial_states = [0, 0]\nmax_power = 5\n"
                "terminal_states = [1, 2, 3]\ndept_time = [5, 5, 5]\n"
                "power_capacity = 9\n"
                "solve_EV(num_of_vehicles, timesteps, initial_states,"
                " max_power, terminal_states, dept_time, power_capacity)\n```")
        with pytest.raises(ExtractionFailure) as excinfo:
            extract_invocation(text)
        assert "initial_states" in str(excinfo.value)

    def test_missing_arguments_listed(self):
        text = "```python\nnum_of_vehicles = 2\nsolve_EV(num_of_vehicles)\n```"
        with pytest.raises(ExtractionFailure) as excinfo:
            extract_invocation(text)
        assert "timesteps" in excinfo.value.missing
        assert "power_capacity" in excinfo.value.missing

    def test_expressions_rejected_not_executed(self):
        text = ("```python\nnum_of_vehicles = __import__('os').getpid()\n"
                "solve_EV(num_of_vehicles)\n```")
        with pytest.raises(ExtractionFailure):
            extract_invocation(text)

    def test_nested_lists_rejected(self):
        text = ("```python\ninitial_states = [[0], [0]]\n"
                "solve_EV(2, 3, initial_states, 5, [4, 4], [3, 3], 8)\n```")
        with pytest.raises(ExtractionFailure):
            extract_invocation(text)

    def test_unknown_argument_name_rejected(self):
        with pytest.raises(ExtractionFailure):
            ToolInvocation(name="solve_EV", args={"vehicles": 2})

    def test_syntax_error_carries_fragment(self):
        text = "```python\nnum_of_vehicles = = 5\nsolve_EV(num_of_vehicles)\n```"
        with pytest.raises(ExtractionFailure) as excinfo:
            extract_invocation(text)
        assert excinfo.value.fragment


class TestBindProblem:
    def test_paper_invocation_binds_exact_instance(self, paper_ev_problem):
        invocation = extract_invocation(PAPER_CODE_REPLY)
        problem = bind_problem(invocation)
        assert problem == paper_ev_problem

    def test_minimal_single_vehicle(self):
        invocation = ToolInvocation(name="solve_EV", args={
            "num_of_vehicles": 1, "timesteps": 4, "initial_states": [1.0],
            "max_power": 3.0, "terminal_states": [5.0], "dept_time": [4],
            "power_capacity": 3.0,
        })
        problem = bind_problem(invocation)
        assert problem.n_vehicles == 1
        assert problem.sessions[0].arrival == 0
        assert problem.sessions[0].u_min == 0.0
        assert problem.efficiency == 1.0
        assert problem.capacity == (3.0,) * 4

    def test_departure_beyond_horizon_clamps_with_warning(self):
        invocation = ToolInvocation(name="solve_EV", args={
            "num_of_vehicles": 1, "timesteps": 4, "initial_states": [0.0],
            "max_power": 3.0, "terminal_states": [5.0], "dept_time": [9],
            "power_capacity": 3.0,
        })
        with pytest.warns(DepartureClampWarning):
            problem = bind_problem(invocation)
        assert problem.sessions[0].depart == 4

    def test_bad_timesteps_rejected(self):
        invocation = ToolInvocation(name="solve_EV", args={
            "num_of_vehicles": 1, "timesteps": 0, "initial_states": [0.0],
            "max_power": 3.0, "terminal_states": [5.0], "dept_time": [1],
            "power_capacity": 3.0,
        })
        with pytest.raises(InvalidInput):
            bind_problem(invocation)

    def test_negative_power_rejected(self):
        invocation = ToolInvocation(name="solve_EV", args={
            "num_of_vehicles": 1, "timesteps": 2, "initial_states": [0.0],
            "max_power": -1.0, "terminal_states": [5.0], "dept_time": [2],
            "power_capacity": 3.0,
        })
        with pytest.raises(InvalidInput):
            bind_problem(invocation)


def paper_script() -> ScriptedProvider:
    return ScriptedProvider.sequence(
        [EIGHT_QUESTIONS, PAPER_CODE_REPLY, EXPLANATION_REPLY])


PAPER_USER_TURNS = [
    "Can you help me to schedule the charging of electric vehicles?",
    "1. five,\n2. 20 hours,\n3. They all start from zero,\n4. 10,\n5. 100,\n"
    "6. [10, 12, 16, 18, 20],\n7. 30.",
]


class TestSessions:
    def test_paper_conversation_reaches_explained(self):
        engine = AssistantEngine(paper_script())
        session = engine.run_session(PAPER_USER_TURNS)
        assert session.state == "explained"
        assert session.schedule is not None
        assert session.schedule.objective <= 1e-4
        assert np.allclose(session.schedule.soc[:, -1], 100.0, atol=0.1)

    def test_eight_parameters_bound_with_provenance(self):
        engine = AssistantEngine(paper_script())
        session = engine.run_session(PAPER_USER_TURNS)
        assert set(session.gathered) == set(ARG_NAMES)
        for name in ARG_NAMES[:-1]:
            assert session.gathered[name]["turn"] is not None

    def test_tool_result_matches_summary_exactly(self):
        engine = AssistantEngine(paper_script())
        session = engine.run_session(PAPER_USER_TURNS)
        tool_messages = [m for m in session.transcript
                         if m.role == "user"
                         and m.text_content.startswith("Execution result")]
        assert len(tool_messages) == 1
        assert tool_messages[0].text_content == (
            f"Execution result of solve_EV:\n{session.summary.to_text()}"
        )

    def test_single_turn_gathering(self):
        provider = ScriptedProvider.sequence([PAPER_CODE_REPLY,
                                              EXPLANATION_REPLY])
        engine = AssistantEngine(provider)
        session = engine.run_session(["5 EVs, 20 steps, from zero to 100,"
                                      " 10 kW max, cap 30, depart"
                                      " 10/12/16/18/20"])
        assert session.state == "explained"
        assert session.schedule is not None

    def test_malformed_then_valid_invocation(self):
        malformed = "```python\nnum_of_vehicles = ???\nsolve_EV(1)\n```"
        provider = ScriptedProvider.sequence(
            [malformed, PAPER_CODE_REPLY, EXPLANATION_REPLY])
        engine = AssistantEngine(provider)
        session = engine.run_session(["schedule my fleet", "try again please"])
        assert session.state == "explained"
        assert any("extraction failure" in w for w in session.warnings)

    def test_two_consecutive_failures_mark_failed(self):
        malformed = "```python\nnum_of_vehicles = ???\nsolve_EV(1)\n```"
        provider = ScriptedProvider.sequence([malformed, malformed])
        engine = AssistantEngine(provider)
        session = engine.run_session(["go", "again"])
        assert session.state == "failed"
        assert len(session.transcript) > 2  # transcript preserved

    def test_failed_session_rejects_turns(self):
        malformed = "```python\nnum_of_vehicles = ???\nsolve_EV(1)\n```"
        engine = AssistantEngine(ScriptedProvider.sequence([malformed] * 2))
        session = engine.run_session(["go", "again"])
        with pytest.raises(InvalidInput):
            engine.handle_user_turn(session, "one more")

    def test_revision_returns_to_gathering_then_resolves(self):
        revised = PAPER_CODE_REPLY.replace("power_capacity = 30",
                                           "power_capacity = 25")
        provider = ScriptedProvider.sequence(
            [EIGHT_QUESTIONS, PAPER_CODE_REPLY, EXPLANATION_REPLY,
             revised, EXPLANATION_REPLY])
        engine = AssistantEngine(provider)
        session = engine.run_session(PAPER_USER_TURNS)
        assert session.state == "explained"
        engine.handle_user_turn(session, "actually the capacity is 25")
        assert session.state == "explained"
        assert session.gathered["power_capacity"]["value"] == 25

    def test_round_trip_persistence(self, tmp_path):
        engine = AssistantEngine(paper_script())
        session = engine.run_session(PAPER_USER_TURNS)
        path = session.save(tmp_path)
        loaded = AssistantSession.load(path)
        assert loaded.session_id == session.session_id
        assert loaded.state == session.state
        assert loaded.transcript == session.transcript
        assert loaded.gathered == session.gathered

    def test_generated_text_never_executed(self, tmp_path):
        # a "code block" trying to write a file must be rejected, not run
        marker = tmp_path / "pwned.txt"
        evil = (f"```python\nopen({str(marker)!r}, 'w').write('x')\n"
                "solve_EV(1, 1, [0], 1, [1], [1], 1)\n```")
        engine = AssistantEngine(ScriptedProvider.sequence([evil, evil]))
        session = engine.run_session(["go", "again"])
        assert session.state == "failed"
        assert not marker.exists()
