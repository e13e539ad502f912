from __future__ import annotations

import time

import numpy as np
import pytest

from gridllm.errors import Cancelled, EmptyProblem
from gridllm.ev import solve_ev, summarize_schedule
from gridllm.problems import (EVProblem, EVSession, check_ev_feasible)

from .oracles import ev_grid_oracle


def random_grid_ev(rng: np.random.Generator) -> EVProblem:
    """2-vehicle, 3-step instances with every datum on the 0.1 kW grid, so the
    grid oracle is exact for the continuous optimum (see tests/oracles.py)."""
    T = 3
    sessions = []
    for _ in range(2):
        u_max = round(float(rng.uniform(0.5, 3.0)), 1)
        depart = int(rng.integers(1, T + 1))
        need = round(float(rng.uniform(0.2, u_max * depart)), 1)
        sessions.append(EVSession(initial=0.0, target=need, u_max=u_max,
                                  depart=depart))
    capacity = tuple(round(float(c), 1) for c in rng.uniform(0.5, 4.0, size=T))
    return EVProblem(sessions=tuple(sessions), timesteps=T, capacity=capacity)


class TestPaperInstance:
    def test_objective_and_terminals(self, paper_ev_problem):
        start = time.perf_counter()
        schedule = solve_ev(paper_ev_problem)
        elapsed = time.perf_counter() - start
        assert elapsed < 5.0
        assert schedule.objective <= 1e-4
        assert np.allclose(schedule.soc[:, -1], 100.0, atol=0.1)

    def test_vehicle_one_window_is_tight(self, paper_ev_problem):
        schedule = solve_ev(paper_ev_problem)
        # 10 steps x 10 kW is exactly the 100 kWh it needs.
        assert np.allclose(schedule.power[0, :10], 10.0, atol=0.01)
        assert np.allclose(schedule.power[0, 10:], 0.0, atol=1e-9)
        assert schedule.power[0, :10].sum() == pytest.approx(100.0, abs=0.1)

    def test_capacity_respected(self, paper_ev_problem):
        schedule = solve_ev(paper_ev_problem)
        assert schedule.power.sum(axis=0).max() <= 30.0 + 1e-6

    def test_feasible_at_default_tol(self, paper_ev_problem):
        schedule = solve_ev(paper_ev_problem)
        assert check_ev_feasible(paper_ev_problem, schedule, tol=1e-6).ok


class TestSmallCases:
    def test_single_step_single_vehicle(self):
        problem = EVProblem(
            sessions=(EVSession(initial=0, target=5, u_max=10, depart=1),),
            timesteps=1, capacity=(10.0,),
        )
        schedule = solve_ev(problem)
        assert schedule.power[0, 0] == pytest.approx(5.0, abs=1e-5)
        assert schedule.objective <= 1e-8

    def test_degenerate_window_forces_zero_row(self):
        problem = EVProblem(
            sessions=(
                EVSession(initial=0, target=5, u_max=10, depart=2, arrival=2),
                EVSession(initial=0, target=5, u_max=10, depart=2),
            ),
            timesteps=2, capacity=(10.0, 10.0),
        )
        schedule = solve_ev(problem)
        assert np.allclose(schedule.power[0], 0.0)
        assert schedule.soc[1, -1] == pytest.approx(5.0, abs=1e-5)

    def test_arrival_window_honored(self):
        problem = EVProblem(
            sessions=(EVSession(initial=0, target=6, u_max=10, depart=3,
                                arrival=1),),
            timesteps=3, capacity=(10.0, 10.0, 10.0),
        )
        schedule = solve_ev(problem)
        assert schedule.power[0, 0] == pytest.approx(0.0, abs=1e-9)
        assert schedule.soc[0, -1] == pytest.approx(6.0, abs=1e-4)

    def test_efficiency_scales_delivery(self):
        problem = EVProblem(
            sessions=(EVSession(initial=0, target=4, u_max=10, depart=1),),
            timesteps=1, capacity=(10.0,), efficiency=0.8,
        )
        schedule = solve_ev(problem)
        assert schedule.power[0, 0] == pytest.approx(5.0, abs=1e-5)

    def test_empty_sessions_rejected(self):
        with pytest.raises(EmptyProblem):
            EVProblem(sessions=(), timesteps=1, capacity=(1.0,))

    def test_cancellation_hook(self, paper_ev_problem):
        with pytest.raises(Cancelled):
            solve_ev(paper_ev_problem, should_stop=lambda: True)


class TestOracleEquivalence:
    def test_random_instances_match_grid_oracle(self):
        rng = np.random.default_rng(2024)
        for _ in range(20):
            problem = random_grid_ev(rng)
            schedule = solve_ev(problem)
            oracle = ev_grid_oracle(problem, step=0.1)
            assert abs(schedule.objective - oracle) <= 0.05
            assert check_ev_feasible(problem, schedule).ok


class TestInvariants:
    def test_no_waste(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            problem = random_grid_ev(rng)
            schedule = solve_ev(problem)
            delivered = problem.efficiency * schedule.power.sum(axis=1)
            for session, d in zip(problem.sessions, delivered):
                assert d <= session.needed + 1e-6

    def test_monotone_capacity_relaxation(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            problem = random_grid_ev(rng)
            base = solve_ev(problem).objective
            bumped = EVProblem(
                sessions=problem.sessions, timesteps=problem.timesteps,
                capacity=tuple(c + float(rng.uniform(0, 2))
                               for c in problem.capacity),
                efficiency=problem.efficiency,
            )
            relaxed = solve_ev(bumped).objective
            assert relaxed <= base + 1e-4

    def test_objective_lower_bound(self, paper_ev_problem):
        # Aggregate-energy bound: deficits cannot beat what the capacity and
        # rate caps physically admit.
        problem = paper_ev_problem
        schedule = solve_ev(problem)
        mask = problem.window_mask()
        u_max = np.array([s.u_max for s in problem.sessions])
        per_step = np.minimum(np.array(problem.capacity),
                              (mask * u_max[:, None]).sum(axis=0))
        needed = sum(s.needed for s in problem.sessions)
        supply = problem.efficiency * per_step.sum()
        if needed > supply:
            shortfall = needed - supply
            bound = shortfall**2 / problem.n_vehicles
            assert schedule.objective >= bound - 1e-6
        else:
            assert schedule.objective <= 1e-4


class TestSummaries:
    def test_paper_summary_values(self, paper_ev_problem):
        schedule = solve_ev(paper_ev_problem)
        summary = summarize_schedule(paper_ev_problem, schedule)
        assert np.allclose(summary.delivered, 100.0, atol=0.1)
        assert summary.peak_aggregate <= 30.0 + 1e-6
        assert 0 in summary.rate_bound_vehicles  # vehicle 1 pinned at 10 kW
        assert summary.objective == pytest.approx(schedule.objective, abs=1e-9)

    def test_all_zero_schedule_deficits(self, paper_ev_problem):
        from gridllm.problems import ChargingSchedule
        schedule = ChargingSchedule.from_power(paper_ev_problem,
                                               np.zeros((5, 20)))
        summary = summarize_schedule(paper_ev_problem, schedule)
        assert summary.deficits == tuple([100.0] * 5)
        assert summary.peak_aggregate == 0.0
        assert summary.capacity_bound_steps == ()

    def test_summary_recomputed_not_cached(self, paper_ev_problem):
        schedule = solve_ev(paper_ev_problem)
        doctored = type(schedule)(
            power=schedule.power, soc=schedule.soc,
            objective=schedule.objective + 123.0,  # stale stored number
        )
        summary = summarize_schedule(paper_ev_problem, doctored)
        assert summary.objective == pytest.approx(schedule.objective, abs=1e-9)

    def test_oracle_instance_totals(self):
        rng = np.random.default_rng(99)
        problem = random_grid_ev(rng)
        schedule = solve_ev(problem)
        summary = summarize_schedule(problem, schedule)
        assert sum(summary.delivered) == pytest.approx(
            problem.efficiency * schedule.power.sum(), abs=1e-9)

    def test_text_rendering_mentions_each_vehicle(self, paper_ev_problem):
        schedule = solve_ev(paper_ev_problem)
        text = summarize_schedule(paper_ev_problem, schedule).to_text()
        for j in range(1, 6):
            assert f"vehicle {j}:" in text
        assert "peak aggregate power" in text
