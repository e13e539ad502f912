from __future__ import annotations

from pathlib import Path

import pytest

from gridllm.problems import load_problem

DATA_DIR = Path(__file__).resolve().parents[1] / "src" / "gridllm" / "data"
GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def five_unit_problem():
    return load_problem(DATA_DIR / "five_unit.toml")


@pytest.fixture(scope="session")
def paper_ev_problem():
    return load_problem(DATA_DIR / "ev_five_vehicle.toml")


@pytest.fixture(scope="session")
def seed_pairs_path():
    return DATA_DIR / "opro_seed_pairs.json"


@pytest.fixture(scope="session")
def golden_dir():
    return GOLDEN_DIR
