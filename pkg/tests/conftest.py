import os
import tempfile
from pathlib import Path

# The registry engine is created at import time, so point it at a scratch database first.
_DB_DIR = tempfile.mkdtemp(prefix="fraclinf-tests-")
os.environ.setdefault("APP_DATABASE_URL", f"sqlite:///{Path(_DB_DIR) / 'registry.db'}")

import pytest  # noqa: E402

from app.config import build_problem, validate_config  # noqa: E402
from app.database import reset_db  # noqa: E402
from app.lp_solver import continuation  # noqa: E402
from app.models import RunConfig, SolverSettings  # noqa: E402

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


def small_config_data(**overrides) -> dict:
    """1D bump scenario on a coarse grid; fast enough for every solver test."""
    data = {
        "dim": 1,
        "s": 0.25,
        "grid": {"half_width": 4.0, "spacing": 0.125},
        "omega": [{"kind": "interval", "center": [0.0], "radius": 1.0}],
        "exterior_data": {"family": "smooth_bump", "bumps": [{"center": [2.0], "radius": 1.0, "amplitude": 1.0}]},
        "solver": {"p_schedule": [2.0, 4.0, 8.0, 16.0]},
        "seed": 0,
        "output_dir": "runs",
    }
    data.update(overrides)
    return data


@pytest.fixture
def config_data():
    """Factory for raw config mappings based on the coarse 1D scenario."""
    return small_config_data


@pytest.fixture
def new_db():
    reset_db()
    yield
    reset_db()


@pytest.fixture
def small_config() -> RunConfig:
    return validate_config(small_config_data())


@pytest.fixture
def small_problem(small_config):
    return build_problem(small_config)


@pytest.fixture
def symmetric_problem():
    """Even exterior data (bumps at -2 and 2) on an even domain."""
    bumps = [
        {"center": [-2.0], "radius": 1.0, "amplitude": 1.0},
        {"center": [2.0], "radius": 1.0, "amplitude": 1.0},
    ]
    data = small_config_data(exterior_data={"family": "smooth_bump", "bumps": bumps})
    return build_problem(validate_config(data))


@pytest.fixture(scope="module")
def solved_small():
    """(problem, continuation result) for the coarse 1D scenario, shared within a module."""
    config = validate_config(small_config_data())
    spec = build_problem(config)
    return spec, continuation(spec, config.solver.p_schedule, config.solver)


@pytest.fixture
def solver_settings() -> SolverSettings:
    return SolverSettings()
