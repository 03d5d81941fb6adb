import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.config import build_problem, validate_config
from app.domain_grid import (
    BumpSpec,
    ExteriorData,
    OmegaShape,
    ScalarField,
    build_domain,
    build_grid,
    build_weight,
    sample_exterior_data,
)
from app.errors import SolverError
from app.fraclap import build_operator
from app.lp_solver import (
    StageResult,
    _solve_spd,
    assemble_problem,
    continuation,
    eval_Ep,
    extrapolate_e_inf,
    grad_Ep_p,
    penalized_chain_holds,
    solve_p,
    solve_penalized,
    weighted_lp_norm,
)
from app.models import ExteriorFamily, WeightKind
from app.verify import random_feasible_start


class TestWeightedNorm:
    def test_constant_field(self):
        grid = build_grid(1, 2.0, 0.25)
        weight = build_weight(grid, WeightKind.GAUSSIAN)
        values = np.full(grid.node_count, 3.0)

        assert weighted_lp_norm(values, weight.values, grid.cell_volume, 8.0) == pytest.approx(3.0, rel=1e-12)

    def test_zero_field(self):
        assert weighted_lp_norm(np.zeros(4), np.full(4, 0.25), 1.0, 2.0) == 0.0

    @given(st.floats(min_value=2.0, max_value=512.0), st.floats(min_value=1e-3, max_value=1e3))
    @settings(max_examples=50, deadline=None)
    def test_large_exponents_stay_finite(self, p, magnitude):
        values = magnitude * np.array([1.0, -0.5, 0.25, 0.0])
        weight = np.full(4, 0.25)
        norm = weighted_lp_norm(values, weight, 1.0, p)

        assert math.isfinite(norm)
        assert norm <= magnitude * (1 + 1e-12)

    def test_norm_increases_with_p(self):
        grid = build_grid(1, 2.0, 0.25)
        weight = build_weight(grid, WeightKind.RATIONAL)
        values = np.sin(3 * grid.coords[:, 0])
        norms = [weighted_lp_norm(values, weight.values, grid.cell_volume, p) for p in (2, 4, 8, 16, 64)]

        assert all(b >= a for a, b in zip(norms, norms[1:]))


class TestProblemAssembly:
    def test_requires_n_above_two_s(self):
        grid = build_grid(1, 4.0, 0.25)
        domain = build_domain(grid, [OmegaShape.interval(-1.0, 1.0)])
        u0 = sample_exterior_data(ExteriorData(ExteriorFamily.SMOOTH_BUMP, (BumpSpec((2.0,), 1.0),)), grid, domain)
        operator = build_operator(grid, 0.5)

        with pytest.raises(SolverError, match="n > 2s"):
            assemble_problem(domain, operator, build_weight(grid, WeightKind.GAUSSIAN), u0)

    def test_offset_and_columns_reproduce_the_operator(self, small_problem):
        spec = small_problem
        x = np.linspace(-1, 1, spec.interior.size)
        u = spec.competitor(x)

        assert np.allclose(spec.offset + spec.interior_columns @ x, spec.operator.apply_array(u.values), atol=1e-12)

    def test_competitor_must_match_exterior_data(self, small_problem):
        with pytest.raises(SolverError):
            eval_Ep(small_problem, ScalarField(small_problem.grid, np.zeros(small_problem.grid.node_count)), 2.0)

    def test_degenerate_scenario_needs_permission(self):
        grid = build_grid(1, 4.0, 0.25)
        domain = build_domain(grid, [OmegaShape.interval(-1.0, 1.0)])
        u0 = ScalarField(grid, np.zeros(grid.node_count))
        operator = build_operator(grid, 0.25)
        weight = build_weight(grid, WeightKind.GAUSSIAN)

        with pytest.raises(SolverError):
            assemble_problem(domain, operator, weight, u0)
        assert assemble_problem(domain, operator, weight, u0, allow_degenerate=True).degenerate


class TestGradient:
    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("p", [2.0, 4.0, 8.0])
    def test_matches_finite_differences(self, small_problem, p, seed):
        spec = small_problem
        u = random_feasible_start(spec, seed=seed)
        gradient = grad_Ep_p(spec, u, p).values
        step = 1e-6

        for node in spec.interior[::4]:
            plus = np.array(u.values)
            minus = np.array(u.values)
            plus[node] += step
            minus[node] -= step
            upper = eval_Ep(spec, ScalarField(spec.grid, plus), p) ** p
            lower = eval_Ep(spec, ScalarField(spec.grid, minus), p) ** p
            numeric = (upper - lower) / (2 * step)
            assert gradient[node] == pytest.approx(numeric, rel=1e-5, abs=1e-9)

    def test_vanishes_outside_the_domain(self, small_problem):
        u = random_feasible_start(small_problem, seed=1)
        gradient = grad_Ep_p(small_problem, u, 2.0).values

        assert np.all(gradient[small_problem.domain.exterior_mask] == 0)


class TestSolveP:
    def test_stage_is_a_feasible_minimiser(self, small_problem):
        spec = small_problem
        stage = solve_p(spec, 2.0)

        assert stage.converged
        spec.check_competitor(stage.u_p)
        assert stage.e_p == pytest.approx(eval_Ep(spec, stage.u_p, 2.0), rel=1e-14)

        rng = np.random.default_rng(0)
        for _ in range(5):
            values = np.array(stage.u_p.values)
            values[spec.interior] += 1e-3 * rng.uniform(-1, 1, spec.interior.size)
            assert eval_Ep(spec, ScalarField(spec.grid, values), 2.0) >= stage.e_p

    def test_warm_start_does_not_change_the_minimiser(self, small_problem):
        spec = small_problem
        cold = solve_p(spec, 4.0)
        warm = solve_p(spec, 4.0, warm_start=random_feasible_start(spec, seed=11))

        assert cold.converged and warm.converged
        assert np.allclose(cold.u_p.values, warm.u_p.values, atol=1e-6)
        assert warm.e_p == pytest.approx(cold.e_p, rel=1e-10)

    def test_even_data_gives_even_minimiser(self, symmetric_problem):
        stage = solve_p(symmetric_problem, 4.0)
        values = stage.u_p.values

        assert stage.converged
        assert np.allclose(values, values[::-1], atol=1e-7)

    def test_rejects_small_exponent(self, small_problem):
        with pytest.raises(SolverError):
            solve_p(small_problem, 1.5)

    def test_degenerate_stage_is_zero(self, config_data):
        data = config_data(exterior_data={"bumps": [], "allow_degenerate": True})
        spec = build_problem(validate_config(data))
        stage = solve_p(spec, 8.0)

        assert spec.degenerate
        assert stage.e_p == 0.0
        assert stage.u_p.max_abs() == 0.0
        assert stage.converged


class TestContinuation:
    def test_trajectory_is_monotone(self, solved_small):
        _, result = solved_small
        values = [stage.e_p for stage in result.stages]

        assert result.all_converged
        assert result.p_schedule == (2.0, 4.0, 8.0, 16.0)
        assert all(b >= a - 1e-10 * (1 + b) for a, b in zip(values, values[1:]))
        assert result.e_inf_estimate == values[-1]
        assert result.e_inf_extrapolated is not None

    def test_large_exponent_stays_finite(self, solved_small):
        spec, result = solved_small
        stage = solve_p(spec, 256.0, warm_start=result.u_inf_estimate)

        assert math.isfinite(stage.e_p)
        assert math.isfinite(stage.gradient_norm)
        assert stage.e_p >= result.e_inf_estimate * (1 - 1e-8)

    @pytest.mark.parametrize("schedule", [[], [1.0, 2.0], [4.0, 2.0], [2.0, 2.0]])
    def test_invalid_schedules(self, small_problem, schedule):
        with pytest.raises(SolverError):
            continuation(small_problem, schedule)

    def test_extrapolation_recovers_intercept(self):
        grid = build_grid(1, 1.0, 0.5)
        zero = ScalarField(grid, np.zeros(grid.node_count))
        stages = [
            StageResult(p=p, u_p=zero, e_p=2.0 - 1.0 / p, gradient_norm=0.0, iterations=0) for p in (4, 8, 16, 32)
        ]

        assert extrapolate_e_inf(stages) == pytest.approx(2.0, rel=1e-12)
        assert extrapolate_e_inf(stages[:1]) is None


class TestPenalizedRoute:
    def test_chain_of_inequalities(self, solved_small):
        spec, result = solved_small
        stage = result.stages[1]
        target = random_feasible_start(spec, seed=5)
        penalized = solve_penalized(spec, stage.p, target)

        assert penalized.penalized_value is not None
        assert penalized.penalty is not None and penalized.penalty >= 0
        assert penalized_chain_holds(stage.e_p, penalized, eval_Ep(spec, target, stage.p), slack=1e-8)

    def test_target_at_the_minimiser_stays_put(self, solved_small):
        spec, result = solved_small
        stage = result.stages[0]
        penalized = solve_penalized(spec, stage.p, stage.u_p)

        assert np.max(np.abs(penalized.u_p.values - stage.u_p.values)) <= 1e-5
        assert penalized.e_p == pytest.approx(stage.e_p, rel=1e-8)

    def test_chain_needs_penalized_stage(self, solved_small):
        _, result = solved_small
        stage = result.stages[0]

        with pytest.raises(SolverError):
            penalized_chain_holds(stage.e_p, stage, stage.e_p)


def planar_config_data(spacing: float, s: float = 0.5) -> dict:
    return {
        "dim": 2,
        "s": s,
        "grid": {"half_width": 2.0, "spacing": spacing},
        "omega": [{"kind": "ball", "center": [0.0, 0.0], "radius": 0.75}],
        "exterior_data": {"bumps": [{"center": [1.25, 0.0], "radius": 0.6}]},
        "solver": {"p_schedule": [2.0, 4.0, 8.0, 16.0]},
    }


class TestPlanarProblems:
    def test_coarse_stage_is_a_feasible_minimiser(self):
        spec = build_problem(validate_config(planar_config_data(0.25)))
        stage = solve_p(spec, 4.0)

        assert stage.converged
        spec.check_competitor(stage.u_p)
        rng = np.random.default_rng(3)
        for _ in range(5):
            values = np.array(stage.u_p.values)
            values[spec.interior] += 1e-3 * rng.uniform(-1, 1, spec.interior.size)
            assert eval_Ep(spec, ScalarField(spec.grid, values), 4.0) >= stage.e_p

    @pytest.mark.slow
    @pytest.mark.parametrize("s", [0.5, 0.75])
    def test_continuation_is_monotone(self, s):
        config = validate_config(planar_config_data(0.125, s))
        spec = build_problem(config)
        result = continuation(spec, config.solver.p_schedule, config.solver)
        values = [stage.e_p for stage in result.stages]

        assert result.all_converged
        assert all(b >= a - 1e-10 * (1 + b) for a, b in zip(values, values[1:]))
        assert math.isfinite(result.e_inf_estimate)


class TestLinearSolve:
    def test_indefinite_system_falls_back_to_least_squares(self, caplog):
        matrix = np.diag([2.0, -1.0])

        with caplog.at_level("DEBUG", logger="app.lp_solver"):
            solution = _solve_spd(matrix, np.array([4.0, 3.0]))

        assert np.allclose(solution, [2.0, -3.0])
        assert any("Cholesky failed with jitter" in record.message for record in caplog.records)
        assert any("least squares" in record.message for record in caplog.records)
