import math

import hypothesis.extra.numpy as hnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gamma, hyp1f1

from app.domain_grid import ScalarField, build_grid, field_from_function
from app.errors import OperatorError, SupremandError
from app.fraclap import SupremandF, apply, build_operator, check_supremand, cns_constant, tail_field
from app.models import OperatorMode, SupremandKind


def gaussian_fraclap(points: np.ndarray, s: float) -> np.ndarray:
    """(-Delta)^s exp(-|x|^2) in closed form."""
    n = points.shape[1]
    r2 = np.sum(points**2, axis=1)
    return 4**s * gamma(n / 2 + s) / gamma(n / 2) * hyp1f1(n / 2 + s, n / 2, -r2)


class TestNormalisationConstant:
    def test_known_values(self):
        assert cns_constant(1, 0.25) == pytest.approx(0.19947114, rel=1e-7)
        assert cns_constant(1, 0.5) == pytest.approx(1 / math.pi, rel=1e-14)
        assert cns_constant(2, 0.5) == pytest.approx(1 / (2 * math.pi), rel=1e-14)

    @pytest.mark.parametrize("s", [0.0, 1.0, -0.5])
    def test_order_out_of_range(self, s):
        with pytest.raises(OperatorError):
            cns_constant(1, s)


class TestOperatorStructure:
    def test_dense_matrix_is_symmetric(self):
        op = build_operator(build_grid(1, 2.0, 0.125), 0.25)
        A = op.dense_matrix()

        assert op.is_dense
        assert np.allclose(A, A.T, rtol=1e-14, atol=0)

    def test_off_diagonal_entries_are_nonpositive(self):
        op = build_operator(build_grid(2, 1.0, 0.125), 0.75)
        A = op.dense_matrix()
        off = A[~np.eye(A.shape[0], dtype=bool)]

        assert np.all(op.stencil >= 0)
        assert np.all(off <= 0)
        assert np.all(np.diag(A) > 0)

    @pytest.mark.parametrize("s", [0.75, 0.9])
    @pytest.mark.parametrize("L, h", [(1.0, 0.25), (2.0, 0.125), (2.0, 0.0625)])
    def test_high_order_planar_stencil_stays_nonnegative(self, L, h, s):
        op = build_operator(build_grid(2, L, h), s)

        assert np.all(op.stencil >= 0)
        assert 0 < op.blend <= 1
        assert np.all(op.row_sums > 0)

    @pytest.mark.parametrize("s", [0.25, 0.5])
    def test_line_stencil_keeps_full_corrections(self, s):
        assert build_operator(build_grid(1, 2.0, 0.125), s).blend == 1.0

    def test_difference_part_annihilates_constants(self):
        grid = build_grid(1, 2.0, 0.125)
        op = build_operator(grid, 0.25, OperatorMode.DIFFERENCE_ONLY)
        ones = np.ones(grid.node_count)

        assert np.max(np.abs(op.apply_array(ones))) <= 1e-10 * np.max(op.row_sums)

    def test_tail_only_adds_to_diagonal(self):
        grid = build_grid(1, 2.0, 0.125)
        with_tail = build_operator(grid, 0.25, OperatorMode.WITH_TAIL)
        without = build_operator(grid, 0.25, OperatorMode.DIFFERENCE_ONLY)
        difference = with_tail.dense_matrix() - without.dense_matrix()

        assert np.allclose(difference, np.diag(with_tail.tail + with_tail.boundary_correction))
        assert np.all(with_tail.tail > 0)

    def test_one_dimensional_tail_closed_form(self):
        grid = build_grid(1, 2.0, 0.25)
        tail = tail_field(grid, 0.25)
        reach = 2.0 + 0.125
        expected = cns_constant(1, 0.25) * 2 * reach ** (-0.5) / 0.5

        assert tail[grid.cells_per_half] == pytest.approx(expected, rel=1e-14)

    def test_two_dimensional_tail_is_symmetric(self):
        grid = build_grid(2, 1.0, 0.25)
        tail = grid.to_array(tail_field(grid, 0.5))

        assert np.allclose(tail, tail[::-1, :], rtol=1e-9)
        assert np.allclose(tail, tail.T, rtol=1e-9)
        assert tail[4, 4] == tail.min()

    @pytest.mark.parametrize("n, L, h, s", [(1, 2.0, 0.0625, 0.25), (2, 1.0, 0.125, 0.75)])
    def test_matrix_free_matches_dense(self, n, L, h, s):
        grid = build_grid(n, L, h)
        dense = build_operator(grid, s)
        free = build_operator(grid, s, dense_limit=1)
        u = np.random.default_rng(3).uniform(-1, 1, grid.node_count)

        assert not free.is_dense
        assert np.allclose(free.apply_array(u), dense.apply_array(u), rtol=1e-10, atol=1e-10)
        assert np.allclose(free.diagonal, dense.diagonal, rtol=1e-10)

    def test_matrix_free_columns(self):
        grid = build_grid(2, 1.0, 0.125)
        dense = build_operator(grid, 0.75)
        free = build_operator(grid, 0.75, dense_limit=1)
        picks = np.array([0, 40, 144, 200])

        assert np.allclose(free.columns(picks), dense.dense_matrix()[:, picks], rtol=1e-10, atol=1e-10)

    def test_apply_checks_grid(self):
        op = build_operator(build_grid(1, 2.0, 0.25), 0.25)
        other = build_grid(1, 2.0, 0.125)

        with pytest.raises(OperatorError):
            apply(op, ScalarField(other, np.zeros(other.node_count)))
        with pytest.raises(OperatorError):
            op.apply_array(np.zeros(3))

    @given(
        hnp.arrays(np.float64, 33, elements=st.floats(-1, 1)),
        hnp.arrays(np.float64, 33, elements=st.floats(-1, 1)),
    )
    @settings(max_examples=50, deadline=None)
    def test_bilinear_form_is_symmetric(self, u, v):
        op = _SYMMETRY_OPERATOR
        scale = float(np.max(op.diagonal))

        assert abs(u @ op.apply_array(v) - v @ op.apply_array(u)) <= 1e-11 * scale * 33


_SYMMETRY_OPERATOR = build_operator(build_grid(1, 2.0, 0.125), 0.4)


class TestOperatorAccuracy:
    def test_gaussian_matches_closed_form(self):
        s = 0.25
        errors = []
        for h in (1 / 16, 1 / 32):
            grid = build_grid(1, 5.0, h)
            op = build_operator(grid, s)
            u = field_from_function(grid, lambda points: np.exp(-np.sum(points**2, axis=1)))
            probes = np.flatnonzero(np.abs(grid.coords[:, 0]) <= 1.0)
            exact = gaussian_fraclap(grid.coords[probes], s)
            errors.append(np.max(np.abs(op.apply_array(u.values)[probes] - exact) / np.abs(exact)))

        assert errors[1] <= 5e-3
        assert errors[0] / errors[1] >= 1.5

    @pytest.mark.slow
    def test_two_dimensional_gaussian(self):
        s = 0.75
        grid = build_grid(2, 3.0, 0.125)
        op = build_operator(grid, s)
        u = field_from_function(grid, lambda points: np.exp(-np.sum(points**2, axis=1)))
        probes = np.flatnonzero(grid.radii <= 0.5)
        exact = gaussian_fraclap(grid.coords[probes], s)

        assert np.max(np.abs(op.apply_array(u.values)[probes] - exact) / np.abs(exact)) <= 5e-2

    def test_torsion_profile_is_constant_inside(self):
        # (-Delta)^s (1 - x^2)_+^s = Gamma(1 + 2s) on (-1, 1) in one dimension.
        s = 0.5
        grid = build_grid(1, 2.0, 1 / 128)
        op = build_operator(grid, s)
        u = field_from_function(grid, lambda points: np.clip(1 - points[:, 0] ** 2, 0, None) ** s)
        probes = np.flatnonzero(np.abs(grid.coords[:, 0]) <= 0.5)
        expected = 4**s * gamma(1 + s) * gamma(0.5 + s) / gamma(0.5)

        assert expected == pytest.approx(math.gamma(1 + 2 * s))
        assert np.allclose(op.apply_array(u.values)[probes], expected, rtol=5e-2)


class TestSupremand:
    @pytest.mark.parametrize("kind", list(SupremandKind))
    def test_structural_conditions_hold(self, kind):
        grid = build_grid(1, 2.0, 0.25)
        supremand = SupremandF(kind=kind, scale=2.0)

        check_supremand(supremand, grid)
        assert np.all(supremand.F(grid.coords, np.zeros(grid.node_count)) == 0)

    def test_derivative_bounds(self):
        assert SupremandF().c_bound == 1.0
        assert SupremandF(kind=SupremandKind.SCALED, scale=4.0).c_bound == 0.25
        assert SupremandF(kind=SupremandKind.WEIGHTED_LINEAR, alpha=0.5).c_bound == pytest.approx(2 / 3)

    def test_tanh_derivatives_are_consistent(self):
        supremand = SupremandF(kind=SupremandKind.TANH_PERTURBED, beta=0.25)
        x = np.zeros((5, 1))
        xi = np.linspace(-2, 2, 5)
        step = 1e-6
        numeric = (supremand.F(x, xi + step) - supremand.F(x, xi - step)) / (2 * step)

        assert np.allclose(numeric, supremand.F_xi(x, xi), rtol=1e-8)
        assert not supremand.is_linear

    def test_rescaling(self):
        scaled = SupremandF().rescaled(3.0)

        assert scaled.kind == SupremandKind.SCALED
        assert scaled.F(np.zeros((1, 1)), np.array([2.0]))[0] == 6.0
        with pytest.raises(SupremandError):
            SupremandF(kind=SupremandKind.TANH_PERTURBED).rescaled(2.0)
