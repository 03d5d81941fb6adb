import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.domain_grid import (
    BumpSpec,
    ExteriorData,
    OmegaShape,
    ScalarField,
    build_domain,
    build_grid,
    build_weight,
    field_from_function,
    sample_exterior_data,
)
from app.errors import DomainError, ExteriorDataError, GridError
from app.models import ExteriorFamily, WeightKind


class TestGrid:
    def test_one_dimensional_lattice(self):
        grid = build_grid(1, 4.0, 0.125)

        assert grid.cells_per_half == 32
        assert grid.node_count == 65
        assert grid.spacing == 0.125
        assert not grid.was_rounded
        assert grid.axis[0] == -4.0
        assert grid.axis[-1] == 4.0
        assert grid.axis[32] == 0.0

    def test_two_dimensional_ordering(self):
        grid = build_grid(2, 1.0, 0.5)

        assert grid.shape == (5, 5)
        assert grid.node_count == 25
        assert grid.cell_volume == 0.25
        # Row-major: the second coordinate varies fastest.
        assert np.allclose(grid.coords[1], [-1.0, -0.5])
        assert np.allclose(grid.coords[5], [-0.5, -1.0])

    def test_spacing_that_does_not_divide_is_refined(self):
        grid = build_grid(1, 1.0, 0.3)

        assert grid.was_rounded
        assert grid.cells_per_half == 4
        assert grid.spacing == 0.25

    def test_boundary_mask_is_outer_layer(self):
        grid = build_grid(2, 1.0, 0.25)
        mask = grid.to_array(grid.boundary_mask)

        assert mask[0].all() and mask[-1].all() and mask[:, 0].all() and mask[:, -1].all()
        assert not mask[1:-1, 1:-1].any()

    @pytest.mark.parametrize("n, L, h", [(3, 1.0, 0.1), (1, -1.0, 0.1), (1, 1.0, 0.0), (1, 1.0, 2.0)])
    def test_invalid_grid(self, n, L, h):
        with pytest.raises(GridError):
            build_grid(n, L, h)

    @given(st.integers(min_value=1, max_value=2), st.integers(min_value=1, max_value=24))
    @settings(max_examples=30, deadline=None)
    def test_axis_is_symmetric(self, n, m):
        grid = build_grid(n, 2.0, 2.0 / m)

        assert np.array_equal(grid.axis, -grid.axis[::-1])
        assert grid.node_count == (2 * m + 1) ** n


class TestDomain:
    def test_interval_uses_whole_cells(self):
        grid = build_grid(1, 4.0, 0.125)
        domain = build_domain(grid, [OmegaShape.interval(-1.0, 1.0)])
        inside = grid.coords[domain.interior_indices, 0]

        assert inside.min() == pytest.approx(-0.875)
        assert inside.max() == pytest.approx(0.875)
        assert domain.interior_count == 15
        assert domain.measure == pytest.approx(15 * 0.125)
        assert not np.any(domain.interior_mask & domain.exterior_mask)

    def test_union_of_shapes(self):
        grid = build_grid(1, 4.0, 0.25)
        left = build_domain(grid, [OmegaShape.interval(-2.0, -1.0)])
        both = build_domain(grid, [OmegaShape.interval(-2.0, -1.0), OmegaShape.interval(1.0, 2.0)])

        assert both.interior_count == 2 * left.interior_count

    def test_ball_in_two_dimensions(self):
        grid = build_grid(2, 2.0, 0.125)
        domain = build_domain(grid, [OmegaShape.ball([0.0, 0.0], 0.75)])
        radii = np.linalg.norm(grid.coords[domain.interior_indices], axis=1)

        assert radii.max() < 0.75
        assert domain.interior_mask[np.argmin(grid.radii)]

    def test_domain_must_stay_inside_box(self):
        grid = build_grid(1, 1.0, 0.25)

        with pytest.raises(DomainError):
            build_domain(grid, [OmegaShape.interval(-1.0, 0.5)])

    def test_domain_without_nodes(self):
        grid = build_grid(1, 4.0, 0.5)

        with pytest.raises(DomainError):
            build_domain(grid, [OmegaShape.interval(0.1, 0.3)])

    def test_interval_rejected_in_two_dimensions(self):
        grid = build_grid(2, 2.0, 0.25)

        with pytest.raises(DomainError):
            build_domain(grid, [OmegaShape.interval(-1.0, 1.0)])


class TestFields:
    def test_scalar_field_is_read_only(self):
        grid = build_grid(1, 1.0, 0.25)
        field = ScalarField(grid, np.zeros(grid.node_count))

        with pytest.raises(ValueError):
            field.values[0] = 1.0

    def test_scalar_field_rejects_bad_values(self):
        grid = build_grid(1, 1.0, 0.25)

        with pytest.raises(GridError):
            ScalarField(grid, np.zeros(3))
        with pytest.raises(GridError):
            ScalarField(grid, np.full(grid.node_count, math.nan))

    @pytest.mark.parametrize("kind", [WeightKind.GAUSSIAN, WeightKind.RATIONAL])
    def test_weight_has_unit_mass(self, kind):
        grid = build_grid(2, 3.0, 0.25)
        weight = build_weight(grid, kind)

        assert weight.mass() == pytest.approx(1.0, abs=1e-12)
        assert np.all(weight.values > 0)
        assert weight.normalization_constant > 0

    def test_field_from_function(self):
        grid = build_grid(1, 1.0, 0.5)
        field = field_from_function(grid, lambda points: points[:, 0] ** 2)

        assert np.allclose(field.values, [1.0, 0.25, 0.0, 0.25, 1.0])


class TestExteriorData:
    def setup_method(self):
        self.grid = build_grid(1, 4.0, 0.125)
        self.domain = build_domain(self.grid, [OmegaShape.interval(-1.0, 1.0)])

    def test_smooth_bump_sampling(self):
        spec = ExteriorData(ExteriorFamily.SMOOTH_BUMP, (BumpSpec((2.0,), 1.0, 1.0),))
        u0 = sample_exterior_data(spec, self.grid, self.domain)
        peak = int(np.argmin(np.abs(self.grid.coords[:, 0] - 2.0)))

        assert u0.values[peak] == pytest.approx(1.0)
        assert np.all(u0.values[self.grid.boundary_mask] == 0)
        assert np.all(u0.values >= 0)

    def test_polynomial_spline_family(self):
        spec = ExteriorData(ExteriorFamily.POLYNOMIAL_SPLINE, (BumpSpec((-2.0,), 1.0, -0.5),))
        u0 = sample_exterior_data(spec, self.grid, self.domain)

        assert u0.values.min() == pytest.approx(-0.5)

    def test_trivial_exterior_data_is_rejected(self):
        spec = ExteriorData(ExteriorFamily.SMOOTH_BUMP, ())

        with pytest.raises(ExteriorDataError, match="trivial exterior data"):
            sample_exterior_data(spec, self.grid, self.domain)

    def test_trivial_exterior_data_allowed_when_requested(self):
        spec = ExteriorData(ExteriorFamily.SMOOTH_BUMP, ())
        u0 = sample_exterior_data(spec, self.grid, self.domain, allow_trivial=True)

        assert u0.max_abs() == 0.0

    def test_bump_support_must_fit_in_box(self):
        spec = ExteriorData(ExteriorFamily.SMOOTH_BUMP, (BumpSpec((3.5,), 1.0, 1.0),))

        with pytest.raises(ExteriorDataError):
            sample_exterior_data(spec, self.grid, self.domain)

    def test_custom_samples_must_vanish_on_outer_layer(self):
        samples = np.ones(self.grid.node_count)
        spec = ExteriorData(ExteriorFamily.CUSTOM_SAMPLES, samples=tuple(samples))

        with pytest.raises(ExteriorDataError):
            sample_exterior_data(spec, self.grid, self.domain)

    def test_custom_samples(self):
        samples = np.zeros(self.grid.node_count)
        samples[10] = 0.5
        spec = ExteriorData(ExteriorFamily.CUSTOM_SAMPLES, samples=tuple(samples))
        u0 = sample_exterior_data(spec, self.grid, self.domain)

        assert u0.values[10] == 0.5
