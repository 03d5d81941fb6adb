import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.special import gamma, hyp1f1

from app.errors import OracleConvergenceError
from app.fraclap import cns_constant
from app.quadrature import (
    gaussian,
    kelvin_identity_check,
    kelvin_map,
    kelvin_transform,
    ReferenceFunction,
    analytic_test_functions,
    cubic_spline,
    operator_accuracy,
    oracle_slap,
    smooth_bump,
)


def gaussian_reference(x: float, n: int, s: float) -> float:
    return 4**s * gamma(n / 2 + s) / gamma(n / 2) * hyp1f1(n / 2 + s, n / 2, -(x**2))


class TestOracle:
    @pytest.mark.parametrize("x", [0.0, 0.3, 1.0])
    def test_gaussian_in_one_dimension(self, x):
        value = oracle_slap(gaussian(1.0), [x], 0.25, tol=1e-10, decay_radius=10.0)

        assert value == pytest.approx(gaussian_reference(x, 1, 0.25), rel=1e-8)

    def test_gaussian_in_two_dimensions(self):
        value = oracle_slap(gaussian(1.0), [0.5, 0.0], 0.5, tol=1e-9, decay_radius=10.0)

        assert value == pytest.approx(gaussian_reference(0.5, 2, 0.5), rel=1e-6)

    def test_zero_function(self):
        value = oracle_slap(lambda points: np.zeros(len(points)), [0.2], 0.4)

        assert value == 0.0

    def test_outside_the_support_is_a_plain_integral(self):
        s = 0.25
        bump = smooth_bump([0.0], 1.0)
        direct, _ = quad(lambda y: bump(np.array([[y]]))[0] * (3.0 - y) ** (-1 - 2 * s), -1, 1, epsabs=1e-13)
        value = oracle_slap(bump, [3.0], s, decay_radius=5.0)

        assert value < 0
        assert value == pytest.approx(-cns_constant(1, s) * direct, rel=1e-7)

    def test_full_output(self):
        estimate = oracle_slap(smooth_bump([0.0], 1.0), [0.0], 0.5, decay_radius=3.0, full_output=True)

        assert estimate.value > 0
        assert estimate.error <= 1e-10
        assert estimate.evaluations > 0

    def test_unreachable_tolerance(self):
        with pytest.raises(OracleConvergenceError):
            oracle_slap(gaussian(1.0), [0.0], 0.25, tol=1e-30, decay_radius=10.0)

    @pytest.mark.parametrize("s", [0.25, 0.5, 0.75, 0.9])
    def test_tight_tolerance_for_every_order(self, s):
        estimate = oracle_slap(gaussian(1.0), [0.3], s, tol=1e-10, decay_radius=10.0, full_output=True)

        assert estimate.error <= 1e-10
        assert estimate.value == pytest.approx(gaussian_reference(0.3, 1, s), rel=1e-8)

    def test_narrow_gaussian_at_the_centre(self):
        estimate = oracle_slap(gaussian(0.5), [0.0], 0.4, tol=1e-10, decay_radius=18.0, full_output=True)

        assert estimate.error <= 1e-10
        assert estimate.value == pytest.approx(4**0.4 * gaussian_reference(0.0, 1, 0.4), rel=1e-8)

    @pytest.mark.parametrize("x", [0.0, 0.3, 0.9])
    def test_spline_with_breakpoints(self, x):
        spline = analytic_test_functions(1)["spline"]
        kinks = spline.kink_radii([x])
        estimate = oracle_slap(spline, [x], 0.5, tol=1e-10, decay_radius=6.0, full_output=True, kinks=kinks)

        assert estimate.error <= 1e-10

    @pytest.mark.parametrize("s", [0.25, 0.75])
    def test_refining_tolerance_stays_within_the_estimate(self, s):
        spline = analytic_test_functions(1)["spline"]
        kinks = spline.kink_radii([0.4])
        loose = oracle_slap(spline, [0.4], s, tol=1e-8, decay_radius=6.0, full_output=True, kinks=kinks)
        tight = oracle_slap(spline, [0.4], s, tol=1e-9, decay_radius=6.0, full_output=True, kinks=kinks)

        assert abs(tight.value - loose.value) <= loose.error + tight.error


class TestReferenceFunctions:
    def test_kink_radii(self):
        spline = ReferenceFunction(cubic_spline([0.0], 1.0), kinked_supports=(((0.0,), 1.0),))

        assert spline.kink_radii([0.25]) == pytest.approx([0.75, 1.25])
        assert spline.kink_radii([0.0]) == pytest.approx([1.0])
        assert ReferenceFunction(gaussian(1.0)).kink_radii([0.3]) == []

    def test_two_dimensional_set(self):
        functions = analytic_test_functions(2)

        assert set(functions) == {"gaussian", "bump", "spline", "shifted_bump", "product"}
        assert functions["spline"].kink_radii([0.6, 0.8]) == pytest.approx([2.0])
        assert functions["bump"](np.zeros((1, 2)))[0] == pytest.approx(1.0)


class TestKelvin:
    @given(st.floats(min_value=0.1, max_value=10.0), st.floats(min_value=0.5, max_value=2.0))
    @settings(max_examples=50, deadline=None)
    def test_inversion_is_involutive(self, y, r):
        point = np.array([[y]])

        assert kelvin_map(kelvin_map(point, r, [0.0]), r, [0.0])[0, 0] == pytest.approx(y, rel=1e-12)

    def test_inversion_fixes_the_sphere(self):
        points = np.array([[1.0, 0.0], [0.0, -1.0], [np.sqrt(0.5), np.sqrt(0.5)]])

        assert np.allclose(kelvin_map(points, 1.0, [0.0, 0.0]), points)

    def test_transform_is_involutive(self):
        f = smooth_bump([2.0], 0.5)
        twice = kelvin_transform(kelvin_transform(f, 1.0, [0.0], 0.25), 1.0, [0.0], 0.25)
        points = np.linspace(1.2, 3.0, 25)[:, None]

        assert np.allclose(twice(points), f(points), atol=1e-14)

    def test_transform_vanishes_at_center(self):
        transformed = kelvin_transform(smooth_bump([2.0], 0.5), 1.0, [0.0], 0.25)

        assert transformed(np.array([[0.0]]))[0] == 0.0

    def test_identity_holds(self):
        check = kelvin_identity_check(0.25, probe_count=6, tol=1e-6)

        assert len(check.probes) == 6
        assert check.passed()


@pytest.mark.slow
class TestOperatorAccuracyReport:
    def test_one_dimensional_convergence(self):
        report = operator_accuracy(1, 0.25, half_width=2.0, spacing=1 / 16, probe_count=5)

        assert report.probe_count == 5
        assert {row.function for row in report.rows} == {"gaussian", "bump", "spline", "shifted_bump"}
        assert report.passed()

    def test_wide_box_fine_grid(self):
        report = operator_accuracy(1, 0.25, half_width=8.0, spacing=1 / 64, probe_count=5)

        assert all(row.unconverged == 0 for row in report.rows)
        assert report.passed()

    def test_three_quarter_order_keeps_every_node(self):
        report = operator_accuracy(1, 0.75, half_width=2.0, spacing=1 / 16, probe_count=5)

        assert all(row.unconverged == 0 for row in report.rows)
        assert all(row.error_fine < row.error_coarse for row in report.rows)


class TestAccuracyTable:
    def test_unconverged_nodes_are_reported(self):
        functions = {"gaussian": ReferenceFunction(gaussian(0.5))}
        report = operator_accuracy(
            1, 0.25, half_width=1.0, spacing=1 / 8, probe_count=3, functions=functions, tol=1e-30
        )

        (row,) = report.rows
        assert row.unconverged == 3
        assert np.isnan(row.error_coarse)
        assert not report.passed()
