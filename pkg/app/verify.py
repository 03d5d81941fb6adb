import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from app.domain_grid import ScalarField
from app.dual_measure import DualField, MeasureDiagnostics, duality_identity
from app.errors import VerificationError
from app.lp_solver import (
    ContinuationResult,
    ProblemSpec,
    StageResult,
    continuation,
    eval_Ep,
    penalized_chain_holds,
    solve_p,
    solve_penalized,
)
from app.models import (
    CheckResult,
    CheckStatus,
    FullReport,
    ReportProvenance,
    SolverSettings,
    StageSummary,
    VerifySettings,
)

logger = logging.getLogger(__name__)

VALUE_MARGIN = 1e-8


@dataclass(frozen=True, eq=False)
class SaturationReport:
    p: float
    ratio_field: ScalarField
    saturated_fraction: dict[float, float]
    excluding_band: dict[float, float]


@dataclass(frozen=True)
class ExteriorDecayReport:
    radii: list[float]
    shell_max: list[float]
    decay_exponent: Optional[float]
    expected_exponent: float

    @property
    def nonincreasing(self) -> bool:
        return all(b <= a for a, b in zip(self.shell_max, self.shell_max[1:]))

    def exponent_within(self, rel_tol: float) -> bool:
        if self.decay_exponent is None:
            return True
        return abs(self.decay_exponent - self.expected_exponent) <= rel_tol * self.expected_exponent


@dataclass(frozen=True, eq=False)
class UniquenessReport:
    pair_distance: float
    relative_distance: float
    average_test: dict[float, float]
    # Saturated fractions of each path, keyed by path name and then tau.
    path_saturation: dict[str, dict[float, float]]
    seed: int
    penalized_distance: Optional[float] = None
    penalized_chain: Optional[bool] = None

    @property
    def saturation_gap(self) -> float:
        """Largest |average - path| saturated fraction over both paths and every tau."""
        gaps = [
            abs(self.average_test[tau] - fractions[tau])
            for fractions in self.path_saturation.values()
            for tau in fractions
        ]
        return max(gaps, default=0.0)

    def passed(self, rel_tol: float, saturation_tol: float = 0.02) -> bool:
        return (
            self.relative_distance <= rel_tol
            and self.saturation_gap <= saturation_tol
            and self.penalized_chain is not False
        )


@dataclass(frozen=True)
class MonotoneCheck:
    passed: bool
    max_violation: float


def _ratio(spec: ProblemSpec, u: ScalarField, e_p: float) -> np.ndarray:
    Au = spec.operator.apply_array(u.values)
    return np.abs(spec.supremand.F(spec.coords, Au)) / e_p


def sign_flip_band(spec: ProblemSpec, sign: np.ndarray) -> np.ndarray:
    """Nodes with a lattice neighbour of the opposite sign."""
    signs = spec.grid.to_array(sign.astype(int))
    band = np.zeros(signs.shape, dtype=bool)
    for axis in range(signs.ndim):
        lower = [slice(None)] * signs.ndim
        upper = [slice(None)] * signs.ndim
        lower[axis] = slice(None, -1)
        upper[axis] = slice(1, None)
        flip = signs[tuple(lower)] * signs[tuple(upper)] < 0
        band[tuple(lower)] |= flip
        band[tuple(upper)] |= flip
    return band.reshape(-1)


def _fractions(ratio: np.ndarray, taus: Sequence[float]) -> dict[float, float]:
    if ratio.size == 0:
        return {float(tau): 1.0 for tau in taus}
    return {float(tau): float(np.count_nonzero(np.abs(ratio - 1) <= tau)) / ratio.size for tau in taus}


def saturation_for(
    spec: ProblemSpec, u: ScalarField, e_p: float, p: float, taus: Sequence[float], dual: Optional[DualField] = None
) -> SaturationReport:
    ratio = _ratio(spec, u, e_p)
    interior = spec.domain.interior_mask
    ratio_field = np.where(interior, ratio, 0.0)
    kept = interior.copy()
    if dual is not None:
        kept &= ~(sign_flip_band(spec, dual.sign) | dual.zero_band)
    return SaturationReport(
        p=p,
        ratio_field=ScalarField(spec.grid, ratio_field),
        saturated_fraction=_fractions(ratio[interior], taus),
        excluding_band=_fractions(ratio[kept], taus),
    )


def check_pde_saturation(
    result: ContinuationResult,
    spec: ProblemSpec,
    taus: Sequence[float],
    duals: Optional[Sequence[DualField]] = None,
) -> list[SaturationReport]:
    """Per-stage fraction of interior nodes where |F(Au_p)|/e_p is within tau of one."""
    if result.degenerate or not result.e_inf_estimate > 0:
        raise VerificationError("saturation is undefined for a trivial problem")
    taus = sorted(float(tau) for tau in taus)
    reports = []
    for index, stage in enumerate(result.stages):
        dual = duals[index] if duals is not None else None
        reports.append(saturation_for(spec, stage.u_p, stage.e_p, stage.p, taus, dual))
    return reports


def exterior_saturation(stage: StageResult, dual: DualField, spec: ProblemSpec, tau: float) -> Optional[float]:
    """Fraction of exterior nodes carrying dual mass where |F(Au)|/e_p is within tau of one."""
    active = spec.domain.exterior_mask & (np.abs(dual.values) > dual.delta)
    if not active.any():
        return None
    ratio = _ratio(spec, stage.u_p, stage.e_p)[active]
    return float(np.count_nonzero(np.abs(ratio - 1) <= tau)) / ratio.size


def far_field_values(spec: ProblemSpec, u: ScalarField, points: np.ndarray) -> np.ndarray:
    """(-Delta)^s u at points outside the box, where u vanishes: -c sum u_j |x - x_j|^{-n-2s} h^n."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if np.any(spec.grid.inside_box(points)):
        raise VerificationError("far points must lie outside the computational box")
    coords = spec.coords
    support = u.values != 0
    values = np.zeros(points.shape[0])
    if not support.any():
        return values
    exponent = -(spec.n + 2 * spec.s)
    for index, x in enumerate(points):
        distance = np.linalg.norm(coords[support] - x, axis=1)
        values[index] = -spec.operator.cns * math.fsum(u.values[support] * distance**exponent) * spec.cell_volume
    return values


def shell_points(n: int, radius: float, angles: int = 16) -> np.ndarray:
    if n == 1:
        return np.array([[-radius], [radius]])
    theta = 2 * math.pi * np.arange(angles) / angles
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=1)


def check_exterior_behaviour(
    result: ContinuationResult,
    spec: ProblemSpec,
    far_points: Optional[Sequence[np.ndarray]] = None,
    shell_factors: Sequence[float] = (2.0, 4.0, 8.0),
) -> ExteriorDecayReport:
    """Shell maxima of |(-Delta)^s u_inf| far from the box and their log-log decay rate."""
    u = result.u_inf_estimate
    if far_points is None:
        radii = [factor * spec.grid.half_width for factor in shell_factors]
        shells = [shell_points(spec.n, radius) for radius in radii]
    else:
        shells = [np.atleast_2d(np.asarray(points, dtype=float)) for points in far_points]
        radii = [float(np.mean(np.linalg.norm(points, axis=1))) for points in shells]
    shell_max = [float(np.max(np.abs(far_field_values(spec, u, points)))) for points in shells]

    exponent = None
    if len(radii) >= 2 and all(value > 0 for value in shell_max):
        slope, _ = np.polyfit(np.log(radii), np.log(shell_max), 1)
        exponent = float(-slope)
    return ExteriorDecayReport(
        radii=[float(r) for r in radii],
        shell_max=shell_max,
        decay_exponent=exponent,
        expected_exponent=spec.n + 2 * spec.s,
    )


def check_monotone_ep(result: ContinuationResult | Sequence[StageResult], tol: float = 1e-10) -> MonotoneCheck:
    """e_{p_k} <= e_{p_{k+1}} + tol (1 + e_{p_{k+1}}) over the stages in the order given."""
    stages = list(result.stages if isinstance(result, ContinuationResult) else result)
    if len(stages) < 2:
        raise VerificationError("monotonicity check needs >= 2 stages")
    violations = [a.e_p - b.e_p - tol * (1 + b.e_p) for a, b in zip(stages, stages[1:])]
    worst = max(max(violations), 0.0)
    return MonotoneCheck(passed=worst == 0.0, max_violation=worst)


def random_feasible_start(spec: ProblemSpec, seed: int) -> ScalarField:
    rng = np.random.default_rng(seed)
    values = np.array(spec.exterior_data.values)
    values[spec.interior] = spec.data_scale * rng.uniform(-1.0, 1.0, spec.interior.size)
    return ScalarField(spec.grid, values)


def uniqueness_experiment(
    spec: ProblemSpec,
    p_schedule: Sequence[float],
    settings: Optional[SolverSettings] = None,
    taus: Sequence[float] = (0.05,),
    seed: int = 0,
    penalized: bool = False,
    reference: Optional[ContinuationResult] = None,
) -> UniquenessReport:
    """Compare continuation from zero with continuation from a seeded random start."""
    settings = settings or SolverSettings()
    if spec.degenerate:
        return UniquenessReport(0.0, 0.0, {}, {}, seed=seed)

    start = random_feasible_start(spec, seed)
    with ThreadPoolExecutor(max_workers=2) as executor:
        plain = executor.submit(continuation, spec, p_schedule, settings) if reference is None else None
        randomized = executor.submit(continuation, spec, p_schedule, settings, start)
        first = reference if plain is None else plain.result()
        second = randomized.result()
    if not (first.all_converged and second.all_converged):
        raise VerificationError("uniqueness experiment needs converged stages on both paths")

    u_a, u_b = first.u_inf_estimate, second.u_inf_estimate
    distance = float(np.max(np.abs(u_a.values - u_b.values)))
    relative = distance / (1 + u_a.max_abs())
    average = ScalarField(spec.grid, (u_a.values + u_b.values) / 2)
    p_max = first.stages[-1].p
    e_avg = eval_Ep(spec, average, p_max)

    penalized_distance = penalized_chain = None
    if penalized:
        v_p = solve_penalized(spec, p_max, u_a, settings)
        penalized_distance = float(np.max(np.abs(v_p.u_p.values - u_a.values)))
        penalized_chain = penalized_chain_holds(first.e_inf_estimate, v_p, eval_Ep(spec, u_a, p_max), slack=1e-8)

    logger.info(f"Uniqueness: pair distance {distance:.3e} (relative {relative:.3e})")
    return UniquenessReport(
        pair_distance=distance,
        relative_distance=relative,
        average_test=saturation_for(spec, average, e_avg, p_max, taus).saturated_fraction,
        path_saturation={
            "zero_start": saturation_for(spec, u_a, first.e_inf_estimate, p_max, taus).saturated_fraction,
            "random_start": saturation_for(spec, u_b, second.e_inf_estimate, p_max, taus).saturated_fraction,
        },
        seed=seed,
        penalized_distance=penalized_distance,
        penalized_chain=penalized_chain,
    )


def check_reparametrisation(
    spec: ProblemSpec, p: float, factor: float = 2.0, settings: Optional[SolverSettings] = None
) -> CheckResult:
    """Minimisers for F and factor*F coincide, and e_p scales by the factor."""
    settings = settings or SolverSettings()
    scaled = replace(spec, supremand=spec.supremand.rescaled(factor))
    base = solve_p(spec, p, settings=settings)
    other = solve_p(scaled, p, warm_start=base.u_p, settings=settings)
    distance = float(np.max(np.abs(base.u_p.values - other.u_p.values)))
    scaling_error = abs(other.e_p - factor * base.e_p) / max(factor * base.e_p, 1e-300)
    relative = distance / (1 + base.u_p.max_abs())
    passed = relative <= 1e-6 and scaling_error <= 1e-8
    return CheckResult(
        name="reparametrisation",
        status=CheckStatus.PASS if passed else CheckStatus.FAIL,
        value=relative,
        threshold=1e-6,
        details={"factor": factor, "p": p, "e_p_scaling_error": scaling_error},
    )


def _status(passed: bool, hard: bool) -> CheckStatus:
    if hard:
        return CheckStatus.PASS if passed else CheckStatus.FAIL
    return CheckStatus.SOFT_PASS if passed else CheckStatus.SOFT_FAIL


def _check(name: str, passed: bool, hard: bool = True, value=None, threshold=None, **details) -> CheckResult:
    return CheckResult(
        name=name,
        status=_status(bool(passed), hard),
        hard=hard,
        value=None if value is None else float(value),
        threshold=None if threshold is None else float(threshold),
        details=details,
    )


@dataclass
class _ReportInputs:
    spec: ProblemSpec
    result: ContinuationResult
    duals: list[DualField]
    diagnostics: MeasureDiagnostics
    verify: VerifySettings
    saturation: list[SaturationReport] = field(default_factory=list)


def _monotone(inputs: _ReportInputs) -> CheckResult:
    check = check_monotone_ep(inputs.result, inputs.verify.monotone_tol)
    return _check("monotone_e_p", check.passed, value=check.max_violation, threshold=inputs.verify.monotone_tol)


def _value_positive(inputs: _ReportInputs) -> CheckResult:
    value = inputs.result.e_inf_estimate
    return _check("e_pmax_positive", value > VALUE_MARGIN, value=value, threshold=VALUE_MARGIN)


def _convergence(inputs: _ReportInputs) -> CheckResult:
    failed = [stage.p for stage in inputs.result.stages if not stage.converged]
    worst = max(stage.gradient_norm for stage in inputs.result.stages)
    return _check("stage_convergence", not failed, value=worst, non_converged=failed)


def _mass(inputs: _ReportInputs) -> CheckResult:
    bound = (1 + inputs.verify.mass_tol) / inputs.spec.supremand.c_bound
    worst = max(dual.mass for dual in inputs.duals)
    return _check("dual_mass_bound", worst <= bound, value=worst, threshold=bound)


def _duality(inputs: _ReportInputs) -> CheckResult:
    gaps = [duality_identity(dual, stage, inputs.spec) for dual, stage in zip(inputs.duals, inputs.result.stages)]
    tol = inputs.verify.duality_tol
    return _check("duality_gap", max(gaps) <= tol, value=max(gaps), threshold=tol)


def _sign(inputs: _ReportInputs) -> CheckResult:
    return _check("sign_consistency", all(dual.sign_consistent() for dual in inputs.duals))


def _sharmonicity(inputs: _ReportInputs) -> CheckResult:
    per_stage = inputs.diagnostics.stage_sharmonicity or [max(inputs.diagnostics.sharmonicity_residuals, default=0.0)]
    worst_index = int(np.argmax(per_stage))
    worst = per_stage[worst_index]
    stages = inputs.result.stages[-len(per_stage) :]
    tol = inputs.verify.sharmonicity_tol
    return _check(
        "s_harmonicity",
        worst <= tol,
        value=worst,
        threshold=tol,
        worst_p=stages[worst_index].p,
        per_stage=per_stage,
        test_functions=len(inputs.diagnostics.sharmonicity_residuals),
    )


def _nontrivial_limit(inputs: _ReportInputs) -> CheckResult:
    value = inputs.diagnostics.max_interior_f
    threshold = 1e-8 * inputs.diagnostics.mass
    return _check("limit_density_nontrivial", value > threshold, value=value, threshold=threshold)


def _saturation(inputs: _ReportInputs) -> CheckResult:
    tau = inputs.verify.saturation_tau
    fractions = [report.excluding_band[tau] for report in inputs.saturation]
    trend = all(b >= a - 1e-12 for a, b in zip(fractions, fractions[1:]))
    final = fractions[-1]
    return _check(
        "pde_saturation",
        trend and final >= inputs.verify.saturation_threshold,
        hard=False,
        value=final,
        threshold=inputs.verify.saturation_threshold,
        tau=tau,
        trend_nondecreasing=trend,
        fractions=fractions,
    )


def _decay(inputs: _ReportInputs) -> CheckResult:
    report = check_exterior_behaviour(inputs.result, inputs.spec, shell_factors=inputs.verify.far_shell_factors)
    return _check(
        "far_field_decay",
        report.nonincreasing,
        value=report.shell_max[-1],
        radii=report.radii,
        shell_max=report.shell_max,
    )


def _decay_rate(inputs: _ReportInputs) -> CheckResult:
    report = check_exterior_behaviour(inputs.result, inputs.spec, shell_factors=inputs.verify.far_shell_factors)
    return _check(
        "far_field_decay_rate",
        report.exponent_within(inputs.verify.decay_rel_tol),
        hard=False,
        value=report.decay_exponent,
        threshold=report.expected_exponent,
        rel_tol=inputs.verify.decay_rel_tol,
    )


def _exterior_pde(inputs: _ReportInputs) -> CheckResult:
    tau = inputs.verify.saturation_tau
    fraction = exterior_saturation(inputs.result.stages[-1], inputs.duals[-1], inputs.spec, tau)
    if fraction is None:
        reason = {"reason": "no exterior dual mass"}
        return CheckResult(name="exterior_pde", status=CheckStatus.SKIPPED, hard=False, details=reason)
    return _check("exterior_pde", fraction >= inputs.verify.saturation_threshold, hard=False, value=fraction, tau=tau)


def _cauchy(inputs: _ReportInputs) -> CheckResult:
    diagnostics = inputs.diagnostics
    return _check(
        "interior_cauchy_trend",
        diagnostics.cauchy_decreasing,
        hard=False,
        value=diagnostics.cauchy_differences[-1],
        threshold=diagnostics.cauchy_slack,
        differences=diagnostics.cauchy_differences,
    )


def _zero_set(inputs: _ReportInputs) -> CheckResult:
    fraction = inputs.diagnostics.zero_fraction
    return _check("zero_set_fraction", fraction <= 0.2, hard=False, value=fraction, threshold=0.2)


def _sign_census(inputs: _ReportInputs) -> CheckResult:
    diagnostics = inputs.diagnostics
    return _check(
        "exterior_sign_components",
        diagnostics.sign_violations == 0,
        hard=False,
        value=diagnostics.sign_violations,
        components=len(diagnostics.sign_components),
        signs=[component.sign for component in diagnostics.sign_components],
    )


def _mass_split(inputs: _ReportInputs) -> CheckResult:
    diagnostics = inputs.diagnostics
    return _check(
        "mass_split",
        abs(diagnostics.interior_mass + diagnostics.exterior_mass - diagnostics.mass) <= 1e-12,
        hard=False,
        value=diagnostics.exterior_mass,
        interior_mass=diagnostics.interior_mass,
        support_radius=diagnostics.support_radius,
    )


def _extrapolation(inputs: _ReportInputs) -> CheckResult:
    result = inputs.result
    if result.e_inf_extrapolated is None:
        reason = {"reason": "fewer than 3 stages"}
        return CheckResult(name="e_inf_extrapolation", status=CheckStatus.SKIPPED, hard=False, details=reason)
    return _check(
        "e_inf_extrapolation",
        result.e_inf_extrapolated >= result.e_inf_estimate - 1e-12,
        hard=False,
        value=result.e_inf_extrapolated,
        threshold=result.e_inf_estimate,
        delta_last3_vs_last4=result.extrapolation_delta,
    )


# Report order is fixed; names match the CheckResult each function returns.
_CHECKS: list[tuple[str, Callable[[_ReportInputs], CheckResult]]] = [
    ("monotone_e_p", _monotone),
    ("e_pmax_positive", _value_positive),
    ("stage_convergence", _convergence),
    ("dual_mass_bound", _mass),
    ("duality_gap", _duality),
    ("sign_consistency", _sign),
    ("s_harmonicity", _sharmonicity),
    ("limit_density_nontrivial", _nontrivial_limit),
    ("pde_saturation", _saturation),
    ("far_field_decay", _decay),
    ("far_field_decay_rate", _decay_rate),
    ("exterior_pde", _exterior_pde),
    ("interior_cauchy_trend", _cauchy),
    ("zero_set_fraction", _zero_set),
    ("exterior_sign_components", _sign_census),
    ("mass_split", _mass_split),
    ("e_inf_extrapolation", _extrapolation),
]


def _uniqueness_checks(report: UniquenessReport, rel_tol: float, saturation_tol: float) -> list[CheckResult]:
    checks = [
        _check(
            "uniqueness",
            report.relative_distance <= rel_tol,
            value=report.relative_distance,
            threshold=rel_tol,
            seed=report.seed,
            pair_distance=report.pair_distance,
        ),
        _check(
            "uniqueness_average_saturation",
            report.saturation_gap <= saturation_tol,
            value=report.saturation_gap,
            threshold=saturation_tol,
            average={str(tau): value for tau, value in report.average_test.items()},
            paths={
                name: {str(tau): value for tau, value in fractions.items()}
                for name, fractions in report.path_saturation.items()
            },
        ),
    ]
    if report.penalized_chain is not None:
        checks.append(
            _check("penalized_chain", report.penalized_chain, value=report.penalized_distance, seed=report.seed)
        )
    return checks


def full_report(
    spec: ProblemSpec,
    result: ContinuationResult,
    duals: Optional[Sequence[DualField]],
    diagnostics: Optional[MeasureDiagnostics],
    *,
    config_hash: str,
    seed: int = 0,
    solver_settings: Optional[SolverSettings] = None,
    verify_settings: Optional[VerifySettings] = None,
    uniqueness: Optional[UniquenessReport] = None,
    extra_checks: Sequence[CheckResult] = (),
) -> FullReport:
    """Aggregate every check into one deterministic report."""
    solver_settings = solver_settings or SolverSettings()
    verify_settings = verify_settings or VerifySettings()
    provenance = ReportProvenance(
        config_hash=config_hash,
        p_schedule=list(result.p_schedule),
        tol_grad=solver_settings.tol_grad,
        seed=seed,
        grid_spacing=spec.grid.spacing,
        node_count=spec.grid.node_count,
    )
    summaries = [
        StageSummary(
            p=stage.p,
            e_p=stage.e_p,
            gradient_norm=stage.gradient_norm,
            iterations=stage.iterations,
            converged=stage.converged,
        )
        for stage in result.stages
    ]

    if result.degenerate:
        reason = {"reason": "degenerate scenario"}
        checks = [CheckResult(name=name, status=CheckStatus.PASS, details=reason) for name, _ in _CHECKS]
        return FullReport(
            provenance=provenance,
            degenerate=True,
            hard_passed=True,
            checks=checks,
            stages=summaries,
            e_inf_estimate=result.e_inf_estimate,
        )

    missing = [name for name, value in (("duals", duals), ("diagnostics", diagnostics)) if value is None]
    if len(result.stages) < 2:
        missing.append("at least 2 stages")
    if missing:
        raise VerificationError(f"full report is missing: {', '.join(missing)}")

    inputs = _ReportInputs(spec, result, list(duals or []), diagnostics, verify_settings)  # type: ignore[arg-type]
    taus = sorted(set(verify_settings.taus) | {verify_settings.saturation_tau})
    inputs.saturation = check_pde_saturation(result, spec, taus, inputs.duals)

    with ThreadPoolExecutor(max_workers=4) as executor:
        futures = [executor.submit(check, inputs) for _, check in _CHECKS]
        checks = [future.result() for future in futures]
    if uniqueness is not None:
        checks.extend(
            _uniqueness_checks(
                uniqueness, verify_settings.uniqueness_rel_tol, verify_settings.uniqueness_saturation_tol
            )
        )
    checks.extend(extra_checks)

    tau = verify_settings.saturation_tau
    summaries = [
        summary.model_copy(
            update={
                "mass": dual.mass,
                "duality_gap": duality_identity(dual, stage, spec),
                "saturated_fraction": saturation.excluding_band[tau],
            }
        )
        for summary, dual, stage, saturation in zip(summaries, inputs.duals, result.stages, inputs.saturation)
    ]
    hard_passed = all(check.status != CheckStatus.FAIL for check in checks if check.hard)
    for check in checks:
        if check.status in (CheckStatus.FAIL, CheckStatus.SOFT_FAIL):
            logger.warning(f"Check {check.name} reported {check.status.value} (value {check.value})")
    return FullReport(
        provenance=provenance,
        hard_passed=hard_passed,
        checks=checks,
        stages=summaries,
        e_inf_estimate=result.e_inf_estimate,
        e_inf_extrapolated=result.e_inf_extrapolated,
    )
