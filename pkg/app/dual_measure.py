import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from app.domain_grid import DomainSpec, ScalarField
from app.errors import DomainError, DualUndefinedError, VerificationError
from app.lp_solver import ContinuationResult, ProblemSpec, StageResult, dual_density

logger = logging.getLogger(__name__)

DEFAULT_ZERO_BAND = 1e-3
SUPPORT_MASS_THRESHOLD = 1e-6


@dataclass(frozen=True, eq=False)
class DualField:
    p: float
    f: ScalarField
    mass: float
    sign: np.ndarray
    zero_band: np.ndarray
    delta: float
    operator_values: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return self.f.values

    def sign_consistent(self) -> bool:
        """sign(f) == sign(Au) wherever f is nonzero."""
        nonzero = self.f.values != 0
        return bool(np.all(self.sign[nonzero] == np.sign(self.operator_values[nonzero])))


def dual_field(stage: StageResult, spec: ProblemSpec, zero_band_rel: float = DEFAULT_ZERO_BAND) -> DualField:
    """f_p = w sign(F) (|F|/e_p)^{p-1} F_xi evaluated at the stage's Au."""
    if not stage.e_p > 0:
        raise DualUndefinedError("dual undefined for trivial problem (e_p = 0)")
    Au = spec.operator.apply_array(stage.u_p.values)
    F = spec.supremand.F(spec.coords, Au)
    F_xi = spec.supremand.F_xi(spec.coords, Au)
    values = dual_density(F, F_xi, spec.weight.values, stage.e_p, stage.p)
    magnitude = np.abs(values)
    delta = zero_band_rel * float(magnitude.max(initial=0.0))
    return DualField(
        p=stage.p,
        f=ScalarField(spec.grid, values),
        mass=math.fsum(magnitude) * spec.cell_volume,
        sign=np.sign(values).astype(np.int8),
        zero_band=magnitude < delta,
        delta=delta,
        operator_values=Au,
    )


def duality_identity(dual: DualField, stage: StageResult, spec: ProblemSpec) -> float:
    """Relative gap |sum f (F/F_xi) h^n - e_p| / e_p; F/F_xi = Au for the identity supremand."""
    if not stage.e_p > 0:
        raise DualUndefinedError("dual undefined for trivial problem (e_p = 0)")
    Au = spec.operator.apply_array(stage.u_p.values)
    conjugate = spec.supremand.F(spec.coords, Au) / spec.supremand.F_xi(spec.coords, Au)
    pairing = math.fsum(dual.values * conjugate) * spec.cell_volume
    return abs(pairing - stage.e_p) / stage.e_p


def _discrete_norm(values: np.ndarray, cell_volume: float) -> float:
    return math.sqrt(math.fsum(values**2) * cell_volume)


def sharmonicity_residual(dual: DualField, spec: ProblemSpec, testfuncs: Sequence[ScalarField]) -> list[float]:
    """Normalised pairings <f, A phi>_h for test functions supported inside the domain."""
    exterior = spec.domain.exterior_mask
    f_norm = _discrete_norm(dual.values, spec.cell_volume)
    residuals: list[float] = []
    for index, phi in enumerate(testfuncs):
        if phi.grid != spec.grid:
            raise DomainError(f"test function {index} lives on a different grid")
        if np.any(phi.values[exterior] != 0):
            raise DomainError(f"test function {index} is not supported inside the domain")
        A_phi = spec.operator.apply_array(phi.values)
        scale = f_norm * _discrete_norm(A_phi, spec.cell_volume)
        if scale == 0:
            residuals.append(0.0)
            continue
        residuals.append(abs(math.fsum(dual.values * A_phi) * spec.cell_volume) / scale)
    return residuals


def _tensor_bump(coords: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    scaled = (coords - center) / radius
    inside = np.all(np.abs(scaled) < 1, axis=1)
    values = np.zeros(coords.shape[0])
    values[inside] = np.exp(np.sum(1 - 1 / (1 - scaled[inside] ** 2), axis=1))
    return values


def default_test_functions(
    spec: ProblemSpec, locations: int = 5, fractions: Sequence[float] = (0.9, 0.5)
) -> list[ScalarField]:
    """Tensor-product bumps at interior nodes, sized to stay clear of the exterior."""
    coords = spec.coords
    interior = spec.interior
    exterior_points = coords[spec.domain.exterior_mask]
    clearance = np.array([np.min(np.linalg.norm(exterior_points - coords[i], axis=1)) for i in interior])
    spacing = spec.grid.spacing
    candidates = interior[clearance >= 3 * spacing]
    candidate_clearance = clearance[clearance >= 3 * spacing]
    if candidates.size == 0:
        candidates, candidate_clearance = interior, clearance
    picks = np.unique(np.linspace(0, candidates.size - 1, min(locations, candidates.size)).round().astype(int))

    functions: list[ScalarField] = []
    for pick in picks:
        center = coords[candidates[pick]]
        for fraction in fractions:
            radius = fraction * candidate_clearance[pick] / math.sqrt(spec.n)
            values = _tensor_bump(coords, center, radius)
            values[spec.domain.exterior_mask] = 0.0
            functions.append(ScalarField(spec.grid, values))
    return functions


def zero_set_census(f: ScalarField, domain: DomainSpec, delta: float) -> float:
    """Fraction of interior nodes with |f| < delta (exact zeros when delta is 0)."""
    if delta < 0:
        raise VerificationError(f"zero-band width must be nonnegative (got {delta})")
    inside = f.values[domain.interior_mask]
    if inside.size == 0:
        return 0.0
    small = inside == 0 if delta == 0 else np.abs(inside) < delta
    return float(np.count_nonzero(small)) / inside.size


@dataclass(frozen=True)
class SignComponent:
    size: int
    sign: int
    consistent: bool


@dataclass(frozen=True, eq=False)
class MeasureDiagnostics:
    f_inf: ScalarField
    mass: float
    interior_mass: float
    exterior_mass: float
    support_radius: float
    sharmonicity_residuals: list[float]
    sign_components: list[SignComponent]
    cauchy_differences: list[float]
    max_interior_f: float
    zero_fraction: float
    cauchy_slack: float = 1.5
    stage_masses: list[float] = field(default_factory=list)
    # Worst s-harmonicity residual of each stage, in schedule order.
    stage_sharmonicity: list[float] = field(default_factory=list)

    @property
    def sign_violations(self) -> int:
        return sum(1 for component in self.sign_components if not component.consistent)

    @property
    def cauchy_decreasing(self) -> bool:
        pairs = zip(self.cauchy_differences, self.cauchy_differences[1:])
        return all(later <= self.cauchy_slack * earlier for earlier, later in pairs)


def _support_radius(dual: DualField, radii: np.ndarray, cell_volume: float) -> float:
    order = np.argsort(radii, kind="stable")
    mass = np.abs(dual.values[order]) * cell_volume
    # Mass strictly outside the ball through each sorted node.
    outside = np.concatenate([np.cumsum(mass[::-1])[::-1][1:], [0.0]])
    below = np.flatnonzero(outside < SUPPORT_MASS_THRESHOLD)
    return float(radii[order][below[0]]) if below.size else float(radii.max())


def _sign_census(dual: DualField, spec: ProblemSpec) -> list[SignComponent]:
    active = spec.domain.exterior_mask & (np.abs(dual.values) > dual.delta)
    labels, count = ndimage.label(spec.grid.to_array(active))
    flat = labels.reshape(-1)
    components: list[SignComponent] = []
    for label in range(1, count + 1):
        signs = np.unique(dual.sign[flat == label])
        components.append(
            SignComponent(size=int(np.count_nonzero(flat == label)), sign=int(signs[0]), consistent=signs.size == 1)
        )
    return components


def limit_extraction(
    result: ContinuationResult,
    spec: ProblemSpec,
    duals: Optional[Sequence[DualField]] = None,
    zero_band_rel: float = DEFAULT_ZERO_BAND,
    cauchy_slack: float = 1.5,
) -> MeasureDiagnostics:
    """Diagnostics of f at p_max, taken as the estimate of the limit density."""
    if len(result.stages) < 3:
        raise VerificationError(f"limit extraction needs at least 3 stages (got {len(result.stages)})")
    duals = list(duals) if duals is not None else [dual_field(stage, spec, zero_band_rel) for stage in result.stages]
    last = duals[-1]
    interior = spec.domain.interior_mask
    magnitude = np.abs(last.values)
    cell = spec.cell_volume

    cauchy = [
        math.fsum(np.abs(a.values[interior] - b.values[interior])) * cell for a, b in zip(duals, duals[1:])
    ]
    test_functions = default_test_functions(spec)
    residuals = [sharmonicity_residual(dual, spec, test_functions) for dual in duals]
    diagnostics = MeasureDiagnostics(
        f_inf=last.f,
        mass=last.mass,
        interior_mass=math.fsum(magnitude[interior]) * cell,
        exterior_mass=math.fsum(magnitude[~interior]) * cell,
        support_radius=_support_radius(last, np.asarray(spec.grid.radii), cell),
        sharmonicity_residuals=residuals[-1],
        sign_components=_sign_census(last, spec),
        cauchy_differences=cauchy,
        max_interior_f=float(magnitude[interior].max(initial=0.0)),
        zero_fraction=zero_set_census(last.f, spec.domain, last.delta),
        cauchy_slack=cauchy_slack,
        stage_masses=[dual.mass for dual in duals],
        stage_sharmonicity=[max(values, default=0.0) for values in residuals],
    )
    if diagnostics.sign_violations:
        logger.warning(f"{diagnostics.sign_violations} exterior support component(s) change sign")
    logger.info(
        f"Limit density: interior mass {diagnostics.interior_mass:.6g}, exterior mass {diagnostics.exterior_mass:.6g}, "
        f"support radius {diagnostics.support_radius:.4g}"
    )
    return diagnostics
