import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence

import numpy as np

from app.errors import DomainError, ExteriorDataError, GridError
from app.models import ExteriorFamily, OmegaKind, WeightKind

logger = logging.getLogger(__name__)

# Relative slack when deciding whether L/h is an integer.
_DIVISIBILITY_TOL = 1e-9


@dataclass(frozen=True)
class Grid:
    """Uniform lattice over the box [-L, L]^n with m cells on each half axis."""

    dim: int
    half_width: float
    cells_per_half: int
    requested_spacing: float

    @property
    def spacing(self) -> float:
        return self.half_width / self.cells_per_half

    @property
    def points_per_axis(self) -> int:
        return 2 * self.cells_per_half + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def node_count(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def was_rounded(self) -> bool:
        return self.spacing != self.requested_spacing

    @cached_property
    def axis(self) -> np.ndarray:
        m = self.cells_per_half
        axis = self.half_width * (np.arange(-m, m + 1, dtype=float) / m)
        axis.setflags(write=False)
        return axis

    @cached_property
    def coords(self) -> np.ndarray:
        mesh = np.meshgrid(*([self.axis] * self.dim), indexing="ij")
        coords = np.stack([component.ravel() for component in mesh], axis=1)
        coords.setflags(write=False)
        return coords

    @cached_property
    def radii(self) -> np.ndarray:
        radii = np.linalg.norm(self.coords, axis=1)
        radii.setflags(write=False)
        return radii

    @cached_property
    def boundary_mask(self) -> np.ndarray:
        """Nodes on the outermost lattice layer."""
        index = np.indices(self.shape).reshape(self.dim, -1)
        last = self.points_per_axis - 1
        mask = np.any((index == 0) | (index == last), axis=0)
        mask.setflags(write=False)
        return mask

    def lattice_index(self) -> np.ndarray:
        """Integer lattice offsets (node_count, dim) measured from the box center."""
        return np.indices(self.shape).reshape(self.dim, -1).T - self.cells_per_half

    def to_array(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values).reshape(self.shape)

    def inside_box(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        points = np.atleast_2d(points)
        return np.all(np.abs(points) <= self.half_width - margin, axis=1)


def build_grid(n: int, L: float, h: float) -> Grid:
    """Build the truncated lattice; a spacing that does not divide L is rounded down."""
    if n not in (1, 2):
        raise GridError(f"dimension must be 1 or 2 (got {n})")
    if not L > 0 or not math.isfinite(L):
        raise GridError(f"box half-width must be positive (got {L})")
    if not h > 0 or not math.isfinite(h):
        raise GridError(f"grid spacing must be positive (got {h})")
    if h > L:
        raise GridError(f"grid spacing {h} exceeds the box half-width {L}")

    ratio = L / h
    cells = round(ratio)
    if abs(ratio - cells) > _DIVISIBILITY_TOL * ratio:
        cells = math.ceil(ratio)
        logger.warning(f"Spacing {h} does not divide half-width {L}; rounded down to {L / cells!r}")
    return Grid(dim=n, half_width=float(L), cells_per_half=int(cells), requested_spacing=float(h))


@dataclass(frozen=True)
class OmegaShape:
    kind: OmegaKind
    center: tuple[float, ...] = ()
    radius: Optional[float] = None
    lower: Optional[tuple[float, ...]] = None
    upper: Optional[tuple[float, ...]] = None

    @classmethod
    def interval(cls, a: float, b: float) -> "OmegaShape":
        return cls(kind=OmegaKind.INTERVAL, center=((a + b) / 2,), radius=(b - a) / 2)

    @classmethod
    def ball(cls, center: Sequence[float], radius: float) -> "OmegaShape":
        return cls(kind=OmegaKind.BALL, center=tuple(float(c) for c in center), radius=float(radius))

    @classmethod
    def box(cls, lower: Sequence[float], upper: Sequence[float]) -> "OmegaShape":
        lo = tuple(float(v) for v in lower)
        hi = tuple(float(v) for v in upper)
        return cls(kind=OmegaKind.BOX, center=tuple((a + b) / 2 for a, b in zip(lo, hi)), lower=lo, upper=hi)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        match self.kind:
            case OmegaKind.BOX:
                if self.lower is None or self.upper is None:
                    raise DomainError("box shape needs lower and upper corners")
                return np.asarray(self.lower, dtype=float), np.asarray(self.upper, dtype=float)
            case _:
                if self.radius is None or not self.radius > 0:
                    raise DomainError(f"{self.kind.value} shape needs a positive radius")
                center = np.asarray(self.center, dtype=float)
                return center - self.radius, center + self.radius

    def contains_cells(self, coords: np.ndarray, h: float) -> np.ndarray:
        """Nodes whose whole cell lies in the open shape; straddling cells count as exterior."""
        half = h / 2
        match self.kind:
            case OmegaKind.BALL:
                center = np.asarray(self.center, dtype=float)
                reach = np.linalg.norm(coords - center, axis=1) + half * math.sqrt(coords.shape[1])
                return reach < float(self.radius or 0.0)
            case _:
                lo, hi = self.bounds()
                return np.all((coords - half > lo) & (coords + half < hi), axis=1)


@dataclass(frozen=True, eq=False)
class DomainSpec:
    grid: Grid
    shapes: tuple[OmegaShape, ...]
    interior_mask: np.ndarray

    @cached_property
    def exterior_mask(self) -> np.ndarray:
        mask = ~self.interior_mask
        mask.setflags(write=False)
        return mask

    @cached_property
    def interior_indices(self) -> np.ndarray:
        indices = np.flatnonzero(self.interior_mask)
        indices.setflags(write=False)
        return indices

    @property
    def interior_count(self) -> int:
        return int(self.interior_indices.size)

    @property
    def measure(self) -> float:
        """Discrete Lebesgue measure of the interior nodes."""
        return self.interior_count * self.grid.cell_volume


def build_domain(grid: Grid, shapes: Sequence[OmegaShape]) -> DomainSpec:
    if not shapes:
        raise DomainError("at least one shape is needed to describe the domain")
    limit = grid.half_width - grid.spacing
    slack = 1e-12 * grid.half_width
    mask = np.zeros(grid.node_count, dtype=bool)
    for index, shape in enumerate(shapes):
        if shape.kind == OmegaKind.INTERVAL and grid.dim != 1:
            raise DomainError(f"shape {index}: intervals are only available in 1D")
        lo, hi = shape.bounds()
        if lo.size != grid.dim or hi.size != grid.dim:
            raise DomainError(f"shape {index}: expected {grid.dim} coordinates, got {lo.size}")
        if np.any(lo < -limit - slack) or np.any(hi > limit + slack):
            raise DomainError(
                f"shape {index} must stay at least one cell inside the box [-{grid.half_width}, {grid.half_width}]"
            )
        mask |= shape.contains_cells(np.asarray(grid.coords), grid.spacing)

    if not mask.any():
        raise DomainError("the domain contains no grid node; refine the grid or enlarge the domain")
    mask.setflags(write=False)
    return DomainSpec(grid=grid, shapes=tuple(shapes), interior_mask=mask)


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.size != self.grid.node_count:
            raise GridError(f"field has {values.size} values but the grid has {self.grid.node_count} nodes")
        if not np.all(np.isfinite(values)):
            raise GridError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray) -> "ScalarField":
        return ScalarField(self.grid, values)

    def max_abs(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def as_array(self) -> np.ndarray:
        return self.grid.to_array(self.values)


def field_from_function(grid: Grid, fn: Callable[[np.ndarray], np.ndarray]) -> ScalarField:
    return ScalarField(grid, np.asarray(fn(np.asarray(grid.coords)), dtype=float))


@dataclass(frozen=True, eq=False)
class WeightField:
    base: ScalarField
    kind: WeightKind
    normalization_constant: float
    normalized: bool = True

    @property
    def values(self) -> np.ndarray:
        return self.base.values

    def mass(self) -> float:
        return math.fsum(self.base.values) * self.base.grid.cell_volume


def _raw_weight(grid: Grid, kind: WeightKind, sigma: float) -> np.ndarray:
    r2 = np.sum((np.asarray(grid.coords) / sigma) ** 2, axis=1)
    match kind:
        case WeightKind.GAUSSIAN:
            return np.exp(-r2 / 2)
        case WeightKind.RATIONAL:
            return (1 + r2) ** (-(grid.dim + 2))
    raise GridError(f"unknown weight kind {kind!r}")


def build_weight(grid: Grid, kind: WeightKind, sigma: float = 1.0) -> WeightField:
    """Positive weight renormalized so that the discrete integral is exactly one."""
    raw = _raw_weight(grid, WeightKind(kind), sigma)
    if not np.all(raw > 0):
        raise GridError(f"{WeightKind(kind).value} weight underflows on this box; increase sigma (got {sigma})")
    constant = math.fsum(raw) * grid.cell_volume
    values = raw / constant
    logger.debug(f"Built {WeightKind(kind).value} weight, normalization constant {constant!r}")
    return WeightField(ScalarField(grid, values), WeightKind(kind), normalization_constant=constant)


@dataclass(frozen=True)
class BumpSpec:
    center: tuple[float, ...]
    radius: float
    amplitude: float = 1.0


@dataclass(frozen=True)
class ExteriorData:
    family: ExteriorFamily
    bumps: tuple[BumpSpec, ...] = ()
    samples: Optional[tuple[float, ...]] = None
    regularity_order: Optional[float] = None

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        """Evaluate the analytic family at arbitrary points of shape (m, n)."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        total = np.zeros(points.shape[0])
        for bump in self.bumps:
            rho2 = np.sum((points - np.asarray(bump.center)) ** 2, axis=1) / bump.radius**2
            inside = rho2 < 1
            profile = np.zeros_like(rho2)
            match self.family:
                case ExteriorFamily.SMOOTH_BUMP:
                    profile[inside] = np.exp(1 - 1 / (1 - rho2[inside]))
                case ExteriorFamily.POLYNOMIAL_SPLINE:
                    profile[inside] = (1 - rho2[inside]) ** 3
                case ExteriorFamily.CUSTOM_SAMPLES:
                    raise ExteriorDataError("custom samples have no analytic form")
            total += bump.amplitude * profile
        return total


def bump_support_violations(spec: ExteriorData, grid: Grid) -> list[str]:
    """Every bump whose center has the wrong size or whose support leaves the box."""
    violations = []
    for index, bump in enumerate(spec.bumps):
        if len(bump.center) != grid.dim:
            violations.append(f"bump {index} center must have {grid.dim} coordinates")
            continue
        reach = np.abs(np.asarray(bump.center)) + bump.radius
        if np.any(reach > grid.half_width * (1 + 1e-12)):
            violations.append(f"bump {index} support exceeds the box [-{grid.half_width}, {grid.half_width}]")
    return violations


def sample_exterior_data(
    spec: ExteriorData, grid: Grid, domain: DomainSpec, allow_trivial: bool = False
) -> ScalarField:
    """Sample u0 on the grid and check support and non-triviality of its exterior trace."""
    match spec.family:
        case ExteriorFamily.CUSTOM_SAMPLES:
            if spec.samples is None:
                raise ExteriorDataError("custom_samples family needs explicit samples")
            values = np.asarray(spec.samples, dtype=float)
            if values.size != grid.node_count:
                raise ExteriorDataError(f"expected {grid.node_count} samples, got {values.size}")
            if np.any(values[grid.boundary_mask] != 0):
                raise ExteriorDataError("custom samples must vanish on the outermost grid layer")
        case _:
            violations = bump_support_violations(spec, grid)
            if violations:
                raise ExteriorDataError("; ".join(violations))
            values = spec.evaluate(np.asarray(grid.coords))
            values[grid.boundary_mask] = 0.0

    exterior_max = float(np.max(np.abs(values[domain.exterior_mask]), initial=0.0))
    if not exterior_max > 0:
        if not allow_trivial:
            raise ExteriorDataError("trivial exterior data: u0 vanishes on the whole exterior region")
        logger.warning("Exterior data vanishes outside the domain; the problem is degenerate")
    return ScalarField(grid, values)

