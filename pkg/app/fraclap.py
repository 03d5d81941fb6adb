import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
from scipy.integrate import quad
from scipy.linalg import toeplitz
from scipy.signal import fftconvolve
from scipy.special import gamma

from app.domain_grid import Grid, ScalarField
from app.errors import OperatorError, SupremandError
from app.models import OperatorMode, SupremandKind

logger = logging.getLogger(__name__)

DEFAULT_DENSE_LIMIT = 4096

# Gauss-Legendre orders for the cell moments: near cells see the kernel singularity half a cell away.
_NEAR_ORDER = 32
_FAR_ORDER = 12
_NEAR_RADIUS = 2
# Damped corrections keep this fraction of the undamped weight, so no entry reaches zero.
_POSITIVITY_MARGIN = 1e-6

_StencilPair = tuple[np.ndarray, np.ndarray]


def cns_constant(n: int, s: float) -> float:
    """Normalisation constant c_{n,s} of the fractional Laplacian."""
    if not 0 < s < 1:
        raise OperatorError(f"fractional order s must lie in (0, 1) (got {s})")
    if n < 1:
        raise OperatorError(f"dimension must be positive (got {n})")
    return float(s * 2 ** (2 * s) * gamma(n / 2 + s) / (math.pi ** (n / 2) * gamma(1 - s)))


def _gauss_cell_rule(n: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(order)
    nodes, weights = nodes / 2, weights / 2
    if n == 1:
        return nodes[:, None], weights
    t1, t2 = np.meshgrid(nodes, nodes, indexing="ij")
    return np.stack([t1.ravel(), t2.ravel()], axis=1), np.outer(weights, weights).ravel()


def _moments_at(offsets: np.ndarray, n: int, s: float, order: int) -> dict[str, np.ndarray]:
    """Unit-cell moments of |e + t|^{-n-2s} against 1, t_k, t_k^2 and t_1 t_2."""
    points, weights = _gauss_cell_rule(n, order)
    shifted = offsets[:, None, :] + points[None, :, :]
    kernel = np.sum(shifted**2, axis=2) ** (-(n + 2 * s) / 2)
    moments = {"m0": kernel @ weights}
    for k in range(n):
        moments[f"m1_{k}"] = (kernel * points[None, :, k]) @ weights
        moments[f"m2_{k}{k}"] = (kernel * points[None, :, k] ** 2) @ weights
    if n == 2:
        moments["m2_01"] = (kernel * (points[:, 0] * points[:, 1])[None, :]) @ weights
    return moments


def _self_second_moment(n: int, s: float) -> float:
    """Integral of t_k^2 |t|^{-n-2s} over the unit cell centred at the singularity."""
    if n == 1:
        return 2 * 0.5 ** (2 - 2 * s) / (2 - 2 * s)
    # t_1^2 + t_2^2 = |t|^2, so each diagonal moment is half the integral of |t|^{-2s}.
    value, _ = quad(lambda theta: (0.5 / math.cos(theta)) ** (2 - 2 * s), 0.0, math.pi / 4, epsabs=0, epsrel=1e-13)
    return 0.5 * 8 * value / (2 - 2 * s)


def _moment_tables(n: int, s: float, radius: int) -> dict[str, np.ndarray]:
    """Moment arrays over the offsets [-radius, radius]^n (index q holds offset q - radius)."""
    width = 2 * radius + 1
    offsets = (np.indices((width,) * n).reshape(n, -1).T - radius).astype(float)
    reach = np.max(np.abs(offsets), axis=1)
    near = (reach <= _NEAR_RADIUS) & (reach > 0)
    far = reach > _NEAR_RADIUS

    names = ["m0"] + [f"m1_{k}" for k in range(n)] + [f"m2_{k}{k}" for k in range(n)] + (["m2_01"] if n == 2 else [])
    tables = {name: np.zeros(offsets.shape[0]) for name in names}
    for mask, order in ((near, _NEAR_ORDER), (far, _FAR_ORDER)):
        if not mask.any():
            continue
        for name, values in _moments_at(offsets[mask], n, s, order).items():
            tables[name][mask] = values

    center = int(np.flatnonzero(reach == 0)[0])
    self_moment = _self_second_moment(n, s)
    for k in range(n):
        tables[f"m2_{k}{k}"][center] = self_moment
    return {name: values.reshape((width,) * n) for name, values in tables.items()}


def _shifted(table: np.ndarray, radius: int, span: int, shift: tuple[int, ...]) -> np.ndarray:
    """View of table at offsets e + shift for e in [-span, span]^n."""
    index = tuple(slice(radius - span + d, radius + span + d + 1) for d in shift)
    return table[index]


@dataclass(frozen=True)
class _StencilParts:
    """Unit-spacing stencil pieces over offsets [-span, span]^n, all even in the offset.

    mass holds the cell masses m0; the corrections come from the singular centre cell, from
    the cells touching it, and from every other cell.
    """

    mass: np.ndarray
    centre: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def assemble(self, near_weight: float, far_weight: float) -> _StencilPair:
        correction = self.centre + near_weight * self.near + far_weight * self.far
        stencil = self.mass + correction
        stencil[(stencil.shape[0] // 2,) * stencil.ndim] = 0.0
        return stencil, correction


def _correction(tables: dict[str, np.ndarray], n: int, radius: int, span: int) -> np.ndarray:
    """Lattice weights of the first- and second-moment terms, with centred differences per cell."""
    zero = (0,) * n

    def unit(k: int, sign: int) -> tuple[int, ...]:
        return tuple(sign if axis == k else 0 for axis in range(n))

    correction = np.zeros((2 * span + 1,) * n)
    for k in range(n):
        m1 = tables[f"m1_{k}"]
        m2 = tables[f"m2_{k}{k}"]
        correction += (_shifted(m1, radius, span, unit(k, -1)) - _shifted(m1, radius, span, unit(k, 1))) / 2
        correction += (
            _shifted(m2, radius, span, unit(k, -1))
            - 2 * _shifted(m2, radius, span, zero)
            + _shifted(m2, radius, span, unit(k, 1))
        ) / 2
    if n == 2:
        m12 = tables["m2_01"]
        correction += (
            _shifted(m12, radius, span, (-1, -1))
            - _shifted(m12, radius, span, (-1, 1))
            - _shifted(m12, radius, span, (1, -1))
            + _shifted(m12, radius, span, (1, 1))
        ) / 4
    return correction


def _unit_stencil_parts(n: int, s: float, span: int) -> _StencilParts:
    radius = span + 2
    tables = _moment_tables(n, s, radius)
    width = 2 * radius + 1
    reach = np.max(np.abs(np.indices((width,) * n) - radius), axis=0)

    def restricted(keep: np.ndarray) -> dict[str, np.ndarray]:
        return {name: values if name == "m0" else np.where(keep, values, 0.0) for name, values in tables.items()}

    full = _correction(tables, n, radius, span)
    centre = _correction(restricted(reach == 0), n, radius, span)
    without_near = _correction(restricted(reach != 1), n, radius, span)

    # Bitwise even in e.
    flip = tuple(slice(None, None, -1) for _ in range(n))

    def even(values: np.ndarray) -> np.ndarray:
        return (values + values[flip]) / 2

    mass = _shifted(tables["m0"], radius, span, (0,) * n)
    return _StencilParts(
        mass=even(mass),
        centre=even(centre),
        near=even(full - without_near),
        far=even(without_near - centre),
    )


def _blend_weight(corrected: np.ndarray, fallback: np.ndarray) -> float:
    """Largest weight on corrected (against fallback) that keeps the blend nonnegative."""
    negative = corrected < 0
    if not negative.any():
        return 1.0
    limits = fallback[negative] / (fallback[negative] - corrected[negative])
    return float(np.min(limits)) * (1 - _POSITIVITY_MARGIN)


def _nonnegative_stencil(parts: _StencilParts) -> tuple[np.ndarray, np.ndarray, float]:
    """Quadratic cell corrections, damped only as far as needed to keep every weight >= 0.

    Steep kernels (large s) push the corrections of the cells next to the singularity below
    zero two cells out; those go first. The remaining corrections are damped only if the
    stencil is still negative without them.
    """
    without_near, _ = parts.assemble(0.0, 1.0)
    if np.all(without_near >= 0):
        weight = _blend_weight(parts.assemble(1.0, 1.0)[0], without_near)
        stencil, correction = parts.assemble(weight, 1.0)
    else:
        weight = _blend_weight(parts.assemble(1.0, 1.0)[0], parts.assemble(0.0, 0.0)[0])
        stencil, correction = parts.assemble(weight, weight)
    return stencil, correction, weight


def _ray_distance(x: np.ndarray, half_width: float, theta: float) -> float:
    direction = (math.cos(theta), math.sin(theta))
    distance = math.inf
    for k in range(2):
        if direction[k] > 0:
            distance = min(distance, (half_width - x[k]) / direction[k])
        elif direction[k] < 0:
            distance = min(distance, (half_width + x[k]) / -direction[k])
    return distance


def tail_field(grid: Grid, s: float) -> np.ndarray:
    """c_{n,s} times the kernel mass outside the box covered by the grid cells."""
    cns = cns_constant(grid.dim, s)
    reach = grid.half_width + grid.spacing / 2
    coords = np.asarray(grid.coords)
    if grid.dim == 1:
        x = coords[:, 0]
        return cns * ((reach - x) ** (-2 * s) + (reach + x) ** (-2 * s)) / (2 * s)

    tail = np.empty(grid.node_count)
    for index, x in enumerate(coords):
        angles = (math.atan2(cy - x[1], cx - x[0]) % (2 * math.pi) for cx in (-reach, reach) for cy in (-reach, reach))
        corners = sorted(angle for angle in angles if 0 < angle < 2 * math.pi)
        value, _ = quad(
            lambda theta, node: _ray_distance(node, reach, theta) ** (-2 * s),
            0.0,
            2 * math.pi,
            args=(x,),
            points=corners,
            epsabs=0,
            epsrel=1e-10,
            limit=200,
        )
        tail[index] = cns * value / (2 * s)
    return tail


@dataclass(frozen=True, eq=False)
class FracLapOperator:
    """Discrete (-Delta)^s on fields that vanish beyond the box.

    (Au)_i = sum_j K_ij (u_i - u_j) + (tail_i + boundary_correction_i) u_i, the last term
    only in with_tail mode. K is Toeplitz, generated by the even stencil over lattice offsets.
    blend is the weight left on the quadratic corrections of the cells next to the singularity.
    """

    grid: Grid
    s: float
    cns: float
    mode: OperatorMode
    stencil: np.ndarray
    tail: np.ndarray
    boundary_correction: np.ndarray
    row_sums: np.ndarray
    blend: float = 1.0
    dense_limit: int = DEFAULT_DENSE_LIMIT
    _dense: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def is_dense(self) -> bool:
        return self._dense is not None

    @cached_property
    def diagonal(self) -> np.ndarray:
        match self.mode:
            case OperatorMode.WITH_TAIL:
                return self.row_sums + self.tail + self.boundary_correction
            case _:
                return self.row_sums

    @property
    def kernel_weights(self) -> np.ndarray:
        """Dense K (built on demand for matrix-free operators)."""
        if self._dense is not None:
            return self._dense
        return self.columns(np.arange(self.grid.node_count), include_diagonal=False)

    def kernel_apply(self, values: np.ndarray) -> np.ndarray:
        if self._dense is not None:
            return self._dense @ values
        result = fftconvolve(self.grid.to_array(values), self.stencil, mode="valid")
        return result.reshape(-1)

    def apply_array(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != (self.grid.node_count,):
            raise OperatorError(f"expected {self.grid.node_count} nodal values, got shape {values.shape}")
        return self.diagonal * values - self.kernel_apply(values)

    def columns(self, indices: np.ndarray, include_diagonal: bool = True) -> np.ndarray:
        """Columns of A (or of K) for the given node indices, shape (node_count, len(indices))."""
        indices = np.asarray(indices, dtype=int)
        if self._dense is not None:
            block = -self._dense[:, indices]
        else:
            span = 2 * self.grid.cells_per_half
            points = self.grid.points_per_axis
            lattice = np.unravel_index(indices, self.grid.shape)
            block = np.empty((self.grid.node_count, indices.size))
            for column, position in enumerate(zip(*lattice)):
                window = tuple(slice(span - p, span - p + points) for p in position)
                block[:, column] = -self.stencil[window].reshape(-1)
        if not include_diagonal:
            return -block
        block[indices, np.arange(indices.size)] += self.diagonal[indices]
        return block

    def dense_matrix(self) -> np.ndarray:
        """Full matrix of A; intended for small grids and export."""
        return self.columns(np.arange(self.grid.node_count))


def build_operator(
    grid: Grid, s: float, mode: OperatorMode = OperatorMode.WITH_TAIL, dense_limit: int = DEFAULT_DENSE_LIMIT
) -> FracLapOperator:
    cns = cns_constant(grid.dim, s)
    span = 2 * grid.cells_per_half
    scale = cns * grid.spacing ** (-2 * s)
    unit_stencil, unit_correction, blend = _nonnegative_stencil(_unit_stencil_parts(grid.dim, s, span))
    if blend < 1:
        logger.info(f"Damping near-cell quadratic corrections by {blend:.4f} to keep the stencil nonnegative")
    stencil = scale * unit_stencil

    if np.any(stencil < 0):
        raise OperatorError(f"difference stencil lost nonnegativity (min {stencil.min():.3e})")

    ones = np.ones(grid.shape)
    correction = -scale * fftconvolve(ones, unit_correction, mode="valid").reshape(-1)

    dense: Optional[np.ndarray] = None
    if grid.node_count <= dense_limit:
        if grid.dim == 1:
            dense = toeplitz(stencil[span::-1], stencil[span:])
        else:
            points = grid.points_per_axis
            offset = np.arange(points)[:, None] - np.arange(points)[None, :] + span
            dense = stencil[offset[:, None, :, None], offset[None, :, None, :]].reshape(grid.node_count, -1)
        np.fill_diagonal(dense, 0.0)
        row_sums = dense.sum(axis=1)
        logger.debug(f"Assembled dense operator with {grid.node_count} nodes")
    else:
        row_sums = fftconvolve(ones, stencil, mode="valid").reshape(-1)
        logger.info(f"Using matrix-free operator for {grid.node_count} nodes (dense limit {dense_limit})")

    tail = tail_field(grid, s)
    for name, values in (("row_sums", row_sums), ("tail", tail), ("boundary_correction", correction)):
        values.setflags(write=False)
        if not np.all(np.isfinite(values)):
            raise OperatorError(f"non-finite {name} in operator assembly")
    stencil.setflags(write=False)
    if dense is not None:
        dense.setflags(write=False)

    return FracLapOperator(
        grid=grid,
        s=s,
        cns=cns,
        mode=OperatorMode(mode),
        stencil=stencil,
        tail=tail,
        boundary_correction=correction,
        row_sums=row_sums,
        blend=blend,
        dense_limit=dense_limit,
        _dense=dense,
    )


def apply(op: FracLapOperator, u: ScalarField) -> ScalarField:
    if u.grid != op.grid:
        raise OperatorError("field and operator live on different grids")
    return ScalarField(op.grid, op.apply_array(u.values))


@dataclass(frozen=True)
class SupremandF:
    """Convex supremand F(x, xi) with c <= F_xi <= 1/c; vectorised over nodes."""

    kind: SupremandKind = SupremandKind.IDENTITY
    scale: float = 1.0
    alpha: float = 0.5
    beta: float = 0.25

    @property
    def c_bound(self) -> float:
        match self.kind:
            case SupremandKind.IDENTITY:
                return 1.0
            case SupremandKind.SCALED:
                return min(self.scale, 1 / self.scale)
            case SupremandKind.WEIGHTED_LINEAR:
                return 1 / (1 + self.alpha)
            case SupremandKind.TANH_PERTURBED:
                return 1 / (1 + self.beta)
        raise SupremandError(f"unknown supremand kind {self.kind!r}")

    @property
    def is_linear(self) -> bool:
        return self.kind != SupremandKind.TANH_PERTURBED

    def _coefficient(self, x: np.ndarray) -> np.ndarray | float:
        match self.kind:
            case SupremandKind.SCALED:
                return self.scale
            case SupremandKind.WEIGHTED_LINEAR:
                return 1 + self.alpha * np.exp(-np.sum(np.atleast_2d(x) ** 2, axis=1))
            case _:
                return 1.0

    def F(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.kind == SupremandKind.TANH_PERTURBED:
            return xi + self.beta * np.tanh(xi)
        return self._coefficient(x) * xi

    def F_xi(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.kind == SupremandKind.TANH_PERTURBED:
            return 1 + self.beta / np.cosh(xi) ** 2
        return self._coefficient(x) * np.ones_like(xi)

    def F_xixi(self, x: np.ndarray, xi: np.ndarray) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.kind == SupremandKind.TANH_PERTURBED:
            return -2 * self.beta * np.tanh(xi) / np.cosh(xi) ** 2
        return np.zeros_like(xi)

    def rescaled(self, factor: float) -> "SupremandF":
        """Supremand factor * F (only meaningful for the linear families)."""
        match self.kind:
            case SupremandKind.IDENTITY | SupremandKind.SCALED:
                return SupremandF(kind=SupremandKind.SCALED, scale=self.scale * factor)
        raise SupremandError(f"rescaling is only supported for identity and scaled supremands, not {self.kind.value}")


def check_supremand(supremand: SupremandF, grid: Grid, xi_probes: Optional[np.ndarray] = None) -> None:
    """Probe F(x,0)=0, c <= F_xi <= 1/c and F F_xixi >= -1/c on grid nodes."""
    c = supremand.c_bound
    if not 0 < c <= 1:
        raise SupremandError(f"derivative bound must lie in (0, 1] (got {c})")
    probes = np.linspace(-50.0, 50.0, 201) if xi_probes is None else np.asarray(xi_probes, dtype=float)
    coords = np.asarray(grid.coords)
    if np.any(supremand.F(coords, np.zeros(grid.node_count)) != 0):
        raise SupremandError("supremand must satisfy F(x, 0) = 0")
    slack = 1e-12
    for xi in probes:
        column = np.full(grid.node_count, xi)
        derivative = supremand.F_xi(coords, column)
        if np.any(derivative < c - slack) or np.any(derivative > 1 / c + slack):
            raise SupremandError(f"F_xi leaves [{c}, {1 / c}] at xi = {xi}")
        curvature = supremand.F(coords, column) * supremand.F_xixi(coords, column)
        if np.any(curvature < -1 / c - slack):
            raise SupremandError(f"F * F_xixi drops below -1/c at xi = {xi}")
