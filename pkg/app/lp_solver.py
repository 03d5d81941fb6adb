import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, lstsq
from scipy.optimize import minimize
from scipy.special import logsumexp

from app.domain_grid import DomainSpec, Grid, ScalarField, WeightField
from app.errors import SolverError
from app.fraclap import FracLapOperator, SupremandF
from app.models import SolverSettings

logger = logging.getLogger(__name__)

_ARMIJO = 1e-4
_MAX_HALVINGS = 60


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    grid: Grid
    domain: DomainSpec
    operator: FracLapOperator
    weight: WeightField
    exterior_data: ScalarField
    supremand: SupremandF
    s: float
    n: int
    degenerate: bool = False

    @property
    def interior(self) -> np.ndarray:
        return self.domain.interior_indices

    @cached_property
    def interior_columns(self) -> np.ndarray:
        """A restricted to interior columns, so that A u = offset + columns @ u_interior."""
        block = self.operator.columns(self.interior)
        block.setflags(write=False)
        return block

    @cached_property
    def offset(self) -> np.ndarray:
        exterior_only = np.array(self.exterior_data.values)
        exterior_only[self.interior] = 0.0
        offset = self.operator.apply_array(exterior_only)
        offset.setflags(write=False)
        return offset

    @cached_property
    def coords(self) -> np.ndarray:
        return np.asarray(self.grid.coords)

    @cached_property
    def data_scale(self) -> float:
        scale = self.exterior_data.max_abs()
        return scale if scale > 0 else 1.0

    @property
    def cell_volume(self) -> float:
        return self.grid.cell_volume

    def competitor(self, interior_values: np.ndarray) -> ScalarField:
        values = np.array(self.exterior_data.values)
        values[self.interior] = interior_values
        return ScalarField(self.grid, values)

    def check_competitor(self, u: ScalarField) -> None:
        if u.grid != self.grid:
            raise SolverError("field lives on a different grid than the problem")
        exterior = self.domain.exterior_mask
        if not np.array_equal(u.values[exterior], self.exterior_data.values[exterior]):
            raise SolverError("field does not match the exterior data outside the domain")


def assemble_problem(
    domain: DomainSpec,
    operator: FracLapOperator,
    weight: WeightField,
    exterior_data: ScalarField,
    supremand: Optional[SupremandF] = None,
    allow_degenerate: bool = False,
) -> ProblemSpec:
    grid = domain.grid
    if not grid.dim > 2 * operator.s:
        raise SolverError(f"requires n > 2s (got n={grid.dim}, s={operator.s})")
    grids = (("operator", operator.grid), ("weight", weight.base.grid), ("exterior data", exterior_data.grid))
    for name, other in grids:
        if other != grid:
            raise SolverError(f"{name} lives on a different grid than the domain")

    exterior_values = exterior_data.values[domain.exterior_mask]
    degenerate = not np.any(exterior_values != 0)
    if degenerate and not allow_degenerate:
        raise SolverError("exterior data vanishes outside the domain")
    if degenerate:
        logger.warning("Degenerate scenario: every stage will return the zero field")
    return ProblemSpec(
        grid=grid,
        domain=domain,
        operator=operator,
        weight=weight,
        exterior_data=exterior_data,
        supremand=supremand or SupremandF(),
        s=operator.s,
        n=grid.dim,
        degenerate=degenerate,
    )


@dataclass(frozen=True, eq=False)
class StageResult:
    p: float
    u_p: ScalarField
    e_p: float
    gradient_norm: float
    iterations: int
    converged: bool = True
    f_p: Optional[ScalarField] = None
    message: str = ""
    penalized_value: Optional[float] = None
    penalty: Optional[float] = None

    def with_dual(self, f_p: ScalarField) -> "StageResult":
        return replace(self, f_p=f_p)


@dataclass(frozen=True, eq=False)
class ContinuationResult:
    stages: tuple[StageResult, ...]
    p_schedule: tuple[float, ...]
    e_inf_estimate: float
    u_inf_estimate: ScalarField
    e_inf_extrapolated: Optional[float] = None
    extrapolation_delta: Optional[float] = None
    degenerate: bool = False

    @property
    def all_converged(self) -> bool:
        return all(stage.converged for stage in self.stages)

    def trajectory(self) -> list[tuple[float, float, float, int]]:
        return [(stage.p, stage.e_p, stage.gradient_norm, stage.iterations) for stage in self.stages]


def weighted_lp_norm(values: np.ndarray, weight: np.ndarray, cell_volume: float, p: float) -> float:
    """(sum |v|^p w h^n)^{1/p} with the maximum factored out."""
    magnitude = np.abs(values)
    scale = float(np.max(magnitude[weight > 0], initial=0.0))
    if scale == 0:
        return 0.0
    inner = math.fsum(weight * (magnitude / scale) ** p) * cell_volume
    result = scale * inner ** (1 / p)
    if not math.isfinite(result):
        raise SolverError(f"E_p overflowed at p={p} despite scaling by {scale:.3e}")
    return result


def dual_density(
    F: np.ndarray, F_xi: np.ndarray, weight: np.ndarray, e_p: float, p: float
) -> np.ndarray:
    """w sign(F) (|F|/e_p)^{p-1} F_xi, i.e. e_p^{1-p} w |F|^{p-2} F F_xi."""
    ratio = np.abs(F) / e_p
    with np.errstate(divide="ignore"):
        log_ratio = np.log(ratio)
    power = np.where(ratio > 0, np.exp((p - 1) * log_ratio), 0.0)
    return weight * np.sign(F) * power * F_xi


@dataclass
class _State:
    x: np.ndarray
    Au: np.ndarray
    F: np.ndarray
    F_xi: np.ndarray
    e: float
    log_e: float
    gradient: np.ndarray

    @property
    def objective(self) -> float:
        return self.log_e


def _evaluate(spec: ProblemSpec, x: np.ndarray, p: float) -> _State:
    Au = spec.offset + spec.interior_columns @ x
    F = spec.supremand.F(spec.coords, Au)
    F_xi = spec.supremand.F_xi(spec.coords, Au)
    w = spec.weight.values
    with np.errstate(divide="ignore"):
        log_magnitude = np.log(np.abs(F))
    log_e = float(logsumexp(p * log_magnitude, b=w * spec.cell_volume)) / p
    e = math.exp(log_e)
    if e == 0:
        return _State(x, Au, F, F_xi, 0.0, -math.inf, np.zeros_like(x))
    f = dual_density(F, F_xi, w, e, p)
    gradient = spec.interior_columns.T @ f * (spec.cell_volume / e)
    return _State(x, Au, F, F_xi, e, log_e, gradient)


def _curvature(spec: ProblemSpec, state: _State, p: float) -> np.ndarray:
    """Nodal weights q with grad^2 log E_p = B^T diag(q) B - p g g^T."""
    F_xixi = spec.supremand.F_xixi(spec.coords, state.Au)
    ratio = np.abs(state.F) / state.e
    with np.errstate(divide="ignore"):
        log_ratio = np.log(ratio)
    power = np.where(ratio > 0, np.exp((p - 2) * log_ratio), 0.0)
    bracket = (p - 1) * state.F_xi**2 + state.F * F_xixi
    return spec.weight.values * spec.cell_volume * power * bracket / state.e**2


def _solve_spd(matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    jitter = 1e-14 * max(float(np.trace(matrix)) / matrix.shape[0], 1e-300)
    for _ in range(6):
        try:
            factor = cho_factor(matrix + jitter * np.eye(matrix.shape[0]), lower=True, check_finite=False)
            return cho_solve(factor, rhs, check_finite=False)
        except LinAlgError:
            logger.debug(f"Cholesky failed with jitter {jitter:.1e}; retrying with more")
            jitter *= 100
    logger.debug("Cholesky failed repeatedly; falling back to least squares")
    return lstsq(matrix, rhs)[0]


def _gradient_norm(spec: ProblemSpec, gradient: np.ndarray) -> float:
    return float(np.linalg.norm(gradient)) * spec.data_scale


def _tolerance(spec: ProblemSpec, settings: SolverSettings) -> float:
    return settings.tol_grad * math.sqrt(spec.grid.node_count)


def eval_Ep(spec: ProblemSpec, u: ScalarField, p: float) -> float:
    if p < 1:
        raise SolverError(f"p must be at least 1 (got {p})")
    spec.check_competitor(u)
    Au = spec.operator.apply_array(u.values)
    return weighted_lp_norm(spec.supremand.F(spec.coords, Au), spec.weight.values, spec.cell_volume, p)


def grad_Ep_p(spec: ProblemSpec, u: ScalarField, p: float) -> ScalarField:
    """Gradient of sum |F(Au)|^p w h^n with respect to the interior values (zero elsewhere)."""
    if p < 2:
        raise SolverError(f"p must be at least 2 (got {p})")
    if u.grid != spec.grid:
        raise SolverError("field lives on a different grid than the problem")
    Au = spec.operator.apply_array(u.values)
    F = spec.supremand.F(spec.coords, Au)
    F_xi = spec.supremand.F_xi(spec.coords, Au)
    nodal = p * spec.weight.values * np.abs(F) ** (p - 2) * F * F_xi * spec.cell_volume
    gradient = np.zeros(spec.grid.node_count)
    gradient[spec.interior] = spec.interior_columns.T @ nodal
    return ScalarField(spec.grid, gradient)


def _quasi_newton(spec: ProblemSpec, x0: np.ndarray, p: float, settings: SolverSettings) -> tuple[np.ndarray, int]:
    if settings.lbfgs_max_iter == 0:
        return x0, 0

    def objective(x: np.ndarray) -> tuple[float, np.ndarray]:
        state = _evaluate(spec, x, p)
        return state.log_e, state.gradient

    result = minimize(
        objective,
        x0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": settings.lbfgs_max_iter, "ftol": 1e-15, "gtol": 1e-14},
    )
    logger.debug(f"L-BFGS-B at p={p}: {result.nit} iterations, {result.message}")
    return np.asarray(result.x), int(result.nit)


def _armijo(evaluate, state, direction: np.ndarray, slope: float):
    """Backtracking on the objective; near round-off, a drop in gradient norm is accepted."""
    step = 1.0
    noise = 1e-14 * max(1.0, abs(state.objective))
    for _ in range(_MAX_HALVINGS):
        trial = evaluate(state.x + step * direction)
        if trial.objective <= state.objective + _ARMIJO * step * slope:
            return trial
        flatter = np.linalg.norm(trial.gradient) < np.linalg.norm(state.gradient)
        if trial.objective <= state.objective + noise and flatter:
            return trial
        step /= 2
    return None


def solve_p(
    spec: ProblemSpec,
    p: float,
    warm_start: Optional[ScalarField] = None,
    settings: Optional[SolverSettings] = None,
) -> StageResult:
    """Minimise E_p over competitors equal to the exterior data outside the domain."""
    settings = settings or SolverSettings()
    if p < 2:
        raise SolverError(f"p must be at least 2 (got {p})")
    if spec.degenerate:
        zero = ScalarField(spec.grid, np.zeros(spec.grid.node_count))
        return StageResult(p=p, u_p=zero, e_p=0.0, gradient_norm=0.0, iterations=0, message="degenerate scenario")

    x = np.zeros(spec.interior.size) if warm_start is None else np.array(warm_start.values[spec.interior])
    x, iterations = _quasi_newton(spec, x, p, settings)
    tolerance = _tolerance(spec, settings)
    state = _evaluate(spec, x, p)
    message = "converged"

    newton_cap = min(settings.newton_max_iter, max(settings.max_iter - iterations, 1))
    for _ in range(newton_cap):
        if _gradient_norm(spec, state.gradient) <= tolerance:
            break
        B = spec.interior_columns
        q = _curvature(spec, state, p)
        hessian = B.T @ (q[:, None] * B)
        direction = -_solve_spd(hessian, state.gradient)
        slope = float(state.gradient @ direction)
        if slope >= 0:
            direction, slope = -state.gradient, -float(state.gradient @ state.gradient)
        trial = _armijo(lambda z: _evaluate(spec, z, p), state, direction, slope)
        iterations += 1
        if trial is None:
            message = "line search failed"
            break
        state = trial
    else:
        if _gradient_norm(spec, state.gradient) > tolerance:
            message = "iteration cap reached"

    u_p = spec.competitor(state.x)
    e_p = eval_Ep(spec, u_p, p)
    gradient_norm = _gradient_norm(spec, state.gradient)
    converged = gradient_norm <= tolerance
    if not converged:
        message = message if message != "converged" else "tolerance not met"
        logger.warning(f"Stage p={p} did not converge ({message}); gradient norm {gradient_norm:.3e} > {tolerance:.3e}")
    logger.info(f"Stage p={p}: e_p={e_p:.12g}, gradient norm {gradient_norm:.3e}, {iterations} iterations")
    return StageResult(
        p=p,
        u_p=u_p,
        e_p=e_p,
        gradient_norm=gradient_norm,
        iterations=iterations,
        converged=converged,
        message=message,
    )


def extrapolate_e_inf(stages: Sequence[StageResult], window: int = 4) -> Optional[float]:
    """Intercept of the least-squares fit e_p = e_inf - C/p over the last stages."""
    tail = list(stages)[-window:]
    if len(tail) < 2:
        return None
    inverse_p = np.array([1 / stage.p for stage in tail])
    values = np.array([stage.e_p for stage in tail])
    _, intercept = np.polyfit(inverse_p, values, 1)
    return float(intercept)


def continuation(
    spec: ProblemSpec,
    p_schedule: Sequence[float],
    settings: Optional[SolverSettings] = None,
    warm_start: Optional[ScalarField] = None,
) -> ContinuationResult:
    settings = settings or SolverSettings()
    schedule = tuple(float(p) for p in p_schedule)
    if not schedule or schedule[0] < 2 or any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise SolverError(f"p schedule must be strictly increasing and start at p >= 2 (got {list(schedule)})")

    stages: list[StageResult] = []
    current = warm_start
    for p in schedule:
        stage = solve_p(spec, p, warm_start=current, settings=settings)
        stages.append(stage)
        current = stage.u_p

    last = stages[-1]
    extrapolated = delta = None
    if len(stages) >= 3 and not spec.degenerate:
        extrapolated = extrapolate_e_inf(stages, 4)
        shorter = extrapolate_e_inf(stages, 3)
        if extrapolated is not None and shorter is not None:
            delta = abs(extrapolated - shorter)
    if not all(stage.converged for stage in stages):
        logger.warning("Continuation finished with non-converged stages")
    return ContinuationResult(
        stages=tuple(stages),
        p_schedule=schedule,
        e_inf_estimate=last.e_p,
        u_inf_estimate=last.u_p,
        e_inf_extrapolated=extrapolated,
        extrapolation_delta=delta,
        degenerate=spec.degenerate,
    )


def penalized_objective(spec: ProblemSpec, v: ScalarField, target: ScalarField, p: float) -> tuple[float, float]:
    """(A_p(v), mean squared interior distance to target)."""
    distance = float(np.mean((v.values[spec.interior] - target.values[spec.interior]) ** 2))
    return eval_Ep(spec, v, p) + distance / 2, distance


@dataclass
class _PenalizedState:
    x: np.ndarray
    inner: _State
    objective: float
    gradient: np.ndarray


def solve_penalized(
    spec: ProblemSpec,
    p: float,
    target: ScalarField,
    settings: Optional[SolverSettings] = None,
) -> StageResult:
    """Minimise E_p(v) + 1/2 mean over the domain of (v - target)^2."""
    settings = settings or SolverSettings()
    if p < 2:
        raise SolverError(f"p must be at least 2 (got {p})")
    spec.check_competitor(target)
    anchor = np.array(target.values[spec.interior])
    count = anchor.size
    B = spec.interior_columns

    def evaluate(x: np.ndarray) -> _PenalizedState:
        inner = _evaluate(spec, x, p)
        gradient = inner.e * inner.gradient + (x - anchor) / count
        objective = inner.e + float(np.mean((x - anchor) ** 2)) / 2
        return _PenalizedState(x, inner, objective, gradient)

    state = evaluate(anchor.copy())
    tolerance = _tolerance(spec, settings)
    iterations = 0
    message = "converged"

    def relative(gradient: np.ndarray, objective: float) -> float:
        return float(np.linalg.norm(gradient)) * spec.data_scale / max(objective, 1e-300)

    for _ in range(settings.newton_max_iter):
        if relative(state.gradient, state.objective) <= tolerance:
            break
        hessian = np.eye(count) / count
        if state.inner.e > 0:
            q = _curvature(spec, state.inner, p)
            psd = state.inner.e * (B.T @ (q[:, None] * B))
            g = state.inner.gradient
            exact = psd - state.inner.e * (p - 1) * np.outer(g, g) + hessian
            try:
                cho_factor(exact, lower=True, check_finite=False)
                hessian = exact
            except LinAlgError:
                logger.debug("Penalized Hessian not positive definite; using its PSD part")
                hessian = psd + hessian
        direction = -_solve_spd(hessian, state.gradient)
        slope = float(state.gradient @ direction)
        if slope >= 0:
            direction, slope = -state.gradient, -float(state.gradient @ state.gradient)
        trial = _armijo(evaluate, state, direction, slope)
        iterations += 1
        if trial is None:
            message = "line search failed"
            break
        state = trial
    else:
        message = "iteration cap reached"

    v_p = spec.competitor(state.x)
    penalized_value, penalty = penalized_objective(spec, v_p, target, p)
    gradient_norm = relative(state.gradient, state.objective)
    converged = gradient_norm <= tolerance
    if not converged:
        logger.warning(f"Penalized stage p={p} did not converge ({message}); gradient norm {gradient_norm:.3e}")
    return StageResult(
        p=p,
        u_p=v_p,
        e_p=eval_Ep(spec, v_p, p),
        gradient_norm=gradient_norm,
        iterations=iterations,
        converged=converged,
        message=message if not converged else "converged",
        penalized_value=penalized_value,
        penalty=penalty,
    )


def penalized_chain_holds(e_p: float, penalized: StageResult, e_target: float, slack: float = 1e-10) -> bool:
    """e_p <= E_p(v_p) <= A_p(v_p) <= E_p(target), each up to a relative slack."""
    if penalized.penalized_value is None:
        raise SolverError("stage was not produced by the penalized solver")
    chain = [e_p, penalized.e_p, penalized.penalized_value, e_target]
    scale = max(1.0, max(abs(value) for value in chain))
    return all(b >= a - slack * scale for a, b in zip(chain, chain[1:]))
