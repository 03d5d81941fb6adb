import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from pydantic import ValidationError

from app.domain_grid import (
    BumpSpec,
    DomainSpec,
    ExteriorData,
    Grid,
    OmegaShape,
    build_domain,
    build_grid,
    build_weight,
    bump_support_violations,
    sample_exterior_data,
)
from app.errors import (
    ConfigError,
    DomainError,
    ExteriorDataError,
    FraclinfError,
    GridError,
    OperatorError,
    SupremandError,
)
from app.fraclap import SupremandF, build_operator, check_supremand
from app.lp_solver import ProblemSpec, assemble_problem
from app.models import DEFAULT_P_SCHEDULE, ExteriorFamily, OmegaKind, OmegaShapeSettings, RunConfig

logger = logging.getLogger(__name__)


def _format_validation_error(error: ValidationError) -> list[str]:
    return [f"{'.'.join(str(part) for part in item['loc'])}: {item['msg']}" for item in error.errors()]


def omega_shapes(config: RunConfig) -> list[OmegaShape]:
    shapes = []
    for settings in config.omega:
        shapes.append(_omega_shape(settings))
    return shapes


def _omega_shape(settings: OmegaShapeSettings) -> OmegaShape:
    match settings.kind:
        case OmegaKind.BOX:
            return OmegaShape.box(settings.lower or [], settings.upper or [])
        case OmegaKind.INTERVAL:
            return OmegaShape(kind=OmegaKind.INTERVAL, center=tuple(settings.center), radius=settings.radius)
        case OmegaKind.BALL:
            return OmegaShape.ball(settings.center, settings.radius or 0.0)
    raise DomainError(f"unknown domain shape {settings.kind!r}")


def exterior_spec(config: RunConfig) -> ExteriorData:
    data = config.exterior_data
    return ExteriorData(
        family=data.family,
        bumps=tuple(BumpSpec(tuple(b.center), b.radius, b.amplitude) for b in data.bumps),
        samples=None if data.samples is None else tuple(data.samples),
        regularity_order=data.regularity_order,
    )


def supremand_for(config: RunConfig) -> SupremandF:
    settings = config.supremand
    return SupremandF(kind=settings.kind, scale=settings.scale, alpha=settings.alpha, beta=settings.beta)


@dataclass(frozen=True, eq=False)
class Geometry:
    grid: Grid
    domain: DomainSpec


def build_geometry(config: RunConfig) -> Geometry:
    grid = build_grid(config.dim, config.grid.half_width, config.grid.spacing)
    return Geometry(grid=grid, domain=build_domain(grid, omega_shapes(config)))


def build_problem(config: RunConfig) -> ProblemSpec:
    """Grid, domain, operator, weight and exterior data assembled into one problem.

    Assembly failures come from the config itself and are raised as ConfigError.
    """
    try:
        geometry = build_geometry(config)
        grid = geometry.grid
        u0 = sample_exterior_data(
            exterior_spec(config), grid, geometry.domain, allow_trivial=config.exterior_data.allow_degenerate
        )
        supremand = supremand_for(config)
        check_supremand(supremand, grid)
        operator = build_operator(grid, config.s, config.solver.operator_mode, dense_limit=config.solver.dense_limit)
        weight = build_weight(grid, config.weight.kind, config.weight.sigma)
    except (GridError, DomainError, ExteriorDataError, OperatorError, SupremandError) as e:
        logger.error(f"Problem assembly failed: {e}")
        raise ConfigError([str(e)]) from e
    return assemble_problem(
        geometry.domain,
        operator,
        weight,
        u0,
        supremand=supremand,
        allow_degenerate=config.exterior_data.allow_degenerate,
    )


def _geometry_violations(config: RunConfig) -> list[str]:
    """Grid, domain and exterior-data errors, each checked whenever its inputs could be built."""
    try:
        grid = build_grid(config.dim, config.grid.half_width, config.grid.spacing)
    except GridError as e:
        logger.debug(f"Grid validation failed: {e}")
        return [str(e)]

    violations = []
    exterior = exterior_spec(config)
    try:
        domain = build_domain(grid, omega_shapes(config))
    except DomainError as e:
        logger.debug(f"Domain validation failed: {e}")
        violations.append(str(e))
        if exterior.family != ExteriorFamily.CUSTOM_SAMPLES:
            violations.extend(bump_support_violations(exterior, grid))
        return violations
    try:
        sample_exterior_data(exterior, grid, domain, allow_trivial=config.exterior_data.allow_degenerate)
    except ExteriorDataError as e:
        logger.debug(f"Exterior data validation failed: {e}")
        violations.extend(str(e).split("; "))
    return violations


def validate_config(data: dict[str, Any]) -> RunConfig:
    """Validate a raw config mapping, reporting every violation at once."""
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        logger.error(f"Config schema validation failed with {e.error_count()} error(s)")
        raise ConfigError(_format_validation_error(e)) from e

    if "p_schedule" not in data.get("solver", {}):
        logger.warning(f"p_schedule missing; using the default {DEFAULT_P_SCHEDULE}")
        config.solver.p_schedule = list(DEFAULT_P_SCHEDULE)
        config.solver.p_schedule_defaulted = True

    violations = config.hypothesis_violations() + _geometry_violations(config)
    if violations:
        raise ConfigError(violations)
    return config


def parse_config(path: Path | str) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError([f"config file not found: {path}"])
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        logger.error(f"Config {path} is not valid JSON: {e}")
        raise ConfigError([f"invalid JSON in {path}: {e}"]) from e
    if not isinstance(data, dict):
        raise ConfigError([f"config root must be a JSON object (got {type(data).__name__})"])
    return validate_config(data)


def apply_overrides(
    config: RunConfig,
    output_dir: Optional[str] = None,
    seed: Optional[int] = None,
    spacing: Optional[float] = None,
    tol: Optional[float] = None,
) -> RunConfig:
    """Command-line overrides; the result is re-validated like a fresh config."""
    data = config.model_dump(mode="json")
    if output_dir is not None:
        data["output_dir"] = output_dir
    if seed is not None:
        data["seed"] = seed
    if spacing is not None:
        data["grid"]["spacing"] = spacing
    if tol is not None:
        data["solver"]["tol_grad"] = tol
    defaulted = config.solver.p_schedule_defaulted
    updated = validate_config(data)
    updated.solver.p_schedule_defaulted = defaulted
    return updated


def canonical_json(config: RunConfig) -> str:
    data = config.model_dump(mode="json", exclude={"output_dir": True, "solver": {"p_schedule_defaulted"}})
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def config_hash(config: RunConfig) -> str:
    """sha256 of the canonical config; the output directory does not take part."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def describe_error(error: FraclinfError) -> list[str]:
    if isinstance(error, ConfigError):
        return error.violations
    return [str(error)]
