from sqlmodel import SQLModel, Field, Relationship
from datetime import datetime, timezone
from typing import Any, Optional, List
from enum import Enum


REPORT_SCHEMA = "fraclinf-report/1"
DEFAULT_P_SCHEDULE = [2.0, 4.0, 8.0, 16.0, 32.0, 64.0, 128.0]


def _utcnow() -> datetime:
    return datetime.now(timezone.utc)


class RunStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class WeightKind(str, Enum):
    GAUSSIAN = "gaussian"
    RATIONAL = "rational"


class OmegaKind(str, Enum):
    INTERVAL = "interval"
    BOX = "box"
    BALL = "ball"


class ExteriorFamily(str, Enum):
    SMOOTH_BUMP = "smooth_bump"
    POLYNOMIAL_SPLINE = "polynomial_spline"
    CUSTOM_SAMPLES = "custom_samples"


class SupremandKind(str, Enum):
    IDENTITY = "identity"
    SCALED = "scaled"
    WEIGHTED_LINEAR = "weighted_linear"
    TANH_PERTURBED = "tanh_perturbed"


class OperatorMode(str, Enum):
    WITH_TAIL = "with_tail"
    DIFFERENCE_ONLY = "difference_only"


class CheckStatus(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    SOFT_PASS = "soft_pass"
    SOFT_FAIL = "soft_fail"
    SKIPPED = "skipped"


# Persistent models (run registry)
class RunRecord(SQLModel, table=True):
    __tablename__ = "runs"  # type: ignore[assignment]

    id: Optional[int] = Field(default=None, primary_key=True)
    command: str = Field(max_length=50)
    config_hash: str = Field(max_length=64, index=True)
    output_dir: str = Field(max_length=500)
    status: RunStatus = Field(default=RunStatus.PENDING)
    degenerate: bool = Field(default=False)
    e_inf_estimate: Optional[float] = Field(default=None)
    hard_checks_passed: Optional[bool] = Field(default=None)
    error_message: Optional[str] = Field(default=None, max_length=1000)
    created_at: datetime = Field(default_factory=_utcnow)
    updated_at: datetime = Field(default_factory=_utcnow)

    stages: List["StageRecord"] = Relationship(back_populates="run")


class StageRecord(SQLModel, table=True):
    __tablename__ = "run_stages"  # type: ignore[assignment]

    id: Optional[int] = Field(default=None, primary_key=True)
    run_id: int = Field(foreign_key="runs.id")
    p: float = Field(ge=1)
    e_p: float = Field(ge=0)
    gradient_norm: float = Field(ge=0)
    iterations: int = Field(ge=0)
    converged: bool = Field(default=True)

    run: RunRecord = Relationship(back_populates="stages")


# Non-persistent schemas (configuration)
class GridSettings(SQLModel, table=False):
    half_width: float = Field(gt=0)
    spacing: float = Field(gt=0)


class OmegaShapeSettings(SQLModel, table=False):
    kind: OmegaKind
    center: List[float] = Field(default_factory=list)
    radius: Optional[float] = Field(default=None, gt=0)
    lower: Optional[List[float]] = Field(default=None)
    upper: Optional[List[float]] = Field(default=None)


class ExteriorBumpSettings(SQLModel, table=False):
    center: List[float]
    radius: float = Field(gt=0)
    amplitude: float = Field(default=1.0)


class ExteriorDataSettings(SQLModel, table=False):
    family: ExteriorFamily = Field(default=ExteriorFamily.SMOOTH_BUMP)
    bumps: List[ExteriorBumpSettings] = Field(default_factory=list)
    samples: Optional[List[float]] = Field(default=None)
    regularity_order: Optional[float] = Field(default=None, gt=0)
    allow_degenerate: bool = Field(default=False)


class WeightSettings(SQLModel, table=False):
    kind: WeightKind = Field(default=WeightKind.GAUSSIAN)
    sigma: float = Field(default=1.0, gt=0)


class SupremandSettings(SQLModel, table=False):
    kind: SupremandKind = Field(default=SupremandKind.IDENTITY)
    scale: float = Field(default=1.0, gt=0)
    alpha: float = Field(default=0.5, ge=0)
    beta: float = Field(default=0.25, ge=0, le=0.5)


class SolverSettings(SQLModel, table=False):
    p_schedule: List[float] = Field(default_factory=lambda: list(DEFAULT_P_SCHEDULE))
    p_schedule_defaulted: bool = Field(default=False)
    tol_grad: float = Field(default=1e-9, gt=0)
    lbfgs_max_iter: int = Field(default=200, ge=0)
    newton_max_iter: int = Field(default=200, ge=1)
    max_iter: int = Field(default=2000, ge=1)
    operator_mode: OperatorMode = Field(default=OperatorMode.WITH_TAIL)
    dense_limit: int = Field(default=4096, ge=1)


class VerifySettings(SQLModel, table=False):
    taus: List[float] = Field(default_factory=lambda: [0.01, 0.05, 0.1, 0.25, 0.5, 1.0])
    saturation_tau: float = Field(default=0.05, gt=0)
    saturation_threshold: float = Field(default=0.9, gt=0, le=1)
    zero_band_rel: float = Field(default=1e-3, gt=0)
    cauchy_slack: float = Field(default=1.5, ge=1)
    mass_tol: float = Field(default=1e-8, gt=0)
    duality_tol: float = Field(default=1e-6, gt=0)
    sharmonicity_tol: float = Field(default=1e-6, gt=0)
    monotone_tol: float = Field(default=1e-10, gt=0)
    far_shell_factors: List[float] = Field(default_factory=lambda: [2.0, 4.0, 8.0])
    decay_rel_tol: float = Field(default=0.3, gt=0)
    uniqueness_rel_tol: float = Field(default=1e-4, gt=0)
    uniqueness_saturation_tol: float = Field(default=0.02, gt=0)
    penalized_route: bool = Field(default=False)


class RunConfig(SQLModel, table=False):
    dim: int = Field(ge=1, le=2)
    s: float = Field(gt=0, lt=1)
    grid: GridSettings
    omega: List[OmegaShapeSettings] = Field(min_length=1)
    exterior_data: ExteriorDataSettings
    weight: WeightSettings = Field(default_factory=WeightSettings)
    supremand: SupremandSettings = Field(default_factory=SupremandSettings)
    solver: SolverSettings = Field(default_factory=SolverSettings)
    verify: VerifySettings = Field(default_factory=VerifySettings)
    seed: int = Field(default=0, ge=0)
    output_dir: str = Field(default="runs", max_length=500)

    def hypothesis_violations(self) -> List[str]:
        """Violations of the standing hypotheses that field validation cannot see."""
        violations: List[str] = []
        if not self.dim > 2 * self.s:
            violations.append(f"requires n > 2s (got n={self.dim}, s={self.s})")
        schedule = self.solver.p_schedule
        if not schedule:
            violations.append("p_schedule must not be empty")
        else:
            if schedule[0] < 2:
                violations.append(f"p_schedule must start at p >= 2 (got {schedule[0]})")
            if any(b <= a for a, b in zip(schedule, schedule[1:])):
                violations.append(f"p_schedule must be strictly increasing (got {schedule})")
        for index, shape in enumerate(self.omega):
            match shape.kind:
                case OmegaKind.INTERVAL | OmegaKind.BALL:
                    if len(shape.center) != self.dim or shape.radius is None:
                        violations.append(f"omega[{index}] ({shape.kind.value}) needs a {self.dim}-d center and radius")
                    if shape.kind == OmegaKind.INTERVAL and self.dim != 1:
                        violations.append(f"omega[{index}]: intervals are 1D only")
                case OmegaKind.BOX:
                    if shape.lower is None or shape.upper is None:
                        violations.append(f"omega[{index}] (box) needs lower and upper corners")
                    elif len(shape.lower) != self.dim or len(shape.upper) != self.dim:
                        violations.append(f"omega[{index}] (box) corners must have {self.dim} coordinates")
                    elif any(lo >= hi for lo, hi in zip(shape.lower, shape.upper)):
                        violations.append(f"omega[{index}] (box) needs lower < upper on every axis")
        for index, bump in enumerate(self.exterior_data.bumps):
            if len(bump.center) != self.dim:
                violations.append(f"exterior_data.bumps[{index}] center must have {self.dim} coordinates")
        return violations


# Non-persistent schemas (reports)
class CheckResult(SQLModel, table=False):
    name: str = Field(max_length=100)
    status: CheckStatus
    hard: bool = Field(default=True)
    value: Optional[float] = Field(default=None)
    threshold: Optional[float] = Field(default=None)
    details: dict[str, Any] = Field(default_factory=dict)


class StageSummary(SQLModel, table=False):
    p: float
    e_p: float
    gradient_norm: float
    iterations: int
    converged: bool
    mass: Optional[float] = Field(default=None)
    duality_gap: Optional[float] = Field(default=None)
    saturated_fraction: Optional[float] = Field(default=None)


class ReportProvenance(SQLModel, table=False):
    config_hash: str
    p_schedule: List[float]
    tol_grad: float
    seed: int
    grid_spacing: float
    node_count: int


class FullReport(SQLModel, table=False):
    schema_version: str = Field(default=REPORT_SCHEMA)
    provenance: ReportProvenance
    degenerate: bool = Field(default=False)
    hard_passed: bool
    checks: List[CheckResult] = Field(default_factory=list)
    stages: List[StageSummary] = Field(default_factory=list)
    e_inf_estimate: float
    e_inf_extrapolated: Optional[float] = Field(default=None)
