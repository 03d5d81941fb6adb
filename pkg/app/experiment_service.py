import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import List, Optional

import numpy as np
from sqlmodel import desc, select

from app.config import build_problem, config_hash, validate_config
from app.database import get_session
from app.domain_grid import ScalarField
from app.dual_measure import DualField, dual_field, duality_identity, limit_extraction
from app.errors import ConfigError, FraclinfError
from app.export import (
    stage_label,
    state_payload,
    write_csv,
    write_dual_csv,
    write_field_csv,
    write_json,
    write_operator_csv,
    write_stage_fields,
    write_trajectory,
)
from app.lp_solver import ContinuationResult, ProblemSpec, continuation
from app.models import RunConfig, RunRecord, RunStatus, StageRecord
from app.quadrature import kelvin_identity_check, operator_accuracy
from app.verify import check_monotone_ep, check_pde_saturation, full_report, uniqueness_experiment

logger = logging.getLogger(__name__)

OPERATOR_EXPORT_LIMIT = 512


@dataclass
class CommandOutcome:
    command: str
    exit_code: int
    run_dir: Path
    files: List[Path] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


class ExperimentService:
    # Run registry
    def _start_run(self, command: str, digest: str, run_dir: Path) -> Optional[int]:
        try:
            with get_session() as session:
                record = RunRecord(
                    command=command, config_hash=digest, output_dir=str(run_dir), status=RunStatus.RUNNING
                )
                session.add(record)
                session.commit()
                session.refresh(record)
                return record.id
        except Exception as e:
            logger.error(f"Error registering {command} run: {e}")
            return None

    def _finish_run(
        self,
        run_id: Optional[int],
        result: Optional[ContinuationResult] = None,
        hard_passed: Optional[bool] = None,
    ):
        if run_id is None:
            return
        try:
            with get_session() as session:
                record = session.get(RunRecord, run_id)
                if record is None:
                    logger.error(f"Run {run_id} not found in registry")
                    return
                record.status = RunStatus.COMPLETED
                record.hard_checks_passed = hard_passed
                record.updated_at = datetime.now(timezone.utc)
                if result is not None:
                    record.degenerate = result.degenerate
                    record.e_inf_estimate = result.e_inf_estimate
                    for stage in result.stages:
                        session.add(
                            StageRecord(
                                run_id=run_id,
                                p=stage.p,
                                e_p=stage.e_p,
                                gradient_norm=stage.gradient_norm,
                                iterations=stage.iterations,
                                converged=stage.converged,
                            )
                        )
                session.commit()
        except Exception as e:
            logger.error(f"Error completing run {run_id}: {e}")

    def _fail_run(self, run_id: Optional[int], message: str):
        if run_id is None:
            return
        try:
            with get_session() as session:
                record = session.get(RunRecord, run_id)
                if record is not None:
                    record.status = RunStatus.FAILED
                    record.error_message = message[:1000]
                    record.updated_at = datetime.now(timezone.utc)
                    session.commit()
        except Exception as e:
            logger.error(f"Error marking run {run_id} as failed: {e}")

    def list_runs(self, limit: int = 20) -> List[RunRecord]:
        """Most recent registry rows first"""
        with get_session() as session:
            statement = select(RunRecord).order_by(desc(RunRecord.id)).limit(limit)
            return list(session.exec(statement).all())

    def get_stages(self, run_id: int) -> List[StageRecord]:
        with get_session() as session:
            statement = select(StageRecord).where(StageRecord.run_id == run_id).order_by(StageRecord.p)
            return list(session.exec(statement).all())

    # Helpers
    def run_dir(self, config: RunConfig) -> Path:
        return Path(config.output_dir) / f"run-{config_hash(config)[:12]}"

    def _write_common(
        self, run_dir: Path, digest: str, config: RunConfig, spec: ProblemSpec, result: ContinuationResult
    ) -> list[Path]:
        files = [write_json(run_dir / "config.json", config.model_dump(mode="json"))]
        files.append(write_trajectory(run_dir / "trajectory.csv", digest, result))
        files.extend(write_stage_fields(run_dir, digest, stage, spec.operator) for stage in result.stages)
        return files

    def _duals(self, spec: ProblemSpec, result: ContinuationResult, config: RunConfig) -> list[DualField]:
        if result.degenerate:
            return []
        return [dual_field(stage, spec, config.verify.zero_band_rel) for stage in result.stages]

    def _execute(self, command: str, config: RunConfig, body) -> CommandOutcome:
        digest = config_hash(config)
        run_dir = self.run_dir(config)
        run_id = self._start_run(command, digest, run_dir)
        try:
            outcome, result, hard_passed = body(digest, run_dir)
        except FraclinfError as e:
            logger.error(f"{command} failed: {e}")
            self._fail_run(run_id, str(e))
            raise
        self._finish_run(run_id, result, hard_passed)
        logger.info(f"{command} finished with exit code {outcome.exit_code}; artifacts in {run_dir}")
        return outcome

    # Commands
    def solve(self, config: RunConfig) -> CommandOutcome:
        def body(digest: str, run_dir: Path):
            spec = build_problem(config)
            if spec.degenerate:
                logger.warning("DEGENERATE SCENARIO: exterior data vanishes; all fields are zero")
            result = continuation(spec, config.solver.p_schedule, config.solver)
            files = self._write_common(run_dir, digest, config, spec, result)
            files.append(write_json(run_dir / "state.json", state_payload(digest, result)))
            summary = {"e_inf_estimate": result.e_inf_estimate, "all_converged": result.all_converged}
            return CommandOutcome("solve", 0, run_dir, files, summary), result, None

        return self._execute("solve", config, body)

    def verify(self, config: RunConfig) -> CommandOutcome:
        def body(digest: str, run_dir: Path):
            spec = build_problem(config)
            schedule = config.solver.p_schedule
            if len(schedule) < 3 and not spec.degenerate:
                raise ConfigError([f"verify needs at least 3 p values (got {len(schedule)})"])
            result = continuation(spec, schedule, config.solver)
            duals = self._duals(spec, result, config)
            diagnostics = uniqueness = None
            if not result.degenerate:
                diagnostics = limit_extraction(
                    result, spec, duals, config.verify.zero_band_rel, config.verify.cauchy_slack
                )
                uniqueness = uniqueness_experiment(
                    spec,
                    schedule,
                    config.solver,
                    taus=[config.verify.saturation_tau],
                    seed=config.seed,
                    penalized=config.verify.penalized_route,
                    reference=result,
                )
            report = full_report(
                spec,
                result,
                duals if not result.degenerate else None,
                diagnostics,
                config_hash=digest,
                seed=config.seed,
                solver_settings=config.solver,
                verify_settings=config.verify,
                uniqueness=uniqueness,
            )
            files = self._write_common(run_dir, digest, config, spec, result)
            files.extend(write_dual_csv(run_dir, digest, dual) for dual in duals)
            files.append(write_json(run_dir / "state.json", state_payload(digest, result, duals)))
            files.append(write_json(run_dir / "report.json", report.model_dump(mode="json")))
            exit_code = 0 if report.hard_passed else 1
            summary = {"hard_passed": report.hard_passed, "e_inf_estimate": report.e_inf_estimate}
            return CommandOutcome("verify", exit_code, run_dir, files, summary), result, report.hard_passed

        return self._execute("verify", config, body)

    def sweep_p(self, config: RunConfig) -> CommandOutcome:
        def body(digest: str, run_dir: Path):
            spec = build_problem(config)
            result = continuation(spec, config.solver.p_schedule, config.solver)
            duals = self._duals(spec, result, config)
            extra: dict[str, list] = {"mass": [], "duality_gap": [], "saturated_fraction": []}
            if duals:
                tau = config.verify.saturation_tau
                saturation = check_pde_saturation(result, spec, [tau], duals)
                extra["mass"] = [dual.mass for dual in duals]
                extra["duality_gap"] = [duality_identity(d, st, spec) for d, st in zip(duals, result.stages)]
                extra["saturated_fraction"] = [report.excluding_band[tau] for report in saturation]
            else:
                extra = {name: [None] * len(result.stages) for name in extra}
            files = [write_trajectory(run_dir / "trajectory.csv", digest, result, extra)]
            passed = True
            if len(result.stages) >= 2:
                monotone = check_monotone_ep(result, config.verify.monotone_tol)
                passed = monotone.passed
                if not passed:
                    logger.warning(f"e_p not monotone: worst violation {monotone.max_violation:.3e}")
            return CommandOutcome("sweep-p", 0 if passed else 1, run_dir, files), result, passed

        return self._execute("sweep-p", config, body)

    def uniqueness(self, config: RunConfig) -> CommandOutcome:
        def body(digest: str, run_dir: Path):
            spec = build_problem(config)
            report = uniqueness_experiment(
                spec,
                config.solver.p_schedule,
                config.solver,
                taus=[config.verify.saturation_tau],
                seed=config.seed,
                penalized=config.verify.penalized_route,
            )
            passed = report.passed(config.verify.uniqueness_rel_tol, config.verify.uniqueness_saturation_tol)
            payload = {
                "config_hash": digest,
                "pair_distance": report.pair_distance,
                "relative_distance": report.relative_distance,
                "average_test": {str(k): v for k, v in report.average_test.items()},
                "path_saturation": {
                    name: {str(k): v for k, v in fractions.items()}
                    for name, fractions in report.path_saturation.items()
                },
                "saturation_gap": report.saturation_gap,
                "seed": report.seed,
                "penalized_distance": report.penalized_distance,
                "penalized_chain": report.penalized_chain,
                "passed": passed,
            }
            files = [write_json(run_dir / "uniqueness.json", payload)]
            return CommandOutcome("uniqueness", 0 if passed else 1, run_dir, files, payload), None, passed

        return self._execute("uniqueness", config, body)

    def operator_check(self, config: RunConfig) -> CommandOutcome:
        def body(digest: str, run_dir: Path):
            report = operator_accuracy(
                config.dim,
                config.s,
                config.grid.half_width,
                config.grid.spacing,
                dense_limit=config.solver.dense_limit,
            )
            rows = [
                [row.function, row.error_coarse, row.error_fine, row.ratio, row.order, row.unconverged]
                for row in report.rows
            ]
            files = [
                write_csv(
                    run_dir / "operator_check.csv",
                    digest,
                    ["function", "error_h", "error_h_half", "ratio", "order", "unconverged"],
                    rows,
                )
            ]
            passed = report.passed()
            summary: dict = {"accuracy_passed": passed, "unconverged": sum(row.unconverged for row in report.rows)}
            if config.dim == 1:
                kelvin = kelvin_identity_check(config.s)
                files.append(
                    write_csv(
                        run_dir / "kelvin_check.csv",
                        digest,
                        ["x", "discrepancy"],
                        zip(kelvin.probes, kelvin.discrepancies),
                    )
                )
                summary["kelvin_passed"] = kelvin.passed()
                passed = passed and kelvin.passed()
            spec = build_problem(config)
            if spec.grid.node_count <= OPERATOR_EXPORT_LIMIT:
                files.append(write_operator_csv(run_dir, digest, spec.operator))
            return CommandOutcome("operator-check", 0 if passed else 1, run_dir, files, summary), None, passed

        return self._execute("operator-check", config, body)

    def export(self, run_dir: Path) -> CommandOutcome:
        """Rebuild the CSV artifacts of a finished run from its state.json."""
        run_dir = Path(run_dir)
        config_path, state_path = run_dir / "config.json", run_dir / "state.json"
        for path in (config_path, state_path):
            if not path.is_file():
                raise ConfigError([f"missing run artifact: {path}"])
        config = validate_config(json.loads(config_path.read_text()))
        state = json.loads(state_path.read_text())
        digest = config_hash(config)
        if state.get("config_hash") != digest:
            raise ConfigError([f"state.json hash {state.get('config_hash')} does not match config hash {digest}"])

        spec = build_problem(config)
        files: list[Path] = []
        for stage in state["stages"]:
            u = ScalarField(spec.grid, np.asarray(stage["u"], dtype=float))
            label = stage_label(stage["p"])
            columns = {"u": u.values, "frac_laplacian": spec.operator.apply_array(u.values)}
            files.append(write_field_csv(run_dir / "fields" / f"u_{label}.csv", digest, spec.grid, columns))
            if stage.get("f") is not None:
                f = np.asarray(stage["f"], dtype=float)
                band = np.abs(f) < config.verify.zero_band_rel * float(np.max(np.abs(f), initial=0.0))
                dual_columns = {"f": f, "sign": np.sign(f).astype(np.int8), "zero_band": band}
                files.append(write_field_csv(run_dir / "duals" / f"f_{label}.csv", digest, spec.grid, dual_columns))
        header = ["p", "e_p", "gradient_norm", "iterations", "converged"]
        rows = [[stage[name] for name in header] for stage in state["stages"]]
        files.append(write_csv(run_dir / "trajectory.csv", digest, header, rows))
        logger.info(f"Exported {len(files)} file(s) from {run_dir}")
        return CommandOutcome("export", 0, run_dir, files)


# Global service instance
experiment_service = ExperimentService()
