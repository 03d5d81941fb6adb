"""CSV/JSON artifact writers. Every file carries the config hash; floats keep 17 digits."""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from app.domain_grid import Grid
from app.dual_measure import DualField
from app.fraclap import FracLapOperator
from app.lp_solver import ContinuationResult, StageResult

logger = logging.getLogger(__name__)

HASH_PREFIX = "# fraclinf config_hash="
COORD_NAMES = ("x", "y")


def format_float(value: float) -> str:
    return format(float(value), ".17g")


def _cell(value: Any) -> str:
    match value:
        case bool() | np.bool_():
            return str(int(value))
        case int() | np.integer():
            return str(int(value))
        case float() | np.floating():
            return format_float(value)
        case None:
            return ""
    return str(value)


def write_csv(path: Path, config_hash: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as handle:
        handle.write(f"{HASH_PREFIX}{config_hash}\n")
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(value) for value in row])
    logger.debug(f"Wrote {path}")
    return path


def read_csv(path: Path) -> tuple[str, list[str], list[list[str]]]:
    """(config hash, header, rows) of a file written by write_csv."""
    with path.open(newline="") as handle:
        first = handle.readline().rstrip("\n")
        reader = csv.reader(handle)
        header = next(reader)
        rows = list(reader)
    return first.removeprefix(HASH_PREFIX), header, rows


def write_json(path: Path, payload: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.debug(f"Wrote {path}")
    return path


def stage_label(p: float) -> str:
    return f"p{format(p, 'g')}"


def write_field_csv(path: Path, config_hash: str, grid: Grid, columns: dict[str, np.ndarray]) -> Path:
    """One row per node: coordinates, then each named column."""
    coords = np.asarray(grid.coords)
    header = [*COORD_NAMES[: grid.dim], *columns]
    values = [np.asarray(column) for column in columns.values()]
    rows = ([*coords[i], *(column[i] for column in values)] for i in range(grid.node_count))
    return write_csv(path, config_hash, header, rows)


def write_stage_fields(run_dir: Path, config_hash: str, stage: StageResult, operator: FracLapOperator) -> Path:
    Au = operator.apply_array(stage.u_p.values)
    return write_field_csv(
        run_dir / "fields" / f"u_{stage_label(stage.p)}.csv",
        config_hash,
        stage.u_p.grid,
        {"u": stage.u_p.values, "frac_laplacian": Au},
    )


def write_trajectory(
    path: Path, config_hash: str, result: ContinuationResult, extra: dict[str, list] | None = None
) -> Path:
    """Columns p, e_p, gradient_norm, iterations (plus any per-stage extras)."""
    extra = extra or {}
    header = ["p", "e_p", "gradient_norm", "iterations", "converged", *extra]
    rows = (
        [stage.p, stage.e_p, stage.gradient_norm, stage.iterations, stage.converged, *(extra[k][i] for k in extra)]
        for i, stage in enumerate(result.stages)
    )
    return write_csv(path, config_hash, header, rows)


def write_dual_csv(run_dir: Path, config_hash: str, dual: DualField) -> Path:
    return write_field_csv(
        run_dir / "duals" / f"f_{stage_label(dual.p)}.csv",
        config_hash,
        dual.f.grid,
        {"f": dual.values, "sign": dual.sign, "zero_band": dual.zero_band},
    )


def write_operator_csv(run_dir: Path, config_hash: str, operator: FracLapOperator) -> Path:
    """Dense matrix rows followed by the tail and boundary correction columns."""
    matrix = operator.dense_matrix()
    header = ["row", *(f"a{j}" for j in range(matrix.shape[1])), "tail", "boundary_correction"]
    rows = (
        [i, *matrix[i], operator.tail[i], operator.boundary_correction[i]] for i in range(matrix.shape[0])
    )
    return write_csv(run_dir / "operator.csv", config_hash, header, rows)


def state_payload(config_hash: str, result: ContinuationResult, duals: Sequence[DualField] = ()) -> dict[str, Any]:
    """Raw arrays of a run, enough to re-export every CSV."""
    by_p = {dual.p: dual for dual in duals}
    return {
        "config_hash": config_hash,
        "degenerate": result.degenerate,
        "stages": [
            {
                "p": stage.p,
                "e_p": stage.e_p,
                "gradient_norm": stage.gradient_norm,
                "iterations": stage.iterations,
                "converged": stage.converged,
                "u": [float(v) for v in stage.u_p.values],
                "f": None if stage.p not in by_p else [float(v) for v in by_p[stage.p].values],
            }
            for stage in result.stages
        ],
    }
