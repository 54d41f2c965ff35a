"""
Monte Carlo sweeps over task size or packet error probability.

Every realization seed comes from the master seed and the realization counter, and
the same realization is reused across sweep values and schemes. Powers are averaged
in watts over the feasible realizations and reported in dBm.
"""
import csv
import logging
import math
import threading
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from config import config
from solver.benchmarks import SchemeId, run_scheme
from solver.scasolver import ScaConfig
from solver.sysmodel import SystemConfig, draw_realization
from utils.serialization import save_allocation
from utils.units import w_to_dbm

logger = logging.getLogger(__name__)

Axis = Literal["task_bits", "error_prob"]
DELAY_SCENARIOS = ("S0", "S1")
CSV_COLUMNS = (
    "axis", "value", "scheme", "avg_power_dbm", "feasible_count",
    "infeasible_count", "avg_iters", "avg_walltime_s",
)
DEFAULT_VALUES = {
    "task_bits": [16.0, 32.0, 48.0, 64.0],
    "error_prob": [1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
}
FULL_SCALE_VALUES = {
    "task_bits": [40.0, 80.0, 120.0, 160.0, 200.0],
    "error_prob": [1e-7, 1e-6, 1e-5, 1e-4, 1e-3],
}


class SweepSpec(BaseModel):
    """One sweep: an axis, its values, the schemes and the realization count."""

    model_config = ConfigDict(frozen=True)

    axis: Axis = Field(..., description="Swept parameter")
    values: List[float] = Field(..., min_length=1, description="Sorted sweep values")
    schemes: List[SchemeId] = Field(
        default_factory=lambda: [SchemeId.PROPOSED, SchemeId.SC, SchemeId.FSA],
        min_length=1, description="Schemes evaluated at every value",
    )
    realizations: int = Field(..., ge=1, description="Realizations per value")
    delay_scenario: str = Field("S0", description="S0: no delay restriction; S1: first half of users restricted")

    @field_validator("values")
    @classmethod
    def _sorted(cls, v):
        if list(v) != sorted(v):
            raise ValueError("sweep values must be sorted ascending")
        return v

    @field_validator("delay_scenario")
    @classmethod
    def _known_scenario(cls, v):
        if v not in DELAY_SCENARIOS:
            raise ValueError(f"unknown delay scenario {v} (choose from {', '.join(DELAY_SCENARIOS)})")
        return v


@dataclass
class RunResult:
    scheme: str
    value: float
    seed: int
    objective_w: float
    feasible: bool
    iterations: int
    wall_time_s: float
    error: Optional[str] = None

    @property
    def status(self) -> str:
        if self.error:
            return "error"
        return "feasible" if self.feasible else "infeasible"


@dataclass
class SweepCell:
    """Averaged result of one (value, scheme) pair."""

    axis: str
    value: float
    scheme: str
    avg_power_dbm: float
    feasible_count: int
    infeasible_count: int
    avg_iters: float
    avg_walltime_s: float
    error_count: int = 0


def delay_scenario(cfg: SystemConfig, label: str) -> SystemConfig:
    """
    S0: D_k = tau + N_d for every user.
    S1: the first ceil(K/2) users get D_k = tau + 2 (at most tau + N_d), the rest
    stay unrestricted.
    """
    unrestricted = cfg.tau + cfg.num_slots_dl
    if label == "S0":
        deadlines = [unrestricted] * cfg.num_users
    elif label == "S1":
        strict = math.ceil(cfg.num_users / 2)
        deadlines = [min(cfg.tau + 2, unrestricted)] * strict + [unrestricted] * (cfg.num_users - strict)
    else:
        raise ValueError(f"unknown delay scenario {label}")
    return cfg.with_updates(deadlines=deadlines)


def derive_seed(master_seed: int, realization: int) -> int:
    """Seed of realization r: SeedSequence([master, r]), first 32-bit word."""
    return int(np.random.SeedSequence([int(master_seed), int(realization)]).generate_state(1)[0])


def apply_value(cfg: SystemConfig, axis: str, value: float) -> SystemConfig:
    if axis == "task_bits":
        return cfg.with_updates(task_bits=[float(value)] * cfg.num_users)
    if axis == "error_prob":
        eps = [float(value)] * cfg.num_users
        return cfg.with_updates(eps_ul=eps, eps_dl=eps)
    raise ValueError(f"unknown sweep axis {axis}")


def run_single(cfg: SystemConfig, scheme: SchemeId, value: float, seed: int,
               sca: Optional[ScaConfig] = None, dump_dir: Optional[Path] = None) -> RunResult:
    """
    One scheme on one realization. Exceptions become an error result.

    With `dump_dir`, the final allocation is saved there as
    <scheme>_<value>_<seed>.json.
    """
    started = time.perf_counter()
    try:
        real = draw_realization(cfg, seed)
        outcome = run_scheme(scheme, cfg, real, sca)
        if dump_dir is not None and outcome.allocation is not None:
            save_allocation(outcome.allocation,
                            Path(dump_dir) / f"{outcome.scheme.value}_{format_value(value)}_{seed}.json")
    except Exception as e:
        logger.exception(f"Realization {seed} failed for {SchemeId(scheme).value}")
        return RunResult(SchemeId(scheme).value, value, seed, float("nan"), False, 0,
                         time.perf_counter() - started, error=str(e))
    return RunResult(
        scheme=outcome.scheme.value,
        value=value,
        seed=seed,
        objective_w=outcome.objective_w,
        feasible=outcome.feasible,
        iterations=outcome.iterations,
        wall_time_s=time.perf_counter() - started,
        error=outcome.error,
    )


def _run_task(task) -> RunResult:
    return run_single(*task)


def aggregate(axis: str, value: float, scheme: str, results: Sequence[RunResult]) -> SweepCell:
    """Average the feasible powers in watts, report in dBm; nan when none is feasible."""
    feasible = [r for r in results if r.feasible and r.error is None]
    powers = [r.objective_w for r in feasible]
    avg_dbm = float(w_to_dbm(np.mean(powers))) if powers else float("nan")
    return SweepCell(
        axis=axis,
        value=float(value),
        scheme=scheme,
        avg_power_dbm=avg_dbm,
        feasible_count=len(feasible),
        infeasible_count=len(results) - len(feasible),
        avg_iters=float(np.mean([r.iterations for r in results])) if results else 0.0,
        avg_walltime_s=float(np.mean([r.wall_time_s for r in results])) if results else 0.0,
        error_count=sum(1 for r in results if r.error is not None),
    )


class SweepRunner:
    """
    Runs sweeps on a process pool and keeps the raw results of the last finished
    sweep. Each sweep collects its results locally, so concurrent sweeps on one
    runner never mix; `last_results` is replaced once a sweep completes.
    """

    def __init__(self):
        self.last_results: List[RunResult] = []
        self._lock = threading.Lock()

    def _execute(self, tasks: List[tuple], workers: int,
                 progress: Optional[Callable[[RunResult], None]]) -> List[RunResult]:
        results: List[Optional[RunResult]] = [None] * len(tasks)
        if workers <= 1 or len(tasks) <= 1:
            for i, task in enumerate(tasks):
                results[i] = _run_task(task)
                if progress:
                    progress(results[i])
            return results

        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_run_task, task): i for i, task in enumerate(tasks)}
            for future in as_completed(futures):
                results[futures[future]] = future.result()
                if progress:
                    progress(results[futures[future]])
        return results

    def iter_cells(self, spec: SweepSpec, cfg: SystemConfig, seed: int, sca: Optional[ScaConfig] = None,
                   workers: Optional[int] = None,
                   progress: Optional[Callable[[RunResult], None]] = None,
                   dump_dir: Optional[Path] = None) -> Iterator[SweepCell]:
        """
        Yield the cells of one sweep value at a time, in (value, scheme) order.

        Args:
            spec: Sweep specification
            cfg: Base scenario (the delay scenario and sweep value are applied on top)
            seed: Master seed
            sca: Iteration controls
            workers: Pool size (defaults to config.workers())
            progress: Called once per finished realization
            dump_dir: Directory receiving every final allocation as JSON
        """
        sca = sca or ScaConfig()
        workers = workers or config.workers()
        base = delay_scenario(cfg, spec.delay_scenario)
        seeds = [derive_seed(seed, r) for r in range(spec.realizations)]
        collected: List[RunResult] = []
        for value in spec.values:
            cell_cfg = apply_value(base, spec.axis, value)
            tasks = [(cell_cfg, scheme, value, s, sca, dump_dir) for scheme in spec.schemes for s in seeds]
            results = self._execute(tasks, workers, progress)
            collected.extend(results)
            for j, scheme in enumerate(spec.schemes):
                chunk = results[j * len(seeds):(j + 1) * len(seeds)]
                cell = aggregate(spec.axis, value, scheme.value, chunk)
                logger.info(
                    f"{spec.axis}={value:g} {scheme.value}: {cell.avg_power_dbm:.3f} dBm, "
                    f"{cell.feasible_count} feasible, {cell.infeasible_count} infeasible"
                )
                yield cell
        with self._lock:
            self.last_results = collected

    def run(self, spec: SweepSpec, cfg: SystemConfig, seed: int, **kwargs) -> List[SweepCell]:
        return list(self.iter_cells(spec, cfg, seed, **kwargs))


def run_sweep(spec: SweepSpec, cfg: SystemConfig, seed: int, sca: Optional[ScaConfig] = None,
              workers: Optional[int] = None,
              progress: Optional[Callable[[RunResult], None]] = None,
              dump_dir: Optional[Path] = None) -> List[SweepCell]:
    """Run a full sweep and return one cell per (value, scheme)."""
    return SweepRunner().run(spec, cfg, seed, sca=sca, workers=workers, progress=progress, dump_dir=dump_dir)


def format_value(value: float) -> str:
    return f"{float(value):.10g}"


def cell_row(cell: SweepCell, timing: bool = False) -> dict:
    dbm = "nan" if not np.isfinite(cell.avg_power_dbm) else f"{cell.avg_power_dbm:.6f}"
    return {
        "axis": cell.axis,
        "value": format_value(cell.value),
        "scheme": cell.scheme,
        "avg_power_dbm": dbm,
        "feasible_count": str(cell.feasible_count),
        "infeasible_count": str(cell.infeasible_count),
        "avg_iters": f"{cell.avg_iters:.3f}",
        "avg_walltime_s": f"{cell.avg_walltime_s:.6f}" if timing else "0.000000",
    }


def emit_csv(cells: Sequence[SweepCell], path: Union[str, Path], timing: bool = False) -> Path:
    """
    Write the sweep table as UTF-8 CSV with LF line endings.

    Wall time is written as zero unless `timing` is set, so repeated runs with the
    same seed produce identical files.
    """
    if not cells:
        raise ValueError("cannot write an empty sweep table")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for cell in cells:
            writer.writerow(cell_row(cell, timing))
    logger.info(f"Wrote {len(cells)} rows to {path}")
    return path


def read_csv(path: Union[str, Path]) -> List[SweepCell]:
    """Parse a file written by emit_csv."""
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected CSV header: {reader.fieldnames}")
        return [
            SweepCell(
                axis=row["axis"],
                value=float(row["value"]),
                scheme=row["scheme"],
                avg_power_dbm=float(row["avg_power_dbm"]),
                feasible_count=int(row["feasible_count"]),
                infeasible_count=int(row["infeasible_count"]),
                avg_iters=float(row["avg_iters"]),
                avg_walltime_s=float(row["avg_walltime_s"]),
            )
            for row in reader
        ]
