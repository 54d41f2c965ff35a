"""
FastAPI routes for the allocation solver.
"""
import asyncio
import json
import logging
from typing import Any, Dict, List, Optional

from fastapi import APIRouter, HTTPException
from pydantic import BaseModel, Field, ValidationError
from sse_starlette.sse import EventSourceResponse

from config import config
from simulation import SweepRunner, SweepSpec, cell_row
from solver.benchmarks import SchemeId, run_scheme
from solver.scasolver import ScaConfig
from solver.sysmodel import draw_realization, list_scenarios, load_scenario
from utils.serialization import allocation_to_dict, trace_to_dict
from utils.units import w_to_dbm

logger = logging.getLogger(__name__)

router = APIRouter()


# Request/Response Models
class SolveRequest(BaseModel):
    scenario: str = Field(config.DEFAULT_SCENARIO, description="Scenario name")
    seed: int = Field(0, description="Realization seed")
    scheme: SchemeId = Field(SchemeId.PROPOSED, description="Proposed, SC, FSA or Oracle")
    overrides: Dict[str, Any] = Field(default_factory=dict, description="Scenario fields to replace")
    include_allocation: bool = Field(False, description="Return the full indicator and power arrays")


class SolveResponse(BaseModel):
    scheme: str
    seed: int
    objective_w: Optional[float]
    objective_dbm: Optional[float]
    feasible: bool
    iterations: int
    runtime_s: float
    error: Optional[str] = None
    report: Optional[Dict[str, Any]] = None
    trace: Optional[Dict[str, Any]] = None
    allocation: Optional[Dict[str, Any]] = None
    notes: Dict[str, float] = Field(default_factory=dict)


class SweepRequest(BaseModel):
    scenario: str = Field(config.DEFAULT_SCENARIO, description="Scenario name")
    seed: int = Field(0, description="Master seed")
    spec: SweepSpec = Field(..., description="Sweep specification")
    workers: Optional[int] = Field(None, description="Worker processes")


def _finite(value: float) -> Optional[float]:
    return value if value == value and abs(value) != float("inf") else None


def _load(name: str, overrides: Optional[Dict[str, Any]] = None):
    try:
        cfg = load_scenario(name)
        return cfg.with_updates(**overrides) if overrides else cfg
    except (ValueError, ValidationError) as e:
        raise HTTPException(status_code=400, detail=str(e))


@router.get("/api/scenarios")
async def get_scenarios():
    """List the scenario files available to the solver."""
    return {"scenarios": list_scenarios(), "default": config.DEFAULT_SCENARIO}


@router.post("/api/solve", response_model=SolveResponse)
async def solve_endpoint(request: SolveRequest):
    """Solve one channel realization with one scheme."""
    cfg = _load(request.scenario, request.overrides)
    try:
        real = draw_realization(cfg, request.seed)
        outcome = await asyncio.to_thread(run_scheme, request.scheme, cfg, real, ScaConfig())
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.exception("Solve failed")
        raise HTTPException(status_code=500, detail=f"Solver error: {str(e)}")

    if outcome.error:
        status = 400 if "refuses" in outcome.error else 500
        raise HTTPException(status_code=status, detail=outcome.error)

    objective = _finite(outcome.objective_w)
    return SolveResponse(
        scheme=outcome.scheme.value,
        seed=request.seed,
        objective_w=objective,
        objective_dbm=_finite(float(w_to_dbm(objective))) if objective is not None else None,
        feasible=outcome.feasible,
        iterations=outcome.iterations,
        runtime_s=outcome.runtime_s,
        report=outcome.report.to_dict() if outcome.report else None,
        trace=trace_to_dict(outcome.trace) if outcome.trace else None,
        allocation=allocation_to_dict(outcome.allocation)
        if request.include_allocation and outcome.allocation is not None else None,
        notes=outcome.notes,
    )


@router.post("/api/sweep")
async def sweep_endpoint(request: SweepRequest):
    """Run a sweep to completion and return the averaged table."""
    cfg = _load(request.scenario)
    try:
        cells = await asyncio.to_thread(
            SweepRunner().run, request.spec, cfg, request.seed, workers=request.workers
        )
    except ValueError as e:
        raise HTTPException(status_code=400, detail=str(e))
    except Exception as e:
        logger.exception("Sweep failed")
        raise HTTPException(status_code=500, detail=f"Sweep error: {str(e)}")
    return {"rows": [cell_row(cell) for cell in cells], "errors": sum(c.error_count for c in cells)}


@router.post("/stream/sweep")
async def sweep_stream_endpoint(request: SweepRequest):
    """
    Run a sweep with streaming results (SSE): one event per finished cell, then a
    final `done` event.
    """
    cfg = _load(request.scenario)

    async def generate():
        cells: List = []
        try:
            iterator = SweepRunner().iter_cells(request.spec, cfg, request.seed, workers=request.workers)
            while True:
                cell = await asyncio.to_thread(next, iterator, None)
                if cell is None:
                    break
                cells.append(cell)
                yield {"event": "cell", "data": json.dumps(cell_row(cell))}
            yield {"event": "done", "data": json.dumps({"cells": len(cells),
                                                        "errors": sum(c.error_count for c in cells)})}
        except Exception as e:
            logger.exception("Streaming sweep failed")
            yield {"event": "error", "data": json.dumps({"error": str(e)})}

    return EventSourceResponse(generate())
