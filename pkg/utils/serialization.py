"""
JSON codecs for allocations, convex subproblems and iteration traces.
"""
import json
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from solver.problem import Allocation

ALLOCATION_FIELDS = ("s_u", "s_d", "p_u", "p_d", "pbar_u", "pbar_d")


def allocation_to_dict(alloc: Allocation) -> Dict[str, Any]:
    return {name: np.asarray(getattr(alloc, name)).tolist() for name in ALLOCATION_FIELDS}


def allocation_from_dict(data: Dict[str, Any]) -> Allocation:
    missing = [name for name in ALLOCATION_FIELDS if name not in data]
    if missing:
        raise ValueError(f"allocation is missing fields: {', '.join(missing)}")
    return Allocation(**{name: np.asarray(data[name], dtype=float) for name in ALLOCATION_FIELDS})


def save_allocation(alloc: Allocation, path: Union[str, Path]) -> Path:
    """Save an allocation as JSON."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(allocation_to_dict(alloc), f, indent=2)
    return path


def load_allocation(path: Union[str, Path]) -> Allocation:
    """Load an allocation written by save_allocation."""
    with open(path, "r") as f:
        return allocation_from_dict(json.load(f))


def subproblem_to_dict(sub) -> Dict[str, Any]:
    """Index map, objective, sparse affine rows, bounds and log-constraint descriptors."""
    coo = sub.A_ub.tocoo()
    return {
        "index": sub.index.to_dict(),
        "c": sub.c.tolist(),
        "const": sub.const,
        "A_ub": {
            "shape": list(coo.shape),
            "row": coo.row.tolist(),
            "col": coo.col.tolist(),
            "data": coo.data.tolist(),
        },
        "b_ub": sub.b_ub.tolist(),
        "row_names": list(sub.row_names),
        "lb": sub.lb.tolist(),
        "ub": sub.ub.tolist(),
        "log_constraints": [
            {
                "name": con.name,
                "idx": con.idx.tolist(),
                "gains": con.gains.tolist(),
                "lin_idx": con.lin_idx.tolist(),
                "lin_coef": con.lin_coef.tolist(),
                "rhs": con.rhs,
            }
            for con in sub.log_constraints
        ],
    }


def trace_to_dict(trace) -> Dict[str, Any]:
    return {
        "start": trace.start,
        "status": trace.status,
        "exact": trace.exact,
        "retries": trace.retries,
        "fallback": trace.fallback,
        "iterations": [
            {
                "iteration": r.iteration,
                "penalized_obj_w": r.penalized_obj_w,
                "raw_obj_w": r.raw_obj_w,
                "gap_u": r.gap_u,
                "gap_d": r.gap_d,
                "status": r.status,
                "c1_slack_bits": r.c1_slack,
                "c2_slack_bits": r.c2_slack,
                "restored": r.restored,
            }
            for r in trace.records
        ],
        "resolve_iterations": len(trace.resolve_records),
        "report": trace.report.to_dict() if trace.report is not None else None,
    }
