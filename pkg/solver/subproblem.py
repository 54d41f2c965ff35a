"""
Convex subproblem solved at every SCA iteration: a linear objective, affine
inequalities, box bounds and concave rate constraints

    sum_l log2(1 + g_l * x[i_l]) - lin . x  >=  rhs

handed to a cvxpy conic solver (exponential cone).
"""
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import cvxpy as cp
import numpy as np
import scipy.sparse as sparse

from config import config
from solver.fbtrate import LOG2E

logger = logging.getLogger(__name__)

PRIMAL_TOL = 1e-7
GAP_TOL = 1e-6

# Solver settings tighter than the SCA convergence test
SOLVER_OPTIONS = {
    "CLARABEL": {"tol_gap_abs": 1e-9, "tol_gap_rel": 1e-9, "tol_feas": 1e-9, "max_iter": 200},
    "ECOS": {"abstol": 1e-9, "reltol": 1e-9, "feastol": 1e-9, "max_iters": 200},
    "SCS": {"eps_abs": 1e-9, "eps_rel": 1e-9, "max_iters": 200000},
}


class VariableIndex:
    """Bijective map between named array blocks and positions in the flat vector."""

    def __init__(self, blocks: List[Tuple[str, Tuple[int, ...]]]):
        self.blocks: Dict[str, Tuple[int, Tuple[int, ...]]] = {}
        offset = 0
        for name, shape in blocks:
            if name in self.blocks:
                raise ValueError(f"duplicate block {name}")
            self.blocks[name] = (offset, tuple(shape))
            offset += int(np.prod(shape))
        self.size = offset

    def positions(self, name: str) -> np.ndarray:
        """Flat positions of a block, shaped like the block."""
        start, shape = self.blocks[name]
        return np.arange(start, start + int(np.prod(shape))).reshape(shape)

    def pos(self, name: str, index: Tuple[int, ...]) -> int:
        start, shape = self.blocks[name]
        return start + int(np.ravel_multi_index(index, shape))

    def unpack(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        return {name: x[start:start + int(np.prod(shape))].reshape(shape)
                for name, (start, shape) in self.blocks.items()}

    def to_dict(self) -> Dict[str, Dict]:
        return {name: {"offset": start, "shape": list(shape)} for name, (start, shape) in self.blocks.items()}


@dataclass
class LogConstraint:
    """sum_l log2(1 + gains[l] * x[idx[l]]) - lin_coef . x[lin_idx] >= rhs"""

    name: str
    idx: np.ndarray
    gains: np.ndarray
    lin_idx: np.ndarray
    lin_coef: np.ndarray
    rhs: float

    def value(self, x: np.ndarray) -> float:
        rate = float(np.sum(np.log1p(self.gains * x[self.idx])) * LOG2E) if self.idx.size else 0.0
        return rate - float(self.lin_coef @ x[self.lin_idx])


@dataclass
class ConvexSubproblem:
    """One SCA iteration's convex program in flat-vector form."""

    index: VariableIndex
    c: np.ndarray
    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    log_constraints: List[LogConstraint]
    row_names: List[str] = field(default_factory=list)
    const: float = 0.0

    def __post_init__(self):
        n = self.index.size
        self.c = np.asarray(self.c, dtype=float)
        self.A_ub = sparse.csr_matrix(self.A_ub, shape=(len(self.b_ub), n))
        self.b_ub = np.asarray(self.b_ub, dtype=float)
        if self.c.shape != (n,) or self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("objective and bounds must match the variable index")
        if not np.all(np.isfinite(self.c)):
            raise ValueError("objective coefficients must be finite")
        if not (np.all(np.isfinite(self.lb)) and np.all(np.isfinite(self.ub))):
            raise ValueError("every variable needs finite bounds")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound exceeds upper bound")
        for con in self.log_constraints:
            if np.any(con.gains <= 0):
                raise ValueError(f"log constraint {con.name} has a nonpositive gain")

    def primal_residual(self, x: np.ndarray) -> float:
        """Worst violation, each row scaled by max(1, |rhs|)."""
        worst = 0.0
        if self.A_ub.shape[0]:
            excess = (self.A_ub @ x - self.b_ub) / np.maximum(1.0, np.abs(self.b_ub))
            worst = max(worst, float(excess.max()))
        worst = max(worst, float((self.lb - x).max()), float((x - self.ub).max()))
        for con in self.log_constraints:
            worst = max(worst, (con.rhs - con.value(x)) / max(1.0, abs(con.rhs)))
        return max(0.0, worst)

    def objective_value(self, x: np.ndarray) -> float:
        return float(self.c @ x) + self.const


@dataclass
class SubproblemSolution:
    x: Optional[np.ndarray]
    values: Dict[str, np.ndarray]
    objective: float
    status: str  # optimal | infeasible | max-iter
    primal_residual: float
    duality_gap: float
    solve_time_s: float = 0.0
    solver_iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == "optimal"


def _failed(status: str, started: float) -> SubproblemSolution:
    return SubproblemSolution(
        x=None, values={}, objective=float("nan"), status=status,
        primal_residual=float("inf"), duality_gap=float("inf"),
        solve_time_s=time.perf_counter() - started,
    )


def solve(sub: ConvexSubproblem, solver: Optional[str] = None,
          warm_start: Optional[np.ndarray] = None) -> SubproblemSolution:
    """
    Solve a convex subproblem.

    Each variable is written as x = base + sign * y with y in [0, ub - lb] and
    base the bound its cost pushes toward, so all objective weights are nonnegative
    and large penalty weights do not drown the watt-scale objective.

    Args:
        sub: The subproblem
        solver: cvxpy solver name (defaults to config.SOLVER)
        warm_start: Optional starting point in original variables

    Returns:
        SubproblemSolution with status optimal | infeasible | max-iter
    """
    started = time.perf_counter()
    solver = (solver or config.SOLVER).upper()
    n = sub.index.size

    sign = np.where(sub.c < 0, -1.0, 1.0)
    base = np.where(sub.c < 0, sub.ub, sub.lb)
    width = sub.ub - sub.lb
    cost = np.abs(sub.c)

    y = cp.Variable(n)
    if warm_start is not None:
        y.value = np.clip((np.asarray(warm_start) - base) * sign, 0.0, width)

    constraints = [y >= 0, y <= width]
    if sub.A_ub.shape[0]:
        A_y = sub.A_ub @ sparse.diags(sign)
        constraints.append(A_y @ y <= sub.b_ub - sub.A_ub @ base)
    log_cons = []
    for con in sub.log_constraints:
        lin_y = con.lin_coef * sign[con.lin_idx]
        rhs = con.rhs + float(con.lin_coef @ base[con.lin_idx])
        if not con.idx.size and not con.lin_idx.size:
            if rhs > 0:
                logger.debug(f"Log constraint {con.name} has no variables and rhs {rhs:.3g}")
                return _failed("infeasible", started)
            continue
        expr = 0
        if con.idx.size:
            arg0 = 1.0 + con.gains * base[con.idx]
            slope = con.gains * sign[con.idx]
            expr = cp.sum(cp.log(arg0 + cp.multiply(slope, y[con.idx]))) * LOG2E
        if con.lin_idx.size:
            expr = expr - lin_y @ y[con.lin_idx]
        log_cons.append(expr >= rhs)
    constraints.extend(log_cons)

    problem = cp.Problem(cp.Minimize(cost @ y), constraints)
    try:
        problem.solve(
            solver=solver,
            verbose=config.SOLVER_VERBOSE,
            warm_start=warm_start is not None,
            **SOLVER_OPTIONS.get(solver, {}),
        )
    except cp.error.SolverError as e:
        logger.error(f"Solver {solver} failed: {e}")
        return _failed("max-iter", started)

    if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return _failed("infeasible", started)
    if y.value is None:
        logger.warning(f"Solver {solver} returned status {problem.status} without a point")
        return _failed("max-iter", started)

    y_val = np.clip(np.asarray(y.value, dtype=float), 0.0, width)
    x = base + sign * y_val
    residual = sub.primal_residual(x)

    complementarity = _complementarity(constraints)
    shifted_obj = float(cost @ y_val)
    gap = abs(complementarity) / max(1.0, abs(shifted_obj))

    status = "optimal"
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE) or residual > PRIMAL_TOL or gap > GAP_TOL:
        logger.debug(
            f"Subproblem accepted as max-iter: status={problem.status} residual={residual:.2e} gap={gap:.2e}"
        )
        status = "max-iter"

    stats = problem.solver_stats
    return SubproblemSolution(
        x=x,
        values=sub.index.unpack(x),
        objective=sub.objective_value(x),
        status=status,
        primal_residual=residual,
        duality_gap=gap,
        solve_time_s=time.perf_counter() - started,
        solver_iterations=int(getattr(stats, "num_iters", 0) or 0),
    )


def _complementarity(constraints) -> float:
    """sum(lambda * slack) over all inequality constraints at the returned point."""
    total = 0.0
    for con in constraints:
        dual = con.dual_value
        if dual is None:
            continue
        # for  lhs <= rhs  and  lhs >= rhs  cvxpy keeps  expr = lhs - rhs  (or rhs - lhs) <= 0
        slack = -np.asarray(con.expr.value, dtype=float)
        total += float(np.sum(np.asarray(dual, dtype=float) * slack))
    return total


def dump_subproblem(sub: ConvexSubproblem, path) -> Path:
    """Write a subproblem as JSON for offline inspection."""
    from utils.serialization import subproblem_to_dict

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(subproblem_to_dict(sub), f)
    logger.info(f"Subproblem written to {path}")
    return path
