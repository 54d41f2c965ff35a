"""
Successive convex approximation for the penalized Big-M problem.

Every iteration replaces H(s) and the dispersion term V(pbar) by their tangents at
the previous iterate, solves the resulting convex program and stops once the
penalized objective settles and the relaxed indicators are binary. The relaxed
result is rounded and one power-only pass (indicators fixed) restores exact
feasibility of the original constraints.
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
import scipy.sparse as sparse
from pydantic import BaseModel, ConfigDict, Field, field_validator

from solver.assignment import best_split, can_hold, feasible_powers, repair_split, score_split
from solver.fbtrate import LOG2E, dispersion, q_inv
from solver.problem import (
    Allocation,
    ConstraintMasks,
    FeasibilityReport,
    build_masks,
    check,
    link_rates,
    objective,
)
from solver.subproblem import ConvexSubproblem, LogConstraint, SubproblemSolution, VariableIndex, solve
from solver.sysmodel import ChannelRealization, SystemConfig
from solver.transform import big_m_objective, bigm_constraints, exactness_flag, penalty_state

logger = logging.getLogger(__name__)

InitStrategy = Literal["feasible", "greedy", "random", "relaxed"]

# max-iter solutions are still used when they are this close to feasible
ACCEPT_RESIDUAL = 1e-6
TRACE_COLUMNS = ("iteration", "penalized_obj_W", "raw_obj_W", "gap_u", "gap_d", "status")
_POLISH_STEP = 1e-5
_POLISH_ROUNDS = 20
# SNR floor of the dispersion expansion point on successive restoration retries
_RESTORATION_SNR = (1.0, 10.0, 100.0)
# carried power share that keeps a sub-threshold indicator in the rounding candidates
_ROUNDING_POWER_SHARE = 0.01


class ScaConfig(BaseModel):
    """Iteration controls for the SCA driver."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    max_iters: int = Field(30, ge=1, description="Iteration cap")
    obj_tol: float = Field(1e-5, gt=0, description="Relative change of the penalized objective")
    gap_tol: float = Field(1e-4, gt=0, description="Total E - H gap treated as binary")
    rounding_threshold: float = Field(0.5, gt=0, le=1, description="Indicator value rounded up to 1")
    restoration_retries: int = Field(3, ge=0, description="Retries after an infeasible subproblem")
    init: InitStrategy = Field("feasible", description="Start used by a single run")
    starts: Tuple[InitStrategy, ...] = Field(("feasible", "greedy"), description="Starts tried by multi-start runs")
    dispersion: bool = Field(True, description="False drops V and uses Shannon rates")
    power_margin_db: float = Field(3.0, ge=0, description="Margin on closed-form start powers")
    perturb_power_w: float = Field(1e-9, gt=0, description="Expansion power used when all powers are zero")
    feasibility_tol: float = Field(1e-6, gt=0, description="Tolerance of the final constraint check")
    seed: int = Field(0, description="Seed of the random start")
    solver: Optional[str] = Field(None, description="cvxpy solver; defaults to config.SOLVER")

    @field_validator("starts")
    @classmethod
    def _at_least_one(cls, v):
        if not v:
            raise ValueError("at least one start strategy is required")
        return v


@dataclass
class IterationRecord:
    iteration: int
    penalized_obj_w: float
    raw_obj_w: float
    gap_u: float
    gap_d: float
    status: str
    c1_slack: float = 0.0
    c2_slack: float = 0.0
    solve_time_s: float = 0.0
    restored: bool = False


@dataclass
class IterationTrace:
    """Per-iteration history of one SCA run plus its final verdict."""

    start: str
    records: List[IterationRecord] = field(default_factory=list)
    resolve_records: List[IterationRecord] = field(default_factory=list)
    status: str = "max-iter"  # converged | max-iter | infeasible
    exact: bool = False
    retries: int = 0
    fallback: bool = False
    report: Optional[FeasibilityReport] = None

    def __len__(self) -> int:
        return len(self.records)

    @property
    def feasible(self) -> bool:
        return self.report is not None and self.report.feasible

    def penalized_series(self) -> np.ndarray:
        return np.array([r.penalized_obj_w for r in self.records])

    def to_rows(self) -> List[dict]:
        return [
            {
                "iteration": r.iteration,
                "penalized_obj_W": f"{r.penalized_obj_w:.10g}",
                "raw_obj_W": f"{r.raw_obj_w:.10g}",
                "gap_u": f"{r.gap_u:.6g}",
                "gap_d": f"{r.gap_d:.6g}",
                "status": r.status,
            }
            for r in self.records
        ]


# ---------------------------------------------------------------------------
# Linearizations
# ---------------------------------------------------------------------------

def linearize_h(s, s_point) -> float:
    """First-order expansion of H(s) = sum(s^2) at s_point, evaluated at s."""
    s, s_point = np.asarray(s, dtype=float), np.asarray(s_point, dtype=float)
    return float(np.sum(s_point ** 2) + np.sum(2.0 * s_point * (s - s_point)))


def v_bar(pbar, gains, eps: float) -> float:
    """V(pbar) = a Qinv(eps) sqrt(sum V(g pbar)) in bits."""
    total = float(np.sum(dispersion(np.asarray(gains) * np.asarray(pbar))))
    return LOG2E * q_inv(eps) * float(np.sqrt(max(total, 0.0)))


def v_gradient(pbar_point, gains, eps: float) -> np.ndarray:
    """
    Gradient of V at pbar_point: a Qinv(eps) g / ((1 + g pbar)^3 sqrt(sum V)).

    Raises:
        ValueError: when every expansion power is zero (the gradient is undefined)
    """
    gains = np.asarray(gains, dtype=float)
    pbar_point = np.asarray(pbar_point, dtype=float)
    total = float(np.sum(dispersion(gains * pbar_point)))
    if total <= 0.0:
        raise ValueError("dispersion gradient is undefined at zero power; perturb the expansion point")
    return LOG2E * q_inv(eps) * gains / ((1.0 + gains * pbar_point) ** 3 * np.sqrt(total))


def linearize_v(pbar, pbar_point, gains, eps: float) -> float:
    """Tangent of the concave V at pbar_point, evaluated at pbar (an upper bound on V)."""
    grad = v_gradient(pbar_point, gains, eps)
    delta = np.asarray(pbar, dtype=float) - np.asarray(pbar_point, dtype=float)
    return v_bar(pbar_point, gains, eps) + float(np.sum(grad * delta))


# ---------------------------------------------------------------------------
# Subproblem assembly
# ---------------------------------------------------------------------------

@dataclass
class SubproblemFrame:
    """The part of the convex program that does not move between iterations."""

    index: VariableIndex
    A_ub: sparse.csr_matrix
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    row_names: List[str]
    usable_u: np.ndarray
    usable_d: np.ndarray
    fixed: bool


class _RowBuilder:
    def __init__(self):
        self.cols, self.vals, self.rhs, self.names = [], [], [], []

    def add(self, cols, vals, rhs, name: str) -> None:
        cols = np.atleast_2d(np.asarray(cols, dtype=int))
        vals = np.broadcast_to(np.asarray(vals, dtype=float), cols.shape)
        rhs = np.broadcast_to(np.asarray(rhs, dtype=float), (cols.shape[0],))
        self.cols.append(cols)
        self.vals.append(vals)
        self.rhs.append(rhs)
        self.names.extend([name] * cols.shape[0])

    def matrix(self, n: int) -> Tuple[sparse.csr_matrix, np.ndarray]:
        rows, cols, vals, offset = [], [], [], 0
        for c, v in zip(self.cols, self.vals):
            r = np.repeat(np.arange(offset, offset + c.shape[0]), c.shape[1])
            rows.append(r)
            cols.append(c.ravel())
            vals.append(v.ravel())
            offset += c.shape[0]
        if not rows:
            return sparse.csr_matrix((0, n)), np.zeros(0)
        A = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(offset, n)
        )
        return A.tocsr(), np.concatenate(self.rhs)


def build_frame(cfg: SystemConfig, masks: Optional[ConstraintMasks] = None,
                fixed_s: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> SubproblemFrame:
    """
    Variables, bounds and affine rows: C3, C5, C7, C9, C11 and the Big-M envelopes.

    With `fixed_s` the indicators are pinned and only the powers remain free.
    """
    masks = masks or build_masks(cfg)
    index = VariableIndex([
        ("s_u", cfg.shape_ul), ("s_d", cfg.shape_dl),
        ("p_u", cfg.shape_ul), ("p_d", cfg.shape_dl),
        ("pbar_u", cfg.shape_ul), ("pbar_d", cfg.shape_dl),
    ])
    allowed_d = np.broadcast_to(masks.dl_allowed()[:, None, :], cfg.shape_dl).astype(float)
    cap_u = np.broadcast_to(cfg.p_user_max_w[:, None, None], cfg.shape_ul)
    cap_d = np.full(cfg.shape_dl, cfg.p_max_w)

    if fixed_s is None:
        s_lb_u, s_ub_u = np.zeros(cfg.shape_ul), np.ones(cfg.shape_ul)
        s_lb_d, s_ub_d = np.zeros(cfg.shape_dl), allowed_d
        usable_u, usable_d = s_ub_u > 0, s_ub_d > 0
    else:
        s_lb_u = s_ub_u = np.asarray(fixed_s[0], dtype=float)
        s_lb_d = s_ub_d = np.asarray(fixed_s[1], dtype=float)
        usable_u = s_ub_u > 0.5
        usable_d = (s_ub_d > 0.5) & (allowed_d > 0)

    lb, ub = np.zeros(index.size), np.zeros(index.size)
    for name, lo, hi in (
        ("s_u", s_lb_u, s_ub_u), ("s_d", s_lb_d, s_ub_d),
        ("p_u", 0.0, cap_u * usable_u), ("p_d", 0.0, cap_d * usable_d),
        ("pbar_u", 0.0, cap_u * usable_u), ("pbar_d", 0.0, cap_d * usable_d),
    ):
        pos = index.positions(name)
        lb[pos] = lo
        ub[pos] = hi

    rows = _RowBuilder()
    pos_su, pos_sd = index.positions("s_u"), index.positions("s_d")
    k_count = cfg.num_users
    if fixed_s is None:
        m_u, m_d = np.meshgrid(np.arange(cfg.num_subcarriers_ul), np.arange(cfg.num_subcarriers_dl), indexing="ij")
        for k in range(k_count):
            for n_u, n_d in masks.causality_pairs:
                if not allowed_d[k, 0, n_d]:
                    continue
                cols = np.stack([pos_su[k, m_u.ravel(), n_u], pos_sd[k, m_d.ravel(), n_d]], axis=1)
                rows.add(cols, 1.0, 1.0, "C3")
        rows.add(pos_su.transpose(1, 2, 0).reshape(-1, k_count), 1.0, 1.0, "C5")
        rows.add(pos_sd.transpose(1, 2, 0).reshape(-1, k_count), 1.0, 1.0, "C9")

    pos_pu, pos_pd = index.positions("pbar_u"), index.positions("pbar_d")
    rows.add(pos_pu.reshape(k_count, -1), 1.0, cfg.p_user_max_w, "C7")
    rows.add(pos_pd.reshape(1, -1), 1.0, cfg.p_max_w, "C11")

    for row in bigm_constraints(cfg):
        cols = [index.pos(f"{var}_{row.link}", row.index) for var, _ in row.coeffs]
        rows.add([cols], [[coef for _, coef in row.coeffs]], row.rhs, row.name)

    A_ub, b_ub = rows.matrix(index.size)
    return SubproblemFrame(
        index=index, A_ub=A_ub, b_ub=b_ub, lb=lb, ub=ub, row_names=rows.names,
        usable_u=np.asarray(usable_u), usable_d=np.asarray(usable_d), fixed=fixed_s is not None,
    )


def build_subproblem(cfg: SystemConfig, real: ChannelRealization, point: Allocation,
                     sca: Optional[ScaConfig] = None, masks: Optional[ConstraintMasks] = None,
                     frame: Optional[SubproblemFrame] = None, lift_snr: float = 0.0) -> ConvexSubproblem:
    """
    Convex program linearized at `point`.

    Objective: weighted pbar sums plus eta (E - H_lin) for each link. C1/C2 become
    sum log2(1 + g pbar) - V_lin(pbar) >= B per user, or plain Shannon rates when
    dispersion is off.

    Args:
        cfg: Scenario configuration
        real: Channel realization
        point: Expansion point (its s and pbar are used)
        sca: Iteration controls
        masks: Precomputed constraint masks
        frame: Precomputed iteration-independent part
        lift_snr: SNR floor of the dispersion expansion point (restoration only)

    Returns:
        ConvexSubproblem
    """
    sca = sca or ScaConfig()
    masks = masks or build_masks(cfg)
    frame = frame or build_frame(cfg, masks)
    index = frame.index

    c = np.zeros(index.size)
    const = 0.0
    weights = np.asarray(cfg.weights, dtype=float)
    c[index.positions("pbar_u")] = np.broadcast_to(weights[:, None, None], cfg.shape_ul)
    c[index.positions("pbar_d")] = 1.0
    if not frame.fixed:
        for name, s_point, eta in (("s_u", point.s_u, cfg.eta1_w), ("s_d", point.s_d, cfg.eta2_w)):
            c[index.positions(name)] = eta * (1.0 - 2.0 * s_point)
            const += eta * float(np.sum(s_point * s_point))

    log_constraints = []
    for link, label, pbar_point, g, bits, eps, usable in (
        ("u", "C1", point.pbar_u, real.g_u, cfg.uplink_bits, cfg.eps_ul, frame.usable_u),
        ("d", "C2", point.pbar_d, real.g_d, cfg.downlink_bits, cfg.eps_dl, frame.usable_d),
    ):
        pos = index.positions(f"pbar_{link}")
        for k in range(cfg.num_users):
            flat = pos[k][usable[k]]
            gains = g[k, np.nonzero(usable[k])[0]]
            lin_idx, lin_coef, rhs = np.zeros(0, dtype=int), np.zeros(0), float(bits[k])
            if sca.dispersion and flat.size:
                pt = pbar_point[k][usable[k]]
                if lift_snr > 0.0:
                    pt = np.maximum(pt, lift_snr / gains)
                if float(np.sum(dispersion(gains * pt))) <= 0.0:
                    pt = np.full(pt.shape, sca.perturb_power_w)
                grad = v_gradient(pt, gains, eps[k])
                lin_idx, lin_coef = flat, grad
                rhs += v_bar(pt, gains, eps[k]) - float(grad @ pt)
            log_constraints.append(LogConstraint(f"{label}[{k}]", flat, gains, lin_idx, lin_coef, rhs))

    return ConvexSubproblem(
        index=index, c=c, A_ub=frame.A_ub, b_ub=frame.b_ub, lb=frame.lb, ub=frame.ub,
        log_constraints=log_constraints, row_names=frame.row_names, const=const,
    )


# ---------------------------------------------------------------------------
# Starting points
# ---------------------------------------------------------------------------

def initial_point(cfg: SystemConfig, real: ChannelRealization, sca: Optional[ScaConfig] = None,
                  strategy: Optional[str] = None, masks: Optional[ConstraintMasks] = None) -> Allocation:
    """
    Starting allocation for one strategy.

    feasible: best round-robin split over the slot-window layouts, closed-form powers
    greedy:   best channel-aware split over the slot-window layouts, closed-form powers
    random:   seeded uniform indicators, round-robin powers
    relaxed:  every usable indicator at 0.5, round-robin powers
    """
    sca = sca or ScaConfig()
    strategy = strategy or sca.init
    masks = masks or build_masks(cfg)
    if strategy == "greedy":
        s_u, s_d = best_split(cfg, real, masks, "greedy", sca.dispersion)
    elif strategy in ("feasible", "random", "relaxed"):
        s_u, s_d = best_split(cfg, real, masks, "round_robin", sca.dispersion)
    else:
        raise ValueError(f"unknown start strategy: {strategy}")
    p_u, p_d = feasible_powers(cfg, real, s_u, s_d, sca.power_margin_db, sca.dispersion)
    if strategy in ("feasible", "greedy"):
        return Allocation.from_binary(s_u, s_d, p_u, p_d)

    allowed = np.broadcast_to(masks.dl_allowed()[:, None, :], cfg.shape_dl)
    if strategy == "random":
        seed = [sca.seed] if real.seed is None else [sca.seed, int(real.seed)]
        rng = np.random.default_rng(seed)
        rel_u = rng.uniform(size=cfg.shape_ul)
        rel_d = rng.uniform(size=cfg.shape_dl) * allowed
    else:
        rel_u = np.full(cfg.shape_ul, 0.5)
        rel_d = 0.5 * allowed
    return Allocation(rel_u, rel_d, p_u, p_d, p_u.copy(), p_d.copy())


def _check_start(start: Allocation, cfg: SystemConfig) -> None:
    if not start.matches(cfg):
        raise ValueError("start allocation shape does not match the configuration")
    if np.any(start.pbar_u > cfg.p_user_max_w[:, None, None] * (1 + 1e-9)) or \
            np.any(start.pbar_d > cfg.p_max_w * (1 + 1e-9)):
        raise ValueError("start powers exceed the power caps")


def _validate(cfg: SystemConfig, real: ChannelRealization, sca: ScaConfig) -> None:
    if not real.matches(cfg):
        raise ValueError("channel realization does not match the configuration")
    if sca.dispersion and (max(cfg.eps_ul) > 0.5 or max(cfg.eps_dl) > 0.5):
        raise ValueError("packet error probabilities above 0.5 are not supported")


# ---------------------------------------------------------------------------
# Iteration
# ---------------------------------------------------------------------------

def _usable(sol: SubproblemSolution) -> bool:
    return sol.x is not None and (sol.ok or sol.primal_residual <= ACCEPT_RESIDUAL)


def _blend(a: Allocation, b: Allocation, weight: float = 0.5) -> Allocation:
    mix = lambda x, y: (1.0 - weight) * x + weight * y  # noqa: E731
    return Allocation(
        mix(a.s_u, b.s_u), mix(a.s_d, b.s_d), mix(a.p_u, b.p_u),
        mix(a.p_d, b.p_d), mix(a.pbar_u, b.pbar_u), mix(a.pbar_d, b.pbar_d),
    )


def _to_allocation(sol: SubproblemSolution) -> Allocation:
    v = sol.values
    return Allocation(
        np.clip(v["s_u"], 0.0, 1.0), np.clip(v["s_d"], 0.0, 1.0),
        np.maximum(v["p_u"], 0.0), np.maximum(v["p_d"], 0.0),
        np.maximum(v["pbar_u"], 0.0), np.maximum(v["pbar_d"], 0.0),
    )


def _relaxed_rates(alloc: Allocation, cfg: SystemConfig, real: ChannelRealization,
                   dispersion_on: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Psi of the pbar iterate per user (pbar is zero wherever s is)."""
    psi_u = link_rates(np.ones(cfg.shape_ul), alloc.pbar_u, real.g_u, cfg.eps_ul, dispersion_on)
    psi_d = link_rates(np.ones(cfg.shape_dl), alloc.pbar_d, real.g_d, cfg.eps_dl, dispersion_on)
    return psi_u, psi_d


def _sca_loop(cfg: SystemConfig, real: ChannelRealization, sca: ScaConfig, frame: SubproblemFrame,
              masks: ConstraintMasks, start: Allocation, anchor: Allocation, trace: IterationTrace) -> Allocation:
    point = start
    previous = None
    for it in range(1, sca.max_iters + 1):
        expansion = point
        sol = solve(build_subproblem(cfg, real, expansion, sca, masks, frame), solver=sca.solver)
        tries = 0
        while not _usable(sol) and tries < sca.restoration_retries:
            lift = _RESTORATION_SNR[min(tries, len(_RESTORATION_SNR) - 1)]
            tries += 1
            logger.warning(f"Iteration {it}: subproblem {sol.status}, restoring toward the feasible start ({tries})")
            expansion = _blend(expansion, anchor)
            sol = solve(build_subproblem(cfg, real, expansion, sca, masks, frame, lift), solver=sca.solver)
        trace.retries += tries
        if not _usable(sol):
            logger.warning(f"Iteration {it}: no usable subproblem solution after {tries} retries")
            trace.status = "infeasible"
            return point

        current = _to_allocation(sol)
        state = penalty_state(current, cfg)
        raw = big_m_objective(current, cfg)
        penalized = raw + state.eta1 * state.gap_u + state.eta2 * state.gap_d
        psi_u, psi_d = _relaxed_rates(current, cfg, real, sca.dispersion)
        trace.records.append(IterationRecord(
            iteration=it, penalized_obj_w=penalized, raw_obj_w=raw,
            gap_u=state.gap_u, gap_d=state.gap_d, status=sol.status,
            c1_slack=float((psi_u - cfg.uplink_bits).min()),
            c2_slack=float((psi_d - cfg.downlink_bits).min()),
            solve_time_s=sol.solve_time_s, restored=tries > 0,
        ))
        logger.debug(f"Iteration {it}: penalized={penalized:.6e} W raw={raw:.6e} W gap={state.total_gap:.2e}")
        point = current
        if previous is not None and abs(previous - penalized) <= sca.obj_tol * max(abs(penalized), 1e-12) \
                and exactness_flag(state, sca.gap_tol):
            trace.status = "converged"
            return point
        previous = penalized
    trace.status = "max-iter"
    return point


def _polish(alloc: Allocation, cfg: SystemConfig, real: ChannelRealization, sca: ScaConfig) -> Allocation:
    """Clip solver-level budget excess and nudge users short of their bits by tiny power steps."""
    pbar_u, pbar_d = alloc.pbar_u.copy(), alloc.pbar_d.copy()
    caps = cfg.p_user_max_w
    for _ in range(_POLISH_ROUNDS):
        totals = pbar_u.sum(axis=(1, 2))
        over = totals > caps
        pbar_u[over] *= (caps[over] / totals[over])[:, None, None]
        if pbar_d.sum() > cfg.p_max_w:
            pbar_d *= cfg.p_max_w / pbar_d.sum()
        psi_u = link_rates(alloc.s_u, pbar_u, real.g_u, cfg.eps_ul, sca.dispersion)
        psi_d = link_rates(alloc.s_d, pbar_d, real.g_d, cfg.eps_dl, sca.dispersion)
        short_u = psi_u < cfg.uplink_bits
        short_d = psi_d < cfg.downlink_bits
        if not short_u.any() and not short_d.any():
            break
        room_u = pbar_u.sum(axis=(1, 2)) * (1 + _POLISH_STEP) <= caps
        pbar_u[short_u & room_u] *= 1 + _POLISH_STEP
        if short_d.any() and pbar_d.sum() + _POLISH_STEP * pbar_d[short_d].sum() <= cfg.p_max_w:
            pbar_d[short_d] *= 1 + _POLISH_STEP
    return Allocation.from_binary(alloc.s_u, alloc.s_d, pbar_u, pbar_d)


def power_only(cfg: SystemConfig, real: ChannelRealization, s_u, s_d, sca: Optional[ScaConfig] = None,
               pbar_start: Optional[Tuple[np.ndarray, np.ndarray]] = None,
               masks: Optional[ConstraintMasks] = None) -> Tuple[Allocation, IterationTrace]:
    """
    SCA over the powers with the binary indicators held fixed.

    Args:
        cfg: Scenario configuration
        real: Channel realization
        s_u, s_d: Binary indicators
        sca: Iteration controls
        pbar_start: Optional starting powers; closed-form powers otherwise

    Returns:
        (allocation with p = pbar on assigned entries, trace with the final check)
    """
    sca = sca or ScaConfig()
    masks = masks or build_masks(cfg)
    s_u = (np.asarray(s_u, dtype=float) > 0.5).astype(float)
    s_d = (np.asarray(s_d, dtype=float) > 0.5).astype(float)

    p_u0, p_d0 = feasible_powers(cfg, real, s_u, s_d, sca.power_margin_db, sca.dispersion)
    anchor = Allocation.from_binary(s_u, s_d, p_u0, p_d0)
    start = anchor if pbar_start is None else Allocation.from_binary(s_u, s_d, pbar_start[0], pbar_start[1])
    frame = build_frame(cfg, masks, fixed_s=(s_u, s_d))

    trace = IterationTrace(start="power-only")
    current = _sca_loop(cfg, real, sca, frame, masks, start, anchor, trace)
    if not trace.records and start is not anchor:
        logger.info("Power-only pass restarting from closed-form powers")
        trace = IterationTrace(start="power-only")
        current = _sca_loop(cfg, real, sca, frame, masks, anchor, anchor, trace)

    final = _polish(Allocation.from_binary(s_u, s_d, current.pbar_u, current.pbar_d), cfg, real, sca)
    trace.exact = True
    trace.report = check(final, cfg, real, tol=sca.feasibility_tol, dispersion_on=sca.dispersion)
    return final, trace


def _ensure_presence(cfg: SystemConfig, real: ChannelRealization, masks: ConstraintMasks,
                     relaxed: Allocation, s_u: np.ndarray, s_d: np.ndarray) -> None:
    """Give every user with bits to send at least one resource per link, in place."""
    for link, s, rel, g, bits in (
        ("u", s_u, relaxed.s_u, real.g_u, cfg.uplink_bits),
        ("d", s_d, relaxed.s_d, real.g_d, cfg.downlink_bits),
    ):
        for k in range(cfg.num_users):
            if bits[k] <= 0 or s[k].any():
                continue
            best, best_key = None, None
            for m, n in np.ndindex(s.shape[1:]):
                owners = np.flatnonzero(s[:, m, n] > 0.5)
                if owners.size and s[owners[0]].sum() < 1.5:
                    continue
                if not can_hold(cfg, masks, s_u, s_d, link, k, m, n):
                    continue
                key = (float(rel[k, m, n]), float(g[k, m]))
                if best_key is None or key > best_key:
                    best, best_key = (owners, m, n), key
            if best is None:
                logger.warning(f"User {k} has no {link}-link resource it can hold")
                continue
            owners, m, n = best
            s[owners, m, n] = 0.0
            s[k, m, n] = 1.0


def round_allocation(cfg: SystemConfig, real: ChannelRealization, alloc: Allocation,
                     sca: Optional[ScaConfig] = None,
                     masks: Optional[ConstraintMasks] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Turn the relaxed iterate into a binary assignment that meets C3-C5, C9 and,
    where the closed-form powers can, the rate and budget constraints.

    Candidates are indicators above the threshold plus any resource carrying at
    least 1% of the user's power on that link. A resource claimed by several users
    goes to the one with the larger bit deficit at the relaxed iterate (lowest
    index on equal deficits). A causality conflict drops the side carrying less
    power for that user. Users left without a resource take their best free or
    spare one, and a final local search repairs rate or budget shortfalls.
    """
    sca = sca or ScaConfig()
    masks = masks or build_masks(cfg)
    psi_u, psi_d = _relaxed_rates(alloc, cfg, real, sca.dispersion)
    allowed = np.broadcast_to(masks.dl_allowed()[:, None, :], cfg.shape_dl)

    out = []
    for s, pbar, deficit, ok in (
        (alloc.s_u, alloc.pbar_u, cfg.uplink_bits - psi_u, np.ones(cfg.shape_ul, dtype=bool)),
        (alloc.s_d, alloc.pbar_d, cfg.downlink_bits - psi_d, allowed),
    ):
        totals = pbar.sum(axis=(1, 2))[:, None, None]
        share = np.divide(pbar, totals, out=np.zeros(s.shape), where=totals > 0)
        candidates = ((s >= sca.rounding_threshold) | (share >= _ROUNDING_POWER_SHARE)) & ok
        binary = np.zeros(s.shape)
        for m, n in zip(*np.nonzero(candidates.any(axis=0))):
            users = np.flatnonzero(candidates[:, m, n])
            binary[users[np.argmax(deficit[users])], m, n] = 1.0
        out.append(binary)
    s_u, s_d = out

    for k in range(cfg.num_users):
        for n_u, n_d in masks.causality_pairs:
            if s_u[k, :, n_u].any() and s_d[k, :, n_d].any():
                if alloc.pbar_u[k, :, n_u].sum() < alloc.pbar_d[k, :, n_d].sum():
                    s_u[k, :, n_u] = 0.0
                else:
                    s_d[k, :, n_d] = 0.0

    _ensure_presence(cfg, real, masks, alloc, s_u, s_d)
    return repair_split(cfg, real, s_u, s_d, masks, sca.dispersion)


def _anchor(cfg: SystemConfig, real: ChannelRealization, sca: ScaConfig, masks: ConstraintMasks,
            starts: dict) -> Allocation:
    """Restoration target: the first binary start whose closed-form powers meet every constraint."""
    first = None
    for strategy in ("feasible", "greedy"):
        start = starts[strategy] = initial_point(cfg, real, sca, strategy, masks)
        if score_split(cfg, real, start.s_u, start.s_d, sca.dispersion).feasible:
            return start
        if first is None:
            first = start
    logger.warning("No binary start has closed-form powers within the budgets")
    return first


def run(cfg: SystemConfig, real: ChannelRealization, sca: Optional[ScaConfig] = None,
        init: Union[None, str, Allocation] = None) -> Tuple[Allocation, IterationTrace]:
    """
    Run SCA from one start, then round and restore feasibility.

    Args:
        cfg: Scenario configuration
        real: Channel realization
        sca: Iteration controls
        init: Start strategy name, an explicit start Allocation, or None for sca.init

    Returns:
        (final binary allocation, trace); trace.feasible tells whether it meets C1-C20
    """
    sca = sca or ScaConfig()
    _validate(cfg, real, sca)
    masks = build_masks(cfg)
    starts = {}
    anchor = _anchor(cfg, real, sca, masks, starts)
    if isinstance(init, Allocation):
        _check_start(init, cfg)
        start, label = init, "given"
    else:
        label = init or sca.init
        start = starts[label] if label in starts else initial_point(cfg, real, sca, label, masks)

    trace = IterationTrace(start=label)
    current = _sca_loop(cfg, real, sca, build_frame(cfg, masks), masks, start, anchor, trace)
    trace.exact = bool(trace.records) and exactness_flag(penalty_state(current, cfg), sca.gap_tol)
    if trace.records and not trace.exact:
        logger.info(f"SCA from '{label}' stopped with gap {penalty_state(current, cfg).total_gap:.2e}; rounding")

    s_u, s_d = round_allocation(cfg, real, current, sca, masks)
    final, resolve = power_only(cfg, real, s_u, s_d, sca, (current.pbar_u * s_u, current.pbar_d * s_d), masks)
    fallbacks = [start, anchor] if start.is_binary() and start is not anchor else [anchor]
    for fallback in fallbacks:
        if resolve.feasible:
            break
        fb_u, fb_d = np.round(fallback.s_u), np.round(fallback.s_d)
        if np.array_equal(fb_u, s_u) and np.array_equal(fb_d, s_d):
            continue
        logger.info(f"Rounded assignment from '{label}' is infeasible; falling back to a start assignment")
        alt, alt_trace = power_only(cfg, real, fb_u, fb_d, sca, (fallback.pbar_u, fallback.pbar_d), masks)
        if alt_trace.feasible:
            final, resolve = alt, alt_trace
            trace.fallback = True

    trace.resolve_records = resolve.records
    trace.report = resolve.report
    logger.info(
        f"SCA from '{label}': {trace.status} after {len(trace)} iterations, "
        f"objective {objective(final, cfg):.6e} W, feasible={trace.feasible}"
    )
    return final, trace


def export_trace_csv(trace: IterationTrace, path: Union[str, Path]) -> Path:
    """Write the per-iteration trace as CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(trace.to_rows())
    return path
