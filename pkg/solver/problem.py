"""
The mixed-integer allocation problem: decision variables, objective and constraint checks.

Array layout per link is (user, sub-carrier, slot); slots are 0-based here while
the constraint names (C1..C20) follow the problem formulation.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Tuple

import numpy as np

from solver.fbtrate import LOG2E, dispersion, q_inv
from solver.sysmodel import ChannelRealization, SystemConfig

logger = logging.getLogger(__name__)

CONSTRAINT_NAMES = tuple(f"C{i}" for i in range(1, 21))
_ARRAY_TOL = 1e-9


@dataclass(frozen=True)
class Allocation:
    """Indicators s, powers p and product surrogates pbar = s*p for both links."""

    s_u: np.ndarray
    s_d: np.ndarray
    p_u: np.ndarray
    p_d: np.ndarray
    pbar_u: np.ndarray
    pbar_d: np.ndarray

    def __post_init__(self):
        for name in ("s_u", "s_d", "p_u", "p_d", "pbar_u", "pbar_d"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.ndim != 3:
                raise ValueError(f"{name} must be a (K, M, N) array")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            if np.any(arr < -_ARRAY_TOL):
                raise ValueError(f"{name} has negative entries")
            object.__setattr__(self, name, np.maximum(arr, 0.0))
        if np.any(self.s_u > 1 + _ARRAY_TOL) or np.any(self.s_d > 1 + _ARRAY_TOL):
            raise ValueError("indicators must not exceed 1")
        if self.s_u.shape != self.p_u.shape or self.s_u.shape != self.pbar_u.shape:
            raise ValueError("uplink arrays must share one shape")
        if self.s_d.shape != self.p_d.shape or self.s_d.shape != self.pbar_d.shape:
            raise ValueError("downlink arrays must share one shape")

    @classmethod
    def zeros(cls, cfg: SystemConfig) -> "Allocation":
        zu, zd = np.zeros(cfg.shape_ul), np.zeros(cfg.shape_dl)
        return cls(zu, zd, zu.copy(), zd.copy(), zu.copy(), zd.copy())

    @classmethod
    def from_binary(cls, s_u, s_d, p_u, p_d) -> "Allocation":
        """Build an allocation with pbar = s * p and p zeroed where s = 0."""
        s_u, s_d = np.asarray(s_u, dtype=float), np.asarray(s_d, dtype=float)
        p_u = np.where(s_u > 0, p_u, 0.0)
        p_d = np.where(s_d > 0, p_d, 0.0)
        return cls(s_u, s_d, p_u, p_d, s_u * p_u, s_d * p_d)

    def is_binary(self, tol: float = 0.0) -> bool:
        return all(
            np.all(np.minimum(np.abs(s), np.abs(1.0 - s)) <= tol) for s in (self.s_u, self.s_d)
        )

    def matches(self, cfg: SystemConfig) -> bool:
        return self.s_u.shape == cfg.shape_ul and self.s_d.shape == cfg.shape_dl


@dataclass(frozen=True)
class ConstraintMasks:
    """Causality pairs (uplink slot, downlink slot) and per-user forbidden downlink slots."""

    causality_pairs: Tuple[Tuple[int, int], ...]
    delay_forbidden: Tuple[FrozenSet[int], ...]
    num_slots_dl: int

    def dl_allowed(self) -> np.ndarray:
        """Boolean (K, N_d) array of downlink slots each user may use."""
        allowed = np.ones((len(self.delay_forbidden), self.num_slots_dl), dtype=bool)
        for k, slots in enumerate(self.delay_forbidden):
            allowed[k, sorted(slots)] = False
        return allowed


@dataclass
class FeasibilityReport:
    """Worst violation of each constraint plus the overall verdict."""

    violations: Dict[str, float]
    tolerance: float
    feasible: bool
    worst_c1_slack: float
    worst_c2_slack: float
    mask_violations: int = 0
    notes: List[str] = field(default_factory=list)

    def violated(self) -> List[str]:
        return [name for name, v in self.violations.items() if v > self.tolerance]

    def to_dict(self) -> Dict:
        return {
            "feasible": self.feasible,
            "tolerance": self.tolerance,
            "violations": dict(self.violations),
            "worst_c1_slack_bits": self.worst_c1_slack,
            "worst_c2_slack_bits": self.worst_c2_slack,
            "mask_violations": self.mask_violations,
        }


def build_masks(cfg: SystemConfig) -> ConstraintMasks:
    """
    Causality and delay masks.

    Uplink slot tau+o (1-based) conflicts with downlink slots 1..o for the same user.
    Downlink slots n_d > D_k - tau are forbidden (slot D_k - tau itself is usable).
    """
    pairs = []
    for o in range(1, cfg.overlap + 1):
        for n_d in range(1, o + 1):
            pairs.append((cfg.tau + o - 1, n_d - 1))
    forbidden = tuple(
        frozenset(n - 1 for n in range(1, cfg.num_slots_dl + 1) if n > d - cfg.tau)
        for d in cfg.deadlines
    )
    return ConstraintMasks(
        causality_pairs=tuple(pairs), delay_forbidden=forbidden, num_slots_dl=cfg.num_slots_dl
    )


def _check_shapes(alloc: Allocation, cfg: SystemConfig) -> None:
    if not alloc.matches(cfg):
        raise ValueError(
            f"allocation shapes {alloc.s_u.shape}/{alloc.s_d.shape} do not match "
            f"configuration {cfg.shape_ul}/{cfg.shape_dl}"
        )


def objective(alloc: Allocation, cfg: SystemConfig, use_pbar: bool = False) -> float:
    """Total weighted power: sum_k w_k sum s_u p_u + sum s_d p_d (or the pbar sums)."""
    _check_shapes(alloc, cfg)
    w = np.asarray(cfg.weights, dtype=float)
    if use_pbar:
        up, down = alloc.pbar_u, alloc.pbar_d
    else:
        up, down = alloc.s_u * alloc.p_u, alloc.s_d * alloc.p_d
    return float(np.dot(w, up.sum(axis=(1, 2))) + down.sum())


def link_rates(s: np.ndarray, p: np.ndarray, g: np.ndarray, eps, dispersion_on: bool = True) -> np.ndarray:
    """
    Indicator-weighted Psi per user.

    Args:
        s, p: (K, M, N) indicators and powers
        g: (K, M) gains
        eps: per-user packet error probabilities

    Returns:
        (K,) bits
    """
    snrs = g[:, :, None] * p
    c_bits = np.sum(s * np.log1p(snrs), axis=(1, 2)) * LOG2E
    if not dispersion_on:
        return c_bits
    q = np.array([q_inv(e) for e in eps])
    v_sum = np.sum(s * dispersion(snrs), axis=(1, 2))
    return c_bits - LOG2E * q * np.sqrt(v_sum)


def check(
    alloc: Allocation,
    cfg: SystemConfig,
    real: ChannelRealization,
    tol: float = 1e-6,
    dispersion_on: bool = True,
) -> FeasibilityReport:
    """
    Evaluate C1..C20 and report the worst violation of each.

    Args:
        alloc: Allocation to check (any values; the report carries violations)
        cfg: Scenario configuration
        real: Channel realization
        tol: Tolerance in bits for C1/C2, watts for budgets, unitless otherwise
        dispersion_on: False checks C1/C2 with Shannon rates only

    Returns:
        FeasibilityReport
    """
    _check_shapes(alloc, cfg)
    masks = build_masks(cfg)
    v: Dict[str, float] = {}

    psi_u = link_rates(alloc.s_u, alloc.p_u, real.g_u, cfg.eps_ul, dispersion_on)
    psi_d = link_rates(alloc.s_d, alloc.p_d, real.g_d, cfg.eps_dl, dispersion_on)
    slack_u = psi_u - cfg.uplink_bits
    slack_d = psi_d - cfg.downlink_bits
    v["C1"] = float(max(0.0, -slack_u.min()))
    v["C2"] = float(max(0.0, -slack_d.min()))

    c3 = 0.0
    hard = 0
    for n_u, n_d in masks.causality_pairs:
        pair = alloc.s_u[:, :, n_u].max(axis=1) + alloc.s_d[:, :, n_d].max(axis=1) - 1.0
        c3 = max(c3, float(pair.max()))
        hard += int(np.sum(pair > 0))
    v["C3"] = max(0.0, c3)

    allowed = masks.dl_allowed()
    forbidden_s = alloc.s_d * (~allowed)[:, None, :]
    v["C4"] = float(forbidden_s.max()) if forbidden_s.size else 0.0
    hard += int(np.sum(forbidden_s > 0))

    v["C5"] = float(max(0.0, (alloc.s_u.sum(axis=0) - 1.0).max()))
    v["C6"] = float(np.minimum(alloc.s_u, 1.0 - alloc.s_u).max())
    up_power = (alloc.s_u * alloc.p_u).sum(axis=(1, 2))
    v["C7"] = float(max(0.0, (up_power - cfg.p_user_max_w).max()))
    v["C8"] = float(max(0.0, (-alloc.p_u).max()))
    v["C9"] = float(max(0.0, (alloc.s_d.sum(axis=0) - 1.0).max()))
    v["C10"] = float(np.minimum(alloc.s_d, 1.0 - alloc.s_d).max())
    v["C11"] = float(max(0.0, (alloc.s_d * alloc.p_d).sum() - cfg.p_max_w))
    v["C12"] = float(max(0.0, (-alloc.p_d).max()))

    cap_u = cfg.p_user_max_w[:, None, None]
    cap_d = cfg.p_max_w
    v["C13"] = float(max(0.0, (alloc.pbar_u - cap_u * alloc.s_u).max()))
    v["C14"] = float(max(0.0, (alloc.pbar_u - alloc.p_u).max()))
    v["C15"] = float(max(0.0, (alloc.p_u - (1.0 - alloc.s_u) * cap_u - alloc.pbar_u).max()))
    v["C16"] = float(max(0.0, (-alloc.pbar_u).max()))
    v["C17"] = float(max(0.0, (alloc.pbar_d - cap_d * alloc.s_d).max()))
    v["C18"] = float(max(0.0, (alloc.pbar_d - alloc.p_d).max()))
    v["C19"] = float(max(0.0, (alloc.p_d - (1.0 - alloc.s_d) * cap_d - alloc.pbar_d).max()))
    v["C20"] = float(max(0.0, (-alloc.pbar_d).max()))

    feasible = all(value <= tol for value in v.values())
    return FeasibilityReport(
        violations=v,
        tolerance=tol,
        feasible=feasible,
        worst_c1_slack=float(slack_u.min()),
        worst_c2_slack=float(slack_d.min()),
        mask_violations=hard,
    )
