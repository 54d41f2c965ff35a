"""
Problem transformation: Big-M envelopes for the s*p products and the DC penalty
E - H that replaces the binary constraints on s.
"""
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from solver.problem import Allocation, objective
from solver.sysmodel import SystemConfig

_BOX_TOL = 1e-9


@dataclass(frozen=True)
class AffineRow:
    """One inequality  sum(coef * var) <= rhs  over the (s, p, pbar) entry at `index`."""

    name: str
    link: str  # "u" or "d"
    index: Tuple[int, int, int]
    coeffs: Tuple[Tuple[str, float], ...]
    rhs: float


@dataclass(frozen=True)
class PenaltyState:
    eta1: float
    eta2: float
    gap_u: float
    gap_d: float

    @property
    def total_gap(self) -> float:
        return self.gap_u + self.gap_d


def bigm_rows(link: str, index: Tuple[int, int, int], cap: float) -> List[AffineRow]:
    """C13-C16 (uplink) or C17-C20 (downlink) for a single (k, m, n) entry."""
    names = ("C13", "C14", "C15", "C16") if link == "u" else ("C17", "C18", "C19", "C20")
    return [
        AffineRow(names[0], link, index, (("pbar", 1.0), ("s", -cap)), 0.0),
        AffineRow(names[1], link, index, (("pbar", 1.0), ("p", -1.0)), 0.0),
        AffineRow(names[2], link, index, (("p", 1.0), ("pbar", -1.0), ("s", cap)), cap),
        AffineRow(names[3], link, index, (("pbar", -1.0),), 0.0),
    ]


def bigm_constraints(cfg: SystemConfig) -> List[AffineRow]:
    """
    Linear envelopes replacing pbar = s * p, with caps P_k_max (uplink) and P_max (downlink).
    """
    rows: List[AffineRow] = []
    caps = cfg.p_user_max_w
    for index in np.ndindex(*cfg.shape_ul):
        rows.extend(bigm_rows("u", index, float(caps[index[0]])))
    for index in np.ndindex(*cfg.shape_dl):
        rows.extend(bigm_rows("d", index, cfg.p_max_w))
    return rows


def e_minus_h(s_all) -> float:
    """DC gap E(s) - H(s) = sum(s) - sum(s^2); zero iff s is binary."""
    s_all = np.asarray(s_all, dtype=float)
    if np.any(s_all < -_BOX_TOL) or np.any(s_all > 1.0 + _BOX_TOL):
        raise ValueError("indicator entries must lie in [0, 1]")
    s_all = np.clip(s_all, 0.0, 1.0)
    return float(np.sum(s_all) - np.sum(s_all * s_all))


def big_m_objective(alloc: Allocation, cfg: SystemConfig) -> float:
    """Phi(pbar_u, pbar_d), the objective after the Big-M substitution."""
    return objective(alloc, cfg, use_pbar=True)


def penalty_state(alloc: Allocation, cfg: SystemConfig) -> PenaltyState:
    return PenaltyState(
        eta1=cfg.eta1_w,
        eta2=cfg.eta2_w,
        gap_u=e_minus_h(alloc.s_u),
        gap_d=e_minus_h(alloc.s_d),
    )


def penalized_objective(alloc: Allocation, cfg: SystemConfig) -> float:
    """Phi + eta1 (E_u - H_u) + eta2 (E_d - H_d), in watts."""
    state = penalty_state(alloc, cfg)
    return big_m_objective(alloc, cfg) + state.eta1 * state.gap_u + state.eta2 * state.gap_d


def exactness_flag(state: PenaltyState, tol: float = 1e-4) -> bool:
    """True when the relaxed indicators are binary up to `tol` in total gap."""
    return state.total_gap <= tol
