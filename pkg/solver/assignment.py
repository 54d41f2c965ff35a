"""
Binary sub-carrier assignments and closed-form starting powers.

Every split rule gives each user a slot window that satisfies the causality and
delay masks by construction, so any assignment they emit is mask-clean.
"""
import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from solver.fbtrate import psi, shannon_bits
from solver.problem import ConstraintMasks, build_masks
from solver.sysmodel import ChannelRealization, SystemConfig
from utils.units import db_to_linear

logger = logging.getLogger(__name__)

Windows = List[Tuple[range, range]]
Split = Tuple[np.ndarray, np.ndarray]

# per-user cut vectors are enumerated up to this many combinations, uniform cuts beyond
CUT_VECTOR_LIMIT = 16
_MAX_EXPONENT = 60.0
_REPAIR_MOVES_PER_USER = 4


def _cut_bounds(cfg: SystemConfig, last: int) -> Tuple[int, int]:
    return max(0, 1 - cfg.tau), min(cfg.overlap, last - 1)


def _last_slots(cfg: SystemConfig, masks: ConstraintMasks) -> List[int]:
    allowed = masks.dl_allowed()
    return [int(np.flatnonzero(allowed[k]).max()) + 1 if allowed[k].any() else 0 for k in range(cfg.num_users)]


def slot_windows(cfg: SystemConfig, masks: Optional[ConstraintMasks] = None,
                 cuts: Optional[Sequence[int]] = None) -> Windows:
    """
    Per-user (uplink slots, downlink slots), 0-based.

    A cut c in [0, overlap] gives uplink slots 1..tau+c and downlink slots c+1..L_k,
    L_k the last downlink slot allowed by the deadline. Without explicit `cuts`,
    delay-restricted users take the smallest cut (keep their scarce downlink slots)
    and the others the largest. Explicit cuts are clamped to each user's range.
    """
    masks = masks or build_masks(cfg)
    windows = []
    for k, last in enumerate(_last_slots(cfg, masks)):
        lo, hi = _cut_bounds(cfg, last)
        if lo > hi:
            logger.warning(f"User {k} has no slot window meeting causality and delay")
            windows.append((range(0), range(0)))
            continue
        if cuts is None:
            cut = lo if last < cfg.num_slots_dl else hi
        else:
            cut = min(max(int(cuts[k]), lo), hi)
        windows.append((range(0, cfg.tau + cut), range(cut, last)))
    return windows


def window_options(cfg: SystemConfig, masks: Optional[ConstraintMasks] = None) -> List[Windows]:
    """Distinct slot-window layouts: the default rule first, then every cut vector (or uniform cuts)."""
    masks = masks or build_masks(cfg)
    ranges = []
    for last in _last_slots(cfg, masks):
        lo, hi = _cut_bounds(cfg, last)
        ranges.append(range(lo, hi + 1) if lo <= hi else range(0, 1))
    if int(np.prod([len(r) for r in ranges])) <= CUT_VECTOR_LIMIT:
        cut_vectors = itertools.product(*ranges)
    else:
        cut_vectors = ([c] * cfg.num_users for c in range(cfg.overlap + 1))

    options = [slot_windows(cfg, masks)]
    for cuts in cut_vectors:
        windows = slot_windows(cfg, masks, cuts)
        if windows not in options:
            options.append(windows)
    return options


def round_robin_split(cfg: SystemConfig, masks: Optional[ConstraintMasks] = None,
                      windows: Optional[Windows] = None) -> Split:
    """
    Sub-carrier m goes to user m mod K on each link and is used in every slot of
    that user's window. Remainders therefore land on the lowest-index users.
    """
    windows = windows or slot_windows(cfg, masks)
    s_u, s_d = np.zeros(cfg.shape_ul), np.zeros(cfg.shape_dl)
    k_count = cfg.num_users
    for m in range(cfg.num_subcarriers_ul):
        k = m % k_count
        s_u[k, m, list(windows[k][0])] = 1.0
    for m in range(cfg.num_subcarriers_dl):
        k = m % k_count
        s_d[k, m, list(windows[k][1])] = 1.0
    return s_u, s_d


def _rate_factor(bits: float, count: int) -> float:
    """2^(bits/count) - 1, the per-resource SNR of an even Shannon split."""
    return float(np.expm1(np.log(2.0) * min(bits / count, _MAX_EXPONENT)))


def _equal_rate_power(bits: float, gains_desc: np.ndarray, count: int) -> float:
    """Shannon power to carry `bits` evenly over the `count` strongest resources."""
    if count <= 0:
        return np.inf
    return float(np.sum(_rate_factor(bits, count) / gains_desc[:count]))


def _greedy_link(bits: np.ndarray, gains: np.ndarray, slots: List[range], shape) -> np.ndarray:
    k_count, m_count, n_count = shape
    resources = [(m, n) for n in range(n_count) for m in range(m_count)]
    eligible = np.array([[n in slots[k] for (_, n) in resources] for k in range(k_count)], dtype=bool)
    eligible &= (np.asarray(bits) > 0)[:, None]
    res_gain = gains[:, [m for m, _ in resources]]
    sorted_gains = [np.sort(res_gain[k, eligible[k]])[::-1] for k in range(k_count)]

    shared = int(eligible.any(axis=0).sum())
    counts = eligible.any(axis=1).astype(int)
    while counts.sum() < shared:
        best_k, best_saving = -1, 0.0
        for k in range(k_count):
            if counts[k] == 0 or counts[k] >= eligible[k].sum():
                continue
            saving = (_equal_rate_power(bits[k], sorted_gains[k], counts[k])
                      - _equal_rate_power(bits[k], sorted_gains[k], counts[k] + 1))
            if saving > best_saving:
                best_k, best_saving = k, saving
        if best_k < 0:
            break
        counts[best_k] += 1

    row_user = [k for k in range(k_count) for _ in range(counts[k])]
    s = np.zeros(shape)
    if not row_user:
        return s
    first = np.array([i == 0 or row_user[i - 1] != k for i, k in enumerate(row_user)])
    ok = eligible[row_user]
    cost = np.vstack([np.full(len(resources), _rate_factor(bits[k], counts[k])) / res_gain[k] for k in row_user])

    # ineligible pairs cost more than every eligible total; a user's first copy costs
    # more than all other copies together, so no user with an eligible resource goes empty
    penalty = 10.0 * (float(cost[ok].max(initial=0.0)) * len(row_user) + 1.0)
    cost = np.where(ok, cost, np.where(first[:, None], penalty * (len(row_user) + 1), penalty))
    row_idx, col_idx = linear_sum_assignment(cost)
    for i, r in zip(row_idx, col_idx):
        k = row_user[i]
        if eligible[k, r]:
            m, n = resources[r]
            s[k, m, n] = 1.0
    return s


def greedy_split(cfg: SystemConfig, real: ChannelRealization, masks: Optional[ConstraintMasks] = None,
                 windows: Optional[Windows] = None) -> Split:
    """
    Channel-aware split inside the given slot windows (default rule otherwise).

    Per-user resource counts grow one at a time toward the user whose equal-rate
    Shannon power drops most, never past the resources the users can share;
    resources are then matched to users by minimum total equal-rate power.
    """
    windows = windows or slot_windows(cfg, masks)
    s_u = _greedy_link(cfg.uplink_bits, real.g_u, [w[0] for w in windows], cfg.shape_ul)
    s_d = _greedy_link(cfg.downlink_bits, real.g_d, [w[1] for w in windows], cfg.shape_dl)
    return s_u, s_d


def inverse_waterfilling(gains: np.ndarray, bits: float) -> np.ndarray:
    """
    Minimum total power with sum log2(1 + g p) = bits: p = (mu - 1/g)^+.

    Args:
        gains: Positive gains of the usable resources
        bits: Target Shannon bits

    Returns:
        Power per resource (same order as gains)
    """
    gains = np.asarray(gains, dtype=float)
    powers = np.zeros_like(gains)
    if gains.size == 0 or bits <= 0:
        return powers
    order = np.argsort(gains)[::-1]
    g_sorted = gains[order]
    log_g = np.log2(g_sorted)
    for j in range(g_sorted.size, 0, -1):
        log_mu = (bits - np.sum(log_g[:j])) / j
        if log_mu + log_g[j - 1] > 0:
            mu = 2.0 ** log_mu
            powers[order[:j]] = np.maximum(mu - 1.0 / g_sorted[:j], 0.0)
            return powers
    return powers


def _achieved(gains: np.ndarray, powers: np.ndarray, eps: float, dispersion_on: bool) -> float:
    snrs = gains * powers
    return psi(snrs, eps) if dispersion_on else shannon_bits(snrs)


def _user_powers(gains: np.ndarray, bits: float, eps: float, dispersion_on: bool,
                 max_rounds: int = 60) -> np.ndarray:
    """Inverse water-filling on a target raised until Psi reaches `bits`."""
    target = bits
    powers = inverse_waterfilling(gains, target)
    for _ in range(max_rounds):
        achieved = _achieved(gains, powers, eps, dispersion_on)
        if achieved >= bits:
            break
        target += (bits - achieved) + 1e-9 * bits
        powers = inverse_waterfilling(gains, target)
    return powers


@dataclass
class SplitScore:
    """Closed-form powers of a binary assignment and how far they are from the budgets."""

    p_u: np.ndarray
    p_d: np.ndarray
    short_u: np.ndarray
    short_d: np.ndarray
    excess_u: np.ndarray
    excess_d: float
    total_w: float

    @property
    def feasible(self) -> bool:
        return not (self.short_u.any() or self.short_d.any()) and \
            not (self.excess_u > 0).any() and self.excess_d <= 0

    def key(self) -> Tuple[bool, float, float]:
        """Sort key: feasible first, then the smaller violation, then the smaller power."""
        missing = int(self.short_u.sum() + self.short_d.sum())
        return not self.feasible, missing * 1e12 + float(self.excess_u.sum()) + self.excess_d, self.total_w


def _closed_form(cfg: SystemConfig, real: ChannelRealization, s_u: np.ndarray, s_d: np.ndarray,
                 dispersion_on: bool) -> SplitScore:
    p_u, p_d = np.zeros(cfg.shape_ul), np.zeros(cfg.shape_dl)
    short_u = np.zeros(cfg.num_users, dtype=bool)
    short_d = np.zeros(cfg.num_users, dtype=bool)
    for k in range(cfg.num_users):
        for s, p, short, g, bits, eps in (
            (s_u, p_u, short_u, real.g_u, cfg.uplink_bits[k], cfg.eps_ul[k]),
            (s_d, p_d, short_d, real.g_d, cfg.downlink_bits[k], cfg.eps_dl[k]),
        ):
            active = np.argwhere(s[k] > 0.5)
            if active.size == 0:
                short[k] = bits > 0
                continue
            gains = g[k, active[:, 0]]
            powers = _user_powers(gains, bits, eps, dispersion_on)
            p[k, active[:, 0], active[:, 1]] = powers
            short[k] = _achieved(gains, powers, eps, dispersion_on) < bits * (1.0 - 1e-9)

    totals = p_u.sum(axis=(1, 2))
    return SplitScore(
        p_u=p_u, p_d=p_d, short_u=short_u, short_d=short_d,
        excess_u=np.maximum(totals - cfg.p_user_max_w, 0.0),
        excess_d=max(float(p_d.sum()) - cfg.p_max_w, 0.0),
        total_w=float(np.dot(cfg.weights, totals) + p_d.sum()),
    )


def score_split(cfg: SystemConfig, real: ChannelRealization, s_u: np.ndarray, s_d: np.ndarray,
                dispersion_on: bool = True) -> SplitScore:
    """Closed-form minimum powers of an assignment, checked against C1/C2 and the budgets."""
    return _closed_form(cfg, real, np.asarray(s_u), np.asarray(s_d), dispersion_on)


def feasible_powers(cfg: SystemConfig, real: ChannelRealization, s_u: np.ndarray, s_d: np.ndarray,
                    margin_db: float = 3.0, dispersion_on: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """
    Starting powers for a binary assignment: per-user inverse water-filling meeting
    C1/C2, a power margin, then one projection onto the budgets.

    Returns:
        (pbar_u, pbar_d) with zeros where s = 0
    """
    score = _closed_form(cfg, real, s_u, s_d, dispersion_on)
    margin = float(db_to_linear(margin_db))
    pbar_u, pbar_d = margin * score.p_u, margin * score.p_d

    caps = cfg.p_user_max_w
    totals = pbar_u.sum(axis=(1, 2))
    scale = np.where(totals > caps, caps / np.maximum(totals, 1e-300), 1.0)
    pbar_u *= scale[:, None, None]
    total_d = pbar_d.sum()
    if total_d > cfg.p_max_w:
        pbar_d *= cfg.p_max_w / total_d
    return pbar_u, pbar_d


def can_hold(cfg: SystemConfig, masks: ConstraintMasks, s_u: np.ndarray, s_d: np.ndarray,
              link: str, k: int, m: int, n: int) -> bool:
    """Whether user k may hold resource (m, n) on `link` given its holdings on the other link."""
    if link == "d":
        if n in masks.delay_forbidden[k]:
            return False
        return not any(s_u[k, :, n_u].any() for n_u, n_d in masks.causality_pairs if n_d == n)
    return not any(s_d[k, :, n_d].any() for n_u, n_d in masks.causality_pairs if n_u == n)


def _moves(cfg: SystemConfig, masks: ConstraintMasks, s_u: np.ndarray, s_d: np.ndarray, link: str, k: int):
    """Candidate (s_u, s_d) after giving user k one more resource, a stolen one or a swapped one."""
    s = s_u if link == "u" else s_d
    held = [tuple(r) for r in np.argwhere(s[k] > 0.5)]
    for m, n in itertools.product(range(s.shape[1]), range(s.shape[2])):
        if s[k, m, n] > 0.5 or not can_hold(cfg, masks, s_u, s_d, link, k, m, n):
            continue
        owners = np.flatnonzero(s[:, m, n] > 0.5)
        new_u, new_d = s_u.copy(), s_d.copy()
        new = new_u if link == "u" else new_d
        if owners.size == 0:
            new[k, m, n] = 1.0
            yield new_u, new_d
            continue
        j = int(owners[0])
        if s[j].sum() > 1.5:
            new[j, m, n] = 0.0
            new[k, m, n] = 1.0
            yield new_u, new_d
        for q in held:
            if not can_hold(cfg, masks, s_u, s_d, link, j, *q):
                continue
            swap_u, swap_d = s_u.copy(), s_d.copy()
            swap = swap_u if link == "u" else swap_d
            swap[j, m, n], swap[k, m, n] = 0.0, 1.0
            swap[k][q], swap[j][q] = 0.0, 1.0
            yield swap_u, swap_d


def repair_split(cfg: SystemConfig, real: ChannelRealization, s_u: np.ndarray, s_d: np.ndarray,
                 masks: Optional[ConstraintMasks] = None, dispersion_on: bool = True) -> Split:
    """
    Local search on a binary assignment until its closed-form powers fit the budgets.

    Each step looks at the users that miss a rate or exceed a budget and applies the
    single move (add a free resource, take one from a user holding several, or swap
    one) that most reduces the violation. Stops when feasible or when no move helps.
    """
    masks = masks or build_masks(cfg)
    s_u, s_d = np.asarray(s_u, dtype=float).copy(), np.asarray(s_d, dtype=float).copy()
    score = score_split(cfg, real, s_u, s_d, dispersion_on)
    for _ in range(_REPAIR_MOVES_PER_USER * cfg.num_users):
        if score.feasible:
            break
        needy = [("u", k) for k in np.flatnonzero(score.short_u | (score.excess_u > 0))]
        needy += [("d", k) for k in np.flatnonzero(score.short_d)]
        if score.excess_d > 0:
            needy += [("d", k) for k in np.argsort(-score.p_d.sum(axis=(1, 2))) if ("d", k) not in needy]
        best, best_key = None, score.key()
        for link, k in needy:
            for cand in _moves(cfg, masks, s_u, s_d, link, int(k)):
                cand_score = score_split(cfg, real, *cand, dispersion_on)
                if cand_score.key() < best_key:
                    best, best_key = (cand, cand_score), cand_score.key()
        if best is None:
            break
        (s_u, s_d), score = best
    return s_u, s_d


def ranked_splits(cfg: SystemConfig, real: ChannelRealization, masks: Optional[ConstraintMasks] = None,
                  rule: str = "greedy", dispersion_on: bool = True) -> List[Split]:
    """
    One split per slot-window layout, repaired and ordered by closed-form score.

    Args:
        rule: "greedy" (channel-aware) or "round_robin"
    """
    masks = masks or build_masks(cfg)
    scored = []
    for i, windows in enumerate(window_options(cfg, masks)):
        if rule == "greedy":
            split = greedy_split(cfg, real, masks, windows)
        elif rule == "round_robin":
            split = round_robin_split(cfg, masks, windows)
        else:
            raise ValueError(f"unknown split rule: {rule}")
        split = repair_split(cfg, real, *split, masks, dispersion_on)
        scored.append((score_split(cfg, real, *split, dispersion_on).key(), i, split))
    scored.sort(key=lambda item: item[:2])
    return [split for _, _, split in scored]


def best_split(cfg: SystemConfig, real: ChannelRealization, masks: Optional[ConstraintMasks] = None,
               rule: str = "greedy", dispersion_on: bool = True) -> Split:
    return ranked_splits(cfg, real, masks, rule, dispersion_on)[0]
