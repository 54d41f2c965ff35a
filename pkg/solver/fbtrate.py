"""
Finite-blocklength rate terms under the normal approximation.

    Psi = sum_l log2(1 + gamma_l) - a * Qinv(eps) * sqrt(sum_l V_l),   a = log2(e)

Psi may be negative for very short allocations; it is returned as-is so that
constraint checks see the real deficit.
"""
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, ndtri

LOG2E = float(np.log2(np.e))
_SQRT2 = float(np.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class RateTerms:
    """Shannon term, dispersion penalty and their difference, all in bits."""

    C_bits: float
    V_bits: float
    psi_bits: float


def q_function(x):
    """Gaussian tail probability Q(x)."""
    return 0.5 * erfc(np.asarray(x, dtype=float) / _SQRT2)


def q_inv(eps: float, rel_tol: float = 1e-12, max_iter: int = 100) -> float:
    """
    Inverse Gaussian Q-function.

    Starts from the normal quantile and polishes with Newton steps on Q,
    falling back to bisection whenever a step leaves the current bracket.

    Args:
        eps: Tail probability in (0, 1)

    Returns:
        x with Q(x) = eps
    """
    eps = float(eps)
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in (0, 1), got {eps}")
    if eps == 0.5:
        return 0.0

    lo, hi = -40.0, 40.0
    x = float(-ndtri(eps))
    for _ in range(max_iter):
        f = float(q_function(x)) - eps
        if abs(f) <= rel_tol * eps:
            break
        if f > 0:
            lo = x
        else:
            hi = x
        density = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        step = x + f / density if density > 0 else None
        if step is None or not lo < step < hi:
            step = 0.5 * (lo + hi)
        x = step
    return x


def dispersion(gamma):
    """Channel dispersion V = 1 - (1 + gamma)^-2, in [0, 1)."""
    gamma = np.asarray(gamma, dtype=float)
    v = 1.0 - 1.0 / (1.0 + gamma) ** 2
    return float(v) if v.ndim == 0 else v


def shannon_bits(snrs) -> float:
    """Sum of log2(1 + gamma) over the allocated resources."""
    snrs = np.asarray(snrs, dtype=float).ravel()
    if snrs.size == 0:
        return 0.0
    return float(np.sum(np.log1p(snrs)) * LOG2E)


def rate_terms(snrs, eps: float) -> RateTerms:
    """
    Evaluate the normal approximation over a set of per-resource SNRs.

    Args:
        snrs: SNR of every resource assigned to one user on one link
        eps: Packet error probability

    Returns:
        RateTerms (C, V, Psi) in bits
    """
    snrs = np.asarray(snrs, dtype=float).ravel()
    if snrs.size == 0:
        return RateTerms(C_bits=0.0, V_bits=0.0, psi_bits=0.0)
    if np.any(snrs < 0):
        raise ValueError("SNRs must be nonnegative")
    c_bits = shannon_bits(snrs)
    v_bits = LOG2E * q_inv(eps) * float(np.sqrt(np.sum(dispersion(snrs))))
    return RateTerms(C_bits=c_bits, V_bits=v_bits, psi_bits=c_bits - v_bits)


def psi(snrs, eps: float) -> float:
    """Normal-approximation bit count Psi = C - V."""
    return rate_terms(snrs, eps).psi_bits
