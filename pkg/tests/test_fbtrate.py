import numpy as np
import pytest

from solver.fbtrate import LOG2E, dispersion, psi, q_function, q_inv, rate_terms, shannon_bits


def test_q_inv_at_half_is_exactly_zero():
    assert q_inv(0.5) == 0.0


def test_q_inv_urllc_target():
    assert q_inv(1e-6) == pytest.approx(4.7534, abs=1e-3)


def test_q_inv_matches_bisection():
    for eps in (1e-9, 1e-5, 0.01, 0.3, 0.8):
        lo, hi = -40.0, 40.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if q_function(mid) > eps:
                lo = mid
            else:
                hi = mid
        assert q_inv(eps) == pytest.approx(0.5 * (lo + hi), abs=1e-8)


@pytest.mark.parametrize("eps", [0.0, 1.0, -0.1, 1.5])
def test_q_inv_rejects_out_of_range(eps):
    with pytest.raises(ValueError):
        q_inv(eps)


def test_dispersion_bounds():
    assert dispersion(0.0) == 0.0
    values = dispersion(np.logspace(-6, 6, 50))
    assert np.all(values >= 0.0) and np.all(values < 1.0)


def test_psi_equals_shannon_at_half():
    snrs = np.array([0.3, 4.0, 250.0])
    assert psi(snrs, 0.5) == pytest.approx(shannon_bits(snrs), rel=1e-9)


def test_single_resource_value():
    # C = 2, V = a * 4.7534 * sqrt(0.9375)
    assert psi([3.0], 1e-6) == pytest.approx(2.0 - LOG2E * q_inv(1e-6) * np.sqrt(0.9375), abs=1e-9)
    assert psi([3.0], 1e-6) == pytest.approx(-4.640, abs=1e-3)


def test_rate_terms_parts():
    terms = rate_terms([1.0, 3.0], 1e-3)
    assert terms.C_bits == pytest.approx(3.0)
    assert terms.psi_bits == pytest.approx(terms.C_bits - terms.V_bits)
    assert terms.V_bits > 0


def test_rate_terms_empty_is_zero():
    terms = rate_terms([], 1e-6)
    assert (terms.C_bits, terms.V_bits, terms.psi_bits) == (0.0, 0.0, 0.0)


def test_negative_snr_rejected():
    with pytest.raises(ValueError):
        rate_terms([1.0, -0.5], 1e-3)


def test_many_copies_approach_capacity():
    gamma, copies = 1000.0, 10_000
    per_copy = psi(np.full(copies, gamma), 1e-6) / copies
    capacity = np.log2(1.0 + gamma)
    assert per_copy < capacity
    assert per_copy == pytest.approx(capacity, rel=0.01)
    assert psi(np.full(100, gamma), 1e-6) / 100 < per_copy


def test_psi_increases_with_every_snr():
    rng = np.random.default_rng(4)
    for _ in range(20):
        snrs = rng.uniform(10.0, 1000.0, size=5)
        base = psi(snrs, 1e-5)
        for i in range(snrs.size):
            raised = snrs.copy()
            raised[i] *= 1.01
            assert psi(raised, 1e-5) > base
