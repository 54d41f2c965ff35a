import numpy as np
import pytest

from solver.benchmarks import run_proposed
from solver.problem import Allocation, build_masks, objective
from solver.scasolver import (
    TRACE_COLUMNS,
    ScaConfig,
    build_subproblem,
    export_trace_csv,
    initial_point,
    linearize_h,
    linearize_v,
    power_only,
    round_allocation,
    run,
    v_bar,
    v_gradient,
)
from solver.sysmodel import draw_realization

GAINS = np.array([12.0, 3.0, 0.5])


class TestLinearizations:
    def test_h_tangent_is_a_lower_bound(self):
        rng = np.random.default_rng(0)
        point = rng.uniform(size=6)
        assert linearize_h(point, point) == pytest.approx(np.sum(point ** 2))
        for _ in range(20):
            s = rng.uniform(size=6)
            assert linearize_h(s, point) <= np.sum(s ** 2) + 1e-12

    def test_v_tangent_is_an_upper_bound(self):
        rng = np.random.default_rng(1)
        point = np.array([0.2, 0.1, 0.4])
        assert linearize_v(point, point, GAINS, 1e-5) == pytest.approx(v_bar(point, GAINS, 1e-5))
        for _ in range(20):
            pbar = rng.uniform(0.0, 1.0, size=3)
            assert linearize_v(pbar, point, GAINS, 1e-5) >= v_bar(pbar, GAINS, 1e-5) - 1e-12

    def test_gradient_matches_finite_differences(self):
        point = np.array([0.2, 0.1, 0.4])
        grad = v_gradient(point, GAINS, 1e-5)
        h = 1e-7
        for i in range(point.size):
            up, down = point.copy(), point.copy()
            up[i] += h
            down[i] -= h
            numeric = (v_bar(up, GAINS, 1e-5) - v_bar(down, GAINS, 1e-5)) / (2 * h)
            assert grad[i] == pytest.approx(numeric, rel=1e-5, abs=1e-8)

    def test_gradient_undefined_at_zero_power(self):
        with pytest.raises(ValueError):
            v_gradient(np.zeros(3), GAINS, 1e-5)


class TestRun:
    def test_one_bit_needs_one_watt(self, single_cfg, single_real):
        final, trace = run(single_cfg, single_real)
        assert trace.feasible
        assert trace.status == "converged"
        assert len(trace) <= 30
        assert final.p_u[0, 0, 0] == pytest.approx(1.0, rel=1e-4)
        assert final.p_d[0, 0, 0] == pytest.approx(1.0, rel=1e-4)
        assert objective(final, single_cfg) == pytest.approx(2.0, rel=1e-4)

    def test_binary_start_settles_quickly(self, single_cfg, single_real):
        _, trace = run(single_cfg, single_real, init="feasible")
        assert len(trace) <= 2
        assert trace.exact

    def test_penalized_objective_never_increases(self, crossed_cfg, crossed_real):
        _, trace = run(crossed_cfg, crossed_real, init="relaxed")
        series = trace.penalized_series()
        assert series.size >= 1
        kept = np.array([not r.restored for r in trace.records[1:]], dtype=bool)
        assert np.all(np.diff(series)[kept] <= 1e-6 * np.abs(series[:-1])[kept] + 1e-9)
        assert trace.feasible

    def test_final_allocation_is_binary(self, crossed_cfg, crossed_real):
        final, trace = run(crossed_cfg, crossed_real, init="greedy")
        assert final.is_binary()
        assert trace.report.feasible
        assert trace.report.mask_violations == 0

    def test_error_probability_above_half_rejected(self, make_config, make_realization):
        cfg = make_config(eps_ul=0.6)
        with pytest.raises(ValueError):
            run(cfg, make_realization(cfg, 1.0))

    def test_mismatched_realization_rejected(self, crossed_cfg, single_real):
        with pytest.raises(ValueError):
            run(crossed_cfg, single_real)

    def test_explicit_start_shape_checked(self, crossed_cfg, crossed_real, single_cfg):
        with pytest.raises(ValueError):
            run(crossed_cfg, crossed_real, init=Allocation.zeros(single_cfg))


def test_sca_config_requires_a_start():
    with pytest.raises(ValueError):
        ScaConfig(starts=())


def test_trace_csv(single_cfg, single_real, tmp_path):
    _, trace = run(single_cfg, single_real)
    path = export_trace_csv(trace, tmp_path / "trace.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == len(trace) + 1


def test_power_only(single_cfg, single_real):
    ones = np.ones((1, 1, 1))
    alloc, trace = power_only(single_cfg, single_real, ones, ones)
    assert trace.feasible
    assert alloc.p_u[0, 0, 0] == pytest.approx(1.0, rel=1e-4)
    assert np.array_equal(alloc.s_u, ones)


def test_rounding_prefers_larger_deficit(crossed_cfg, crossed_real):
    shape = crossed_cfg.shape_ul
    s_u, pbar_u = np.zeros(shape), np.zeros(shape)
    s_u[0, 0, 0], s_u[1, 0, 0], s_u[1, 1, 0] = 0.6, 0.7, 0.9
    pbar_u[1, 1, 0] = 0.05  # user 1 already carries some bits
    s_d = np.zeros(shape)
    s_d[0, 1, 0], s_d[1, 0, 0] = 0.5, 0.49
    zeros = np.zeros(shape)
    alloc = Allocation(s_u, s_d, pbar_u, zeros, pbar_u.copy(), zeros.copy())
    r_u, r_d = round_allocation(crossed_cfg, crossed_real, alloc)
    assert r_u[:, :, 0].tolist() == [[1.0, 0.0], [0.0, 1.0]]
    # user 1 has no downlink candidate and takes the free sub-carrier
    assert r_d[:, :, 0].tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_rounding_repairs_causality(make_config, make_realization):
    cfg = make_config(num_slots_ul=2, num_slots_dl=1, tau=1)
    real = make_realization(cfg, 1.0)
    s_u, pbar_u = np.zeros(cfg.shape_ul), np.zeros(cfg.shape_ul)
    s_u[0, 0, 1], pbar_u[0, 0, 1] = 1.0, 0.1
    s_d, pbar_d = np.ones(cfg.shape_dl), np.full(cfg.shape_dl, 0.5)
    alloc = Allocation(s_u, s_d, pbar_u, pbar_d, pbar_u.copy(), pbar_d.copy())
    r_u, r_d = round_allocation(cfg, real, alloc)
    # the conflicting uplink slot is dropped, then the user moves to the early one
    assert r_u[0, 0].tolist() == [1.0, 0.0]
    assert r_d.all()


class TestInitialPoint:
    def test_random_start_is_seeded(self, crossed_cfg, crossed_real):
        a = initial_point(crossed_cfg, crossed_real, ScaConfig(seed=4), "random")
        b = initial_point(crossed_cfg, crossed_real, ScaConfig(seed=4), "random")
        c = initial_point(crossed_cfg, crossed_real, ScaConfig(seed=5), "random")
        np.testing.assert_array_equal(a.s_u, b.s_u)
        assert not np.array_equal(a.s_u, c.s_u)
        assert np.all((a.s_u >= 0) & (a.s_u <= 1))

    def test_relaxed_start(self, crossed_cfg, crossed_real):
        start = initial_point(crossed_cfg, crossed_real, strategy="relaxed")
        assert np.all(start.s_u == 0.5)

    def test_feasible_start_is_binary(self, crossed_cfg, crossed_real):
        assert initial_point(crossed_cfg, crossed_real, strategy="feasible").is_binary()

    def test_unknown_strategy(self, crossed_cfg, crossed_real):
        with pytest.raises(ValueError):
            initial_point(crossed_cfg, crossed_real, strategy="warm")


def test_rounding_keeps_power_carrying_indicators(crossed_cfg, crossed_real):
    shape = crossed_cfg.shape_ul
    # every indicator sits below the threshold, but the powers show where the bits go
    s = np.full(shape, 0.003)
    pbar = np.zeros(shape)
    pbar[0, 1, 0], pbar[1, 0, 0] = 0.01, 0.01
    alloc = Allocation(s, s.copy(), pbar, pbar.copy(), pbar.copy(), pbar.copy())
    r_u, r_d = round_allocation(crossed_cfg, crossed_real, alloc)
    for r in (r_u, r_d):
        assert r[:, :, 0].tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_rounding_gives_every_user_a_resource(four_carrier_cfg):
    real = draw_realization(four_carrier_cfg, 13)
    r_u, r_d = round_allocation(four_carrier_cfg, real, Allocation.zeros(four_carrier_cfg))
    assert r_u.sum(axis=(1, 2)).all()
    assert r_d.sum(axis=(1, 2)).all()
    assert np.all(r_u.sum(axis=0) <= 1) and np.all(r_d.sum(axis=0) <= 1)


def test_restoration_lifts_the_dispersion_expansion_point(crossed_cfg, crossed_real):
    point = Allocation.zeros(crossed_cfg)
    sub = build_subproblem(crossed_cfg, crossed_real, point, lift_snr=10.0)
    con = sub.log_constraints[0]
    lifted = 10.0 / con.gains
    np.testing.assert_allclose(con.lin_coef, v_gradient(lifted, con.gains, 1e-3))
    plain = build_subproblem(crossed_cfg, crossed_real, point).log_constraints[0]
    # from zero power the tangent is taken at the tiny perturbation instead
    assert np.all(plain.lin_coef > con.lin_coef)


@pytest.mark.parametrize("seed", [1, 13, 15, 18])
def test_proposed_feasible_where_a_binary_allocation_exists(four_carrier_cfg, seed):
    real = draw_realization(four_carrier_cfg, seed)
    final, trace = run_proposed(four_carrier_cfg, real)
    assert trace.feasible, trace.report.violations
    assert trace.report.mask_violations == 0
    assert final.is_binary()


def test_restored_iterations_are_flagged(four_carrier_cfg):
    real = draw_realization(four_carrier_cfg, 1)
    _, trace = run(four_carrier_cfg, real, init="feasible")
    assert all(isinstance(r.restored, bool) for r in trace.records)
    assert trace.retries >= sum(r.restored for r in trace.records)


@pytest.mark.slow
def test_sca_batch_is_monotone_and_feasible(four_carrier_cfg):
    cfg = four_carrier_cfg.with_updates(task_bits=[16.0, 16.0])
    masks = build_masks(cfg)
    for seed in range(50):
        real = draw_realization(cfg, seed)
        final, trace = run_proposed(cfg, real)
        assert trace.feasible, (seed, trace.report.violations)
        assert trace.report.mask_violations == 0
        assert final.is_binary()
        assert not np.any(final.s_d * ~masks.dl_allowed()[:, None, :])
        for prev, cur in zip(trace.records, trace.records[1:]):
            if not cur.restored:
                assert cur.penalized_obj_w <= prev.penalized_obj_w + 1e-6 * abs(prev.penalized_obj_w) + 1e-9
