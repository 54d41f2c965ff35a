import itertools

import numpy as np
import pytest

from solver.assignment import (
    feasible_powers,
    inverse_waterfilling,
    ranked_splits,
    repair_split,
    score_split,
    slot_windows,
    window_options,
)
from solver.benchmarks import (
    ORACLE_MAX_WORK,
    InstanceTooLargeError,
    SchemeId,
    _min_user_power,
    fsa_split,
    greedy_split,
    grid_ratio,
    oracle_work,
    power_grid,
    run_fsa,
    run_oracle,
    run_proposed,
    run_sc,
    run_scheme,
)
from solver.fbtrate import psi
from solver.problem import Allocation, build_masks, check, objective
from solver.sysmodel import draw_realization, load_scenario


class TestSplits:
    def test_fsa_remainders_go_to_lowest_index(self, make_config):
        cfg = make_config(num_users=2, num_subcarriers_ul=3, num_subcarriers_dl=3)
        s_u, s_d = fsa_split(cfg)
        for s in (s_u, s_d):
            assert s[:, :, 0].tolist() == [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]
            assert np.all(s.sum(axis=0) <= 1.0)

    def test_fsa_respects_masks(self, make_config):
        cfg = make_config(num_users=2, num_subcarriers_ul=2, num_subcarriers_dl=2,
                          num_slots_ul=4, num_slots_dl=4, tau=3, deadlines=[5, 7])
        s_u, s_d = fsa_split(cfg)
        masks = build_masks(cfg)
        allowed = masks.dl_allowed()
        assert not np.any(s_d * ~allowed[:, None, :])
        for k in range(cfg.num_users):
            for n_u, n_d in masks.causality_pairs:
                assert not (s_u[k, :, n_u].any() and s_d[k, :, n_d].any())
        assert s_u.sum(axis=(1, 2)).all() and s_d.sum(axis=(1, 2)).all()

    def test_greedy_takes_the_strong_sub_carriers(self, crossed_cfg, crossed_real):
        s_u, s_d = greedy_split(crossed_cfg, crossed_real)
        for s in (s_u, s_d):
            assert s[:, :, 0].tolist() == [[0.0, 1.0], [1.0, 0.0]]

    def test_inverse_waterfilling(self):
        assert inverse_waterfilling(np.array([1.0, 1.0]), 2.0) == pytest.approx([1.0, 1.0])
        # the weak resource stays off
        powers = inverse_waterfilling(np.array([10.0, 1e-3]), 1.0)
        assert powers[1] == 0.0
        assert powers[0] == pytest.approx(0.1)

    def test_feasible_powers_meet_rates(self, crossed_cfg, crossed_real):
        s_u, s_d = fsa_split(crossed_cfg)
        p_u, p_d = feasible_powers(crossed_cfg, crossed_real, s_u, s_d, margin_db=0.0)
        report = check(Allocation.from_binary(s_u, s_d, p_u, p_d), crossed_cfg, crossed_real)
        assert report.feasible, report.violations


class TestSchemes:
    def test_shannon_closed_form(self, make_config, make_realization):
        cfg = make_config(task_bits=2.0)
        real = make_realization(cfg, 4.0)
        alloc, trace = run_sc(cfg, real)
        assert trace.feasible
        # log2(1 + 4p) = 2
        assert alloc.p_u[0, 0, 0] == pytest.approx(0.75, rel=1e-4)
        assert objective(alloc, cfg) == pytest.approx(1.5, rel=1e-4)

    def test_scheme_ordering(self, crossed_cfg, crossed_real):
        sc = objective(run_sc(crossed_cfg, crossed_real)[0], crossed_cfg)
        proposed, trace = run_proposed(crossed_cfg, crossed_real)
        fsa, fsa_trace = run_fsa(crossed_cfg, crossed_real)
        assert trace.feasible and fsa_trace.feasible
        p = objective(proposed, crossed_cfg)
        f = objective(fsa, crossed_cfg)
        assert sc <= p <= f
        # round-robin puts every user on its weaker sub-carrier at half the gain
        assert f / p == pytest.approx(2.0, rel=1e-3)

    def test_symmetric_fsa_gives_equal_powers(self, crossed_cfg, make_realization):
        real = make_realization(crossed_cfg, 1e5)
        alloc, trace = run_fsa(crossed_cfg, real)
        assert trace.feasible
        totals = alloc.p_u.sum(axis=(1, 2))
        assert totals[0] == pytest.approx(totals[1], rel=1e-5)


class TestOracle:
    def test_single_user_within_grid_ratio(self, single_cfg, single_real):
        result = run_oracle(single_cfg, single_real)
        assert result.feasible
        assert 2.0 <= result.objective_w <= 2.0 * result.grid_ratio
        assert check(result.allocation, single_cfg, single_real).feasible

    def test_proposed_close_to_oracle(self, crossed_cfg, crossed_real):
        oracle = run_oracle(crossed_cfg, crossed_real)
        proposed = objective(run_proposed(crossed_cfg, crossed_real)[0], crossed_cfg)
        assert oracle.feasible
        assert proposed >= oracle.objective_w / oracle.grid_ratio
        assert proposed <= 1.15 * oracle.objective_w

    def test_refuses_large_instances(self, make_config, make_realization):
        cfg = make_config(num_users=2, num_subcarriers_ul=2, num_subcarriers_dl=2,
                          num_slots_ul=3, num_slots_dl=3, tau=1)
        real = make_realization(cfg, 1e5)
        assert oracle_work(cfg) > ORACLE_MAX_WORK
        three_users = make_config(num_users=3, num_subcarriers_ul=2, num_subcarriers_dl=2,
                                  num_slots_ul=2, num_slots_dl=2, tau=1)
        assert oracle_work(three_users) > ORACLE_MAX_WORK
        with pytest.raises(InstanceTooLargeError):
            run_oracle(cfg, real)
        outcome = run_scheme(SchemeId.ORACLE, cfg, real)
        assert outcome.error and "refuses" in outcome.error
        assert not outcome.feasible

    def test_infeasible_instance(self, make_config, make_realization):
        cfg = make_config(task_bits=40.0)
        result = run_oracle(cfg, make_realization(cfg, 1.0))
        assert not result.feasible
        assert result.allocation is None
        assert np.isnan(result.objective_w)

    def test_grid_ratio(self):
        assert grid_ratio(1e-6 * 2 ** 63) == pytest.approx(2.0)


def test_scheme_parse():
    assert SchemeId.parse("oracle") is SchemeId.ORACLE
    assert SchemeId.parse(" fsa ") is SchemeId.FSA
    with pytest.raises(ValueError):
        SchemeId.parse("MILP")


def test_run_scheme_wraps_results(crossed_cfg, crossed_real):
    outcome = run_scheme(SchemeId.FSA, crossed_cfg, crossed_real)
    assert outcome.error is None
    assert outcome.feasible
    assert outcome.iterations >= 1
    assert outcome.objective_w == pytest.approx(objective(outcome.allocation, crossed_cfg))


class TestGreedyCoverage:
    @pytest.mark.parametrize("seed", range(25))
    def test_every_user_gets_a_resource_per_link(self, four_carrier_cfg, seed):
        real = draw_realization(four_carrier_cfg, seed)
        s_u, s_d = greedy_split(four_carrier_cfg, real)
        assert s_u.sum(axis=(1, 2)).min() >= 1
        assert s_d.sum(axis=(1, 2)).min() >= 1
        assert np.all(s_u.sum(axis=0) <= 1) and np.all(s_d.sum(axis=0) <= 1)

    def test_window_options_cover_every_cut(self, four_carrier_cfg):
        options = window_options(four_carrier_cfg)
        assert len(options) == 4
        assert options[0] == slot_windows(four_carrier_cfg)
        ul_sizes = sorted(tuple(len(w[0]) for w in windows) for windows in options)
        assert ul_sizes == [(1, 1), (1, 2), (2, 1), (2, 2)]

    def test_repair_gives_the_starved_user_a_sub_carrier(self, crossed_cfg, crossed_real):
        s_u, _ = fsa_split(crossed_cfg)
        s_d = np.zeros(crossed_cfg.shape_dl)
        s_d[0, :, 0] = 1.0
        assert not score_split(crossed_cfg, crossed_real, s_u, s_d).feasible
        r_u, r_d = repair_split(crossed_cfg, crossed_real, s_u, s_d)
        assert score_split(crossed_cfg, crossed_real, r_u, r_d).feasible
        assert r_d[1].sum() == 1 and r_d[0].sum() == 1

    def test_ranked_splits_put_feasible_first(self, crossed_cfg, crossed_real):
        splits = ranked_splits(crossed_cfg, crossed_real)
        keys = [score_split(crossed_cfg, crossed_real, *split).key() for split in splits]
        assert keys == sorted(keys)
        assert not keys[0][0]


class TestOracleSearch:
    def test_work_bound_admits_two_slots(self, make_config):
        cfg = make_config(num_users=2, num_subcarriers_ul=2, num_subcarriers_dl=2,
                          num_slots_ul=2, num_slots_dl=2, tau=1)
        assert oracle_work(cfg) == 3 ** 8 + 4 * (2211 ** 2 - 1)
        assert oracle_work(cfg) <= ORACLE_MAX_WORK
        tiny = make_config(num_users=2, num_subcarriers_ul=2, num_subcarriers_dl=2)
        assert oracle_work(tiny) == 3 ** 4 + 4 * (66 ** 2 - 1)

    def test_sorted_levels_match_full_enumeration(self):
        grid = power_grid(1.0, 8)
        gains = np.array([10.0, 30.0, 30.0])
        cost, powers = _min_user_power(gains, 4.0, 1e-3, 1.0, grid, True)

        best = np.inf
        for levels in itertools.product(grid, repeat=3):
            p = np.array(levels)
            if p.sum() <= 1.0 and psi(gains * p, 1e-3) >= 4.0:
                best = min(best, p.sum())
        assert cost == pytest.approx(best)
        assert powers.sum() == pytest.approx(cost)
        assert psi(gains * powers, 1e-3) >= 4.0

    @pytest.mark.slow
    def test_two_slot_instance_is_solved(self, scenario_dir):
        cfg = load_scenario("tiny").with_updates(num_slots_ul=2, num_slots_dl=2, deadlines=[3, 3])
        real = draw_realization(cfg, 3)
        result = run_oracle(cfg, real)
        assert result.feasible
        report = check(result.allocation, cfg, real)
        assert report.feasible and report.mask_violations == 0


@pytest.mark.slow
class TestAgainstBenchmarks:
    def test_proposed_close_to_oracle_on_tiny_instances(self, scenario_dir):
        tiny = load_scenario("tiny")
        two_slot = tiny.with_updates(num_slots_ul=2, num_slots_dl=2, deadlines=[3, 3])
        compared = 0
        for cfg in (tiny, two_slot):
            for seed in range(10):
                real = draw_realization(cfg, seed)
                oracle = run_oracle(cfg, real)
                final, trace = run_proposed(cfg, real)
                if not (oracle.feasible and trace.feasible):
                    continue
                compared += 1
                proposed = objective(final, cfg)
                assert proposed >= oracle.objective_w / oracle.grid_ratio * (1 - 1e-6)
                assert proposed <= 1.5 * oracle.objective_w, (seed, proposed, oracle.objective_w)
        assert compared >= 10

    def test_scheme_ordering_per_realization(self, four_carrier_cfg):
        gaps = []
        for seed in range(20):
            real = draw_realization(four_carrier_cfg, seed)
            sc, sc_trace = run_sc(four_carrier_cfg, real)
            proposed, trace = run_proposed(four_carrier_cfg, real)
            fsa, fsa_trace = run_fsa(four_carrier_cfg, real)
            if not (sc_trace.feasible and trace.feasible and fsa_trace.feasible):
                continue
            s, p, f = (objective(a, four_carrier_cfg) for a in (sc, proposed, fsa))
            assert s <= p * (1 + 1e-4)
            assert p <= f * (1 + 1e-4)
            gaps.append(f - p)
        assert gaps
        assert np.mean(gaps) > 0.0
