"""
Averaged sweep trends on small instances: more bits or a stricter error target
never cost less power, the Shannon bound ignores the error target and delay
restrictions never help.
"""
import numpy as np
import pytest

from simulation import SweepSpec, run_sweep
from solver.sysmodel import load_scenario

pytestmark = pytest.mark.slow

DB_SLACK = 0.01


def _curve(cells, scheme):
    return [cell.avg_power_dbm for cell in cells if cell.scheme == scheme]


def test_power_grows_with_task_size(four_carrier_cfg):
    spec = SweepSpec(axis="task_bits", values=[8, 16, 24], schemes=["Proposed"], realizations=8)
    curve = _curve(run_sweep(spec, four_carrier_cfg, seed=5, workers=1), "Proposed")
    assert np.all(np.isfinite(curve))
    assert np.all(np.diff(curve) >= -DB_SLACK)


def test_power_falls_with_looser_error_target(four_carrier_cfg):
    spec = SweepSpec(axis="error_prob", values=[1e-7, 1e-6, 1e-4, 1e-2], schemes=["Proposed", "SC"],
                     realizations=8)
    cells = run_sweep(spec, four_carrier_cfg.with_updates(task_bits=[16.0, 16.0]), seed=6, workers=1)
    proposed, sc = _curve(cells, "Proposed"), _curve(cells, "SC")
    assert np.all(np.diff(proposed) <= DB_SLACK)
    assert max(sc) - min(sc) <= 0.1
    assert all(p >= s - DB_SLACK for p, s in zip(proposed, sc))


def test_delay_restriction_never_saves_power(scenario_dir):
    cfg = load_scenario("tiny").with_updates(
        num_subcarriers_ul=3, num_subcarriers_dl=3, num_slots_ul=3, num_slots_dl=3, tau=2,
        deadlines=[5, 5], task_bits=[16.0, 16.0], eps_ul=[1e-6, 1e-6], eps_dl=[1e-6, 1e-6],
    )
    curves = {}
    for label in ("S0", "S1"):
        spec = SweepSpec(axis="task_bits", values=[8, 16], schemes=["Proposed"], realizations=8,
                         delay_scenario=label)
        curves[label] = _curve(run_sweep(spec, cfg, seed=7, workers=1), "Proposed")
    for s0, s1 in zip(curves["S0"], curves["S1"]):
        assert s1 >= s0 - DB_SLACK
