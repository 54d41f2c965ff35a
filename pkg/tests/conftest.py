"""
Shared fixtures: tiny scenarios whose optimal allocations are known in closed form
or by construction.
"""
from pathlib import Path

import numpy as np
import pytest

from config import config
from solver.sysmodel import ChannelRealization, SystemConfig, load_scenario

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture(autouse=True)
def scenario_dir(monkeypatch):
    monkeypatch.setattr(config, "SCENARIO_DIR", str(SCENARIO_DIR))
    return SCENARIO_DIR


@pytest.fixture
def make_config():
    """Factory for one-slot configurations; keyword arguments override the defaults."""

    def _make(**overrides) -> SystemConfig:
        data = dict(
            num_users=1,
            num_subcarriers_ul=1,
            num_subcarriers_dl=1,
            num_slots_ul=1,
            num_slots_dl=1,
            tau=1,
            p_user_max_dbm=33.0,
            task_bits=1.0,
            eps_ul=0.5,
            eps_dl=0.5,
        )
        data.update(overrides)
        return SystemConfig.model_validate(data)

    return _make


@pytest.fixture
def make_realization():
    """Realization with explicit gains (a scalar fills every entry)."""

    def _make(cfg: SystemConfig, g_u=1.0, g_d=None, seed=None) -> ChannelRealization:
        k = cfg.num_users
        g_u = np.broadcast_to(np.asarray(g_u, dtype=float), (k, cfg.num_subcarriers_ul)).copy()
        g_d = g_u.copy() if g_d is None else np.broadcast_to(
            np.asarray(g_d, dtype=float), (k, cfg.num_subcarriers_dl)).copy()
        return ChannelRealization(g_u=g_u, g_d=g_d, d=np.full(k, 75.0), seed=seed)

    return _make


@pytest.fixture
def single_cfg(make_config):
    """K = 1, one resource per link, eps = 0.5, B = 1 bit: p = 1 W on both links at g = 1."""
    return make_config()


@pytest.fixture
def single_real(single_cfg, make_realization):
    return make_realization(single_cfg, 1.0)


@pytest.fixture
def crossed_cfg(make_config):
    """Two users, two sub-carriers per link, one slot, 8-bit tasks."""
    return make_config(
        num_users=2,
        num_subcarriers_ul=2,
        num_subcarriers_dl=2,
        p_user_max_dbm=23.0,
        task_bits=8.0,
        eps_ul=1e-3,
        eps_dl=1e-3,
    )


@pytest.fixture
def crossed_real(crossed_cfg, make_realization):
    """Each user is twice as strong on the sub-carrier round-robin does not give it."""
    gains = [[1e5, 2e5], [2e5, 1e5]]
    return make_realization(crossed_cfg, gains, gains, seed=11)


@pytest.fixture
def four_carrier_cfg(scenario_dir):
    """Two users, four sub-carriers and two slots per link (one overlapping), 24-bit tasks at eps = 1e-6."""
    return load_scenario("tiny").with_updates(
        num_subcarriers_ul=4,
        num_subcarriers_dl=4,
        num_slots_ul=2,
        num_slots_dl=2,
        deadlines=[3, 3],
        task_bits=[24.0, 24.0],
        eps_ul=[1e-6, 1e-6],
        eps_dl=[1e-6, 1e-6],
    )
