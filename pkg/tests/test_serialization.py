import json

import numpy as np
import pytest

from solver.scasolver import run
from utils.serialization import allocation_from_dict, load_allocation, save_allocation, trace_to_dict


def test_saved_allocation_loads_back(single_cfg, single_real, tmp_path):
    final, _ = run(single_cfg, single_real)
    path = save_allocation(final, tmp_path / "alloc" / "single.json")
    loaded = load_allocation(path)
    np.testing.assert_allclose(loaded.p_u, final.p_u)
    assert loaded.matches(single_cfg)


def test_missing_fields_rejected():
    with pytest.raises(ValueError, match="pbar_d"):
        allocation_from_dict({name: [[[0.0]]] for name in ("s_u", "s_d", "p_u", "p_d", "pbar_u")})


def test_trace_is_json_ready(single_cfg, single_real):
    _, trace = run(single_cfg, single_real)
    data = json.loads(json.dumps(trace_to_dict(trace)))
    assert data["status"] == "converged"
    assert data["report"]["feasible"] is True
    assert len(data["iterations"]) == len(trace)
