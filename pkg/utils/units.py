"""
Power unit conversions. Solver arithmetic is in watts; dBm only at the edges.
"""
import numpy as np


def dbm_to_w(dbm):
    """Convert dBm (scalar or array) to watts."""
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def w_to_dbm(watts):
    """Convert watts to dBm. Nonpositive power maps to -inf."""
    watts = np.asarray(watts, dtype=float)
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(watts) + 30.0


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)
