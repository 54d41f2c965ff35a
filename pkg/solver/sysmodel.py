"""
System model: scenario configuration, user placement, path loss, Rayleigh fading and SNR.

All power arithmetic is in watts; dBm appears only in scenario files and reports.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from config import config
from utils.units import dbm_to_w

logger = logging.getLogger(__name__)

PER_USER_FIELDS = (
    "p_user_max_dbm",
    "task_bits",
    "deadlines",
    "gamma",
    "eps_ul",
    "eps_dl",
    "weights",
)


class SystemConfig(BaseModel):
    """Static scenario parameters. Immutable after validation."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    num_users: int = Field(..., ge=1, description="K, number of URLLC users")
    num_subcarriers_ul: int = Field(..., ge=1, description="M_u")
    num_subcarriers_dl: int = Field(..., ge=1, description="M_d")
    num_slots_ul: int = Field(4, ge=1, description="N_u")
    num_slots_dl: int = Field(4, ge=1, description="N_d")
    tau: int = Field(3, ge=0, description="Downlink start offset in slots")
    subcarrier_bw_hz: float = Field(30e3, gt=0, description="BW_s")
    noise_psd_dbm_hz: float = Field(-174.0, description="Noise power spectral density")
    p_max_dbm: float = Field(45.0, description="BS power budget")
    p_user_max_dbm: List[float] = Field(..., description="Per-user power budget")
    task_bits: List[float] = Field(..., description="B_k, offloaded task size in bits")
    deadlines: List[int] = Field(..., description="D_k, absolute slot deadline")
    gamma: List[float] = Field(..., description="Downlink/uplink size ratio")
    eps_ul: List[float] = Field(..., description="Uplink packet error probability")
    eps_dl: List[float] = Field(..., description="Downlink packet error probability")
    weights: List[float] = Field(..., description="Uplink power weights w_k >= 1")
    r_inner: float = Field(50.0, gt=0, description="Inner cell radius (m)")
    r_outer: float = Field(100.0, gt=0, description="Outer cell radius (m)")
    eta1: Optional[float] = Field(None, ge=0, description="Uplink penalty factor (W)")
    eta2: Optional[float] = Field(None, ge=0, description="Downlink penalty factor (W)")

    @model_validator(mode="before")
    @classmethod
    def _broadcast_per_user(cls, data):
        if not isinstance(data, dict):
            return data
        data = dict(data)
        k = data.get("num_users")
        if "deadlines" not in data and k is not None:
            # no delay restriction
            data["deadlines"] = data.get("tau", 3) + data.get("num_slots_dl", 4)
        defaults = {"p_user_max_dbm": 23.0, "gamma": 1.0, "weights": 1.0}
        for name in PER_USER_FIELDS:
            value = data.get(name, defaults.get(name))
            if isinstance(value, (int, float)) and k is not None:
                data[name] = [value] * int(k)
            elif value is not None:
                data[name] = list(value)
        return data

    @model_validator(mode="after")
    def _check_invariants(self):
        k = self.num_users
        for name in PER_USER_FIELDS:
            if len(getattr(self, name)) != k:
                raise ValueError(f"{name} must have {k} entries, got {len(getattr(self, name))}")
        if self.tau > self.num_slots_ul:
            raise ValueError(f"tau={self.tau} exceeds num_slots_ul={self.num_slots_ul}")
        for i, d in enumerate(self.deadlines):
            if not self.tau < d <= self.tau + self.num_slots_dl:
                raise ValueError(
                    f"deadline of user {i} ({d}) must lie in ({self.tau}, {self.tau + self.num_slots_dl}]"
                )
        for name in ("eps_ul", "eps_dl"):
            if any(not 0.0 < e < 1.0 for e in getattr(self, name)):
                raise ValueError(f"{name} entries must lie in (0, 1)")
        if any(w < 1.0 for w in self.weights):
            raise ValueError("weights must be >= 1")
        if any(g <= 0 for g in self.gamma):
            raise ValueError("gamma entries must be > 0")
        if any(b <= 0 for b in self.task_bits):
            raise ValueError("task_bits entries must be > 0")
        if self.r_inner > self.r_outer:
            raise ValueError("r_inner must not exceed r_outer")
        return self

    @property
    def overlap(self) -> int:
        """Ō = N_u − τ, slots where uplink and downlink frames overlap."""
        return self.num_slots_ul - self.tau

    @property
    def symbol_duration_s(self) -> float:
        return 1.0 / self.subcarrier_bw_hz

    @property
    def p_max_w(self) -> float:
        return float(dbm_to_w(self.p_max_dbm))

    @property
    def p_user_max_w(self) -> np.ndarray:
        return dbm_to_w(self.p_user_max_dbm)

    @property
    def eta1_w(self) -> float:
        if self.eta1 is not None:
            return self.eta1
        return 10.0 * self.num_users * float(np.max(self.p_user_max_w))

    @property
    def eta2_w(self) -> float:
        if self.eta2 is not None:
            return self.eta2
        return 10.0 * self.p_max_w

    @property
    def uplink_bits(self) -> np.ndarray:
        return np.asarray(self.task_bits, dtype=float)

    @property
    def downlink_bits(self) -> np.ndarray:
        return np.asarray(self.gamma, dtype=float) * self.uplink_bits

    @property
    def shape_ul(self):
        return (self.num_users, self.num_subcarriers_ul, self.num_slots_ul)

    @property
    def shape_dl(self):
        return (self.num_users, self.num_subcarriers_dl, self.num_slots_dl)

    def with_updates(self, **changes) -> "SystemConfig":
        """Return a validated copy with some fields replaced."""
        data = self.model_dump()
        data.update(changes)
        return SystemConfig.model_validate(data)


@dataclass(frozen=True)
class ChannelRealization:
    """Normalized gains g = |h|^2 / sigma^2 (1/W) for every user and sub-carrier."""

    g_u: np.ndarray  # (K, M_u)
    g_d: np.ndarray  # (K, M_d)
    d: np.ndarray  # (K,)
    seed: Optional[int] = None

    def __post_init__(self):
        for name in ("g_u", "g_d"):
            g = np.asarray(getattr(self, name), dtype=float)
            if g.ndim != 2:
                raise ValueError(f"{name} must be a (K, M) array")
            if not np.all(np.isfinite(g)) or np.any(g <= 0):
                raise ValueError(f"{name} must be strictly positive and finite")
            object.__setattr__(self, name, g)
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float))

    def matches(self, cfg: SystemConfig) -> bool:
        k = cfg.num_users
        return self.g_u.shape == (k, cfg.num_subcarriers_ul) and self.g_d.shape == (k, cfg.num_subcarriers_dl)


def path_loss_db(d):
    """Path loss 35.3 + 37.6 log10(d) in dB, d in meters."""
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0):
        raise ValueError(f"distance must be positive, got {d}")
    loss = 35.3 + 37.6 * np.log10(d)
    return float(loss) if loss.ndim == 0 else loss


def noise_power_w(cfg: SystemConfig) -> float:
    """Noise power per sub-carrier in watts."""
    dbm = cfg.noise_psd_dbm_hz + 10.0 * np.log10(cfg.subcarrier_bw_hz)
    return float(dbm_to_w(dbm))


def rayleigh_power(rng: np.random.Generator, size) -> np.ndarray:
    """Small-scale power gains |h|^2 of unit-mean Rayleigh fading."""
    return rng.exponential(1.0, size=size)


def place_users(rng: np.random.Generator, cfg: SystemConfig) -> np.ndarray:
    """Distances uniform over the annulus area between r_inner and r_outer."""
    r1, r2 = cfg.r_inner, cfg.r_outer
    return np.sqrt(rng.uniform(r1 ** 2, r2 ** 2, size=cfg.num_users))


def draw_realization(cfg: SystemConfig, seed: int) -> ChannelRealization:
    """
    Draw user positions and i.i.d. Rayleigh fading for both links.

    Args:
        cfg: Scenario configuration
        seed: RNG seed; the same seed always yields the same realization

    Returns:
        ChannelRealization with normalized gains
    """
    rng = np.random.default_rng(seed)
    d = place_users(rng, cfg)
    attenuation = 10.0 ** (-path_loss_db(d) / 10.0) / noise_power_w(cfg)
    k = cfg.num_users
    # uplink and downlink fading are independent draws
    g_u = rayleigh_power(rng, (k, cfg.num_subcarriers_ul)) * attenuation[:, None]
    g_d = rayleigh_power(rng, (k, cfg.num_subcarriers_dl)) * attenuation[:, None]
    return ChannelRealization(g_u=g_u, g_d=g_d, d=d, seed=seed)


def snr(g, p):
    """SNR gamma = g * p."""
    return np.multiply(g, p)


def load_scenario(name_or_path: Union[str, Path]) -> SystemConfig:
    """
    Load a scenario from a JSON file path or a name under config.SCENARIO_DIR.
    """
    path = Path(name_or_path)
    if not path.exists():
        path = Path(config.SCENARIO_DIR) / f"{name_or_path}.json"
    if not path.exists():
        raise ValueError(f"scenario not found: {name_or_path}")

    with open(path, "r") as f:
        data = json.load(f)
    data.pop("description", None)
    logger.info(f"Loaded scenario {path}")
    return SystemConfig.model_validate(data)


def list_scenarios() -> List[str]:
    """Names of the scenario files available in config.SCENARIO_DIR."""
    directory = Path(config.SCENARIO_DIR)
    if not directory.exists():
        return []
    return sorted(p.stem for p in directory.glob("*.json"))


def scale_subcarriers(cfg: SystemConfig, total: int) -> SystemConfig:
    """Set M_u = M_d = total / 2."""
    if total < 2 or total % 2:
        raise ValueError(f"total sub-carrier count must be even and >= 2, got {total}")
    return cfg.with_updates(num_subcarriers_ul=total // 2, num_subcarriers_dl=total // 2)
