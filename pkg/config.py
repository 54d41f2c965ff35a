"""
Configuration module for the URLLC MEC allocation solver.
"""
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()


def _flag(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).lower() == "true"


class Config:
    """Application configuration."""

    # Convex solver backend (must support the exponential cone)
    SOLVER: str = os.getenv("SOLVER", "CLARABEL").upper()
    SOLVER_VERBOSE: bool = _flag("SOLVER_VERBOSE")

    # Worker pool for Monte Carlo sweeps; <= 0 means one per CPU
    MAX_WORKERS: int = int(os.getenv("MAX_WORKERS", "1"))

    # Paths
    SCENARIO_DIR: str = os.getenv("SCENARIO_DIR", "scenarios")
    RESULTS_DIR: str = os.getenv("RESULTS_DIR", "results")
    DEFAULT_SCENARIO: str = os.getenv("DEFAULT_SCENARIO", "desk")

    # Sweep scale presets (total sub-carriers 2M, realizations)
    DESK_SUBCARRIERS: int = int(os.getenv("DESK_SUBCARRIERS", "16"))
    DESK_REALIZATIONS: int = int(os.getenv("DESK_REALIZATIONS", "20"))
    FULL_SUBCARRIERS: int = 64
    FULL_REALIZATIONS: int = 100

    # Application
    DEBUG: bool = _flag("DEBUG")
    APP_NAME: str = "URLLC MEC Allocation Solver"
    APP_VERSION: str = "1.0.0"

    @classmethod
    def workers(cls) -> int:
        """Effective worker count."""
        if cls.MAX_WORKERS <= 0:
            return os.cpu_count() or 1
        return cls.MAX_WORKERS

    @classmethod
    def validate(cls) -> None:
        """Validate configuration."""
        import cvxpy as cp

        if cls.SOLVER not in cp.installed_solvers():
            raise ValueError(
                f"SOLVER={cls.SOLVER} is not installed; available: {', '.join(cp.installed_solvers())}"
            )

        if cls.DESK_SUBCARRIERS < 2 or cls.DESK_SUBCARRIERS % 2:
            raise ValueError("DESK_SUBCARRIERS must be an even number >= 2")

        if cls.DESK_REALIZATIONS < 1:
            raise ValueError("DESK_REALIZATIONS must be >= 1")

# Create a singleton instance
config = Config()
