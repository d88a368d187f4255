"""
Core configuration for driftlab
Environment-driven settings for solvers, simulations and the backtest
"""

from pathlib import Path
from typing import List

from pydantic import Field
from pydantic_settings import BaseSettings


class Settings(BaseSettings):
    """Application settings with environment variable support"""

    # Application
    APP_NAME: str = "driftlab"
    VERSION: str = "1.0.0"

    # Logging
    LOG_LEVEL: str = Field(default="INFO", description="Root log level")
    LOG_FORMAT: str = Field(default="json", description="json or console")

    # Filesystem
    DATA_DIR: Path = Field(default=Path("data"), description="Where input panels live")
    OUTPUT_DIR: Path = Field(default=Path("output"), description="Where artifacts are written")

    # Scalar solvers
    SOLVER_TOL: float = Field(default=1e-12, gt=0)
    SOLVER_MAX_ITER: int = Field(default=10_000, ge=1)
    SOLVER_DAMPING: float = Field(default=0.5, gt=0, le=1)
    COMPLEXITY_SEPARATION: float = Field(default=1e-3, gt=0, description="tau, min |c - 1|")

    # Spectra
    ATOM_MERGE_RTOL: float = Field(default=1e-12, ge=0)
    VARPI_MAX_DIM: int = Field(default=2000, ge=1)

    # Monte Carlo
    MC_DRAWS: int = Field(default=10_000, ge=1)
    MC_BATCHES: int = Field(default=100, ge=1)
    N_JOBS: int = Field(default=1)
    MASTER_SEED: int = Field(default=0, ge=0)

    # Empirical backtest
    BACKTEST_WINDOW: int = Field(default=12, ge=2)
    BACKTEST_FEATURES: int = Field(default=600, ge=2)
    BACKTEST_DRAWS: int = Field(default=500, ge=1)
    BACKTEST_BURN_IN: int = Field(default=36, ge=2)
    BACKTEST_Z_GRID: List[float] = Field(default=[0.01, 100.0])
    BETA_WINDOW: int = Field(default=180, ge=10)
    BETA_LAGS: int = Field(default=6, ge=1)

    class Config:
        env_file = ".env"
        case_sensitive = True


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get application settings"""
    return settings
