"""
Shared fixtures for the driftlab test suite
"""

from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import pytest

from app.core.config import get_settings
from app.models.schemas import CovarianceSpec, DriftGeometry, ModelSpec
from app.services import market


def _goyal_frame(months: int, seed: int = 7, start: str = "1926-01") -> pd.DataFrame:
    """Synthetic monthly file with the documented raw columns and plausible magnitudes"""
    rng = np.random.default_rng(seed)
    dates = pd.period_range(start, periods=months, freq="M")
    ret = 0.006 + 0.045 * rng.standard_normal(months)
    index = 10.0 * np.exp(np.cumsum(ret - 0.002))
    d12 = index * np.exp(-3.4 + 0.05 * np.cumsum(0.1 * rng.standard_normal(months)))
    e12 = d12 * np.exp(0.6 + 0.1 * rng.standard_normal(months))
    tbl = np.clip(0.03 + np.cumsum(0.001 * rng.standard_normal(months)), 0.001, None)
    aaa = tbl + 0.02 + 0.002 * rng.standard_normal(months)
    return pd.DataFrame(
        {
            "yyyymm": [int(f"{p.year}{p.month:02d}") for p in dates],
            "Index": index,
            "D12": d12,
            "E12": e12,
            "b/m": 0.5 + 0.05 * rng.standard_normal(months),
            "tbl": tbl,
            "AAA": aaa,
            "BAA": aaa + 0.01 + 0.002 * np.abs(rng.standard_normal(months)),
            "lty": tbl + 0.015 + 0.002 * rng.standard_normal(months),
            "ntis": 0.01 + 0.01 * rng.standard_normal(months),
            "Rfree": tbl / 12.0,
            "infl": 0.002 + 0.004 * rng.standard_normal(months),
            "ltr": 0.004 + 0.02 * rng.standard_normal(months),
            "corpr": 0.005 + 0.02 * rng.standard_normal(months),
            "svar": 0.002 + 0.001 * np.abs(rng.standard_normal(months)),
            "csp": 0.0,
            "CRSP_SPvw": ret + tbl / 12.0,
            "CRSP_SPvwx": ret + tbl / 12.0 - 0.003,
        }
    )


@pytest.fixture
def goyal_frame() -> Callable[..., pd.DataFrame]:
    return _goyal_frame


@pytest.fixture
def goyal_csv(tmp_path) -> Callable[..., Path]:
    """Factory writing a synthetic panel file and returning its path"""

    def write(months: int = 120, seed: int = 7, frame: pd.DataFrame = None) -> Path:
        path = tmp_path / f"goyal_{months}_{seed}.csv"
        (frame if frame is not None else _goyal_frame(months, seed)).to_csv(path, index=False)
        return path

    return write


@pytest.fixture
def small_panel(goyal_csv):
    return market.load_panel(goyal_csv(120))


@pytest.fixture
def iid_spec() -> ModelSpec:
    """Isotropic spec with independent unobserved features, n=100, p=50, q=50"""
    beta = np.full(50, np.sqrt(1.0 / 50))
    theta = np.full(50, np.sqrt(1.0 / 50))
    geom = DriftGeometry(beta_is=beta, beta_oos=0.6 * beta, theta_is=theta, theta_oos=0.6 * theta)
    return ModelSpec(n=100, p=50, q=50, z=0.1, geometry=geom, seed=3)


@pytest.fixture
def ar_spec() -> ModelSpec:
    """AR(0.9) observed and unobserved blocks with the identity projection"""
    p, q = 40, 40
    beta = np.full(p, np.sqrt(1.0 / p))
    theta = np.full(q, np.sqrt(1.0 / q))
    geom = DriftGeometry(beta_is=beta, beta_oos=0.8 * beta, theta_is=theta, theta_oos=0.8 * theta)
    return ModelSpec(
        n=100,
        p=p,
        q=q,
        z=0.1,
        sigma_x=CovarianceSpec.autoregressive(p, 0.9),
        sigma_w=CovarianceSpec.autoregressive(q, 0.9),
        mixing=np.eye(q, p),
        geometry=geom,
        seed=5,
    )


def pytest_collection_modifyitems(config, items):
    """Skip data-marked tests when the monthly predictor file is absent"""
    if (get_settings().DATA_DIR / "goyal.csv").exists():
        return
    skip = pytest.mark.skip(reason="monthly predictor file not found under DATA_DIR")
    for item in items:
        if item.get_closest_marker("data") is not None:
            item.add_marker(skip)
