"""
Data Models and Schemas for driftlab
====================================

Pydantic models for spectral measures, DGP specifications, strategy moments,
simulation grids and backtest artifacts
"""

from datetime import date, datetime
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, field_validator, model_validator

from app.core.exceptions import InputValidationError


def _as_float_array(value: Any, name: str, ndim: int = 1) -> np.ndarray:
    arr = np.array(value, dtype=float)
    if ndim == 1:
        arr = np.atleast_1d(arr)
    if arr.ndim != ndim:
        raise InputValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputValidationError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


# Spectral Models
class MeasureKind(str, Enum):
    DENSITY = "density"
    SIGNED = "signed"


class SpectralMeasure(BaseModel):
    """Discrete measure sum_i w_i delta_{lambda_i}"""

    lambdas: np.ndarray = Field(..., description="Atom locations")
    weights: np.ndarray = Field(..., description="Atom weights")
    kind: MeasureKind = Field(default=MeasureKind.DENSITY, description="density or signed")

    class Config:
        arbitrary_types_allowed = True
        frozen = True

    @field_validator("lambdas", "weights", mode="before")
    @classmethod
    def _coerce(cls, value: Any, info) -> np.ndarray:
        return _as_float_array(value, info.field_name)

    @model_validator(mode="after")
    def _check(self) -> "SpectralMeasure":
        if self.lambdas.shape != self.weights.shape:
            raise InputValidationError("lambdas and weights must have the same length")
        if self.lambdas.size == 0:
            raise InputValidationError("a spectral measure needs at least one atom")
        if self.kind == MeasureKind.DENSITY:
            if np.any(self.lambdas < 0):
                raise InputValidationError("density measures must be supported on [0, inf)")
            if np.any(self.weights < 0):
                raise InputValidationError("density weights must be nonnegative")
            if abs(self.weights.sum() - 1.0) > 1e-12:
                raise InputValidationError(
                    f"density weights must sum to 1, got {self.weights.sum():.15g}"
                )
        return self

    @classmethod
    def point_mass(cls, lam: float = 1.0) -> "SpectralMeasure":
        return cls(lambdas=[lam], weights=[1.0])

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    @property
    def is_density(self) -> bool:
        return self.kind == MeasureKind.DENSITY


class TransformResult(BaseModel):
    """Output of a scalar fixed-point solve"""

    value: float = Field(..., description="Solution")
    residual: float = Field(..., ge=0, description="Fixed-point defect at the solution")
    iterations: int = Field(..., ge=0, description="Iterations used")
    method: str = Field(default="fixed_point", description="Solver that produced the value")


class CovarianceKind(str, Enum):
    IDENTITY = "identity"
    AUTOREGRESSIVE = "autoregressive"
    EXPLICIT = "explicit"


class CovarianceSpec(BaseModel):
    """Population covariance of a feature block"""

    dim: int = Field(..., ge=1, description="Dimension p")
    kind: CovarianceKind = Field(default=CovarianceKind.IDENTITY)
    rho: Optional[float] = Field(default=None, description="AR coefficient")
    matrix: Optional[np.ndarray] = Field(default=None, description="Dense matrix for explicit kind")

    class Config:
        arbitrary_types_allowed = True
        frozen = True

    @field_validator("matrix", mode="before")
    @classmethod
    def _coerce_matrix(cls, value: Any) -> Optional[np.ndarray]:
        if value is None:
            return None
        return _as_float_array(value, "matrix", ndim=2)

    @model_validator(mode="after")
    def _check(self) -> "CovarianceSpec":
        if self.kind == CovarianceKind.AUTOREGRESSIVE:
            if self.rho is None or not -1.0 < self.rho < 1.0:
                raise InputValidationError("autoregressive covariance needs |rho| < 1")
        if self.kind == CovarianceKind.EXPLICIT:
            m = self.matrix
            if m is None or m.shape != (self.dim, self.dim):
                raise InputValidationError(f"explicit covariance must be {self.dim}x{self.dim}")
            scale = max(1.0, float(np.abs(m).max()))
            if not np.allclose(m, m.T, atol=1e-10 * scale, rtol=0):
                raise InputValidationError("covariance matrix must be symmetric")
            if np.linalg.eigvalsh(m).min() < -1e-10 * scale:
                raise InputValidationError("covariance matrix must be positive semidefinite")
        return self

    @classmethod
    def identity(cls, dim: int) -> "CovarianceSpec":
        return cls(dim=dim)

    @classmethod
    def autoregressive(cls, dim: int, rho: float) -> "CovarianceSpec":
        return cls(dim=dim, kind=CovarianceKind.AUTOREGRESSIVE, rho=rho)

    @classmethod
    def explicit(cls, matrix: Any) -> "CovarianceSpec":
        arr = np.asarray(matrix, dtype=float)
        return cls(dim=arr.shape[0], kind=CovarianceKind.EXPLICIT, matrix=arr)

    @property
    def is_identity(self) -> bool:
        return self.kind == CovarianceKind.IDENTITY

    def cache_key(self) -> Optional[Tuple[str, int, Optional[float]]]:
        """Hashable key for structured kinds; None for explicit matrices"""
        if self.kind == CovarianceKind.EXPLICIT:
            return None
        return (self.kind.value, self.dim, self.rho)


class EigenSystem(BaseModel):
    """Eigenvalues sorted descending with matching orthonormal eigenvectors (columns)"""

    values: np.ndarray
    vectors: np.ndarray

    class Config:
        arbitrary_types_allowed = True
        frozen = True


# Model Specification
class DriftGeometry(BaseModel):
    """In-sample and out-of-sample loadings on observed (beta) and unobserved (theta) features"""

    beta_is: np.ndarray = Field(..., description="Observed loadings, training period")
    beta_oos: np.ndarray = Field(..., description="Observed loadings, trading period")
    theta_is: np.ndarray = Field(default_factory=lambda: np.zeros(0), description="Unobserved, training")
    theta_oos: np.ndarray = Field(default_factory=lambda: np.zeros(0), description="Unobserved, trading")

    class Config:
        arbitrary_types_allowed = True
        frozen = True

    @field_validator("beta_is", "beta_oos", "theta_is", "theta_oos", mode="before")
    @classmethod
    def _coerce(cls, value: Any, info) -> np.ndarray:
        return _as_float_array(value, info.field_name)

    @model_validator(mode="after")
    def _check(self) -> "DriftGeometry":
        if self.beta_is.shape != self.beta_oos.shape:
            raise InputValidationError("beta_is and beta_oos must have equal length")
        if self.theta_is.shape != self.theta_oos.shape:
            raise InputValidationError("theta_is and theta_oos must have equal length")
        return self

    @property
    def p(self) -> int:
        return int(self.beta_is.size)

    @property
    def q(self) -> int:
        return int(self.theta_is.size)

    @property
    def inner(self) -> float:
        return float(self.beta_is @ self.beta_oos)

    @property
    def norm_is_sq(self) -> float:
        return float(self.beta_is @ self.beta_is)

    @property
    def norm_oos_sq(self) -> float:
        return float(self.beta_oos @ self.beta_oos)

    @property
    def theta_is_sq(self) -> float:
        return float(self.theta_is @ self.theta_is)

    @property
    def theta_oos_sq(self) -> float:
        return float(self.theta_oos @ self.theta_oos)

    @property
    def hadamard_norm(self) -> float:
        """||beta_is o beta_oos||^2"""
        return float(np.sum((self.beta_is * self.beta_oos) ** 2))

    @property
    def drift(self) -> np.ndarray:
        return self.beta_oos - self.beta_is

    @property
    def drift_sq(self) -> float:
        d = self.drift
        return float(d @ d)

    @property
    def s_is(self) -> float:
        return self.norm_is_sq + self.theta_is_sq

    @property
    def s_oos(self) -> float:
        return self.norm_oos_sq + self.theta_oos_sq

    def without_drift(self) -> "DriftGeometry":
        """Same training loadings, trading loadings set equal to them"""
        return DriftGeometry(
            beta_is=self.beta_is,
            beta_oos=self.beta_is,
            theta_is=self.theta_is,
            theta_oos=self.theta_is,
        )


class LatentDistribution(str, Enum):
    GAUSSIAN = "gaussian"
    DISCRETE = "discrete"


class ModelSpec(BaseModel):
    """Full description of the drifting, misspecified data generating process"""

    n: int = Field(..., ge=1, description="Training sample size")
    p: int = Field(..., ge=1, description="Observed features")
    q: int = Field(default=0, ge=0, description="Unobserved features")
    z: float = Field(default=0.0, ge=0, description="Ridge level, 0 means ridgeless")
    sigma_x: Optional[CovarianceSpec] = Field(default=None)
    sigma_w: Optional[CovarianceSpec] = Field(default=None)
    mixing: Optional[np.ndarray] = Field(
        default=None, description="q x p matrix P; None draws w from its own latents"
    )
    geometry: DriftGeometry
    latent: LatentDistribution = Field(default=LatentDistribution.GAUSSIAN)
    m4: float = Field(default=3.0, description="Fourth moment of the latents")
    seed: int = Field(default=0, ge=0, lt=2**64)

    class Config:
        arbitrary_types_allowed = True
        frozen = True

    @field_validator("mixing", mode="before")
    @classmethod
    def _coerce_mixing(cls, value: Any) -> Optional[np.ndarray]:
        if value is None:
            return None
        return _as_float_array(value, "mixing", ndim=2)

    @model_validator(mode="before")
    @classmethod
    def _default_covariances(cls, data: Any) -> Any:
        if isinstance(data, dict):
            data = dict(data)
            if data.get("sigma_x") is None and "p" in data:
                data["sigma_x"] = CovarianceSpec.identity(int(data["p"]))
            if data.get("sigma_w") is None and int(data.get("q", 0)) > 0:
                data["sigma_w"] = CovarianceSpec.identity(int(data["q"]))
        return data

    @model_validator(mode="after")
    def _check(self) -> "ModelSpec":
        if self.sigma_x.dim != self.p:
            raise InputValidationError(f"sigma_x has dim {self.sigma_x.dim}, expected p={self.p}")
        if self.q > 0 and self.sigma_w.dim != self.q:
            raise InputValidationError(f"sigma_w has dim {self.sigma_w.dim}, expected q={self.q}")
        if self.geometry.p != self.p:
            raise InputValidationError(f"beta has length {self.geometry.p}, expected p={self.p}")
        if self.geometry.q != self.q:
            raise InputValidationError(f"theta has length {self.geometry.q}, expected q={self.q}")
        if self.mixing is not None and self.mixing.shape != (self.q, self.p):
            raise InputValidationError(
                f"mixing matrix must be q x p = {self.q}x{self.p}, got {self.mixing.shape}"
            )
        if self.latent == LatentDistribution.GAUSSIAN and self.m4 != 3.0:
            raise InputValidationError("gaussian latents have m4 = 3")
        if self.latent == LatentDistribution.DISCRETE and self.m4 < 1.0:
            raise InputValidationError("the fourth moment of a unit-variance law is at least 1")
        return self

    @property
    def cphi(self) -> float:
        return self.p / self.n

    @property
    def c(self) -> float:
        return (self.p + self.q) / self.n

    @property
    def projected(self) -> bool:
        """True when w is a deterministic image of the x latents"""
        return self.mixing is not None

    def with_z(self, z: float) -> "ModelSpec":
        return self.model_copy(update={"z": float(z)})

    def with_geometry(self, geometry: DriftGeometry) -> "ModelSpec":
        return ModelSpec(**{**self.__dict__, "geometry": geometry})


class SolverTag(str, Enum):
    PRIMAL = "primal"
    DUAL = "dual"
    PSEUDO_INVERSE = "pseudo_inverse"


class FittedModel(BaseModel):
    """Estimated loadings"""

    beta_hat: np.ndarray
    solver: SolverTag
    seed: Optional[int] = None

    class Config:
        arbitrary_types_allowed = True


# Strategy Models
class Regime(str, Enum):
    RIDGE = "ridge"
    RIDGELESS = "ridgeless"


class StrategyMoments(BaseModel):
    """Asymptotic moments of the timing strategy return"""

    mean: float = Field(..., description="Expected return")
    variance: float = Field(..., ge=0, description="Return variance")
    leverage: float = Field(..., ge=0, description="Second moment of the position")
    kurtosis_term: float = Field(default=0.0, description="(m4 - 3) coefficient")
    second_moment: float = Field(..., description="E[(position * return)^2]")
    regime: Regime
    z: float = Field(..., ge=0)

    @property
    def volatility(self) -> float:
        return float(np.sqrt(self.variance))

    @property
    def sharpe(self) -> Optional[float]:
        if self.variance <= 0:
            return None
        return self.mean / float(np.sqrt(self.variance))


# Simulation Models
class SweepAxis(str, Enum):
    DRIFT = "drift"
    CONCENTRATION = "concentration"


class ExperimentGrid(BaseModel):
    """A family of grid points that share the training design and loadings"""

    experiment: str = Field(..., description="Label written to the output table")
    template: ModelSpec = Field(..., description="Spec shared by every point; z and geometry vary")
    axis: SweepAxis = Field(default=SweepAxis.DRIFT)
    k_values: List[float] = Field(..., min_length=1, description="Sweep coordinate per point")
    geometries: List[DriftGeometry] = Field(..., min_length=1)
    z_values: List[float] = Field(..., min_length=1)
    draws: int = Field(..., ge=1)
    batches: int = Field(default=100, ge=1)
    seed: int = Field(default=0, ge=0)

    class Config:
        arbitrary_types_allowed = True

    @model_validator(mode="after")
    def _check(self) -> "ExperimentGrid":
        if len(self.k_values) != len(self.geometries):
            raise InputValidationError("one geometry per sweep value is required")
        if not all(np.isfinite(self.k_values)):
            raise InputValidationError("sweep values must be finite")
        if any(z < 0 or not np.isfinite(z) for z in self.z_values):
            raise InputValidationError("ridge levels must be finite and nonnegative")
        first, base = self.geometries[0], self.template.geometry
        # draws are sampled from the template; other points only shift the trading loadings
        if not all(
            np.array_equal(getattr(base, name), getattr(first, name))
            for name in ("beta_is", "beta_oos", "theta_is", "theta_oos")
        ):
            raise InputValidationError("the template geometry must equal the first grid geometry")
        for g in self.geometries[1:]:
            if not (
                np.array_equal(g.beta_is, first.beta_is) and np.array_equal(g.theta_is, first.theta_is)
            ):
                raise InputValidationError("grid points must share in-sample loadings")
        if self.batches > self.draws:
            raise InputValidationError("cannot split draws into more batches than draws")
        return self


class GridPointResult(BaseModel):
    """Monte Carlo statistics and matched theory for one grid point"""

    experiment: str
    k: float
    z: float
    n: int
    p: int
    q: int
    mc_mean: float
    mc_se: float
    mc_vol: float
    mc_sharpe: float
    mc_sharpe_se: float = 0.0
    th_mean: Optional[float] = None
    th_vol: Optional[float] = None
    th_sharpe: Optional[float] = None
    th_error: Optional[str] = None

    @property
    def mean_gap(self) -> Optional[float]:
        return None if self.th_mean is None else self.mc_mean - self.th_mean

    @property
    def vol_gap(self) -> Optional[float]:
        if self.th_vol is None or self.th_vol == 0:
            return None
        return self.mc_vol / self.th_vol - 1.0


SIMULATION_COLUMNS = [
    "experiment", "k", "z", "n", "p", "q",
    "mc_mean", "mc_se", "mc_vol", "mc_sharpe",
    "th_mean", "th_vol", "th_sharpe",
]


class SimulationResult(BaseModel):
    """Rows of a Monte Carlo experiment"""

    rows: List[GridPointResult] = Field(default=[])
    draws: int = Field(..., ge=1)
    seed: int = Field(default=0)

    def to_frame(self, extended: bool = False) -> pd.DataFrame:
        frame = pd.DataFrame([r.model_dump() for r in self.rows])
        if frame.empty:
            return pd.DataFrame(columns=SIMULATION_COLUMNS)
        if extended:
            return frame
        return frame[SIMULATION_COLUMNS]


class ConvergenceRow(BaseModel):
    """One sample size of the convergence scan"""

    n: int
    p: int
    q: int
    z: float
    draws: int
    mc_mean: float
    mc_se: float
    th_mean: float
    gap: float


# Empirical Models
class SubPeriod(BaseModel):
    label: str
    start: date
    end: date

    @model_validator(mode="after")
    def _check(self) -> "SubPeriod":
        if self.end < self.start:
            raise InputValidationError(f"period {self.label} ends before it starts")
        return self


def default_periods() -> List[SubPeriod]:
    return [
        SubPeriod(label=f"{y}-{y + 14}", start=date(y, 1, 1), end=date(y + 14, 12, 31))
        for y in range(1930, 2020, 15)
    ]


def default_gammas() -> List[float]:
    return [round(0.1 * i, 1) for i in range(1, 51)]


class BacktestConfig(BaseModel):
    """Rolling ridge timing backtest parameters"""

    window: int = Field(default=12, ge=2, description="Training months n")
    n_features: int = Field(default=600, ge=2, description="Random features p")
    gammas: List[float] = Field(default_factory=default_gammas, min_length=1)
    z_values: List[float] = Field(default=[0.01, 100.0], min_length=1)
    draws: int = Field(default=500, ge=1)
    periods: List[SubPeriod] = Field(default_factory=default_periods)
    burn_in: int = Field(default=36, ge=2)
    seed: int = Field(default=0, ge=0)
    keep_draws: bool = Field(default=False, description="Retain per-draw return series")

    @model_validator(mode="after")
    def _check(self) -> "BacktestConfig":
        if self.n_features % 2:
            raise InputValidationError("the feature count must be even (sin/cos pairs)")
        if any(z <= 0 for z in self.z_values):
            raise InputValidationError("backtest ridge levels must be positive")
        return self

    @property
    def complexity(self) -> float:
        return self.n_features / self.window


class MacroPanel(BaseModel):
    """Monthly predictors, lagged returns and the next-month excess return"""

    frame: pd.DataFrame = Field(..., description="Indexed by month-end dates")
    predictors: List[str] = Field(..., description="Macro predictor columns")
    lags: int = Field(default=6, ge=1)

    class Config:
        arbitrary_types_allowed = True

    @property
    def dates(self) -> pd.DatetimeIndex:
        return self.frame.index

    @property
    def lag_columns(self) -> List[str]:
        return [f"mr_{k}" for k in range(1, self.lags + 1)]

    @property
    def signal_columns(self) -> List[str]:
        """Predictors plus the one-month lagged return"""
        return self.predictors + ["mr_1"]

    @property
    def target(self) -> pd.Series:
        return self.frame["target"]


class BacktestResult(BaseModel):
    """Draw-averaged monthly positions/returns and per-period aggregates"""

    label: str = Field(..., description="rff, linear or counterfactual")
    positions: pd.DataFrame = Field(..., description="Columns are (gamma, z)")
    returns: pd.DataFrame = Field(..., description="Columns are (gamma, z)")
    aggregates: pd.DataFrame = Field(..., description="period, gamma, z, mean_return, sharpe, months")
    skipped: List[date] = Field(default=[], description="Months without a full training window")
    draw_returns: Optional[np.ndarray] = Field(default=None, description="(draw, gamma, z, month)")
    config: BacktestConfig

    class Config:
        arbitrary_types_allowed = True


# Artifact Models
class RunManifest(BaseModel):
    """Everything needed to reproduce a CLI run"""

    command: str
    config: Dict[str, Any]
    seeds: Dict[str, int]
    version: str
    started_at: datetime
    wall_clock_seconds: float = Field(..., ge=0)
    outputs: Dict[str, str] = Field(default={}, description="file name -> sha256")
