"""
Asymptotic Strategy Theory
==========================

Closed-form and spectral-integral limits of the ridge timing strategy
pi = beta_hat' x, realized return pi * r, when the loadings drift from
(beta_is, theta_is) in training to (beta_oos, theta_oos) when trading.

Two families:
- isotropic features (Sigma = I): scalar formulas in z and cphi = p/n
- general covariance: integrals against the ESD of Sigma_x and the
  vector-weighted spectra of the latent loadings omega_is, omega_oos

Ridgeless (z = 0) is always its own code path, built from s0 and s0'.
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core.config import get_settings
from app.core.exceptions import DomainError, InputValidationError, NumericalInconsistencyError
from app.models.schemas import (
    DriftGeometry,
    EigenSystem,
    ModelSpec,
    Regime,
    SpectralMeasure,
    StrategyMoments,
)
from app.services import spectra, stieltjes

logger = logging.getLogger(__name__)

_DUAL_PATH_RTOL = 1e-10


def _check_ridge_level(z: float) -> float:
    z = float(z)
    if not np.isfinite(z) or z < 0:
        raise DomainError(f"z must be finite and nonnegative, got {z}")
    return z


def _check_ridgeless_complexity(cphi: float) -> None:
    if cphi == 1.0:
        raise DomainError("the ridgeless limit is undefined at the interpolation threshold cphi = 1")


# Prediction risk
def prediction_risk(c: float, geom: DriftGeometry, sigma_sq: float = 1.0) -> float:
    """
    Limiting out-of-sample prediction risk of min-norm least squares, Sigma = I

    Args:
        c: Complexity p/n of the fitted model
        geom: Drift geometry
        sigma_sq: Label noise variance

    Returns:
        Risk excluding the irreducible label noise of the test point
    """
    if c <= 0:
        raise DomainError(f"complexity must be positive, got {c}")
    if c == 1.0:
        raise DomainError("prediction risk diverges at c = 1")
    noise = sigma_sq + geom.theta_is_sq
    if c < 1:
        return noise * c / (1.0 - c) + geom.drift_sq + geom.theta_oos_sq
    return noise / (c - 1.0) + geom.drift_sq / c + (1.0 - 1.0 / c) * geom.norm_oos_sq + geom.theta_oos_sq


# Isotropic features
def _iid_coefficients(z: float, cphi: float) -> Dict[str, float]:
    """
    f: mean shrinkage, b: bias coefficient of ||beta_is||^2 in the leverage,
    H: noise coefficient of the leverage
    """
    z = _check_ridge_level(z)
    if cphi <= 0:
        raise DomainError(f"cphi must be positive, got {cphi}")
    if z == 0:
        _check_ridgeless_complexity(cphi)
        if cphi < 1:
            return {"f": 1.0, "b": 1.0, "H": cphi / (1.0 - cphi)}
        return {"f": 1.0 / cphi, "b": 1.0 / cphi, "H": 1.0 / (cphi - 1.0)}
    m = stieltjes.m_closed_iid(z, cphi)
    k = 1.0 - cphi + cphi * z * m
    mp = (1.0 + cphi * m) / ((k + z) ** 2 + cphi * z)
    f = max(0.0, 1.0 - z * m)
    b = max(0.0, 1.0 - 2.0 * z * m + z * z * mp)
    H = max(0.0, cphi * (m - z * mp))
    return {"f": f, "b": b, "H": H}


def f_iid(z: float, cphi: float) -> float:
    """Shrinkage factor f(z; cphi) = 1 - z m(-z; cphi); ridgeless 1 or 1/cphi"""
    return _iid_coefficients(z, cphi)["f"]


def expected_return_iid(z: float, cphi: float, geom: DriftGeometry) -> float:
    """f(z; cphi) <beta_is, beta_oos>"""
    return f_iid(z, cphi) * geom.inner


def expected_return_no_drift(z: float, cphi: float, geom: DriftGeometry) -> float:
    """Expected return had the trading loadings stayed at their training values"""
    return f_iid(z, cphi) * geom.norm_is_sq


def leverage_iid(z: float, cphi: float, geom: DriftGeometry) -> float:
    """E[pi^2] = b ||beta_is||^2 + (1 + ||theta_is||^2) H"""
    co = _iid_coefficients(z, cphi)
    return co["b"] * geom.norm_is_sq + (1.0 + geom.theta_is_sq) * co["H"]


def kurtosis_coefficient_iid(z: float, cphi: float, geom: DriftGeometry) -> float:
    """Coefficient of (m4 - 3) in the return variance"""
    return _iid_coefficients(z, cphi)["b"] * geom.hadamard_norm


def _assemble(
    mean: float,
    leverage: float,
    kurtosis: float,
    sigma_oos_sq: float,
    omega_oos_sq: float,
    m4: float,
    z: float,
) -> StrategyMoments:
    if m4 < 1:
        raise InputValidationError(f"m4 must be at least 1, got {m4}")
    excess = (m4 - 3.0) * kurtosis
    variance = (sigma_oos_sq + omega_oos_sq) * leverage + mean**2 + excess
    # second moment: label noise, signal-position covariance, then fourth-moment terms
    second = sigma_oos_sq * leverage + (omega_oos_sq * leverage + 2.0 * mean**2 + excess)
    if abs((second - mean**2) - variance) > _DUAL_PATH_RTOL * max(1.0, abs(second)):
        raise NumericalInconsistencyError(
            "variance and second-moment paths disagree", variance=variance, second_moment=second
        )
    if variance < 0:
        raise NumericalInconsistencyError(
            f"computed variance {variance:.6g} is negative", variance=variance, m4=m4
        )
    return StrategyMoments(
        mean=mean,
        variance=variance,
        leverage=leverage,
        kurtosis_term=kurtosis,
        second_moment=second,
        regime=Regime.RIDGELESS if z == 0 else Regime.RIDGE,
        z=z,
    )


def strategy_moments_iid(z: float, cphi: float, geom: DriftGeometry, m4: float = 3.0) -> StrategyMoments:
    mean = expected_return_iid(z, cphi, geom)
    return _assemble(
        mean=mean,
        leverage=leverage_iid(z, cphi, geom),
        kurtosis=kurtosis_coefficient_iid(z, cphi, geom),
        sigma_oos_sq=1.0 + geom.theta_oos_sq,
        omega_oos_sq=geom.norm_oos_sq,
        m4=m4,
        z=float(z),
    )


def variance_iid(z: float, cphi: float, geom: DriftGeometry, m4: float = 3.0) -> Tuple[float, float]:
    """
    Return variance and leverage of the strategy under isotropic features

    variance = (1 + S_oos) L + E^2 + (m4 - 3) b ||beta_is o beta_oos||^2
    """
    moments = strategy_moments_iid(z, cphi, geom, m4)
    return moments.variance, moments.leverage


def sharpe_iid(z: float, cphi: float, geom: DriftGeometry, m4: float = 3.0) -> float:
    if z > 0 and f_iid(z, cphi) < 1e-12:
        raise DomainError(f"shrinkage factor vanished at z={z}; the Sharpe ratio has no stable limit")
    moments = strategy_moments_iid(z, cphi, geom, m4)
    if moments.variance == 0:
        raise DomainError("zero return variance, Sharpe ratio undefined")
    return moments.mean / np.sqrt(moments.variance)


# General covariance
def h_kernel(
    lam: np.ndarray,
    z: float,
    cphi: float,
    mu: SpectralMeasure,
    m: Optional[float] = None,
    s0: Optional[float] = None,
) -> np.ndarray:
    """
    Spectral filter h(lambda) mapping population to limiting estimated loadings

    Ridge: 1 - z/(lambda k + z), k = 1 - cphi + cphi z m. Ridgeless: 1 for
    cphi < 1 and 1 - 1/(1 + lambda cphi s0) for cphi > 1.
    """
    z = _check_ridge_level(z)
    lam = np.asarray(lam, dtype=float)
    if z == 0:
        _check_ridgeless_complexity(cphi)
        if cphi < 1:
            return np.ones_like(lam)
        if s0 is None:
            s0 = stieltjes.solve_s0(cphi, mu).value
        return lam * cphi * s0 / (1.0 + lam * cphi * s0)
    if m is None:
        m = stieltjes.solve_m(z, cphi, mu).value
    k = 1.0 - cphi + cphi * z * m
    den = lam * k + z
    if np.any(den <= 0):
        raise DomainError(f"nonpositive denominator in h at z={z}")
    return lam * k / den


class _GeneralState:
    """Spectral ingredients shared by every general-covariance formula at one (z, cphi)"""

    def __init__(self, z: float, cphi: float, spec: ModelSpec):
        self.z = _check_ridge_level(z)
        self.cphi = float(spec.cphi if cphi is None else cphi)
        if self.cphi <= 0:
            raise DomainError(f"cphi must be positive, got {self.cphi}")
        self.spec = spec
        self.eig: EigenSystem = spectra.eigensystem(spec.sigma_x)
        self.mu = spectra.esd(spec.sigma_x)
        self.omega_is, self.omega_oos = spectra.omega_vectors(spec)
        self.sigma_is_sq, self.sigma_oos_sq = spectra.noise_levels(spec)
        self.m: Optional[float] = None
        self.s0: Optional[float] = None
        if self.z > 0:
            self.m = stieltjes.solve_m(self.z, self.cphi, self.mu).value
            self.k = 1.0 - self.cphi + self.cphi * self.z * self.m
        else:
            _check_ridgeless_complexity(self.cphi)
            if self.cphi > 1:
                self.s0 = stieltjes.solve_s0(self.cphi, self.mu).value

    def h(self, lam: np.ndarray) -> np.ndarray:
        return h_kernel(lam, self.z, self.cphi, self.mu, m=self.m, s0=self.s0)


def _measure_term(sigma, u: np.ndarray, v: np.ndarray, f) -> float:
    """|u||v| int f d(vesd of u, v); zero when either vector is zero"""
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return nu * nv * spectra.integrate(f, spectra.vesd(sigma, u, v))


def expected_return_general(z: float, cphi: Optional[float], spec: ModelSpec) -> float:
    """|omega_is||omega_oos| int h d iota_d"""
    state = _GeneralState(z, cphi, spec)
    return _measure_term(spec.sigma_x, state.omega_is, state.omega_oos, state.h)


def expected_return_wellspecified(z: float, cphi: Optional[float], spec: ModelSpec) -> float:
    """Observed-loading part |beta_is||beta_oos| int h lambda d zeta_d"""
    state = _GeneralState(z, cphi, spec)
    geom = spec.geometry
    return _measure_term(spec.sigma_x, geom.beta_is, geom.beta_oos, lambda lam: state.h(lam) * lam)


def misspecification_terms(z: float, cphi: Optional[float], spec: ModelSpec) -> Tuple[float, float, float]:
    """
    Cross terms between observed loadings and the projected unobserved loadings

    J1 = |beta_oos||b_is| int h sqrt(lambda) d eta
    J2 = |b_oos||b_is| int h d nu
    J3 = |b_oos||beta_is| int h sqrt(lambda) d psi
    with b_u = P' Sigma_w^{1/2} theta_u.
    """
    state = _GeneralState(z, cphi, spec)
    geom = spec.geometry
    _, _, b_is, b_oos = spectra.omega_parts(spec)

    def root_h(lam):
        return state.h(lam) * np.sqrt(lam)

    j1 = _measure_term(spec.sigma_x, geom.beta_oos, b_is, root_h)
    j2 = _measure_term(spec.sigma_x, b_oos, b_is, state.h)
    j3 = _measure_term(spec.sigma_x, b_oos, geom.beta_is, root_h)
    return j1, j2, j3


def _quadratic_filtered(state: _GeneralState, filters: Sequence[np.ndarray]) -> Tuple[float, ...]:
    """omega_is' F D^2 F omega_is for each spectral filter, via varpi measures when affordable"""
    omega = state.omega_is
    norm_sq = float(omega @ omega)
    if norm_sq == 0:
        return tuple(0.0 for _ in filters)
    if state.eig.values.size <= get_settings().VARPI_MAX_DIM:
        measures = spectra.varpi_measures(state.eig, omega, state.omega_oos, filters)
        return tuple(norm_sq * spectra.integrate(lambda lam: lam, w) for w in measures)
    coords = state.eig.vectors.T @ omega
    out = []
    for h in filters:
        filtered = state.eig.vectors @ (h * coords)
        out.append(float(np.sum((state.omega_oos * filtered) ** 2)))
    return tuple(out)


def _general_leverage_and_kurtosis(state: _GeneralState) -> Tuple[float, float]:
    lam = state.eig.values
    coords_sq = (state.eig.vectors.T @ state.omega_is) ** 2
    cphi, z = state.cphi, state.z

    if z > 0:
        mu, m, k = state.mu, state.m, state.k
        m1 = stieltjes.m1(z, cphi, mu, m)
        mp = stieltjes.m_prime(z, cphi, mu, m)
        bias = float(np.sum(coords_sq * (z * z * cphi * m1 + lam**2 * k**2) / (z + lam * k) ** 2))
        noise = cphi * spectra.integrate(
            lambda x: x**2 * (1.0 - cphi + cphi * z * z * mp) / (z + x * k) ** 2, mu
        )
        leverage = bias + state.sigma_is_sq * noise
        left, right = _quadratic_filtered(state, [lam * k / (lam * k + z), 1.0 / (lam * k + z)])
        kurtosis = left + cphi * z * z * m1 * right
        return leverage, kurtosis

    if cphi < 1:
        leverage = float(state.omega_is @ state.omega_is) + state.sigma_is_sq * cphi / (1.0 - cphi)
        kurtosis = float(np.sum((state.omega_is * state.omega_oos) ** 2))
        return leverage, kurtosis

    a = cphi * state.s0
    v0 = a * stieltjes.s0_prime(cphi, state.mu, state.s0)
    inv = 1.0 / (1.0 + a * lam)
    bias = float(np.sum(coords_sq * (1.0 + (1.0 + v0) * inv**2 - 2.0 * inv)))
    leverage = bias + state.sigma_is_sq * v0
    left, right = _quadratic_filtered(state, [1.0 - inv, inv])
    return leverage, left + v0 * right


def variance_general(
    z: float, cphi: Optional[float], spec: ModelSpec, m4: float = 3.0
) -> Tuple[float, float, float]:
    """
    Return variance, leverage and kurtosis coefficient K under a general covariance

    variance = (sigma_oos^2 + |omega_oos|^2) L + E^2 + (m4 - 3) K
    """
    moments = strategy_moments_general(z, cphi, spec, m4)
    return moments.variance, moments.leverage, moments.kurtosis_term


def second_moment_general(z: float, cphi: Optional[float], spec: ModelSpec, m4: float = 3.0) -> float:
    return strategy_moments_general(z, cphi, spec, m4).second_moment


def strategy_moments_general(
    z: float, cphi: Optional[float], spec: ModelSpec, m4: float = 3.0
) -> StrategyMoments:
    state = _GeneralState(z, cphi, spec)
    mean = _measure_term(spec.sigma_x, state.omega_is, state.omega_oos, state.h)
    leverage, kurtosis = _general_leverage_and_kurtosis(state)
    return _assemble(
        mean=mean,
        leverage=leverage,
        kurtosis=kurtosis,
        sigma_oos_sq=state.sigma_oos_sq,
        omega_oos_sq=float(state.omega_oos @ state.omega_oos),
        m4=m4,
        z=state.z,
    )


def sharpe_general(z: float, cphi: Optional[float], spec: ModelSpec, m4: float = 3.0) -> float:
    moments = strategy_moments_general(z, cphi, spec, m4)
    if moments.variance == 0:
        raise DomainError("zero return variance, Sharpe ratio undefined")
    return moments.sharpe


# Latent factor model
def latent_g(z: float, c: float, upsilon: float) -> float:
    """
    Return multiplier g(z; c, Upsilon) of <theta_is, theta_oos> when labels load on
    d latent factors seen through p noisy features, Upsilon = d/p
    """
    z = _check_ridge_level(z)
    mu = spectra.latent_measure(upsilon)
    top = 1.0 + 1.0 / upsilon
    scale = 1.0 / (1.0 + upsilon)
    if z == 0:
        _check_ridgeless_complexity(c)
        if c < 1:
            return scale
        s0 = stieltjes.solve_s0(c, mu).value
        return scale * (1.0 - 1.0 / (1.0 + top * c * s0))
    m = stieltjes.solve_m(z, c, mu).value
    k = 1.0 - c + c * z * m
    return scale * (1.0 - z / (top * k + z))


# Drift diagnostics
def linear_drift_return(z: float, cphi: float, beta_is: np.ndarray, W: np.ndarray) -> float:
    """
    Expected return when the trading loadings are a linear image W beta_is

    Symmetric W is also evaluated through its eigenpairs,
    f sum_k xi_k cos^2(beta_is, v_k) |beta_is|^2, and the two must agree.
    """
    beta_is = np.asarray(beta_is, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.shape != (beta_is.size, beta_is.size):
        raise InputValidationError(f"W must be {beta_is.size}x{beta_is.size}")
    f = f_iid(z, cphi)
    direct = f * float(beta_is @ W @ beta_is)
    if np.allclose(W, W.T, atol=1e-12):
        xi, vecs = np.linalg.eigh(W)
        norm_sq = float(beta_is @ beta_is)
        if norm_sq > 0:
            cos_sq = (vecs.T @ beta_is) ** 2 / norm_sq
            spectral = f * float(np.sum(xi * cos_sq)) * norm_sq
            if abs(spectral - direct) > 1e-9 * max(1.0, abs(direct)):
                raise NumericalInconsistencyError(
                    "eigen decomposition of the drift map disagrees with the direct form"
                )
    return direct


def drift_hurts(geom: DriftGeometry) -> bool:
    """True iff the drift points against the training loadings, <beta_oos - beta_is, beta_is> < 0"""
    projection = float(geom.drift @ geom.beta_is)
    by_projection = projection < 0
    by_norms = geom.norm_oos_sq - geom.norm_is_sq < geom.drift_sq
    if by_projection != by_norms:
        scale = max(geom.norm_is_sq, geom.norm_oos_sq, geom.drift_sq, 1e-300)
        if abs(projection) > 1e-12 * scale:
            raise NumericalInconsistencyError("drift criteria disagree", projection=projection)
    return by_projection


# Sweeps
def equidistributed(dim: int, norm_sq: float) -> np.ndarray:
    """Vector with equal entries and the requested squared norm"""
    if dim == 0:
        return np.zeros(0)
    return np.full(dim, np.sqrt(norm_sq / dim))


def sharpe_curve(
    signals: Sequence[float],
    z: float,
    c: float,
    cphi_grid: Sequence[float],
    n: int = 1000,
    k: float = 1.0,
    m4: float = 3.0,
) -> pd.DataFrame:
    """
    Sharpe ratio against observed complexity for several total signal levels

    Total signal S splits as |beta_is|^2 = S cphi/c and |theta_is|^2 = S (1 - cphi/c);
    the trading loadings are k times the training loadings.
    """
    if not signals or not cphi_grid:
        raise InputValidationError("signal and complexity grids must be non-empty")
    total = int(round(c * n))
    rows = []
    for signal in signals:
        for cphi in cphi_grid:
            if not 0 < cphi <= c:
                raise InputValidationError(f"cphi must lie in (0, c], got {cphi}")
            p = max(1, int(round(cphi * n)))
            q = max(0, total - p)
            beta = equidistributed(p, signal * cphi / c)
            theta = equidistributed(q, signal * (1.0 - cphi / c))
            geom = DriftGeometry(beta_is=beta, beta_oos=k * beta, theta_is=theta, theta_oos=k * theta)
            row = {"signal": signal, "cphi": cphi, "z": z, "k": k, "p": p, "q": q}
            try:
                moments = strategy_moments_iid(z, cphi, geom, m4)
                row.update(mean=moments.mean, vol=moments.volatility, sharpe=moments.sharpe, error=None)
            except DomainError as e:
                logger.warning(f"sharpe curve point cphi={cphi} signal={signal} skipped: {e.message}")
                row.update(mean=np.nan, vol=np.nan, sharpe=np.nan, error=e.message)
            rows.append(row)
    return pd.DataFrame(rows)
