"""
Spectral Measures
=================

Empirical spectral distributions of population covariances, vector-weighted
(possibly signed) spectral distributions, and the integrals the asymptotic
formulas consume. All measures are finite sums of atoms.
"""

import logging
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from app.core.config import get_settings
from app.core.exceptions import DomainError, InputValidationError, SingularityError
from app.models.schemas import (
    CovarianceKind,
    CovarianceSpec,
    EigenSystem,
    MeasureKind,
    ModelSpec,
    SpectralMeasure,
)

logger = logging.getLogger(__name__)


def covariance_matrix(sigma: CovarianceSpec) -> np.ndarray:
    """Dense p x p matrix of a covariance spec"""
    if sigma.kind == CovarianceKind.IDENTITY:
        return np.eye(sigma.dim)
    if sigma.kind == CovarianceKind.AUTOREGRESSIVE:
        return linalg.toeplitz(sigma.rho ** np.arange(sigma.dim))
    return np.array(sigma.matrix)


def _decompose(matrix: np.ndarray) -> EigenSystem:
    values, vectors = linalg.eigh(matrix)
    values, vectors = values[::-1].copy(), vectors[:, ::-1].copy()
    scale = max(1.0, float(np.abs(values).max()))
    if values.min() < -1e-10 * scale:
        raise InputValidationError(f"matrix is not positive semidefinite (min eigenvalue {values.min():.3e})")
    values = np.clip(values, 0.0, None)
    values.setflags(write=False)
    vectors.setflags(write=False)
    return EigenSystem(values=values, vectors=vectors)


@lru_cache(maxsize=32)
def _structured_eigensystem(kind: str, dim: int, rho: Optional[float]) -> EigenSystem:
    if kind == CovarianceKind.IDENTITY.value:
        values = np.ones(dim)
        vectors = np.eye(dim)
        values.setflags(write=False)
        vectors.setflags(write=False)
        return EigenSystem(values=values, vectors=vectors)
    return _decompose(linalg.toeplitz(rho ** np.arange(dim)))


def eigensystem(sigma: CovarianceSpec) -> EigenSystem:
    """Eigenvalues (descending) and orthonormal eigenvectors of a covariance spec"""
    key = sigma.cache_key()
    if key is not None:
        return _structured_eigensystem(*key)
    return _decompose(sigma.matrix)


def _sqrt_from(eig: EigenSystem) -> np.ndarray:
    root = (eig.vectors * np.sqrt(eig.values)) @ eig.vectors.T
    root = (root + root.T) / 2
    root.setflags(write=False)
    return root


@lru_cache(maxsize=32)
def _structured_sqrt(kind: str, dim: int, rho: Optional[float]) -> np.ndarray:
    return _sqrt_from(_structured_eigensystem(kind, dim, rho))


def covariance_sqrt(sigma: CovarianceSpec) -> np.ndarray:
    """Symmetric square root Sigma^{1/2} (read-only for structured kinds)"""
    if sigma.is_identity:
        return np.eye(sigma.dim)
    key = sigma.cache_key()
    if key is not None:
        return _structured_sqrt(*key)
    return _sqrt_from(eigensystem(sigma))


def merge_atoms(
    lambdas: np.ndarray, weights: np.ndarray, rtol: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Merge atoms whose locations agree to a relative tolerance

    Args:
        lambdas: Atom locations
        weights: Atom weights
        rtol: Relative merge tolerance; settings.ATOM_MERGE_RTOL by default

    Returns:
        Sorted unique locations and the summed weights
    """
    rtol = get_settings().ATOM_MERGE_RTOL if rtol is None else rtol
    order = np.argsort(lambdas, kind="stable")
    lam = np.asarray(lambdas, dtype=float)[order]
    wts = np.asarray(weights, dtype=float)[order]
    gaps = np.diff(lam)
    scale = np.maximum(np.maximum(np.abs(lam[:-1]), np.abs(lam[1:])), np.finfo(float).tiny)
    new_group = np.concatenate([[True], gaps > rtol * scale])
    ids = np.cumsum(new_group) - 1
    return lam[new_group], np.bincount(ids, weights=wts)


def esd(sigma: CovarianceSpec) -> SpectralMeasure:
    """Empirical spectral distribution: atoms (lambda_i, 1/p)"""
    if sigma.is_identity:
        return SpectralMeasure.point_mass(1.0)
    eig = eigensystem(sigma)
    lam, counts = merge_atoms(eig.values, np.ones(sigma.dim))
    return SpectralMeasure(lambdas=lam, weights=counts / sigma.dim)


def vesd_from_eigensystem(eig: EigenSystem, u: np.ndarray, v: np.ndarray) -> SpectralMeasure:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != (eig.values.size,) or v.shape != u.shape:
        raise InputValidationError(f"vectors must have length {eig.values.size}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise InputValidationError("vector-weighted spectra need nonzero vectors")
    weights = (eig.vectors.T @ u) * (eig.vectors.T @ v) / (nu * nv)
    lam, wts = merge_atoms(eig.values, weights)
    return SpectralMeasure(lambdas=lam, weights=wts, kind=MeasureKind.SIGNED)


def vesd(sigma: CovarianceSpec, u: np.ndarray, v: np.ndarray) -> SpectralMeasure:
    """
    Vector-weighted spectral distribution

    Atoms (lambda_i, <u, v_i><v_i, v>/(|u||v|)); a signed measure in general,
    a probability measure when u = v.
    """
    if sigma.is_identity:
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        if u.shape != (sigma.dim,) or v.shape != u.shape:
            raise InputValidationError(f"vectors must have length {sigma.dim}")
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0 or nv == 0:
            raise InputValidationError("vector-weighted spectra need nonzero vectors")
        return SpectralMeasure(lambdas=[1.0], weights=[float(u @ v) / (nu * nv)], kind=MeasureKind.SIGNED)
    return vesd_from_eigensystem(eigensystem(sigma), u, v)


def integrate(f: Callable[[np.ndarray], np.ndarray], mu: SpectralMeasure) -> float:
    """
    Integral of f against a discrete measure, sum_i w_i f(lambda_i)

    Raises:
        SingularityError: f is not finite at some atom
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        values = np.broadcast_to(np.asarray(f(mu.lambdas), dtype=float), mu.lambdas.shape)
    bad = ~np.isfinite(values)
    if bad.any():
        atom = float(mu.lambdas[np.argmax(bad)])
        raise SingularityError(f"integrand is not finite at atom lambda={atom}", atom=atom)
    return float(np.sum(mu.weights * values))


def omega_parts(spec: ModelSpec) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Observed and unobserved contributions to the latent-space loadings

    Returns:
        (a_is, a_oos, b_is, b_oos) with a = Sigma_x^{1/2} beta and
        b = P' Sigma_w^{1/2} theta (zero when w has its own latents)
    """
    geom = spec.geometry
    root_x = covariance_sqrt(spec.sigma_x)
    a_is, a_oos = root_x @ geom.beta_is, root_x @ geom.beta_oos
    if spec.projected and spec.q > 0:
        mixed = spec.mixing.T @ covariance_sqrt(spec.sigma_w)
        b_is, b_oos = mixed @ geom.theta_is, mixed @ geom.theta_oos
    else:
        b_is, b_oos = np.zeros(spec.p), np.zeros(spec.p)
    return a_is, a_oos, b_is, b_oos


def omega_vectors(spec: ModelSpec) -> Tuple[np.ndarray, np.ndarray]:
    """omega_u = Sigma_x^{1/2} beta_u + P' Sigma_w^{1/2} theta_u for u in {is, oos}"""
    a_is, a_oos, b_is, b_oos = omega_parts(spec)
    return a_is + b_is, a_oos + b_oos


def noise_levels(spec: ModelSpec) -> Tuple[float, float]:
    """
    Variance of the part of the label the observed features cannot explain

    Unit in the projected mode. With independent unobserved features the
    omitted signal adds theta' Sigma_w theta to the unit noise.
    """
    if spec.projected or spec.q == 0:
        return 1.0, 1.0
    sw = covariance_matrix(spec.sigma_w)
    geom = spec.geometry
    return (
        1.0 + float(geom.theta_is @ sw @ geom.theta_is),
        1.0 + float(geom.theta_oos @ sw @ geom.theta_oos),
    )


def varpi_measures(
    eig: EigenSystem,
    omega_is: np.ndarray,
    omega_oos: np.ndarray,
    filters: Sequence[np.ndarray],
) -> List[SpectralMeasure]:
    """
    Spectral distributions of omega_is against F D^2 F, one per filter

    Each filter holds spectral multipliers h(lambda_i) defining
    F = V diag(h) V'; D = diag(omega_oos) in latent coordinates.

    Raises:
        DomainError: dimension above settings.VARPI_MAX_DIM
    """
    p = eig.values.size
    cap = get_settings().VARPI_MAX_DIM
    if p > cap:
        raise DomainError(f"explicit varpi construction is capped at p={cap}, got p={p}")
    d2 = np.asarray(omega_oos, dtype=float) ** 2
    measures = []
    for h in filters:
        f = (eig.vectors * h) @ eig.vectors.T
        m = (f * d2) @ f
        measures.append(vesd_from_eigensystem(_decompose((m + m.T) / 2), omega_is, omega_is))
    return measures


def latent_measure(upsilon: float) -> SpectralMeasure:
    """Two-atom ESD of the latent-factor covariance: Upsilon at 1 + 1/Upsilon, rest at 1"""
    if not 0.0 < upsilon < 1.0:
        raise DomainError(f"Upsilon must lie in (0, 1), got {upsilon}")
    return SpectralMeasure(lambdas=[1.0, 1.0 + 1.0 / upsilon], weights=[1.0 - upsilon, upsilon])
