"""
Data Generating Process and Estimators
======================================

Draws training samples from the drifting, misspecified linear model

    y_i = x_i' beta_is + w_i' theta_is + e_i,   r_next = x' beta_oos + w' theta_oos + e

where only x is observed, fits ridge / ridgeless loadings on x, and turns a
fitted model into a realized timing return.
"""

import logging
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import linalg

from app.core.exceptions import InputValidationError
from app.models.schemas import FittedModel, LatentDistribution, ModelSpec, SolverTag
from app.services import spectra
from app.utils.rng import Stream, stream_rng

logger = logging.getLogger(__name__)


class DrawSample(NamedTuple):
    X: np.ndarray
    W: np.ndarray
    y: np.ndarray
    x_next: np.ndarray
    w_next: np.ndarray
    r_next: float


def draw_latents(
    rng: np.random.Generator,
    shape,
    latent: LatentDistribution = LatentDistribution.GAUSSIAN,
    m4: float = 3.0,
) -> np.ndarray:
    """
    Mean-zero, unit-variance latent draws

    The discrete law puts mass 1/(2 m4) on each of -sqrt(m4), +sqrt(m4) and
    the rest on 0, giving fourth moment m4 (m4 = 1 is Rademacher).
    """
    if latent == LatentDistribution.GAUSSIAN:
        return rng.standard_normal(shape)
    if m4 < 1:
        raise InputValidationError(f"m4 must be at least 1, got {m4}")
    u = rng.random(shape)
    level = np.sqrt(m4)
    tail = 1.0 / (2.0 * m4)
    return np.where(u < tail, -level, np.where(u < 2.0 * tail, level, 0.0))


def sample(spec: ModelSpec, draw: int = 0) -> DrawSample:
    """
    One training sample plus the next-period observation

    Observed latents, independent unobserved latents and label noise each
    come from their own keyed stream, so draws are reproducible per index.

    Args:
        spec: Model specification (its seed keys the streams)
        draw: Draw index

    Returns:
        DrawSample with training (X, W, y) and next-period (x_next, w_next, r_next)
    """
    n, p, q = spec.n, spec.p, spec.q
    geom = spec.geometry
    z = draw_latents(stream_rng(spec.seed, draw, Stream.OBSERVED), (n + 1, p), spec.latent, spec.m4)
    X = z if spec.sigma_x.is_identity else z @ spectra.covariance_sqrt(spec.sigma_x)

    if q == 0:
        W = np.zeros((n + 1, 0))
    else:
        if spec.projected:
            base = z @ spec.mixing.T
        else:
            base = draw_latents(stream_rng(spec.seed, draw, Stream.UNOBSERVED), (n + 1, q), spec.latent, spec.m4)
        W = base if spec.sigma_w.is_identity else base @ spectra.covariance_sqrt(spec.sigma_w)

    e = stream_rng(spec.seed, draw, Stream.NOISE).standard_normal(n + 1)
    y = X[:n] @ geom.beta_is + W[:n] @ geom.theta_is + e[:n]
    r_next = float(X[n] @ geom.beta_oos + W[n] @ geom.theta_oos + e[n])
    return DrawSample(X=X[:n], W=W[:n], y=y, x_next=X[n], w_next=W[n], r_next=r_next)


def sample_latent(
    n: int,
    p: int,
    d: int,
    theta_is: np.ndarray,
    theta_oos: np.ndarray,
    noise_sd: float = 1.0,
    seed: int = 0,
    draw: int = 0,
) -> DrawSample:
    """
    Latent factor model: x = W f + u with W'W = (p/d) I_d, labels y = f' theta + b

    The factors f play the role of the unobserved block W in the returned sample.
    """
    if not 0 < d < p:
        raise InputValidationError(f"need 0 < d < p, got d={d}, p={p}")
    theta_is = np.asarray(theta_is, dtype=float)
    theta_oos = np.asarray(theta_oos, dtype=float)
    if theta_is.shape != (d,) or theta_oos.shape != (d,):
        raise InputValidationError(f"latent loadings must have length d={d}")
    f = stream_rng(seed, draw, Stream.UNOBSERVED).standard_normal((n + 1, d))
    u = stream_rng(seed, draw, Stream.OBSERVED).standard_normal((n + 1, p))
    X = u.copy()
    X[:, :d] += np.sqrt(p / d) * f
    b = noise_sd * stream_rng(seed, draw, Stream.NOISE).standard_normal(n + 1)
    y = f[:n] @ theta_is + b[:n]
    r_next = float(f[n] @ theta_oos + b[n])
    return DrawSample(X=X[:n], W=f[:n], y=y, x_next=X[n], w_next=f[n], r_next=r_next)


def _check_design(X: np.ndarray, y: np.ndarray) -> None:
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise InputValidationError(f"design {X.shape} and labels {y.shape} do not conform")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InputValidationError("design and labels must be finite")


def fit_ridge(X: np.ndarray, y: np.ndarray, z: float, seed: Optional[int] = None) -> FittedModel:
    """
    Ridge loadings (X'X + n z I)^{-1} X'y

    Cholesky on the smaller Gram matrix: primal when p <= n, otherwise the
    dual identity X'(XX' + n z I)^{-1} y.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_design(X, y)
    if not np.isfinite(z) or z <= 0:
        raise InputValidationError(f"ridge level must be positive, got {z}")
    n, p = X.shape
    alpha = n * z
    if p <= n:
        gram = X.T @ X
        gram[np.diag_indices_from(gram)] += alpha
        beta = linalg.cho_solve(linalg.cho_factor(gram, lower=True), X.T @ y)
        return FittedModel(beta_hat=beta, solver=SolverTag.PRIMAL, seed=seed)
    gram = X @ X.T
    gram[np.diag_indices_from(gram)] += alpha
    dual = linalg.cho_solve(linalg.cho_factor(gram, lower=True), y)
    return FittedModel(beta_hat=X.T @ dual, solver=SolverTag.DUAL, seed=seed)


def fit_ridgeless(X: np.ndarray, y: np.ndarray, seed: Optional[int] = None) -> FittedModel:
    """Minimum-norm least squares via the SVD pseudo-inverse"""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_design(X, y)
    beta, *_ = linalg.lstsq(X, y, lapack_driver="gelsd")
    return FittedModel(beta_hat=beta, solver=SolverTag.PSEUDO_INVERSE, seed=seed)


def fit_path(X: np.ndarray, y: np.ndarray, z_values: Sequence[float]) -> np.ndarray:
    """
    Ridge loadings for several ridge levels from one thin SVD

    Returns:
        Array of shape (len(z_values), p); z = 0 rows are min-norm solutions
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_design(X, y)
    n = X.shape[0]
    u, s, vt = linalg.svd(X, full_matrices=False)
    uy = u.T @ y
    cutoff = s.max(initial=0.0) * max(X.shape) * np.finfo(float).eps
    out = np.empty((len(z_values), X.shape[1]))
    for i, z in enumerate(z_values):
        if z == 0:
            gain = np.divide(1.0, s, out=np.zeros_like(s), where=s > cutoff)
        else:
            gain = s / (s * s + n * z)
        out[i] = vt.T @ (gain * uy)
    return out


def strategy_return(beta_hat: np.ndarray, x_next: np.ndarray, r_next: float) -> float:
    """Position beta_hat' x_next times the realized return"""
    return float(np.dot(beta_hat, x_next) * r_next)
