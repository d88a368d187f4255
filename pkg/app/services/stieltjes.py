"""
Stieltjes Transform Solvers
===========================

Scalar fixed points behind the ridge asymptotics. With g = m(-z) and
k(g) = 1 - c + c z g, the transform solves

    g = sum_i w_i / (lambda_i k(g) + z)

on the branch k > 0, where the right-hand side is decreasing in g and the
root is unique. The ridgeless companion s0 solves

    1 - 1/c = sum_i w_i / (1 + lambda_i c s0),    c > 1.
"""

import logging
from typing import Literal, Optional

import numpy as np
from scipy import optimize

from app.core.config import get_settings
from app.core.exceptions import DomainError, InputValidationError, SingularityError, SolverFailure
from app.models.schemas import SpectralMeasure, TransformResult

logger = logging.getLogger(__name__)


def _require_density(mu: SpectralMeasure) -> None:
    if not mu.is_density:
        raise InputValidationError("fixed-point solvers accept density measures only")


def _check_z(z: float) -> float:
    z = float(z)
    if not np.isfinite(z) or z <= 0:
        raise DomainError(f"z must be a positive finite real, got {z}")
    return z


def _check_complexity(c: float) -> float:
    c = float(c)
    tau = get_settings().COMPLEXITY_SEPARATION
    if not np.isfinite(c) or c < tau or c > 1.0 / tau:
        raise DomainError(f"complexity {c} outside [{tau}, {1.0 / tau}]")
    return c


def _phi(g: float, z: float, c: float, mu: SpectralMeasure) -> float:
    k = 1.0 - c + c * z * g
    return float(np.sum(mu.weights / (mu.lambdas * k + z)))


def solve_m(
    z: float,
    c: float,
    mu: SpectralMeasure,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
) -> TransformResult:
    """
    Solve for m(-z; c, mu)

    Damped fixed-point iteration first. When the iterate leaves the admissible
    branch or stalls, Brent's method on k = 1 - c + c z g over [max(0, 1 - c), 1],
    which is g in [max(0, (c-1)/(cz)), 1/z].

    Args:
        z: Ridge level, z > 0
        c: Complexity ratio
        mu: Density measure (ESD of the feature covariance)
        tol: Relative residual tolerance; settings.SOLVER_TOL by default
        max_iter: Iteration cap; settings.SOLVER_MAX_ITER by default

    Returns:
        TransformResult with the solution, its fixed-point defect and iteration count
    """
    z = _check_z(z)
    c = _check_complexity(c)
    _require_density(mu)
    settings = get_settings()
    tol = settings.SOLVER_TOL if tol is None else tol
    max_iter = settings.SOLVER_MAX_ITER if max_iter is None else max_iter
    alpha = settings.SOLVER_DAMPING

    g = 1.0 / (1.0 + z)
    best = np.inf
    stalled = 0
    for it in range(1, max_iter + 1):
        if 1.0 - c + c * z * g <= 0:
            break
        phi = _phi(g, z, c, mu)
        residual = abs(g - phi)
        if residual <= tol * max(1.0, abs(g)):
            return TransformResult(value=g, residual=residual, iterations=it, method="fixed_point")
        # the residual must halve at least every 50 steps
        if residual < 0.5 * best:
            best, stalled = residual, 0
        else:
            stalled += 1
            if stalled >= 50:
                break
        g = (1.0 - alpha) * g + alpha * phi

    logger.debug(f"solve_m falling back to bracketing at z={z}, c={c} after {it} iterations")

    # bracket in k = 1 - c + c z g so that g is recovered without cancellation
    def defect(k: float) -> float:
        return (k - 1.0 + c) / (c * z) - float(np.sum(mu.weights / (mu.lambdas * k + z)))

    k_root, info = optimize.brentq(
        defect,
        max(0.0, 1.0 - c),
        1.0,
        xtol=1e-300,
        rtol=4 * np.finfo(float).eps,
        maxiter=max_iter,
        full_output=True,
        disp=False,
    )
    root = (k_root - 1.0 + c) / (c * z)
    residual = abs(defect(k_root))
    if not info.converged or residual > tol * max(1.0, abs(root)):
        raise SolverFailure(
            f"m(-z) did not converge for z={z}, c={c}",
            residual=float(residual),
            iterations=it + info.iterations,
        )
    return TransformResult(
        value=float(root), residual=float(residual), iterations=it + info.iterations, method="brent"
    )


def m_closed_iid(z: float, c: float) -> float:
    """Closed form of m(-z; c) for identity covariance, positive branch"""
    z = _check_z(z)
    if c <= 0:
        raise DomainError(f"complexity must be positive, got {c}")
    b = 1.0 - c + z
    disc = np.sqrt(b * b + 4.0 * c * z)
    if b > 0:
        return float(2.0 / (b + disc))
    return float((disc - b) / (2.0 * c * z))


def m_prime(
    z: float,
    c: float,
    mu: SpectralMeasure,
    m: Optional[float] = None,
    method: Literal["analytic", "finite_difference"] = "analytic",
) -> float:
    """
    Derivative m'(-z), i.e. d m(x)/dx at x = -z; nonnegative

    The analytic path differentiates the fixed point implicitly. The finite
    difference path uses a 5-point central stencil with h = max(1e-6, 1e-4 z).
    """
    z = _check_z(z)
    if method == "finite_difference":
        h = max(1e-6, 1e-4 * z)
        if z - 2 * h <= 0:
            h = z / 4.0
        g = [solve_m(z + s * h, c, mu).value for s in (2, 1, -1, -2)]
        dg_dz = (-g[0] + 8 * g[1] - 8 * g[2] + g[3]) / (12 * h)
        return float(-dg_dz)

    if m is None:
        m = solve_m(z, c, mu).value
    k = 1.0 - c + c * z * m
    den = mu.lambdas * k + z
    if np.any(den <= 0):
        raise SingularityError("nonpositive resolvent denominator", atom=float(mu.lambdas[np.argmin(den)]))
    num = np.sum(mu.weights * (mu.lambdas * c * m + 1.0) / den**2)
    jac = 1.0 + c * z * np.sum(mu.weights * mu.lambdas / den**2)
    return float(num / jac)


def m1(z: float, cphi: float, mu: SpectralMeasure, m: float) -> float:
    """
    Ratio of spectral integrals m1(-z) entering the general leverage

    m1 = int lambda^2 k/(lambda k + z)^2 dmu / (1 + cphi z int lambda/(lambda k + z)^2 dmu)
    """
    z = _check_z(z)
    k = 1.0 - cphi + cphi * z * m
    den = mu.lambdas * k + z
    if np.any(den <= 0):
        raise SingularityError("nonpositive resolvent denominator", atom=float(mu.lambdas[np.argmin(den)]))
    num = np.sum(mu.weights * mu.lambdas**2 * k / den**2)
    denom = 1.0 + cphi * z * np.sum(mu.weights * mu.lambdas / den**2) / mu.total_mass
    if denom <= 0:
        raise SingularityError("m1 denominator vanished")
    return float(num / mu.total_mass / denom)


def m1_closed_iid(z: float, cphi: float, m: Optional[float] = None) -> float:
    """m1(-z) for identity covariance: k / ((k + z)^2 + cphi z)"""
    if m is None:
        m = m_closed_iid(z, cphi)
    k = 1.0 - cphi + cphi * z * m
    return float(k / ((k + z) ** 2 + cphi * z))


def solve_s0(c: float, mu: SpectralMeasure, tol: Optional[float] = None) -> TransformResult:
    """
    Solve for the ridgeless companion s0(c, mu), defined for c > 1 only

    Raises:
        DomainError: c <= 1 or c within the separation tau of the threshold
        SolverFailure: no bracket could be formed or the residual stayed large
    """
    _require_density(mu)
    c = float(c)
    settings = get_settings()
    tau = settings.COMPLEXITY_SEPARATION
    tol = settings.SOLVER_TOL if tol is None else tol
    if c <= 1.0:
        raise DomainError(f"s0 exists only for c > 1, got c={c}")
    if abs(c - 1.0) < tau:
        raise DomainError(f"c={c} is within {tau} of the interpolation threshold")

    target = 1.0 - 1.0 / c

    def excess(s: float) -> float:
        return float(np.sum(mu.weights / (1.0 + mu.lambdas * c * s))) - target

    hi = 1.0
    doublings = 0
    while excess(hi) > 0:
        hi *= 2.0
        doublings += 1
        if doublings > 1100 or not np.isfinite(hi):
            raise SolverFailure(
                f"could not bracket s0 for c={c}; the null mass of mu is too large",
                residual=excess(hi) if np.isfinite(hi) else float("inf"),
                iterations=doublings,
            )
    root, info = optimize.brentq(
        excess, 0.0, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=settings.SOLVER_MAX_ITER,
        full_output=True, disp=False,
    )
    residual = abs(excess(root))
    if not info.converged or residual > tol * max(1.0, target):
        raise SolverFailure(f"s0 did not converge for c={c}", residual=residual, iterations=info.iterations)
    return TransformResult(
        value=float(root), residual=float(residual), iterations=doublings + info.iterations, method="brent"
    )


def s0_closed_iid(c: float) -> float:
    """Ridgeless s0 for Sigma = I: 1 / (c (c - 1)), defined for c > 1"""
    if c <= 1:
        raise DomainError(f"s0 exists only for c > 1, got c={c}")
    return 1.0 / (c * (c - 1.0))


def s0_prime(cphi: float, mu: SpectralMeasure, s0: float) -> float:
    """int lambda^2/(1 + cphi s0 lambda)^2 dmu / int lambda/(1 + cphi s0 lambda)^2 dmu"""
    den = (1.0 + cphi * s0 * mu.lambdas) ** 2
    bottom = float(np.sum(mu.weights * mu.lambdas / den))
    if bottom <= 0:
        raise SingularityError("s0' denominator is not positive")
    return float(np.sum(mu.weights * mu.lambdas**2 / den)) / bottom


def companion_r(z: float, c: float, mu: SpectralMeasure, m: Optional[float] = None) -> float:
    """Companion transform r = c m + (1 - c)/z"""
    if m is None:
        m = solve_m(z, c, mu).value
    return c * m + (1.0 - c) / z
