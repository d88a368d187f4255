"""
Monte Carlo Service
===================

Simulates the timing strategy on grids of drift geometries and ridge levels
and sets the simulated moments next to the asymptotic ones.

Draws are split into contiguous batches. Each batch is an independent job
(joblib), every draw reads its own keyed random streams, and batch moments
are merged in batch order, so results do not depend on the worker count.
Within a draw the training sample and the fit are shared by all grid points;
only the next-period return changes with the trading loadings.
"""

import logging
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from app.core.config import get_settings
from app.core.exceptions import DriftLabError, InputValidationError
from app.models.schemas import (
    ConvergenceRow,
    CovarianceSpec,
    DriftGeometry,
    ExperimentGrid,
    GridPointResult,
    LatentDistribution,
    ModelSpec,
    SimulationResult,
    StrategyMoments,
    SweepAxis,
)
from app.services import dgp, theory
from app.utils.accumulators import RunningMoments

logger = logging.getLogger(__name__)

PROTOCOLS = ("iid-proportional", "iid-concentrated", "ar-proportional", "ar-concentrated")
# alternative names accepted on the command line
PROTOCOL_ALIASES = {
    "s3-proportional": "iid-proportional",
    "s3-concentrated": "iid-concentrated",
    "appendix-ar": "ar-proportional",
    "appendix-ar-concentrated": "ar-concentrated",
}
DRIFT_LEVELS = [0.2, 0.4, 0.6, 0.8, 1.0]
CONCENTRATION_LEVELS = [1, 2, 3, 4, 5]
PANEL_SIZES = (50, 200, 300)


# Geometries
def proportional_geometry(p: int, q: int, k: float) -> DriftGeometry:
    """Unit-signal equidistributed loadings, trading loadings scaled by k"""
    beta = theory.equidistributed(p, 1.0)
    theta = theory.equidistributed(q, 1.0)
    return DriftGeometry(beta_is=beta, beta_oos=k * beta, theta_is=theta, theta_oos=k * theta)


def concentrated_vector(dim: int, fraction: float) -> np.ndarray:
    """Leading fraction of entries equal to 1, the rest 0.1, unit norm"""
    if not 0 < fraction <= 1:
        raise InputValidationError(f"fraction must lie in (0, 1], got {fraction}")
    count = int(np.floor(fraction * dim + 1e-9))
    if count < 1:
        raise InputValidationError(f"dimension {dim} is too small for a {fraction:.3g} fraction")
    v = np.full(dim, 0.1)
    v[:count] = 1.0
    return v / np.linalg.norm(v)


def concentrated_geometry(
    p: int, fraction: float, q: int = 0, in_sample_fraction: float = 0.5
) -> DriftGeometry:
    """
    Concentrated loadings: the training vector has its mass on the first half,
    the trading vector on the leading `fraction` of coordinates
    """
    theta_is = concentrated_vector(q, in_sample_fraction) if q else np.zeros(0)
    theta_oos = concentrated_vector(q, fraction) if q else np.zeros(0)
    return DriftGeometry(
        beta_is=concentrated_vector(p, in_sample_fraction),
        beta_oos=concentrated_vector(p, fraction),
        theta_is=theta_is,
        theta_oos=theta_oos,
    )


def identity_mixing(q: int, p: int) -> np.ndarray:
    """P with P_ij = 1 iff i = j"""
    return np.eye(q, p)


# Protocols
def build_protocol(
    name: str,
    z_values: Sequence[float],
    draws: int,
    seed: int = 0,
    n: int = 100,
    total: int = 300,
    panels: Sequence[int] = PANEL_SIZES,
    k_values: Optional[Sequence[float]] = None,
    latent: LatentDistribution = LatentDistribution.GAUSSIAN,
    m4: float = 3.0,
    batches: Optional[int] = None,
) -> List[ExperimentGrid]:
    """
    Experiment grids of a named simulation protocol, one per panel size p

    iid-*: isotropic features, unobserved block with its own latents.
    ar-*: AR(0.9) covariances, unobserved block projected from the
    observed latents through P_ij = 1{i = j}.
    *-concentrated: concentrated trading loadings, levels 1..5 keep the
    leading 0.5/level share of coordinates.
    """
    name = PROTOCOL_ALIASES.get(name, name)
    if name not in PROTOCOLS:
        raise InputValidationError(f"unknown protocol {name!r}; choose from {', '.join(PROTOCOLS)}")
    if not z_values:
        raise InputValidationError("at least one ridge level is required")
    batches = min(batches or get_settings().MC_BATCHES, draws)
    concentrated = name.endswith("concentrated")
    grids = []
    for p in panels:
        q = total - p
        if q < 0:
            raise InputValidationError(f"panel p={p} exceeds the total feature count {total}")
        if concentrated:
            levels = list(k_values or CONCENTRATION_LEVELS)
            geometries = [concentrated_geometry(p, 0.5 / level, q) for level in levels]
        else:
            levels = list(k_values or DRIFT_LEVELS)
            geometries = [proportional_geometry(p, q, k) for k in levels]

        if name.startswith("ar-"):
            template = ModelSpec(
                n=n, p=p, q=q,
                sigma_x=CovarianceSpec.autoregressive(p, 0.9),
                sigma_w=CovarianceSpec.autoregressive(q, 0.9) if q else None,
                mixing=identity_mixing(q, p),
                geometry=geometries[0], latent=latent, m4=m4, seed=seed,
            )
        else:
            template = ModelSpec(n=n, p=p, q=q, geometry=geometries[0], latent=latent, m4=m4, seed=seed)
        grids.append(
            ExperimentGrid(
                experiment=f"{name}-p{p}",
                template=template,
                axis=SweepAxis.CONCENTRATION if concentrated else SweepAxis.DRIFT,
                k_values=levels,
                geometries=geometries,
                z_values=list(z_values),
                draws=draws,
                batches=batches,
                seed=seed,
            )
        )
    return grids


# Workers
def _simulate_batch(
    template: ModelSpec, geometries: List[DriftGeometry], z_values: List[float], start: int, stop: int
) -> np.ndarray:
    """Realized returns of draws [start, stop), shape (draws, len(z_values), len(geometries))"""
    base = geometries[0]
    beta_shift = np.stack([g.beta_oos - base.beta_oos for g in geometries])
    theta_shift = np.stack([g.theta_oos - base.theta_oos for g in geometries])
    out = np.empty((stop - start, len(z_values), len(geometries)))
    for row, draw in enumerate(range(start, stop)):
        s = dgp.sample(template, draw)
        r_next = s.r_next + beta_shift @ s.x_next + theta_shift @ s.w_next
        positions = dgp.fit_path(s.X, s.y, z_values) @ s.x_next
        out[row] = np.outer(positions, r_next)
    return out


def _batch_summary(
    template: ModelSpec, geometries: List[DriftGeometry], z_values: List[float], start: int, stop: int
) -> RunningMoments:
    return RunningMoments.from_block(_simulate_batch(template, geometries, z_values, start, stop))


def _theory_moments(spec: ModelSpec) -> StrategyMoments:
    isotropic = spec.sigma_x.is_identity and (
        spec.q == 0 or (not spec.projected and spec.sigma_w.is_identity)
    )
    if isotropic:
        return theory.strategy_moments_iid(spec.z, spec.cphi, spec.geometry, spec.m4)
    return theory.strategy_moments_general(spec.z, None, spec, spec.m4)


class MonteCarloService:
    """
    Runs simulation grids and scans

    Handles batching, parallel dispatch and the theory overlay
    """

    def __init__(self, n_jobs: Optional[int] = None):
        """
        Initialize the service

        Args:
            n_jobs: joblib worker count; settings.N_JOBS by default
        """
        self.n_jobs = get_settings().N_JOBS if n_jobs is None else n_jobs
        logger.info(f"Monte Carlo service initialized with n_jobs={self.n_jobs}")

    def _batch_bounds(self, draws: int, batches: int) -> List[Tuple[int, int]]:
        edges = [(b * draws) // batches for b in range(batches + 1)]
        return [(lo, hi) for lo, hi in zip(edges[:-1], edges[1:]) if hi > lo]

    def _simulate(
        self, template: ModelSpec, geometries: List[DriftGeometry], z_values: List[float], draws: int, batches: int
    ) -> Tuple[RunningMoments, np.ndarray]:
        bounds = self._batch_bounds(draws, batches)
        summaries = Parallel(n_jobs=self.n_jobs)(
            delayed(_batch_summary)(template, geometries, z_values, lo, hi) for lo, hi in bounds
        )
        total = RunningMoments((len(z_values), len(geometries)))
        for summary in summaries:
            total.merge(summary)
        batch_sharpes = np.stack([s.sharpe() for s in summaries])
        return total, batch_sharpes

    def run_grid(self, grid: ExperimentGrid) -> SimulationResult:
        """
        Simulate every (z, sweep value) point of a grid and attach theory

        Theory failures are recorded on the row and do not stop the run.
        """
        template = grid.template
        logger.info(
            f"Running grid {grid.experiment}: {len(grid.k_values)} points x {len(grid.z_values)} "
            f"ridge levels, {grid.draws} draws"
        )
        total, batch_sharpes = self._simulate(
            template, grid.geometries, grid.z_values, grid.draws, grid.batches
        )
        mean, se, vol, sharpe = total.mean, total.standard_error(), total.std(), total.sharpe()
        if batch_sharpes.shape[0] > 1:
            sharpe_se = np.nanstd(batch_sharpes, axis=0, ddof=1) / np.sqrt(batch_sharpes.shape[0])
        else:
            sharpe_se = np.full_like(mean, np.nan)

        rows = []
        for i, z in enumerate(grid.z_values):
            for j, (k, geom) in enumerate(zip(grid.k_values, grid.geometries)):
                row = GridPointResult(
                    experiment=grid.experiment, k=k, z=z, n=template.n, p=template.p, q=template.q,
                    mc_mean=mean[i, j], mc_se=se[i, j], mc_vol=vol[i, j], mc_sharpe=sharpe[i, j],
                    mc_sharpe_se=sharpe_se[i, j],
                )
                try:
                    moments = _theory_moments(template.with_geometry(geom).with_z(z))
                    row.th_mean, row.th_vol, row.th_sharpe = moments.mean, moments.volatility, moments.sharpe
                except DriftLabError as e:
                    logger.warning(f"theory unavailable for {grid.experiment} k={k} z={z}: {e.message}")
                    row.th_error = e.message
                rows.append(row)
        return SimulationResult(rows=rows, draws=grid.draws, seed=grid.seed)

    def run_protocol(self, name: str, z_values: Sequence[float], draws: int, seed: int = 0, **kwargs) -> SimulationResult:
        rows: List[GridPointResult] = []
        for grid in build_protocol(name, z_values, draws, seed, **kwargs):
            rows.extend(self.run_grid(grid).rows)
        return SimulationResult(rows=rows, draws=draws, seed=seed)

    def convergence_scan(
        self, spec: ModelSpec, n_list: Sequence[int], draws: int, k: Optional[float] = None
    ) -> List[ConvergenceRow]:
        """
        Theory-vs-simulation gap of the mean return as n grows at fixed complexities

        Dimensions scale as p = round(cphi n), p + q = round(c n); loadings are
        the unit-signal equidistributed vectors with the template's drift ratio.
        """
        if not n_list:
            raise InputValidationError("the sample-size list is empty")
        if k is None:
            norm = spec.geometry.norm_is_sq
            k = spec.geometry.inner / norm if norm > 0 else 1.0
        rows = []
        for n in n_list:
            p = max(1, int(round(spec.cphi * n)))
            q = max(0, int(round(spec.c * n)) - p)
            geom = proportional_geometry(p, q, k)
            scaled = ModelSpec(
                n=n, p=p, q=q, z=spec.z, geometry=geom, latent=spec.latent, m4=spec.m4, seed=spec.seed
            )
            grid = ExperimentGrid(
                experiment="convergence", template=scaled, k_values=[k], geometries=[geom],
                z_values=[spec.z], draws=draws, batches=min(get_settings().MC_BATCHES, draws), seed=spec.seed,
            )
            point = self.run_grid(grid).rows[0]
            if point.th_mean is None:
                raise DriftLabError(f"no theory value at n={n}: {point.th_error}")
            rows.append(
                ConvergenceRow(
                    n=n, p=p, q=q, z=spec.z, draws=draws, mc_mean=point.mc_mean, mc_se=point.mc_se,
                    th_mean=point.th_mean, gap=abs(point.mc_mean - point.th_mean),
                )
            )
            logger.info(f"convergence n={n}: gap={rows[-1].gap:.3e} (se {point.mc_se:.3e})")
        return rows

    def prediction_risk(
        self, n: int, geom: DriftGeometry, draws: int, seed: int = 0
    ) -> Tuple[float, float]:
        """Simulated risk |beta_hat - beta_oos|^2 + |theta_oos|^2 of the min-norm fit; (mean, se)"""
        spec = ModelSpec(n=n, p=geom.p, q=geom.q, geometry=geom, seed=seed)
        losses = np.empty(draws)
        for d in range(draws):
            s = dgp.sample(spec, d)
            beta_hat = dgp.fit_ridgeless(s.X, s.y).beta_hat
            losses[d] = np.sum((beta_hat - geom.beta_oos) ** 2) + geom.theta_oos_sq
        acc = RunningMoments.from_block(losses)
        return float(acc.mean), float(acc.standard_error())

    def latent_experiment(
        self,
        n: int,
        p: int,
        d: int,
        theta_is: np.ndarray,
        theta_oos: np.ndarray,
        z_values: Sequence[float],
        draws: int,
        seed: int = 0,
    ) -> SimulationResult:
        """Mean strategy return in the latent factor model against g(z; c, Upsilon) <theta_is, theta_oos>"""
        theta_is = np.asarray(theta_is, dtype=float)
        theta_oos = np.asarray(theta_oos, dtype=float)
        returns = np.empty((draws, len(z_values)))
        for draw in range(draws):
            s = dgp.sample_latent(n, p, d, theta_is, theta_oos, seed=seed, draw=draw)
            returns[draw] = dgp.fit_path(s.X, s.y, z_values) @ s.x_next * s.r_next
        acc = RunningMoments.from_block(returns)
        inner = float(theta_is @ theta_oos)
        ratio = inner / float(theta_is @ theta_is) if np.any(theta_is) else 0.0
        rows = []
        for i, z in enumerate(z_values):
            row = GridPointResult(
                experiment="latent", k=ratio, z=z, n=n, p=p, q=d,
                mc_mean=acc.mean[i], mc_se=acc.standard_error()[i], mc_vol=acc.std()[i],
                mc_sharpe=acc.sharpe()[i],
            )
            try:
                row.th_mean = theory.latent_g(z, p / n, d / p) * inner
            except DriftLabError as e:
                row.th_error = e.message
            rows.append(row)
        return SimulationResult(rows=rows, draws=draws, seed=seed)


def summarize_gaps(result: SimulationResult) -> Dict[str, float]:
    """Largest standardized mean gap and relative volatility gap across rows with theory"""
    z_scores = [abs(r.mean_gap) / r.mc_se for r in result.rows if r.mean_gap is not None and r.mc_se > 0]
    vol_gaps = [abs(r.vol_gap) for r in result.rows if r.vol_gap is not None]
    return {
        "max_mean_gap_se": max(z_scores, default=float("nan")),
        "max_vol_gap_rel": max(vol_gaps, default=float("nan")),
    }
