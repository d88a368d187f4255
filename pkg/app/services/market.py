"""
Market Timing Backtest Service
==============================

Empirical pipeline on the monthly Goyal-Welch predictor panel:
- panel ingest with derived predictors and lagged excess returns
- expanding-window standardization (no look-ahead)
- random Fourier features of the 15 standardized signals
- rolling 12-month ridge timing strategy averaged over feature draws
- bandwidth-selection schemes, rolling predictive betas and
  counterfactual returns generated from the fitted loadings
"""

import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pandas.tseries.offsets import MonthEnd
from scipy import linalg

from app.core.config import get_settings
from app.core.exceptions import DomainError, InputValidationError, SchemaError
from app.models.schemas import BacktestConfig, BacktestResult, MacroPanel, SubPeriod
from app.utils.rng import Stream, stream_rng

logger = logging.getLogger(__name__)

# canonical name -> column in the 2023 release of the monthly file
GOYAL_SCHEMA: Dict[str, str] = {
    "date": "yyyymm",
    "index": "Index",
    "dividends": "D12",
    "earnings": "E12",
    "book_to_market": "b/m",
    "tbill": "tbl",
    "aaa": "AAA",
    "baa": "BAA",
    "long_yield": "lty",
    "net_issuance": "ntis",
    "risk_free": "Rfree",
    "inflation": "infl",
    "long_return": "ltr",
    "corporate_return": "corpr",
    "stock_variance": "svar",
    "market_return": "CRSP_SPvw",
}

PREDICTORS = ["dp", "dy", "ep", "de", "svar", "bm", "ntis", "tbl", "lty", "ltr", "tms", "dfy", "dfr", "infl"]
BETA_EXCLUSIONS = ("lty", "dp", "dy", "tms")
FULL_SAMPLE = "Full sample"
ANNUALIZATION = np.sqrt(12.0)
DRAW_BLOCK = 10
RETURN_COLUMNS = ("market_return", "risk_free")


# Panel
def load_schema(path: Optional[Union[str, Path]]) -> Dict[str, str]:
    """Pinned column mapping, optionally overridden by a JSON mapping file"""
    schema = dict(GOYAL_SCHEMA)
    if path is not None:
        overrides = json.loads(Path(path).read_text())
        unknown = sorted(set(overrides) - set(schema))
        if unknown:
            raise InputValidationError(f"unknown schema keys: {', '.join(unknown)}")
        schema.update(overrides)
    return schema


def load_panel(
    path: Union[str, Path], schema: Optional[Dict[str, str]] = None, lags: Optional[int] = None
) -> MacroPanel:
    """
    Read the monthly predictor file into a MacroPanel

    Args:
        path: CSV file with the documented columns
        schema: canonical -> file column mapping (GOYAL_SCHEMA by default)
        lags: Number of lagged-return columns; settings.BETA_LAGS by default

    Returns:
        MacroPanel indexed by month-end dates with the 14 predictors, mr_1..mr_L,
        the realized excess return and next month's excess return as target

    Raises:
        SchemaError: required columns are missing
        InputValidationError: dates are not strictly increasing months
    """
    schema = schema or GOYAL_SCHEMA
    lags = lags or get_settings().BETA_LAGS
    raw = pd.read_csv(path, thousands=",", na_values=["NaN", "NA", ""])
    missing = [col for col in schema.values() if col not in raw.columns]
    if missing:
        raise SchemaError(f"panel is missing required columns: {', '.join(missing)}", missing=missing)
    col = {key: raw[name] for key, name in schema.items()}

    dates = pd.to_datetime(col["date"].astype(int).astype(str), format="%Y%m") + MonthEnd(0)
    if not dates.is_monotonic_increasing or dates.duplicated().any():
        raise InputValidationError("panel dates must be strictly increasing")
    months = dates.dt.year * 12 + dates.dt.month
    if (months.diff().dropna() != 1).any():
        raise InputValidationError("panel dates must be consecutive months")

    numeric = {k: pd.to_numeric(v, errors="coerce") for k, v in col.items() if k != "date"}
    frame = pd.DataFrame(numeric)
    frame.index = pd.DatetimeIndex(dates, name="date")
    # returns are never imputed; a missing month leaves NaN and drops out of every window
    levels = [k for k in frame.columns if k not in RETURN_COLUMNS]
    frame[levels] = frame[levels].ffill()
    complete = frame.notna().all(axis=1).to_numpy()
    first = int(complete.argmax()) if complete.any() else len(frame)
    if first:
        logger.info(f"dropping {first} leading rows with incomplete predictors")
    frame = frame.iloc[first:]
    if frame.empty:
        raise InputValidationError("panel has no complete rows")

    log_index = np.log(frame["index"])
    out = pd.DataFrame(index=frame.index)
    out["dp"] = np.log(frame["dividends"]) - log_index
    out["dy"] = np.log(frame["dividends"]) - log_index.shift(1).fillna(log_index)
    out["ep"] = np.log(frame["earnings"]) - log_index
    out["de"] = np.log(frame["dividends"]) - np.log(frame["earnings"])
    out["svar"] = frame["stock_variance"]
    out["bm"] = frame["book_to_market"]
    out["ntis"] = frame["net_issuance"]
    out["tbl"] = frame["tbill"]
    out["lty"] = frame["long_yield"]
    out["ltr"] = frame["long_return"]
    out["tms"] = frame["long_yield"] - frame["tbill"]
    out["dfy"] = frame["baa"] - frame["aaa"]
    out["dfr"] = frame["corporate_return"] - frame["long_return"]
    out["infl"] = frame["inflation"]
    if not np.all(np.isfinite(out[PREDICTORS].to_numpy())):
        raise InputValidationError("derived predictors are not finite (check for nonpositive levels)")

    excess = frame["market_return"] - frame["risk_free"]
    out["excess_return"] = excess
    for k in range(1, lags + 1):
        out[f"mr_{k}"] = excess.shift(k - 1)
    out["target"] = excess.shift(-1)
    logger.info(f"loaded panel {out.index[0]:%Y-%m} to {out.index[-1]:%Y-%m}, {len(out)} months")
    return MacroPanel(frame=out, predictors=list(PREDICTORS), lags=lags)


def _position(panel: MacroPanel, t) -> int:
    if isinstance(t, (int, np.integer)):
        if not -len(panel.frame) <= t < len(panel.frame):
            raise InputValidationError(f"row {t} outside the panel")
        return int(t) % len(panel.frame)
    return int(panel.frame.index.get_loc(pd.Timestamp(t) + MonthEnd(0)))


def standardize(panel: MacroPanel, t, burn_in: Optional[int] = None) -> np.ndarray:
    """
    Signal vector G_t: predictors and the lagged return as expanding z-scores

    Statistics use rows up to and including t. Zero dispersion falls back to
    unit scale.
    """
    burn_in = burn_in or get_settings().BACKTEST_BURN_IN
    pos = _position(panel, t)
    if pos + 1 < burn_in:
        raise DomainError(f"standardization needs {burn_in} months of history, row {pos} has {pos + 1}")
    history = panel.frame[panel.signal_columns].iloc[: pos + 1]
    mean = history.mean().to_numpy()
    std = history.std(ddof=1).to_numpy()
    std = np.where(np.isfinite(std) & (std > 0), std, 1.0)
    return (history.iloc[-1].to_numpy() - mean) / std


def standardized_predictors(panel: MacroPanel, burn_in: Optional[int] = None) -> pd.DataFrame:
    """All G_t at once; rows before the burn-in are NaN"""
    burn_in = burn_in or get_settings().BACKTEST_BURN_IN
    signals = panel.frame[panel.signal_columns]
    expanding = signals.expanding(min_periods=burn_in)
    std = expanding.std(ddof=1)
    std = std.where(std > 0, 1.0).where(std.notna())
    return (signals - expanding.mean()) / std


def rff_weights(n_features: int, dim: int, seed: int, draw: int) -> np.ndarray:
    """(p/2, dim) standard normal projection directions for one draw"""
    if n_features % 2:
        raise InputValidationError("the feature count must be even")
    return stream_rng(seed, draw, Stream.FEATURES).standard_normal((n_features // 2, dim))


def rff(G: np.ndarray, gamma: float, weights: np.ndarray) -> np.ndarray:
    """
    Random Fourier features (1/sqrt(p)) [sin(gamma w_i'G), cos(gamma w_i'G)], interleaved

    Accepts a single signal vector or a (T, dim) matrix of them.
    """
    G = np.asarray(G, dtype=float)
    proj = gamma * (G @ weights.T)
    p = 2 * weights.shape[0]
    out = np.empty(proj.shape[:-1] + (p,))
    out[..., 0::2] = np.sin(proj)
    out[..., 1::2] = np.cos(proj)
    return out / np.sqrt(p)


# Rolling ridge engine
def _lag_products(F: np.ndarray, window: int) -> np.ndarray:
    """L[l, t] = F_t . F_{t-l} for l = 0..window"""
    T = F.shape[0]
    L = np.full((window + 1, T), np.nan)
    for lag in range(min(window, T - 1) + 1):
        L[lag, lag:] = np.einsum("ij,ij->i", F[lag:], F[: T - lag])
    return L


def _eligible_months(valid_features: np.ndarray, valid_targets: np.ndarray, window: int) -> np.ndarray:
    """Months t whose features and full trailing window of (features, targets) are available"""
    usable = valid_features & valid_targets
    cum = np.concatenate([[0], np.cumsum(usable)])
    t = np.arange(window, valid_features.size)
    full = (cum[t] - cum[t - window]) == window
    return t[full & valid_features[t]]


def rolling_ridge_positions(
    F: np.ndarray, targets: np.ndarray, window: int, z_values: Sequence[float]
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Positions pi_t = S_t' beta_hat_t with beta_hat_t = (z I + S'S/n)^{-1} S'R/n over the trailing window

    Uses the dual form k_t'(K_t + n z I)^{-1} R_t and one eigendecomposition of
    each window Gram matrix for all ridge levels.

    Args:
        F: (T, p) features, NaN rows unavailable
        targets: (T,) next-month returns, or (len(z_values), T) one series per level
        window: Training months n
        z_values: Ridge levels

    Returns:
        (positions of shape (len(z_values), T) with NaN where skipped, eligible month indices)
    """
    T = F.shape[0]
    Y = np.broadcast_to(np.atleast_2d(targets), (len(z_values), T))
    valid_f = np.all(np.isfinite(F), axis=1)
    valid_y = np.all(np.isfinite(Y), axis=0)
    months = _eligible_months(valid_f, valid_y, window)
    positions = np.full((len(z_values), T), np.nan)
    if months.size == 0:
        return positions, months

    L = _lag_products(np.where(valid_f[:, None], F, 0.0), window)
    a = np.arange(window)
    lag = np.abs(a[:, None] - a[None, :])
    last = np.maximum(a[:, None], a[None, :])
    gram = L[lag[None], months[:, None, None] - window + last[None]]
    cross = L[window - a[None, :], months[:, None]]
    evals, evecs = np.linalg.eigh(gram)
    cross_rot = np.einsum("eab,ea->eb", evecs, cross)
    rows = months[:, None] - window + a[None, :]
    for i, z in enumerate(z_values):
        target_rot = np.einsum("eab,ea->eb", evecs, Y[i][rows])
        positions[i, months] = np.sum(cross_rot * target_rot / (evals + window * z), axis=1)
    return positions, months


def _moment_match(forecasts: np.ndarray, realized: np.ndarray, keys: Sequence) -> np.ndarray:
    """
    Rescale each forecast row to the mean and std of `realized` over their common months

    Args:
        forecasts: (k, T) forecast series, NaN where unavailable
        realized: (T,) realized returns on the same rows
        keys: Row labels for error messages

    Raises:
        DomainError: a row has fewer than two common months or zero variance
    """
    out = np.full(forecasts.shape, np.nan)
    for i, key in enumerate(keys):
        raw = forecasts[i]
        mask = np.isfinite(raw) & np.isfinite(realized)
        if mask.sum() < 2:
            raise DomainError(f"not enough counterfactual months for column {key}")
        cf, real = raw[mask], realized[mask]
        std_c = cf.std(ddof=1)
        if not std_c > 0:
            raise DomainError(f"counterfactual returns for column {key} have zero variance")
        out[i, mask] = (cf - cf.mean()) / std_c * real.std(ddof=1) + real.mean()
    return out


def _rff_job(
    G: np.ndarray,
    targets: np.ndarray,
    config: BacktestConfig,
    draws: range,
    counterfactual: bool = False,
) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Summed positions and returns over a block of draws, shape (gamma, z, T)

    With `counterfactual`, each draw's own forecasts are moment-matched to the
    realized returns and the draw is re-run against that series.
    """
    n_g, n_z, T = len(config.gammas), len(config.z_values), G.shape[0]
    pos_sum = np.zeros((n_g, n_z, T))
    ret_sum = np.zeros((n_g, n_z, T))
    kept = np.empty((len(draws), n_g, n_z, T)) if config.keep_draws else None
    for d_i, draw in enumerate(draws):
        weights = rff_weights(config.n_features, G.shape[1], config.seed, draw)
        for g_i, gamma in enumerate(config.gammas):
            F = rff(G, gamma, weights)
            tgt = targets
            pos, _ = rolling_ridge_positions(F, tgt, config.window, config.z_values)
            if counterfactual:
                tgt = _moment_match(pos, targets, [(gamma, z) for z in config.z_values])
                pos, _ = rolling_ridge_positions(F, tgt, config.window, config.z_values)
            ret = pos * np.broadcast_to(np.atleast_2d(tgt), pos.shape)
            pos_sum[g_i] += pos
            ret_sum[g_i] += ret
            if kept is not None:
                kept[d_i, g_i] = ret
    return pos_sum, ret_sum, kept


def holding_months(panel: MacroPanel) -> pd.DatetimeIndex:
    """Month over which the position formed at each row is held"""
    return pd.DatetimeIndex(panel.dates + MonthEnd(1), name="date")


def _to_frame(arr: np.ndarray, index: pd.DatetimeIndex, gammas: Sequence[float], z_values: Sequence[float]) -> pd.DataFrame:
    columns = pd.MultiIndex.from_product([list(gammas), list(z_values)], names=["gamma", "z"])
    return pd.DataFrame(arr.reshape(-1, arr.shape[-1]).T, index=index, columns=columns)


def aggregate_returns(
    returns: pd.DataFrame, periods: Sequence[SubPeriod], include_full: bool = True
) -> pd.DataFrame:
    """
    Mean monthly return and annualized Sharpe per (period, gamma, z)

    Sharpe = sqrt(12) mean / std over the months of the period.
    """
    labelled: List[Tuple[str, pd.DataFrame]] = [
        (p.label, returns.loc[pd.Timestamp(p.start): pd.Timestamp(p.end)]) for p in periods
    ]
    if include_full:
        labelled.append((FULL_SAMPLE, returns))
    rows = []
    for label, block in labelled:
        for (gamma, z), series in block.items():
            series = series.dropna()
            months = int(series.size)
            mean = float(series.mean()) if months else np.nan
            std = float(series.std(ddof=1)) if months > 1 else np.nan
            sharpe = ANNUALIZATION * mean / std if std and np.isfinite(std) and std > 0 else np.nan
            rows.append(
                {"period": label, "gamma": gamma, "z": z, "mean_return": mean, "sharpe": sharpe, "months": months}
            )
    return pd.DataFrame(rows, columns=["period", "gamma", "z", "mean_return", "sharpe", "months"])


def counterfactual(panel: MacroPanel, forecasts: pd.DataFrame) -> pd.DataFrame:
    """
    Counterfactual returns from the fitted loadings, moment-matched to realized returns

    The counterfactual return over a holding month is the fitted forecast
    beta_hat_t' S_t, affinely rescaled per column so that its sample mean and
    standard deviation equal those of the realized excess return over the same months.

    Raises:
        DomainError: a counterfactual column has zero variance
    """
    realized = pd.Series(panel.target.to_numpy(), index=holding_months(panel)).reindex(forecasts.index)
    scaled = _moment_match(forecasts.to_numpy(dtype=float).T, realized.to_numpy(dtype=float), list(forecasts.columns))
    return pd.DataFrame(scaled.T, index=forecasts.index, columns=forecasts.columns)


class BacktestService:
    """
    Runs the empirical timing backtests

    Draws are dispatched in blocks through joblib and summed in block order.
    """

    def __init__(self, n_jobs: Optional[int] = None):
        """
        Initialize the backtest service

        Args:
            n_jobs: joblib worker count; settings.N_JOBS by default
        """
        self.n_jobs = get_settings().N_JOBS if n_jobs is None else n_jobs
        logger.info(f"Backtest service initialized with n_jobs={self.n_jobs}")

    def _signals(self, panel: MacroPanel, config: BacktestConfig) -> np.ndarray:
        return standardized_predictors(panel, config.burn_in).to_numpy()

    def _skipped(self, panel: MacroPanel, valid: np.ndarray, months: np.ndarray) -> List:
        candidates = np.flatnonzero(valid & panel.target.notna().to_numpy())
        skipped = np.setdiff1d(candidates, months)
        if skipped.size:
            logger.info(f"{skipped.size} months skipped for an incomplete training window")
        return [d.date() for d in panel.dates[skipped]]

    def _run(
        self, panel: MacroPanel, config: BacktestConfig, label: str, counterfactual: bool = False
    ) -> BacktestResult:
        G = self._signals(panel, config)
        T = G.shape[0]
        targets = panel.target.to_numpy()
        # fixed block size keeps the summation order independent of n_jobs
        blocks = [range(lo, min(lo + DRAW_BLOCK, config.draws)) for lo in range(0, config.draws, DRAW_BLOCK)]
        logger.info(
            f"{label} backtest: {config.draws} draws x {len(config.gammas)} bandwidths x "
            f"{len(config.z_values)} ridge levels over {T} months"
        )
        results = Parallel(n_jobs=self.n_jobs)(
            delayed(_rff_job)(G, targets, config, block, counterfactual) for block in blocks
        )
        pos_sum = np.zeros((len(config.gammas), len(config.z_values), T))
        ret_sum = np.zeros_like(pos_sum)
        kept = []
        for pos, ret, draws in results:
            pos_sum += pos
            ret_sum += ret
            if draws is not None:
                kept.append(draws)
        index = holding_months(panel)
        returns = _to_frame(ret_sum / config.draws, index, config.gammas, config.z_values)
        positions = _to_frame(pos_sum / config.draws, index, config.gammas, config.z_values)
        valid = np.all(np.isfinite(G), axis=1)
        months = np.flatnonzero(np.isfinite(pos_sum[0, 0]))
        return BacktestResult(
            label=label,
            positions=positions,
            returns=returns,
            aggregates=aggregate_returns(returns, config.periods),
            skipped=self._skipped(panel, valid, months),
            draw_returns=np.concatenate(kept) if kept else None,
            config=config,
        )

    def timing_backtest(self, panel: MacroPanel, config: BacktestConfig) -> BacktestResult:
        """Random-feature ridge timing strategy averaged over feature draws"""
        return self._run(panel, config, "rff")

    def linear_backtest(
        self, panel: MacroPanel, z: Union[float, Sequence[float]], config: Optional[BacktestConfig] = None
    ) -> BacktestResult:
        """Same rolling protocol on the raw standardized signals; no feature draws"""
        z_values = [float(z)] if np.isscalar(z) else [float(v) for v in z]
        base = config or BacktestConfig()
        config = base.model_copy(update={"z_values": z_values, "draws": 1, "gammas": [float("nan")]})
        G = self._signals(panel, config)
        target = panel.target.to_numpy()
        pos, months = rolling_ridge_positions(G, target, config.window, z_values)
        ret = pos * target
        index = holding_months(panel)
        returns = _to_frame(ret[None], index, config.gammas, z_values)
        return BacktestResult(
            label="linear",
            positions=_to_frame(pos[None], index, config.gammas, z_values),
            returns=returns,
            aggregates=aggregate_returns(returns, config.periods),
            skipped=self._skipped(panel, np.all(np.isfinite(G), axis=1), months),
            config=config,
        )

    def counterfactual_backtest(
        self, panel: MacroPanel, config: BacktestConfig, base: Optional[BacktestResult] = None
    ) -> Tuple[BacktestResult, pd.DataFrame]:
        """
        Re-run the timing backtest on counterfactual returns built from its own forecasts

        Every feature draw is re-run against the moment-matched forecasts of
        that same draw; the counterfactual returns are then averaged over draws.

        Returns:
            (counterfactual result, table of period, gamma, z, real_return, cf_return)
        """
        base = base or self.timing_backtest(panel, config)
        cf = self._run(panel, config, "counterfactual", counterfactual=True)
        merged = base.aggregates.merge(cf.aggregates, on=["period", "gamma", "z"], suffixes=("_real", "_cf"))
        table = merged.rename(columns={"mean_return_real": "real_return", "mean_return_cf": "cf_return"})[
            ["period", "gamma", "z", "real_return", "cf_return"]
        ]
        return cf, table

    def bandwidth_schemes(self, result: BacktestResult) -> pd.DataFrame:
        """
        Hindsight and feasible bandwidth selection per (period, z)

        Hindsight takes the best bandwidth of the period itself; feasible uses
        the previous period's best, and the bandwidth average in the first
        period. The full-sample row is the month-weighted mean over periods.
        """
        agg = result.aggregates[result.aggregates["period"] != FULL_SAMPLE]
        order = [p.label for p in sorted(result.config.periods, key=lambda p: p.start)]
        rows = []
        for z, by_z in agg.groupby("z", sort=False):
            previous_best = None
            weighted = {"feasible": 0.0, "hindsight": 0.0}
            total = 0
            for label in order:
                block = by_z[by_z["period"] == label].dropna(subset=["mean_return"])
                if block.empty:
                    continue
                best = block.loc[block["mean_return"].idxmax()]
                hindsight = float(best["mean_return"])
                if previous_best is None:
                    feasible = float(block["mean_return"].mean())
                else:
                    match = block[np.isclose(block["gamma"], previous_best, equal_nan=True)]
                    feasible = float(match["mean_return"].iloc[0]) if not match.empty else np.nan
                months = int(block["months"].max())
                rows.append(
                    {"period": label, "z": z, "feasible": feasible, "hindsight": hindsight,
                     "best_gamma": best["gamma"], "months": months}
                )
                if np.isfinite(feasible):
                    weighted["feasible"] += feasible * months
                    weighted["hindsight"] += hindsight * months
                    total += months
                previous_best = best["gamma"]
            if total:
                rows.append(
                    {"period": FULL_SAMPLE, "z": z, "feasible": weighted["feasible"] / total,
                     "hindsight": weighted["hindsight"] / total, "best_gamma": np.nan, "months": total}
                )
        return pd.DataFrame(rows, columns=["period", "z", "feasible", "hindsight", "best_gamma", "months"])

    def rolling_betas(
        self,
        panel: MacroPanel,
        window: Optional[int] = None,
        exclusions: Iterable[str] = BETA_EXCLUSIONS,
        lags: Optional[int] = None,
    ) -> pd.DataFrame:
        """
        Rolling OLS of next-month excess returns on predictors and lagged returns

        Coefficients dated t use the `window` rows ending at t - 1, whose targets
        are known at t. A rank-deficient window falls back to ridge at 1e-8 and
        is flagged in the `fallback` column.
        """
        settings = get_settings()
        window = window or settings.BETA_WINDOW
        lags = lags or min(settings.BETA_LAGS, panel.lags)
        excluded = set(exclusions)
        regressors = [c for c in panel.predictors if c not in excluded] + [f"mr_{k}" for k in range(1, lags + 1)]
        X = panel.frame[regressors].to_numpy()
        y = panel.target.to_numpy()
        usable = np.all(np.isfinite(X), axis=1) & np.isfinite(y)
        cum = np.concatenate([[0], np.cumsum(usable)])
        names = ["const"] + regressors
        records = []
        for t in range(window, len(y)):
            if cum[t] - cum[t - window] != window:
                continue
            design = np.column_stack([np.ones(window), X[t - window: t]])
            target = y[t - window: t]
            fallback = np.linalg.matrix_rank(design) < design.shape[1]
            if fallback:
                gram = design.T @ design + 1e-8 * window * np.eye(design.shape[1])
                coef = linalg.solve(gram, design.T @ target, assume_a="pos")
            else:
                coef, *_ = linalg.lstsq(design, target)
            date = panel.dates[t]
            records.append({"date": date, **dict(zip(names, coef)), "fallback": bool(fallback)})
        if not records:
            logger.warning(f"panel too short for {window}-month rolling betas")
            return pd.DataFrame(columns=["date"] + names + ["fallback"]).set_index("date")
        return pd.DataFrame.from_records(records).set_index("date")
