"""
driftlab - Command Line Entry Point
===================================

Ridge and ridgeless market timing under posterior drift

Subcommands:
- theory: closed-form curves (Sharpe vs complexity, strategy moments, risk, latent model)
- simulate: Monte Carlo protocols and the convergence scan against theory
- backtest: random-feature timing backtest on the monthly predictor panel
- replay: re-run a manifest and verify the output digests
"""

import argparse
import json
import logging
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from pydantic import ValidationError

from app.core.config import get_settings
from app.core.exceptions import DriftLabError, InputValidationError, NumericalInconsistencyError
from app.core.logging import configure_logging
from app.models.schemas import BacktestConfig, DriftGeometry, LatentDistribution, ModelSpec, RunManifest
from app.services import market, theory
from app.services.montecarlo import PROTOCOL_ALIASES, PROTOCOLS, MonteCarloService, summarize_gaps
from app.utils import artifacts

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)
settings = get_settings()

FIGURES = ("sr-signal", "moments", "risk", "latent")
CONVERGENCE_SIZES = list(range(40, 131, 10))


def _float_list(text: str) -> List[float]:
    try:
        values = [float(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e
    if not values:
        raise argparse.ArgumentTypeError("empty sweep")
    return values


def _int_list(text: str) -> List[int]:
    return [int(v) for v in _float_list(text)]


def _unit_geometry(p: int, k: float) -> DriftGeometry:
    beta = theory.equidistributed(p, 1.0)
    return DriftGeometry(beta_is=beta, beta_oos=k * beta)


# Commands
def cmd_theory(args: argparse.Namespace) -> List[Path]:
    """Theory curves for plotting"""
    out = Path(args.output_dir)
    cphis = args.cphi or [args.c]
    if args.f_iid:
        rows = [{"z": z, "cphi": cphi, "f": theory.f_iid(z, cphi)} for z in args.z for cphi in cphis]
        frame = pd.DataFrame(rows)
        for row in rows:
            print(f"{row['f']:.12g}")
        return artifacts.write_table(frame, out, "f_iid", args.format)

    if args.figure == "sr-signal":
        if not args.signals:
            raise InputValidationError("--figure sr-signal needs --signals")
        grid = args.cphi or list(np.round(np.linspace(args.c / 60, args.c, 60), 10))
        frame = pd.concat(
            [theory.sharpe_curve(args.signals, z, args.c, grid, n=args.n, k=k, m4=args.m4)
             for z in args.z for k in args.k],
            ignore_index=True,
        )
        return artifacts.write_table(frame, out, "sr_signal", args.format)

    if args.figure == "moments":
        rows = []
        for z in args.z:
            for cphi in cphis:
                p = max(1, int(round(cphi * args.n)))
                for k in args.k:
                    moments = theory.strategy_moments_iid(z, cphi, _unit_geometry(p, k), args.m4)
                    rows.append(
                        {"z": z, "cphi": cphi, "k": k, "mean": moments.mean, "variance": moments.variance,
                         "leverage": moments.leverage, "vol": moments.volatility, "sharpe": moments.sharpe}
                    )
        return artifacts.write_table(pd.DataFrame(rows), out, "moments", args.format)

    if args.figure == "risk":
        rows = [
            {"cphi": cphi, "k": k,
             "risk": theory.prediction_risk(cphi, _unit_geometry(max(1, int(round(cphi * args.n))), k))}
            for cphi in cphis for k in args.k
        ]
        return artifacts.write_table(pd.DataFrame(rows), out, "risk", args.format)

    if args.figure == "latent":
        rows = [
            {"z": z, "c": args.c, "upsilon": u, "g": theory.latent_g(z, args.c, u)}
            for z in args.z for u in args.upsilon
        ]
        return artifacts.write_table(pd.DataFrame(rows), out, "latent", args.format)

    raise InputValidationError("choose --figure or --f-iid")


def cmd_simulate(args: argparse.Namespace) -> List[Path]:
    """Monte Carlo experiments against theory"""
    out = Path(args.output_dir)
    service = MonteCarloService(n_jobs=args.n_jobs)
    latent = LatentDistribution(args.latent_law)
    if args.convergence:
        n0 = CONVERGENCE_SIZES[0]
        p = max(1, int(round(args.c * n0)))
        q = max(0, int(round(args.c_total * n0)) - p)
        k = args.k[0] if args.k else 1.0
        beta, theta = theory.equidistributed(p, 1.0), theory.equidistributed(q, 1.0)
        geometry = DriftGeometry(beta_is=beta, beta_oos=k * beta, theta_is=theta, theta_oos=k * theta)
        paths = []
        for z in args.z:
            spec = ModelSpec(n=n0, p=p, q=q, z=z, geometry=geometry, latent=latent, m4=args.m4, seed=args.seed)
            rows = service.convergence_scan(spec, args.n_list or CONVERGENCE_SIZES, args.draws, k=k)
            frame = pd.DataFrame([r.model_dump() for r in rows])
            paths += artifacts.write_table(frame, out, f"convergence_z{z:g}", args.format)
        return paths

    if args.protocol == "latent":
        p = int(round(args.c_total * args.n))
        d = max(1, int(round(args.upsilon[0] * p)))
        theta = theory.equidistributed(d, 1.0)
        frames = [
            service.latent_experiment(args.n, p, d, theta, k * theta, args.z, args.draws, args.seed).to_frame()
            for k in (args.k or [1.0])
        ]
        return artifacts.write_table(pd.concat(frames, ignore_index=True), out, "latent", args.format)

    result = service.run_protocol(
        args.protocol, args.z, args.draws, args.seed, n=args.n, k_values=args.k, latent=latent, m4=args.m4
    )
    gaps = summarize_gaps(result)
    logger.info(f"{args.protocol}: max mean gap {gaps['max_mean_gap_se']:.2f} SE, vol gap {gaps['max_vol_gap_rel']:.2%}")
    return artifacts.write_table(result.to_frame(), out, args.protocol, args.format)


def _resolve_data(path: Optional[str]) -> Path:
    candidate = Path(path) if path else settings.DATA_DIR / "goyal.csv"
    if not candidate.is_absolute() and not candidate.exists():
        candidate = settings.DATA_DIR / candidate
    if not candidate.exists():
        raise FileNotFoundError(f"data file not found: {candidate}")
    return candidate


def cmd_backtest(args: argparse.Namespace) -> List[Path]:
    """Timing backtest, bandwidth schemes, betas and counterfactuals"""
    out = Path(args.output_dir)
    panel = market.load_panel(_resolve_data(args.data), market.load_schema(args.schema))
    config = BacktestConfig(
        window=args.window, n_features=args.features, gammas=args.gammas or BacktestConfig().gammas,
        z_values=args.z, draws=args.draws, seed=args.seed,
    )
    service = market.BacktestService(n_jobs=args.n_jobs)
    result = service.timing_backtest(panel, config)
    agg = result.aggregates
    paths = artifacts.write_table(
        agg[["period", "gamma", "z", "mean_return"]].rename(columns={"mean_return": "mean_monthly_return"}),
        out, "expret", args.format,
    )
    paths += artifacts.write_table(agg[["period", "gamma", "z", "sharpe", "months"]], out, "sharpe", args.format)

    schemes = service.bandwidth_schemes(result)
    table = schemes.melt(id_vars=["period", "z"], value_vars=["feasible", "hindsight"], var_name="scheme", value_name="return")
    if args.linear:
        linear = service.linear_backtest(panel, args.z, config).aggregates
        table = pd.concat(
            [table, linear.assign(scheme="linear").rename(columns={"mean_return": "return"})[table.columns]],
            ignore_index=True,
        )
    paths += artifacts.write_table(table[["period", "scheme", "z", "return"]], out, "table2", args.format)

    if args.betas:
        betas = service.rolling_betas(panel)
        flagged = int(betas["fallback"].sum()) if not betas.empty else 0
        if flagged:
            logger.warning(f"{flagged} beta windows used the ridge fallback")
        long = betas.drop(columns="fallback").reset_index().melt(
            id_vars="date", var_name="predictor", value_name="coefficient"
        )
        paths += artifacts.write_table(long, out, "betas", args.format)

    if args.counterfactual:
        _, comparison = service.counterfactual_backtest(panel, config, base=result)
        paths += artifacts.write_table(comparison, out, "counterfactual", args.format)
    return paths


def _strip_output_dir(argv: Sequence[str]) -> List[str]:
    kept, skip = [], False
    for token in argv:
        if skip:
            skip = False
            continue
        if token == "--output-dir":
            skip = True
            continue
        if token.startswith("--output-dir="):
            continue
        kept.append(token)
    return kept


def cmd_replay(args: argparse.Namespace) -> List[Path]:
    """Re-execute a manifest into <output-dir>/replay and compare digests"""
    manifest = artifacts.read_manifest(args.manifest)
    argv = manifest.config.get("argv")
    if not argv:
        raise InputValidationError(f"manifest {args.manifest} does not record its command line")
    target = Path(args.output_dir) / "replay"
    code = main(["--output-dir", str(target)] + _strip_output_dir(argv))
    if code != 0:
        raise DriftLabError(f"replay of {args.manifest} failed with exit code {code}")
    replayed = artifacts.read_manifest(target / "manifest.json").outputs
    mismatched = sorted(k for k, v in manifest.outputs.items() if replayed.get(k) != v)
    if mismatched:
        raise NumericalInconsistencyError("replayed outputs differ from the manifest", files=mismatched)
    logger.info(f"replay reproduced {len(manifest.outputs)} outputs in {target}")
    print(json.dumps({"replayed": str(target), "outputs": len(manifest.outputs), "match": True}))
    return []


# Parser
def build_parser(defaults: Optional[Dict[str, Any]] = None) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="driftlab", description="Market timing under posterior drift")
    parser.add_argument("--seed", type=int, default=settings.MASTER_SEED, help="Master seed for all randomness")
    parser.add_argument("--n-jobs", type=int, default=settings.N_JOBS, help="joblib workers")
    parser.add_argument("--format", choices=artifacts.FORMATS, default="csv")
    parser.add_argument("--output-dir", default=str(settings.OUTPUT_DIR))
    parser.add_argument("--config", help="JSON file of flag defaults")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    th = sub.add_parser("theory", help="Closed-form curves")
    th.add_argument("--figure", choices=FIGURES)
    th.add_argument("--f-iid", action="store_true", help="Print f(z; cphi) for Sigma = I")
    th.add_argument("--z", type=_float_list, default=[0.1])
    th.add_argument("--c", type=float, default=3.0, help="Total complexity (p+q)/n")
    th.add_argument("--cphi", type=_float_list, default=None, help="Observed complexities p/n")
    th.add_argument("--signals", type=_float_list, default=None)
    th.add_argument("--k", type=_float_list, default=[1.0], help="Drift levels")
    th.add_argument("--upsilon", type=_float_list, default=[0.5], help="Latent share d/p")
    th.add_argument("--n", type=int, default=1000, help="Sample size fixing p = round(cphi n)")
    th.add_argument("--m4", type=float, default=3.0)
    th.set_defaults(func=cmd_theory)
    _apply_defaults(th, defaults)

    sim = sub.add_parser("simulate", help="Monte Carlo against theory")
    protocols = PROTOCOLS + tuple(PROTOCOL_ALIASES) + ("latent",)
    sim.add_argument("--protocol", choices=protocols, default="iid-proportional")
    sim.add_argument("--convergence", action="store_true")
    sim.add_argument("--c", type=float, default=0.5, help="Observed complexity of the convergence scan")
    sim.add_argument("--c-total", type=float, default=3.0, help="Total complexity (p+q)/n")
    sim.add_argument("--z", type=_float_list, default=[0.01, 0.1])
    sim.add_argument("--draws", type=int, default=settings.MC_DRAWS)
    sim.add_argument("--k", type=_float_list, default=None)
    sim.add_argument("--n", type=int, default=100)
    sim.add_argument("--n-list", type=_int_list, default=None)
    sim.add_argument("--upsilon", type=_float_list, default=[0.5])
    sim.add_argument("--m4", type=float, default=3.0)
    sim.add_argument("--latent-law", choices=[v.value for v in LatentDistribution], default="gaussian")
    sim.set_defaults(func=cmd_simulate)
    _apply_defaults(sim, defaults)

    bt = sub.add_parser("backtest", help="Random-feature timing backtest")
    bt.add_argument("--data", default=None, help="Monthly predictor CSV, relative paths resolve under DATA_DIR")
    bt.add_argument("--schema", default=None, help="JSON column mapping overriding the pinned schema")
    bt.add_argument("--z", type=_float_list, default=list(settings.BACKTEST_Z_GRID))
    bt.add_argument("--gammas", type=_float_list, default=None)
    bt.add_argument("--draws", type=int, default=settings.BACKTEST_DRAWS)
    bt.add_argument("--features", type=int, default=settings.BACKTEST_FEATURES)
    bt.add_argument("--window", type=int, default=settings.BACKTEST_WINDOW)
    bt.add_argument("--counterfactual", action="store_true")
    bt.add_argument("--betas", action="store_true")
    bt.add_argument("--linear", action="store_true", help="Add the linear-signal benchmark to table2")
    bt.set_defaults(func=cmd_backtest)
    _apply_defaults(bt, defaults)

    rp = sub.add_parser("replay", help="Re-run a manifest and verify digests")
    rp.add_argument("manifest")
    rp.set_defaults(func=cmd_replay)
    _apply_defaults(rp, defaults)
    _apply_defaults(parser, defaults)
    return parser


def _apply_defaults(parser: argparse.ArgumentParser, defaults: Optional[Dict[str, Any]]) -> None:
    """Set config-file defaults for the flags this parser owns"""
    if not defaults:
        return
    dests = {action.dest for action in parser._actions}
    parser.set_defaults(**{k: v for k, v in defaults.items() if k in dests})


def parse_args(argv: Sequence[str]) -> argparse.Namespace:
    """Parse flags, taking defaults from --config when given; explicit flags win"""
    pre = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    defaults = None
    if known.config:
        raw = json.loads(Path(known.config).read_text())
        defaults = {key.replace("-", "_"): value for key, value in raw.items()}
    return build_parser(defaults).parse_args(argv)


def _jsonable(value: Any) -> Any:
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parse_args(argv)
    configure_logging(args.log_level)
    started = datetime.now(timezone.utc)
    clock = time.perf_counter()
    func: Callable[[argparse.Namespace], List[Path]] = args.func
    try:
        paths = func(args)
    except FileNotFoundError as e:
        hint = "expected a monthly CSV with columns " + ", ".join(market.GOYAL_SCHEMA.values())
        print(json.dumps({"error": "file_not_found", "message": str(e), "details": {"hint": hint}}), file=sys.stderr)
        return 1
    except ValidationError as e:
        fields = [{"field": ".".join(str(part) for part in err["loc"]), "message": err["msg"]} for err in e.errors()]
        error = InputValidationError(f"invalid {args.command} arguments", errors=fields)
        logger.error(f"{args.command} failed: {error.message}")
        print(json.dumps(error.to_dict()), file=sys.stderr)
        return 1
    except DriftLabError as e:
        logger.error(f"{args.command} failed: {e.message}")
        print(json.dumps(e.to_dict()), file=sys.stderr)
        return 1

    if args.command != "replay":
        config: Dict[str, Any] = {k: _jsonable(v) for k, v in vars(args).items() if k != "func"}
        config["argv"] = argv
        manifest = RunManifest(
            command=args.command,
            config=config,
            seeds={"master": args.seed},
            version=settings.VERSION,
            started_at=started,
            wall_clock_seconds=time.perf_counter() - clock,
            outputs=artifacts.digests(paths),
        )
        artifacts.write_manifest(manifest, args.output_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
