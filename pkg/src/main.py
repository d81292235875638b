import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import pandas as pd
from dotenv import load_dotenv
from pydantic import TypeAdapter, ValidationError

from src.integrations.data_files import (
    DataFile,
    build_fit_report,
    cv_curve_table,
    parse_transform,
    write_curves,
    write_fit_report,
    write_table,
    write_values,
)
from src.models.densities import parse_density
from src.models.errors import ConfigError
from src.models.schemas import (
    VARIANCE_PRESETS,
    BandwidthMode,
    CvBandwidth,
    CvConfig,
    FixedBandwidth,
    GridSpec,
    MmConfig,
    NefPvfVariance,
    SilvermanBandwidth,
    SimulationFile,
    VarianceFunction,
)
from src.services.bandwidth_service import BandwidthService, silverman
from src.services.experiment_service import (
    ANC_SHIFT,
    ExperimentService,
    aggregate_table,
    fit_sample,
    generate_anc_surrogate,
    per_rep_table,
)
from src.services.identifiability_service import check_G_monotone
from src.services.smoothing import DEFAULT_LOG_FLOOR, Kernel

# Load environment variables
load_dotenv(dotenv_path=os.path.join(os.path.dirname(os.path.dirname(__file__)), "config", ".env"))

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else os.getenv("SMOOTHMIX_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(level=level, format=LOG_FORMAT)


def parse_bandwidth(text: str, cv: CvConfig, restart: bool = False) -> BandwidthMode:
    """silverman | cv | fixed=<h>"""
    body = text.strip().lower()
    if body == "silverman":
        return SilvermanBandwidth()
    if body == "cv":
        return CvBandwidth(cv=cv, restart=restart)
    if body.startswith("fixed="):
        try:
            return FixedBandwidth(h=float(body[len("fixed="):]))
        except ValueError:
            raise ConfigError(f"Fixed bandwidth must be a number: '{text}'")
    raise ConfigError(f"Unknown bandwidth mode '{text}', expected silverman, cv or fixed=<h>")


def parse_grid(text: Optional[str]) -> Optional[GridSpec]:
    """lo,hi,n"""
    if text is None:
        return None
    parts = text.split(",")
    if len(parts) != 3:
        raise ConfigError(f"Grid must be lo,hi,n, got '{text}'")
    try:
        return GridSpec(lo=float(parts[0]), hi=float(parts[1]), n_points=int(parts[2]))
    except ValueError as e:
        raise ConfigError(f"Invalid grid '{text}': {str(e)}")


def parse_variance(text: str) -> VarianceFunction:
    """Preset name, 'pvf:<power>[,<scale>]' or a JSON file holding a variance function"""
    body = text.strip()
    if body.lower() in VARIANCE_PRESETS:
        return VARIANCE_PRESETS[body.lower()]
    if body.lower().startswith("pvf:"):
        try:
            values = [float(v) for v in body[4:].split(",")]
        except ValueError:
            raise ConfigError(f"Power variance parameters must be numbers: '{text}'")
        if len(values) not in (1, 2):
            raise ConfigError(f"Expected pvf:<power>[,<scale>], got '{text}'")
        return NefPvfVariance(power=values[0], scale=values[1] if len(values) == 2 else 1.0)
    if os.path.exists(body):
        with open(body, "r", encoding="utf-8") as fh:
            return TypeAdapter(VarianceFunction).validate_json(fh.read())
    raise ConfigError(f"Unknown variance function '{text}', expected one of {sorted(VARIANCE_PRESETS)}, pvf:<power>[,<scale>] or a JSON file")


def _pair(text: str) -> List[float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"Expected lo,hi, got '{text}'")
    return [lo, hi]


def _cv_config(args) -> CvConfig:
    return CvConfig(
        folds=args.folds,
        half_range=args.half_range,
        grid_steps=args.grid_steps,
        warmup=args.warmup,
        fold_seed=args.seed,
    )


def _mm_config(args) -> MmConfig:
    return MmConfig(
        kernel=Kernel(args.kernel),
        grid=parse_grid(args.grid),
        p_init=args.p_init,
        f_init=parse_density(args.f_init) if args.f_init else None,
        tol=args.tol,
        max_iters=args.max_iters,
        log_floor=float(os.getenv("SMOOTHMIX_LOG_FLOOR", str(DEFAULT_LOG_FLOOR))),
    )


def _known(args):
    if not args.known:
        raise ConfigError("--known is required, e.g. --known normal:0,1")
    return parse_density(args.known)


def _echo(args, **extra) -> Dict[str, Any]:
    echo = {k: v for k, v in vars(args).items() if k != "handler"}
    echo.update(extra)
    return echo


def cmd_fit(args) -> int:
    sample = DataFile(args.data, parse_transform(args.transform)).load()
    f0 = _known(args)
    mm = _mm_config(args)
    mode = parse_bandwidth(args.bandwidth, _cv_config(args), args.cv_restart)
    result, curve = fit_sample(sample, f0, mm, mode)

    config = _echo(
        args,
        mm=mm.with_bandwidth(result.bandwidth).model_dump(mode="json"),
        bandwidth_mode=mode.model_dump(mode="json"),
        known_density=f0.model_dump(mode="json"),
        n=sample.n,
        grid_used=[result.f_hat.grid.lo, result.f_hat.grid.hi, result.f_hat.grid.n_points],
    )
    report = build_fit_report(result, f0, config)
    write_fit_report(args.output, report)
    if args.emit_curves:
        prefix = os.path.splitext(args.output)[0]
        header = {"command": "fit", "p_hat": result.p_hat, "h": result.bandwidth, "data": args.data}
        write_curves(prefix, report, header)
        if curve is not None:
            write_table(f"{prefix}_cv.csv", cv_curve_table(curve), {**header, "h_star": curve.h_star})
    print(f"p_hat={result.p_hat:.17g} h={result.bandwidth:.17g} iterations={result.n_iters} stop={result.stop_reason.value}")
    return 0


def cmd_bandwidth(args) -> int:
    sample = DataFile(args.data, parse_transform(args.transform)).load()
    if args.silverman_only:
        print(f"h_silverman={silverman(sample):.17g}")
        return 0
    f0 = _known(args)
    cv = _cv_config(args)
    selection = BandwidthService().select(sample, f0, _mm_config(args), cv)
    header = _echo(args, cv=cv.model_dump(), h_star=selection.h_star, h_silverman=selection.curve.h_silverman)
    write_table(args.output, cv_curve_table(selection.curve), header)
    print(f"h_star={selection.h_star:.17g} h_silverman={selection.curve.h_silverman:.17g}")
    return 0


def cmd_simulate(args) -> int:
    with open(args.spec, "r", encoding="utf-8") as fh:
        simulation = SimulationFile.model_validate_json(fh.read())
    name = simulation.experiment.name
    table, summaries = ExperimentService(max_workers=args.workers).run_file(simulation)

    header = {"command": "simulate", "spec": simulation.model_dump(mode="json")}
    os.makedirs(args.out_dir, exist_ok=True)
    reps = [per_rep_table(summary) for summary in summaries]
    write_table(os.path.join(args.out_dir, f"{name}_reps.csv"), pd.concat(reps, ignore_index=True), header)
    write_table(os.path.join(args.out_dir, f"{name}_aggregate.csv"), aggregate_table(summaries), header)
    with open(os.path.join(args.out_dir, f"{name}_summary.json"), "w", encoding="utf-8") as fh:
        json.dump([summary.model_dump(mode="json") for summary in summaries], fh, indent=2)
    for summary in summaries:
        for note in summary.notes:
            logger.info(f"[{name} p={summary.spec.mixture.p:g} n={summary.spec.n}] {note}")
    print(table.to_string(index=False))
    return 0


def cmd_check_identifiability(args) -> int:
    variance = parse_variance(args.variance)
    report = check_G_monotone(variance, args.mu_f0, tuple(_pair(args.domain)), n_check=args.n_check)
    verdict = "holds" if report.condition_holds else f"fails between mu={report.witness[0]:.6g} and mu={report.witness[1]:.6g}"
    print(f"G(mu) = V(mu) / (mu - {args.mu_f0:g}) strictly increasing on {args.domain}: {verdict}")
    for note in report.notes:
        print(f"note: {note}")
    payload = report.model_dump_json(indent=2)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(payload)
    else:
        print(payload)
    return 0


def cmd_surrogate(args) -> int:
    data = generate_anc_surrogate(args.n, args.seed)
    write_values(args.output, data.points, {"command": "surrogate", "n": args.n, "seed": args.seed, "shift": ANC_SHIFT})
    print(f"Wrote {data.n} surrogate values to {args.output} (fit with --transform log+{ANC_SHIFT:g})")
    return 0


def _add_fit_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("data", help="Data file: one number per line or single-column CSV")
    parser.add_argument("--known", default=None, help="Known component, e.g. normal:0,1 or gamma:2,1")
    parser.add_argument("--kernel", choices=[k.value for k in Kernel], default=Kernel.TRIANGULAR.value)
    parser.add_argument("--p-init", type=float, default=0.3, help="Initial mixing proportion")
    parser.add_argument("--f-init", default=None, help="Initial unknown component, e.g. normal:8,1")
    parser.add_argument("--tol", type=float, default=1e-5)
    parser.add_argument("--max-iters", type=int, default=2000)
    parser.add_argument("--grid", default=None, help="lo,hi,n")
    parser.add_argument("--transform", default=None, help="log+<c> applies x -> ln(x + c)")
    parser.add_argument("--seed", type=int, default=0, help="Seed of the CV fold partition")
    parser.add_argument("--folds", type=int, default=50)
    parser.add_argument("--half-range", type=float, default=0.4)
    parser.add_argument("--grid-steps", type=int, default=10)
    parser.add_argument("--warmup", type=int, default=5)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smoothmix", description="Smoothed-likelihood MM fitting of two-component mixtures with one known component")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    fit = commands.add_parser("fit", help="Fit p and the unknown component")
    _add_fit_options(fit)
    fit.add_argument("--bandwidth", default="silverman", help="silverman | cv | fixed=<h>")
    fit.add_argument("--cv-restart", action="store_true", help="After CV, refit from the initial values")
    fit.add_argument("--emit-curves", action="store_true", help="Also write mixture and component curve CSVs")
    fit.add_argument("-o", "--output", default="fit_report.json")
    fit.set_defaults(handler=cmd_fit)

    bandwidth = commands.add_parser("bandwidth", help="Cross-validate the bandwidth")
    _add_fit_options(bandwidth)
    bandwidth.add_argument("--silverman-only", action="store_true", help="Print the rule-of-thumb bandwidth and stop")
    bandwidth.add_argument("-o", "--output", default="cv_curve.csv")
    bandwidth.set_defaults(handler=cmd_bandwidth)

    simulate = commands.add_parser("simulate", help="Run a replication study from a JSON spec file")
    simulate.add_argument("spec", help="Simulation spec file")
    simulate.add_argument("--out-dir", default="results")
    simulate.add_argument("--workers", type=int, default=None)
    simulate.set_defaults(handler=cmd_simulate)

    check = commands.add_parser("check-identifiability", help="Check that G(mu) = V(mu)/(mu - mu_f0) increases")
    check.add_argument("--variance", required=True, help="normal | poisson | gamma | inverse_gaussian | pvf:<power>[,<scale>] | JSON file")
    check.add_argument("--mu-f0", type=float, required=True)
    check.add_argument("--domain", required=True, help="lo,hi of the unknown component's mean")
    check.add_argument("--n-check", type=int, default=1000)
    check.add_argument("-o", "--output", default=None)
    check.set_defaults(handler=cmd_check_identifiability)

    surrogate = commands.add_parser("surrogate", help="Write synthetic ANC-like data")
    surrogate.add_argument("--n", type=int, default=155)
    surrogate.add_argument("--seed", type=int, default=0)
    surrogate.add_argument("-o", "--output", default="anc_surrogate.txt")
    surrogate.set_defaults(handler=cmd_surrogate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        return args.handler(args)
    except ValidationError as e:
        for error in e.errors():
            location = ".".join(str(part) for part in error["loc"])
            logger.error(f"Invalid input at {location}: {error['msg']}")
        return 1
    except Exception as e:
        logger.error(f"{args.command} failed: {str(e)}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
