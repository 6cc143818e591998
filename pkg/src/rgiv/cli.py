"""Command-line interface: estimate, simulate, test.

Exit codes: 0 success, 2 invalid inputs or configuration, 3 estimation
failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys

import numpy as np

from . import __version__
from .estimators import (
    OptimizerConfig,
    giv_estimate,
    ols_estimate,
    rgiv_estimate,
    rgiv_restricted_estimate,
    two_step_estimate,
)
from .exceptions import ConfigurationError, EstimationError, RgivError, ValidationError
from .inference import aggregate_ci, homogeneity_test, j_test, rgiv_avar
from .io import (
    load_dgp_spec,
    load_panel_with_names,
    load_shock_variances,
    render_report,
    write_report,
)
from .model import ParameterSpace
from .simulation import SCENARIO_NAMES, builtin_scenario, run_scenario

logger = logging.getLogger(__name__)

ESTIMATE_METHODS = (
    "rgiv",
    "rgiv-restricted",
    "rgiv-two-step",
    "giv-equal",
    "giv-oracle",
    "giv-feasible",
    "ols",
)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_ESTIMATION = 3
EXIT_IO = 4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rgiv",
        description="Granular IV estimation robust to heterogeneous spillover coefficients.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate coefficients from a CSV panel")
    est.add_argument("--outcomes", required=True, help="CSV with a unit-name header row")
    est.add_argument("--sizes", required=True, help="CSV of unit,size rows")
    est.add_argument("--method", choices=ESTIMATE_METHODS, default="rgiv")
    est.add_argument("--level", type=float, default=0.95, help="confidence level")
    est.add_argument(
        "--normalize-sizes",
        action="store_true",
        help="rescale sizes to sum to one instead of rejecting them",
    )
    est.add_argument(
        "--shock-variances",
        help="CSV of unit,sigma2 rows (required by --method giv-oracle)",
    )
    est.add_argument("--unit", help="unit name for --method ols")
    est.add_argument("--output", help="write a JSON result here")
    _add_optimizer_flags(est)

    sim = sub.add_parser("simulate", help="run a Monte Carlo coverage study")
    source = sim.add_mutually_exclusive_group(required=True)
    source.add_argument("--scenario", choices=SCENARIO_NAMES, help="built-in design")
    source.add_argument("--spec", help="JSON scenario file")
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sim.add_argument("--level", type=float, default=0.95)
    sim.add_argument(
        "--estimators",
        default="rgiv,giv-feasible,giv-oracle",
        help="comma-separated subset of rgiv,giv-equal,giv-oracle,giv-feasible",
    )
    sim.add_argument(
        "--workers",
        type=int,
        default=None,
        help="process count (default: RGIV_WORKERS environment variable, then serial)",
    )
    sim.add_argument("--output", help="write the report here")
    sim.add_argument(
        "--format",
        choices=("table", "records"),
        default="records",
        help="format for --output; stdout always shows the table",
    )
    _add_optimizer_flags(sim)

    tst = sub.add_parser("test", help="run a specification test on a CSV panel")
    tst.add_argument("--outcomes", required=True)
    tst.add_argument("--sizes", required=True)
    tst.add_argument("--which", choices=("j", "homogeneity"), required=True)
    tst.add_argument("--level", type=float, default=0.95)
    tst.add_argument("--normalize-sizes", action="store_true")
    tst.add_argument("--output", help="write a JSON result here")
    _add_optimizer_flags(tst)
    return parser


_CONFIG_DEFAULTS = OptimizerConfig()
_SPACE_DEFAULTS = ParameterSpace()


def _add_optimizer_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--starts", type=int, default=_CONFIG_DEFAULTS.starts, help="multi-start count"
    )
    parser.add_argument("--max-iters", type=int, default=_CONFIG_DEFAULTS.max_iters)
    parser.add_argument(
        "--opt-seed", type=int, default=_CONFIG_DEFAULTS.seed, help="seed for start draws"
    )
    parser.add_argument("--box-lower", type=float, default=_SPACE_DEFAULTS.lower)
    parser.add_argument("--box-upper", type=float, default=_SPACE_DEFAULTS.upper)
    parser.add_argument("--margin", type=float, default=_SPACE_DEFAULTS.margin)


def _optimizer_from_args(args) -> tuple[ParameterSpace, OptimizerConfig]:
    space = ParameterSpace(lower=args.box_lower, upper=args.box_upper, margin=args.margin)
    config = OptimizerConfig(starts=args.starts, max_iters=args.max_iters, seed=args.opt_seed)
    return space, config


def _hash_payload(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as handle:
        json.dump(payload, handle, sort_keys=True, indent=2)
        handle.write("\n")


def _ci_payload(ci) -> dict:
    return {"lo": ci.lower, "hi": ci.upper, "level": ci.level}


def _cmd_estimate(args) -> int:
    panel, names = load_panel_with_names(args.outcomes, args.sizes, args.normalize_sizes)
    space, config = _optimizer_from_args(args)
    t = panel.n_periods
    n = panel.n_units
    payload: dict = {
        "schema_version": 1,
        "package_version": __version__,
        "method": args.method,
        "units": names,
        "n_periods": t,
        "config_hash": _hash_payload(
            {
                "method": args.method,
                "level": args.level,
                "outcomes": args.outcomes,
                "sizes": args.sizes,
                "starts": args.starts,
                "max_iters": args.max_iters,
                "opt_seed": args.opt_seed,
                "box": [args.box_lower, args.box_upper],
                "margin": args.margin,
            }
        ),
    }

    if args.method in ("rgiv", "rgiv-two-step"):
        estimate_fn = rgiv_estimate if args.method == "rgiv" else two_step_estimate
        est = estimate_fn(panel, space, config)
        avar = rgiv_avar(panel, est.phi_hat)
        ci_s = aggregate_ci(est.phi_hat, avar, panel.sizes, args.level, t)
        ci_e = aggregate_ci(est.phi_hat, avar, np.full(n, 1.0 / n), args.level, t)
        coef_ci = []
        for i in range(n):
            basis = np.zeros(n)
            basis[i] = 1.0
            coef_ci.append(_ci_payload(aggregate_ci(est.phi_hat, avar, basis, args.level, t)))
        payload.update(
            {
                "phi": est.phi_hat.tolist(),
                "objective": est.objective_value,
                "converged": est.converged,
                "n_starts_agreeing": est.n_starts_agreeing,
                "phi_s": {"estimate": float(est.phi_hat @ panel.sizes), **_ci_payload(ci_s)},
                "phi_e": {"estimate": float(np.mean(est.phi_hat)), **_ci_payload(ci_e)},
                "coefficients": coef_ci,
            }
        )
        print(f"method: {args.method}")
        for name, value, ci in zip(names, est.phi_hat, coef_ci):
            print(f"  {name}: {value:.6f}  [{ci['lo']:.6f}, {ci['hi']:.6f}]")
        print(
            f"  phi_S: {payload['phi_s']['estimate']:.6f}  "
            f"[{ci_s.lower:.6f}, {ci_s.upper:.6f}]"
        )
        print(
            f"  phi_E: {payload['phi_e']['estimate']:.6f}  "
            f"[{ci_e.lower:.6f}, {ci_e.upper:.6f}]"
        )
        print(f"  objective: {est.objective_value:.6e}  converged: {est.converged}")
    elif args.method == "rgiv-restricted":
        est = rgiv_restricted_estimate(panel, space, config)
        payload.update(
            {
                "phi": est.phi_hat.tolist(),
                "shared_coefficient": float(est.phi_hat[0]),
                "objective": est.objective_value,
                "converged": est.converged,
            }
        )
        print(f"method: {args.method}")
        print(f"  shared coefficient: {est.phi_hat[0]:.6f}")
        print(f"  objective: {est.objective_value:.6e}")
    elif args.method.startswith("giv-"):
        mode = args.method.removeprefix("giv-")
        sigma2 = None
        if mode == "oracle":
            if not args.shock_variances:
                raise ConfigurationError("--method giv-oracle needs --shock-variances")
            sigma2 = load_shock_variances(args.shock_variances, names)
        est = giv_estimate(panel, mode, sigma2=sigma2)
        ci = aggregate_ci(est.phi_hat, est.avar, np.ones(1), args.level, t)
        payload.update(
            {
                "estimate": float(est.phi_hat[0]),
                "se": est.metadata["se"],
                "se_formula": est.metadata["se_formula"],
                "ci": _ci_payload(ci),
            }
        )
        print(f"method: {args.method}")
        print(
            f"  estimate: {est.phi_hat[0]:.6f}  se: {est.metadata['se']:.6f}  "
            f"[{ci.lower:.6f}, {ci.upper:.6f}]"
        )
    else:
        if not args.unit:
            raise ConfigurationError("--method ols needs --unit")
        if args.unit not in names:
            raise ValidationError(f"unknown unit {args.unit!r}; header has {names}")
        slope = ols_estimate(panel, names.index(args.unit))
        payload.update({"unit": args.unit, "slope": slope})
        print(f"method: ols\n  unit {args.unit}: slope {slope:.6f}")

    if args.output:
        _write_json(args.output, payload)
    return EXIT_OK


def _cmd_simulate(args) -> int:
    if args.scenario:
        spec = builtin_scenario(args.scenario, seed=args.seed or 0)
    else:
        spec = load_dgp_spec(args.spec)
        if args.seed is not None:
            spec = spec.with_seed(args.seed)
    estimators = tuple(tag.strip() for tag in args.estimators.split(",") if tag.strip())
    space, config = _optimizer_from_args(args)
    report = run_scenario(
        spec,
        reps=args.reps,
        estimator_set=estimators,
        level=args.level,
        workers=args.workers,
        config=config,
        space=space,
    )
    print(render_report(report, "table"))
    if args.output:
        write_report(report, args.output, args.format)
    return EXIT_OK


def _cmd_test(args) -> int:
    panel, _ = load_panel_with_names(args.outcomes, args.sizes, args.normalize_sizes)
    space, config = _optimizer_from_args(args)
    est = rgiv_estimate(panel, space, config)
    if args.which == "j":
        result = j_test(panel, est.phi_hat)
    else:
        restricted = rgiv_restricted_estimate(panel, space, config)
        result = homogeneity_test(panel, est, restricted)
    payload = {
        "schema_version": 1,
        "package_version": __version__,
        "test": result.method,
        "statistic": result.statistic,
        "dof": result.dof,
        "p_value": result.p_value,
        "level": args.level,
        "reject": result.p_value < 1.0 - args.level,
    }
    print(
        f"{result.method}: statistic {result.statistic:.4f}, dof {result.dof}, "
        f"p-value {result.p_value:.4f}"
        + ("  (rejected)" if payload["reject"] else "")
    )
    if args.output:
        _write_json(args.output, payload)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "estimate":
            return _cmd_estimate(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        return _cmd_test(args)
    except (ValidationError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except RgivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
