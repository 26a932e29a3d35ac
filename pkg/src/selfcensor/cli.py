"""Command-line interface.

Subcommands:

* ``estimate``      fit one pipeline on a CSV dataset and report the target
* ``simulate``      run the Monte Carlo scenario study
* ``oracle-check``  verify discrete identification round-trips
* ``validate``      pattern/positivity report for a dataset

Exit codes: 0 success, 1 input or validation error, 2 non-convergence,
3 identification failure.  All output is deterministic given the inputs
and seeds; reports are written as JSON plus aligned text.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import oracle, simharness
from .config import ConfigError
from .data import DataError, read_csv
from .eesolve import SingularJacobianError, bootstrap
from .estimators import PatternError, estimate
from .oracle import IdentificationError, PositivityError
from .patterns import validate_positivity

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NONCONVERGED = 2
EXIT_IDENTIFICATION = 3


def _json_dump(obj, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"
    if path:
        Path(path).write_text(text)
    return text


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _aligned(pairs: list[tuple[str, str]]) -> str:
    width = max(len(k) for k, _ in pairs)
    return "\n".join(f"{k.ljust(width)}  {v}" for k, v in pairs)


def _threads(args) -> int:
    env = os.environ.get("SELFCENSOR_THREADS")
    if args.threads is not None:
        return max(1, args.threads)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return 1


def _load_dataset(args, cfg):
    schema = cfgmod.data_schema_from_config(cfg)
    return read_csv(args.data, covariates=schema["covariates"],
                    outcomes=schema["outcomes"],
                    missing_tokens=schema["missing_tokens"])


def _cmd_estimate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    data = _load_dataset(args, cfg)
    spec = cfgmod.spec_from_config(cfg)
    functional = cfgmod.functional_from_config(cfg, args.functional)
    opts = cfgmod.estimate_options_from_config(cfg)
    result = estimate(data, spec, functional, method=args.method, **opts)
    report = result.to_dict()
    report["functional"] = functional.description
    if args.bootstrap:
        def pipeline(d):
            res = estimate(d, spec, functional, method=args.method,
                           compute_covariance=False, **opts)
            if not res.converged:
                raise RuntimeError("replicate did not converge")
            return res.psi_hat
        boot = bootstrap(data, pipeline, n_boot=args.bootstrap,
                         seed=args.seed)
        report["bootstrap"] = {
            "n_boot": args.bootstrap,
            "n_failed": boot.n_failed,
            "percentile_ci": boot.intervals.tolist(),
            "seed": args.seed,
        }
    text = _json_dump(report, args.out)
    pairs = [("method", result.method),
             ("psi_hat", np.array2string(result.psi_hat, precision=6)),
             ("psi_se", np.array2string(result.psi_se, precision=6)),
             ("gamma_hat", np.array2string(
                 np.asarray(result.nuisance["gamma"]), precision=6)),
             ("converged", str(result.converged))]
    for con in result.contrasts:
        pairs.append((con["name"],
                      f"{con['estimate']:.6f} (se {con['se']:.6f})"))
    print(_aligned(pairs))
    if not args.out:
        print(text, end="")
    if not result.converged:
        print("estimation did not converge", file=sys.stderr)
        return EXIT_NONCONVERGED
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    data = _load_dataset(args, cfg)
    opts = cfgmod.estimate_options_from_config(cfg)
    report = validate_positivity(data.pattern_set(),
                                 min_count=opts.get("min_count", 5),
                                 min_propensity=opts.get("min_propensity", 1e-3))
    payload = report.to_dict()
    payload["pattern_counts"] = {
        "".join(map(str, r)): c
        for r, c in sorted(data.pattern_set().counts.items())}
    text = _json_dump(payload, args.out)
    print(text, end="")
    return EXIT_OK if report.valid else EXIT_INPUT


def _cmd_simulate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    configs = cfgmod.scenario_configs_from_config(cfg, seed=args.seed,
                                                  n_jobs=_threads(args))
    outdir = Path(args.out) if args.out else None
    if outdir:
        outdir.mkdir(parents=True, exist_ok=True)
    reports = []
    for sc in configs:
        rep = simharness.run_scenario(sc)
        reports.append(rep)
        if outdir:
            rep.replicates.to_csv(outdir / f"replicates_{rep.scenario}.csv",
                                  index=False)
    text, csv_text = simharness.coverage_table(reports)
    print(text)
    for rep in reports:
        for flag in rep.flags:
            print(f"warning [{rep.scenario}]: {flag}", file=sys.stderr)
    if outdir:
        (outdir / "coverage.csv").write_text(csv_text)
        _json_dump([rep.to_dict() for rep in reports],
                   outdir / "report.json")
    return EXIT_OK


def _cmd_oracle_check(args) -> int:
    cfg = cfgmod.load_config(args.config)
    node = cfg.get("oracle", {}) or {}
    count = int(node.get("count", 10))
    seed = args.seed if args.seed is not None else int(node.get("seed", 0))
    p = int(node.get("p", 2))
    n_levels = int(node.get("n_levels", 2))
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(count):
        spec, ps = oracle.random_self_censoring_spec(rng, p=p,
                                                     n_levels=n_levels)
        joint = oracle.construct_self_censoring_joint(spec, ps)
        rebuilt = oracle.reconstruct_joint(joint.observed())
        err = float(np.abs(rebuilt.table - joint.table).max())
        worst = max(worst, err)
        if err > 1e-8:
            print(f"round-trip {k}: max error {err:.3e} exceeds 1e-8")
            return EXIT_IDENTIFICATION
    print(f"{count} identification round-trips passed "
          f"(worst max error {worst:.3e})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="selfcensor",
        description="Estimation for self-censoring nonmonotone missing data")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap worker count (default 1; env SELFCENSOR_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="fit one pipeline on a CSV dataset")
    est.add_argument("--data", required=True)
    est.add_argument("--config", required=True)
    est.add_argument("--method", choices=("ipw", "reg", "dr", "mar"),
                     default="dr")
    est.add_argument("--functional", choices=("mean", "risk-diff"),
                     default=None)
    est.add_argument("--bootstrap", type=int, default=0,
                     help="number of bootstrap replicates (0 = off)")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--out", default=None, help="write JSON report here")
    est.set_defaults(func=_cmd_estimate)

    sim = sub.add_parser("simulate", help="run the Monte Carlo scenario study")
    sim.add_argument("--config", required=True)
    sim.add_argument("--out", default=None, help="output directory")
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(func=_cmd_simulate)

    orc = sub.add_parser("oracle-check",
                         help="verify identification round-trips")
    orc.add_argument("--config", required=True)
    orc.add_argument("--seed", type=int, default=None)
    orc.set_defaults(func=_cmd_oracle_check)

    val = sub.add_parser("validate", help="pattern/positivity report")
    val.add_argument("--data", required=True)
    val.add_argument("--config", required=True)
    val.add_argument("--out", default=None)
    val.set_defaults(func=_cmd_validate)
    return parser


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, DataError, PatternError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (IdentificationError, PositivityError, SingularJacobianError) as exc:
        print(f"identification failure: {exc}", file=sys.stderr)
        return EXIT_IDENTIFICATION


def main() -> None:
    sys.exit(cli_main())
