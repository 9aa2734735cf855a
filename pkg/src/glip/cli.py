"""
Command-line interface.

Exit codes: 0 success or passing verdict, 1 failing verdict, 2 bad input,
3 scenario failure, 4 invalid bound report.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from glip import bounds, config as cfgmod, harness
from glip.errors import GlipError

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_SCENARIO, EXIT_INVALID = 0, 1, 2, 3, 4


def dumps17(obj, indent: int = 2, _level: int = 0) -> str:
    """JSON with every float at 17 significant digits; non-finite floats become strings."""
    pad = " " * (indent * (_level + 1))
    end = " " * (indent * _level)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps17(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + f"\n{end}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        return "[\n" + ",\n".join(pad + dumps17(v, indent, _level + 1) for v in obj) + f"\n{end}]"
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, int):
        return str(obj)
    if isinstance(obj, float):
        return f"{obj:.17g}" if math.isfinite(obj) else json.dumps(str(obj))
    return json.dumps(str(obj) if not isinstance(obj, str) else obj)


def _fail(code: int, message: str) -> int:
    print(f"glip: {message}", file=sys.stderr)
    return code


def _load_config(path: str, seed: int | None = None, replicates: int | None = None) -> dict:
    """Read a config, apply command-line overrides, then normalize."""
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise cfgmod.ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise cfgmod.ConfigError(f"invalid JSON in {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise cfgmod.ConfigError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    elif "seed" not in raw and os.environ.get("GLIP_SEED"):
        try:
            raw["seed"] = int(os.environ["GLIP_SEED"])
        except ValueError:
            raise cfgmod.ConfigError("GLIP_SEED must be an integer") from None
    if replicates is not None:
        raw["replicates"] = replicates
    return cfgmod.normalize(raw)


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args.config, args.seed, args.replicates)
    except cfgmod.ConfigError as exc:
        return _fail(EXIT_INPUT, str(exc))
    if args.dump_config:
        print(cfgmod.dump(cfg))
        return EXIT_OK
    if not args.out:
        return _fail(EXIT_INPUT, "run needs --out")
    if args.parallel < 1:
        return _fail(EXIT_INPUT, "--parallel must be >= 1")
    try:
        table = harness.run_scenario(cfg, parallel=args.parallel, timing=args.timing)
    except cfgmod.ConfigError as exc:
        return _fail(EXIT_INPUT, str(exc))
    except GlipError as exc:
        return _fail(EXIT_SCENARIO, f"scenario failed: {exc}")
    table.write(args.out)
    if table.scenario_failed:
        return _fail(EXIT_SCENARIO, f"{100 * table.failed_fraction:.0f}% of rows failed")
    return EXIT_OK


def cmd_bound(args) -> int:
    try:
        cfg = _load_config(args.config)
    except cfgmod.ConfigError as exc:
        return _fail(EXIT_INPUT, str(exc))
    if not 0 < args.tau < 1:
        return _fail(EXIT_INPUT, "--tau must lie in (0, 1)")
    try:
        delta = None
        if args.delta is not None:
            if args.delta < 0:
                return _fail(EXIT_INPUT, "--delta must be non-negative")
            delta = args.delta
        elif args.delta_auto is not None:
            a, alpha = args.delta_auto
            delta = bounds.delta_schedule(args.tau, alpha, a)
        problem = harness.build_problem(cfg, args.tau)
    except (GlipError, cfgmod.ConfigError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    if args.rho is not None:
        rho = args.rho
    else:
        rho = harness.data_kf_bound(problem, harness.metric_scales(cfg, problem)[1])
        rho = rho if math.isfinite(rho) else 0.0
    try:
        report = harness.row_bound(cfg, problem, rho, None, delta)
    except GlipError as exc:
        report = harness._invalid_report(f"{type(exc).__name__}: {exc}")
    payload = {"scenario": cfg["scenario"], "tau": args.tau, "nu": problem.nu, "rho_data": rho, **report.to_dict()}
    print(dumps17(payload))
    return EXIT_OK if report.valid else EXIT_INVALID


def _resolve_prediction(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    return bounds.predicted_exponent(bounds.ProblemClass(text))


def cmd_slope(args) -> int:
    if args.tol < 0:
        return _fail(EXIT_INPUT, "--tol must be non-negative")
    try:
        predicted = _resolve_prediction(args.predicted)
    except ValueError:
        choices = ", ".join(c.value for c in bounds.ProblemClass)
        return _fail(EXIT_INPUT, f"--predicted must be a number or one of: {choices}")
    try:
        rows = harness.read_rows(Path(args.input).read_text())
        fit = harness.fit_slope(rows)
    except OSError as exc:
        return _fail(EXIT_INPUT, f"cannot read {args.input}: {exc.strerror}")
    except ValueError as exc:
        return _fail(EXIT_INPUT, f"malformed results: {exc}")
    verdict = harness.compare(fit, predicted, args.tol)
    print(dumps17({"fit": fit.to_dict(), "verdict": verdict.to_dict()}))
    return EXIT_OK if verdict.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="glip", description="Posterior contraction experiments for generalised linear inverse problems.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and write CSV plus JSON sidecar")
    run.add_argument("--config", required=True, help="scenario config (JSON)")
    run.add_argument("--out", help="result CSV path; the sidecar gets a .json suffix")
    run.add_argument("--seed", type=int, help="master seed (default: config, then $GLIP_SEED, then 0)")
    run.add_argument("--replicates", type=int, help="override the number of outer replicates")
    run.add_argument("--parallel", type=int, default=1, help="worker processes")
    run.add_argument("--dump-config", action="store_true", help="print the normalized config and exit")
    run.add_argument("--timing", action="store_true", help="record wall-clock time per row (breaks byte-identity)")
    run.set_defaults(func=cmd_run)

    bound = sub.add_parser("bound", help="print the theoretical bound as JSON")
    bound.add_argument("--config", required=True)
    bound.add_argument("--tau", type=float, required=True)
    group = bound.add_mutually_exclusive_group()
    group.add_argument("--delta", type=float, help="localization radius")
    group.add_argument("--delta-auto", type=float, nargs=2, metavar=("A", "ALPHA"),
                       help="radius from the schedule (-tau log tau)^(1/((1+A) ALPHA))")
    bound.add_argument("--rho", type=float, help="data Ky Fan distance (default: analytic bound, else 0)")
    bound.set_defaults(func=cmd_bound)

    slope = sub.add_parser("slope", help="fit and judge the contraction slope of a result CSV")
    slope.add_argument("--in", dest="input", required=True)
    slope.add_argument("--predicted", required=True, help="exponent or problem class")
    slope.add_argument("--tol", type=float, required=True)
    slope.set_defaults(func=cmd_slope)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
