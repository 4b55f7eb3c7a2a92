"""Command-line entry point: ``privcxr <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 privacy budget violation,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from privcxr.accountant import DEFAULT_ORDERS, CalibrationError, calibrate_sigma, epsilon_for
from privcxr.config import KEYS, OUTPUT_ROOT_ENV, ConfigError, load_config
from privcxr.data.cohort import generate_cohort
from privcxr.data.io import DatasetFormatError, write_dataset
from privcxr.nn.checkpoint import CheckpointError
from privcxr.nn.layers import NumericalError
from privcxr.training import BudgetExceededError

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit with 2 as well; keep the message format
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    g = p.add_argument_group("config keys (each overrides the file)")
    for key in KEYS:
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V", default=None)


def _config_from(args: argparse.Namespace, **forced):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for key in KEYS:
        v = getattr(args, f"cfg_{key}", None)
        if v is not None:
            overrides[key] = v
    overrides.update({k: v for k, v in forced.items() if v is not None})
    return load_config(args.config, overrides)


def _emit(pairs: dict) -> None:
    for k, v in pairs.items():
        print(f"{k}={v}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def cmd_calibrate(args: argparse.Namespace) -> int:
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    try:
        sigma = calibrate_sigma(args.target_epsilon, args.sampling_rate, args.steps, args.delta)
    except ValueError as exc:  # includes CalibrationError
        raise ConfigError(str(exc)) from exc
    spent = epsilon_for(args.sampling_rate, sigma, args.steps, args.delta, DEFAULT_ORDERS)
    result = {
        "sigma": sigma,
        "epsilon": spent.epsilon,
        "order": spent.order,
        "target_epsilon": args.target_epsilon,
        "delta": args.delta,
        "sampling_rate": args.sampling_rate,
        "steps": args.steps,
    }
    _emit(result)
    if args.json:
        text = json.dumps(result, indent=2, sort_keys=True) + "\n"
        if args.json == "-":
            sys.stdout.write(text)
        else:
            Path(args.json).write_text(text)
    return EXIT_OK


def cmd_generate_cohort(args: argparse.Namespace) -> int:
    cfg = _config_from(args)
    spec = cfg.cohort_spec()
    out = Path(args.out) if args.out else Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / f"cohort_seed{spec.seed}"
    cohort = generate_cohort(spec)
    write_dataset(cohort, out)
    _emit({"out_dir": out, "studies": len(cohort), "patients": len(set(cohort.patient_ids))})
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from privcxr.runner import run_experiment

    cfg = _config_from(args)
    res = run_experiment(cfg)
    priv = res.manifest["identity"]["privacy"]
    _emit({
        "out_dir": res.out_dir,
        "manifest_sha256": res.manifest_hash,
        "mode": cfg.mode,
        "achieved_epsilon": priv.get("achieved_epsilon"),
        "noise_multiplier": priv.get("noise_multiplier"),
        "avg_auroc": f"{res.metrics.mean['auroc']['average']:.4f}",
    })
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    from privcxr.runner import evaluate_run

    rep = evaluate_run(Path(args.run), redraws=args.redraws)
    _emit({"run": args.run, **{f"avg_{m}": f"{rep.mean[m]['average']:.4f}" for m in rep.mean}})
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    from privcxr.runner import audit

    src = args.run or args.predictions
    if not src:
        raise ConfigError("audit needs --run DIR or --predictions FILE")
    groupings = tuple(g.strip() for g in args.grouping.split(",") if g.strip())
    try:
        res = audit(Path(src), groupings, Path(args.out) if args.out else None)
    except (FileNotFoundError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    _emit({"out_dir": res["out_dir"], "manifest_sha256": res["manifest_sha256"]})
    for eps, r in res["pearson_r"].items():
        print(f"pearson_r[{eps}]={'' if r is None else f'{r:.4f}'}")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    from privcxr.runner import sweep_epsilon

    cfg = _config_from(args)
    targets = _floats(args.targets)
    seeds = [int(s) for s in _floats(args.seeds)] if args.seeds else None
    try:
        res = sweep_epsilon(cfg, targets, seeds, include_non_private=not args.no_baseline, jobs=args.jobs,
                            out_dir=Path(args.out) if args.out else None)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _emit({"out_dir": res.out_dir, "manifest_sha256": res.manifest_hash,
           "spearman": "" if res.spearman is None else f"{res.spearman:.4f}", "failures": len(res.failures)})
    for row in res.rows:
        print(f"epsilon={row['epsilon']:g} auroc={row.get('auroc', float('nan')):.4f} runs_ok={row['runs_ok']}")
    if res.baseline:
        print(f"epsilon=inf auroc={res.baseline['auroc']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="privcxr", description="Differentially private multi-label radiograph classification.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("calibrate", help="noise multiplier for a target epsilon")
    c.add_argument("--target-epsilon", type=float, required=True)
    c.add_argument("--delta", type=float, required=True)
    c.add_argument("--sampling-rate", type=float, required=True)
    c.add_argument("--steps", type=int, required=True)
    c.add_argument("--json", metavar="PATH", help="also write JSON ('-' for stdout)")
    c.set_defaults(func=cmd_calibrate)

    g = sub.add_parser("generate-cohort", help="write a synthetic cohort to disk")
    _add_config_args(g)
    g.add_argument("--out")
    g.set_defaults(func=cmd_generate_cohort)

    t = sub.add_parser("train", help="train, evaluate and report one run")
    _add_config_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="re-evaluate a run from its checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--redraws", type=int)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("audit", help="subgroup fairness audit")
    a.add_argument("--run", help="run or sweep directory")
    a.add_argument("--predictions", help="predictions CSV")
    a.add_argument("--grouping", default="age,sex")
    a.add_argument("--out")
    a.set_defaults(func=cmd_audit)

    s = sub.add_parser("sweep", help="one run per epsilon target (and seed), plus trend CSV")
    _add_config_args(s)
    s.add_argument("--targets", default="0.29,0.54,1.06,2.04,4.71,7.89")
    s.add_argument("--seeds")
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--no-baseline", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except BudgetExceededError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CalibrationError, CheckpointError, DatasetFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
