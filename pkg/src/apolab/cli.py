"""Command-line entry point: ``apolab <subcommand> [options]``.

Exit codes: 0 success, 1 a verification that ran but did not hold,
2 invalid input or config, 3 numeric failure, 4 I/O failure.  Failures
print a JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import corank, datagen, experiment, prefmetrics, probe, seqmodel, theoryx
from .errors import InputDomainError, NumericFailure

EXIT_OK, EXIT_FAILED_CHECK, EXIT_INPUT, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4

SHORTCUTS = {
    "scenario": "task.scenario",
    "dataset_size": "task.dataset_size",
    "kind": "model.kind",
    "method": "train.method",
    "steps": "train.steps",
    "batch_size": "train.batch_size",
    "learning_rate": "train.learning_rate",
    "beta": "train.beta",
    "probe_every": "train.probe_every",
    "alpha_mode": "train.alpha_mode",
    "optimizer": "train.optimizer",
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, allow_nan=False)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)


def _config_doc(args) -> dict:
    doc = experiment.load_config_doc(args.config) if args.config else {}
    overrides = {}
    for name, key in SHORTCUTS.items():
        value = getattr(args, name, None)
        if value is not None:
            overrides[key] = value
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise experiment.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return experiment.apply_overrides(doc, overrides)


# -- subcommands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    doc = _config_doc(args)
    cfg = experiment.parse_config(doc)
    out = Path(args.out or cfg.outputs.directory)
    with experiment.run_lock(out):
        task = experiment.build_task(cfg)
        data = datagen.gen_dataset(task, experiment.subseed(cfg.seed, "dataset"),
                                   cfg.task.dataset_size)
        pset, dropped = datagen.build_probe(task, data, experiment.subseed(cfg.seed, "probe"),
                                            cfg.probe.size)
        bench = experiment.Workbench(cfg, task, data, pset, dropped, base=None)
        experiment.write_inputs(bench, out)
    _emit({"directory": str(out), "task_fingerprint": task.fingerprint(),
           "examples": len(data), "probe_entries": len(pset), "probe_dropped": dropped}, None)
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _config_doc(args)
    out = experiment.run_experiment(doc, args.out)
    cfg = experiment.parse_config(doc)
    summary = {"directory": str(out), "methods": {}}
    for m in cfg.train.methods:
        s = json.loads((out / m / "summary.json").read_text())["metrics"]
        summary["methods"][m] = {k: s[k] for k in ("pass_rate", "preference_rate",
                                                    "final_argmax_logprob")}
        summary["methods"][m]["squeezed"] = s["squeeze"]["squeezed"]
    _emit(summary, None)
    return EXIT_OK


def cmd_probe(args) -> int:
    if args.trace:
        trace = probe.DynamicsTrace.read_csv(args.trace)
        if not trace.rows:
            raise InputDomainError("trace has no rows")
        lo = trace.rows[0].step if args.from_step is None else args.from_step
        hi = trace.rows[-1].step if args.to_step is None else args.to_step
        _emit(probe.detect_squeeze(trace, lo, hi), args.out)
        return EXIT_OK
    if not (args.checkpoint and args.probe_file):
        raise InputDomainError("probe needs --trace, or both --checkpoint and --probe-file")
    policy = seqmodel.load_checkpoint(args.checkpoint)
    _, pset = datagen.load_probe(args.probe_file)
    values, argmax = probe.trace_confidence(policy, pset)
    _emit({"step": policy.step, **values, "argmax": argmax}, args.out)
    return EXIT_OK


def cmd_verify(args) -> int:
    report = theoryx.verify_counterexample(beta=args.beta, tolerance=args.tolerance,
                                          steps=args.max_steps, lr=args.lr,
                                          geometry=args.geometry)
    _emit(report.to_dict(), args.out)
    return EXIT_OK if report.ok else EXIT_FAILED_CHECK


def cmd_corank(args) -> int:
    pm = corank.load_pass_matrix(args.input)
    state = corank.corank(pm, args.damping, args.iterations)
    _emit(corank.result_json(state, args.damping, args.iterations), args.out)
    return EXIT_OK


def cmd_metrics(args) -> int:
    outcomes = prefmetrics.load_outcomes(args.input)
    ks = [int(k) for k in args.k.split(",") if k.strip()]
    rows = prefmetrics.metrics_report(outcomes, ks, args.aggregation)
    _emit({"problems": len(outcomes), "rows": rows}, args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    out = args.out or str(run_dir / "report.json")
    _emit(experiment.emit_report(run_dir), out)
    return EXIT_OK


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def global_flags(default):
        g = argparse.ArgumentParser(add_help=False, argument_default=default)
        g.add_argument("--seed", type=int, help="top-level seed (overrides the config)")
        g.add_argument("--out", help="output directory (gen, train) or file (others)")
        g.add_argument("--config", help="config file, or the name of a bundled config")
        g.add_argument("-v", "--verbose", action="store_true")
        return g

    # flags are accepted before or after the subcommand
    common = global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(prog="apolab", parents=[global_flags(None)],
                                     description="Preference-optimization dynamics lab.")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_flags(p):
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a dotted config key, e.g. train.steps=200")
        p.add_argument("--scenario", choices=datagen.SCENARIOS)
        p.add_argument("--dataset-size", type=int)
        p.add_argument("--kind", choices=seqmodel.KINDS)
        p.add_argument("--method", type=lambda s: s.split(",") if "," in s else s,
                       help="one method or a comma-separated list")
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--learning-rate", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--probe-every", type=int)
        p.add_argument("--alpha-mode", choices=("stop_gradient", "differentiated"))
        p.add_argument("--optimizer", choices=("sgd", "adam"))

    p = sub.add_parser("gen", parents=[common], help="generate task, dataset and probe set")
    config_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="run the configured methods")
    config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", parents=[common],
                       help="score a checkpoint on a probe set, or test a trace for squeezing")
    p.add_argument("--checkpoint")
    p.add_argument("--probe-file")
    p.add_argument("--trace")
    p.add_argument("--from-step", type=int)
    p.add_argument("--to-step", type=int)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("verify-theorem", parents=[common],
                       help="check the three-action counter-example")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--max-steps", type=int, default=200_000)
    p.add_argument("--geometry", choices=theoryx.GEOMETRIES, default="simplex")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("corank", parents=[common], help="co-rank a pass/fail matrix")
    p.add_argument("--input", required=True, help="CSV of 0/1 rows or JSON {n, m, rows}")
    p.add_argument("--damping", type=float, default=corank.DEFAULT_DAMPING)
    p.add_argument("--iterations", type=int, default=corank.DEFAULT_ITERATIONS)
    p.set_defaults(func=cmd_corank)

    p = sub.add_parser("metrics", parents=[common], help="pass@k and preference@k from counts")
    p.add_argument("--input", required=True, help="JSONL of {n, pass_count, c_p}")
    p.add_argument("--k", default="1", help="comma-separated k values")
    p.add_argument("--aggregation", choices=prefmetrics.AGGREGATIONS, default="micro")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("report", parents=[common], help="compare method runs in a directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def _error(code: int, exc: BaseException) -> int:
    record = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(record), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericFailure as exc:
        return _error(EXIT_NUMERIC, exc)
    except (InputDomainError, ValueError, KeyError) as exc:
        return _error(EXIT_INPUT, exc)
    except OSError as exc:
        return _error(EXIT_IO, exc)


if __name__ == "__main__":
    sys.exit(main())
