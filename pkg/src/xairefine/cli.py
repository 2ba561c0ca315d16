"""Command-line entry point: ``python -m xairefine <command> --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import attacks, certifier, harness, lime, nn
from .config import parse_config
from .errors import ConfigError, FormatError
from .spurious import SpuriousSet

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _common(p):
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--out", default=None, help="output directory (default: config output.dir)")
    p.add_argument("--threads", type=int, default=None, help="worker cap; results do not change")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xairefine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("run", help="full baseline-vs-refined pipeline"))

    p = sub.add_parser("explain", help="dump LIME attributions for test indices")
    _common(p)
    p.add_argument("--model", default=None, help="saved model (default: train the baseline)")
    p.add_argument("--indices", type=int, nargs="+", default=[0])

    p = sub.add_parser("certify", help="distortion bounds for a saved model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--spurious", type=int, nargs="*", default=[],
                   help="feature indices to mask in L_eff")

    p = sub.add_parser("attack-sweep", help="FGSM/PGD accuracy sweep for a saved model")
    _common(p)
    p.add_argument("--model", required=True)
    return parser


def _load_cfg(args):
    cfg = parse_config(args.config, seed_override=args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("must be >= 1", "threads")
        cfg.raw["threads"] = args.threads
    out = Path(args.out if args.out is not None else cfg["output"]["dir"])
    return cfg, out


def _model_or_baseline(args, cfg, train):
    if args.model:
        return nn.load_model(args.model)
    return harness.train_baseline(cfg, train)


def cmd_run(args) -> int:
    cfg, out = _load_cfg(args)
    try:
        report = harness.run_experiment(cfg, out)
    except harness.ExperimentFailed as exc:
        harness.emit_report(exc.report, out / "report.json", out)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    paths = harness.emit_report(report, out / "report.json", out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return EXIT_OK


def cmd_explain(args) -> int:
    cfg, out = _load_cfg(args)
    train, test, _, _ = harness.load_data(cfg)
    model = _model_or_baseline(args, cfg, train)
    lcfg = harness.lime_config(cfg, train)
    records = []
    for i in args.indices:
        if not 0 <= i < test.n:
            raise ConfigError(f"test index {i} out of range [0, {test.n})", "indices")
        records.append(lime.explain(model, test.inputs[i], lcfg.with_seed(lcfg.seed + i))
                       .to_dict(input_index=i))
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attributions.json"
    path.write_text(json.dumps({"schema": harness.SCHEMA, "attributions": records}, indent=2))
    print(f"attributions: {path}")
    return EXIT_OK


def cmd_certify(args) -> int:
    cfg, out = _load_cfg(args)
    _, test, _, _ = harness.load_data(cfg)
    model = nn.load_model(args.model)
    ss = SpuriousSet.from_indices(args.spurious, test.d)
    plain, masked = harness.certify(cfg, model, test, ss, None)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "bounds.json"
    path.write_text(json.dumps(harness._jsonable({"schema": harness.SCHEMA,
                                                  "bounds": plain.to_dict(),
                                                  "bounds_masked": masked.to_dict()}), indent=2))
    plain.write_csv(out / "bounds.csv")
    print(f"bounds: {path}")
    return EXIT_OK


def cmd_attack_sweep(args) -> int:
    cfg, out = _load_cfg(args)
    _, test, _, _ = harness.load_data(cfg)
    model = nn.load_model(args.model)
    rows = [{"attack": "none", "eps": 0.0, "accuracy": attacks.evaluate(model, test).accuracy}]
    rows += harness.attack_sweep(cfg, model, test)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "attack_sweep.csv"
    with open(path, "w") as fh:
        fh.write("eps,attack,model,accuracy\n")
        for r in rows:
            fh.write(f"{r['eps']!r},{r['attack']},model,{r['accuracy']!r}\n")
    print(f"attack_sweep: {path}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "explain": cmd_explain, "certify": cmd_certify,
            "attack-sweep": cmd_attack_sweep}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ArithmeticError, RuntimeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
