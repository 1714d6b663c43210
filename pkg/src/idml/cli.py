"""Command-line entry point.

Subcommands: synth, train, eval, sweep, gradcheck, diagnose. Every command
is deterministic under --seed. Exit codes: 0 success, 2 configuration or
input error, 3 numerical failure, 4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

# Single-threaded BLAS by default: threaded reductions reorder float sums,
# which would break byte-identical reruns. IDML_THREADS raises the cap (it
# also bounds sweep workers); explicitly-set *_NUM_THREADS vars win.
_cap = os.environ.get("IDML_THREADS", "").strip() or "1"
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _cap)

import dataclasses

from idml.core import (
    FormatError,
    NumericalFailure,
    ParameterError,
    ShapeError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_GRADCHECK = 4


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="PATH", help="RunConfig JSON file")
    p.add_argument("--seed", type=int, metavar="N", help="override every stream's seed")
    p.add_argument("--output", metavar="DIR", help="output directory")
    p.add_argument("--metric", metavar="NAME", help="training metric selector")
    p.add_argument("--loss", metavar="NAME", help="loss selector")
    p.add_argument("--tau", type=float, metavar="F", help="metric temperature")
    p.add_argument("--gamma", type=float, metavar="F", help="metric uncertainty bias")
    p.add_argument("--test-metric", metavar="NAME", help="retrieval metric at test time")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="idml",
        description="Introspective deep metric learning toolkit.",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset CSV")
    _add_common(p)

    p = sub.add_parser("train", help="train a model and write run outputs")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")

    p = sub.add_parser("sweep", help="run one config across a parameter grid")
    _add_common(p)
    p.add_argument("--param", required=True, metavar="NAME")
    p.add_argument("--values", required=True, metavar="V1,V2,...")
    p.add_argument("--parallel", action="store_true", help="run sweep points in processes")

    p = sub.add_parser("gradcheck", help="finite-difference and attenuation checks")
    _add_common(p)

    p = sub.add_parser("diagnose", help="full report plus per-sample uncertainty")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--data", required=True, metavar="PATH")
    return ap


def _load_config(args):
    from idml import harness

    if args.config:
        try:
            with open(args.config) as f:
                raw = json.load(f)
        except json.JSONDecodeError as e:
            raise FormatError(f"{args.config}: {e}") from None
        cfg = harness.config_from_json_dict(raw)
    else:
        cfg = harness.desk_config()
    updates = {}
    if args.loss:
        updates["loss"] = args.loss
    if args.metric:
        updates["metric"] = args.metric
    if getattr(args, "test_metric", None):
        updates["test_metric"] = args.test_metric
    if args.tau is not None or args.gamma is not None:
        mp = cfg.metric_params
        mp_updates = {}
        if args.tau is not None:
            mp_updates["tau"] = args.tau
        if args.gamma is not None:
            mp_updates["gamma"] = args.gamma
        updates["metric_params"] = dataclasses.replace(mp, **mp_updates)
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["data"] = dataclasses.replace(cfg.data, seed=args.seed)
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    return cfg


def _cmd_synth(args) -> int:
    from idml import data as data_mod

    cfg = _load_config(args)
    ds = data_mod.generate(cfg.data)
    out_dir = args.output or "."
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "dataset.csv")
    data_mod.save_csv(ds, path)
    n_train = int(ds.is_train.sum())
    print(f"wrote {path}: {len(ds)} samples, {n_train} train / {len(ds) - n_train} test")
    return EXIT_OK


def _cmd_train(args) -> int:
    from idml import harness

    cfg = _load_config(args)
    record = harness.train(cfg, output_dir=args.output)
    final = record.final
    r1 = final.recall_at_k.get(1)
    print(
        f"trained {cfg.loss}/{cfg.metric} for {cfg.epochs} epochs: "
        f"final loss {record.epochs[-1].loss:.6f}, R@1 {r1:.4f}, NMI {final.nmi:.4f}"
    )
    if args.output:
        print(f"outputs in {args.output}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from idml import harness

    cfg = _load_config(args)
    report, _ = harness.diagnose(
        args.checkpoint,
        args.data,
        seed=cfg.seed,
        test_metric=cfg.test_metric,
        mp=cfg.metric_params,
        output_dir=args.output,
    )
    print(json.dumps(report.to_json_dict(), sort_keys=True, indent=2))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from idml import harness

    cfg = _load_config(args)
    try:
        values = [float(v) if "." in v or "e" in v.lower() else int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ParameterError(f"bad sweep values {args.values!r}") from None
    records = harness.sweep(
        cfg, args.param, values, output_dir=args.output, parallel=args.parallel
    )
    for v, rec in zip(values, records):
        print(f"{args.param}={v}: R@1 {rec.final.recall_at_k.get(1):.4f}, NMI {rec.final.nmi:.4f}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from idml import harness

    cfg = _load_config(args)
    outcome = harness.gradcheck(cfg)
    print(outcome.summary())
    return EXIT_OK if outcome.passed else EXIT_GRADCHECK


def _cmd_diagnose(args) -> int:
    from idml import harness

    cfg = _load_config(args)
    report, rows = harness.diagnose(
        args.checkpoint,
        args.data,
        seed=cfg.seed,
        test_metric=cfg.test_metric,
        mp=cfg.metric_params,
        output_dir=args.output,
    )
    print(json.dumps(report.to_json_dict(), sort_keys=True, indent=2))
    print(f"{len(rows)} per-sample uncertainty rows", file=sys.stderr)
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
    "diagnose": _cmd_diagnose,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ParameterError, FormatError, ShapeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
