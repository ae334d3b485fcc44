"""Command-line interface: ``greedyprecond <subcommand> [options]``."""

import argparse
from dataclasses import fields
import json
import logging
from pathlib import Path
import shutil
import sys

import numpy as np

from ..deploy import load_schedule, save_schedule
from ..exceptions import GreedyPrecondError
from .experiment import (
    ExperimentConfig,
    _coerce,
    _commit,
    _prepare_out_dir,
    _write_manifest,
    compare,
    evaluate,
    load_config_file,
    prepare,
    run_experiment,
    train_schedules,
    write_trace_csv,
)

__all__ = ["main", "build_parser"]

# flags derived from ExperimentConfig; these are handled globally instead
_GLOBAL = {"seed", "out_dir"}


def _add_config_flags(p):
    for f in fields(ExperimentConfig):
        if f.name in _GLOBAL:
            continue
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None, metavar="VALUE",
                       help=f"(default: {_show(f.default)})")


def _show(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return v


def build_parser():
    parser = argparse.ArgumentParser(prog="greedyprecond", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--threads", type=int, default=None,
                        help="limit BLAS threads (use 1 for byte-identical reruns)")
    common.add_argument("--out", default=None, help="output directory or file")
    common.add_argument("--config", default=None, help="key = value configuration file")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_ in [
        ("experiment", "train, evaluate and write all artifacts"),
        ("train", "train schedules and save them"),
        ("baselines", "evaluate classical baselines only"),
    ]:
        p = sub.add_parser(name, parents=[common], help=help_)
        _add_config_flags(p)

    p = sub.add_parser("eval", parents=[common], help="evaluate saved schedules")
    p.add_argument("schedules", nargs="+", help="schedule files")
    _add_config_flags(p)

    p = sub.add_parser("compare", parents=[common], help="merge trace CSVs or artifact directories")
    p.add_argument("inputs", nargs="+")

    p = sub.add_parser("inspect-schedule", parents=[common], help="print a schedule's header")
    p.add_argument("schedule")
    return parser


def _config_from_args(args):
    values = {}
    if args.config:
        values.update(load_config_file(args.config))
    for f in fields(ExperimentConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name not in _GLOBAL:
            values[f.name] = _coerce(f.name, v)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out is not None:
        values["out_dir"] = args.out
    return ExperimentConfig(**values)


def _cmd_train(cfg):
    out, tmp = _prepare_out_dir(cfg.out_dir)
    try:
        prep = prepare(cfg, splits=("train",))
        trained = train_schedules(prep)
        for tag, (sched, trace) in trained.items():
            save_schedule(sched, tmp / f"schedule_{tag}.gps")
            rows = trace.rows()
            keys = list(rows[0])
            lines = [",".join(keys)] + [",".join(_cell(r.get(k, "")) for k in keys) for r in rows]
            (tmp / f"training_{tag}.csv").write_text("\n".join(lines) + "\n")
        _write_manifest(tmp, prep, trained)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit(tmp, out)
    return out


def _cell(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _cmd_eval(cfg, schedule_paths=None):
    schedules = {}
    for p in schedule_paths or ():
        s = load_schedule(p)
        schedules[Path(p).stem.replace("schedule_", "")] = s
    out, tmp = _prepare_out_dir(cfg.out_dir)
    try:
        prep = prepare(cfg, splits=("test_ones", "test_others"))
        for split in ("test_ones", "test_others"):
            results = evaluate(prep, split, schedules, baselines=None if not schedules else ())
            write_trace_csv(tmp / f"trace_{split}.csv", results, cfg.iters)
        _write_manifest(tmp, prep, extra={"schedules": [str(p) for p in schedule_paths or ()]})
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    _commit(tmp, out)
    return out


def _cmd_inspect(path):
    s = load_schedule(path)
    info = dict(s.param.describe())
    info.update(T=s.T, param_dim=s.param.param_dim, tau=s.tau, provenance=s.provenance)
    print(json.dumps(info, indent=2, sort_keys=True))
    for t, th in enumerate(s.thetas):
        print(f"t={t:4d}  |theta|={np.linalg.norm(th):.6e}  sum={th.sum():.6e}")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limiter = None
    if args.threads is not None:
        from threadpoolctl import threadpool_limits

        limiter = threadpool_limits(limits=args.threads)
    try:
        if args.command == "compare":
            text = compare(args.inputs, args.out)
            if args.out is None:
                sys.stdout.write(text)
            return 0
        if args.command == "inspect-schedule":
            _cmd_inspect(args.schedule)
            return 0
        cfg = _config_from_args(args)
        if args.command == "experiment":
            out = run_experiment(cfg)
        elif args.command == "train":
            out = _cmd_train(cfg)
        elif args.command == "eval":
            out = _cmd_eval(cfg, args.schedules)
        else:
            out = _cmd_eval(cfg)
        print(f"artifacts written to {out}")
        return 0
    except (GreedyPrecondError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        if limiter is not None:
            limiter.unregister()


if __name__ == "__main__":
    sys.exit(main())
