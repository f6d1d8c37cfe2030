"""Command-line entry point: ``opal <mode> [options]``.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from .autodiff import NonFiniteError
from .config import MODES, EvalConfig, ExperimentConfig, Paths, load_config, parse_value, profile
from .meta_train import ConfigError, TrainConfig

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _add_dataclass_flags(parser, cls, prefix=""):
    group = parser.add_argument_group(cls.__name__)
    for f in dataclasses.fields(cls):
        flag = "--" + (prefix + f.name).replace("_", "-")
        group.add_argument(flag, dest=f"{cls.__name__}.{f.name}", default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opal", description=__doc__.splitlines()[0])
    parser.add_argument("mode", choices=[m.replace("_", "-") for m in MODES])
    parser.add_argument("--config", help="INI file with [experiment]/[train]/[eval]/[paths]")
    parser.add_argument("--profile", choices=["standard", "desk"], default=None)
    parser.add_argument("--function", default=None, help="function for graph-dump/inspect-program")
    parser.add_argument("--dim", type=int, default=None)
    parser.add_argument("--run-seed", dest="seed", type=int, default=None,
                        help="run seed for graph-dump/inspect-program")
    parser.add_argument("--no-resume", action="store_true", help="ignore --checkpoint-in when training")
    parser.add_argument("-v", "--verbose", action="store_true")
    _add_dataclass_flags(parser, TrainConfig)
    _add_dataclass_flags(parser, EvalConfig, prefix="eval_")
    _add_dataclass_flags(parser, Paths)
    return parser


def config_from_args(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config, profile(args.profile) if args.profile else None)
    else:
        cfg = profile(args.profile or "standard")
    cfg.mode = args.mode.replace("-", "_")
    for name in ("function", "dim", "seed"):
        if getattr(args, name) is not None:
            setattr(cfg, name, getattr(args, name))
    for section, cls in (("train", TrainConfig), ("eval", EvalConfig), ("paths", Paths)):
        obj = getattr(cfg, section)
        for f in dataclasses.fields(cls):
            raw = getattr(args, f"{cls.__name__}.{f.name}")
            if raw is None:
                continue
            kind = f.type if isinstance(f.type, str) else f.type.__name__
            try:
                setattr(obj, f.name, parse_value(kind, raw))
            except ValueError as exc:
                raise ConfigError(f"{section}.{f.name}", str(exc)) from None
    return cfg.validate()


def run(cfg: ExperimentConfig, resume=True) -> str:
    from . import experiments as ex

    if cfg.mode == "train":
        result, ckpt = ex.cmd_train(cfg, resume=resume)
        return f"trained to episode {result.episode}; checkpoint {ckpt}"
    if cfg.mode == "evaluate":
        records, _ = ex.cmd_evaluate(cfg)
        return f"{len(records)} records -> {cfg.paths.resolve('records_out', 'records.csv')}"
    if cfg.mode == "compare":
        path, report = ex.cmd_compare(cfg)
        return report["summary.txt"] + f"report -> {path}"
    if cfg.mode == "ablate":
        rows, path = ex.cmd_ablate(cfg)
        lines = [f"{r['variant']:<8s} avg_rank={r['avg_rank']:.3f} "
                 f"unique={r['unique_programs']} non_de={r['non_de_frac']:.3f}" for r in rows]
        return "\n".join(lines + [f"report -> {path}"])
    if cfg.mode == "graph_dump":
        _, side = ex.cmd_graph_dump(cfg)
        return f"N={side['N']} k_eff={side['k_eff']} -> {cfg.paths.out_dir}"
    return ex.cmd_inspect_program(cfg).rstrip()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        print(run(cfg, resume=not args.no_resume))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        code = EXIT_IO if isinstance(exc, OSError) else EXIT_CONFIG
        print(f"error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
