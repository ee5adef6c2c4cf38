"""Command-line entry point.

Subcommands map one-to-one onto pipeline stages::

    modalrec synth      --config exp.json          # write synthetic corpus
    modalrec pretrain   --config exp.json          # -> pretrained.ckpt
    modalrec finetune   --config exp.json          # -> finetuned.ckpt
    modalrec evaluate   --config exp.json          # -> metrics_test.tsv
    modalrec robustness --config exp.json          # -> robustness_*.tsv
    modalrec ablate     --config exp.json          # -> ablation_*.tsv

Any config field can be overridden on the command line, for example
``--seed 7 --out_dir runs/a --synth.n_users 100``.  Override values are
parsed as JSON when possible and fall back to plain strings.

Exit status: 0 on success, 2 for configuration or input-file problems
(including a missing upstream checkpoint), 1 for unexpected failures.
"""

from __future__ import annotations

import argparse
import sys
import traceback

from . import pipeline as pl
from .errors import ConfigError, FormatError, ParseError

_COMMANDS = ("synth", "pretrain", "finetune", "evaluate", "robustness",
             "ablate")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modalrec",
        description="multi-modal cross-domain sequential recommender")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name, help=f"run the {name} stage")
        cmd.add_argument("--config", default=None,
                         help="experiment config JSON file")
    return parser


def _collect_overrides(extras: list[str]) -> dict[str, str]:
    overrides: dict[str, str] = {}
    i = 0
    while i < len(extras):
        token = extras[i]
        if not token.startswith("--"):
            raise ConfigError(f"unexpected argument {token!r}")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extras):
                raise ConfigError(f"override --{key} is missing a value")
            i += 1
            value = extras[i]
        if not key:
            raise ConfigError(f"malformed override {token!r}")
        overrides[key] = value
        i += 1
    return overrides


def _load_config(args, extras: list[str]) -> pl.ExperimentConfig:
    if args.config is not None:
        cfg = pl.ExperimentConfig.from_json_file(args.config)
    else:
        cfg = pl.ExperimentConfig()
    overrides = _collect_overrides(extras)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg.validate()
    return cfg


def run(argv=None) -> int:
    parser = _build_parser()
    args, extras = parser.parse_known_args(argv)
    try:
        cfg = _load_config(args, extras)
        if args.command == "synth":
            written = pl.cmd_synth(cfg)
            for path in written:
                print(path)
        elif args.command == "pretrain":
            print(pl.cmd_pretrain(cfg))
        elif args.command == "finetune":
            print(pl.cmd_finetune(cfg))
        elif args.command == "evaluate":
            print(pl.cmd_evaluate(cfg))
        elif args.command == "robustness":
            for path in pl.cmd_robustness(cfg):
                print(path)
        elif args.command == "ablate":
            for path in pl.cmd_ablate(cfg):
                print(path)
    except (ConfigError, ParseError, FormatError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
