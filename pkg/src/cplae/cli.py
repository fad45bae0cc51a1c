"""``cplae`` command line: synth, train, eval, ablate.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigFileError, RunConfig
from .data import IngestionError, synth_generate, write_dataset
from .nn import CheckpointError, load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
    if getattr(args, "preset", None):
        train = dataclasses.replace(train, preset=args.preset)
    ev = cfg.eval
    if getattr(args, "threads", None):
        ev = dataclasses.replace(ev, threads=args.threads)
    if getattr(args, "episodes", None):
        ev = dataclasses.replace(ev, episodes=args.episodes)
    cfg = dataclasses.replace(cfg, train=train, eval=ev)
    cfg.validate()
    return cfg


def cmd_synth(args) -> int:
    if args.classes < 5:
        raise UsageError(f"--classes {args.classes}: at least 5 classes are needed for 5-way episodes")
    if args.per_class < 1 or args.size < 16:
        raise UsageError("--per-class must be >= 1 and --size >= 16")
    ds = synth_generate(args.classes, args.per_class, args.size, args.seed, args.channels)
    manifest = write_dataset(ds, args.out)
    print(f"wrote {len(ds)} images ({args.classes} classes) to {manifest}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import run_training, write_run_outputs

    cfg = _load_config(args)
    dataset = cfg.load_data()
    result = run_training(cfg, dataset, progress=print)
    paths = write_run_outputs(result, cfg, args.out)
    print(f"best epoch {result.log.best_epoch}; checkpoint {paths['checkpoint']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import meta_test
    from .trainer import build_model

    cfg = _load_config(args)
    state = load_checkpoint(args.checkpoint)
    dataset = cfg.load_data()
    model = build_model(cfg, dataset)
    model.load_state_dict(state)
    report = meta_test(model, dataset, cfg.eval_episode_config(), cfg.eval.episodes, cfg.eval.seed,
                       cfg.eval.split, cfg.eval.db_index, cfg.eval.threads, config=cfg.to_dict())
    print(report.format_line())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "eval_report.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .evaluation import ablation_run

    cfg = _load_config(args)
    dataset = cfg.load_data()
    seeds = [int(s) for s in args.seeds.split(",")]
    result = ablation_run(dataset, cfg, seeds, progress=print)
    print(result.to_text())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "ablation.csv")
    (out / "ablation.txt").write_text(result.to_text() + "\n")
    (out / "ablation_config.json").write_text(json.dumps(result.config, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cplae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a procedural dataset as PGM/PPM + manifest")
    s.add_argument("--classes", type=int, default=100, help="number of classes (default 100)")
    s.add_argument("--per-class", type=int, default=60, help="images per class (default 60)")
    s.add_argument("--size", type=int, default=32, help="image side in pixels (default 32)")
    s.add_argument("--channels", type=int, default=1, choices=(1, 3), help="1 writes PGM, 3 writes PPM")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--out", required=True, help="output directory for images and manifest.jsonl")
    s.set_defaults(func=cmd_synth)

    for name, func, helptext in (
        ("train", cmd_train, "meta-train and write checkpoint + run log"),
        ("eval", cmd_eval, "meta-test a checkpoint"),
        ("ablate", cmd_ablate, "train and compare the four ablation presets"),
    ):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--config", help="JSON run config; omitted sections use defaults")
        c.add_argument("--seed", type=int, help="overrides train.seed")
        c.add_argument("--threads", type=int, default=None, help="evaluation worker threads")
        c.add_argument("--out", default="runs", help="output directory (default runs)")
        if name == "train":
            c.add_argument("--preset", help="protonet, protonet_ae, cplae_noshuffle or cplae")
        if name == "eval":
            c.add_argument("--checkpoint", required=True, help="checkpoint written by train")
            c.add_argument("--episodes", type=int, help="overrides eval.episodes")
        if name == "ablate":
            c.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated training seeds")
        c.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigFileError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, IngestionError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
