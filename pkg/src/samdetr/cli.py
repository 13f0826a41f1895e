"""Command-line entry point: train, eval, ablate, dump-attention, gradcheck."""

from __future__ import annotations

import argparse
import os
import sys

from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, load_config, parse_config_text
from .data import GenerationError
from .train import TrainingError


def _run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat 'key = value' config file")
    parser.add_argument("--variant", choices=["baseline", "sam", "sam-smca"])
    parser.add_argument("--strategy", choices=["avg", "max", "sp1", "spm"])
    parser.add_argument("--no-reweight", dest="reweight", action="store_const", const=False, default=None)
    parser.add_argument("--search-range", dest="search_range", choices=["box", "image"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--out")


def _config_from_args(args) -> RunConfig:
    return load_config(
        args.config,
        variant=args.variant,
        strategy=args.strategy,
        reweight=args.reweight,
        search_range=args.search_range,
        seed=args.seed,
        steps=args.steps,
        out=args.out,
    )


def _load_run(run_dir: str):
    from .checkpoint import load_checkpoint
    from .train import build_model

    with open(os.path.join(run_dir, "config.txt"), encoding="utf-8") as f:
        run = RunConfig(**parse_config_text(f.read()))
    model = build_model(run)
    load_checkpoint(os.path.join(run_dir, "model.ckpt"), model)
    return run, model


def cmd_train(args) -> int:
    from .train import train

    run = _config_from_args(args)
    result = train(run, log=print)
    final = result.final
    print(f"done: step {final.step} train_loss {final.train_loss:.6f} val_ap50 {final.val_ap50:.4f} -> {run.out}")
    return 0


def cmd_eval(args) -> int:
    from .data import make_split
    from .train import VAL_SPLIT, evaluate

    run, model = _load_run(args.run)
    n = args.n_scenes or run.n_val
    scenes = make_split(run.seed, VAL_SPLIT, n, run.image_size, run.n_classes)
    print(f"val_ap50 {evaluate(model, scenes):.6f} over {n} scenes")
    return 0


def cmd_ablate(args) -> int:
    from .ablate import ARMS, DEFAULT_ARMS, run_ablation

    base = _config_from_args(args)
    arms = args.arms.split(",") if args.arms else list(DEFAULT_ARMS)
    if args.smca and "sam_smca" not in arms:
        arms.append("sam_smca")
    unknown = [a for a in arms if a not in ARMS]
    if unknown:
        raise ConfigError(f"unknown arms {unknown}; choose from {sorted(ARMS)}")
    out_root = args.out or "runs/ablation"
    results = run_ablation(base, out_root, arms, args.seeds, jobs=args.jobs, force=args.force)
    for r in results:
        print(r.to_csv())
    print(f"results -> {os.path.join(out_root, 'results.csv')}")
    return 0


def cmd_dump(args) -> int:
    from .data import generate_scene
    from .viz import dump_attention

    run, model = _load_run(args.run)
    scene = generate_scene(args.scene_seed, run.image_size, run.n_classes, max_objects=args.max_objects)
    out_dir = args.out or os.path.join(args.run, "attention")
    dump = dump_attention(model, scene.image, out_dir)
    print(f"wrote {dump.maps.shape[0] * (dump.maps.shape[1] + 1)} maps and points.txt to {out_dir}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_all

    failed = 0
    for r in run_all(args.seed or 0):
        status = "ok" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{r.name:28s} {r.max_rel_error:.3e} (< {r.tolerance:g}) {status}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samdetr", description="Toy DETR with a semantics aligner.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one run")
    _run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="AP50 of a trained run on its validation split")
    p.add_argument("run", help="run directory holding config.txt and model.ckpt")
    p.add_argument("--n-scenes", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train every arm for several seeds")
    _run_flags(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--arms", help="comma-separated arm names")
    p.add_argument("--smca", action="store_true", help="add the sam_smca arm")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--force", action="store_true", help="retrain cached runs")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attention", help="write attention maps and salient points")
    p.add_argument("run", help="run directory holding config.txt and model.ckpt")
    p.add_argument("--scene-seed", type=int, default=0)
    p.add_argument("--max-objects", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with threadpool_limits(1):
            return args.func(args)
    except (ConfigError, GenerationError, TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
