"""Command-line entry point: train, eval, ablate, gradcheck, synth, convert.

Exit codes: 0 success, 1 verification failure, 2 usage or data error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import ablation, checkpoint, data, metrics, verify
from .config import RunSpec
from .errors import SpectralFormerError, TrainingError
from .model import ModelConfig
from .training import deterministic_threads, recipe, train

log = logging.getLogger("spectralformer")

EVAL_KEYS = {"checkpoint": (str, None), "split": (str, "test"), "map": (bool, True),
             "all_pixels": (bool, False)}
ABLATE_KEYS = {"seeds": (int, 1), "sweep_n": (bool, False), "n_gse": (int, 7),
               "patch": (bool, True)}


class UsageError(SpectralFormerError):
    pass


def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--data", help="HSIF file, or 'synth' for the generated toy scene")
    p.add_argument("--mode", choices=("pixel", "patch"))
    p.add_argument("--n", type=int, help="neighbouring bands per token (odd)")
    p.add_argument("--caf", choices=("on", "off"))
    p.add_argument("--patch-side", dest="patch_side", type=int)
    p.add_argument("--d", type=int, help="embedding width")
    p.add_argument("--blocks", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--readout", choices=("cls", "mean"))
    p.add_argument("--pos", choices=("learned", "fixed"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_const", const=True)
    p.add_argument("--bits", type=int, choices=(32, 64))
    p.add_argument("--out", help="output directory")
    p.add_argument("--normalize", choices=("on", "off"))
    p.add_argument("--synth-k", dest="synth_k", type=int)
    p.add_argument("--synth-m", dest="synth_m", type=int)
    p.add_argument("--synth-per-class", dest="synth_per_class", type=int)
    p.add_argument("--synth-noise", dest="synth_noise", type=float)
    p.add_argument("--synth-seed", dest="synth_seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="log warnings only")
    parser = argparse.ArgumentParser(prog="spectralformer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model and write checkpoint + history")
    _shared(p)
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint; write report and map")
    _shared(p)
    p.add_argument("--checkpoint", help="SFCK file (default <out>/model.sfck)")
    p.add_argument("--split", choices=("train", "test"))
    p.add_argument("--map", choices=("on", "off"))
    p.add_argument("--all-pixels", dest="all_pixels", action="store_const", const=True)

    p = sub.add_parser("ablate", parents=[common], help="module ablation and optional n sweep")
    _shared(p)
    p.add_argument("--seeds", type=int, help="number of consecutive seeds per variant")
    p.add_argument("--sweep-n", dest="sweep_n", action="store_const", const=True)
    p.add_argument("--n-gse", dest="n_gse", type=int, help="group size for the GSE-only variant")
    p.add_argument("--no-patch", dest="patch", action="store_const", const=False)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the full backward pass")
    p.add_argument("--bits", type=int, choices=(32, 64), default=64)
    p.add_argument("--m", type=int, default=12)
    p.add_argument("--d", type=int, default=16)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--blocks", type=int, default=5)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--mode", choices=("pixel", "patch"), default="patch")
    p.add_argument("--patch-side", dest="patch_side", type=int, default=3)
    p.add_argument("--caf", choices=("on", "off"), default="on")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, help="check a random subset of this many coordinates")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic toy scene as HSIF")
    p.add_argument("--out", required=True, help="output .hsif path")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--m", type=int, default=32)
    p.add_argument("--per-class", dest="per_class", type=int, default=100)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("convert", parents=[common], help="convert a .mat/.npz scene with train/test maps to HSIF")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--cube-key", default="input")
    p.add_argument("--train-key", default="TR")
    p.add_argument("--test-key", default="TE")
    p.add_argument("--dataset", choices=sorted(data.PUBLISHED_SPLITS),
                   help="verify split counts against a published scene")
    return parser


# --------------------------------------------------------------------------


def _flags(args: argparse.Namespace, skip=("command", "config", "quiet")) -> dict:
    return {k: v for k, v in vars(args).items() if k not in skip}


def load_data(spec: RunSpec) -> data.HsiCube:
    if not spec["data"]:
        raise UsageError("--data is required (an HSIF path or 'synth')")
    if spec["data"] == "synth":
        cube = data.synth_dataset(spec["synth_seed"], spec["synth_k"], spec["synth_m"],
                                  spec["synth_per_class"], spec["synth_noise"])
    else:
        cube = data.load_cube(spec["data"])
    return data.normalize(cube) if spec["normalize"] else cube


def model_config(spec: RunSpec, cube: data.HsiCube) -> ModelConfig:
    return ModelConfig(m=cube.m, classes=cube.classes, n=spec["n"], d=spec["d"],
                       blocks=spec["blocks"], heads=spec["heads"], mlp_hidden=spec["mlp_hidden"],
                       dropout_p=spec["dropout"], caf=spec["caf"], input_mode=spec["mode"],
                       patch_side=spec["patch_side"], readout=spec["readout"], pos=spec["pos"])


def _recipe_overrides(spec: RunSpec) -> dict:
    return dict(epochs=spec["epochs"], lr0=spec["lr"], decay_factor=spec["decay_factor"],
                batch=spec["batch"], weight_decay=spec["weight_decay"], bits=spec["bits"],
                deterministic=spec["deterministic"])


def cmd_train(args) -> int:
    spec = RunSpec.resolve("train", _flags(args), args.config)
    cube = load_data(spec)
    cfg = model_config(spec, cube)
    tc = recipe(cfg, cube, seed=spec["seed"], checkpoint_every=spec["checkpoint_every"],
                **_recipe_overrides(spec))
    spec.values.update(epochs=tc.epochs, weight_decay=tc.weight_decay)
    out = Path(spec["out"])
    spec.echo(out)
    log.info("training %s model (n=%d, caf=%s) for %d epochs -> %s",
             cfg.input_mode, cfg.n, "on" if cfg.caf else "off", tc.epochs, out)
    _, history = train(cube, cfg, tc, out)
    last = history.records[-1]
    print(f"final epoch {last.epoch}: loss {last.mean_loss:.5f}, train OA {100 * last.train_oa:.2f}%")
    print(f"wrote {out / 'model.sfck'} and {out / 'history.txt'}")
    return 0


def cmd_eval(args) -> int:
    spec = RunSpec.resolve("eval", _flags(args), args.config, EVAL_KEYS)
    cube = load_data(spec)
    out = Path(spec["out"])
    ckpt = spec["checkpoint"] or str(out / "model.sfck")
    bits = spec["bits"]
    params, cfg = checkpoint.load(ckpt, np.float64 if bits == 64 else np.float32)
    spec.echo(out)
    with deterministic_threads(spec["deterministic"]):
        result = metrics.evaluate(params, cfg, cube, spec["split"])
        report = metrics.format_report(result, title=f"{spec['split']} split, {ckpt}")
        (out / "report.txt").write_text(report)
        if spec["map"]:
            metrics.render_map(params, cfg, cube, out / "map.ppm", spec["all_pixels"])
    print(report, end="")
    return 0


def cmd_ablate(args) -> int:
    spec = RunSpec.resolve("ablate", _flags(args), args.config, ABLATE_KEYS)
    cube = load_data(spec)
    base = model_config(spec, cube)
    seeds = range(spec["seed"], spec["seed"] + spec["seeds"])
    overrides = _recipe_overrides(spec)
    out = Path(spec["out"])
    spec.echo(out)
    variants = ablation.ablation_variants(base, spec["n_gse"], spec["patch"], spec["patch_side"])
    for v in variants:
        ablation.run_variant(v, cube, seeds, **overrides)
    report = ablation.format_ablation(variants)
    checks = ablation.ordering_checks(variants)
    report += "".join(f"{name}: {'yes' if ok else 'no'}\n" for name, ok in checks.items())
    if spec["sweep_n"]:
        rows = ablation.sweep_variants(base)
        for _, gse, both in rows:
            ablation.run_variant(gse, cube, seeds, **overrides)
            ablation.run_variant(both, cube, seeds, **overrides)
        report += "\n" + ablation.format_sweep(rows)
    (out / "ablation.txt").write_text(report)
    print(report, end="")
    return 0


def cmd_gradcheck(args) -> int:
    if args.bits == 32:
        log.warning("32-bit gradients are coarse; tolerance is 1e-2")
    eps, threshold = verify.TOLERANCES[args.bits]
    if args.threshold is not None:
        threshold = args.threshold
    cfg = verify.tiny_config(m=args.m, d=args.d, blocks=args.blocks, heads=args.heads, n=args.n,
                             caf=args.caf == "on", mode=args.mode, patch_side=args.patch_side)
    result = verify.check_model(cfg, seed=args.seed, bits=args.bits, max_coords=args.coords, eps=eps)
    print(f"checked {result.checked} coordinates, max relative error {result.max_error:.3e} "
          f"(threshold {threshold:g})")
    if result.max_error >= threshold:
        name, idx = result.worst
        print(f"FAIL worst coordinate {name}{list(idx)}: tape {result.tape_grad:.6e}, "
              f"finite difference {result.fd_grad:.6e}")
        return 1
    return 0


def cmd_synth(args) -> int:
    cube = data.synth_dataset(args.seed, args.k, args.m, args.per_class, args.noise)
    data.save_cube(cube, args.out)
    print(f"wrote {args.out}: m={cube.m}, {cube.height}x{cube.width}, K={cube.classes}")
    return 0


def cmd_convert(args) -> int:
    cube = data.convert(args.input, args.output, args.cube_key, args.train_key, args.test_key,
                        args.dataset)
    train_n = int(np.sum(cube.split == data.TRAIN))
    test_n = int(np.sum(cube.split == data.TEST))
    print(f"wrote {args.output}: m={cube.m}, {cube.height}x{cube.width}, K={cube.classes}, "
          f"{train_n} train / {test_n} test")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "synth": cmd_synth, "convert": cmd_convert}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    threads = os.environ.get("SF_THREADS")
    try:
        limiter = threadpool_limits(limits=int(threads)) if threads else None
    except ValueError:
        print(f"error: SF_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SpectralFormerError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
