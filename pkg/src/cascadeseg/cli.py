"""Command-line entry point: train, predict, eval, synth, gradcheck, ablate.

Exit codes: 0 success, 1 runtime or check failure, 2 usage/config error.
Every subcommand is deterministic given identical inputs and seeds; the only
non-reproducible output bytes are wall-time fields in training logs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as data_io
from . import gradcheck as gc
from . import metrics as metrics_mod
from . import training
from .config import TrainConfig, load_config_file, resolve_config
from .errors import ConfigError


def _parse_size(text):
    try:
        w, h = text.lower().split("x")
        return (int(w), int(h))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}")


def _parse_seeds(text):
    try:
        return tuple(int(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be ints like 0,1,2, got {text!r}")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cascadeseg",
        description="Multi-stage cascaded UNet segmentation toolchain (CPU, numpy).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a cascade from a JSON config")
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--data", help="training dataset dir (images/ + masks/)")
    p.add_argument("--val", help="validation dataset dir")
    p.add_argument("--out", help="output dir for checkpoints and logs")

    p = sub.add_parser("predict", help="segment one image with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-stages", action="store_true",
                   help="also write per-stage probability maps as 8-bit PNGs")
    p.add_argument("--dump-raw", action="store_true",
                   help="also write per-stage float32 maps in the container format")

    p = sub.add_parser("eval", help="evaluate a checkpoint over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="JSON report path")

    p = sub.add_parser("synth", help="generate a synthetic lesion dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_parse_size, default=(64, 64), help="WxH")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check every operator")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train and tabulate the four design variants")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="base JSON config (desk-scale defaults otherwise)")
    p.add_argument("--data", help="training dataset dir; synthetic when omitted")
    p.add_argument("--val", help="evaluation dataset dir; synthetic when omitted")
    p.add_argument("--seeds", type=_parse_seeds, default=(0,))
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.add_argument("--n-train", type=int, default=40, help="synthetic train size")
    p.add_argument("--n-val", type=int, default=10, help="synthetic eval size")
    p.add_argument("--synth-seed", type=int, default=7)
    return parser


def cmd_train(args):
    file_kwargs, file_paths = load_config_file(args.config)
    config, paths, resolved = resolve_config(
        file_kwargs, file_paths,
        {"data_dir": args.data, "val_dir": args.val, "out_dir": args.out},
    )
    for key in ("data_dir", "val_dir", "out_dir"):
        if not paths.get(key):
            raise ConfigError(f"{key} must be set in the config file or on the command line")
    train_set = data_io.load_dataset(paths["data_dir"], config.input_size)
    val_set = data_io.load_dataset(paths["val_dir"], config.input_size)
    out = Path(paths["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")

    def show(record):
        ja = ", ".join(f"{v:.4f}" for v in record["val_ja"])
        print(
            f"epoch {record['epoch']}/{config.epochs}"
            f"  loss {record['train_loss']:.4f}  val JA [{ja}]"
        )

    result = training.train(config, train_set, val_set, out_dir=out, log_hook=show)
    print(f"done: best final-stage val JA {result.best_val_ja:.4f}; artifacts in {out}")
    return 0


def _save_gray(path, values01):
    Image.fromarray(
        np.clip(np.rint(values01 * 255.0), 0, 255).astype(np.uint8), "L"
    ).save(path)


def cmd_predict(args):
    model, config = data_io.load_checkpoint(args.ckpt)
    image = data_io.resize(data_io.load_image(args.image), config.input_size, "bilinear")
    probs, mask = training.predict(model, config, image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_gray(out / "mask.png", mask.data[0, 0])
    if args.dump_stages:
        for s, prob in enumerate(probs, start=1):
            _save_gray(out / f"stage_{s}.png", prob.data[0, 0])
    if args.dump_raw:
        for s, prob in enumerate(probs, start=1):
            data_io.save_array_dump(out / f"stage_{s}.raw", f"stage_{s}", prob.data)
    print(f"wrote {out / 'mask.png'}")
    return 0


def cmd_eval(args):
    model, config = data_io.load_checkpoint(args.ckpt)
    dataset = data_io.load_dataset(args.data, config.input_size)
    report = metrics_mod.evaluate(model, config, dataset)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    text_path = report_path.with_suffix(".txt")
    metrics_mod.write_report(report, report_path, text_path)
    print(report.render_text())
    return 0


def cmd_synth(args):
    if args.n < 0:
        raise ConfigError("--n must be >= 0")
    params = data_io.SynthParams(count=args.n, seed=args.seed, canvas=args.size)
    data_io.save_dataset(data_io.generate_synthetic(params), args.out)
    print(f"wrote {args.n} pairs under {args.out}")
    return 0


def cmd_gradcheck(args):
    results = gc.run_suite(seed=args.seed)
    failed = []
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<28} max rel err {r.max_rel_err:.3e}  tol {r.tolerance:.0e}  {status}")
        if not r.ok:
            failed.append(r.name)
    if failed:
        print(f"gradient check FAILED for: {', '.join(failed)}", file=sys.stderr)
        return 1
    print(f"all {len(results)} checks passed")
    return 0


DESK_ABLATION_CONFIG = dict(
    stages=4,
    fusion_mode="cifs",
    deep_supervision=True,
    alphas=(0.7, 0.8, 0.9, 1.0),
    learning_rate=1e-3,
    batch_size=8,
    epochs=6,
    threshold=0.7,
    input_size=(64, 64),
    levels=4,
    channel_widths=(8, 16, 32, 64, 128),
)

ABLATION_VARIANTS = (
    ("C", "concat_input", False),
    ("CIFS", "cifs", False),
    ("C+DS", "concat_input", True),
    ("CIFS+DS", "cifs", True),
)


def cmd_ablate(args):
    if args.config:
        file_kwargs, _ = load_config_file(args.config)
        base = TrainConfig.from_dict(file_kwargs)
    else:
        base = TrainConfig(**DESK_ABLATION_CONFIG)
    if args.epochs:
        base = dataclasses.replace(base, epochs=args.epochs)

    if args.data and args.val:
        train_set = data_io.load_dataset(args.data, base.input_size)
        eval_set = data_io.load_dataset(args.val, base.input_size)
    elif args.data or args.val:
        raise ConfigError("--data and --val must be given together")
    else:
        train_set = data_io.generate_synthetic(data_io.SynthParams(
            count=args.n_train, seed=args.synth_seed, canvas=base.input_size))
        eval_set = data_io.generate_synthetic(data_io.SynthParams(
            count=args.n_val, seed=args.synth_seed + 1, canvas=base.input_size))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs = {}
    for label, fusion, ds in ABLATION_VARIANTS:
        slug = label.lower().replace("+", "_")
        runs[label] = []
        for seed in args.seeds:
            cfg = dataclasses.replace(
                base, fusion_mode=fusion, deep_supervision=ds, seed=seed
            )
            print(f"training {label} (seed {seed}) ...")
            result = training.train(
                cfg, train_set, eval_set, out_dir=out / slug / f"seed_{seed}"
            )
            runs[label].append((seed, result.model, cfg))

    table = metrics_mod.ablation_table(runs, eval_set)
    metrics_mod.write_report(table, out / "ablation.json", out / "ablation.txt")
    print(table.render_text())
    gap = table.rows["CIFS+DS"]["median"]["JA"] - table.rows["C"]["median"]["JA"]
    print(f"CIFS+DS vs C median JA difference: {gap:+.2f} (reported, not asserted)")
    return 0


COMMANDS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry():
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
