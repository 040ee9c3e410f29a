"""Command-line entry point: ``dems <subcommand> ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage error. Training config is
resolved as defaults < ``--config`` file < ``DEMS_<KEY>`` environment
variables < explicit flags.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import PROTOCOL_VERSION, __version__

log = logging.getLogger("dems")

ENV_PREFIX = "DEMS_"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(value, default, name):
    if isinstance(value, str):
        if isinstance(default, bool):
            low = value.strip().lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"{name}: cannot read {value!r} as a boolean")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if default is None:  # optional int
            return None if value.strip().lower() in ("", "none") else int(value)
    return value


def resolve_config(config_file=None, overrides: dict | None = None, environ=None):
    """Merge config sources into a validated :class:`TrainConfig`."""
    import yaml

    from .train import TrainConfig

    environ = os.environ if environ is None else environ
    defaults = TrainConfig().to_dict()
    data = dict(defaults)
    if config_file:
        loaded = yaml.safe_load(Path(config_file).read_text()) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config file {config_file} must hold a mapping")
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise ValueError(f"unknown config keys in {config_file}: {sorted(unknown)}")
        data.update(loaded)
    for f in fields(TrainConfig):
        key = ENV_PREFIX + f.name.upper()
        if key in environ:
            data[f.name] = _coerce(environ[key], defaults[f.name], key)
    for k, v in (overrides or {}).items():
        if v is not None:
            data[k] = v
    data = {k: _coerce(v, defaults[k], k) for k, v in data.items()}
    return TrainConfig.from_mapping(data)


def _write_manifest(out_dir, command: str, argv, payload: dict) -> None:
    from .io import atomic_write_text

    record = {"command": command, "argv": list(argv), "version": __version__,
              "protocol": PROTOCOL_VERSION, **payload}
    atomic_write_text(Path(out_dir) / f"{command}_manifest.json",
                      json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


# -- subcommands ------------------------------------------------------------

def cmd_synth(args, argv):
    from .data import SynthParams, synth_generate

    manifest = synth_generate(args.n, args.seed, args.out, SynthParams(size=args.size))
    _write_manifest(args.out, "synth", argv, {"n": args.n, "seed": args.seed, "size": args.size})
    print(f"wrote {len(manifest)} pairs to {args.out}")


def cmd_train(args, argv):
    from .net import DEMS, describe
    from .train import train

    overrides = {
        "labeled_fraction": args.labeled_fraction,
        "seed": args.seed,
        "max_iterations": args.iterations,
        "base_channels": args.channels,
        "input_size": args.size,
        "oaa_level": args.level,
        "batch_size": args.batch_size,
        "val_every": args.val_every,
        "num_threads": args.threads,
        "oaa": False if args.no_oaa else None,
        "rre": False if args.no_rre else None,
        "sensitivity_loss": False if args.no_sensitivity_loss else None,
        "semi_supervised": False if args.supervised_only else None,
    }
    config = resolve_config(args.config, overrides)
    if args.describe:
        print(describe(DEMS(config.base_channels, use_rre=config.rre), config.input_size))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_manifest(out, "train", argv, {"config": config.to_dict(), "data": str(args.data)})
    result = train(config, args.data, out)
    print(f"best val DSC {result.best_dsc:.4f} at iteration {result.best_iteration} "
          f"({result.iterations} iterations, {result.seconds:.0f}s)")
    if args.plot:
        from .plots import plot_losses

        plot_losses(out / "loss.csv", out / "loss.png")


def cmd_eval(args, argv):
    from .train import evaluate, write_report

    ev = evaluate(args.checkpoint, args.data, args.split, args.size, args.split_record)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}"
    write_report(ev, out)
    _write_manifest(out, "eval", argv, {"checkpoint": str(args.checkpoint), "split": args.split,
                                        "leaked_identifiers": len(ev.leaked)})
    print(ev.report.summary())


def _bland_altman_pairs(args):
    from .data import scan_dataset
    from .train import evaluate

    if args.checkpoint:
        ev = evaluate(args.checkpoint, args.data, args.split, None, args.split_record)
        return ev.identifiers, [(p > 0.5, m) for p, m in zip(ev.probabilities, ev.masks)]
    from PIL import Image

    gt_manifest = scan_dataset(args.data)
    ids, pairs = [], []
    preds = {p.stem: p for p in Path(args.pred).iterdir() if p.suffix.lower() == ".png"}
    for _, mask_path, ident in gt_manifest.entries:
        if ident not in preds:
            continue
        pred = np.asarray(Image.open(preds[ident]).convert("L")) > 127
        gt = Image.open(mask_path).convert("L")
        if gt.size != pred.shape[::-1]:
            gt = gt.resize(pred.shape[::-1], Image.NEAREST)
        ids.append(ident)
        pairs.append((pred, np.asarray(gt) > 127))
    if not pairs:
        raise ValueError(f"no predicted masks in {args.pred} match {args.data}/masks")
    return ids, pairs


def cmd_bland_altman(args, argv):
    from .io import atomic_write_csv, atomic_write_text
    from .metrics import bland_altman

    ids, pairs = _bland_altman_pairs(args)
    stats = bland_altman(pairs, args.canvas_area)
    out = Path(args.out)
    rows = [{"identifier": i, "mean_percent": m, "diff_percent": d} for i, (m, d) in zip(ids, stats.points)]
    atomic_write_csv(out / "bland_altman_points.csv", rows)
    summary = {"n": len(rows), "mean_diff": stats.mean_diff, "sd_diff": stats.sd_diff,
               "loa_low": stats.loa_low, "loa_high": stats.loa_high, "canvas_area": args.canvas_area}
    atomic_write_text(out / "bland_altman.json", json.dumps(summary, indent=2) + "\n")
    _write_manifest(out, "bland-altman", argv, {"canvas_area": args.canvas_area})
    if args.plot:
        from .plots import plot_bland_altman

        plot_bland_altman(stats, out / "bland_altman.png")
    print(stats.summary())


def cmd_augment(args, argv):
    from .data import _png_bytes, load_dataset
    from .io import atomic_write_bytes, atomic_write_text
    from .oaa import apply_plan, sample_plan

    _, pairs = load_dataset(args.data, (args.size, args.size))
    out = Path(args.out)
    records = []
    for k, ss in enumerate(np.random.SeedSequence(args.seed).spawn(args.count)):
        rng = np.random.default_rng(ss)
        src = pairs[k % len(pairs)]
        plan = sample_plan(rng, args.level)
        aug = apply_plan(src, plan, rng)
        name = f"{src.identifier}_aug{k:04d}.png"
        atomic_write_bytes(out / "images" / name, _png_bytes(np.round(aug.image * 255).astype(np.uint8)))
        atomic_write_bytes(out / "masks" / name, _png_bytes(aug.mask.astype(np.uint8) * 255))
        records.append({"output": name, "source": src.identifier, **plan.to_dict()})
    atomic_write_text(out / "plans.jsonl", "".join(json.dumps(r) + "\n" for r in records))
    _write_manifest(out, "augment", argv, {"level": args.level, "count": args.count, "seed": args.seed})
    print(f"wrote {len(records)} augmented pairs to {out}")


def cmd_describe(args, argv):
    from .net import DEMS, describe
    from .train import load_checkpoint

    if args.checkpoint:
        model, meta = load_checkpoint(args.checkpoint)
        print(describe(model, meta["input_size"]))
        print(f"  checkpoint iteration: {meta['iteration']}  seed: {meta['seed']}")
    else:
        print(describe(DEMS(args.channels, use_rre=not args.no_rre), args.size))


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dems", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version",
                   version=f"dems {__version__} (protocol {PROTOCOL_VERSION})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", metavar="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic ultrasound-like dataset")
    s.add_argument("--n", type=int, required=True, help="number of image/mask pairs")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=224, help="square image side in pixels")
    s.add_argument("--out", required=True, help="output dataset root")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True, help="dataset root with images/ and masks/")
    t.add_argument("--out", required=True, help="run output directory")
    t.add_argument("--config", help="YAML/JSON file with training config keys")
    t.add_argument("--labeled-fraction", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="maximum training iterations")
    t.add_argument("--channels", type=int, help="base channel width")
    t.add_argument("--size", type=int, help="training resolution (divisible by 16)")
    t.add_argument("--level", type=int, help="OAA augmentation level 1..5")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--val-every", type=int, help="validation period in iterations")
    t.add_argument("--threads", type=int, help="torch intra-op threads")
    t.add_argument("--no-oaa", action="store_true", help="replace OAA with random flip + rotation")
    t.add_argument("--no-rre", action="store_true", help="bypass RRE blocks")
    t.add_argument("--no-sensitivity-loss", action="store_true", help="drop the sensitivity term")
    t.add_argument("--supervised-only", action="store_true", help="ignore unlabeled images")
    t.add_argument("--describe", action="store_true", help="print the architecture summary first")
    t.add_argument("--plot", action="store_true", help="also render loss curves")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("val", "external"), default="val")
    e.add_argument("--split-record", help="split.json to use (default: beside the checkpoint)")
    e.add_argument("--size", type=int, help="expected resolution; must match the checkpoint")
    e.add_argument("--out", help="report directory (default: <checkpoint dir>/eval_<split>)")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bland-altman", help="Bland-Altman agreement of predicted vs reference areas")
    src = b.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="predict with this checkpoint")
    src.add_argument("--pred", help="directory of predicted mask PNGs named like the dataset masks")
    b.add_argument("--data", required=True)
    b.add_argument("--split", choices=("val", "external"), default="val")
    b.add_argument("--split-record")
    b.add_argument("--canvas-area", type=int, default=224 * 224)
    b.add_argument("--out", required=True)
    b.add_argument("--plot", action="store_true", help="render the scatter plot")
    b.set_defaults(func=cmd_bland_altman)

    a = sub.add_parser("augment", help="write OAA-augmented pairs for inspection")
    a.add_argument("--data", required=True)
    a.add_argument("--level", type=int, default=5, choices=range(1, 6))
    a.add_argument("--count", type=int, required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--size", type=int, default=224)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment)

    d = sub.add_parser("describe", help="print architecture summary and parameter counts")
    d.add_argument("--channels", type=int, default=16)
    d.add_argument("--size", type=int, default=224)
    d.add_argument("--no-rre", action="store_true")
    d.add_argument("--checkpoint")
    d.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args, argv)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:
        print(f"dems {args.command}: error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
