"""Command-line entry point.

Configuration precedence for ``train``: built-in defaults, then the
``--config`` file, then ``--set section.key=value`` overrides in order.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 runtime or numeric failure. Errors are reported on stderr as a single
line ``sat2street: error[<kind>]: <message>``.
"""
import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as config_io
from .data import (DataError, ToyGeometry, load_manifest, load_pair, load_split,
                   make_toy_dataset, read_image, to_signed, write_image)
from .polar import PolarParams, polar_transform

log = logging.getLogger("sat2street")

EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(kind, message):
    return f"sat2street: error[{kind}]: " + " ".join(str(message).split())


# --- subcommands --------------------------------------------------------------

def cmd_make_toy_data(args):
    if args.pairs < 1:
        raise UsageError(f"--pairs must be at least 1, got {args.pairs}")
    geo = ToyGeometry(args.sat_size, args.height, args.width, args.sky_fraction)
    manifest = make_toy_dataset(args.out, args.pairs, geo, seed=args.seed, split=args.split)
    print(Path(args.out) / args.split / "manifest.csv")
    log.info("wrote %d pairs with seed %d", len(manifest), args.seed)


def cmd_polar(args):
    image = read_image(args.input)
    if image.shape[1] != image.shape[2]:
        raise DataError(f"{args.input}: satellite image must be square, got {image.shape[2]}x{image.shape[1]}")
    params = PolarParams(image.shape[1], image.shape[2], args.width, args.height)
    write_image(args.output, polar_transform(image, params, args.out_of_bounds))


def _build_config(args):
    if args.config:
        cfg = config_io.load(args.config)
    elif args.resume:
        from .trainer import checkpoint_config

        cfg = checkpoint_config(args.resume)
    else:
        cfg = config_io.TrainConfig()
    return config_io.with_overrides(cfg, args.set)


def cmd_train(args):
    from .trainer import train

    if args.resume and not Path(args.resume).exists():
        raise DataError(f"{args.resume}: no such checkpoint")
    cfg = _build_config(args)
    manifest = load_manifest(args.data)
    split = load_split(manifest, cfg.geometry.polar_params, cfg.geometry.out_of_bounds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config_io.save(cfg, out / "config.ini")
    log.info("seed %d, config hash %s", cfg.seed, config_io.config_hash(cfg))

    def progress(trainer, metrics):
        if args.log_every and trainer.step % args.log_every == 0:
            log.info("step %d: %s", trainer.step, json.dumps(metrics))

    train(cfg, split, out_dir=out, resume=args.resume, callback=progress)
    print(out / "checkpoint_final.pt")


def _load_trainer(path):
    from .trainer import Trainer

    if not Path(path).is_file():
        raise DataError(f"checkpoint not found: {path}")
    return Trainer.from_checkpoint(path)


def cmd_eval(args):
    from .evaluation import evaluate_retrieval, evaluate_synthesis

    trainer = _load_trainer(args.checkpoint)
    geo = trainer.cfg.geometry
    split = load_split(load_manifest(args.data), geo.polar_params, geo.out_of_bounds)
    report = {"retrieval": evaluate_retrieval(trainer, split, args.radius).to_dict()}
    if trainer.uses_decoder:
        generated = trainer.synthesize(split.polar)
        report["synthesis"] = evaluate_synthesis(generated, split.street, split.ids).to_dict()
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)


def _panel(image, height):
    """(3, H, W) array in [-1, 1] -> uint8 HWC resized to ``height`` rows."""
    arr = np.clip((np.asarray(image, dtype=np.float64) + 1) * 127.5, 0, 255)
    img = Image.fromarray(np.rint(arr).astype(np.uint8).transpose(1, 2, 0))
    if img.height != height:
        width = max(1, round(img.width * height / img.height))
        img = img.resize((width, height), Image.BILINEAR)
    return np.asarray(img)


def figure_grid(satellite, polar, generated, target=None, gap=2):
    """Side-by-side panels: satellite | polar | generated | ground truth (when given)."""
    height = polar.shape[1]
    panels = [_panel(satellite, height), _panel(polar, height), _panel(generated, height)]
    if target is not None:
        panels.append(_panel(target, height))
    spacer = np.full((height, gap, 3), 255, dtype=np.uint8)
    row = [panels[0]]
    for p in panels[1:]:
        row += [spacer, p]
    return np.concatenate(row, axis=1)


def cmd_synthesize(args):
    trainer = _load_trainer(args.checkpoint)
    if not trainer.uses_decoder:
        raise DataError("checkpoint was trained without a decoder")
    geo = trainer.cfg.geometry
    params = geo.polar_params
    items = []  # (id, satellite in [-1, 1], target or None)
    if args.data:
        for entry in load_manifest(args.data).entries:
            pair = load_pair(entry)
            items.append((pair.id, to_signed(pair.satellite), to_signed(pair.street)))
    for path in args.inputs:
        items.append((Path(path).stem, to_signed(read_image(path)), None))
    if not items:
        raise UsageError("give satellite images or --data")
    names = [ident for ident, _, _ in items]
    clash = sorted({n for n in names if names.count(n) > 1})
    if clash:
        raise DataError(f"several inputs would be written as {', '.join(clash)}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ident, sat, target in items:
        if sat.shape[1:] != (params.sat_height, params.sat_width):
            raise DataError(f"{ident}: satellite is {sat.shape[2]}x{sat.shape[1]}, "
                            f"model expects {params.sat_width}x{params.sat_height}")
        polar = polar_transform(sat, params, geo.out_of_bounds).astype(np.float32)
        generated = trainer.synthesize(polar[None])[0]
        write_image(out / f"{ident}_generated.png", generated, (-1.0, 1.0))
        grid = figure_grid(sat, polar, generated, target)
        Image.fromarray(grid).save(out / f"{ident}_grid.png")
    print(out)


# --- parser -------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = Parser(prog="sat2street", description="Satellite-to-street synthesis and retrieval.",
                    formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("make-toy-data", help="fabricate a toy corpus", formatter_class=fmt)
    p.add_argument("--out", required=True, help="corpus root directory")
    p.add_argument("--pairs", type=int, default=64, help="number of pairs")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--split", default="train", help="split name (subdirectory)")
    p.add_argument("--sat-size", type=int, default=96, help="satellite side in pixels")
    p.add_argument("--height", type=int, default=32, help="panorama height")
    p.add_argument("--width", type=int, default=176, help="panorama width")
    p.add_argument("--sky-fraction", type=float, default=0.3, help="fraction of rows drawn as sky")
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("polar", help="polar-warp a square satellite PNG", formatter_class=fmt)
    p.add_argument("input", help="square satellite PNG")
    p.add_argument("output", help="output PNG")
    p.add_argument("--height", type=int, default=112, help="output height")
    p.add_argument("--width", type=int, default=616, help="output width")
    p.add_argument("--out-of-bounds", choices=("clamp", "zero"), default="clamp",
                   help="sampling policy outside the image")
    p.set_defaults(func=cmd_polar)

    p = sub.add_parser("train", help="train on a manifest", formatter_class=fmt)
    p.add_argument("--data", required=True, help="training manifest.csv")
    p.add_argument("--out", required=True, help="output directory (metrics, checkpoints, config echo)")
    p.add_argument("--config", help="INI config file; built-in defaults when omitted")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value; repeatable, applied after --config")
    p.add_argument("--resume", help="checkpoint to continue from; its stored config is the base when --config is omitted")
    p.add_argument("--log-every", type=int, default=50, help="log metrics every N steps (0 = never)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval and synthesis metrics", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--data", required=True, help="evaluation manifest.csv")
    p.add_argument("--radius", type=float, default=None,
                   help="count gallery items within this many meters as correct (needs coordinates)")
    p.add_argument("--out", help="write the JSON report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synthesize", help="generate panoramas and figure grids", formatter_class=fmt)
    p.add_argument("inputs", nargs="*", help="satellite PNGs (no ground truth column)")
    p.add_argument("--checkpoint", required=True, help="trained checkpoint")
    p.add_argument("--data", help="manifest whose pairs are rendered with ground truth")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synthesize)
    return parser


def main(argv=None):
    from .trainer import NumericError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(_fmt("usage", exc), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args)
    except (UsageError, config_io.ConfigError) as exc:
        print(_fmt("usage", exc), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(_fmt("data", exc), file=sys.stderr)
        return EXIT_DATA
    except (NumericError, RuntimeError, ValueError) as exc:
        print(_fmt("runtime", exc), file=sys.stderr)
        return EXIT_RUNTIME
    return 0


if __name__ == "__main__":
    sys.exit(main())
