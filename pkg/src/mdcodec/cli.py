"""Command-line interface: ``mdc <command>``.

Commands: train, encode, decode, eval, simulate, textures.  Every command
exits 0 on success and nonzero with a message on stderr otherwise.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__


def _add_train(sub):
    p = sub.add_parser("train", help="train a codec on a directory of images")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--data", help="training image directory (overrides config)")
    p.add_argument("--val", help="validation image directory (overrides config)")
    p.add_argument("--out", help="checkpoint/log directory (overrides config)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--toy", action="store_true",
                   help="start from laptop-scale defaults instead of full-size ones")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override any config key (repeatable)")


def _add_encode(sub):
    p = sub.add_parser("encode", help="compress an image into two descriptions")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--in", dest="image", required=True, help="input image (PNG)")
    p.add_argument("--out-a", required=True, help="output file for description A")
    p.add_argument("--out-b", required=True, help="output file for description B")
    p.add_argument("--raw", action="store_true", help="fixed-width coding instead of arithmetic")


def _add_decode(sub):
    p = sub.add_parser("decode", help="reconstruct an image from 1-2 descriptions")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--a", help="description A file")
    p.add_argument("--b", help="description B file")
    p.add_argument("--out", required=True, help="output image (PNG)")


def _add_eval(sub):
    p = sub.add_parser("eval", help="rate-distortion evaluation over a directory")
    p.add_argument("--model", required=True)
    p.add_argument("--dir", required=True, help="image directory")
    p.add_argument("--csv", required=True, help="output CSV path")
    p.add_argument("--plots", help="directory for RD plot images")
    p.add_argument("--raw", action="store_true")


def _add_simulate(sub):
    p = sub.add_parser("simulate", help="Monte-Carlo erasure-channel simulation")
    p.add_argument("--model", required=True)
    p.add_argument("--img", required=True)
    p.add_argument("--p", type=float, default=0.1, help="loss probability for both descriptions")
    p.add_argument("--p-a", type=float, help="loss probability for A (overrides --p)")
    p.add_argument("--p-b", type=float, help="loss probability for B (overrides --p)")
    p.add_argument("--trials", type=int, default=100000)
    p.add_argument("--seed", type=int, default=0)


def _add_textures(sub):
    p = sub.add_parser("textures", help="generate a synthetic texture dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mdc",
                                     description="two-description learned image codec")
    parser.add_argument("--version", action="version", version=f"mdc {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="suppress progress logging")
    sub = parser.add_subparsers(dest="command", required=True)
    for add in (_add_train, _add_encode, _add_decode, _add_eval, _add_simulate,
                _add_textures):
        add(sub)
    return parser


def _cmd_train(args) -> int:
    from .training import TrainConfig, load_train_config, parse_config_file, train_loop

    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.data:
        overrides["data_dir"] = args.data
    if args.val:
        overrides["val_dir"] = args.val
    if args.out:
        overrides["checkpoint_dir"] = args.out
    if args.toy:
        mapping = parse_config_file(args.config) if args.config else {}
        mapping.update(overrides)
        cfg = TrainConfig.toy(**{k: v for k, v in TrainConfig.from_mapping(mapping).to_dict().items()
                                 if k in mapping or k in overrides})
    else:
        cfg = load_train_config(args.config, overrides)
    result = train_loop(cfg, resume_from=args.resume)
    print(f"finished step {result.final_step}; checkpoint: {result.checkpoint_path}")
    print(f"training log: {result.log_path}")
    return 0


def _cmd_encode(args) -> int:
    from .data import load_image
    from .harness import encode_image
    from .networks import load_model

    model, _ = load_model(args.model)
    image = load_image(args.image)
    coding = "raw" if args.raw else "arithmetic"
    desc_a, desc_b = encode_image(image, model, coding=coding)
    desc_a.write(args.out_a)
    desc_b.write(args.out_b)
    total = desc_a.total_bits + desc_b.total_bits
    h, w = image.shape[:2]
    print(f"wrote {args.out_a} ({desc_a.total_bits} bits) and "
          f"{args.out_b} ({desc_b.total_bits} bits); {total / (h * w):.4f} bpp")
    return 0


def _cmd_decode(args) -> int:
    from .bitstream import EncodedDescription
    from .data import save_image
    from .harness import decode_any
    from .networks import load_model

    if not args.a and not args.b:
        raise ValueError("need at least one of --a / --b")
    model, _ = load_model(args.model)
    descs = [EncodedDescription.read(path) for path in (args.a, args.b) if path]
    image, mode = decode_any(descs, model)
    save_image(args.out, image)
    print(f"decoded ({mode}) -> {args.out}")
    return 0


def _cmd_eval(args) -> int:
    from .harness import evaluate_dataset, plot_rd
    from .networks import load_model

    model, _ = load_model(args.model)
    coding = "raw" if args.raw else "arithmetic"
    points = evaluate_dataset(args.dir, model, csv_path=args.csv, coding=coding)
    mean = points[-1]
    print(f"{len(points) - 1} images; mean bpp {mean.bpp:.4f}, "
          f"side MS-SSIM {mean.side_ms_ssim:.4f}, central MS-SSIM {mean.central_ms_ssim:.4f}")
    print(f"wrote {args.csv}")
    if args.plots:
        for path in plot_rd(args.csv, args.plots):
            print(f"wrote {path}")
    return 0


def _cmd_simulate(args) -> int:
    from .data import load_image
    from .harness import ChannelConfig, expected_distortion, simulate_channel
    from .networks import load_model

    model, _ = load_model(args.model)
    image = load_image(args.img)
    p_a = args.p if args.p_a is None else args.p_a
    p_b = args.p if args.p_b is None else args.p_b
    stats = simulate_channel(image, model,
                             ChannelConfig(p_a, p_b, trials=args.trials, seed=args.seed))
    print(f"trials: {stats.trials}")
    for mode in ("central", "side_a", "side_b", "none"):
        print(f"  {mode:8s} freq {stats.frequencies[mode]:.4f} "
              f"(count {stats.counts[mode]}), quality mr {stats.mode_mr[mode]:.4f} "
              f"ms {stats.mode_ms[mode]:.4f}")
    closed_mr = expected_distortion(stats.mode_mr["central"], stats.mode_mr["side_a"],
                                    stats.mode_mr["side_b"], stats.mode_mr["none"], p_a, p_b)
    print(f"mean quality: mr {stats.mean_mr:.4f} +- {stats.stderr_mr:.4f} "
          f"(closed form {closed_mr:.4f}), ms {stats.mean_ms:.4f} +- {stats.stderr_ms:.4f}")
    return 0


def _cmd_textures(args) -> int:
    from .data import write_texture_dataset

    paths = write_texture_dataset(args.out, args.count, size=args.size, seed=args.seed)
    print(f"wrote {len(paths)} textures to {args.out}")
    return 0


_COMMANDS = {
    "train": _cmd_train,
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "eval": _cmd_eval,
    "simulate": _cmd_simulate,
    "textures": _cmd_textures,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except BrokenPipeError:
        return 1
    except Exception as exc:  # surface a clean message, not a traceback
        print(f"mdc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
