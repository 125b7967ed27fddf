"""Command-line front door: ``rave <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from rave import metrics
from rave.formats import FormatError, read_video, write_video


def _cmd_make_synthetic(args) -> int:
    from rave.synth import DegradeSpec, SceneParams, build_dataset, degrade_spec_dict, write_dataset

    spec = DegradeSpec(
        saturation_scale=args.saturation,
        brightness_offset=args.brightness,
        contrast_scale=args.contrast,
        blur_radius=args.blur,
        flicker_amplitude=args.flicker,
    )
    ds = build_dataset(args.clips, args.heldout, args.seed, args.frames, args.height, args.width, spec, SceneParams())
    write_dataset(ds, args.out, {"degrade": degrade_spec_dict(spec), "seed": args.seed})
    print(f"wrote {len(ds.target)} target, {len(ds.source)} source, {len(ds.heldout_source)} held-out clips to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from rave.synth import build_dataset, read_clip_dir
    from rave.trainer import load_config, train

    cfg = load_config(args.config)
    if args.data:
        data = Path(args.data)
        source, target = read_clip_dir(data / "source"), read_clip_dir(data / "target")
    else:
        ds = build_dataset(seed=cfg.seed)
        source, target = ds.source, ds.target
    state = train(cfg, source, target, args.out, resume=args.resume)
    print(f"trained to iteration {state.iteration}; checkpoints in {args.out}")
    return 0


def _cmd_enhance(args) -> int:
    from rave.trainer import load_model

    model = load_model(args.ckpt)
    write_video(args.out, model.enhance(read_video(args.input), args.pad))
    return 0


def _cmd_degrade(args) -> int:
    from rave.synth import DegradeSpec, degrade_video

    spec = DegradeSpec(args.saturation, args.brightness, args.contrast, args.blur, args.flicker)
    write_video(args.out, degrade_video(read_video(args.input), spec, args.seed))
    return 0


def _cmd_rpf(args) -> int:
    src = read_video(args.source)
    out = read_video(args.method)
    curve = metrics.rpf(src, out, unnormalized=args.unnormalized)
    metrics.write_rpf_csv(curve, args.csv)
    if args.svg:
        metrics.plot_rpf_svg({Path(args.method).stem: curve}, args.svg)
    return 0


def _videos_in(path) -> list[np.ndarray]:
    p = Path(path)
    if not p.is_dir():
        raise FileNotFoundError(f"no such directory: {p}")
    clips = sorted(p.glob("*.rvid"))
    if clips:
        return [read_video(c) for c in clips]
    if any(p.glob("*.ppm")):
        return [read_video(p)]
    subdirs = sorted(d for d in p.iterdir() if d.is_dir() and any(d.glob("*.ppm")))
    if not subdirs:
        raise FileNotFoundError(f"no .rvid clips or PPM frame folders in {p}")
    return [read_video(d) for d in subdirs]


def _cmd_fd(args) -> int:
    print(repr(metrics.fd_between(_videos_in(args.a), _videos_in(args.b))))
    return 0


def _cmd_bench(args) -> int:
    from rave.trainer import load_model

    model = load_model(args.ckpt)
    seq = read_video(args.input)
    res = metrics.bench_runtime(model, seq, args.runs, args.pad)
    print(json.dumps(res.as_dict()))
    return 0


def _degrade_flags(p: argparse.ArgumentParser, saturation: float, contrast: float, flicker: float) -> None:
    p.add_argument("--saturation", type=float, default=saturation)
    p.add_argument("--brightness", type=float, default=0.0)
    p.add_argument("--contrast", type=float, default=contrast)
    p.add_argument("--blur", type=int, default=0, choices=(0, 1, 2))
    p.add_argument("--flicker", type=float, default=flicker)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rave", description="Recurrent adversarial video enhancement (desk scale).")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-synthetic", help="render an unpaired source/target toy dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=32)
    p.add_argument("--heldout", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=96)
    _degrade_flags(p, 0.4, 0.6, 0.03)
    p.set_defaults(func=_cmd_make_synthetic)

    p = sub.add_parser("train", help="adversarial training from a key = value config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--data", default=None, help="directory written by make-synthetic (default: render one in memory)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("enhance", help="run the generator over a video")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pad", type=int, default=3)
    p.set_defaults(func=_cmd_enhance)

    p = sub.add_parser("degrade", help="apply the parametric degradation to a video")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _degrade_flags(p, 1.0, 1.0, 0.0)
    p.set_defaults(func=_cmd_degrade)

    p = sub.add_parser("rpf", help="relative pixel-flow curve of a method against its source")
    p.add_argument("--source", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--svg", default=None)
    p.add_argument("--unnormalized", action="store_true", help="unnormalised sum / root-sum-of-squares form")
    p.set_defaults(func=_cmd_rpf)

    p = sub.add_parser("fd", help="Frechet distance between two clip folders (hand-crafted features)")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.set_defaults(func=_cmd_fd)

    p = sub.add_parser("bench", help="best-of-N per-frame generator runtime")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--pad", type=int, default=3)
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, FormatError, ValueError, OSError) as e:
        print(f"rave {args.command}: error: {e}", file=sys.stderr)
        return 1


def cli_dispatch(argv: list[str]) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
