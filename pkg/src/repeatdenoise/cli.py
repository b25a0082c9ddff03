"""Command-line entry point.

Stage subcommands (phantom, prefilter, template, pair, train, denoise,
evaluate, pipeline) run the configured pipeline up to that stage, skipping
stages whose manifests are current.  ``register``, ``export`` and
``denoise --model`` also work directly on files.

Exit codes: 0 success, 2 configuration error, 3 stage failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, PipelineConfig, load_config
from .io import read_volume, write_volume
from .pipeline import PipelineLockedError, StageError, run_pipeline
from .volume import warp

log = logging.getLogger("repeatdenoise")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

# subcommand -> last pipeline stage it runs
STAGE_COMMANDS = {
    "phantom": "phantom",
    "prefilter": "prefilter",
    "template": "template",
    "pair": "pair",
    "train": "train",
    "denoise": "denoise",
    "evaluate": "evaluate",
    "pipeline": None,
}


def _common(p):
    p.add_argument("--config", type=Path, help="JSON pipeline configuration")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--threads", type=int, help="worker threads for per-repeat registration")
    p.add_argument("--output-dir", type=Path, help="override the output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="repeatdenoise", description="Template-based Noise2Noise denoising of repeat volumes.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_COMMANDS:
        p = sub.add_parser(name, help=f"run the pipeline through the '{STAGE_COMMANDS[name] or 'export'}' stage")
        _common(p)
        if name == "denoise":
            p.add_argument("--model", type=Path, help="model path (without suffix) for direct file mode")
            p.add_argument("--input", type=Path, help="volume to denoise (direct file mode)")
            p.add_argument("--output", type=Path, help="where to write the denoised volume")
    p = sub.add_parser("register", help="register MOVING onto FIXED (affine then diffeomorphic)")
    _common(p)
    p.add_argument("fixed", type=Path)
    p.add_argument("moving", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p = sub.add_parser("export", help="write XY, XZ and en face views of a volume")
    _common(p)
    p.add_argument("volume", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--axis", type=int, default=2, help="projection axis for the en face view")
    return parser


def _load(args):
    """Config from ``--config`` (or defaults) with command-line overrides applied."""
    raw = {}
    if args.config is not None:
        cfg = load_config(args.config)
        raw = json.loads(args.config.read_text())
    else:
        cfg = PipelineConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        overrides["threads"] = args.threads
    if args.output_dir is not None:
        overrides["output_dir"] = str(args.output_dir)
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        raw = dict(raw, **overrides)
    return cfg, raw


def _register(args, cfg):
    from .registration import register_affine, register_diffeo
    from .template import _transport_one

    fixed, moving = read_volume(args.fixed), read_volume(args.moving)
    aff = register_affine(fixed, moving, cfg.registration)
    aligned = _transport_one(moving, aff, None)
    res = register_diffeo(fixed, aligned, cfg.registration)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "affine.json").write_text(json.dumps(aff.to_dict(), indent=2, sort_keys=True))
    write_volume(res.velocity, out / "velocity.mhd")
    write_volume(res.forward_disp, out / "forward.mhd")
    write_volume(res.inverse_disp, out / "inverse.mhd")
    write_volume(warp(aligned, res.forward_disp), out / "warped.mhd")
    summary = {"final_similarity": res.final_similarity, "min_jacobian": res.min_jacobian, "levels": res.level_history}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


def _denoise_file(args):
    from .n2n import denoise_volume, load_model

    if args.input is None or args.output is None:
        raise ConfigError("--model needs --input and --output")
    net = load_model(args.model)
    write_volume(denoise_volume(net, read_volume(args.input)), args.output)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, raw = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "register":
            _register(args, cfg)
        elif args.command == "export":
            from .views import export_views

            export_views(read_volume(args.volume), args.out, axis=args.axis)
        elif args.command == "denoise" and args.model is not None:
            _denoise_file(args)
        else:
            status = run_pipeline(cfg, raw, until=STAGE_COMMANDS[args.command])
            for stage, state in status.items():
                print(f"{stage}: {state}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, PipelineLockedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except Exception as exc:  # file-mode failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
