"""``smokenet`` command line.

Exit status: 0 success, 1 invalid input (config, manifest, checkpoint,
failed gradient check), 2 runtime failure (unwritable output, images
that could not be processed).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import gradcheck, runner
from .data import ManifestError, SampleError
from .model import CheckpointError, ConfigError

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2

logger = logging.getLogger("smokenet")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--out", help="output directory")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--manifest", help="dataset manifest (overrides data.manifest)")
    p.add_argument("-q", "--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="smokenet", description="Smoke segmentation network tooling")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("train", "train a model; writes best.ckpt, last.ckpt and log.jsonl"),
        ("eval", "mIoU on the test split plus params, FLOPs and FPS"),
        ("infer", "write a binary mask and a red overlay per input image"),
        ("profile", "parameter and FLOP counts for the M1..M8 ablation variants"),
        ("gradcheck", "finite-difference check of every differentiable op"),
        ("augment-preview", "write augmented copies of training samples"),
        ("show-config", "print the default configuration file"),
    ):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        if name == "infer":
            p.add_argument("images", nargs="+", type=Path)
        if name == "train":
            p.add_argument("--resume", action="store_true", help="continue from <out>/last.ckpt")
        if name == "gradcheck":
            p.add_argument("--seeds", type=int, default=20)
    return parser


def resolve_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config)
    cfg = cfg.with_overrides(seed=args.seed, precision=args.precision, out=args.out)
    raw = cfg.to_dict()
    if args.manifest:
        raw["data"]["manifest"] = args.manifest
    if getattr(args, "resume", False):
        raw["train"]["resume"] = True
    return config_mod.RunConfig.from_dict(raw)


def _run(args) -> int:
    if args.command == "show-config":
        print(config_mod.defaults_text(), end="")
        return EXIT_OK
    cfg = resolve_config(args)

    if args.command == "train":
        result = runner.train(cfg)
        print(f"best mIoU {result.best_miou:.4f}; checkpoints in {result.out}")
        return EXIT_OK

    if args.command == "eval":
        report = runner.evaluate(cfg, args.checkpoint)
        out = runner.prepare_out(cfg.out)
        config_mod.dump(cfg, out / "config.yaml")
        (out / "report.json").write_text(report.to_json())
        print(report.table())
        return EXIT_OK

    if args.command == "infer":
        out = runner.prepare_out(cfg.out)
        config_mod.dump(cfg, out / "config.yaml")
        written, failures = runner.infer(cfg, args.images, args.checkpoint)
        for path, msg in failures:
            print(f"failed: {path}: {msg}", file=sys.stderr)
        print(f"{len(written)} of {len(args.images)} images processed; outputs in {out}")
        return EXIT_FAILURE if failures else EXIT_OK

    if args.command == "profile":
        rows = runner.profile_rows(cfg)
        print(runner.profile_table(rows))
        print("\nFLOP share by component (M8):")
        for name, share in runner.component_shares(rows[-1]["by_layer"])[:10]:
            print(f"  {name:<12}{100 * share:6.2f} %")
        if args.out:
            out = runner.prepare_out(cfg.out)
            config_mod.dump(cfg, out / "config.yaml")
            (out / "profile.json").write_text(json.dumps(rows, indent=2))
        return EXIT_OK

    if args.command == "gradcheck":
        results = gradcheck.run_suite(seeds=args.seeds, base_seed=cfg.seed)
        print(gradcheck.format_report(results))
        failed = [r.name for r in results if not r.passed]
        if failed:
            print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
            return EXIT_INVALID
        return EXIT_OK

    if args.command == "augment-preview":
        written = runner.augment_preview(cfg)
        config_mod.dump(cfg, Path(cfg.out) / "config.yaml")
        print(f"wrote {len(written)} images to {cfg.out}")
        return EXIT_OK

    raise AssertionError(args.command)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    runner.setup_console(verbose=not args.quiet)
    try:
        return _run(args)
    except (ConfigError, ManifestError, SampleError, CheckpointError, runner.InputError) as exc:
        logger.error(f"error: {exc}")
        return EXIT_INVALID
    except (runner.RunFailure, OSError) as exc:
        logger.error(f"failed: {exc}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
