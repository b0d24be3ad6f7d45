"""``mhvae`` command-line front end.

Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or configuration
error.  When ``--out`` is omitted, outputs go under ``$MHVAE_OUTPUT_ROOT``
(default ``runs``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

OUTPUT_ROOT_ENV = "MHVAE_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs")


def image_size(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        n = -1
    if n < 16 or n & (n - 1):
        raise argparse.ArgumentTypeError(f"size must be a power of two ≥ 16 (got {text})")
    return n


def positive_int(text: str) -> int:
    try:
        n = int(text)
    except ValueError:
        n = 0
    if n < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return n


def _named_path(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected MODALITY=PATH, got {text}")
    name, path = text.split("=", 1)
    return name, path


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="mhvae", description="Multi-modal hierarchical VAE: training and missing-modality synthesis.", formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic paired MR/US dataset", formatter_class=fmt)
    g.add_argument("--count", type=positive_int, default=576, help="number of sample pairs")
    g.add_argument("--test-count", type=int, default=64, help="how many of them form the test split")
    g.add_argument("--seed", type=int, default=7, help="generator seed")
    g.add_argument("--size", type=image_size, default=64, help="image height and width (power of two >= 16)")
    g.add_argument("--out", default=None, help=f"dataset directory (default: ${OUTPUT_ROOT_ENV}/data)")

    t = sub.add_parser("train", help="train a model from a config file", formatter_class=fmt)
    t.add_argument("--config", default=None, help="YAML run configuration (built-in defaults if omitted)")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override a config entry, e.g. loss.lambda_gan=0 (repeatable)")
    t.add_argument("--ablation", choices=["mvae", "no-gan"], default=None, help="mvae: single-level latent; no-gan: lambda_gan=0")
    t.add_argument("--resume", default=None, help="continue from this checkpoint")
    t.add_argument("--out", default=None, help=f"run directory (default: config out_dir, else ${OUTPUT_ROOT_ENV}/train)")
    t.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    s = sub.add_parser("synthesize", help="synthesize a target modality from available ones", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="trained checkpoint")
    s.add_argument("--input", dest="inputs", action="append", type=_named_path, default=[], metavar="MODALITY=PNG", help="an available 16-bit input image (repeatable)")
    s.add_argument("--target", required=True, help="modality name to synthesize")
    s.add_argument("--out", default=None, help=f"output PNG (default: ${OUTPUT_ROOT_ENV}/synth_<target>.png)")

    a = sub.add_parser("sample", help="unconditional samples from the prior chain", formatter_class=fmt)
    a.add_argument("--checkpoint", required=True, help="trained checkpoint")
    a.add_argument("--count", type=positive_int, default=4, help="number of samples")
    a.add_argument("--seed", type=int, default=0, help="noise seed")
    a.add_argument("--temperature", type=float, default=1.0, help="scale of the prior noise")
    a.add_argument("--out", default=None, help=f"output directory (default: ${OUTPUT_ROOT_ENV}/samples)")

    e = sub.add_parser("evaluate", help="PSNR/SSIM over a dataset split for every subset", formatter_class=fmt)
    e.add_argument("--checkpoint", required=True, help="trained checkpoint")
    e.add_argument("--data", required=True, help="dataset directory holding manifest.json")
    e.add_argument("--split", default="test", help="split to evaluate")
    e.add_argument("--batch-size", type=positive_int, default=32, help="evaluation batch size")
    e.add_argument("--out", default=None, help=f"report directory (default: ${OUTPUT_ROOT_ENV}/eval)")
    return p


def cmd_gen_data(args) -> int:
    from mhvae.data import generate_synthetic

    if not 0 <= args.test_count <= args.count:
        raise UsageError("--test-count must lie between 0 and --count")
    out = Path(args.out) if args.out else output_root() / "data"
    manifest = generate_synthetic(out, args.count, args.seed, args.size, test_count=args.test_count)
    print(Path(manifest.root) / "manifest.json")
    return 0


def cmd_train(args) -> int:
    from mhvae.config import apply_override, build_config, dump_config, read_document
    from mhvae.config import ConfigError
    from mhvae.trainer import resume, train

    doc = read_document(args.config) if args.config else {}
    for o in args.overrides:
        apply_override(doc, o)
    if args.ablation == "mvae":
        doc["hierarchy"] = {"num_levels": 1, "top_channels": (doc.get("hierarchy") or {}).get("top_channels", 256)}
    elif args.ablation == "no-gan":
        doc.setdefault("loss", {})["lambda_gan"] = 0.0
    if args.out:
        doc["out_dir"] = args.out
    elif "out_dir" not in doc:
        doc["out_dir"] = str(output_root() / "train")
    cfg = build_config(doc)
    if args.print_config:
        print(dump_config(cfg), end="")
        return 0
    if not (Path(cfg.data_dir) / "manifest.json").is_file():
        raise ConfigError(f"data_dir {cfg.data_dir} has no manifest.json")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    ckpt = resume(args.resume, config=cfg) if args.resume else train(cfg)
    print(ckpt)
    return 0


def _load_model_or_fail(path):
    from mhvae.trainer import load_model

    return load_model(path)


def cmd_synthesize(args) -> int:
    from mhvae.data import read_png16
    from mhvae.trainer import synthesize_array
    from mhvae.data import write_png16

    model, _, state = _load_model_or_fail(args.checkpoint)
    names = list(state["modality_names"])
    if not args.inputs:
        raise UsageError("no input modality given; for unconditional generation use the `sample` subcommand")
    if args.target not in names:
        raise UsageError(f"unknown target modality {args.target!r}; choose from {', '.join(names)}")
    inputs: List = [None] * len(names)
    for name, path in args.inputs:
        if name not in names:
            raise UsageError(f"unknown input modality {name!r}; choose from {', '.join(names)}")
        if inputs[names.index(name)] is not None:
            raise UsageError(f"modality {name} given twice")
        inputs[names.index(name)] = read_png16(path)
    expected = (model.arch.image_size, model.arch.image_size)
    for name, x in zip(names, inputs):
        if x is not None and x.shape != expected:
            raise UsageError(f"input {name} is {x.shape[0]}x{x.shape[1]}, model expects {expected[0]}x{expected[1]}")
    out = Path(args.out) if args.out else output_root() / f"synth_{args.target}.png"
    write_png16(out, synthesize_array(model, inputs, names.index(args.target)))
    print(out)
    return 0


def cmd_sample(args) -> int:
    from mhvae.trainer import sample_prior

    out = Path(args.out) if args.out else output_root() / "samples"
    for p in sample_prior(args.checkpoint, args.count, args.seed, out, args.temperature):
        print(p)
    return 0


def cmd_evaluate(args) -> int:
    from mhvae.data import load_manifest
    from mhvae.metrics import evaluate

    model, _, _ = _load_model_or_fail(args.checkpoint)
    manifest = load_manifest(args.data).split(args.split)
    if not manifest.samples:
        raise UsageError(f"split {args.split!r} is empty")
    report = evaluate(model, manifest, batch_size=args.batch_size)
    out = Path(args.out) if args.out else output_root() / "eval"
    per_sample, summary = report.write_csv(out)
    print(per_sample)
    print(summary)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "synthesize": cmd_synthesize,
    "sample": cmd_sample,
    "evaluate": cmd_evaluate,
}


def main(argv: Optional[List[str]] = None) -> int:
    from mhvae.errors import ContractError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ContractError) as exc:
        print(f"mhvae {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"mhvae {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
