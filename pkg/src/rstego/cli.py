"""Command-line interface.

Commands: ingest, train, embed, extract, attack, eval, gradcheck.
Exit codes: 0 success, 1 runtime failure, 2 usage/config error. Every
command is deterministic given --seed; without it a fresh seed is drawn
and printed. Precedence for configuration values: CLI flag over
RSTEGO_* environment variable over config file over built-in default.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets as py_secrets
import sys
from pathlib import Path

import numpy as np
import torch

from . import attacks, core, data, evaluation, networks, training
from .kv import apply_env_overrides, parse_kv

GRADCHECK_LINEAR_OPS = ("noise", "blur", "scale", "crop", "jpeg_mask")
GRADCHECK_THRESHOLD_LINEAR = 1e-3
GRADCHECK_THRESHOLD_NONLINEAR = 1e-2


class CliError(Exception):
    """Usage or configuration problem (exit code 2)."""


def _resolve_seed(args) -> int:
    if args.seed is not None:
        return args.seed
    seed = py_secrets.randbelow(2 ** 31)
    print(f"seed: {seed}", file=sys.stderr)
    return seed


def _load_image_checked(path: str, side: int | None, strict: bool) -> torch.Tensor:
    with_side = side
    if with_side is None:
        from PIL import Image
        with Image.open(path) as img:
            width, height = img.size
        if width != height:
            if strict:
                raise CliError(f"{path} is {width}x{height}, not square "
                               "(strict mode refuses to resize)")
            print(f"warning: resizing non-square {width}x{height} input to "
                  f"{min(width, height)}x{min(width, height)}", file=sys.stderr)
        with_side = min(width, height)
    return core.load_image(path, with_side)


# -- commands -------------------------------------------------------------------


def cmd_ingest(args) -> int:
    fractions = tuple(float(part) for part in args.fractions.split(","))
    if len(fractions) != 3:
        raise CliError(f"--fractions needs three comma-separated values, got {args.fractions!r}")
    seed = _resolve_seed(args)
    manifest = data.ingest(args.src, args.side, fractions, seed)
    manifest.save(args.out)
    counts = {split: len(manifest.paths(split)) for split in data.SPLITS}
    print(json.dumps({"manifest": args.out, "side": args.side, **counts}))
    return 0


def _apply_cli_overrides(config: training.TrainConfig, args) -> training.TrainConfig:
    overrides = {}
    for key in ("steps", "batch_size", "image_side", "n_secrets"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        from dataclasses import replace
        config = replace(config, **overrides).validate()
    return config


def _read_train_config(args) -> training.TrainConfig:
    pairs: dict[str, str] = {}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        pairs = parse_kv(path.read_text(encoding="utf-8"))
    pairs = apply_env_overrides(pairs, training.TrainConfig.kv_keys())
    config = training.TrainConfig.from_kv(pairs)
    return _apply_cli_overrides(config, args)


def cmd_train(args) -> int:
    if args.config is None and args.resume is None:
        raise CliError("train needs --config (or --resume with an embedded config)")
    resume_payload = None
    if args.resume is not None:
        bundle, resume_payload = networks.load_checkpoint(args.resume)
        if args.config is None:
            config = _apply_cli_overrides(training.TrainConfig.from_kv_text(
                resume_payload["extra"]["train_config"]), args)
        else:
            config = _read_train_config(args)
    else:
        config = _read_train_config(args)
        bundle = config.build()
    manifest = data.DatasetManifest.load(args.manifest).validate()
    dataset = data.ArrayDataset.from_manifest(manifest)
    out_dir = args.out_dir or "train-out"
    written = training.train(bundle, dataset, config, out_dir,
                             resume_payload=resume_payload)
    print(json.dumps({"checkpoints": written,
                      "metrics": os.path.join(out_dir, "metrics.jsonl")}))
    return 0


def cmd_embed(args) -> int:
    bundle, payload = networks.load_checkpoint(args.checkpoint)
    if len(args.secrets) != bundle.n:
        raise CliError(f"checkpoint hides n={bundle.n} secrets, "
                       f"got {len(args.secrets)} secret images")
    side = payload["extra"].get("image_side")
    cover = _load_image_checked(args.cover, side, args.strict)
    actual_side = cover.shape[-1]
    secret_tensors = [core.load_image(p, actual_side) for p in args.secrets]
    bundle.eval()
    with torch.no_grad():
        residual, marked = bundle.embed(cover, secret_tensors)
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    core.save_image(marked, out_dir / "marked.png")
    core.save_image((evaluation.AMPLIFICATION * residual).clamp(-1, 1),
                    out_dir / "residual.png")
    np.save(out_dir / "residual_raw.npy", residual.numpy())
    print(json.dumps({"marked": str(out_dir / "marked.png"),
                      "residual": str(out_dir / "residual.png"),
                      "residual_raw": str(out_dir / "residual_raw.npy"),
                      "psnr_marked_vs_cover": core.psnr(marked, cover)}))
    return 0


def cmd_extract(args) -> int:
    bundle, payload = networks.load_checkpoint(args.checkpoint)
    if bundle.decoupler is None:
        raise CliError("this checkpoint was trained without the decoupling stage")
    side = payload["extra"].get("image_side")
    attacked = _load_image_checked(args.image, side, args.strict)
    bundle.eval()
    with torch.no_grad():
        residual_estimate, cover_estimate = bundle.decouple(attacked)
        revealed = bundle.reveal(residual_estimate)
    out_dir = Path(args.out_dir or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {}
    for index, secret in enumerate(revealed, start=1):
        path = out_dir / f"secret_{index}.png"
        core.save_image(secret, path)
        outputs[f"secret_{index}"] = str(path)
    core.save_image(cover_estimate, out_dir / "recovered_cover.png")
    core.save_image(residual_estimate.clamp(-1, 1), out_dir / "extracted_residual.png")
    outputs["recovered_cover"] = str(out_dir / "recovered_cover.png")
    outputs["extracted_residual"] = str(out_dir / "extracted_residual.png")
    print(json.dumps(outputs))
    return 0


ATTACK_OPS = ("noise", "blur", "scale", "crop", "jpeg-mask", "jpeg-soft",
              "jpeg-round", "jpeg-mix", "real-jpeg")


def cmd_attack(args) -> int:
    seed = _resolve_seed(args)
    rng = torch.Generator().manual_seed(seed)
    image = _load_image_checked(args.input, None, args.strict)
    op = args.op
    if op == "noise":
        out = attacks.gaussian_noise(image, args.sigma, generator=rng)
    elif op == "blur":
        out = attacks.gaussian_blur(image, args.kernel, args.sigma)
    elif op == "scale":
        out = attacks.random_scale(image, args.factor)
    elif op == "crop":
        if args.cover is None:
            raise CliError("crop needs --cover to fill the discarded region")
        cover = core.load_image(args.cover, image.shape[-1])
        out = attacks.random_crop(image, cover, args.keep_ratio, generator=rng)
    elif op == "jpeg-mask":
        out = attacks.jpeg_mask(image, args.qf)
    elif op == "jpeg-soft":
        out = attacks.jpeg_soft(image, args.qf)
    elif op == "jpeg-round":
        out = attacks.jpeg_round(image, args.qf)
    elif op == "jpeg-mix":
        out = attacks.jpeg_mixup(image, attacks.AttackConfig().jpeg_mix_weights)
    else:  # real-jpeg
        out = attacks.real_jpeg(image, args.qf)
    print(f"psnr vs input: {core.psnr(image, out):.2f} dB", file=sys.stderr)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if op == "real-jpeg" and out_path.suffix.lower() in (".jpg", ".jpeg"):
        from PIL import Image
        Image.fromarray(core.quantize_to_uint8(image)[0]).save(out_path, format="JPEG",
                                                               quality=args.qf)
    else:
        core.save_image(out, out_path)
    return 0


def cmd_eval(args) -> int:
    if args.count <= 0:
        raise CliError(f"--count must be positive, got {args.count}")
    seed = _resolve_seed(args)
    bundle, _payload = networks.load_checkpoint(args.checkpoint)
    manifest = data.DatasetManifest.load(args.manifest).validate()
    dataset = data.ArrayDataset.from_manifest(manifest, split=args.split,
                                              val_split=args.split)
    attack_list = ([evaluation.EvalAttack.parse(part) for part in args.attacks.split("/")]
                   if args.attacks else list(evaluation.DEFAULT_EVAL_ATTACKS))
    result = evaluation.run_battery(bundle, dataset, attack_list, args.count, seed)
    out_dir = Path(args.out_dir or "eval-out")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "battery.json").write_text(result.to_json(), encoding="utf-8")
    (out_dir / "battery.txt").write_text(result.to_text_table(), encoding="utf-8")
    print(result.to_text_table())
    return 0


def cmd_gradcheck(args) -> int:
    ops = list(attacks.GRADCHECK_OPS) if args.op == "all" else [args.op]
    failures = 0
    print(f"{'op':<14} {'max_rel_err':>12} {'threshold':>10}  result")
    for op in ops:
        threshold = (GRADCHECK_THRESHOLD_LINEAR if op in GRADCHECK_LINEAR_OPS
                     else GRADCHECK_THRESHOLD_NONLINEAR)
        error = attacks.gradient_check(op, num_coords=args.trials, seed=args.seed or 0)
        verdict = "pass" if error <= threshold else "FAIL"
        failures += verdict == "FAIL"
        print(f"{op:<14} {error:>12.3e} {threshold:>10.0e}  {verdict}")
    return 1 if failures else 0


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="deterministic seed; drawn and printed when omitted")
    common.add_argument("--out-dir", default=None, help="output directory")
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--strict", action="store_true",
                        help="refuse fixable input problems instead of warning")

    parser = argparse.ArgumentParser(prog="rstego",
                                     description="Robust image-in-image hiding toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="scan images into a manifest")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--side", type=int, default=256)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train a pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--image-side", dest="image_side", type=int, default=None)
    p.add_argument("--n-secrets", dest="n_secrets", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common], help="hide secrets in a cover image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cover", required=True)
    p.add_argument("secrets", nargs="+", help="secret image paths")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", parents=[common], help="recover secrets from an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("attack", parents=[common], help="apply one attack to an image")
    p.add_argument("--input", required=True)
    p.add_argument("--op", required=True, choices=ATTACK_OPS)
    p.add_argument("--out", required=True)
    p.add_argument("--qf", type=int, default=70)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--kernel", type=int, default=5)
    p.add_argument("--factor", type=float, default=0.5)
    p.add_argument("--keep-ratio", dest="keep_ratio", type=float, default=0.7)
    p.add_argument("--cover", default=None)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", parents=[common], help="run the attack battery")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--attacks", default=None,
                   help="slash-separated list, e.g. none/real-jpeg:70/scale:0.5")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of attack gradients")
    p.add_argument("--op", default="all", choices=("all",) + attacks.GRADCHECK_OPS)
    p.add_argument("--trials", type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exit_info:
        return exit_info.code if isinstance(exit_info.code, int) else 2
    try:
        return args.func(args)
    except (CliError, ValueError) as error:
        print(f"error: {error}", file=sys.stderr)
        return 2
    except training.NonFiniteLossError as error:
        print(f"training aborted: {error}", file=sys.stderr)
        return 1
    except Exception as error:  # noqa: BLE001 - CLI boundary
        print(f"failed: {type(error).__name__}: {error}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())
