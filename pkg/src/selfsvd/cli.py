"""Command-line entry points: synth, train, finetune-star, infer, eval.

Every subcommand takes ``--config`` (YAML, see config.py) with
``SELFSVD_<SECTION>__<FIELD>`` environment overrides. Failures exit nonzero
with one machine-readable JSON error line on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import AppConfig, load_config
from .core import Clip, load_clip, load_dataset, save_clip
from .errors import DesmokeError, InvalidConfig
from .network import build_model, load_checkpoint, model_summary, run_clip
from .pipeline import (
    evaluate_dataset,
    finetune_star,
    process_stream,
    train,
)
from .smoke import build_dataset, write_clean_library


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")


def _parse_size(text: str):
    try:
        h, w = (int(p) for p in text.lower().split("x"))
    except ValueError as exc:
        raise InvalidConfig(f"--size must look like 64x64, got '{text}'") from exc
    return h, w


def cmd_synth(args, cfg: AppConfig) -> int:
    clean_root = args.clean_root
    if args.make_clean:
        if clean_root is None:
            clean_root = Path(args.out) / "clean_src"
        h, w = _parse_size(args.size)
        write_clean_library(
            clean_root, args.make_clean, h, w, args.frames, seed=cfg.smoke.seed
        )
    if clean_root is None:
        raise InvalidConfig("synth needs --clean-root or --make-clean N")
    manifest = build_dataset(
        clean_root, args.out, [cfg.smoke], split_ratio=args.split_ratio, seed=cfg.smoke.seed
    )
    print(f"wrote {manifest}")
    return 0


def cmd_train(args, cfg: AppConfig) -> int:
    dataset = load_dataset(args.data, "train")
    result = train(
        dataset,
        cfg.network,
        cfg.train,
        mask_cfg=cfg.mask_cfg_or_none(),
        flow_backend=cfg.make_flow_backend(),
        out_dir=args.out,
    )
    summary = model_summary(result.model)
    print(f"trained {cfg.network.variant} model ({summary['total']} params)")
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def cmd_finetune_star(args, cfg: AppConfig) -> int:
    dataset = load_dataset(args.data, "train")
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt)
    result = finetune_star(
        model,
        dataset,
        cfg.train,
        mask_cfg=cfg.mask_cfg_or_none(),
        flow_backend=cfg.make_flow_backend(),
        out_dir=args.out,
    )
    print(f"fine-tuned from {args.checkpoint}")
    print(f"final checkpoint: {result.final_checkpoint}")
    return 0


def _dump_mask_png(mask, path: Path) -> None:
    Image.fromarray((mask.data * 255).astype(np.uint8), mode="L").save(path)


def cmd_infer(args, cfg: AppConfig) -> int:
    clip = load_clip(args.input)
    ckpt = load_checkpoint(args.checkpoint)
    model = build_model(ckpt)
    model.eval()
    backend = cfg.make_flow_backend()
    mask_cfg = cfg.mask_cfg_or_none()
    out_dir = Path(args.out)

    if args.stream:
        stats: dict = {}
        outputs = list(
            process_stream(model, clip.frames, cfg.deploy, backend, mask_cfg, stats=stats)
        )
        (out_dir / "stream_stats.json").parent.mkdir(parents=True, exist_ok=True)
        save_clip(Clip(frames=tuple(outputs), ps_frame=clip.ps_frame, id=clip.id), out_dir)
        (out_dir / "stream_stats.json").write_text(json.dumps(stats, indent=2))
    else:
        outputs, auxes = run_clip(model, clip, clip.ps_frame, backend, mask_cfg)
        save_clip(Clip(frames=tuple(outputs), ps_frame=clip.ps_frame, id=clip.id), out_dir)
        if args.dump_masks:
            for i, aux in enumerate(auxes, start=1):
                if aux["mask"] is not None:
                    _dump_mask_png(aux["mask"], out_dir / f"mask_{i:04d}.png")
    print(f"restored {len(clip)} frames -> {out_dir}")
    return 0


def cmd_eval(args, cfg: AppConfig) -> int:
    dataset = load_dataset(args.data, args.split)
    model = None
    if args.checkpoint is not None:
        model = build_model(load_checkpoint(args.checkpoint))
        model.eval()
    elif args.target_mode == "enhanced-ps":
        raise InvalidConfig("enhanced-ps target mode needs --checkpoint")
    report = evaluate_dataset(
        dataset,
        model,
        cfg.make_flow_backend(),
        mask_cfg=cfg.mask_cfg_or_none(),
        target_mode=args.target_mode,
        tau=cfg.train.tau,
    )
    out_dir = Path(args.out)
    report.write_csv(out_dir / "report.csv")
    report.write_summary(out_dir / "summary.json")
    agg = report.aggregate()
    print(json.dumps(agg, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfsvd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a paired smoky dataset")
    _add_common(p)
    p.add_argument("--clean-root", type=Path, default=None)
    p.add_argument("--make-clean", type=int, default=0, metavar="N",
                   help="generate N procedural clean clips first")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", default="64x64")
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a synthesized dataset")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune-star", help="fine-tune with enhanced PS supervision")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_finetune_star)

    p = sub.add_parser("infer", help="restore one clip (batch or streaming mode)")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--stream", action="store_true", help="streaming mode with Ref detector")
    p.add_argument("--dump-masks", action="store_true",
                   help="write patch-grid mask PNGs next to the outputs")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="score a split with aligned PSNR/SSIM")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--target-mode", default="original-ps",
                   choices=["original-ps", "enhanced-ps", "synthetic-gt"])
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.fn(args, cfg)
    except DesmokeError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    except OSError as exc:
        print(json.dumps({"error": "IOError", "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
