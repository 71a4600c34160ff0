"""Command-line entry points: gen-data, train, eval, predict, serve.

Exit codes: 0 success, 1 runtime failure, 2 bad flags (argparse).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import data as dat
from . import evaluation as ev
from . import gradcam as gc
from .models import (ARCHITECTURES, ArchConfig, build_ensemble, load_arch_config,
                     load_checkpoint)
from .report import emit_report, render_table
from .training import DivergenceError, TrainConfig, train, write_train_log


def _size(text: str) -> tuple[int, int]:
    parts = text.split("x" if "x" in text else ",")
    if len(parts) == 1:
        n = int(parts[0])
        return (n, n)
    h, w = (int(p) for p in parts)
    return (h, w)


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bonecheck",
                                 description="Radiograph abnormality pipeline")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a seeded synthetic dataset tree")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--studies-per-type", type=int, default=2,
                   help="studies per (type, label)")
    g.add_argument("--views-min", type=int, default=1)
    g.add_argument("--views-max", type=int, default=3)
    g.add_argument("--image-size", type=_size, default=(64, 64))
    g.add_argument("--valid-fraction", type=float, default=0.0)

    t = sub.add_parser("train", help="train one micro model")
    t.add_argument("--arch", choices=sorted(ARCHITECTURES))
    t.add_argument("--arch-config", help="key-value architecture file (overrides --arch)")
    t.add_argument("--data", required=True, help="dataset root")
    t.add_argument("--epochs", type=int, default=20)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="train log CSV (default: <out>.log.csv)")
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--decay", type=float, default=1e-4)
    t.add_argument("--image-size", type=_size, default=(64, 64))
    t.add_argument("--valid-split", default=None,
                   help="split used for validation (default: valid, else train)")
    t.add_argument("--no-class-weights", action="store_true")
    t.add_argument("--no-augment", action="store_true")

    e = sub.add_parser("eval", help="evaluate a model or checkpoint ensemble")
    grp = e.add_mutually_exclusive_group(required=True)
    grp.add_argument("--model", help="single checkpoint")
    grp.add_argument("--ensemble", help="comma-separated member checkpoints")
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="valid")
    e.add_argument("--out", required=True, help="report JSON path")
    e.add_argument("--image-size", type=_size, default=(64, 64))
    e.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("predict", help="predict one image with one or more models")
    p.add_argument("--model", action="append", required=True,
                   help="checkpoint path; repeat for several models")
    p.add_argument("--image", required=True)
    p.add_argument("--cam", action="store_true", help="write Grad-CAM overlays")
    p.add_argument("--out", default=".", help="directory for CAM overlays")
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--image-size", type=_size, default=(64, 64))

    s = sub.add_parser("serve", help="run the HTTP prediction service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--model", action="append", default=[],
                   help="name=checkpoint; repeat per model")
    s.add_argument("--models-dir",
                   help="directory of *.ckpt files (fallback: $BONECHECK_MODELS_DIR)")
    s.add_argument("--max-upload-bytes", type=int, default=10 * 1024 * 1024)
    s.add_argument("--no-cam", action="store_true")
    s.add_argument("--static", help="directory of web UI assets to serve at /")
    return ap


def cmd_gen_data(args) -> int:
    spec = dat.SyntheticSpec(studies_per_type_per_label=args.studies_per_type,
                             views_min=args.views_min, views_max=args.views_max,
                             image_size=args.image_size,
                             valid_fraction=args.valid_fraction)
    try:
        root = dat.generate_synthetic_dataset(spec, args.seed, args.out)
    except OSError as e:
        print(f"error: generation failed: {e}", file=sys.stderr)
        return 1
    n_images = sum(1 for _ in Path(root).rglob("*.png"))
    n_studies = sum(1 for p in Path(root).rglob("study*_*") if p.is_dir())
    print(f"wrote {n_studies} studies / {n_images} images under {root}")
    return 0


def cmd_train(args) -> int:
    if args.arch_config:
        arch, cfg = load_arch_config(args.arch_config)
        cfg.seed = args.seed
    elif args.arch:
        arch = args.arch
        cfg = ArchConfig(input_size=(1,) + tuple(args.image_size), seed=args.seed)
    else:
        print("error: one of --arch/--arch-config is required", file=sys.stderr)
        return 2
    model = ARCHITECTURES[arch](cfg)
    train_manifest = dat.scan_dataset(args.data, "train")
    valid_split = args.valid_split
    if valid_split is None:
        valid_split = "valid" if (Path(args.data) / "valid").is_dir() else "train"
    valid_manifest = dat.scan_dataset(args.data, valid_split)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         seed=args.seed,
                         use_class_weights=not args.no_class_weights,
                         checkpoint_path=args.out, lr=args.lr, decay=args.decay,
                         target_size=args.image_size,
                         augment=not args.no_augment)
    try:
        _, log = train(model, train_manifest, valid_manifest, config)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    write_train_log(log, args.log or f"{args.out}.log.csv")
    last = log[-1]
    print(f"trained {arch}: {len(log)} epochs, final train loss "
          f"{last.train_loss:.4f}, valid acc {last.valid_acc:.3f}; "
          f"checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.model:
        model = load_checkpoint(args.model)
    else:
        members = [load_checkpoint(p.strip()) for p in args.ensemble.split(",") if p.strip()]
        shapes = {m.input_shape for m in members}
        if len(shapes) > 1:
            print(f"error: incompatible member input shapes: {sorted(shapes)}",
                  file=sys.stderr)
            return 1
        model = build_ensemble(members)
    manifest = dat.scan_dataset(args.data, args.split)
    report = ev.evaluate(model, manifest, target_size=args.image_size)
    emit_report(report, args.out, figures=not args.no_figures)
    print(render_table(report))
    print(f"report written to {args.out}")
    return 0


def cmd_predict(args) -> int:
    try:
        image = dat.load_image(args.image, args.image_size)
    except dat.DatasetError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    out_dir = Path(args.out)
    for ckpt in args.model:
        model = load_checkpoint(ckpt)
        p_normal = ev.predict_image(model, image)
        decision = ev.decide(p_normal)
        print(f"{model.name} ({Path(ckpt).name}): p(normal)={p_normal!r} "
              f"p(abnormal)={1.0 - p_normal!r} -> {decision}")
        if args.cam:
            out_dir.mkdir(parents=True, exist_ok=True)
            heatmap = gc.grad_cam(model, image, explained_class=decision)
            path = out_dir / f"cam_{Path(ckpt).stem}.png"
            gc.save_overlay_png(heatmap, image, path, alpha=args.alpha)
            print(f"  cam overlay: {path}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app, resolve_registry

    try:
        registry = resolve_registry(args.model, args.models_dir)
        config = ServiceConfig(registry=registry,
                               max_upload_bytes=args.max_upload_bytes,
                               cam_enabled=not args.no_cam,
                               static_dir=args.static)
        app = create_app(config)
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handler = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
               "predict": cmd_predict, "serve": cmd_serve}[args.command]
    try:
        return handler(args)
    except (dat.DatasetError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
