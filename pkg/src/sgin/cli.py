"""Command-line entry points: dataset forging, training, eval, inference, serving."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="sgin", description="semantics-guided facial inpainting")
    sub = p.add_subparsers(dest="command", required=True)

    fp = sub.add_parser("forge", help="synthesize an occluded-face dataset")
    fp.add_argument("--root", required=True)
    fp.add_argument("--n", type=int, default=450)
    fp.add_argument("--resolution", type=int, default=64)
    fp.add_argument("--seed", type=int, default=0)

    tp = sub.add_parser("train", help="train the inpainting model")
    tp.add_argument("--config", required=True)
    tp.add_argument("--resume", default=None, help="checkpoint to continue from")

    for name, help_text in (("train-detector", "train the occlusion detector"),
                            ("train-segmenter", "train the semantic predictor")):
        ap = sub.add_parser(name, help=help_text)
        ap.add_argument("--config", required=True)
        ap.add_argument("--steps", type=int, default=None)

    ep = sub.add_parser("eval", help="score a checkpoint on the val split")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--out", default=None, help="metrics CSV path")

    bp = sub.add_parser("ablate", help="train + score every config in a directory")
    bp.add_argument("--configs", required=True, help="directory of config files")
    bp.add_argument("--out", default="ablation.csv")

    ip = sub.add_parser("infer", help="inpaint one image")
    ip.add_argument("--checkpoint", required=True)
    ip.add_argument("--image", required=True)
    ip.add_argument("--mask", default=None)
    ip.add_argument("--semantics", default=None)
    ip.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("serve", help="run the HTTP service")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--port", type=int, default=8000)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--detector", default=None)
    sp.add_argument("--segmenter", default=None)

    args = p.parse_args(argv)

    if args.command == "forge":
        from .data_forge import ForgeConfig, build_dataset
        manifest = build_dataset(ForgeConfig(root=args.root, n_samples=args.n,
                                             resolution=args.resolution, seed=args.seed))
        print(f"wrote {len(manifest.ids)} samples "
              f"({len(manifest.train)} train / {len(manifest.val)} val) to {args.root}")
        return 0

    if args.command == "train":
        from .config import load_config
        from .trainer import fit
        path = fit(load_config(args.config), resume_from=args.resume)
        print(f"final checkpoint: {path}")
        return 0

    if args.command in ("train-detector", "train-segmenter"):
        from .config import load_config
        from .trainer import fit_detector, fit_segmenter
        run = fit_detector if args.command == "train-detector" else fit_segmenter
        path = run(load_config(args.config), steps=args.steps)
        print(f"checkpoint: {path}")
        return 0

    if args.command == "eval":
        from .data_forge import load_manifest
        from .metrics import ALL_METRICS, evaluate
        from .trainer import load_bundle
        bundle = load_bundle(args.checkpoint)
        manifest = load_manifest(args.data)
        out = args.out or str(Path(args.checkpoint).parent / "metrics.csv")
        report = evaluate(bundle, manifest, bundle.config, csv_path=out)
        for metric in ALL_METRICS:
            whole, masked = report.values[metric]
            print(f"{metric:8s} whole={whole:10.4f} masked_only={masked:10.4f}")
        print(f"wrote {out}")
        return 0

    if args.command == "ablate":
        from .trainer import run_ablation
        config_paths = sorted(Path(args.configs).glob("*"))
        config_paths = [p for p in config_paths if p.is_file()]
        if not config_paths:
            print(f"no config files in {args.configs}", file=sys.stderr)
            return 1
        run_ablation(config_paths, args.out)
        print(f"wrote {args.out}")
        return 0

    if args.command == "infer":
        from . import pngio
        from .service import inpaint
        from .trainer import load_bundle
        bundle = load_bundle(args.checkpoint)
        x = pngio.load_image(args.image)
        mask = pngio.load_mask(args.mask) if args.mask else None
        sem = (pngio.indices_to_onehot(pngio.load_semantics(args.semantics))
               if args.semantics else None)
        result = inpaint(bundle, x, mask=mask, semantics=sem)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        pngio.save_image(out / "masked.png", result.x_masked)
        pngio.save_image(out / "coarse.png", result.x_coarse)
        pngio.save_image(out / "refined.png", result.x_refined)
        pngio.save_semantics(out / "semantics.png", pngio.onehot_to_indices(result.semantics))
        pngio.save_mask(out / "mask.png", result.mask)
        print(f"style digest: {result.style_digest}")
        print(f"wrote results to {out}")
        return 0

    if args.command == "serve":
        from .service import serve
        serve(args.checkpoint, port=args.port, host=args.host,
              detector_path=args.detector, segmenter_path=args.segmenter)
        return 0

    p.error(f"unknown command {args.command}")
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
