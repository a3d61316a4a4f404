"""Command-line entry point: generate, train, eval, render, ablate."""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np


def _build_parser():
    p = argparse.ArgumentParser(prog="affinegs", description="Affine-velocity Gaussian dynamics toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scene")
    g.add_argument("--preset", required=True, help="spin, drift, multipart, breathe or hybrid")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a scene")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--phase", choices=["interp", "extrap", "both"], default="both")
    e.add_argument("--csv", required=True)

    r = sub.add_parser("render", help="render predicted state at time t to a PPM")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--t", type=float, required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--size", type=int, default=64)

    a = sub.add_parser("ablate", help="train and evaluate the five ablation variants")
    a.add_argument("--scene", required=True)
    a.add_argument("--out", default="ablation.csv")
    a.add_argument("--config", help="base config (defaults otherwise)")
    a.add_argument("--iterations", type=int)
    return p


def _run(args):
    import importlib

    from . import scenes
    tr = importlib.import_module(".train", __package__)
    from .render import render, write_ppm

    if args.command == "generate":
        scene = scenes.generate(scenes.preset(args.preset), seed=args.seed)
        scenes.save_scene(scene, args.out)
        print(f"wrote {args.out} ({len(scene.cloud)} particles, {len(scene.data.times)} frames)")
    elif args.command == "train":
        cfg = tr.TrainConfig.load(args.config)
        res = tr.train(cfg)
        last = res.history[-1][1] if res.history else None
        msg = f"trained {cfg.iterations} iterations in {res.seconds:.1f}s"
        if last is not None:
            msg += f", final loss {last.total:.3e}"
        print(msg + f"; checkpoint {cfg.checkpoint}")
    elif args.command == "eval":
        model, _, _, _ = tr.load_checkpoint(args.checkpoint)
        scene = scenes.load_scene(args.scene)
        phases = ["interp", "extrap"] if args.phase == "both" else [args.phase]
        rows = [tr.evaluate(model, scene, ph) for ph in phases]
        tr.write_metrics_csv(args.csv, rows)
        for row in rows:
            print(f"{row.phase}: pos_err {row.pos_err:.4g} psnr {row.psnr:.2f} ssim {row.ssim:.4f}")
    elif args.command == "render":
        model, _, _, _ = tr.load_checkpoint(args.checkpoint)
        scene = scenes.load_scene(args.scene)
        x, q, s = model.predict_states(scene.cloud, np.array([args.t]))
        cam = tr.default_camera(scene, args.size)
        write_ppm(args.out, render(x[0], q[0], s[0], scene.cloud.alpha, scene.cloud.color, cam))
        print(f"wrote {args.out}")
    elif args.command == "ablate":
        scene = scenes.load_scene(args.scene)
        base = tr.TrainConfig.load(args.config) if args.config else tr.TrainConfig()
        if args.iterations is not None:
            base.iterations = args.iterations
        rows = tr.run_ablation(scene, base, out_csv=args.out)
        for row in rows:
            print(f"{row['variant']:>8}: interp {row['interp_pos_err']:.4g} extrap {row['extrap_pos_err']:.4g}")
    return 0


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _run(args)
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failures become exit 1 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
