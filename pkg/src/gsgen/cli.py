"""Command-line entry point: ``gsgen {init,train,render,export,check-grad,fit}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import io
from .gaussians import (
    InitConfig, blob_scene, farthest_point_sample, fit_normalization, init_from_points, sample_cloud_points,
    sample_mesh_surface,
)


def _init_cloud(args):
    icfg = InitConfig(fixed_scale=args.fixed_scale, color_seed=args.seed, n_points=args.samples)
    colors = None
    if args.synthetic:
        if args.synthetic != "blobs":
            raise SystemExit(f"unknown synthetic scene {args.synthetic!r}")
        pts = sample_cloud_points(blob_scene(seed=args.seed), args.samples, seed=args.seed)
    elif args.mesh:
        verts, faces = io.read_obj(args.mesh)
        pts = sample_mesh_surface(verts, faces, args.samples, seed=args.seed)
    elif args.points:
        pts, colors = io.read_points(args.points)
    else:
        raise SystemExit("init needs --points, --mesh or --synthetic")
    if args.synthetic is None:
        pts = fit_normalization(pts).apply(pts)
    if args.n and args.n < len(pts):
        idx = farthest_point_sample(pts, args.n)
        pts = pts[idx]
        colors = None if colors is None else colors[idx]
    mode = "given" if (args.colors == "given" and colors is not None) else "random"
    return init_from_points(pts, mode, icfg, seed=args.seed, colors=colors)


def cmd_init(args):
    cloud = _init_cloud(args)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_gaussians(args.out, cloud, binary=not args.ascii)
    print(f"wrote {len(cloud)} Gaussians to {args.out}")


def cmd_train(args):
    from .pipeline import train

    cfg = cfgmod.load(args.config, args.set)
    cloud = None
    if args.resume is None and args.refine_from is None:
        if args.init is None:
            raise SystemExit("train needs --init, --resume or --refine-from")
        cloud = io.read_gaussians(args.init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfgmod.dumps(cfg))
    result = train(cfg, cloud, out_dir=out, resume=args.resume, refine_from=args.refine_from,
                   stop_after=args.stop_after)
    io.write_gaussians(out / "final.ply", result.cloud)
    last = result.records[-1] if result.records else {}
    print(json.dumps({"iteration": result.state.iteration, "N": len(result.cloud), **last}, sort_keys=True))


def _load_state(path):
    from .pipeline import TrainState

    return TrainState.load(path)


def cmd_render(args):
    from .pipeline import render_turntable

    state = _load_state(args.checkpoint)
    render_turntable(state.cloud, state.background, args.frames, out_dir=args.out, size=args.size,
                     radius=args.radius, elevation=args.elevation, fov_y=args.fov)
    print(f"wrote {args.frames} frames to {args.out}")


def cmd_export(args):
    state = _load_state(args.checkpoint)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    io.write_gaussians(args.out, state.cloud, binary=not args.ascii)
    print(f"wrote {len(state.cloud)} Gaussians to {args.out}")


def cmd_check_grad(args):
    from .grad import finite_difference_check, l2_image_loss
    from .scenes import random_scene

    ok = True
    for k in range(args.scenes):
        cloud, cam, bg = random_scene(args.seed + k, n_max=args.n, size=args.size)
        rng = np.random.default_rng(args.seed + k)
        target = rng.uniform(0, 1, size=(cam.height, cam.width, 3))
        report, _ = finite_difference_check(cloud, cam, bg, l2_image_loss(target), step=args.step,
                                            precision=args.precision, tolerance=args.tolerance)
        print(f"scene {args.seed + k}: N={len(cloud)} {cam.width}x{cam.height}")
        print(report.format())
        ok &= report.ok
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_fit(args):
    from .adaptive import DensifyConfig
    from .pipeline import FitConfig, orbit_views, reconstruction_fit
    from .rasterizer import BackgroundModel

    target = blob_scene(seed=args.seed)
    bg = BackgroundModel.constant((1.0, 1.0, 1.0))
    views = orbit_views(target, bg, args.views, args.size)
    held = orbit_views(target, bg, 4, args.size, elevations=(10.0,), offset_deg=180.0 / args.views)
    pts = sample_cloud_points(target, 8 * args.n_init, seed=args.seed + 1)
    cloud = init_from_points(pts[farthest_point_sample(pts, args.n_init)], "random",
                             InitConfig(fixed_scale=args.fixed_scale), seed=args.seed)
    densify = None if args.no_densify else DensifyConfig(t_pos=args.t_pos, densify_until=args.densify_until)
    res = reconstruction_fit(cloud, views, FitConfig(iterations=args.iterations, densify=densify,
                                                     eval_every=args.eval_every, seed=args.seed), bg, held)
    for it, score in res.curve:
        print(f"iter {it:5d}  held-out PSNR {score:6.2f} dB")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_gaussians(out / "fit.ply", res.cloud)
        (out / "psnr.json").write_text(json.dumps(res.curve))
        (out / "events.jsonl").write_text("".join(e.to_json() + "\n" for e in res.events))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gsgen")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("init", help="initial Gaussian cloud from a PLY, OBJ or synthetic scene")
    src = s.add_mutually_exclusive_group()
    src.add_argument("--points")
    src.add_argument("--mesh")
    src.add_argument("--synthetic", choices=["blobs"])
    s.add_argument("--n", type=int, default=4096, help="farthest-point-sample down to this many")
    s.add_argument("--samples", type=int, default=16384, help="surface / density samples before FPS")
    s.add_argument("--fixed-scale", type=float, default=0.02)
    s.add_argument("--colors", choices=["random", "given"], default="random")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ascii", action="store_true")
    s.add_argument("out")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", help="two-stage optimization")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--init", help="Gaussian PLY written by 'init'")
    s.add_argument("--resume", help="checkpoint of an interrupted run with the same config")
    s.add_argument("--refine-from", help="checkpoint of a finished geometry run")
    s.add_argument("--stop-after", type=int)
    s.add_argument("--out", default="runs/train")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="turntable PNGs from a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--frames", type=int, default=36)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--radius", type=float, default=3.3)
    s.add_argument("--elevation", type=float, default=15.0)
    s.add_argument("--fov", type=float, default=50.0)
    s.add_argument("--out", default="turntable")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("export", help="checkpoint to Gaussian PLY")
    s.add_argument("checkpoint")
    s.add_argument("out")
    s.add_argument("--ascii", action="store_true")
    s.set_defaults(func=cmd_export)

    s = sub.add_parser("check-grad", help="finite-difference check on random scenes")
    s.add_argument("--scenes", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--size", type=int, default=24)
    s.add_argument("--step", type=float, default=1e-6)
    s.add_argument("--precision", choices=["single", "double"], default="double")
    s.add_argument("--tolerance", type=float, default=1e-3)
    s.set_defaults(func=cmd_check_grad)

    s = sub.add_parser("fit", help="direct multi-view reconstruction of the blob scene")
    s.add_argument("--iterations", type=int, default=2000)
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--size", type=int, default=128)
    s.add_argument("--n-init", type=int, default=512)
    s.add_argument("--fixed-scale", type=float, default=0.05)
    s.add_argument("--t-pos", type=float, default=2e-4)
    s.add_argument("--densify-until", type=int, default=1500)
    s.add_argument("--no-densify", action="store_true")
    s.add_argument("--eval-every", type=int, default=250)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_fit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    rc = args.func(args)
    return int(rc or 0)


if __name__ == "__main__":
    sys.exit(main())
