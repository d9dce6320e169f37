"""Command-line interface.

Subcommands: fit, render, eval, gradcheck, params, make-synthetic.
Exit codes: 0 success, 1 runtime failure, 2 usage error.  Runs with the same
arguments and seed produce byte-identical artifacts (the training log's
wall_ms field is the one timing exception).
"""

import argparse
import json
import sys

import numpy as np

from . import gradcheck, metrics, sceneio, synthetic, training
from .appearance import param_count
from .datasets import canonical_json, load_dataset, write_image
from .geometry import Camera
from .renderer import RenderConfig, render

VARIANT_CHOICES = ("constant", "bilinear", "mk", "mk-sigmoid", "mk8", "mlp")


def _resolve_variant(name, k_override=None):
    """CLI variant name -> (scene variant, kernel count)."""
    if name == "mk8":
        return "mk", 8
    k = k_override if k_override is not None else 4
    return name, k


def _cmd_fit(args):
    dataset = load_dataset(args.data)
    overrides = {}
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
    variant, k = _resolve_variant(args.variant)
    overrides.update(variant=variant, kernel_count=k, iterations=args.iters,
                     seed=args.seed)
    if args.max_gaussians is not None:
        overrides["max_gaussians"] = args.max_gaussians
    config = training.TrainConfig(**overrides)
    scene, records = training.fit(dataset, config)
    sceneio.save_scene(scene, args.out)
    log_path = args.log or (args.out + ".log.jsonl")
    with open(log_path, "w") as fh:
        for rec in records:
            fh.write(canonical_json(rec).rstrip("\n") + "\n")
    final = records[-1]
    print(f"fit: {scene.n} gaussians, final psnr {final['psnr']:.3f} dB, "
          f"scene -> {args.out}, log -> {log_path}")
    return 0


def _camera_from_pose_file(path):
    with open(path) as fh:
        spec = json.load(fh)
    return Camera.from_matrix(int(spec["w"]), int(spec["h"]),
                              float(spec["fl_x"]), float(spec["fl_y"]),
                              float(spec["cx"]), float(spec["cy"]),
                              np.asarray(spec["transform"], dtype=np.float64))


def _cmd_render(args):
    scene = sceneio.load_scene(args.scene)
    background = np.zeros(3)
    if args.pose:
        camera = _camera_from_pose_file(args.pose)
    else:
        if args.data is None:
            raise ValueError("render needs --pose FILE or --data MANIFEST with --camera IDX")
        dataset = load_dataset(args.data)
        if not 0 <= args.camera < len(dataset):
            raise ValueError(f"camera index {args.camera} out of range "
                             f"(dataset has {len(dataset)} views)")
        camera = dataset.cameras[args.camera]
        background = dataset.background
    out = render(scene, camera, RenderConfig(background=background))
    write_image(args.out, out.color)
    print(f"render: wrote {args.out}")
    return 0


def _cmd_eval(args):
    scene = sceneio.load_scene(args.scene)
    dataset = load_dataset(args.data)
    rcfg = RenderConfig(background=dataset.background)
    per_view = []
    for cam, img, name in zip(dataset.cameras, dataset.images, dataset.files):
        color = render(scene, cam, rcfg).color
        per_view.append({"file": name,
                         "psnr": metrics.psnr(color, img),
                         "ssim": metrics.ssim(color, img)})
    report = {
        "scene": args.scene,
        "gaussian_count": scene.n,
        "per_view": per_view,
        "mean_psnr": float(np.mean([v["psnr"] for v in per_view])),
        "mean_ssim": float(np.mean([v["ssim"] for v in per_view])),
    }
    text = canonical_json(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    print(f"eval: mean psnr {report['mean_psnr']:.4f} dB, "
          f"mean ssim {report['mean_ssim']:.5f}"
          + (f", report -> {args.out}" if args.out else ""))
    return 0


def _cmd_gradcheck(args):
    reports = gradcheck.run_suites(variant=args.variant, seed=args.seed,
                                   cases=args.cases,
                                   full_renderer=args.full_renderer)
    ok = all(r["passed"] for r in reports)
    if args.json:
        print(canonical_json({"passed": bool(ok), "suites": reports}), end="")
    else:
        for r in reports:
            status = "ok" if r["passed"] else "FAIL"
            print(f"{status:4s} {r['suite']:22s} cases={r['cases']:<5d} "
                  f"worst={r['worst_rel_err']:.3e} tol={r['tol']:g}")
    return 0 if ok else 1


def _cmd_params(args):
    variant, k = _resolve_variant(args.variant, args.k)
    count = param_count(variant, k=k, hidden=args.hidden)
    base = param_count("constant")
    ratio = count / base
    if args.json:
        print(canonical_json({"variant": args.variant, "params": count,
                              "base_params": base, "ratio": ratio}), end="")
    else:
        print(f"{args.variant}: {count} parameters per gaussian "
              f"({ratio:.2f}x the constant baseline's {base})")
    return 0


def _cmd_make_synthetic(args):
    manifest = synthetic.make_synthetic(args.kind, args.out, seed=args.seed,
                                        size=args.size, views=args.views)
    print(f"make-synthetic: wrote {manifest}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="supersplat",
                                     description="Spatially varying Gaussian "
                                                 "surfel splatting workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="optimize a scene against a dataset")
    p.add_argument("--data", required=True, help="dataset manifest path")
    p.add_argument("--variant", required=True, choices=VARIANT_CHOICES)
    p.add_argument("--max-gaussians", type=int, default=None)
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output scene file (.sgs)")
    p.add_argument("--log", default=None, help="metrics log path (JSONL)")
    p.add_argument("--config", default=None, help="JSON TrainConfig overrides")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("render", help="render a saved scene")
    p.add_argument("--scene", required=True)
    p.add_argument("--camera", type=int, default=0, help="view index in --data")
    p.add_argument("--data", default=None)
    p.add_argument("--pose", default=None, help="JSON camera pose file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of a scene against a dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="JSON report path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--variant", default=None,
                   choices=VARIANT_CHOICES, help="default: all variants")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=int, default=200)
    p.add_argument("--full-renderer", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("params", help="per-gaussian parameter accounting")
    p.add_argument("--variant", required=True, choices=VARIANT_CHOICES)
    p.add_argument("--k", type=int, default=None, help="kernel count override")
    p.add_argument("--hidden", type=int, default=4)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("make-synthetic", help="generate a synthetic dataset")
    p.add_argument("--kind", required=True, choices=synthetic.KINDS)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--views", type=int, default=None)
    p.set_defaults(func=_cmd_make_synthetic)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else 2
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
