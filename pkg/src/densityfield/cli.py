"""Command-line operator surface: generate scenes, train, render, evaluate.

Every command is a pure function of its flags, input files and seed;
outputs are byte-identical across reruns except for timestamps inside the
run manifest. Exit codes: 0 success, 2 bad usage, 3 input error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


def _set_threads(n: int | None) -> None:
    if n is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _write_manifest(out_dir: str, command: str, args: dict, artifacts: dict,
                    seed, timings: dict) -> None:
    from . import __version__
    doc = {
        "command": command,
        "config": args,
        "seed": seed,
        "artifacts": artifacts,
        "tool_version": __version__,
        "timings": timings,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _load_scene_or_die(path):
    from .synthworld import load_scene
    if not os.path.exists(path):
        print(f"error: scene file not found: {path}", file=sys.stderr)
        sys.exit(EXIT_INPUT)
    try:
        return load_scene(path)
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: bad scene file {path}: {e}", file=sys.stderr)
        sys.exit(EXIT_INPUT)


def _load_checkpoint_or_die(path):
    from .trainer import load_checkpoint
    if not os.path.exists(path):
        print(f"error: checkpoint not found: {path}", file=sys.stderr)
        sys.exit(EXIT_INPUT)
    try:
        return load_checkpoint(path)
    except ValueError as e:
        print(f"error: bad checkpoint {path}: {e}", file=sys.stderr)
        sys.exit(EXIT_INPUT)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_scene(args) -> int:
    from .synthworld import PROFILES, make_benchmark_scene, save_scene
    try:
        scene, rig, traj = make_benchmark_scene(args.seed, args.profile,
                                                args.width, args.height)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    save_scene(args.out, scene, rig, traj, args.seed, args.profile)
    print(f"wrote {args.out} (profile={args.profile}, seed={args.seed})")
    return EXIT_OK


def cmd_train(args) -> int:
    import numpy as np
    from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train

    t_start = time.time()
    if args.config:
        try:
            with open(args.config) as f:
                config = TrainConfig.from_json(json.load(f))
        except (OSError, TypeError, ValueError) as e:
            print(f"error: bad config {args.config}: {e}", file=sys.stderr)
            return EXIT_INPUT
    else:
        config = TrainConfig()
    if args.steps is not None:
        config.total_steps = args.steps
    if args.seed is not None:
        config.seed = args.seed

    pool = []
    for path in args.scene:
        scene, rig, _, _ = _load_scene_or_die(path)
        pool.append((scene, rig))
    os.makedirs(args.out, exist_ok=True)

    model = state = None
    start_step = 0
    if args.resume:
        model, state, start_step, cfg_json = _load_checkpoint_or_die(args.resume)
        if cfg_json:
            config = TrainConfig.from_json(cfg_json)
            if args.steps is not None:
                config.total_steps = args.steps

    log_path = os.path.join(args.out, "metrics.jsonl")
    try:
        model, state, history = train(pool, config, log_path=log_path,
                                       model=model, state=state,
                                       start_step=start_step)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    skipped = sum(1 for h in history if h.get("skipped"))
    if history and not np.isfinite(history[-1]["loss"]):
        print("error: training diverged (non-finite loss)", file=sys.stderr)
        return EXIT_NUMERIC

    ckpt = os.path.join(args.out, "checkpoint.btsf")
    save_checkpoint(model, state, ckpt, step=config.total_steps, config=config)
    _write_manifest(args.out, "train", config.to_json(),
                    {"checkpoint": ckpt, "metrics": log_path}, config.seed,
                    {"wall_s": round(time.time() - t_start, 3)})
    print(f"trained {config.total_steps - start_step} steps "
          f"({skipped} skipped); checkpoint at {ckpt}")
    return EXIT_OK


def cmd_render(args) -> int:
    import numpy as np
    from .evaluation import export_density_slice
    from .geometry import Camera
    from .imgio import write_pfm, write_png
    from .renderer import render_depth_map, render_novel_view
    from .synthworld import render_gt

    t_start = time.time()
    model, _, _, _ = _load_checkpoint_or_die(args.checkpoint)
    scene, rig, _, _ = _load_scene_or_die(args.scene)
    res = (model.spec.height, model.spec.width)
    color, _ = render_gt(scene, rig.input, res)
    model.set_input(color, rig.input)

    if args.camera:
        try:
            with open(args.camera) as f:
                target = Camera.from_json(json.load(f))
        except (OSError, ValueError, KeyError) as e:
            print(f"error: bad camera file {args.camera}: {e}", file=sys.stderr)
            return EXIT_INPUT
    else:
        target = rig.input

    os.makedirs(args.out, exist_ok=True)
    artifacts = {}
    depth = render_depth_map(model, target, res, args.samples)
    if not np.isfinite(depth.array).all():
        print("error: non-finite depth render", file=sys.stderr)
        return EXIT_NUMERIC
    path = os.path.join(args.out, "depth.pfm")
    write_pfm(path, depth)
    artifacts["depth"] = path

    view, _mask = render_novel_view(model, (color, rig.input), target, res,
                                    args.samples)
    path = os.path.join(args.out, "view.png")
    write_png(path, view)
    artifacts["view"] = path

    sl = export_density_slice(model)
    path = os.path.join(args.out, "slice.pfm")
    write_pfm(path, sl)
    artifacts["slice"] = path
    png = 1.0 - np.exp(-sl.array)  # tone-map densities for viewing
    path = os.path.join(args.out, "slice.png")
    write_png(path, png)
    artifacts["slice_png"] = path

    _write_manifest(args.out, "render",
                    {"checkpoint": args.checkpoint, "scene": args.scene,
                     "samples": args.samples},
                    artifacts, args.seed,
                    {"wall_s": round(time.time() - t_start, 3)})
    print(f"rendered to {args.out}")
    return EXIT_OK


def _prepare_eval(args):
    scene, rig, traj, meta = _load_scene_or_die(args.scene)
    model, _, _, _ = _load_checkpoint_or_die(args.checkpoint)
    from .synthworld import render_gt
    res = (model.spec.height, model.spec.width)
    color, gt_depth = render_gt(scene, rig.input, res)
    model.set_input(color, rig.input)
    return scene, rig, traj, meta, model, color, gt_depth, res


def cmd_eval_depth(args) -> int:
    from .evaluation import depth_metrics, write_report
    from .renderer import render_depth_map
    scene, rig, _, meta, model, _, gt_depth, res = _prepare_eval(args)
    pred = render_depth_map(model, rig.input, res, args.samples)
    try:
        metrics = depth_metrics(pred, gt_depth, max_depth=args.max_depth)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    write_report(args.out, metrics, {"samples": args.samples,
                                     "max_depth": args.max_depth},
                 meta["seed"])
    print(json.dumps(metrics))
    return EXIT_OK


def cmd_eval_occ(args) -> int:
    from .evaluation import (OracleLabels, build_carved, model_predictor,
                             occupancy_metrics, write_report)
    from .synthworld import simulate_scan
    scene, rig, traj, meta, model, _, _, _ = _prepare_eval(args)
    if args.labels == "oracle":
        labels = OracleLabels(scene, rig.input.center)
    else:
        scans = [(pose, simulate_scan(scene, pose, args.scan_rays, (0.0, 1.0)))
                 for pose in traj]
        labels = build_carved(scans, 0.0, 1.0)
    report = occupancy_metrics(model_predictor(model), labels, rig.input)
    write_report(args.out, report.to_json(),
                 {"labels": args.labels, "scan_rays": args.scan_rays},
                 meta["seed"])
    print(json.dumps(report.to_json()))
    return EXIT_OK


def cmd_eval_nvs(args) -> int:
    from .evaluation import psnr, ssim_global, write_report
    from .renderer import render_novel_view
    from .synthworld import render_gt
    scene, rig, _, meta, model, color, _, res = _prepare_eval(args)
    results = {}
    for name, cam in rig.frames():
        gt_color, _ = render_gt(scene, cam, res)
        view, mask = render_novel_view(model, (color, rig.input), cam, res,
                                       args.samples)
        results[name] = {"psnr": round(psnr(view, gt_color), 3),
                         "ssim": round(ssim_global(view, gt_color), 4),
                         "valid_frac": round(float(mask.mean()), 4)}
    write_report(args.out, results, {"samples": args.samples}, meta["seed"])
    print(json.dumps(results))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="densityfield",
        description="Single-image density fields: synthetic scenes, "
                    "self-supervised training, rendering and evaluation.")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/OpenMP thread count (default: machine)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a benchmark scene JSON")
    g.add_argument("--profile", required=True,
                   help="scene profile: two_object_occlusion, street, random, plane")
    g.add_argument("--seed", type=int, default=0, help="scene RNG seed")
    g.add_argument("--width", type=int, default=64, help="camera width (pixels)")
    g.add_argument("--height", type=int, default=48, help="camera height (pixels)")
    g.add_argument("--out", required=True, help="output scene JSON path")
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train a density field on scene(s)")
    t.add_argument("--config", help="TrainConfig JSON path (defaults apply)")
    t.add_argument("--scene", action="append", required=True,
                   help="scene JSON (repeatable for a pool)")
    t.add_argument("--out", required=True, help="run directory")
    t.add_argument("--steps", type=int, default=None,
                   help="override total_steps")
    t.add_argument("--seed", type=int, default=None, help="override seed")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render depth/view/slice from a checkpoint")
    r.add_argument("--checkpoint", required=True, help="checkpoint path")
    r.add_argument("--scene", required=True, help="scene JSON (input frame source)")
    r.add_argument("--camera", help="target camera JSON (default: input camera)")
    r.add_argument("--samples", type=int, default=32, help="samples per ray")
    r.add_argument("--seed", type=int, default=0, help="seed echoed to manifest")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_render)

    for name, fn, extra in [
            ("eval-depth", cmd_eval_depth, "depth metrics vs analytic ground truth"),
            ("eval-occ", cmd_eval_occ, "occupancy metrics (O_acc, IE_acc, IE_rec)"),
            ("eval-nvs", cmd_eval_nvs, "novel-view PSNR/SSIM per rig camera")]:
        e = sub.add_parser(name, help=extra)
        e.add_argument("--checkpoint", required=True, help="checkpoint path")
        e.add_argument("--scene", required=True, help="scene JSON path")
        e.add_argument("--out", required=True, help="report JSON path")
        e.add_argument("--samples", type=int, default=32, help="samples per ray")
        if name == "eval-depth":
            e.add_argument("--max-depth", type=float, default=80.0,
                           help="ground-truth cutoff (meters)")
        if name == "eval-occ":
            e.add_argument("--labels", choices=("oracle", "carved"),
                           default="oracle", help="label source")
            e.add_argument("--scan-rays", type=int, default=5760,
                           help="rays per simulated scan (carved labels)")
        e.set_defaults(func=fn)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    try:
        return args.func(args)
    except BrokenPipeError:
        return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
