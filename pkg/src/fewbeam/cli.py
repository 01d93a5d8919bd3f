"""Command-line entry point: ``fewbeam <command> ...``.

Exit status is 0 on success, 2 on usage errors and 1 on runtime failures.
Every command is deterministic given ``--seed`` (default from the
``FEWBEAM_SEED`` environment variable, else 0).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .eval import average_reports, cdr_report, eigen_metrics, rescale_to_gt
from .geometry import project_pointcloud_to_image
from .lidar import default_extrinsics, segment_beams, subsample_beams
from .optimizer import OptimizationDiverged, OptimizeConfig, optimize_depth
from .pose import PnPError, attach_depth, detect_and_match, pnp_ransac
from .synthetic import make_triplet

logger = logging.getLogger("fewbeam")

SEED_ENV = "FEWBEAM_SEED"
SUPERVISION_CHOICES = {"photometric-only": "photometric", "photometric": "photometric", "naive": "naive", "masked": "masked", "hinted": "hinted"}


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV, "0")
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"fewbeam: error: {SEED_ENV} must be an integer, got {raw!r}") from None


def _taus(text: str) -> list:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid threshold list {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("threshold list is empty")
    return vals


def _sigmas(text: str) -> tuple:
    try:
        vals = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid sigma list {text!r}") from None
    if any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("blur sigmas must be positive")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


# ---------------------------------------------------------------------------
# commands


def cmd_sparsify(args) -> int:
    cloud = io.read_velodyne_bin(args.input)
    seg = segment_beams(cloud)
    kept = subsample_beams(seg, args.keep_every)
    io.ensure_parent(args.output)
    io.write_velodyne_bin(args.output, kept)
    logger.info("kept %d of %d points (%d rings in input)", len(kept), len(cloud), seg.num_rings)
    return 0


def cmd_project(args) -> int:
    cloud = io.read_velodyne_bin(args.cloud)
    K = io.read_intrinsics(args.intrinsics)
    extrinsics = io.read_poses(args.extrinsics)[0] if args.extrinsics else default_extrinsics()
    depth = project_pointcloud_to_image(cloud, extrinsics, K)
    io.ensure_parent(args.output)
    io.write_depth_png16(args.output, depth)
    return 0


def cmd_synth(args) -> int:
    cfg = io.read_scene_config(args.scene)
    triplet = make_triplet(cfg.scene, cfg.K, cfg.ego, cfg.lidar, seed=args.seed)
    io.write_triplet(args.output, triplet)
    return 0


def _optimize_config(args) -> OptimizeConfig:
    values = io.read_run_config(args.config) if args.config else {}
    overrides = {
        "supervision": SUPERVISION_CHOICES[args.supervision] if args.supervision else None,
        "pose_source": args.pose_source,
        "multiscale_levels": args.multiscale,
        "steps": args.steps,
        "learning_rate": args.lr,
        "pose_scale_divisor": args.pose_scale_divisor,
        "learn_translation_scale": True if args.learn_translation_scale else None,
        "dilate_kernel": args.dilate_kernel,
        "dilate_iterations": args.dilate_iterations,
        "blur_sigmas": args.blur_sigmas,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    values.setdefault("seed", args.seed)
    return OptimizeConfig(**values)


def cmd_optimize(args) -> int:
    config = _optimize_config(args)
    trip = io.read_triplet(args.triplet)
    if len(trip.sources) == 0:
        raise ValueError(f"{args.triplet}: no source frames")
    if config.pose_source == "given" and len(trip.poses) != len(trip.sources):
        raise ValueError(f"{args.triplet}: need one pose per source frame")
    result = optimize_depth(trip.target, trip.sources, trip.lidar, trip.poses, config, trip.K)
    io.ensure_parent(args.output)
    io.write_depth_png16(args.output, result.depth)
    if args.trace:
        io.ensure_parent(args.trace)
        result.trace.write_csv(args.trace)
    if args.poses_out:
        io.write_poses(args.poses_out, [p.with_translation(p.r * result.depth_multiplier) for p in result.poses])
    return 0


def cmd_pnp(args) -> int:
    K = io.read_intrinsics(args.intrinsics)
    I_t = io.read_rgb_png(args.target)
    I_s = io.read_rgb_png(args.source)
    H_t = io.read_depth_png16(args.sparse_depth)
    if args.correspondences_in:
        corr = io.read_correspondences_csv(args.correspondences_in)
    else:
        corr = attach_depth(detect_and_match(I_t, I_s, mask=H_t > 0), H_t)
    if args.correspondences_out:
        io.write_correspondences_csv(args.correspondences_out, corr)
    res = pnp_ransac(corr, K, iterations=args.iterations, reproj_threshold=args.threshold, seed=args.seed)
    io.ensure_parent(args.output)
    io.write_poses(args.output, [res.pose])
    logger.info("%d/%d inliers, mean error %.3f px", res.num_inliers, len(corr), res.mean_error)
    return 0


def _pairs(pred, gt) -> list:
    pred, gt = Path(pred), Path(gt)
    if pred.is_file() and gt.is_file():
        return [(pred, gt)]
    if not (pred.is_dir() and gt.is_dir()):
        raise ValueError("prediction and ground truth must both be files or both be directories")
    gt_names = {p.name for p in io.list_pngs(gt)}
    pairs = [(p, gt / p.name) for p in io.list_pngs(pred) if p.name in gt_names]
    if not pairs:
        raise ValueError(f"no PNG file names shared by {pred} and {gt}")
    return pairs


def cmd_eval(args) -> int:
    reports = []
    for p, g in _pairs(args.pred, args.gt):
        D = io.read_depth_png16(p)
        G = io.read_depth_png16(g)
        if args.rescale != "none":
            D = rescale_to_gt(D, G, args.rescale, args.cap)
        reports.append(eigen_metrics(D, G, args.cap))
    text = average_reports(reports).to_json() + "\n"
    if args.output:
        io.ensure_parent(args.output)
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_cdr(args) -> int:
    frames = []
    for p, g in _pairs(args.pred, args.gt):
        mask_path = Path(args.masks) / p.name if Path(args.masks).is_dir() else Path(args.masks)
        if not mask_path.exists():
            raise FileNotFoundError(f"missing instance map {mask_path}")
        frames.append((io.read_depth_png16(p), io.read_depth_png16(g), io.read_instance_png(mask_path)))
    report = cdr_report(frames, args.taus)
    text = report.to_json() + "\n"
    if args.output:
        io.ensure_parent(args.output)
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    if args.curve_csv:
        report.write_curve_csv(args.curve_csv)
    if args.instances_csv:
        report.write_instances_csv(args.instances_csv)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fewbeam", description="Few-beam LiDAR self-supervised depth tools.")
    parser.add_argument("--seed", type=int, default=None, help=f"random seed (default: ${SEED_ENV} or 0)")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("sparsify", help="keep every k-th LiDAR ring of a Velodyne .bin scan")
    p.add_argument("input", help="input .bin (float32 x y z intensity)")
    p.add_argument("output", help="output .bin")
    p.add_argument("--keep-every", type=_positive_int, default=16, help="ring stride (default 16: 64 rings to 4)")
    p.set_defaults(func=cmd_sparsify)

    p = sub.add_parser("project", help="project a point cloud into a sparse depth PNG")
    p.add_argument("cloud", help="input .bin")
    p.add_argument("--intrinsics", required=True, help="text file 'fx fy cx cy width height'")
    p.add_argument("--extrinsics", help="LiDAR-to-camera pose text (3x4 row-major); default KITTI-like mount")
    p.add_argument("-o", "--output", required=True, help="output 16-bit depth PNG")
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("synth", help="render a synthetic frame triplet from a scene config")
    p.add_argument("scene", help="scene config (key = value lines and 'box' stanzas)")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("optimize", help="fit a depth map to a triplet directory")
    p.add_argument("triplet", help="triplet directory (as written by 'synth')")
    p.add_argument("--config", help="run config with OptimizeConfig keys")
    p.add_argument("--supervision", choices=sorted(SUPERVISION_CHOICES), help="loss variant (default masked)")
    p.add_argument("--pose-source", choices=("given", "pnp"), help="poses from poses.txt or PnP on LiDAR pixels")
    p.add_argument("--multiscale", type=int, choices=(1, 2, 3, 4), help="number of pyramid levels")
    p.add_argument("--steps", type=int, help="optimisation steps")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--pose-scale-divisor", type=float, help="divide pose translations by this factor")
    p.add_argument("--learn-translation-scale", action="store_true", help="optimise a shared translation scale")
    p.add_argument("--dilate-kernel", type=int, help="LiDAR target dilation kernel side")
    p.add_argument("--dilate-iterations", type=int, help="LiDAR target dilation iterations")
    p.add_argument("--blur-sigmas", type=_sigmas, help="coarse-to-fine image blur schedule, e.g. 4,2,1 (px)")
    p.add_argument("-o", "--output", required=True, help="output 16-bit depth PNG")
    p.add_argument("--trace", help="loss trace CSV")
    p.add_argument("--poses-out", help="write the poses used (after any learned scaling)")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("pnp", help="metric relative pose from an image pair and sparse depth")
    p.add_argument("target", help="target RGB PNG")
    p.add_argument("source", help="source RGB PNG")
    p.add_argument("sparse_depth", help="target sparse depth PNG")
    p.add_argument("--intrinsics", required=True, help="text file 'fx fy cx cy width height'")
    p.add_argument("--iterations", type=_positive_int, default=100, help="RANSAC iterations")
    p.add_argument("--threshold", type=float, default=2.0, help="inlier reprojection threshold in pixels")
    p.add_argument("--correspondences-in", help="use these correspondences (CSV) instead of matching")
    p.add_argument("--correspondences-out", help="write correspondences CSV")
    p.add_argument("-o", "--output", required=True, help="output pose text")
    p.set_defaults(func=cmd_pnp)

    p = sub.add_parser("eval", help="Eigen depth metrics")
    p.add_argument("pred", help="predicted depth PNG or directory")
    p.add_argument("gt", help="ground-truth depth PNG or directory")
    p.add_argument("--rescale", choices=("none", "median", "mean"), default="none", help="scale predictions to the GT median or mean first")
    p.add_argument("--cap", type=float, default=80.0, help="maximum evaluated GT depth (m)")
    p.add_argument("-o", "--output", help="report JSON (default stdout)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cdr", help="catastrophic distance rate over filtered instances")
    p.add_argument("pred", help="predicted depth PNG or directory")
    p.add_argument("gt", help="ground-truth depth PNG or directory")
    p.add_argument("masks", help="instance id PNG or directory (same file names)")
    p.add_argument("--taus", type=_taus, default=[0.1, 0.25, 0.5, 1.0], help="comma-separated thresholds")
    p.add_argument("-o", "--output", help="report JSON (default stdout)")
    p.add_argument("--curve-csv", help="two-column CSV (tau, cdr)")
    p.add_argument("--instances-csv", help="per-instance signed errors CSV")
    p.set_defaults(func=cmd_cdr)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.seed is None:
        try:
            args.seed = _default_seed()
        except SystemExit as exc:
            print(exc, file=sys.stderr)
            return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return int(args.func(args))
    except (ValueError, OSError, PnPError, OptimizationDiverged, FloatingPointError) as exc:
        print(f"fewbeam: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
