"""Command-line entry point: generate, run, fuse-gt, evaluate, report."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .keyvalue import ConfigError, read_keyvalue

log = logging.getLogger("dsobench")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dsobench", description="Direct sparse odometry mapping benchmark on synthetic flights.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="render a synthetic stereo RGB-D sequence")
    g.add_argument("--scene", help="scene key=value file (default: reference scene)")
    g.add_argument("--traj", help="trajectory key=value file (default: reference flight)")
    g.add_argument("--out", required=True)
    g.add_argument("--noise", type=float, default=0.0, help="image noise sigma in [0, 1] units")
    g.add_argument("--seed", type=int, help="override the scene seed")

    r = sub.add_parser("run", help="run the odometry pipeline on a dataset")
    r.add_argument("--dataset", required=True)
    r.add_argument("--mode", required=True, choices=("mono", "stereo", "lite"))
    r.add_argument("--config", help="pipeline key=value file (default: preset for the mode)")
    r.add_argument("--out", required=True)
    r.add_argument("--frames", type=int, help="only process the first N frames")
    r.add_argument("--seed", type=int, help="override the pipeline seed")

    f = sub.add_parser("fuse-gt", help="fuse ground-truth depth maps into a reference cloud")
    f.add_argument("--dataset", required=True)
    f.add_argument("--stride", type=int, default=2)
    f.add_argument("--voxel", type=float, default=0.05)
    f.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="register a map onto the ground truth and write the report")
    e.add_argument("--map", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--with-scale", action="store_true")
    e.add_argument("--out", required=True)
    e.add_argument("--dataset", help="dataset directory; its poses give the initial alignment")
    e.add_argument("--run", help="run directory with trajectory and logs (default: the map's directory)")
    e.add_argument("--radius", type=float, default=0.5)
    e.add_argument("--max-iter", type=int, default=1500)

    s = sub.add_parser("report", help="collect report directories into one summary table")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    return p


# --------------------------------------------------------------------------


def cmd_generate(args) -> None:
    from .dataset import (SceneConfig, TrajectoryConfig, generate_scene, generate_sequence, reference_rig,
                          reference_scene_config, reference_trajectory_config, save_sequence)
    scene_cfg = SceneConfig.from_dict(read_keyvalue(args.scene)) if args.scene else reference_scene_config()
    traj_cfg = TrajectoryConfig.from_dict(read_keyvalue(args.traj)) if args.traj else reference_trajectory_config()
    if args.seed is not None:
        scene_cfg = replace(scene_cfg, seed=args.seed)
    seq = generate_sequence(generate_scene(scene_cfg), traj_cfg, reference_rig(), args.noise,
                            progress=lambda k, n: log.info("rendered %d/%d", k + 1, n))
    save_sequence(seq, args.out)
    print(f"wrote {len(seq)} frames to {args.out}")


def cmd_run(args) -> int:
    from .backend import PipelineConfig, run_pipeline, write_results
    from .dataset import load_sequence
    if args.config:
        cfg = PipelineConfig.from_dict(read_keyvalue(args.config), args.mode)
    else:
        cfg = PipelineConfig.preset(args.mode)
    if cfg.mode != args.mode:
        cfg = replace(cfg, mode=args.mode)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    seq = load_sequence(args.dataset)
    if args.frames:
        seq = seq.subsequence(min(args.frames, len(seq)))
    res = run_pipeline(seq, cfg, progress=lambda k, n: log.info("frame %d/%d", k + 1, n))
    write_results(res, args.out)
    print(f"{cfg.mode}: {len(res.frames)} frames tracked, {len(res.keyframes)} keyframes, "
          f"{len(res.map)} map points")
    if res.lost_at is not None:
        print(f"tracking lost at frame {res.lost_at}: {res.lost_reason}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_fuse(args) -> None:
    from .dataset import load_sequence
    from .evaluation import fuse_ground_truth, write_pcd
    seq = load_sequence(args.dataset)
    cloud = fuse_ground_truth(seq.poses, seq.depth, seq.left, seq.rig.left, args.stride, args.voxel)
    write_pcd(args.out, cloud)
    print(f"wrote {len(cloud)} ground-truth points to {args.out}")


def _read_run_info(run_dir: Path) -> dict[str, str]:
    p = run_dir / "run.txt"
    return read_keyvalue(p) if p.exists() else {}


def cmd_evaluate(args) -> None:
    from .backend.pipeline import read_trajectory
    from .dataset import load_sequence
    from .evaluation import evaluate_map, gauge_scale, initial_alignment, read_cloud, read_map, timing_stats
    from .evaluation.report import read_csv_rows, write_report
    from .geometry import SimilarityTransform
    map_cloud = read_map(args.map)
    gt = read_cloud(args.gt)
    run_dir = Path(args.run) if args.run else Path(args.map).parent
    initial = SimilarityTransform()
    traj_path = run_dir / "trajectory.csv"
    if args.dataset:
        if not traj_path.exists():
            raise ConfigError(f"{traj_path} not found; needed for the initial alignment")
        seq = load_sequence(args.dataset)
        traj = read_trajectory(traj_path)
        info = _read_run_info(run_dir)
        scale = 1.0
        partner = info.get("init_partner", "")
        if info.get("mode") == "mono" and partner:
            scale = gauge_scale(seq.poses, min(traj), int(partner))
        initial = initial_alignment(traj, seq.poses, scale)
    rep = evaluate_map(map_cloud, gt, initial, args.with_scale, args.radius, max_iter=args.max_iter)
    kf_log, trk_log = run_dir / "keyframes.csv", run_dir / "tracking.csv"
    if kf_log.exists():
        rep.timing = timing_stats(read_csv_rows(kf_log), read_csv_rows(trk_log) if trk_log.exists() else [])
    write_report(rep, args.out)
    a = rep.accuracy
    print(f"points={a.n_points} correspondences={a.n_correspondences} mean={a.mean:.4f} m "
          f"std={a.std:.4f} m scale={rep.registration.transform.scale:.4f}")


def cmd_report(args) -> None:
    from .evaluation import summarize
    root = Path(args.inp)
    if not root.is_dir():
        raise ConfigError(f"{root} is not a directory")
    dirs = [root] if (root / "accuracy.csv").exists() else sorted(
        d for d in root.iterdir() if d.is_dir() and (d / "accuracy.csv").exists())
    if not dirs:
        raise ConfigError(f"no report directories under {root}")
    rows = summarize(dirs)
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out}")


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "fuse-gt": cmd_fuse,
            "evaluate": cmd_evaluate, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = COMMANDS[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, ConfigError) else EXIT_RUNTIME
    except Exception as exc:   # runtime failures of the pipeline or evaluation
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else int(code)


if __name__ == "__main__":
    sys.exit(main())
