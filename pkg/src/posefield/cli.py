"""Command line: ``gen``, ``run``, ``eval`` and ``ablate``.

Exit codes: 0 success, 2 validation error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import itertools
import json
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .epipolar import MatchFileError
from .images import ImageFormatError, read_image, write_rgbf32
from .metrics import DimensionMismatch, Trajectory, TrajectoryFormatError, evaluate_trajectory, psnr, read_tum, write_tum
from .pipeline import Pipeline, PipelineConfig, PipelineError, event_line, identity_baseline
from .posefilter import UpdateMode, save_checkpoint
from .radiance import RenderConfig, render_image
from .synthscene import NoiseSpec, SceneError, SceneSpec, TrajectorySpec, build_dataset, load_dataset, write_dataset

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3
FILTER_CHOICES = {"direct": "direct", "local": "implicit_local", "local+global": "implicit_local_global"}
FILTER_NAMES = {v: k for k, v in FILTER_CHOICES.items()}


class ValidationError(ValueError):
    pass


# -- small helpers --------------------------------------------------------------------
def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now(deterministic: bool) -> str:
    if deterministic:
        return "1970-01-01T00:00:00Z"
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def write_json_atomic(path: Path, obj) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _prepare_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise ValidationError(f"{path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)


class EventWriter:
    """Append-only NDJSON log; each record is flushed so an interrupted run leaves whole lines."""

    def __init__(self, path: Path):
        self.fh = open(path, "a", encoding="utf-8")

    def __call__(self, rec: dict) -> None:
        self.fh.write(event_line(rec) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


# -- gen ------------------------------------------------------------------------------
def cmd_gen(args) -> int:
    if args.frames < 2:
        raise ValidationError(f"--frames must be >= 2, got {args.frames}")
    out = Path(args.out)
    _prepare_dir(out, args.force)
    scene = SceneSpec(variant=args.scene, extent=args.extent, seed=args.seed, n_landmarks=args.landmarks)
    traj = TrajectorySpec(kind=args.traj, n_frames=args.frames, radius=args.radius, sweep_deg=args.sweep,
                          elevation_deg=args.elevation, step=args.step, jitter_deg=args.jitter)
    noise = NoiseSpec(args.sigma, args.outliers, args.dropout)
    render = RenderConfig()
    ds = build_dataset(scene, traj, noise, args.width, args.height, args.fov, args.seed, args.max_gap, render)
    write_dataset(out, ds, scene, traj, noise, render, args.seed)
    write_json_atomic(out / "manifest.json", {
        "command": "gen", "seed": args.seed, "git": _git_describe(),
        "start": _now(args.deterministic), "end": _now(args.deterministic),
        "config": {"scene": dataclasses.asdict(scene), "trajectory": dataclasses.asdict(traj),
                   "noise": dataclasses.asdict(noise), "width": args.width, "height": args.height, "fov": args.fov},
        "outputs": {"scene": "scene.json", "frames": "frames/", "matches": "matches/"},
    })
    vis = ds.visibility.sum(axis=1)
    co = [int(c.n_valid) for c in ds.matches.values()]
    print(f"{len(ds)} frames, {len(ds.landmarks)} landmarks, visible per frame {vis.min()}..{vis.max()}, "
          f"{len(co)} pairs with {min(co)}..{max(co)} matches -> {out}")
    return EXIT_OK


# -- run ------------------------------------------------------------------------------
def build_config(args) -> PipelineConfig:
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"cannot read config {args.config}: {exc}") from None
    cfg = PipelineConfig.from_dict(base)
    sch = cfg.schedule
    overrides = {k: getattr(args, k) for k in ("divisor", "lr", "lambda_f", "lambda_r") if getattr(args, k) is not None}
    if overrides:
        sch = dataclasses.replace(sch, **overrides)
    render = cfg.render
    if args.rays is not None or args.samples is not None:
        render = dataclasses.replace(render, batch_rays=args.rays or render.batch_rays,
                                     n_samples=args.samples or render.n_samples)
    mode = cfg.mode
    if args.filter is not None or args.update_domain is not None:
        mode = UpdateMode(FILTER_CHOICES[args.filter] if args.filter else mode.parameterization,
                          args.update_domain or mode.domain)
    cfg = dataclasses.replace(cfg, schedule=sch, render=render, mode=mode)
    if args.no_regulation:
        cfg = dataclasses.replace(cfg, regulation=False)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.log_every is not None:
        cfg = dataclasses.replace(cfg, log_every=args.log_every)
    return cfg


def execute_run(dataset: Path, out: Path, cfg: PipelineConfig, deterministic: bool = False,
                render: bool = False, force: bool = False) -> dict:
    """Run the pipeline on a dataset directory, writing a complete run directory. Returns the metrics."""
    ds = load_dataset(dataset)
    _prepare_dir(out, force)
    manifest = {
        "command": "run", "dataset": str(dataset), "seed": cfg.seed, "git": _git_describe(),
        "config": cfg.to_dict(), "start": _now(deterministic), "end": None,
        "outputs": {"events": "events.ndjson", "trajectory": "trajectory.txt", "gt_trajectory": "gt_trajectory.txt",
                    "metrics": "metrics.json", "checkpoints": "checkpoints/"},
    }
    write_json_atomic(out / "manifest.json", manifest)
    writer = EventWriter(out / "events.ndjson")
    try:
        result = Pipeline(ds.images, ds.intrinsics, ds.matches, cfg, writer).run()
    finally:
        writer.close()
    est, gt = Trajectory(result.poses), Trajectory(ds.poses)
    write_tum(out / "trajectory.txt", est)
    write_tum(out / "gt_trajectory.txt", gt)
    (out / "checkpoints").mkdir(exist_ok=True)
    np.savez(out / "checkpoints" / "field.npz", **result.field_.params)
    if result.filter_ is not None:
        save_checkpoint(out / "checkpoints" / "filter.rapf", result.filter_)
    metrics = evaluate_trajectory(est, gt)
    metrics["baseline_dR_deg"] = evaluate_trajectory(Trajectory(identity_baseline(len(gt))), gt)["dR_deg"]
    if render:
        (out / "renders").mkdir(exist_ok=True)
        scores = []
        for i, (pose, img) in enumerate(zip(result.poses, ds.images)):
            pred = render_image(result.field_, pose, ds.intrinsics, ds.width, ds.height, cfg.render)
            write_rgbf32(out / "renders" / f"frame_{i:04d}.rgbf32", pred)
            scores.append(psnr(np.clip(pred, 0, 1), img))
        metrics["psnr"] = float(np.mean(scores))
    write_json_atomic(out / "metrics.json", metrics)
    manifest["end"] = _now(deterministic)
    write_json_atomic(out / "manifest.json", manifest)
    return metrics


def cmd_run(args) -> int:
    cfg = build_config(args)
    metrics = execute_run(Path(args.dataset), Path(args.out), cfg, args.deterministic, args.render, args.force)
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


# -- eval ------------------------------------------------------------------------------
def cmd_eval(args) -> int:
    est, gt = read_tum(args.est), read_tum(args.gt)
    if est.ids != gt.ids:
        raise ValidationError(f"frame ids differ between {args.est} and {args.gt}")
    metrics = evaluate_trajectory(est, gt)
    metrics["psnr"] = None
    if args.images:
        est_dir, gt_dir = (Path(p) for p in args.images)
        names = sorted(p.name for p in est_dir.iterdir() if p.suffix in (".png", ".rgbf32"))
        if not names:
            raise ValidationError(f"no images in {est_dir}")
        scores = []
        for name in names:
            if not (gt_dir / name).exists():
                raise ValidationError(f"{gt_dir / name} is missing")
            scores.append(psnr(read_image(est_dir / name), read_image(gt_dir / name)))
        metrics["psnr"] = float(np.mean(scores))
    metrics["scene"] = args.scene
    text = json.dumps(metrics, indent=2, sort_keys=True) + "\n"
    if args.out:
        write_json_atomic(Path(args.out), metrics)
    else:
        sys.stdout.write(text)
    if args.csv:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["scene", "dR_deg", "dT", "PSNR"])
        w.writerow([args.scene, repr(metrics["dR_deg"]), repr(metrics["dT"]),
                    "" if metrics["psnr"] is None else repr(metrics["psnr"])])
        Path(args.csv).write_text(buf.getvalue())
    return EXIT_OK


# -- ablate ------------------------------------------------------------------------------
ABLATION_COLUMNS = ["seed", "regulation", "filter", "domain", "status", "dR_deg", "dT", "baseline_dR_deg", "run_dir"]


def ablation_grid(seeds) -> list[dict]:
    rows = []
    for seed, reg, filt, dom in itertools.product(seeds, (True, False), FILTER_CHOICES, ("SE3", "se3")):
        rows.append({"seed": seed, "regulation": reg, "filter": filt, "domain": dom})
    return rows


def _ablation_job(job) -> dict:
    dataset, out, cfg_dict, row, deterministic = job
    cfg = PipelineConfig.from_dict(cfg_dict)
    cfg = dataclasses.replace(cfg, seed=row["seed"], regulation=row["regulation"],
                              mode=UpdateMode(FILTER_CHOICES[row["filter"]], row["domain"]))
    name = f"seed{row['seed']}_{'reg' if row['regulation'] else 'noreg'}_{row['filter']}_{row['domain']}"
    run_dir = Path(out) / name
    rec = dict(row, run_dir=name)
    try:
        m = execute_run(Path(dataset), run_dir, cfg, deterministic, force=True)
        rec.update(status="ok", dR_deg=m["dR_deg"], dT=m["dT"], baseline_dR_deg=m["baseline_dR_deg"])
    except Exception as exc:  # a failed cell must not stop the grid
        rec.update(status=f"failed: {type(exc).__name__}: {exc}", dR_deg="", dT="", baseline_dR_deg="")
    return rec


def cmd_ablate(args) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(args.dataset, str(out), cfg.to_dict(), row, args.deterministic) for row in ablation_grid(args.seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(_ablation_job, jobs))
    else:
        rows = [_ablation_job(j) for j in jobs]
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    failed = sum(1 for r in rows if r["status"] != "ok")
    print(f"{len(rows)} runs, {failed} failed -> {out / 'ablation.csv'}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------
def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file mirroring PipelineConfig; flags override its values")
    p.add_argument("--seed", type=int, help="pipeline seed (field/filter init, ray sampling)")
    p.add_argument("--divisor", type=int, help="divide every stage's iteration count by this (default 10)")
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--lambda-f", dest="lambda_f", type=float, help="regulation weight")
    p.add_argument("--lambda-r", dest="lambda_r", type=float, help="rotation weight inside the regulation loss")
    p.add_argument("--rays", type=int, help="rays per iteration")
    p.add_argument("--samples", type=int, help="samples per ray")
    p.add_argument("--log-every", dest="log_every", type=int, help="iterations between logged events")
    p.add_argument("--no-regulation", action="store_true", help="disable the relative-pose regulation loss")
    p.add_argument("--filter", choices=list(FILTER_CHOICES), help="pose update parameterization")
    p.add_argument("--update-domain", dest="update_domain", choices=["SE3", "se3"],
                   help="SE3: left-multiply exp(delta); se3: add delta to log(P)")
    p.add_argument("--deterministic", action="store_true", help="fixed manifest timestamps for byte-identical output")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="posefield", description="Incremental radiance-field pose estimation.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--scene", default="blob", choices=["blob", "boxes", "points"])
    g.add_argument("--extent", type=float, default=1.0)
    g.add_argument("--landmarks", type=int, default=300)
    g.add_argument("--traj", default="orbit", choices=["orbit", "forward"])
    g.add_argument("--frames", type=int, default=12)
    g.add_argument("--sweep", type=float, default=90.0, help="orbit sweep in degrees")
    g.add_argument("--radius", type=float, default=4.0)
    g.add_argument("--elevation", type=float, default=15.0)
    g.add_argument("--step", type=float, default=0.25, help="forward trajectory step")
    g.add_argument("--jitter", type=float, default=0.0, help="per-frame rotation jitter in degrees")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--fov", type=float, default=45.0)
    g.add_argument("--sigma", type=float, default=0.0, help="match pixel noise")
    g.add_argument("--outliers", type=float, default=0.0)
    g.add_argument("--dropout", type=float, default=0.0)
    g.add_argument("--max-gap", dest="max_gap", type=int, default=2)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.add_argument("--deterministic", action="store_true")
    g.set_defaults(func=cmd_gen)

    r = sub.add_parser("run", help="run the incremental pipeline on a dataset")
    r.add_argument("dataset")
    r.add_argument("--out", required=True, help="run directory")
    r.add_argument("--render", action="store_true", help="also render every frame and report PSNR")
    r.add_argument("--force", action="store_true")
    _add_run_flags(r)
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score an estimated trajectory against ground truth")
    e.add_argument("--est", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--images", nargs=2, metavar=("EST_DIR", "GT_DIR"), help="paired image directories for PSNR")
    e.add_argument("--scene", default="scene")
    e.add_argument("--out", help="metrics JSON path (stdout if omitted)")
    e.add_argument("--csv", help="CSV table path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the regulation x filter x domain grid")
    a.add_argument("dataset")
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    a.add_argument("--jobs", type=int, default=1, help="parallel runs (default sequential)")
    _add_run_flags(a)
    a.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, SceneError, TrajectoryFormatError, MatchFileError, ImageFormatError,
            DimensionMismatch, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (PipelineError, RuntimeError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
