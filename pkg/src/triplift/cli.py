"""Command-line surface: dataset generation, training, rendering, evaluation,
and the finite-difference release gate.

Exit codes: 0 success, 1 check failure, 2 usage/input error, 3 numerical
divergence.
"""
from __future__ import annotations

import dataclasses
import json
import sys
import traceback
from pathlib import Path

import click
import numpy as np
from PIL import Image

from . import toyworld as tw
from . import training as tr
from .checkpoint import CheckpointError, load_checkpoint
from .geometry import Camera, intrinsics_from_fov, look_at_pose
from .renderer import RenderOptions

EXIT_CHECK_FAILURE = 1
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3

METRICS_SCHEMA = {
    "type": "object",
    "required": ["mean", "scenes"],
    "properties": {
        "mean": {
            "type": "object",
            "required": ["psnr", "ssim", "mse", "depth_rmse"],
            "properties": {
                "psnr": {"type": ["number", "null"]},
                "psnr_infinite": {"type": "boolean"},
                "ssim": {"type": "number"},
                "mse": {"type": "number"},
                "depth_rmse": {"type": ["number", "null"]},
            },
        },
        "scenes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["scene", "psnr", "ssim", "mse", "depth_rmse"],
            },
        },
    },
}


def _fail(message: str, code: int = EXIT_USAGE):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def load_run_config(path: str) -> tr.TrainConfig:
    """Strict JSON config: every key must be a TrainConfig field."""
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        _fail(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        _fail(f"config {path} is not valid JSON: {e}")
    if not isinstance(raw, dict):
        _fail(f"config {path} must hold a JSON object")
    try:
        cfg = tr.TrainConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        _fail(f"config {path}: {e}")
    cfg.strides = tuple(cfg.strides)
    if cfg.contraction_scale is not None:
        cfg.contraction_scale = tuple(cfg.contraction_scale)
    return cfg


@click.group()
def main():
    """Six surround-view images to a renderable triplane."""


# ---------------------------------------------------------------------------
# gen-data


@main.command("gen-data")
@click.option("--scenes", "n_scenes", type=int, default=4, show_default=True,
              help="Number of toy scenes to generate.")
@click.option("--seed", type=int, default=0, show_default=True, help="Root seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--radius", type=float, default=20.0, show_default=True,
              help="Ground-disk radius in meters (the scene radius).")
@click.option("--sup-views", type=int, default=16, show_default=True,
              help="Supervision cameras on the upper hemisphere.")
@click.option("--ego-size", type=int, default=64, show_default=True,
              help="Ego image resolution (square).")
@click.option("--sup-width", type=int, default=64, show_default=True)
@click.option("--sup-height", type=int, default=48, show_default=True)
@click.option("--white-background", is_flag=True,
              help="Mask sky pixels of supervision images to white.")
def gen_data(n_scenes, seed, out_dir, radius, sup_views, ego_size, sup_width, sup_height,
             white_background):
    """Generate toy scenes with oracle RGB-D supervision."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        _fail(f"output directory not writable: {e}")
    scenes = [tw.generate_scene(tw.subseed(seed, i), radius=radius) for i in range(n_scenes)]
    rigs = (
        tw.make_rig("ego-6", {"width": ego_size, "height": ego_size}),
        tw.make_rig(f"sphere-{sup_views}",
                    {"count": sup_views, "width": sup_width, "height": sup_height,
                     "radius": 1.3 * radius}),
    )
    written = tw.export_dataset(scenes, rigs, out, white_background=white_background)
    images = sum(len(list(d.glob("*.png"))) for d in written)
    click.echo(f"wrote {len(written)} scenes, {images} images to {out}")


# ---------------------------------------------------------------------------
# train


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(),
              help="JSON training config (TrainConfig fields).")
@click.option("--data", "data_dir", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Checkpoint path.")
@click.option("--log", "log_path", type=click.Path(), default=None,
              help="Metrics log (line-delimited JSON); defaults next to the checkpoint.")
@click.option("--resume", "resume_path", type=click.Path(), default=None,
              help="Continue from an existing checkpoint.")
def train_cmd(config_path, data_dir, out_path, log_path, resume_path):
    """Train per the config and write a checkpoint plus metrics log."""
    config = load_run_config(config_path)
    try:
        dataset = tw.import_dataset(data_dir)
    except (tw.DatasetError, FileNotFoundError, OSError) as e:
        _fail(str(e))
    resume = None
    if resume_path:
        try:
            resume = load_checkpoint(resume_path)
        except CheckpointError as e:
            _fail(str(e))
        resume.config.steps = config.steps
        resume.config.epochs = config.epochs
        resume.config.total_steps = config.total_steps
    if log_path is None:
        log_path = str(Path(out_path).with_suffix(".metrics.jsonl"))

    divergence = {"streak": 0}

    def on_step(entry, nan_streak):
        divergence["streak"] = nan_streak
        if nan_streak >= 100:
            raise FloatingPointError("loss was non-finite for 100 consecutive steps")

    try:
        pipeline, history = tr.train(config, dataset, checkpoint_path=out_path,
                                     log_path=log_path, resume=resume, on_step=on_step)
    except FloatingPointError as e:
        _fail(str(e), code=EXIT_DIVERGENCE)
    except ValueError as e:
        _fail(str(e))
    final = history[-1] if history else {}
    click.echo(f"trained {pipeline.step} steps; final loss {final.get('L_color')}; "
               f"checkpoint {out_path}; metrics {log_path}")


# ---------------------------------------------------------------------------
# render


def _load_pose_file(path: str) -> list[Camera]:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        _fail(f"pose file {path}: {e}")
    cams = []
    entries = raw if isinstance(raw, list) else raw.get("cameras")
    if not isinstance(entries, list):
        _fail(f"pose file {path}: expected a list of cameras or {{'cameras': [...]}}")
    for i, d in enumerate(entries):
        try:
            k = np.array([[d["fx"], 0.0, d["cx"]], [0.0, d["fy"], d["cy"]], [0.0, 0.0, 1.0]])
            cams.append(Camera(k, np.asarray(d["pose"], dtype=np.float64).reshape(4, 4),
                               int(d["width"]), int(d["height"])))
        except (KeyError, ValueError) as e:
            _fail(f"pose file {path}, camera {i}: {e}")
    return cams


def orbit_cameras(count: int, radius: float, height: float, width=64, height_px=48,
                  fov=60.0) -> list[Camera]:
    k = intrinsics_from_fov(width, height_px, fov)
    cams = []
    for i in range(count):
        ang = 2 * np.pi * i / count
        pos = (radius * np.cos(ang), radius * np.sin(ang), height)
        cams.append(Camera(k, look_at_pose(pos, (0, 0, 0)), width, height_px))
    return cams


def _save_render(out_dir: Path, name: str, rgb: np.ndarray, depth: np.ndarray,
                 background: np.ndarray):
    arr = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(arr).save(out_dir / f"{name}.png")
    mm = np.where(background, 0.0, np.clip(depth * 1000.0, 0, 65535))
    Image.fromarray(np.round(mm).astype(np.uint16)).save(out_dir / f"{name}_depth.png")
    np.save(out_dir / f"{name}_rgb.npy", rgb.astype(np.float32))
    np.save(out_dir / f"{name}_depth.npy", depth.astype(np.float32))


@main.command("render")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--pose", "pose_path", type=click.Path(), default=None,
              help="JSON file with camera poses to render.")
@click.option("--orbit", type=int, default=0, help="Render N orbit poses around the origin.")
@click.option("--orbit-radius", type=float, default=26.0, show_default=True)
@click.option("--orbit-height", type=float, default=14.0, show_default=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--double", is_flag=True, help="Add a second, density-proportional sampling pass.")
@click.option("--pif", is_flag=True, help="Condition the renderer on projected image features.")
@click.option("--data", "data_dir", type=click.Path(), default=None,
              help="Dataset directory (required for cross-scene checkpoints / --pif).")
@click.option("--scene", "scene_index", type=int, default=0, show_default=True,
              help="Scene index inside --data supplying the six input images.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--workers", type=int, default=1, show_default=True)
def render_cmd(ckpt_path, pose_path, orbit, orbit_radius, orbit_height, out_dir, double,
               pif, data_dir, scene_index, seed, workers):
    """Render RGB + depth images from a checkpoint."""
    try:
        pipeline = load_checkpoint(ckpt_path)
    except (CheckpointError, OSError) as e:
        _fail(str(e))
    if pose_path is None and orbit <= 0:
        _fail("provide --pose FILE or --orbit N")
    if pipeline.mode == "per-scene" and pif:
        _fail("--pif requires a cross-scene checkpoint (per-scene training has no image encoder)")
    record = None
    if pipeline.mode == "cross-scene" or pif:
        if data_dir is None:
            _fail(f"{pipeline.mode} checkpoint needs --data to supply the six input images")
        try:
            dataset = tw.import_dataset(data_dir)
        except tw.DatasetError as e:
            _fail(str(e))
        if not (0 <= scene_index < len(dataset.scenes)):
            _fail(f"--scene {scene_index} out of range (dataset has {len(dataset.scenes)})")
        record = dataset.scenes[scene_index]

    cameras = _load_pose_file(pose_path) if pose_path else orbit_cameras(
        orbit, orbit_radius, orbit_height)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if record is not None:
        tri, pyramid = pipeline.scene_triplane(record, training=False)
        ego_cams = record.ego_cameras
    else:
        tri, pyramid, ego_cams = pipeline.triplane, None, None
    cfg = pipeline.config
    opts = RenderOptions(
        num_coarse=cfg.num_coarse,
        num_fine=(cfg.num_fine or cfg.num_coarse) if double else 0,
        near=cfg.near,
        far=cfg.far,
        stratified=False,
        seed=seed,
        use_pif=pif,
        workers=workers,
    )
    for i, cam in enumerate(cameras):
        rgb, depth, background = pipeline.renderer.render_image(
            tri, cam, opts, pyramid=pyramid if pif else None, cameras=ego_cams)
        _save_render(out, f"view_{i:03d}", rgb, depth, background)
    click.echo(f"rendered {len(cameras)} views to {out}")


# ---------------------------------------------------------------------------
# eval


@main.command("eval")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--split", type=click.Choice(["held-out", "train"]), default="held-out",
              show_default=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Write the metrics JSON here as well as stdout.")
@click.option("--workers", type=int, default=1, show_default=True)
def eval_cmd(ckpt_path, data_dir, split, out_path, workers):
    """PSNR/SSIM/MSE and depth RMSE over a dataset split."""
    try:
        pipeline = load_checkpoint(ckpt_path)
        dataset = tw.import_dataset(data_dir)
    except (CheckpointError, tw.DatasetError, OSError) as e:
        _fail(str(e))
    cfg = pipeline.config
    if pipeline.mode == "per-scene":
        scene_ids = [cfg.scene_index]
    else:
        train_scenes, holdout = tr.scene_split(dataset, cfg.holdout_scenes)
        scene_ids = holdout if split == "held-out" else train_scenes
        if not scene_ids:
            _fail(f"split {split!r} is empty for this config", code=EXIT_USAGE)
    rows = []
    for si in scene_ids:
        record = dataset.scenes[si]
        train_views, holdout_views = tr.train_view_split(record, cfg.holdout_views)
        views = holdout_views if split == "held-out" else train_views
        if not views:
            _fail(f"split {split!r} has no views for scene {si}")
        per = [tr.evaluate_view(pipeline, record, v, workers=workers) for v in views]
        psnrs = [m["psnr"] for m in per]
        finite = [p for p in psnrs if np.isfinite(p)]
        drmse = [m["depth_rmse"] for m in per if np.isfinite(m["depth_rmse"])]
        rows.append({
            "scene": record.path.name,
            "psnr": float(np.mean(finite)) if finite else None,
            "psnr_infinite": len(finite) < len(psnrs),
            "ssim": float(np.mean([m["ssim"] for m in per])),
            "mse": float(np.mean([m["mse"] for m in per])),
            "depth_rmse": float(np.mean(drmse)) if drmse else None,
        })
    finite_psnr = [r["psnr"] for r in rows if r["psnr"] is not None]
    agg_drmse = [r["depth_rmse"] for r in rows if r["depth_rmse"] is not None]
    report = {
        "mean": {
            "psnr": float(np.mean(finite_psnr)) if finite_psnr else None,
            "psnr_infinite": any(r["psnr_infinite"] for r in rows),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "mse": float(np.mean([r["mse"] for r in rows])),
            "depth_rmse": float(np.mean(agg_drmse)) if agg_drmse else None,
        },
        "scenes": rows,
    }
    text = json.dumps(report, indent=1, sort_keys=True)
    click.echo(text)
    if out_path:
        Path(out_path).write_text(text)


# ---------------------------------------------------------------------------
# gradcheck


@main.command("gradcheck")
@click.option("--module", "module_name", type=str, default=None,
              help="Restrict to one module's checks.")
@click.option("--inject-fault", is_flag=True, hidden=True,
              help="Corrupt one gradient on purpose (release-gate self test).")
def gradcheck_cmd(module_name, inject_fault):
    """Finite-difference verification of every differentiable operation."""
    from .gradsuite import run_suite

    results = run_suite(module=module_name, inject_fault=inject_fault)
    if not results:
        _fail(f"no gradcheck module named {module_name!r}")
    worst_name, worst = None, 0.0
    for name, err in results:
        status = "ok" if err < 1e-4 else "FAIL"
        click.echo(f"{status:4s} {name:40s} max relative error {err:.3e}")
        if err > worst:
            worst_name, worst = name, err
    if worst >= 1e-4:
        click.echo(f"gradient check failed: {worst_name} at {worst:.3e}", err=True)
        sys.exit(EXIT_CHECK_FAILURE)
    click.echo(f"all {len(results)} checks below 1e-4")


if __name__ == "__main__":
    main()
