import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from click.testing import CliRunner

from triplift import cli
from triplift import toyworld as tw
from triplift import training as tr


def run_cli(*args):
    return CliRunner().invoke(cli.main, [str(a) for a in args], catch_exceptions=False)


def dir_digest(path: Path) -> dict:
    import hashlib
    out = {}
    for p in sorted(path.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(path))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def write_config(path: Path, **overrides):
    cfg = dict(
        mode="per-scene",
        steps=6,
        warmup_steps=2,
        learning_rate=1e-2,
        rays_per_view=32,
        views_per_scene=2,
        num_coarse=6,
        n_h=10,
        n_w=10,
        n_z=4,
        plane_channels=6,
        feat_channels=6,
        renderer_hidden=12,
        renderer_layers=3,
        near=1.0,
        far=45.0,
        holdout_views=2,
    )
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return cfg


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_data")
    res = run_cli("gen-data", "--scenes", 2, "--seed", 3, "--out", root,
                  "--sup-views", 8, "--ego-size", 32, "--sup-width", 32, "--sup-height", 24)
    assert res.exit_code == 0, res.output
    return root


@pytest.fixture(scope="module")
def trained_checkpoint(small_dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("cli_train")
    cfg_path = root / "config.json"
    write_config(cfg_path, steps=10)
    ckpt = root / "model.ckpt"
    res = run_cli("train", "--config", cfg_path, "--data", small_dataset, "--out", ckpt)
    assert res.exit_code == 0, res.output
    return ckpt


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_counts_and_manifest(small_dataset):
    dirs = sorted(d.name for d in small_dataset.iterdir() if d.is_dir())
    assert dirs == ["scene_0000", "scene_0001"]
    ds = tw.import_dataset(small_dataset)
    assert len(ds) == 2
    assert len(ds.scenes[0].sup_cameras) == 8


def test_gen_data_deterministic(tmp_path):
    for sub in ("a", "b"):
        res = run_cli("gen-data", "--scenes", 2, "--seed", 11, "--out", tmp_path / sub,
                      "--sup-views", 4, "--ego-size", 24, "--sup-width", 24, "--sup-height", 18)
        assert res.exit_code == 0
    assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")


def test_gen_data_unwritable_path(tmp_path):
    blocker = tmp_path / "blocked"
    blocker.write_text("a file, not a directory")
    result = CliRunner().invoke(cli.main, ["gen-data", "--scenes", "1", "--out", str(blocker)])
    assert result.exit_code == 2


# ---------------------------------------------------------------------------
# train


def test_train_smoke_improves_psnr(small_dataset, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, steps=40, rays_per_view=64, learning_rate=2e-2)
    ckpt = tmp_path / "m.ckpt"
    res = run_cli("train", "--config", cfg_path, "--data", small_dataset, "--out", ckpt)
    assert res.exit_code == 0, res.output
    from triplift.checkpoint import load_checkpoint
    pipeline = load_checkpoint(ckpt)
    ds = tw.import_dataset(small_dataset)
    fresh = tr.build_pipeline(pipeline.config, ds)
    initial = tr.evaluate_view(fresh, ds.scenes[0], 0)["psnr"]
    final = tr.evaluate_view(pipeline, ds.scenes[0], 0)["psnr"]
    assert final > initial


def test_train_invalid_config_names_field(small_dataset, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"mode": "per-scene", "warmup_stepz": 3}))
    result = CliRunner().invoke(cli.main, [
        "train", "--config", str(cfg_path), "--data", str(small_dataset),
        "--out", str(tmp_path / "m.ckpt")])
    assert result.exit_code == 2
    assert "warmup_stepz" in result.output


def test_train_metrics_log_echoes_default_lr(small_dataset, tmp_path):
    # cross-scene defaults carry the 5e-5 peak rate into the log
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, mode="cross-scene", epochs=1, scenes_per_epoch=2, steps=0,
                 warmup_steps=1, learning_rate=5e-5, rays_per_view=16, holdout_views=1)
    ckpt = tmp_path / "m.ckpt"
    log = tmp_path / "m.metrics.jsonl"
    res = run_cli("train", "--config", cfg_path, "--data", small_dataset,
                  "--out", ckpt, "--log", log)
    assert res.exit_code == 0, res.output
    entries = [json.loads(l) for l in log.read_text().splitlines()]
    peak = max(e["lr"] for e in entries)
    assert peak <= 5e-5 and entries[1]["lr"] == pytest.approx(5e-5, rel=1e-12)


def test_train_resume_continues_counter(small_dataset, tmp_path):
    cfg_path = tmp_path / "cfg.json"
    write_config(cfg_path, steps=4)
    ckpt = tmp_path / "m.ckpt"
    res = run_cli("train", "--config", cfg_path, "--data", small_dataset, "--out", ckpt)
    assert res.exit_code == 0
    cfg2 = tmp_path / "cfg2.json"
    write_config(cfg2, steps=8)
    log2 = tmp_path / "resume.jsonl"
    res = run_cli("train", "--config", cfg2, "--data", small_dataset, "--out",
                  tmp_path / "m2.ckpt", "--resume", ckpt, "--log", log2)
    assert res.exit_code == 0, res.output
    steps = [json.loads(l)["step"] for l in log2.read_text().splitlines()]
    assert steps == [4, 5, 6, 7]


# ---------------------------------------------------------------------------
# render


def test_render_orbit_counts_and_determinism(trained_checkpoint, tmp_path):
    out_a = tmp_path / "a"
    res = run_cli("render", "--ckpt", trained_checkpoint, "--orbit", 4,
                  "--orbit-radius", 18, "--out", out_a)
    assert res.exit_code == 0, res.output
    rgbs = sorted(out_a.glob("view_*[0-9].png"))
    depths = sorted(out_a.glob("view_*_depth.png"))
    assert len(rgbs) == 4 and len(depths) == 4
    out_b = tmp_path / "b"
    run_cli("render", "--ckpt", trained_checkpoint, "--orbit", 4,
            "--orbit-radius", 18, "--out", out_b)
    assert dir_digest(out_a) == dir_digest(out_b)


def test_render_workers_do_not_change_output(trained_checkpoint, tmp_path):
    out_a = tmp_path / "w1"
    out_b = tmp_path / "w4"
    run_cli("render", "--ckpt", trained_checkpoint, "--orbit", 2, "--out", out_a)
    run_cli("render", "--ckpt", trained_checkpoint, "--orbit", 2, "--workers", 4, "--out", out_b)
    assert dir_digest(out_a) == dir_digest(out_b)


def test_render_double_differs(trained_checkpoint, tmp_path):
    out_single = tmp_path / "s"
    out_double = tmp_path / "d"
    run_cli("render", "--ckpt", trained_checkpoint, "--orbit", 2, "--out", out_single)
    run_cli("render", "--ckpt", trained_checkpoint, "--orbit", 2, "--double", "--out", out_double)
    a = np.load(out_single / "view_000_rgb.npy")
    b = np.load(out_double / "view_000_rgb.npy")
    assert a.shape == b.shape
    assert not np.array_equal(a, b)


def test_render_pose_file(trained_checkpoint, tmp_path):
    pose = {
        "fx": 24.0, "fy": 24.0, "cx": 12.0, "cy": 9.0,
        "pose": [float(x) for x in np.asarray(
            cli.look_at_pose((14.0, 0, 8.0), (0, 0, 0))).reshape(-1)],
        "width": 24, "height": 18,
    }
    pose_path = tmp_path / "poses.json"
    pose_path.write_text(json.dumps([pose]))
    out = tmp_path / "r"
    res = run_cli("render", "--ckpt", trained_checkpoint, "--pose", pose_path, "--out", out)
    assert res.exit_code == 0, res.output
    assert (out / "view_000.png").exists()


def test_render_per_scene_rejects_pif(trained_checkpoint, tmp_path):
    result = CliRunner().invoke(cli.main, [
        "render", "--ckpt", str(trained_checkpoint), "--orbit", "2", "--pif",
        "--out", str(tmp_path / "x")])
    assert result.exit_code == 2
    assert "pif" in result.output.lower()


def test_render_bad_checkpoint_exit2(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"not a checkpoint at all")
    result = CliRunner().invoke(cli.main, [
        "render", "--ckpt", str(bad), "--orbit", "2", "--out", str(tmp_path / "o")])
    assert result.exit_code == 2


# ---------------------------------------------------------------------------
# eval


def test_eval_held_out_schema(trained_checkpoint, small_dataset, tmp_path):
    out = tmp_path / "metrics.json"
    res = run_cli("eval", "--ckpt", trained_checkpoint, "--data", small_dataset,
                  "--split", "held-out", "--out", out)
    assert res.exit_code == 0, res.output
    report = json.loads(out.read_text())
    jsonschema.validate(report, cli.METRICS_SCHEMA)
    assert len(report["scenes"]) == 1
    assert report["mean"]["depth_rmse"] is not None


def test_eval_perfect_prediction_flags_infinite_psnr(trained_checkpoint, small_dataset,
                                                     tmp_path, monkeypatch):
    # self-comparison contract: zero error reports MSE 0, SSIM 1, PSNR flagged infinite
    def perfect(pipeline, record, view, workers=1):
        gt = record.load_sup_image(view)
        depth = record.load_sup_depth(view)
        mask = np.isfinite(depth)
        return {
            "psnr": tr.psnr(gt, gt),
            "ssim": tr.ssim(gt, gt),
            "mse": 0.0,
            "depth_rmse": tr.depth_rmse(depth, depth, mask),
            "background_fraction": 0.0,
        }

    monkeypatch.setattr(tr, "evaluate_view", perfect)
    out = tmp_path / "m.json"
    res = run_cli("eval", "--ckpt", trained_checkpoint, "--data", small_dataset, "--out", out)
    assert res.exit_code == 0, res.output
    report = json.loads(out.read_text())
    jsonschema.validate(report, cli.METRICS_SCHEMA)
    assert report["mean"]["psnr_infinite"] is True
    assert report["mean"]["mse"] == 0.0
    assert report["mean"]["ssim"] == pytest.approx(1.0)


def test_eval_depth_rmse_respects_oracle_mask(small_dataset):
    # sky pixels (oracle sentinel) must not enter the depth error
    ds = tw.import_dataset(small_dataset)
    rec = ds.scenes[0]
    gt_depth = rec.load_sup_depth(0)
    mask = np.isfinite(gt_depth)
    pred = np.where(mask, gt_depth, 12345.0)  # absurd values only on sky pixels
    assert tr.depth_rmse(pred, gt_depth, mask) == 0.0


# ---------------------------------------------------------------------------
# gradcheck


def test_gradcheck_module_filter_passes():
    res = run_cli("gradcheck", "--module", "triplane")
    assert res.exit_code == 0, res.output
    assert "triplane.sample" in res.output
    assert "renderer" not in res.output


def test_gradcheck_fault_injection_fails():
    result = CliRunner().invoke(cli.main, ["gradcheck", "--module", "triplane",
                                           "--inject-fault"])
    assert result.exit_code == 1
    assert "corrupted_mul" in result.output


def test_gradcheck_unknown_module():
    result = CliRunner().invoke(cli.main, ["gradcheck", "--module", "nonsense"])
    assert result.exit_code == 2
