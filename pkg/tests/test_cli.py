import json
import os
import subprocess
import sys

import numpy as np
import pytest

from geomattn.imageio import read_image

TINY = ["--ids", "4", "--images-per-id", "4", "--image-size", "32", "--held-out", "2"]


def run_cli(*args, env=None, cwd=None):
    full_env = dict(os.environ)
    if env:
        full_env.update(env)
    return subprocess.run(
        [sys.executable, "-m", "geomattn.cli", *args],
        capture_output=True,
        text=True,
        env=full_env,
        cwd=cwd,
    )


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One generated dataset and one trained checkpoint shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    gen = run_cli("generate-data", "--out", str(data), "--seed", "5", *TINY)
    assert gen.returncode == 0, gen.stderr
    run_dir = root / "run"
    tr = run_cli(
        "train", "--synthetic", "--seed", "5", "--epochs", "2",
        "--out", str(run_dir), *TINY,
    )
    assert tr.returncode == 0, tr.stderr
    return root


def test_generate_data_layout(workspace):
    data = workspace / "data"
    for name in ("train.csv", "query.csv", "gallery.csv", "landmarks.csv", "config.echo"):
        assert (data / name).exists(), name
    header = (data / "train.csv").read_text().splitlines()[0]
    assert header.split(",")[:3] == ["path", "identity", "camera"]
    images = sorted((data / "images").iterdir())
    assert len(images) == 4 * 4 + 2 * 4  # train + held-out
    img = read_image(images[0])
    assert img.shape == (3, 32, 32)


def test_train_outputs_and_log_schema(workspace):
    run_dir = workspace / "run"
    for name in ("model.ckpt", "model.ckpt.arch.json", "train.log.jsonl", "config.echo"):
        assert (run_dir / name).exists(), name
    lines = (run_dir / "train.log.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2  # 2 epochs x 1 step (16 images / (4x4))
    for line in lines:
        rec = json.loads(line)
        assert {"epoch", "step", "lr", "L_rot", "total"} <= set(rec)


def test_train_is_deterministic(workspace, tmp_path):
    second = tmp_path / "again"
    tr = run_cli(
        "train", "--synthetic", "--seed", "5", "--epochs", "2",
        "--out", str(second), *TINY,
    )
    assert tr.returncode == 0, tr.stderr
    assert (second / "model.ckpt").read_bytes() == (workspace / "run" / "model.ckpt").read_bytes()
    assert (
        second / "train.log.jsonl"
    ).read_bytes() == (workspace / "run" / "train.log.jsonl").read_bytes()


def test_config_echo_replays_bitwise(workspace, tmp_path):
    replay = tmp_path / "replay"
    tr = run_cli(
        "train", "--config", str(workspace / "run" / "config.echo"), "--out", str(replay)
    )
    assert tr.returncode == 0, tr.stderr
    assert (replay / "model.ckpt").read_bytes() == (
        workspace / "run" / "model.ckpt"
    ).read_bytes()


def test_env_seed_fallback(workspace, tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    for out in (a, b):
        tr = run_cli(
            "train", "--synthetic", "--epochs", "1", "--out", str(out), *TINY,
            env={"GEOMATTN_SEED": "5"},
        )
        assert tr.returncode == 0, tr.stderr
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    echo = (a / "config.echo").read_text()
    assert "run.seed = 5" in echo


def test_missing_dataset_exits_2(tmp_path):
    tr = run_cli("train", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"))
    assert tr.returncode == 2
    assert "nowhere" in tr.stderr


def test_bad_flag_value_exits_1(tmp_path):
    tr = run_cli("train", "--synthetic", "--epochs", "banana", "--out", str(tmp_path))
    assert tr.returncode == 1


def test_unknown_config_key_exits_1(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("optim.learning_rate_zero = 1e-4\n")
    tr = run_cli("train", "--synthetic", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert tr.returncode == 1
    assert "optim.learning_rate_zero" in tr.stderr


def test_lambda_rot_zero_removes_rotation_from_total(workspace, tmp_path):
    out = tmp_path / "norot"
    tr = run_cli(
        "train", "--synthetic", "--seed", "5", "--epochs", "1", "--lambda-rot", "0",
        "--out", str(out), *TINY,
    )
    assert tr.returncode == 0, tr.stderr
    for line in (out / "train.log.jsonl").read_text().strip().splitlines():
        rec = json.loads(line)
        without_rot = 0.5 * (
            rec["L_tri_gb"] + rec["L_sce_gb"] + rec["L_tri_ab"] + rec["L_sce_ab"]
        )
        assert rec["total"] == pytest.approx(without_rot, rel=1e-12)
        assert rec["L_rot"] > 0  # still measured, just unweighted


def test_evaluate_json_schema(workspace, tmp_path):
    out_file = tmp_path / "metrics.json"
    ev = run_cli(
        "evaluate",
        "--checkpoint", str(workspace / "run" / "model.ckpt"),
        "--query", str(workspace / "data" / "query.csv"),
        "--gallery", str(workspace / "data" / "gallery.csv"),
        "--out", str(out_file),
    )
    assert ev.returncode == 0, ev.stderr
    payload = json.loads(ev.stdout)  # stdout must be a single JSON document
    assert {"imAP", "tmAP", "cmc", "excluded_queries"} <= set(payload)
    assert {"1", "5"} <= set(payload["cmc"])
    assert json.loads(out_file.read_text()) == payload
    assert 0.0 <= payload["imAP"] <= 1.0


def test_evaluate_without_tracks_warns_and_omits_tmap(workspace, tmp_path):
    gallery = (workspace / "data" / "gallery.csv").read_text().splitlines()
    header = gallery[0].split(",")
    keep = [i for i, h in enumerate(header) if h != "track"]
    stripped = tmp_path / "gallery.csv"
    stripped.write_text(
        "\n".join(",".join(line.split(",")[i] for i in keep) for line in gallery) + "\n"
    )
    # Manifest paths are relative to the manifest file, so mirror the images.
    os.symlink(workspace / "data" / "images", tmp_path / "images")
    ev = run_cli(
        "evaluate",
        "--checkpoint", str(workspace / "run" / "model.ckpt"),
        "--query", str(workspace / "data" / "query.csv"),
        "--gallery", str(stripped),
        "--out", str(tmp_path / "m.json"),
    )
    assert ev.returncode == 0, ev.stderr
    payload = json.loads(ev.stdout)
    assert "tmAP" not in payload
    assert "track" in ev.stderr.lower()


def test_evaluate_duplicated_gallery_matches_doubling(workspace, tmp_path):
    gallery_lines = (workspace / "data" / "gallery.csv").read_text().splitlines()
    doubled = tmp_path / "gallery.csv"
    doubled.write_text("\n".join([gallery_lines[0]] + gallery_lines[1:] * 2) + "\n")
    os.symlink(workspace / "data" / "images", tmp_path / "images")
    base = run_cli(
        "evaluate",
        "--checkpoint", str(workspace / "run" / "model.ckpt"),
        "--query", str(workspace / "data" / "query.csv"),
        "--gallery", str(workspace / "data" / "gallery.csv"),
        "--out", str(tmp_path / "a.json"),
    )
    dup = run_cli(
        "evaluate",
        "--checkpoint", str(workspace / "run" / "model.ckpt"),
        "--query", str(workspace / "data" / "query.csv"),
        "--gallery", str(doubled),
        "--out", str(tmp_path / "b.json"),
    )
    assert base.returncode == 0 and dup.returncode == 0
    base_ap = json.loads(base.stdout)["imAP"]
    dup_ap = json.loads(dup.stdout)["imAP"]
    # Doubling every gallery row keeps each query's precision profile:
    # every rank r becomes ranks 2r-1, 2r with the same hit pattern, so AP
    # changes but remains within the analytic doubling bounds; here we just
    # require determinism of the doubled run and sane range.
    assert 0.0 <= dup_ap <= 1.0
    dup2 = run_cli(
        "evaluate",
        "--checkpoint", str(workspace / "run" / "model.ckpt"),
        "--query", str(workspace / "data" / "query.csv"),
        "--gallery", str(doubled),
        "--out", str(tmp_path / "c.json"),
    )
    assert json.loads(dup2.stdout)["imAP"] == dup_ap
    assert abs(dup_ap - base_ap) < 0.35


def test_visualize_attention_outputs(workspace, tmp_path):
    image = sorted((workspace / "data" / "images").glob("gallery_*.ppm"))[0]
    vis = tmp_path / "vis"
    res = run_cli(
        "visualize-attention",
        "--checkpoint", str(workspace / "run" / "model.ckpt"),
        "--out", str(vis),
        str(image),
    )
    assert res.returncode == 0, res.stderr
    payload = json.loads(res.stdout)
    assert -1.0 <= payload["rotation_consistency"] <= 1.0
    name = image.name.rsplit(".", 1)[0]
    mask = read_image(vis / f"{name}.mask.pgm")
    assert mask.shape == (4, 4)  # 32/8
    overlay = read_image(vis / f"{name}.overlay.ppm")
    assert overlay.shape == (3, 32, 32)
    for angle in (90, 180, 270):
        assert (vis / f"{name}.rot{angle}.overlay.ppm").exists()


def test_visualize_size_mismatch_exits_1(workspace, tmp_path):
    from geomattn.imageio import write_ppm

    # The network is fully convolutional, so any multiple of 8 works; a
    # 20x20 image cannot be reduced by the three stride-2 stages cleanly.
    bad = tmp_path / "wrong.ppm"
    write_ppm(bad, np.zeros((3, 20, 20)))
    res = run_cli(
        "visualize-attention",
        "--checkpoint", str(workspace / "run" / "model.ckpt"),
        "--out", str(tmp_path / "vis"),
        str(bad),
    )
    assert res.returncode == 1


def test_gradcheck_command(workspace):
    res = run_cli("gradcheck")
    assert res.returncode == 0, res.stdout + res.stderr
    assert "composite_loss" in res.stdout
    assert "worst" in res.stdout
