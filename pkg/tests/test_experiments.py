"""End-to-end harness checks on a deliberately tiny configuration: every CLI
subcommand runs, outputs have the documented formats, and reruns with the
same seed are byte-identical."""

import json
from pathlib import Path

import numpy as np
import pytest

from vam.cli import main
from vam.config import RunConfig, logit_spaced_grid
from vam.ppm import read_ppm
from vam.training import read_csv


def tiny_config(tmp, seed=3):
    cfg = RunConfig()
    cfg.seed = seed
    cfg.video.n_layers = 2
    cfg.video.d = 32
    cfg.video.n_heads = 2
    cfg.video.layer_k = 1
    cfg.video.h_o = 2
    cfg.video.h_f = 3
    cfg.video.d_t = 16
    cfg.decoder.n_layers = 1
    cfg.decoder.d = 24
    cfg.decoder.n_heads = 2
    cfg.decoder.h_a = 4
    cfg.decoder.d_t = 16
    cfg.data.episodes_per_task_a = 2
    cfg.data.episodes_per_task_b = 2
    cfg.data.episodes_per_task_heldout = 2
    cfg.video_train.steps = 6
    cfg.video_train.batch = 4
    cfg.video_train.warmup = 2
    cfg.video_train.log_every = 100
    cfg.video_train.lora_steps = 4
    cfg.decoder_train.steps = 6
    cfg.decoder_train.batch = 4
    cfg.decoder_train.warmup = 2
    cfg.decoder_train.ckpt_every = 3
    cfg.decoder_train.log_every = 100
    cfg.eval.n_rollouts = 2
    cfg.eval.max_steps = 12
    cfg.eval.n_action_steps = 3
    cfg.eval.video_steps_full = 3
    cfg.sweep.tau_grid = (0.5, 1.0)
    cfg.sweep.mse_grid_points = 3
    cfg.sweep.mse_windows = 8
    cfg.sweep.fractions = (0.5, 1.0)
    path = tmp / "config.json"
    path.write_text(cfg.to_json())
    return cfg, path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg, cfg_path = tiny_config(tmp)
    data = tmp / "data"
    assert main(["gen-data", "--config", str(cfg_path), "--out", str(data)]) == 0
    run = tmp / "run"
    assert main(["train-video", "--config", str(cfg_path),
                 "--data-dir", str(data / "dataset_A"), "--out", str(run)]) == 0
    assert main(["train-decoder", "--config", str(cfg_path),
                 "--data-dir", str(data / "dataset_B"),
                 "--video", str(run / "video.ckpt"), "--out", str(run)]) == 0
    return tmp, cfg, cfg_path, data, run


def test_gen_data_layout(workspace):
    tmp, cfg, _, data, _ = workspace
    for name, n_tasks in (("dataset_A", 6), ("dataset_B", 4),
                          ("dataset_B_heldout", 4)):
        manifest = json.loads((data / name / "manifest.json").read_text())
        assert manifest["n_episodes"] == 2 * n_tasks
        files = list((data / name).glob("*.epz"))
        assert len(files) == manifest["n_episodes"]


def test_training_artifacts(workspace):
    _, cfg, _, _, run = workspace
    assert (run / "video.ckpt").exists()
    assert (run / "decoder.ckpt").exists()
    header, rows = read_csv(run / "video_loss.csv")
    assert header == ["step", "loss"]
    assert len(rows) == cfg.video_train.steps
    first = Path(run / "video_loss.csv").read_text().splitlines()[0]
    assert first.startswith("# config_hash=") and "seed=" in first
    # periodic checkpoints for convergence curves
    periodic = sorted(run.glob("decoder_step*.ckpt"))
    assert len(periodic) == 1  # step 3 of 6
    header, rows = read_csv(run / "tau_draws.csv")
    assert header == ["tau_v", "tau_a"]
    taus = np.array([[float(a), float(b)] for a, b in rows])
    assert np.all((taus[:, 0] > 0) & (taus[:, 0] < 1))
    assert np.all((taus[:, 1] >= 0.001) & (taus[:, 1] <= 1.0))


def test_resume_reproduces_training_bitwise(workspace, tmp_path):
    tmp, cfg, cfg_path, data, run = workspace
    # full run from scratch in two segments
    seg = tmp_path / "seg"
    assert main(["train-video", "--config", str(cfg_path),
                 "--data-dir", str(data / "dataset_A"), "--out", str(seg),
                 "--steps", "3"]) == 0
    assert main(["train-video", "--config", str(cfg_path),
                 "--data-dir", str(data / "dataset_A"), "--out", str(seg),
                 "--steps", "6",
                 "--resume", str(seg / "video_state.ckpt")]) == 0
    whole = (run / "video.ckpt").read_bytes()
    split = (seg / "video.ckpt").read_bytes()
    assert whole == split


def test_eval_outputs_and_determinism(workspace, tmp_path):
    tmp, cfg, cfg_path, data, run = workspace
    out1, out2 = tmp_path / "e1", tmp_path / "e2"
    for out in (out1, out2):
        assert main(["eval", "--config", str(cfg_path),
                     "--video", str(run / "video.ckpt"),
                     "--decoder", str(run / "decoder.ckpt"),
                     "--tau-v", "1.0", "--out", str(out)]) == 0
    assert (out1 / "eval_report.csv").read_bytes() == \
        (out2 / "eval_report.csv").read_bytes()
    header, rows = read_csv(out1 / "eval_report.csv")
    assert header[:4] == ["task_id", "n_rollouts", "successes", "success_rate"]
    assert rows[-1][0] == "avg"
    # fast path: exactly one backbone forward per chunk at tau_v = 1
    assert all(int(r[-1]) == 1 for r in rows)


def test_eval_zero_rollouts_empty_report(workspace, tmp_path):
    _, cfg, cfg_path, _, run = workspace
    out = tmp_path / "e0"
    assert main(["eval", "--config", str(cfg_path),
                 "--video", str(run / "video.ckpt"),
                 "--decoder", str(run / "decoder.ckpt"),
                 "--n-rollouts", "0", "--out", str(out)]) == 0
    header, rows = read_csv(out / "eval_report.csv")
    for row in rows:
        if row[0] != "avg":
            assert int(row[1]) == 0


def test_eval_oracle_curve_and_report(workspace, tmp_path):
    _, cfg, cfg_path, data, run = workspace
    out = tmp_path / "oracle"
    assert main(["eval-oracle", "--config", str(cfg_path),
                 "--video", str(run / "video.ckpt"),
                 "--decoder", str(run / "decoder.ckpt"),
                 "--heldout-dir", str(data / "dataset_B_heldout"),
                 "--out", str(out)]) == 0
    header, rows = read_csv(out / "oracle_mse_curve.csv")
    assert header == ["tau_v", "action_mse", "stderr"]
    assert len(rows) == cfg.sweep.mse_grid_points
    taus = [float(r[0]) for r in rows]
    assert taus == sorted(taus)
    assert all(float(r[2]) >= 0 for r in rows)
    header, rows = read_csv(out / "oracle_eval_report.csv")
    assert rows[-1][0] == "avg"


def test_sweep_tau_includes_fast_path(workspace, tmp_path):
    _, cfg, cfg_path, _, run = workspace
    out = tmp_path / "sweep"
    assert main(["sweep-tau", "--config", str(cfg_path),
                 "--video", str(run / "video.ckpt"),
                 "--decoder", str(run / "decoder.ckpt"),
                 "--out", str(out)]) == 0
    header, rows = read_csv(out / "sweep_tau.csv")
    taus = {float(r[0]) for r in rows}
    assert 1.0 in taus
    # binomial stderr formula
    for r in rows:
        if r[1] == "avg":
            continue
        n, sr, se = cfg.eval.n_rollouts, float(r[2]) / 100, float(r[3]) / 100
        assert se == pytest.approx(np.sqrt(sr * (1 - sr) / n), abs=1e-9)
    header, best = read_csv(out / "best_tau.csv")
    assert len(best) == 4
    # argmax dominance: per-task best >= value at the default tau_v
    by_task = {}
    for r in rows:
        if r[1] != "avg":
            by_task.setdefault(r[1], {})[float(r[0])] = float(r[2])
    for tid, tau, sr in ((r[0], float(r[1]), float(r[2])) for r in best):
        assert sr >= by_task[tid][1.0] - 1e-9


def test_render_rollout_ppm_contract(workspace, tmp_path):
    _, cfg, cfg_path, _, run = workspace
    out = tmp_path / "frames"
    assert main(["render-rollout", "--config", str(cfg_path),
                 "--video", str(run / "video.ckpt"),
                 "--decoder", str(run / "decoder.ckpt"),
                 "--task", "8", "--out", str(out)]) == 0
    exec_frames = sorted(out.glob("exec_*.ppm"))
    plan_frames = sorted(out.glob("plan_*.ppm"))
    assert exec_frames, "no executed frames dumped"
    n_chunks = len({p.name.split("_")[1] for p in plan_frames})
    assert len(plan_frames) == n_chunks * cfg.video.h_f
    for p in list(exec_frames)[:2] + list(plan_frames)[:2]:
        img = read_ppm(p)
        assert img.shape == (32, 32, 3)


def test_train_baseline_and_parameter_parity(workspace, tmp_path):
    _, cfg, cfg_path, data, run = workspace
    out = tmp_path / "baseline"
    assert main(["train-baseline", "--config", str(cfg_path),
                 "--data-dir", str(data / "dataset_B"), "--out", str(out)]) == 0
    assert (out / "baseline_encoder.ckpt").exists()
    assert (out / "baseline_decoder.ckpt").exists()

    from vam.training import load_backbone, load_decoder
    enc = load_backbone(cfg, out / "baseline_encoder.ckpt")
    dec = load_decoder(cfg, out / "baseline_decoder.ckpt")
    vam_backbone = load_backbone(cfg, run / "video.ckpt")
    vam_decoder = load_decoder(cfg, run / "decoder.ckpt")
    n_base = enc.n_parameters() + dec.n_parameters()
    n_vam = vam_backbone.n_parameters() + vam_decoder.n_parameters()
    assert abs(n_base - n_vam) / n_vam < 0.05


def test_lora_cli_keeps_base_hash(workspace, tmp_path):
    _, cfg, cfg_path, data, run = workspace
    out = tmp_path / "lora"
    assert main(["train-video", "--config", str(cfg_path),
                 "--data-dir", str(data / "dataset_B"), "--out", str(out),
                 "--lora", "--base", str(run / "video.ckpt")]) == 0
    from vam.checkpoint import load_checkpoint
    base = load_checkpoint(run / "video.ckpt")
    tuned = load_checkpoint(out / "video_lora.ckpt")
    for name, arr in base.items():
        np.testing.assert_array_equal(tuned[name], arr, err_msg=name)
    assert any("lora" in k for k in tuned)


def test_gen_data_rerun_bit_identical(workspace, tmp_path):
    _, _, cfg_path, data, _ = workspace
    out = tmp_path / "data2"
    assert main(["gen-data", "--config", str(cfg_path), "--family", "B",
                 "--out", str(out)]) == 0
    for p in sorted((data / "dataset_B").glob("*")):
        q = out / "dataset_B" / p.name
        assert q.read_bytes() == p.read_bytes(), p.name


def test_config_file_roundtrip_and_hash(tmp_path):
    cfg, path = tiny_config(tmp_path)
    loaded = RunConfig.load(path)
    assert loaded.to_json() == cfg.to_json()
    assert loaded.config_hash() == cfg.config_hash()
    with pytest.raises(KeyError):
        RunConfig.from_dict({"nonsense": {}})
    with pytest.raises(KeyError):
        RunConfig.from_dict({"video": {"bogus_field": 1}})


def test_logit_spaced_grid_shape():
    grid = logit_spaced_grid(0.01, 0.99, 9)
    assert len(grid) == 9
    assert grid[0] == pytest.approx(0.01, abs=1e-9)
    assert grid[-1] == pytest.approx(0.99, abs=1e-9)
    assert grid[4] == pytest.approx(0.5, abs=1e-9)
    assert grid == sorted(grid)
