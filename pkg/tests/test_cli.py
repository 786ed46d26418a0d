import json
import os

import numpy as np
import pytest

from eitkit.cli import main


def run_cli(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    code = run_cli(
        "simulate", "--case", "case1", "--seed", "7",
        "--fine-nodes", "900", "--coarse-nodes", "450", "--out", str(out),
    )
    assert code == 0
    return out


@pytest.fixture(scope="module")
def recon_dir(tmp_path_factory, sim_dir):
    out = tmp_path_factory.mktemp("recon")
    code = run_cli(
        "recon", "--method", "phync", "--seed", "3", "--iters", "8",
        "--mesh", str(sim_dir / "coarse_mesh.json"),
        "--measurements", str(sim_dir / "measurements.json"),
        "--out", str(out),
    )
    assert code == 0
    return out


def test_mesh_command(tmp_path):
    out = tmp_path / "m"
    assert run_cli("mesh", "--target-nodes", "500", "--out", str(out)) == 0
    data = json.loads((out / "mesh.json").read_text())
    assert set(data) == {"nodes", "elements", "electrodes"}
    snapshot = json.loads((out / "config.json").read_text())
    assert snapshot["command"] == "mesh"
    assert snapshot["target_nodes"] == 500


def test_simulate_outputs(sim_dir):
    for name in ("fine_mesh.json", "coarse_mesh.json", "ground_truth.json",
                 "measurements.json", "config.json"):
        assert (sim_dir / name).exists()
    meas = json.loads((sim_dir / "measurements.json").read_text())
    assert meas["meta"]["snr_db"] == 60.0
    assert len(meas["patterns"]["injections"]) == 54
    assert "voltages_clean" in meas


def test_recon_and_eval_pipeline(tmp_path, sim_dir, recon_dir):
    result = json.loads((recon_dir / "result.json").read_text())
    assert set(result) == {"method", "sigma", "loss_history", "seed", "config"}
    assert result["method"] == "phync"
    assert len(result["loss_history"]) == 8
    assert (recon_dir / "state.npz").exists()

    eval_dir = tmp_path / "eval"
    code = run_cli("eval", "--run", str(recon_dir), "--truth", str(sim_dir),
                   "--out", str(eval_dir))
    assert code == 0
    report = json.loads((eval_dir / "report.json").read_text())
    assert set(report) == {"psnr", "ssim", "fbc", "notes"}
    assert len(report["fbc"]) == 5
    assert np.isfinite(report["psnr"])


def test_recon_rerun_from_snapshot_byte_identical(tmp_path, sim_dir, recon_dir):
    rerun = tmp_path / "rerun"
    code = run_cli("recon", "--config", str(recon_dir / "config.json"), "--out", str(rerun))
    assert code == 0
    assert (rerun / "result.json").read_bytes() == (recon_dir / "result.json").read_bytes()


def test_simulate_rerun_from_snapshot_byte_identical(tmp_path, sim_dir):
    rerun = tmp_path / "rerun_sim"
    code = run_cli("simulate", "--config", str(sim_dir / "config.json"), "--out", str(rerun))
    assert code == 0
    for name in ("fine_mesh.json", "measurements.json", "ground_truth.json"):
        assert (rerun / name).read_bytes() == (sim_dir / name).read_bytes()


def test_tv_recon_pipeline(tmp_path, sim_dir):
    out = tmp_path / "tv"
    code = run_cli(
        "recon", "--method", "tv", "--seed", "0",
        "--mesh", str(sim_dir / "coarse_mesh.json"),
        "--measurements", str(sim_dir / "measurements.json"),
        "--out", str(out), "--config", json_config(tmp_path, {"tv_max_iters": 3}),
    )
    assert code == 0
    eval_dir = tmp_path / "tv_eval"
    assert run_cli("eval", "--run", str(out), "--truth", str(sim_dir),
                   "--out", str(eval_dir)) == 0


def json_config(tmp_path, payload):
    path = tmp_path / "override.json"
    path.write_text(json.dumps(payload))
    return str(path)


def test_missing_input_exits_2(tmp_path):
    code = run_cli("recon", "--method", "ffp", "--mesh", "/nonexistent.json",
                   "--measurements", "/nonexistent2.json", "--out", str(tmp_path / "x"))
    assert code == 2


def test_bad_method_exits_2(tmp_path, sim_dir):
    code = run_cli(
        "recon", "--method", "zzz",
        "--mesh", str(sim_dir / "coarse_mesh.json"),
        "--measurements", str(sim_dir / "measurements.json"),
        "--out", str(tmp_path / "x"),
    )
    assert code == 2


def test_plot_commands(tmp_path, sim_dir, recon_dir):
    out = tmp_path / "plots"
    assert run_cli("plot", "--kind", "field", "--mesh", str(sim_dir / "fine_mesh.json"),
                   "--values", str(sim_dir / "ground_truth.json"), "--out", str(out)) == 0
    assert (out / "field.png").exists() and (out / "field.csv").exists()

    out2 = tmp_path / "plots2"
    assert run_cli("plot", "--kind", "levels", "--mesh", str(sim_dir / "coarse_mesh.json"),
                   "--out", str(out2)) == 0
    assert (out2 / "levels.png").exists() and (out2 / "levels.csv").exists()
    assert (out2 / "levelmap.json").exists()

    out3 = tmp_path / "plots3"
    assert run_cli("plot", "--kind", "spectrum", "--mesh", str(sim_dir / "fine_mesh.json"),
                   "--values", str(sim_dir / "ground_truth.json"), "--out", str(out3)) == 0
    assert (out3 / "spectrum.png").exists()
    assert (out3 / "spectrum_radial.csv").exists()

    out4 = tmp_path / "plots4"
    assert run_cli("plot", "--kind", "sensitivity", "--mesh", str(sim_dir / "coarse_mesh.json"),
                   "--measurements", str(sim_dir / "measurements.json"),
                   "--method", "phync", "--out", str(out4)) == 0
    assert (out4 / "sensitivity.png").exists() and (out4 / "sensitivity.csv").exists()


def test_sweep_distance_small(tmp_path):
    out = tmp_path / "sweep"
    code = run_cli(
        "sweep-distance", "--methods", "hash", "--seeds", "1",
        "--distances", "0.16,0.2,0.24,0.28,0.32,0.36,0.4",
        "--iters", "4", "--fine-nodes", "700", "--coarse-nodes", "400",
        "--out", str(out),
    )
    assert code == 0
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 7  # header + 7 distances x 1 method x 1 seed
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["methods"]["hash"]["breakpoints"]) == 2


def test_sweep_mesh_small(tmp_path):
    out = tmp_path / "sweepm"
    code = run_cli(
        "sweep-mesh", "--methods", "hash", "--seeds", "1",
        "--node-counts", "300,400,500,600,700", "--sim-nodes", "900",
        "--iters", "4", "--out", str(out),
    )
    assert code == 0
    rows = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 5
    summary = json.loads((out / "summary.json").read_text())
    assert len(summary["methods"]["hash"]["breakpoints"]) == 1
