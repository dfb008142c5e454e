import json
import struct

import numpy as np
import pytest

from jpmap.cli import build_parser, echo_to_argv, main, train_config_from_args
from jpmap.experiments import parse_experiment_csv
from jpmap.vae import load_model

TIMING = {"timing.txt", "sweep.timing.csv"}


def run(*argv):
    return main([str(a) for a in argv])


def outputs(directory):
    """Every output file's bytes, keyed by name, except wall-clock sidecars."""
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())
            if p.is_file() and p.name not in TIMING}


@pytest.fixture(scope="module")
def tiny_model(tmp_path_factory, data_dir):
    out = tmp_path_factory.mktemp("tiny")
    assert run("train", "--epochs", 2, "--subset", 256, "--lr", 1e-3, "--seed", 3,
               "--data-dir", data_dir, "--out", out) == 0
    return out / "model.txt"


FAST_SOLVER = ["--n-min", 1, "--n-max", 3, "--gd-iters", 20, "--csgm-iters", 30]


def test_train_is_deterministic(tmp_path, data_dir):
    for name in ("a", "b"):
        assert run("train", "--epochs", 1, "--subset", 128, "--seed", 5,
                   "--data-dir", data_dir, "--out", tmp_path / name) == 0
    a, b = outputs(tmp_path / "a"), outputs(tmp_path / "b")
    assert set(a) == {"config.json", "loss.csv", "model.txt", "model.bin"}
    assert a == b
    loss = (tmp_path / "a" / "loss.csv").read_text().splitlines()
    assert loss[0] == "epoch,loss,smoothed" and len(loss) == 2


def test_profiles_expand():
    full, subset = train_config_from_args(build_parser().parse_args(
        ["train", "--profile", "paper", "--out", "x"]))
    assert (full.batch_size, full.epochs, full.lr, full.lr_halving_period) == \
        (64, 400, 1e-4, 150)
    assert subset is None
    desk, subset = train_config_from_args(build_parser().parse_args(
        ["train", "--out", "x", "--seed", "9", "--epochs", "3"]))
    assert desk.epochs == 3 and desk.seed == 9 and subset == 10_000


def test_restore_is_deterministic_and_replayable(tmp_path, tiny_model, data_dir):
    argv = ["restore", "--model", tiny_model, "--task", "cs", "--m", 50, *FAST_SOLVER,
            "--seed", 2, "--data-dir", data_dir]
    assert run(*argv, "--out", tmp_path / "a") == 0
    assert run(*argv, "--out", tmp_path / "b") == 0
    a = outputs(tmp_path / "a")
    assert a == outputs(tmp_path / "b")
    assert {"restored.pgm", "panel.pgm", "report.csv", "report.txt", "restored.csv",
            "summary.json", "config.json"} <= set(a)
    assert (tmp_path / "a" / "timing.txt").exists()
    # five 28-pixel rows with 2-pixel gaps
    assert a["panel.pgm"].startswith(b"P5\n28 148\n255\n")

    assert run("replay", "--config", tmp_path / "a" / "config.json",
               "--out", tmp_path / "c") == 0
    assert outputs(tmp_path / "c") == a

    summary = json.loads(a["summary.json"])
    assert set(summary["mse"]) == {"jpmap", "csgm", "vae_reconstruction", "init"}
    assert summary["derived"]["degradation"]["recipe"]["m"] == 50


@pytest.mark.parametrize("solver", ["alg1", "alg2", "csgm"])
def test_restore_solvers(tmp_path, tiny_model, data_dir, solver):
    assert run("restore", "--model", tiny_model, "--task", "inpainting", "--solver", solver,
               *FAST_SOLVER, "--data-dir", data_dir, "--out", tmp_path) == 0
    assert (tmp_path / "restored.pgm").stat().st_size == len(b"P5\n28 28\n255\n") + 784


def test_denoise_near_noiseless(tmp_path, tiny_model, data_dir):
    assert run("restore", "--model", tiny_model, "--task", "denoise", "--sigma", 1e-6,
               *FAST_SOLVER, "--data-dir", data_dir, "--out", tmp_path) == 0
    mse = json.loads((tmp_path / "summary.json").read_text())["mse"]
    assert float(mse["jpmap"]) < 1e-4


def test_sweep_rows_and_aggregates(tmp_path, tiny_model, data_dir):
    csv = tmp_path / "s.csv"
    argv = ["sweep", "--model", tiny_model, "--m-list", "25,60", "--images", 3, *FAST_SOLVER,
            "--data-dir", data_dir]
    assert run(*argv, "--out", csv) == 0
    text = csv.read_text()
    images, aggregates = parse_experiment_csv(text)
    assert len(text.strip().splitlines()) == 1 + 2 * 3 + 2
    assert len(images) == 6 and len(aggregates) == 2
    for agg in aggregates:
        rows = [r for r in images if r["m"] == agg["m"]]
        assert int(agg["count"]) == len(rows) == 3
        for key in ("mse_jpmap", "mse_csgm", "mse_vae_reconstruction"):
            values = [float(r[key]) for r in rows]
            assert all(v >= 0 for v in values)
            assert float(agg[key]) == pytest.approx(np.mean(values), rel=1e-15)
    assert (tmp_path / "s.config.json").exists()
    assert (tmp_path / "s.timing.csv").exists()
    assert run(*argv, "--out", tmp_path / "again.csv") == 0
    assert (tmp_path / "again.csv").read_bytes() == csv.read_bytes()
    assert run("replay", "--config", tmp_path / "s.config.json",
               "--out", tmp_path / "replayed.csv") == 0
    assert (tmp_path / "replayed.csv").read_bytes() == csv.read_bytes()


def test_validate_a2(tmp_path, tiny_model, data_dir):
    argv = ["validate-a2", "--model", tiny_model, "--starts", 3, "--iters", 25,
            "--data-dir", data_dir]
    assert run(*argv, "--out", tmp_path / "a") == 0
    assert run(*argv, "--out", tmp_path / "b") == 0
    a = outputs(tmp_path / "a")
    assert a == outputs(tmp_path / "b")
    for kind in ("gaussian", "encoder_posterior"):
        for panel in ("energies", "distances", "summary"):
            assert f"{panel}_{kind}.csv" in a
    summary = a["summary_gaussian.csv"].decode().splitlines()
    assert summary[0] == "start,final_energy,success"
    assert summary[-1].startswith("fraction,")


def test_slice(tmp_path, tiny_model, data_dir):
    argv = ["slice", "--model", tiny_model, "--points", 5, "--data-dir", data_dir]
    assert run(*argv, "--out", tmp_path / "a.csv") == 0
    assert run(*argv, "--out", tmp_path / "b.csv") == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == "a,b,j1_coupling,j2_coupling" and len(lines) == 26
    assert run(*argv, "--seed", 1, "--out", tmp_path / "c.csv") == 0
    assert (tmp_path / "c.csv").read_bytes() != a


def test_echo_to_argv_roundtrip():
    args = build_parser().parse_args(["sweep", "--model", "m.txt", "--m-list", "5,6",
                                      "--out", "o.csv"])
    echo = {k: v for k, v in vars(args).items() if k not in ("out", "verbose", "func")}
    echo["derived"] = {"model_hash": "x"}
    again = build_parser().parse_args(echo_to_argv(echo) + ["--out", "o.csv"])
    assert vars(again) == vars(args)


# ---------------------------------------------------------------- exit codes

def test_missing_model_exits_1(tmp_path, data_dir, capsys):
    assert run("restore", "--model", tmp_path / "nope.txt", "--data-dir", data_dir,
               "--out", tmp_path / "o") == 1
    assert "jpmap:" in capsys.readouterr().err


def test_missing_data_exits_1(tmp_path):
    assert run("train", "--data-dir", tmp_path, "--out", tmp_path / "o") == 1


def test_bad_idx_exits_1(tmp_path, capsys):
    (tmp_path / "train-images-idx3-ubyte").write_bytes(struct.pack(">IIII", 0x802, 0, 28, 28))
    assert run("train", "--data-dir", tmp_path, "--out", tmp_path / "o") == 1
    assert "magic" in capsys.readouterr().err


def test_bad_parameter_exits_1(tmp_path, tiny_model, data_dir):
    assert run("restore", "--model", tiny_model, "--task", "cs", "--m", 0,
               "--data-dir", data_dir, "--out", tmp_path) == 1


def test_divergence_exits_2(tmp_path, data_dir, capsys):
    assert run("train", "--epochs", 1, "--subset", 128, "--lr", 1e6,
               "--data-dir", data_dir, "--out", tmp_path) == 2
    assert "numeric" in capsys.readouterr().err


def test_tiny_model_loads(tiny_model):
    assert load_model(tiny_model).z_dim == 12
