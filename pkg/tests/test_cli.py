"""The fshgr command-line tool: exit codes, manifests, reruns and config precedence."""

import json
import logging

import numpy as np
import pytest

from fshgr import tensor as T
from fshgr.checkpoint import save_checkpoint
from fshgr.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main, resolve_options
from fshgr.layers import init_params, load_model_config
from fshgr.preprocessing import load_norm_stats


def run(argv):
    """Exit code of ``fshgr argv``; argparse usage errors arrive as SystemExit."""
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:
        return exc.code


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert run(["synth", "--subjects", 6, "--gestures", 6, "--duration", 1, "--seed", 7, "--out", root]) == EXIT_OK
    return root


@pytest.fixture(scope="module")
def trained(data):
    out = data.parent / "run"
    argv = ["train", "--data", data, "--scenario", "new-subjects", "--n", 5, "--k", 1, "--embedding", "tblock1",
            "--out", out, "--max-steps", 2, "--eval-every", 1, "--eval-episodes", 10, "--batch-size", 4, "--workers", 1]
    assert run(argv) == EXIT_OK
    return out


# --- synth --------------------------------------------------------------------------


def test_synth_480_files_and_identical_rerun(tmp_path):
    argv = ["synth", "--subjects", 8, "--gestures", 10, "--reps", 6, "--seed", 7, "--duration", 0.05]
    assert run(argv + ["--out", tmp_path / "a"]) == EXIT_OK
    assert run(argv + ["--out", tmp_path / "b"]) == EXIT_OK
    assert len(list((tmp_path / "a").rglob("*.fse"))) == 480
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma["metrics"]["files"] == 480
    assert ma["metrics"]["tree_sha256"] == mb["metrics"]["tree_sha256"]


def test_synth_prints_catalog_summary(tmp_path, capsys):
    run(["synth", "--subjects", 2, "--gestures", 3, "--reps", 6, "--duration", 0.05, "--out", tmp_path])
    assert "36 recordings: 2 subjects, 3 gestures, 6 repetitions" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["synth", "--gestures", 0, "--out", "x"],
        ["synth", "--gestures", "many", "--out", "x"],
        ["synth"],
        ["train", "--data", "d", "--out", "o", "--embedding", "bogus"],
        ["train", "--data", "d", "--out", "o", "--lr", 0],
        ["eval", "--checkpoint", "c", "--data", "d", "--episodes", 0],
        ["frobnicate"],
    ],
)
def test_usage_errors_exit_1(tmp_path, monkeypatch, argv):
    monkeypatch.chdir(tmp_path)
    assert run(argv) == EXIT_USAGE


def test_bogus_embedding_lists_choices(capsys):
    run(["train", "--data", "d", "--out", "o", "--embedding", "bogus"])
    err = capsys.readouterr().err
    for kind in ("fc", "lstm", "tblock1", "tblock2"):
        assert kind in err


# --- train / eval ------------------------------------------------------------------------


def test_train_writes_artifacts(trained):
    for name in ("manifest.json", "model.fsh", "model.cfg", "report.txt", "summary.json", "scale.fsn", "minmax.fsn"):
        assert (trained / name).exists(), name
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["resolved"]["embedding"] == "tblock1"
    assert manifest["resolved"]["lr"] == 1e-4 and manifest["resolved"]["max_steps"] == 2
    assert manifest["metrics"]["batch_size"] == 4
    assert load_model_config(trained / "model.cfg").embedding.kind == "tblock1"
    assert load_norm_stats(trained / "scale.fsn").channels == 12
    lines = (trained / "report.txt").read_text().splitlines()
    assert lines[0].startswith("step=0 split=meta_val") and lines[-1].startswith("step=")


def test_ten_way_five_shot_uses_batch_32(tmp_path):
    data = tmp_path / "d"
    assert run(["synth", "--subjects", 2, "--gestures", 10, "--duration", 0.5, "--out", data]) == EXIT_OK
    out = tmp_path / "r"
    argv = ["train", "--data", data, "--scenario", "new-repetitions", "--n", 10, "--k", 5, "--out", out,
            "--max-steps", 0, "--eval-episodes", 2]
    assert run(argv) == EXIT_OK
    assert json.loads((out / "manifest.json").read_text())["metrics"]["batch_size"] == 32
    assert run(argv[:-4] + ["--out", tmp_path / "r2", "--max-steps", 0, "--eval-episodes", 2, "--batch-size", 8]) == EXIT_OK
    assert json.loads((tmp_path / "r2" / "manifest.json").read_text())["metrics"]["batch_size"] == 8


def test_infeasible_episode_shape_is_data_error(data, tmp_path, capsys):
    argv = ["train", "--data", data, "--n", 9, "--k", 1, "--out", tmp_path / "r", "--max-steps", 1]
    assert run(argv) == EXIT_DATA
    assert "no subject has 9 gestures" in capsys.readouterr().err
    assert not (tmp_path / "r" / "model.fsh").exists()


def test_eval_twice_identical(trained, data, capsys):
    argv = ["eval", "--checkpoint", trained / "model.fsh", "--data", data, "--episodes", 40, "--seed", 3]
    assert run(argv) == EXIT_OK
    first = capsys.readouterr().out
    assert run(argv) == EXIT_OK
    assert capsys.readouterr().out == first
    assert "accuracy=" in first and "+-" in first
    assert (trained / "eval_test_seed3.fsep").exists()


def test_random_checkpoint_near_chance(trained, data, tmp_path, capsys):
    cfg = load_model_config(trained / "model.cfg")
    ckpt = tmp_path / "model.fsh"
    save_checkpoint(ckpt, init_params(cfg, np.random.default_rng(99)))
    (tmp_path / "model.cfg").write_text((trained / "model.cfg").read_text())
    assert run(["eval", "--checkpoint", ckpt, "--data", data, "--scenario", "new-subjects", "--episodes", 1000]) == EXIT_OK
    m = json.loads((tmp_path / "eval_test_seed0.manifest.json").read_text())
    assert abs(m["metrics"]["accuracy"] - 0.2) <= 0.04


def test_checkpoint_config_mismatch(trained, data, tmp_path, capsys):
    cfg_text = (trained / "model.cfg").read_text().replace("out_dim = 128", "out_dim = 64")
    (tmp_path / "other.cfg").write_text(cfg_text)
    argv = ["eval", "--checkpoint", trained / "model.fsh", "--model-config", tmp_path / "other.cfg", "--data", data,
            "--replay-out", tmp_path / "r.fsep"]
    assert run(argv) == EXIT_DATA
    err = capsys.readouterr().err
    assert "does not match config" in err and "shape" in err


def test_corrupt_checkpoint_and_missing_data(trained, data, tmp_path):
    (tmp_path / "model.fsh").write_bytes(b"junk")
    (tmp_path / "model.cfg").write_text((trained / "model.cfg").read_text())
    assert run(["eval", "--checkpoint", tmp_path / "model.fsh", "--data", data]) == EXIT_DATA
    assert run(["catalog", "--data", tmp_path / "missing"]) == EXIT_DATA


def test_replay_command_reproduces_eval(trained, data, capsys):
    run(["eval", "--checkpoint", trained / "model.fsh", "--data", data, "--episodes", 30, "--seed", 5])
    acc_line = [l for l in capsys.readouterr().out.splitlines() if "accuracy=" in l][0]
    accuracy = acc_line.split("accuracy=")[1].split()[0]
    assert run(["replay", "--replay", trained / "eval_test_seed5.fsep", "--data", data,
                "--checkpoint", trained / "model.fsh"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "episodes=30" in out and f"accuracy={accuracy}" in out


def test_preprocess_and_catalog(data, tmp_path, capsys):
    assert run(["catalog", "--data", data]) == EXIT_OK
    assert "216 recordings" in capsys.readouterr().out
    assert run(["preprocess", "--data", data, "--scenario", "new-gestures", "--out", tmp_path]) == EXIT_OK
    split = json.loads((tmp_path / "split.json").read_text())
    assert split["scenario"] == "new-gestures"
    assert load_norm_stats(tmp_path / "minmax.fsn").channels == 12


# --- manifests and reruns ------------------------------------------------------------------


def test_manifest_written_before_work(data, tmp_path, monkeypatch):
    import fshgr.cli as cli

    seen = {}

    def boom(o):
        seen["manifest"] = json.loads((tmp_path / "r" / "manifest.json").read_text())
        raise cli.NumericFailure("stop")

    monkeypatch.setitem(cli.COMMANDS, "train", boom)
    assert run(["train", "--data", data, "--out", tmp_path / "r"]) == EXIT_NUMERIC
    resolved = seen["manifest"]["resolved"]
    assert "metrics" not in seen["manifest"]
    assert resolved["batch_size"] is None and resolved["d_k"] == 64 and resolved["max_steps"] == 30000


def test_rerun_train_matches(trained, tmp_path, capsys):
    assert run(["rerun", "--manifest", trained / "manifest.json", "--out", tmp_path / "again"]) == EXIT_OK
    assert "metrics identical" in capsys.readouterr().out
    a = json.loads((trained / "manifest.json").read_text())["metrics"]
    b = json.loads((tmp_path / "again" / "manifest.json").read_text())["metrics"]
    assert a == b


def test_rerun_eval_in_place_keeps_manifest(trained, data):
    run(["eval", "--checkpoint", trained / "model.fsh", "--data", data, "--episodes", 20, "--seed", 11])
    path = trained / "eval_test_seed11.manifest.json"
    before = path.read_text()
    assert run(["rerun", "--manifest", path]) == EXIT_OK
    assert path.read_text() == before
    assert path.with_suffix(".rerun.json").exists()


def test_rerun_detects_changed_metrics(trained, data, tmp_path, capsys):
    run(["eval", "--checkpoint", trained / "model.fsh", "--data", data, "--episodes", 20, "--seed", 12,
         "--replay-out", tmp_path / "e.fsep"])
    path = tmp_path / "e.manifest.json"
    m = json.loads(path.read_text())
    m["metrics"]["accuracy"] += 0.5
    path.write_text(json.dumps(m))
    assert run(["rerun", "--manifest", path]) == EXIT_NUMERIC
    assert "accuracy" in capsys.readouterr().err


def test_rerun_bad_manifest(tmp_path):
    (tmp_path / "m.json").write_text("{not json")
    assert run(["rerun", "--manifest", tmp_path / "m.json"]) == EXIT_DATA
    assert run(["rerun", "--manifest", tmp_path / "none.json"]) == EXIT_USAGE


# --- configuration ----------------------------------------------------------------------------


def test_defaults_flags_config_precedence(tmp_path, caplog):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[run]\nseed = 5\n\n[train]\nlr = 0.002\nout = results\n")
    flags = {"data": "d", "out": "o", "seed": 3, "n": 10}
    with caplog.at_level(logging.WARNING, logger="fshgr"):
        o = resolve_options("train", flags, cfg)
    assert o["seed"] == 5 and o["lr"] == 0.002 and o["n"] == 10 and o["k"] == 1
    assert o["out"] == str((tmp_path / "results").resolve())
    assert any("seed" in r.message and "overriding" in r.message for r in caplog.records)
    assert any("out" in r.message for r in caplog.records)


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nembedding = bogus\n")
    assert run(["train", "--data", "d", "--out", "o", "--config", bad]) == EXIT_USAGE
    bad.write_text("[train]\nfavourite_colour = blue\n")
    assert run(["train", "--data", "d", "--out", "o", "--config", bad]) == EXIT_USAGE
    assert run(["train", "--data", "d", "--out", "o", "--config", tmp_path / "nope.ini"]) == EXIT_USAGE


def test_workers_env_fallback(monkeypatch):
    monkeypatch.setenv("FSHGR_WORKERS", "3")
    assert resolve_options("train", {"data": "d", "out": "o"})["workers"] == 3
    assert resolve_options("train", {"data": "d", "out": "o", "workers": 2})["workers"] == 2
    monkeypatch.setenv("FSHGR_WORKERS", "zero")
    assert run(["train", "--data", "d", "--out", "o"]) == EXIT_USAGE
    monkeypatch.delenv("FSHGR_WORKERS")
    assert resolve_options("train", {"data": "d", "out": "o"})["workers"] >= 1


# --- gradcheck -------------------------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_gradcheck_passes_across_seeds(seed, capsys):
    assert run(["gradcheck", "--seed", seed]) == EXIT_OK
    out = capsys.readouterr().out
    assert "21/21 passed" in out and "FAIL" not in out


def test_gradcheck_names_broken_op(monkeypatch, capsys):
    def bad_scale(x, c):
        x = T._as_tensor(x)
        c = float(c)
        return T._make(x.data * c, (x,), lambda g: (g * c * 1.01,), "scale")

    monkeypatch.setattr(T, "scale", bad_scale)
    assert run(["gradcheck"]) == EXIT_NUMERIC
    captured = capsys.readouterr()
    assert "gradient check failed for: " in captured.err and "scale" in captured.err.split("failed for:")[1]
    assert "matmul " in captured.out and "ok" in captured.out
