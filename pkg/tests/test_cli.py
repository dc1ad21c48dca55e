"""Command-line interface tests.

Every command is invoked through `main(argv)` in-process; exit codes follow
the contract 0 = success, 1 = config/flag/path problems, 2 = numeric failure.
"""

import json

import numpy as np
import pytest

from msam.cli import main
from msam.data import load_dataset
from msam.harness import resolve_config, run


def write_config(tmp_path, name="cfg.json", **kw):
    raw = {
        "seed": 0,
        "epochs": 2,
        "batch_size": 8,
        "data": {"classes": 3, "dims": [4, 3], "snr": [2.0, 0.5],
                 "n_train": 24, "n_val": 12, "n_test": 12},
        "model": {"hidden": [6], "width": 4},
        "optimizer": {"kind": "msam", "lr": 0.05, "momentum": 0.9, "rho": 0.1},
    }
    raw.update(kw)
    path = tmp_path / name
    path.write_text(json.dumps(raw))
    return path, raw


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    """One finished training run used by the diagnostics commands."""
    out = tmp_path_factory.mktemp("ckpt") / "run"
    path, _ = write_config(out.parent, out_dir=str(out))
    assert main(["train", "--config", str(path)]) == 0
    return out


# ----------------------------------------------------------------------- train


def test_train_config_file(tmp_path, capsys):
    out = tmp_path / "run"
    path, _ = write_config(tmp_path, out_dir=str(out))
    assert main(["train", "--config", str(path)]) == 0
    got = capsys.readouterr().out
    assert "msam:" in got and "train_acc=" in got and str(out) in got
    assert (out / "metrics.csv").exists()


def test_train_preset_with_seed(capsys):
    assert main(["train", "--preset", "default", "--seed", "1"]) == 0
    assert "msam:" in capsys.readouterr().out


def test_train_comparison_prints_each_kind(tmp_path, capsys):
    path, _ = write_config(tmp_path, comparison=["sgd", "msam"])
    assert main(["train", "--config", str(path)]) == 0
    got = capsys.readouterr().out
    assert "sgd:" in got and "msam:" in got


def test_train_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "absent.json"
    assert main(["train", "--config", str(missing)]) == 1
    assert str(missing) in capsys.readouterr().err


def test_train_config_and_preset_conflict(tmp_path, capsys):
    path, _ = write_config(tmp_path)
    assert main(["train", "--config", str(path), "--preset", "default"]) == 1
    assert "not both" in capsys.readouterr().err


def test_train_divergence_exits_2(tmp_path, capsys):
    path, _ = write_config(
        tmp_path,
        epochs=10,
        batch_size=32,
        data={"classes": 3, "dims": [6, 6], "snr": [2.0, 1.0],
              "n_train": 64, "n_val": 32, "n_test": 32},
        model={"hidden": [16], "width": 8},
        optimizer={"kind": "sgd", "lr": 1e4, "momentum": 0.9, "weight_decay": 0.0},
    )
    assert main(["train", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "numeric error" in err and "iteration" in err


def test_unknown_flag_exits_1():
    with pytest.raises(SystemExit) as e:
        main(["train", "--qux"])
    assert e.value.code == 1


def test_unknown_command_exits_1():
    with pytest.raises(SystemExit) as e:
        main(["tune"])
    assert e.value.code == 1


# ------------------------------------------------------------------- gradcheck


def test_gradcheck_passes_and_prints(capsys):
    assert main(["gradcheck", "--preset", "default"]) == 0
    got = capsys.readouterr().out
    assert "PASS" in got and "max_rel_err=" in got


def test_gradcheck_impossible_tol_exits_2(capsys):
    assert main(["gradcheck", "--preset", "default", "--tol", "1e-16"]) == 2
    captured = capsys.readouterr()
    assert "FAIL" in captured.out
    assert "numeric error" in captured.err


def test_gradcheck_rejects_bad_h(capsys):
    assert main(["gradcheck", "--preset", "default", "--h", "0.5"]) == 1


# ------------------------------------------------------------------- landscape


def test_landscape_writes_grid(checkpoint, capsys):
    assert main(["landscape", "--checkpoint", str(checkpoint),
                 "--radius", "0.5", "--res", "5", "--tag", "t"]) == 0
    assert "center loss" in capsys.readouterr().out
    rows = (checkpoint / "landscape_t.csv").read_text().strip().split("\n")
    assert len(rows) == 6  # header + res
    assert len(rows[1].split(",")) == 6
    sidecar = json.loads((checkpoint / "landscape_t.json").read_text())
    assert sidecar["resolution"] == 5 and sidecar["radius"] == 0.5
    assert np.isfinite(sidecar["center_loss"])


def test_landscape_validation(checkpoint, tmp_path):
    assert main(["landscape", "--checkpoint", str(checkpoint), "--radius", "-1"]) == 1
    assert main(["landscape", "--checkpoint", str(tmp_path / "empty")]) == 1
    assert main(["landscape", "--checkpoint", str(checkpoint), "--res", "4"]) == 1


# ---------------------------------------------------------------------- audit


def test_audit_standard_satisfies_efficiency(checkpoint, capsys):
    assert main(["shapley-audit", "--checkpoint", str(checkpoint)]) == 0
    assert "efficiency_ok=true" in capsys.readouterr().out
    text = (checkpoint / "shapley_audit.csv").read_text()
    assert "coalition,m1+m2" in text
    assert "dominant," in text


def test_audit_paper_variant_differs_and_breaks_efficiency(checkpoint, tmp_path, capsys):
    std_out = tmp_path / "std.csv"
    pap_out = tmp_path / "pap.csv"
    assert main(["shapley-audit", "--checkpoint", str(checkpoint),
                 "--out", str(std_out)]) == 0
    assert main(["shapley-audit", "--checkpoint", str(checkpoint),
                 "--variant", "paper", "--out", str(pap_out)]) == 0
    got = capsys.readouterr().out
    assert "efficiency_ok=true" in got and "efficiency_ok=false" in got
    assert std_out.read_text() != pap_out.read_text()


def test_audit_batch_out_of_range(checkpoint, capsys):
    assert main(["shapley-audit", "--checkpoint", str(checkpoint), "--batch", "99"]) == 1
    assert "--batch" in capsys.readouterr().err


# ----------------------------------------------------------------- convergence


def test_convergence_on_run_dir(checkpoint, capsys):
    assert main(["convergence", "--run", str(checkpoint), "--calibrate-at", "2"]) == 0
    got = capsys.readouterr().out
    assert "avg@2=" in got and "C=" in got
    rows = (checkpoint / "convergence.csv").read_text().strip().split("\n")
    assert rows[0] == "t,grad_sq_norm,running_avg,bound"
    assert len(rows) == 1 + 6  # 2 epochs x 3 steps
    t, sq, avg, bound = rows[1].split(",")
    assert t == "1" and float(sq) >= 0 and float(avg) >= 0 and np.isfinite(float(bound))


def test_convergence_needs_steps_csv(tmp_path, capsys):
    assert main(["convergence", "--run", str(tmp_path)]) == 1
    assert "steps.csv" in capsys.readouterr().err


# ----------------------------------------------------------------- export-data


def test_export_data_round_trips(tmp_path, capsys):
    spec = {"classes": 3, "dims": [4, 3], "snr": [2.0, 0.5],
            "n_train": 20, "n_val": 10, "n_test": 10, "seed": 7}
    spec_path = tmp_path / "spec.json"
    spec_path.write_text(json.dumps(spec))
    out = tmp_path / "data.bin"
    assert main(["export-data", "--spec", str(spec_path), "--out", str(out)]) == 0
    assert "train=20" in capsys.readouterr().out
    (classes, dims), splits = load_dataset(out)
    assert classes == 3 and dims == (4, 3)
    assert [ds.n for ds in splits] == [20, 10, 10]


def test_export_data_validation(tmp_path, capsys):
    assert main(["export-data", "--spec", str(tmp_path / "no.json"),
                 "--out", str(tmp_path / "x.bin")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"classes": 3}))
    assert main(["export-data", "--spec", str(bad), "--out", str(tmp_path / "x.bin")]) == 1
    assert "missing keys" in capsys.readouterr().err
    extra = tmp_path / "extra.json"
    extra.write_text(json.dumps({"classes": 3, "dims": [2], "snr": [1.0],
                                 "n_train": 4, "n_val": 2, "n_test": 2, "fraction": 0.5}))
    assert main(["export-data", "--spec", str(extra), "--out", str(tmp_path / "x.bin")]) == 1
