"""End-to-end CLI pipeline on a toy configuration."""

import hashlib
import json
import os

import numpy as np
import pytest

from quakesynth import geogen
from quakesynth.cli import main

TOY_CONFIG = {
    "seed": 17,
    "geology": {"nx": 16, "nz": 16},
    "simulation": {"n_t": 64, "sponge_width": 4, "sponge_coeff": 0.02},
    "dataset": {"n": 6, "test_every": 3, "k_sensors": 4},
    "mifno": {"width": 8, "geo_layers": 2, "fused_layers": 2, "modes_x": 4,
              "modes_t": 4, "ff_hidden": 16, "source_hidden": 16,
              "epochs": 2, "batch": 2, "lr": 1e-3, "restarts": 1},
    "ddpm": {"n_steps": 8, "widths": [8, 12, 16], "kernel": 3,
             "temb_dim": 8, "temb_hidden": 16, "train_steps": 20,
             "batch": 4, "restarts": 1},
}


def sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Run the whole pipeline once; individual tests inspect the results."""
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "config.json"
    cfg.write_text(json.dumps(TOY_CONFIG))
    paths = {
        "dir": d, "config": str(cfg),
        "dataset": str(d / "data.qsds"),
        "fno": str(d / "fno.qsck"),
        "ddpm": str(d / "ddpm.qsck"),
        "infer": str(d / "infer"),
        "reports": str(d / "reports"),
    }
    assert main(["generate", paths["config"], "--out", paths["dataset"]]) == 0
    assert main(["train-fno", paths["config"], paths["dataset"],
                 "--out", paths["fno"]]) == 0
    assert main(["train-ddpm", paths["config"], paths["dataset"],
                 paths["fno"], "--out", paths["ddpm"]]) == 0
    assert main(["infer", paths["config"], "--fno-ckpt", paths["fno"],
                 "--ddpm-ckpt", paths["ddpm"], "--dataset", paths["dataset"],
                 "--out", paths["infer"]]) == 0
    assert main(["evaluate", paths["config"], "--dataset", paths["dataset"],
                 "--pred", os.path.join(paths["infer"], "mifno.qsds"),
                 os.path.join(paths["infer"], "mifno_ddpm.qsds"),
                 "--out", paths["reports"]]) == 0
    return paths


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    assert "generate" in capsys.readouterr().out


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"geology": {"nx": 16, "bogus": 1}}))
    assert main(["generate", str(cfg), "--out", str(tmp_path / "x")]) == 2
    assert "unknown config key 'geology.bogus'" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path):
    assert main(["generate", str(tmp_path / "absent.json"),
                 "--out", str(tmp_path / "x")]) == 2


def test_zero_records_exit_3(workdir, capsys):
    assert main(["generate", workdir["config"], "--n", "0",
                 "--out", str(workdir["dir"] / "x.qsds")]) == 3
    assert "n must be" in capsys.readouterr().err


def test_generate_deterministic(workdir):
    again = str(workdir["dir"] / "data2.qsds")
    assert main(["generate", workdir["config"], "--out", again]) == 0
    assert sha(again) == sha(workdir["dataset"])


def test_generate_seed_override_changes_output(workdir):
    other = str(workdir["dir"] / "data_seed.qsds")
    assert main(["generate", workdir["config"], "--seed", "99",
                 "--out", other]) == 0
    assert sha(other) != sha(workdir["dataset"])


def test_verify_dataset_and_checkpoints(workdir, capsys):
    assert main(["verify", workdir["dataset"]]) == 0
    assert "valid quakesynth-dataset" in capsys.readouterr().out
    assert main(["verify", workdir["fno"]]) == 0
    assert "valid checkpoint" in capsys.readouterr().out
    assert main(["verify", os.path.join(workdir["infer"],
                                        "mifno.qsds")]) == 0
    assert "valid quakesynth-traces" in capsys.readouterr().out


def test_verify_rejects_garbage(tmp_path, capsys):
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"NOPE" + b"\x00" * 64)
    assert main(["verify", str(junk)]) == 3
    assert "unknown magic" in capsys.readouterr().err


def test_fno_loss_csv_rows_match_epochs(workdir):
    rows = open(workdir["fno"] + ".loss.csv").read().strip().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss"
    assert len(rows) - 1 == TOY_CONFIG["mifno"]["epochs"]


def test_ddpm_reports_frozen_operator(workdir, capsys):
    out2 = str(workdir["dir"] / "ddpm2.qsck")
    assert main(["train-ddpm", workdir["config"], workdir["dataset"],
                 workdir["fno"], "--out", out2]) == 0
    assert "MIFNO frozen: true" in capsys.readouterr().out
    assert sha(out2) == sha(workdir["ddpm"])
    assert os.path.exists(out2 + ".loss.csv")


def test_infer_outputs_and_stage_timing(workdir, capsys):
    out2 = str(workdir["dir"] / "infer2")
    assert main(["infer", workdir["config"], "--fno-ckpt", workdir["fno"],
                 "--ddpm-ckpt", workdir["ddpm"],
                 "--dataset", workdir["dataset"], "--out", out2]) == 0
    logged = capsys.readouterr().out
    assert "stage mifno:" in logged and "stage ddpm:" in logged
    for name in ("mifno.qsds", "mifno_ddpm.qsds"):
        assert sha(os.path.join(out2, name)) == \
            sha(os.path.join(workdir["infer"], name))


def test_infer_without_ddpm_stage(workdir):
    out = str(workdir["dir"] / "infer_plain")
    assert main(["infer", workdir["config"], "--fno-ckpt", workdir["fno"],
                 "--dataset", workdir["dataset"], "--out", out]) == 0
    assert os.path.exists(os.path.join(out, "mifno.qsds"))
    assert not os.path.exists(os.path.join(out, "mifno_ddpm.qsds"))


def test_infer_explicit_indices(workdir):
    out = str(workdir["dir"] / "infer_idx")
    assert main(["infer", workdir["config"], "--fno-ckpt", workdir["fno"],
                 "--dataset", workdir["dataset"], "--indices", "0,1",
                 "--out", out]) == 0
    tds = geogen.TraceDataset.read(os.path.join(out, "mifno.qsds"))
    assert tds.header["record_indices"] == [0, 1]
    assert main(["infer", workdir["config"], "--fno-ckpt", workdir["fno"],
                 "--dataset", workdir["dataset"], "--indices", "0,999",
                 "--out", out]) == 3


def test_evaluate_report_files(workdir):
    rep = workdir["reports"]
    table = open(os.path.join(rep, "table.csv")).read().splitlines()
    assert table[0] == "metric,mifno,best_mifno,mifno+ddpm,best_mifno+ddpm"
    assert len(table) == 8  # header + 7 metrics
    for name in ("per_trace_mifno.csv", "per_trace_mifno_ddpm.csv",
                 "aggregate_mifno.json", "aggregate_mifno_ddpm.json",
                 "scatter_eg_pg_mifno.csv", "scatter_eg_pg_mifno_ddpm.csv",
                 "scatter_eg_mifno_vs_mifno_ddpm.csv",
                 "scatter_pg_mifno_vs_mifno_ddpm.csv"):
        assert os.path.exists(os.path.join(rep, name)), name


def test_evaluate_reference_against_itself(workdir):
    """A prediction equal to the reference scores perfect GOF."""
    ds = geogen.Dataset.read(workdir["dataset"])
    test = ds.split("test")
    header = dict(ds.header)
    header["record_indices"] = [r.index for r in test]
    pred_path = str(workdir["dir"] / "selfpred.qsds")
    geogen.traces_only_dataset(header, [r.traces for r in test],
                               "self").write(pred_path)
    out = str(workdir["dir"] / "selfrep")
    assert main(["evaluate", workdir["config"], "--dataset",
                 workdir["dataset"], "--pred", pred_path, "--out", out]) == 0
    agg = json.load(open(os.path.join(out,
                                      "aggregate_self.json")))["aggregates"]
    assert agg["rmae"]["mean"] == 0.0
    assert agg["rrmse"]["mean"] == 0.0
    assert agg["eg"]["mean"] == pytest.approx(10.0)
    assert agg["pg"]["mean"] == pytest.approx(10.0)
