import csv
import json

import numpy as np
import pytest

from nmm import cli
from nmm.data import read_trial, write_csv

TINY_CFG = {
    "seed": 7,
    "network": {"n_blocks": 1, "n_heads": 1, "d_k": 2, "d_v": 2, "ffn_hidden": [4], "head_hidden": [4],
                "n_positional": 2},
    "train": {"lr": 0.01, "epochs": 2, "batch_size": 4},
    "synth": {"loads": [0.0, 2.0], "sets_per_load": 1, "trials_per_set": 3},
    "baseline": {"nmf_iters": 50, "torque_iters": 5, "lr": 0.01},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    (root / "cfg.json").write_text(json.dumps(TINY_CFG))
    assert cli.main(["synth", "--out", str(root / "trials"), "--config", str(root / "cfg.json")]) == 0
    return root


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_synth_full_session_has_sixty_files(tmp_path):
    assert cli.main(["synth", "--out", str(tmp_path), "--loads", "0", "2", "4", "--sets", "2",
                     "--trials", "10", "--seed", "1"]) == 0
    files = sorted(tmp_path.glob("*.csv"))
    assert len(files) == 60
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert len(manifest["outputs"]) == 60
    assert read_trial(files[0]).tau_id is not None


def test_synth_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert cli.main(["synth", "--out", str(tmp_path / d), "--loads", "2", "--sets", "1",
                         "--trials", "2", "--seed", "3"]) == 0
    ma = json.loads((tmp_path / "a" / "manifest.json").read_text())
    mb = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert ma == mb


def test_train_twice_hash_identical(workspace):
    outs = []
    for d in ("run1", "run2"):
        out = workspace / d
        assert cli.main(["train", "--trials", str(workspace / "trials"), "--out", str(out),
                         "--config", str(workspace / "cfg.json")]) == 0
        outs.append(out)
    for name in ("checkpoint.nmm", "loss_history.csv", "physio_trajectory.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_eval_identity_predictions(workspace, tmp_path):
    pred = tmp_path / "pred"
    for f in sorted((workspace / "trials").glob("load*.csv")):
        t = read_trial(f)
        write_csv(pred / f.name, ["t_s", "e3", "e6", "tau_pred_Nm"],
                  zip(t.kin.t, t.emg[2], t.emg[5], t.tau_id))
    assert cli.main(["eval", "--pred", str(pred), "--trials", str(workspace / "trials"),
                     "--out", str(tmp_path / "ev")]) == 0
    for r in rows(tmp_path / "ev" / "metrics.csv"):
        assert float(r["pcc"]) == pytest.approx(1.0, abs=1e-12)
        assert float(r["rae"]) == 0.0
    for name in ("plot_line.csv", "plot_heatmap.csv", "plot_scatter.csv"):
        assert (tmp_path / "ev" / name).exists()


def test_predict_eval_report_pipeline(workspace, tmp_path):
    ck = workspace / "run1" / "checkpoint.nmm"
    if not ck.exists():
        assert cli.main(["train", "--trials", str(workspace / "trials"), "--out", str(workspace / "run1"),
                         "--config", str(workspace / "cfg.json")]) == 0
    assert cli.main(["predict", "--checkpoint", str(ck), "--trials", str(workspace / "trials"),
                     "--out", str(tmp_path / "pred")]) == 0
    files = sorted((tmp_path / "pred").glob("*.csv"))
    assert len(files) == 6
    r = rows(files[0])
    assert set(r[0]) == {"t_s", "e3", "e6", "tau_pred_Nm"}
    assert all(0.0 < float(x["e3"]) < 1.0 for x in r)
    assert cli.main(["eval", "--pred", str(tmp_path / "pred"), "--trials", str(workspace / "trials"),
                     "--out", str(tmp_path / "ev")]) == 0
    assert cli.main(["report", "--eval", str(tmp_path / "ev"), "--out", str(tmp_path / "rep")]) == 0
    summary = rows(tmp_path / "rep" / "summary.csv")
    assert {s["signal"] for s in summary} == {"e3", "e6", "torque"}


def test_baseline_command(workspace, tmp_path):
    assert cli.main(["baseline", "--trials", str(workspace / "trials"), "--out", str(tmp_path),
                     "--config", str(workspace / "cfg.json")]) == 0
    report = json.loads((tmp_path / "fit_report.json").read_text())
    assert set(report) == {"0", "2"}
    out = rows(next(tmp_path.glob("load*.csv")))
    assert all(float(x["e3"]) >= 0 for x in out)


def test_train_resume_matches_uninterrupted(workspace, tmp_path):
    cfg = str(workspace / "cfg.json")
    trials = str(workspace / "trials")
    assert cli.main(["train", "--trials", trials, "--out", str(tmp_path / "full"), "--config", cfg]) == 0
    assert cli.main(["train", "--trials", trials, "--out", str(tmp_path / "part"), "--config", cfg,
                     "--stop-after", "1"]) == 0
    assert cli.main(["train", "--trials", trials, "--out", str(tmp_path / "part"), "--config", cfg,
                     "--resume", str(tmp_path / "part" / "checkpoint.nmm")]) == 0
    assert (tmp_path / "full" / "checkpoint.nmm").read_bytes() == (tmp_path / "part" / "checkpoint.nmm").read_bytes()


def test_preprocess_builds_trial(tmp_path):
    rng = np.random.default_rng(0)
    n_raw = 8000
    raw = rng.normal(0, 20.0, (n_raw, 4))
    write_csv(tmp_path / "emg.csv", ["c1", "c2", "c4", "c5"], raw)
    n = n_raw // 32
    q = 60 + 40 * np.sin(np.linspace(0, 2 * np.pi, n))
    write_csv(tmp_path / "ang.csv", ["q1_deg"], q[:, None])
    assert cli.main(["preprocess", "--emg", str(tmp_path / "emg.csv"), "--angles", str(tmp_path / "ang.csv"),
                     "--mass", "2", "--mvc", "50", "50", "50", "50", "--inverse-dynamics",
                     "--out", str(tmp_path / "t.csv")]) == 0
    t = read_trial(tmp_path / "t.csv")
    assert len(t) == n
    assert t.envelopes().available() == (0, 1, 3, 4)
    assert t.tau_id is not None


def test_output_root_env(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["synth", "--out", "rel", "--loads", "0", "--sets", "1", "--trials", "1"]) == 0
    assert (tmp_path / "rel" / "manifest.json").exists()


def test_user_errors_exit_one(tmp_path, capsys):
    assert cli.main(["train", "--trials", str(tmp_path / "missing"), "--out", str(tmp_path / "o")]) == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "UserError"
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"nope": 1}}))
    assert cli.main(["synth", "--out", str(tmp_path / "s"), "--config", str(bad)]) == 1
    assert "config error" in json.loads(capsys.readouterr().err.strip())["message"]
    (tmp_path / "t").mkdir()
    (tmp_path / "t" / "x.csv").write_text("t_s,q1_deg\n0,1\n")
    assert cli.main(["eval", "--pred", str(tmp_path), "--trials", str(tmp_path / "t"), "--out", str(tmp_path / "e")]) == 1
    assert "missing required columns" in json.loads(capsys.readouterr().err.strip())["message"]
    assert cli.main(["nonsense"]) == 1


def test_nan_data_reports_row(tmp_path, capsys, workspace):
    src = sorted((workspace / "trials").glob("load*.csv"))[0]
    lines = src.read_text().splitlines()
    parts = lines[5].split(",")
    parts[1] = "nan"
    lines[5] = ",".join(parts)
    d = tmp_path / "t"
    d.mkdir()
    (d / "x.csv").write_text("\n".join(lines) + "\n")
    assert cli.main(["train", "--trials", str(d), "--out", str(tmp_path / "o")]) == 1
    msg = json.loads(capsys.readouterr().err.strip())["message"]
    assert "x.csv:6" in msg and "q1_deg" in msg


def test_internal_error_exit_two(monkeypatch, tmp_path):
    def boom(args):
        raise RuntimeError("boom")
    monkeypatch.setattr(cli, "cmd_report", boom)
    parser = cli.build_parser
    monkeypatch.setattr(cli, "build_parser", lambda: _patched(parser(), boom))
    assert cli.main(["report", "--eval", str(tmp_path), "--out", str(tmp_path)]) == 2


def _patched(parser, fn):
    parser.set_defaults(func=fn)
    for action in parser._subparsers._group_actions:
        for sub in action.choices.values():
            sub.set_defaults(func=fn)
    return parser
