"""Command-line entry point: ``nmm <command> ...``.

Exit codes: 0 success, 1 user error (bad input, config or arguments), 2
internal error.  Errors are printed to stderr as one JSON object.  Relative
output directories are resolved against ``$NMM_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baseline as mse
from . import config as runcfg
from . import msk, signals, synth
from .checkpoint import CheckpointError
from .data import (EMG_COLUMNS, KinematicsTrace, Trial, TrialFileError, atomic_write_text,
                   read_csv, read_trial, write_csv, write_trial)
from .network import nmm_forward
from .physio import ArmGeometry, PhysioParamSet, build_muscles
from .trainer import (TrainState, TrainingDivergedError, new_state, train, write_history,
                      write_trajectory)

OUTPUT_ROOT_ENV = "NMM_OUTPUT_ROOT"
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    pass


USER_ERRORS = (UserError, TrialFileError, runcfg.ConfigError, CheckpointError,
               mse.BaselineDomainError, signals.SignalError, synth.InfeasibleTrialError,
               TrainingDivergedError, FileNotFoundError)


# ---------------------------------------------------------------- helpers

def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, seed, config_hash, inputs, outputs) -> None:
    manifest = {
        "command": command,
        "seed": seed,
        "config_hash": config_hash,
        "inputs": {str(p): _sha(Path(p)) for p in inputs},
        "outputs": {Path(p).name: _sha(Path(p)) for p in sorted(outputs)},
    }
    atomic_write_text(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_config(path) -> runcfg.RunConfig:
    return runcfg.load(path) if path else runcfg.RunConfig()


def _trial_files(paths) -> list[Path]:
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files += sorted(f for f in p.glob("*.csv") if f.name != "manifest.csv")
        elif p.exists():
            files.append(p)
        else:
            raise UserError(f"{p}: no such file or directory")
    if not files:
        raise UserError("no trial files found")
    return files


def _load_trials(paths) -> tuple[list[Trial], list[Path]]:
    files = _trial_files(paths)
    return [read_trial(f) for f in files], files


def _state(path) -> TrainState:
    return TrainState.load(path)


def _envelope_rows(t, cols):
    return zip(t, *cols)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _load_config(args.config)
    s = cfg.synth
    loads = tuple(args.loads) if args.loads is not None else s.loads
    sets = args.sets if args.sets is not None else s.sets_per_load
    per_set = args.trials if args.trials is not None else s.trials_per_set
    seed = args.seed if args.seed is not None else cfg.seed
    session = synth.SessionSpec(loads, sets, per_set, seed, s.trial_kwargs())
    physio = PhysioParamSet.midbox(cfg.boxes)
    out = _out_dir(args.out)
    written = []
    for name, spec in session.trial_specs():
        trial = synth.generate_trial(spec, physio, delay=cfg.delay, name=name)
        path = out / f"{name}.csv"
        write_trial(path, trial)
        written.append(path)
    _write_manifest(out, "synth", seed, cfg.hash(), [], written)
    print(json.dumps({"trials": len(written), "out": str(out)}))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    header, raw = read_csv(args.emg)
    if "t_s" in header:
        raw = raw[:, [i for i, h in enumerate(header) if h != "t_s"]]
        header = [h for h in header if h != "t_s"]
    channels = [int(c) for c in args.channels]
    if len(channels) != raw.shape[1]:
        raise UserError(f"{args.emg}: {raw.shape[1]} EMG columns but {len(channels)} channel numbers")
    if len(args.mvc) != len(channels):
        raise UserError("need one MVC value per EMG channel")
    env = signals.emg_envelope(raw.T, np.array(args.mvc), fs=args.emg_rate, out_rate=args.rate)
    ah, ang = read_csv(args.angles)
    if "q1_deg" not in ah:
        raise UserError(f"{args.angles}: missing q1_deg column")
    col = {h: ang[:, i] for i, h in enumerate(ah)}
    n = min(env.shape[1], len(ang))
    dt = 1.0 / args.rate
    t = np.arange(n) * dt
    q1 = signals.smooth_angle(col["q1_deg"][:n], args.sigma, args.window)
    q2 = signals.smooth_angle(col["q2_deg"][:n], args.sigma, args.window) if "q2_deg" in col else np.zeros(n)
    kin = KinematicsTrace(t, q1, q2, signals.angular_velocity(q1, dt),
                          signals.angular_velocity(q2, dt), args.mass)
    emg = np.full((6, n), np.nan)
    for j, c in enumerate(channels):
        if not 1 <= c <= 6:
            raise UserError(f"channel numbers must lie in 1..6, got {c}")
        emg[c - 1] = env[j, :n]
    if "tau_id_Nm" in col:
        tau = col["tau_id_Nm"][:n]
    elif args.inverse_dynamics:
        tau = synth.inverse_dynamics_torque(q1, args.mass, dt=dt)
    else:
        tau = None
    out = Path(args.out)
    if os.environ.get(OUTPUT_ROOT_ENV) and not out.is_absolute():
        out = Path(os.environ[OUTPUT_ROOT_ENV]) / out
    write_trial(out, Trial(kin, emg, tau, name=out.stem))
    print(json.dumps({"samples": n, "out": str(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    trials, files = _load_trials(args.trials)
    out = _out_dir(args.out)
    ckpt_path = out / "checkpoint.nmm"
    if args.resume:
        state = _state(args.resume)
        if args.epochs is not None:
            state.train_cfg = replace(state.train_cfg, epochs=args.epochs)
    else:
        train_cfg = cfg.train
        if args.epochs is not None:
            train_cfg = replace(train_cfg, epochs=args.epochs)
        state = new_state(cfg.network, train_cfg, PhysioParamSet.midbox(cfg.boxes), delay=cfg.delay)

    def progress(row):
        if args.verbose:
            print(json.dumps(row), file=sys.stderr)

    train(trials, state, progress=progress, stop_after=args.stop_after)
    state.save(ckpt_path)
    write_history(out / "loss_history.csv", state)
    write_trajectory(out / "physio_trajectory.csv", state)
    _write_manifest(out, "train", state.train_cfg.seed, cfg.hash(), files,
                    [ckpt_path, out / "loss_history.csv", out / "physio_trajectory.csv"])
    last = state.history[-1] if state.history else {}
    print(json.dumps({"epochs": state.epoch, "converged": state.converged,
                      "train_loss": last.get("train_loss"), "test_loss": last.get("test_loss")}))
    return EXIT_OK


def predict_trial(state: TrainState, trial: Trial):
    pred = nmm_forward(trial.kin, trial.mass, state.weights, state.net_cfg, trial.emg)
    muscles, exc = build_muscles(state.physio.values, state.geometry, state.delay)
    tau = np.asarray(msk.forward_torque(pred, trial.kin, muscles, exc))
    return pred, tau


def cmd_predict(args) -> int:
    state = _state(args.checkpoint)
    trials, files = _load_trials(args.trials)
    out = _out_dir(args.out)
    deep = state.net_cfg.unmeasured_idx
    written = []
    for trial, f in zip(trials, files):
        pred, tau = predict_trial(state, trial)
        header = ["t_s"] + [EMG_COLUMNS[c] for c in deep] + ["tau_pred_Nm"]
        path = out / f.name
        write_csv(path, header, _envelope_rows(trial.kin.t, [pred[c] for c in deep] + [tau]))
        written.append(path)
    _write_manifest(out, "predict", state.train_cfg.seed, None, [args.checkpoint] + files, written)
    print(json.dumps({"predictions": len(written), "out": str(out)}))
    return EXIT_OK


def _read_prediction(path: Path) -> dict:
    header, data = read_csv(path)
    return {h: data[:, i] for i, h in enumerate(header)}


def _safe(fn, *a):
    try:
        return fn(*a)
    except signals.SignalError:
        return float("nan")


def evaluate_pair(pred: dict, trial: Trial) -> list[dict]:
    rows = []
    for c, name in enumerate(EMG_COLUMNS):
        if name not in pred:
            continue
        truth = trial.emg[c]
        row = {"trial": trial.name, "mass_kg": trial.mass, "signal": name,
               "l2": signals.l2_norm(pred[name]),
               "psd_peak_hz": _safe(lambda x: signals.psd_peak_frequency(
                   x, segment_len=min(256, len(x)), fs=trial.kin.rate_hz, detrend=True), pred[name])}
        if np.all(np.isfinite(truth)):
            row.update(pcc=_safe(signals.pcc, pred[name], truth), rae=_safe(signals.rae, truth, pred[name]),
                       vaf=_safe(signals.vaf, truth, pred[name]))
        rows.append(row)
    if "tau_pred_Nm" in pred and trial.tau_id is not None:
        tp, tt = pred["tau_pred_Nm"], trial.tau_id
        rows.append({"trial": trial.name, "mass_kg": trial.mass, "signal": "torque",
                     "l2": signals.l2_norm(tp), "pcc": _safe(signals.pcc, tp, tt),
                     "rae": _safe(signals.rae, tt, tp),
                     "rel_l2": float(np.linalg.norm(tp - tt) / np.linalg.norm(tt)),
                     "vaf": _safe(signals.vaf, tt, tp)})
    return rows


METRIC_COLS = ["trial", "mass_kg", "signal", "pcc", "rae", "l2", "vaf", "rel_l2", "psd_peak_hz"]


def cmd_eval(args) -> int:
    trials, files = _load_trials(args.trials)
    pred_dir = Path(args.pred)
    out = _out_dir(args.out)
    metrics, line_rows, scatter_rows, heat = [], [], [], []
    for trial, f in zip(trials, files):
        pf = pred_dir / f.name
        if not pf.exists():
            raise UserError(f"{pf}: no prediction for trial {f.name}")
        pred = _read_prediction(pf)
        if len(pred["t_s"]) != len(trial):
            raise UserError(f"{pf}: {len(pred['t_s'])} samples, trial has {len(trial)}")
        metrics += evaluate_pair(pred, trial)
        for c, name in enumerate(EMG_COLUMNS):
            if name in pred:
                for t, p, g in zip(trial.kin.t, pred[name], trial.emg[c]):
                    line_rows.append([trial.name, name, t, p, g])
                bins = np.array_split(pred[name], 10)
                heat.append([trial.name, name, trial.mass] + [float(b.mean()) for b in bins])
        if "tau_pred_Nm" in pred and trial.tau_id is not None:
            for t, p, g in zip(trial.kin.t, pred["tau_pred_Nm"], trial.tau_id):
                scatter_rows.append([trial.name, trial.mass, t, g, p])
    na = float("nan")
    write_csv(out / "metrics.csv", METRIC_COLS,
              ([str(m["trial"]), m["mass_kg"], m["signal"]] + [m.get(k, na) for k in METRIC_COLS[3:]]
               for m in metrics))
    write_csv(out / "plot_line.csv", ["trial", "signal", "t_s", "pred", "truth"],
              ([r[0], r[1]] + r[2:] for r in line_rows))
    write_csv(out / "plot_heatmap.csv", ["trial", "signal", "mass_kg"] + [f"bin{i}" for i in range(10)],
              ([r[0], r[1]] + r[2:] for r in heat))
    write_csv(out / "plot_scatter.csv", ["trial", "mass_kg", "t_s", "tau_true_Nm", "tau_pred_Nm"],
              ([r[0]] + r[1:] for r in scatter_rows))
    outputs = [out / n for n in ("metrics.csv", "plot_line.csv", "plot_heatmap.csv", "plot_scatter.csv")]
    _write_manifest(out, "eval", None, None, files, outputs)
    summary = {}
    for m in metrics:
        summary.setdefault(m["signal"], []).append(m.get("pcc", na))
    print(json.dumps({k: float(np.nanmean(v)) if np.any(np.isfinite(v)) else None
                      for k, v in summary.items()}))
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _load_config(args.config)
    b = cfg.baseline
    trials, files = _load_trials(args.trials)
    if args.checkpoint:
        state = _state(args.checkpoint)
        physio, geometry, delay = state.physio, state.geometry, state.delay
        measured = state.net_cfg.measured
        unmeasured = state.net_cfg.unmeasured_idx
    else:
        physio = PhysioParamSet.midbox(cfg.boxes)
        geometry, delay = ArmGeometry.reference(physio.boxes), cfg.delay
        measured, unmeasured = cfg.network.measured, cfg.network.unmeasured_idx
    muscles, exc = build_muscles(physio.values, geometry, delay)
    out = _out_dir(args.out)
    report, written = {}, []
    by_load: dict[float, list[int]] = {}
    for i, t in enumerate(trials):
        by_load.setdefault(t.mass, []).append(i)
    for load in sorted(by_load):
        idx = by_load[load]
        group = [trials[i] for i in idx]
        for t in group:
            if t.tau_id is None:
                raise UserError(f"trial {t.name} has no tau_id_Nm column")
            if not np.all(np.isfinite(t.emg[list(measured)])):
                raise UserError(f"trial {t.name} is missing a measured channel")
        M = np.concatenate([t.emg[list(measured)].T for t in group])
        tau_ref = np.concatenate([t.tau_id for t in group])
        nmf = mse.nmf_fit(M, b.n_syn, b.nmf_iters, b.tol_m, b.lr, seed=cfg.seed)
        ext = mse.extrapolate(nmf.S, M, [t.kin for t in group], muscles, exc, tau_ref,
                              measured, unmeasured, b.torque_iters, b.tol_tau, b.lr,
                              W_m=nmf.W_m, mode=b.mode, seed=cfg.seed)
        report[f"{load:g}"] = mse.fit_report(nmf, M, ext)
        tau = np.asarray(mse.torque_from_stack(M, ext.E_r, mse._segments([len(t) for t in group]),
                                               [t.kin for t in group], muscles, exc, measured, unmeasured))
        start = 0
        for i, t in zip(idx, group):
            seg = slice(start, start + len(t))
            start += len(t)
            header = ["t_s"] + [EMG_COLUMNS[c] for c in unmeasured] + ["tau_pred_Nm"]
            path = out / files[i].name
            write_csv(path, header, _envelope_rows(t.kin.t, list(ext.E_r[seg].T) + [tau[seg]]))
            written.append(path)
    atomic_write_text(out / "fit_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n")
    _write_manifest(out, "baseline", cfg.seed, cfg.hash(), files, written + [out / "fit_report.json"])
    print(json.dumps(report))
    return EXIT_OK


def cmd_report(args) -> int:
    rows = read_rows(Path(args.eval) / "metrics.csv")
    groups: dict[tuple, list[dict]] = {}
    for r in rows:
        groups.setdefault((r["signal"], r["mass_kg"]), []).append(r)
    cols = ["signal", "mass_kg", "n", "pcc_mean", "pcc_std", "rae_mean", "l2_mean", "psd_peak_hz_max"]
    out_rows = []
    for (sig, mass), rs in sorted(groups.items()):
        def arr(k):
            return np.array([float(r[k]) for r in rs], dtype=np.float64)

        def agg(fn, k):
            v = arr(k)
            return float(fn(v)) if np.any(np.isfinite(v)) else float("nan")

        out_rows.append([sig, float(mass), len(rs), agg(np.nanmean, "pcc"), agg(np.nanstd, "pcc"),
                         agg(np.nanmean, "rae"), agg(np.nanmean, "l2"), agg(np.nanmax, "psd_peak_hz")])
    out = _out_dir(args.out)
    write_csv(out / "summary.csv", cols, out_rows)
    _write_manifest(out, "report", None, None, [Path(args.eval) / "metrics.csv"], [out / "summary.csv"])
    print(json.dumps({"groups": len(out_rows), "out": str(out / "summary.csv")}))
    return EXIT_OK


def read_rows(path: Path) -> list[dict]:
    """Rows of a CSV with mixed string and numeric columns, as dicts."""
    if not path.exists():
        raise UserError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nmm", description="Neural musculoskeletal model toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate synthetic trials with known deep envelopes")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--loads", type=float, nargs="+")
    s.add_argument("--sets", type=int)
    s.add_argument("--trials", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="raw EMG and angles to a trial file")
    s.add_argument("--emg", required=True, help="CSV of raw EMG (uV), one column per channel")
    s.add_argument("--angles", required=True, help="CSV with q1_deg [q2_deg] [tau_id_Nm]")
    s.add_argument("--mass", type=float, required=True)
    s.add_argument("--mvc", type=float, nargs="+", required=True)
    s.add_argument("--channels", type=int, nargs="+", default=[1, 2, 4, 5])
    s.add_argument("--emg-rate", type=float, default=signals.EMG_RATE_HZ)
    s.add_argument("--rate", type=float, default=signals.ENVELOPE_RATE_HZ)
    s.add_argument("--sigma", type=float, default=10.0)
    s.add_argument("--window", type=int, default=6)
    s.add_argument("--inverse-dynamics", action="store_true",
                   help="compute tau_id_Nm with the planar model when absent")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", help="train network and physiological parameters")
    s.add_argument("--trials", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--epochs", type=int)
    s.add_argument("--resume")
    s.add_argument("--stop-after", type=int, help="run at most this many epochs in this call")
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="deep-channel envelopes and torque for trials")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--trials", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("eval", help="metrics and plot data for predictions")
    s.add_argument("--pred", required=True)
    s.add_argument("--trials", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", help="synergy-extrapolation reconstruction")
    s.add_argument("--trials", nargs="+", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--checkpoint", help="take physiological parameters from a trained state")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("report", help="aggregate eval metrics per signal and load")
    s.add_argument("--eval", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USER
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # noqa: BLE001
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
