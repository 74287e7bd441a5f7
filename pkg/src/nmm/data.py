"""Trial containers and the canonical trial CSV format."""

from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

N_CHANNELS = 6
KIN_COLUMNS = ("t_s", "q1_deg", "q2_deg", "qdot1_dps", "qdot2_dps", "mass_kg")
EMG_COLUMNS = tuple(f"e{i}" for i in range(1, N_CHANNELS + 1))
TAU_COLUMN = "tau_id_Nm"
DT_TOL = 1e-9


class TrialFileError(ValueError):
    """Malformed trial data; the message carries file and row context."""


@dataclass
class KinematicsTrace:
    """Uniformly sampled joint angles (deg), velocities (deg/s) and lifted mass (kg).

    ``q1`` is the elbow (the torque degree of freedom) and ``q2`` the shoulder.
    """

    t: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    qdot1: np.ndarray
    qdot2: np.ndarray
    mass: float

    def __post_init__(self):
        for name in ("t", "q1", "q2", "qdot1", "qdot2"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.t)
        for name in ("q1", "q2", "qdot1", "qdot2"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"kinematics channel {name} has length "
                                 f"{len(getattr(self, name))}, expected {n}")
        self.mass = float(self.mass)

    def __len__(self) -> int:
        return len(self.t)

    @property
    def dt(self) -> float:
        if len(self.t) < 2:
            raise ValueError("need at least two samples to define a sample period")
        return float(self.t[1] - self.t[0])

    @property
    def rate_hz(self) -> float:
        return 1.0 / self.dt

    def channels(self) -> np.ndarray:
        """(T, 4) array of q1, q2, qdot1, qdot2."""
        return np.stack([self.q1, self.q2, self.qdot1, self.qdot2], axis=1)


@dataclass
class EmgEnvelopeSet:
    """Six normalized envelopes, (6, T); channels that were not recorded are NaN."""

    values: np.ndarray
    rate_hz: float
    measured: tuple[int, ...] = (0, 1, 3, 4)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != N_CHANNELS:
            raise ValueError(f"envelopes must be ({N_CHANNELS}, T), got {self.values.shape}")
        finite = self.values[np.isfinite(self.values)]
        if finite.size and (finite.min() < 0.0 or finite.max() > 1.0):
            raise ValueError("envelope samples must lie in [0, 1]")

    @property
    def unmeasured(self) -> tuple[int, ...]:
        return tuple(i for i in range(N_CHANNELS) if i not in self.measured)

    def available(self) -> tuple[int, ...]:
        return tuple(i for i in range(N_CHANNELS) if np.all(np.isfinite(self.values[i])))


@dataclass
class Trial:
    kin: KinematicsTrace
    emg: np.ndarray  # (6, T), NaN where a channel is absent
    tau_id: np.ndarray | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.kin)

    @property
    def mass(self) -> float:
        return self.kin.mass

    def envelopes(self, measured=(0, 1, 3, 4)) -> EmgEnvelopeSet:
        return EmgEnvelopeSet(self.emg, self.kin.rate_hz, tuple(measured))


def _fmt(x: float) -> str:
    return repr(float(x))


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path: str | Path, header: list[str], rows) -> None:
    """Write rows of floats/strings atomically (temp file + rename)."""
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) if not isinstance(v, str) else v for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise TrialFileError(f"{path}: file not found")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise TrialFileError(f"{path}: empty file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise TrialFileError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise TrialFileError(f"{path}:{lineno}: {exc}") from None
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    return header, data


def write_trial(path: str | Path, trial: Trial) -> None:
    emg_cols = [i for i in range(N_CHANNELS) if np.all(np.isfinite(trial.emg[i]))]
    header = list(KIN_COLUMNS) + [EMG_COLUMNS[i] for i in emg_cols]
    cols = [trial.kin.t, trial.kin.q1, trial.kin.q2, trial.kin.qdot1, trial.kin.qdot2,
            np.full(len(trial), trial.kin.mass)]
    cols += [trial.emg[i] for i in emg_cols]
    if trial.tau_id is not None:
        header.append(TAU_COLUMN)
        cols.append(trial.tau_id)
    write_csv(path, header, zip(*cols))


def read_trial(path: str | Path) -> Trial:
    """Parse and validate one trial CSV."""
    path = Path(path)
    header, data = read_csv(path)
    missing = [c for c in KIN_COLUMNS if c not in header]
    if missing:
        raise TrialFileError(f"{path}: missing required columns {missing}")
    unknown = [c for c in header if c not in KIN_COLUMNS + EMG_COLUMNS + (TAU_COLUMN,)]
    if unknown:
        raise TrialFileError(f"{path}: unknown columns {unknown}")
    if len(data) < 2:
        raise TrialFileError(f"{path}: need at least two samples")
    bad = np.argwhere(~np.isfinite(data))
    if bad.size:
        r, c = bad[0]
        raise TrialFileError(f"{path}:{r + 2}: non-finite value in column {header[c]}")
    col = {h: data[:, i] for i, h in enumerate(header)}
    t = col["t_s"]
    dts = np.diff(t)
    if np.any(dts <= 0):
        r = int(np.argmax(dts <= 0))
        raise TrialFileError(f"{path}:{r + 3}: t_s is not strictly increasing")
    off = np.abs(dts - dts[0]) > DT_TOL
    if np.any(off):
        r = int(np.argmax(off))
        raise TrialFileError(f"{path}:{r + 3}: non-uniform sample period")
    mass = col["mass_kg"]
    if np.any(mass != mass[0]):
        r = int(np.argmax(mass != mass[0]))
        raise TrialFileError(f"{path}:{r + 2}: mass_kg changes within a trial")
    emg = np.full((N_CHANNELS, len(t)), np.nan)
    for i, name in enumerate(EMG_COLUMNS):
        if name in col:
            v = col[name]
            out = (v < 0.0) | (v > 1.0)
            if np.any(out):
                r = int(np.argmax(out))
                raise TrialFileError(f"{path}:{r + 2}: {name}={v[r]} outside [0, 1]")
            emg[i] = v
    kin = KinematicsTrace(t, col["q1_deg"], col["q2_deg"], col["qdot1_dps"], col["qdot2_dps"], mass[0])
    return Trial(kin, emg, col.get(TAU_COLUMN), name=path.stem)
