"""Joint training of network weights and the 32 bounded physiological parameters.

The objective for one trial is ``data_loss + lam * physics_loss``:

* ``data_loss`` is the relative Frobenius error on the measured channels;
* ``physics_loss`` is the relative L2 error between the inverse-dynamics torque
  and the torque the musculoskeletal model produces from all six predicted
  envelopes.

Physiological parameters are optimised as unbounded raw values and mapped into
their boxes through a sigmoid, so every value stays inside its box at every
step.  A batch loss is the mean over its trials.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from . import msk
from .data import Trial, write_csv
from .network import NmmConfig, decoder_features, encoder_features, forward, init_weights
from .physio import ArmGeometry, PhysioParamSet, build_muscles, param_names

PHYSIO_KEY = "physio.raw"


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch: int, batch: int, detail: str):
        self.epoch = epoch
        self.batch = batch
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")


class DegenerateNormalizerError(ZeroDivisionError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lam: float = 1.0
    lr: float = 1e-4
    physio_lr_scale: float = 1.0
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.99)
    eps: float = 1e-8
    step_size: int = 25
    gamma: float = 0.8
    epochs: int = 1000
    batch_size: int = 100
    window: int = 50
    tol: float = 1e-4
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if not self.lam >= 0:
            raise ValueError("lam must be >= 0")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1 or self.epochs < 0 or self.step_size < 1:
            raise ValueError("batch_size and step_size must be >= 1, epochs >= 0")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError("betas must be two numbers in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- losses

def data_loss(pred, meas, measured):
    """Relative Frobenius error over the measured channels.

    ``pred`` is (..., 6, T); ``meas`` is (..., len(measured), T).  Returns one
    value per leading index.
    """
    meas = np.asarray(meas, dtype=np.float64)
    norm = np.sqrt(np.sum(meas ** 2, axis=(-2, -1)))
    if np.any(norm == 0):
        raise DegenerateNormalizerError("measured envelopes are all zero")
    sel = pred[..., list(measured), :]
    diff = sel - meas
    return ad.sqrt(ad.tsum(diff * diff, axis=(-2, -1))) / norm


def relative_l2(x, ref):
    ref = np.asarray(ref, dtype=np.float64)
    norm = np.sqrt(np.sum(ref ** 2, axis=-1))
    if np.any(norm == 0):
        raise DegenerateNormalizerError("reference torque is identically zero")
    diff = x - ref
    return ad.sqrt(ad.tsum(diff * diff, axis=-1)) / norm


def physics_loss(pred, kin, physio_values, geometry: ArmGeometry, tau_ref, delay: int = 0):
    """Relative L2 torque residual of the musculoskeletal model driven by ``pred``."""
    muscles, exc = build_muscles(physio_values, geometry, delay)
    tau = msk.forward_torque(pred, kin, muscles, exc)
    return relative_l2(tau, tau_ref)


def composite_loss(d, p, lam: float):
    return d + lam * p


# ---------------------------------------------------------------- optimiser

def scheduled_lr(lr0: float, epoch: int, step_size: int = 25, gamma: float = 0.8) -> float:
    """Learning rate after ``epoch // step_size`` scheduler steps."""
    return lr0 * gamma ** (epoch // step_size)


def adamw_step(params: dict, grads: dict, moments: dict, t: int, lr: float,
               betas=(0.9, 0.99), eps: float = 1e-8, weight_decay: float = 0.0,
               decay_keys=None, lr_scale: dict | None = None):
    """One decoupled-weight-decay Adam step; returns new params and moments.

    ``t`` is the 1-based step count used for bias correction.  Keys are visited
    in sorted order so the update is reproducible.
    """
    b1, b2 = betas
    new_p, new_m = {}, {}
    for k in sorted(params):
        p = np.asarray(params[k], dtype=np.float64)
        g = np.asarray(grads.get(k, np.zeros_like(p)), dtype=np.float64)
        m, v = moments.get(k, (np.zeros_like(p), np.zeros_like(p)))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        step_lr = lr * (lr_scale or {}).get(k, 1.0)
        decay = weight_decay if decay_keys is None or k in decay_keys else 0.0
        p = p - step_lr * decay * p
        p = p - step_lr * m_hat / (np.sqrt(v_hat) + eps)
        new_p[k] = p
        new_m[k] = (m, v)
    return new_p, new_m


# ---------------------------------------------------------------- data prep

@dataclass
class PreparedTrial:
    name: str
    mass: float
    enc: np.ndarray      # (T, C_e)
    dec: np.ndarray      # (T, C_d)
    meas: np.ndarray     # (n_measured, T)
    tau: np.ndarray      # (T,)
    q1: np.ndarray
    q2: np.ndarray
    dt: float

    def __len__(self) -> int:
        return len(self.tau)


def prepare(trial: Trial, cfg: NmmConfig) -> PreparedTrial:
    if trial.tau_id is None:
        raise ValueError(f"trial {trial.name!r} has no inverse-dynamics torque")
    meas = trial.emg[list(cfg.measured)]
    if not np.all(np.isfinite(meas)):
        raise ValueError(f"trial {trial.name!r} is missing a measured channel")
    kin = trial.kin
    return PreparedTrial(trial.name, kin.mass, encoder_features(kin, cfg, trial.emg),
                         decoder_features(len(kin), kin.mass, kin.dt, cfg),
                         meas, np.asarray(trial.tau_id, dtype=np.float64),
                         kin.q1, kin.q2, kin.dt)


def split_by_load(trials: list[Trial], test_fraction: float, seed: int):
    """Per-load seeded shuffle; returns (train indices, test indices)."""
    by_load: dict[float, list[int]] = {}
    for i, t in enumerate(trials):
        by_load.setdefault(t.mass, []).append(i)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for load in sorted(by_load):
        idx = np.array(by_load[load])
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx))) if len(idx) > 1 else 0
        n_test = min(n_test, len(idx) - 1)
        test += sorted(idx[:n_test].tolist())
        train += sorted(idx[n_test:].tolist())
    return train, test


def _groups(batch: list[PreparedTrial]):
    """Split a batch into runs of equal length so they can be stacked."""
    out: dict[int, list[PreparedTrial]] = {}
    for p in batch:
        out.setdefault(len(p), []).append(p)
    return [out[k] for k in sorted(out)]


def batch_losses(w, physio_values, batch: list[PreparedTrial], net_cfg: NmmConfig,
                 geometry: ArmGeometry, delay: int = 0):
    """Per-trial data and physics losses for a batch (summed, plus counts)."""
    d_sum = p_sum = 0.0
    for group in _groups(batch):
        enc = np.stack([p.enc for p in group])
        dec = np.stack([p.dec for p in group])
        pred = ad.swapaxes(forward(w, enc, dec, net_cfg), -1, -2)   # (B, 6, T)
        meas = np.stack([p.meas for p in group])
        kin = SimpleNamespace(q1=np.stack([p.q1 for p in group]),
                              q2=np.stack([p.q2 for p in group]), dt=group[0].dt)
        tau = np.stack([p.tau for p in group])
        d_sum = d_sum + ad.tsum(data_loss(pred, meas, net_cfg.measured))
        p_sum = p_sum + ad.tsum(physics_loss(pred, kin, physio_values, geometry, tau, delay))
    return d_sum, p_sum


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    net_cfg: NmmConfig
    train_cfg: TrainConfig
    weights: dict
    physio: PhysioParamSet
    geometry: ArmGeometry
    moments: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    history: list = field(default_factory=list)
    trajectory: list = field(default_factory=list)
    converged: bool = False
    delay: int = 0
    split: dict = field(default_factory=dict)

    def params(self) -> dict:
        p = dict(self.weights)
        p[PHYSIO_KEY] = self.physio.raw
        return p

    def set_params(self, p: dict) -> None:
        self.physio = PhysioParamSet(p[PHYSIO_KEY], self.physio.boxes)
        self.weights = {k: p[k] for k in self.weights}

    # checkpoint I/O
    def tensors(self) -> dict[str, np.ndarray]:
        t = {f"w/{k}": v for k, v in self.weights.items()}
        t["physio/raw"] = self.physio.raw
        for k in sorted(self.moments):
            m, v = self.moments[k]
            t[f"adam_m/{k}"] = m
            t[f"adam_v/{k}"] = v
        cols = ["train_loss", "test_loss", "data_loss", "phys_loss", "lr"]
        t["history"] = np.array([[h[c] for c in cols] for h in self.history]).reshape(-1, len(cols))
        t["trajectory"] = np.array(self.trajectory).reshape(-1, 32)
        return t

    def meta(self) -> dict:
        return {
            "kind": "nmm-state",
            "net_cfg": self.net_cfg.to_dict(),
            "train_cfg": self.train_cfg.to_dict(),
            "seed": self.train_cfg.seed,
            "boxes": {k: list(v) for k, v in self.physio.boxes.items()},
            "geometry": self.geometry.to_dict(),
            "physio_names": list(param_names()),
            "step": self.step,
            "epoch": self.epoch,
            "converged": self.converged,
            "delay": self.delay,
            "split": self.split,
        }

    def save(self, path) -> None:
        ckpt.save(path, self.tensors(), self.meta())

    @classmethod
    def load(cls, path) -> "TrainState":
        tensors, meta = ckpt.load(path)
        if meta.get("kind") != "nmm-state":
            raise ckpt.CheckpointError(f"{path}: not a training checkpoint")
        net_cfg = NmmConfig.from_dict(meta["net_cfg"])
        weights = {k[2:]: v for k, v in tensors.items() if k.startswith("w/")}
        boxes = {k: tuple(v) for k, v in meta["boxes"].items()}
        moments = {}
        for k, v in tensors.items():
            if k.startswith("adam_m/"):
                name = k[len("adam_m/"):]
                moments[name] = (v, tensors[f"adam_v/{name}"])
        cols = ["train_loss", "test_loss", "data_loss", "phys_loss", "lr"]
        history = [dict(zip(cols, map(float, row)), epoch=i + 1)
                   for i, row in enumerate(tensors["history"])]
        return cls(net_cfg, TrainConfig.from_dict(meta["train_cfg"]), weights,
                   PhysioParamSet(tensors["physio/raw"], boxes),
                   ArmGeometry.from_dict(meta["geometry"]), moments, meta["step"],
                   meta["epoch"], history, [row.copy() for row in tensors["trajectory"]],
                   meta["converged"], meta["delay"], meta["split"])


def new_state(net_cfg: NmmConfig, train_cfg: TrainConfig, physio: PhysioParamSet | None = None,
              geometry: ArmGeometry | None = None, delay: int = 0) -> TrainState:
    physio = physio.copy() if physio is not None else PhysioParamSet.midbox()
    geometry = geometry or ArmGeometry.reference(physio.boxes)
    return TrainState(net_cfg, train_cfg, init_weights(net_cfg), physio, geometry, delay=delay)


# ---------------------------------------------------------------- training

def evaluate(state: TrainState, prepared: list[PreparedTrial]) -> tuple[float, float, float]:
    """Mean composite, data and physics loss (no gradients)."""
    if not prepared:
        return float("nan"), float("nan"), float("nan")
    d, p = batch_losses(state.weights, state.physio.values, prepared, state.net_cfg,
                        state.geometry, state.delay)
    n = len(prepared)
    d, p = float(ad.value_of(d)) / n, float(ad.value_of(p)) / n
    return d + state.train_cfg.lam * p, d, p


def _batches(n: int, size: int, seed: int, epoch: int) -> list[np.ndarray]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch]))
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _converged(state: TrainState) -> bool:
    W, tol = state.train_cfg.window, state.train_cfg.tol
    if len(state.history) <= W:
        return False
    def rel(a, b):
        return np.abs(a - b) / np.maximum(np.abs(b), 1e-12)
    losses = np.array([h["train_loss"] for h in state.history[-W - 1:]])
    traj = np.array(state.trajectory[-W - 1:])
    loss_ok = np.all(rel(losses[1:], losses[:-1]) < tol)
    param_ok = np.all(rel(traj[1:], traj[:-1]) < tol)
    return bool(loss_ok and param_ok)


def train_epoch(state: TrainState, train_set: list[PreparedTrial]) -> dict:
    cfg = state.train_cfg
    lr = scheduled_lr(cfg.lr, state.epoch, cfg.step_size, cfg.gamma)
    decay_keys = {k for k, v in state.weights.items() if np.ndim(v) >= 2}
    scale = {PHYSIO_KEY: cfg.physio_lr_scale}
    d_tot = p_tot = 0.0
    for b, idx in enumerate(_batches(len(train_set), cfg.batch_size, cfg.seed, state.epoch)):
        batch = [train_set[i] for i in idx]
        params = state.params()
        leaves = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
        w = {k: leaves[k] for k in state.weights}
        values = state.physio.bounded(leaves[PHYSIO_KEY])
        try:
            d, p = batch_losses(w, values, batch, state.net_cfg, state.geometry, state.delay)
        except msk.DomainError as exc:
            # inputs were validated in prepare(), so this is a non-finite forward pass
            raise TrainingDivergedError(state.epoch + 1, b, str(exc)) from None
        loss = composite_loss(d, p, cfg.lam) / len(batch)
        lv = float(ad.value_of(loss))
        if not math.isfinite(lv):
            raise TrainingDivergedError(state.epoch + 1, b, f"loss={lv}")
        try:
            g = ad.backward(loss)
        except ad.NonFiniteGradientError as exc:
            raise TrainingDivergedError(state.epoch + 1, b, str(exc)) from None
        grads = {k: g.get(leaves[k], np.zeros_like(params[k])) for k in params}
        state.step += 1
        new_p, state.moments = adamw_step(params, grads, state.moments, state.step, lr,
                                          cfg.betas, cfg.eps, cfg.weight_decay,
                                          decay_keys, scale)
        state.set_params(new_p)
        d_tot += float(ad.value_of(d))
        p_tot += float(ad.value_of(p))
    n = len(train_set)
    return {"data_loss": d_tot / n, "phys_loss": p_tot / n, "lr": lr}


def train(trials: list[Trial], state: TrainState, progress=None, stop_after: int | None = None) -> TrainState:
    """Run (or resume) training until ``epochs`` or convergence.

    ``stop_after`` limits how many epochs this call runs, which lets callers
    checkpoint part-way and resume later with an identical final state.
    """
    cfg = state.train_cfg
    if not trials:
        raise ValueError("empty dataset")
    train_idx, test_idx = split_by_load(trials, cfg.test_fraction, cfg.seed)
    state.split = {"train": [trials[i].name for i in train_idx],
                   "test": [trials[i].name for i in test_idx]}
    prepared = [prepare(t, state.net_cfg) for t in trials]
    train_set = [prepared[i] for i in train_idx]
    test_set = [prepared[i] for i in test_idx]
    ran = 0
    while state.epoch < cfg.epochs and not state.converged:
        if stop_after is not None and ran >= stop_after:
            break
        stats = train_epoch(state, train_set)
        state.epoch += 1
        ran += 1
        test_loss = evaluate(state, test_set)[0]
        row = {"epoch": state.epoch,
               "train_loss": stats["data_loss"] + cfg.lam * stats["phys_loss"],
               "test_loss": test_loss, **stats}
        if not math.isfinite(row["train_loss"]):
            raise TrainingDivergedError(state.epoch, -1, "epoch mean loss")
        state.history.append(row)
        state.trajectory.append(state.physio.values.copy())
        state.converged = _converged(state)
        if progress is not None:
            progress(row)
    return state


def write_history(path, state: TrainState) -> None:
    cols = ["epoch", "train_loss", "test_loss", "data_loss", "phys_loss", "lr"]
    write_csv(path, cols, ([h[c] for c in cols] for h in state.history))


def write_trajectory(path, state: TrainState) -> None:
    write_csv(path, ["epoch"] + list(param_names()),
              ([i + 1] + list(row) for i, row in enumerate(state.trajectory)))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
