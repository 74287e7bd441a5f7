"""Synthetic elbow flexion-extension trials with known ground truth.

The reference torque comes from a planar single-segment inverse-dynamics model
of forearm plus dumbbell.  Envelopes are then constructed so that the forward
musculoskeletal model driven by them reproduces that torque:

* measured extensors (Trilong, Trilat) follow a load-scaled extension-phase
  profile;
* the measured flexors (Biclong, Bicshort) share one activation level, solved
  sample by sample so the measured set delivers ``(1 + delta*s) * tau`` where
  ``s`` is +1 at peak extension speed and -1 at peak flexion speed;
* the remaining torque deficit is split without co-contraction: Brach takes
  the positive part (flexion phase), Trimed the negative part (extension).

Torque is affine in each activation, so the per-sample solve is exact, and the
activation and excitation maps are inverted in closed form.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import msk
from .data import KinematicsTrace, Trial
from .physio import ArmGeometry, PhysioParamSet, MUSCLES, build_muscles


class InfeasibleTrialError(ValueError):
    def __init__(self, muscle: str, peak: float):
        self.muscle = muscle
        self.peak = peak
        super().__init__(f"torque demand needs activation {peak:.3f} > 1 in {muscle}")


@dataclass(frozen=True)
class ArmAnthropometrics:
    forearm_mass: float = 1.5
    forearm_length: float = 0.28
    com_ratio: float = 0.43
    inertia: float | None = None
    hand_distance: float = 0.28
    gravity: float = 9.81
    elevation_offset_deg: float = 90.0

    def __post_init__(self):
        for name in ("forearm_mass", "forearm_length", "hand_distance", "gravity"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.com_ratio < 1.0:
            raise ValueError("com_ratio must lie in (0, 1)")
        if self.inertia is not None and not self.inertia > 0:
            raise ValueError("inertia must be positive")

    @property
    def moment_of_inertia(self) -> float:
        if self.inertia is not None:
            return self.inertia
        return self.forearm_mass * (self.forearm_length * 0.526) ** 2

    @property
    def com_distance(self) -> float:
        return self.com_ratio * self.forearm_length


def inverse_dynamics_torque(q, mass: float, anthro: ArmAnthropometrics | None = None,
                            dt: float = 1 / 125):
    """Elbow torque (N*m) needed to move forearm + dumbbell along ``q`` (deg).

    tau = (I_f + m_d l_h^2) qdd + (m_f l_cm + m_d l_h) g cos(theta), with
    theta = q - 90 deg the forearm elevation and qdd from second differences.
    """
    anthro = anthro or ArmAnthropometrics()
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] < 3:
        raise ValueError("inverse dynamics needs at least 3 samples")
    if mass < 0:
        raise ValueError("load mass must be non-negative")
    qr = np.deg2rad(q)
    qdd = np.empty_like(qr)
    qdd[..., 1:-1] = (qr[..., 2:] - 2.0 * qr[..., 1:-1] + qr[..., :-2]) / dt ** 2
    qdd[..., 0] = qdd[..., 1]
    qdd[..., -1] = qdd[..., -2]
    theta = np.deg2rad(q - anthro.elevation_offset_deg)
    inertia = anthro.moment_of_inertia + mass * anthro.hand_distance ** 2
    lever = anthro.forearm_mass * anthro.com_distance + mass * anthro.hand_distance
    return inertia * qdd + lever * anthro.gravity * np.cos(theta)


@dataclass(frozen=True)
class TrialSpec:
    load: float = 0.0
    repetitions: int = 2
    q_min: float = 10.0
    q_max: float = 130.0
    period: float = 2.0
    rest: float = 0.4
    noise: float = 0.0
    angle_noise_deg: float = 0.0
    jitter: bool = True
    seed: int = 0
    rate_hz: float = 125.0

    def __post_init__(self):
        if self.load < 0:
            raise ValueError("load must be non-negative")
        if self.period <= 0:
            raise ValueError("period must be positive")
        if self.repetitions < 1:
            raise ValueError("need at least one repetition")
        if not self.q_min < self.q_max:
            raise ValueError("q_min must be below q_max")

    @property
    def n_samples(self) -> int:
        # room for the slowest jittered period so every trial has one length
        span = 2 * self.rest + self.repetitions * self.period * (1.15 if self.jitter else 1.0)
        return int(round(span * self.rate_hz))


# envelope construction constants
DELTA = 0.2
FLEXOR_GAINS = (1.0, 0.85)
EXTENSOR_GAINS = (1.0, 0.8)
EXT_BASE = 0.005
EXT_PER_KG = 0.012
EXT_OFFSET = 0.004
DEEP_BASE = 0.005


def angle_profile(spec: TrialSpec, rng: np.random.Generator):
    n = spec.n_samples
    t = np.arange(n) / spec.rate_hz
    if spec.jitter:
        period = spec.period * rng.uniform(0.85, 1.15)
        q_lo = spec.q_min + rng.uniform(-5.0, 5.0)
        q_hi = spec.q_max + rng.uniform(-10.0, 10.0)
        start = spec.rest * rng.uniform(0.5, 1.5)
    else:
        period, q_lo, q_hi, start = spec.period, spec.q_min, spec.q_max, spec.rest
    start = min(start, t[-1] - spec.repetitions * period)
    phase = np.clip((t - start) / period, 0.0, spec.repetitions)
    q = q_lo + (q_hi - q_lo) * 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
    return t, q


def _torque_terms(q1, q2, dt, muscles):
    """Per-muscle active gain G and passive torque P with tau_j = G a + P."""
    gains, passive = [], []
    for m in muscles:
        ml = msk.muscle_length(q1, q2, m)
        lm = (ml - m.slack) / 1000.0
        lbar = lm / m.L0
        vbar = msk.time_derivative(lbar, dt) / m.vmax
        cphi = np.cos(msk.pennation(lm, m))
        ma = m.sign * msk.moment_arm(q1, m) / 1000.0
        scale = m.F0m * cphi * ma
        gains.append(scale * msk.active_fl(lbar, m.gamma) * msk.force_velocity(vbar, m.Af, m.Flen))
        passive.append(scale * msk.passive_fl(lbar, m.kPE, m.eps0))
    return np.array(gains), np.array(passive)


def invert_activation(a, A):
    a = np.asarray(a, dtype=np.float64)
    if abs(A) < msk.ZERO_A:
        return a
    return np.log1p(a * np.expm1(A)) / A


def invert_excitation(u, exc: msk.ExcitationParams):
    """Envelope e with excitation_filter(e) == u (zero initial state)."""
    alpha, beta1, beta2 = exc.coeffs
    u = np.asarray(u, dtype=np.float64)
    prev1 = np.concatenate([[0.0], u[:-1]])
    prev2 = np.concatenate([[0.0, 0.0], u[:-2]])
    x = (u + beta1 * prev1 + beta2 * prev2) / alpha  # x[n] = e[n - d]
    d = exc.d
    if d == 0:
        return x
    return np.concatenate([x[d:], np.full(d, x[-1])])


def generate_trial(spec: TrialSpec, physio: PhysioParamSet | None = None,
                   geometry: ArmGeometry | None = None,
                   anthro: ArmAnthropometrics | None = None,
                   delay: int = 0, name: str = "") -> Trial:
    physio = physio or PhysioParamSet.midbox()
    geometry = geometry or ArmGeometry.reference(physio.boxes)
    anthro = anthro or ArmAnthropometrics()
    muscles, exc = build_muscles(physio.values, geometry, delay)
    rng = np.random.default_rng(spec.seed)
    dt = 1.0 / spec.rate_hz

    t, q1 = angle_profile(spec, rng)
    q2 = np.zeros_like(q1)
    qdot1 = np.asarray(msk.time_derivative(q1, dt))
    tau = inverse_dynamics_torque(q1, spec.load, anthro, dt)

    G, P = _torque_terms(q1, q2, dt, muscles)
    peak_speed = np.max(np.abs(qdot1))
    s = -qdot1 / peak_speed if peak_speed > 0 else np.zeros_like(qdot1)
    ext_phase = np.clip(s, 0.0, None) ** 2

    act = np.zeros((6, len(t)))
    amp = EXT_BASE + EXT_PER_KG * spec.load
    act[3] = EXTENSOR_GAINS[0] * (EXT_OFFSET + amp * ext_phase)
    act[4] = EXTENSOR_GAINS[1] * (EXT_OFFSET + amp * ext_phase)
    act[2] = DEEP_BASE
    act[5] = DEEP_BASE
    fixed = P.sum(axis=0) + sum(G[j] * act[j] for j in (2, 3, 4, 5))
    flex_gain = FLEXOR_GAINS[0] * G[0] + FLEXOR_GAINS[1] * G[1]
    level = np.clip((tau * (1.0 + DELTA * s) - fixed) / flex_gain, 0.0, 1.0)
    act[0] = FLEXOR_GAINS[0] * level
    act[1] = FLEXOR_GAINS[1] * level
    deficit = tau - fixed - G[0] * act[0] - G[1] * act[1]
    act[2] += np.clip(deficit, 0.0, None) / G[2]
    act[5] += np.clip(-deficit, 0.0, None) / np.abs(G[5])

    peaks = act.max(axis=1)
    if peaks.max() > 1.0:
        j = int(np.argmax(peaks))
        raise InfeasibleTrialError(MUSCLES[j], float(peaks[j]))

    emg = np.empty_like(act)
    for j, m in enumerate(muscles):
        u = invert_activation(act[j], float(m.A))
        emg[j] = np.clip(invert_excitation(u, exc), 0.0, 1.0)

    if spec.noise > 0:
        emg = np.clip(emg * np.exp(rng.normal(0.0, spec.noise, size=(6, 1))), 0.0, 1.0)
    q1_rec = q1
    if spec.angle_noise_deg > 0:
        q1_rec = q1 + rng.normal(0.0, spec.angle_noise_deg, size=q1.shape)

    kin = KinematicsTrace(t, q1_rec, q2, qdot1, np.zeros_like(q1), spec.load)
    meta = {"spec": asdict(spec), "physio": physio.as_dict()}
    return Trial(kin, emg, tau, name=name, meta=meta)


@dataclass
class SessionSpec:
    """Sets of trials per load, seeds derived from one master seed."""

    loads: tuple = (0.0, 2.0, 4.0)
    sets_per_load: int = 2
    trials_per_set: int = 10
    seed: int = 0
    trial: dict = field(default_factory=dict)

    def trial_specs(self):
        ss = np.random.SeedSequence(self.seed)
        n = len(self.loads) * self.sets_per_load * self.trials_per_set
        seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(n)]
        k = 0
        for load in self.loads:
            for s in range(self.sets_per_load):
                for i in range(self.trials_per_set):
                    name = f"load{load:g}kg_set{s + 1}_trial{i + 1:02d}"
                    yield name, TrialSpec(load=float(load), seed=seeds[k], **self.trial)
                    k += 1


def generate_session(session: SessionSpec, physio: PhysioParamSet | None = None,
                     geometry: ArmGeometry | None = None,
                     anthro: ArmAnthropometrics | None = None) -> list[Trial]:
    return [generate_trial(spec, physio, geometry, anthro, name=name)
            for name, spec in session.trial_specs()]


def spec_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]
