"""EMG-driven Hill-type forward dynamics: envelopes in, elbow torque out.

All functions are pure.  They are written against :mod:`nmm.autodiff`, so the
same code evaluates plain floats/arrays or records a graph when any argument
(an envelope, a parameter) is a :class:`~nmm.autodiff.Tensor`.

Units: joint angles in degrees for the geometry polynomials, muscle length and
moment arm polynomials in millimetres, fiber length in metres, force in N,
torque in N*m.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import EmgEnvelopeSet, KinematicsTrace, N_CHANNELS

ZERO_A = 1e-6


class BoundsError(ValueError):
    """A model constant is outside its admissible range."""


class DomainError(ValueError):
    """An input signal is outside the domain of an operation."""


def _v(x):
    return np.asarray(ad.value_of(x), dtype=np.float64)


@dataclass(frozen=True)
class ExcitationParams:
    c1: float = 0.0
    c2: float = 0.0
    d: int = 0

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 0:
            raise BoundsError(f"delay d must be a non-negative integer, got {self.d}")
        excitation_coeffs(self.c1, self.c2)

    @property
    def coeffs(self):
        return excitation_coeffs(self.c1, self.c2)


def excitation_coeffs(c1, c2):
    """(alpha, beta1, beta2) from the two pole constants; unit DC gain."""
    for name, c in (("c1", c1), ("c2", c2)):
        if not abs(float(_v(c))) < 1.0:
            raise BoundsError(f"|{name}| must be < 1, got {float(_v(c))}")
    beta1 = c1 + c2
    beta2 = c1 * c2
    alpha = 1.0 + beta1 + beta2
    return alpha, beta1, beta2


def excitation_filter(e, p: ExcitationParams):
    """u[n] = alpha*e[n-d] - beta1*u[n-1] - beta2*u[n-2], zero initial state.

    Filters along the last axis, so a (channels, T) block is handled at once.
    """
    ev = _v(e)
    if ev.shape[-1] == 0:
        return np.zeros(ev.shape)
    if np.isnan(ev).any():
        raise DomainError("excitation_filter: NaN in EMG input")
    if ev.min() < 0.0 or ev.max() > 1.0:
        raise DomainError("excitation_filter: EMG envelope must lie in [0, 1]")
    if ev.shape[-1] <= p.d:
        raise DomainError(f"series length {ev.shape[-1]} must exceed delay {p.d}")
    alpha, beta1, beta2 = excitation_coeffs(p.c1, p.c2)
    return ad.iir_filter(e, alpha, beta1, beta2, int(p.d))


def activation(u, A):
    """a = (exp(A u) - 1) / (exp(A) - 1); a = u in the linear limit A -> 0."""
    uv = _v(u)
    if np.isnan(uv).any() or uv.min(initial=0.0) < 0.0 or uv.max(initial=0.0) > 1.0:
        raise DomainError("activation: excitation must lie in [0, 1]")
    Av = float(_v(A))
    if not -3.0 - 1e-12 <= Av <= 1e-12:
        raise BoundsError(f"activation shape A must lie in [-3, 0], got {Av}")
    if abs(Av) < ZERO_A:
        # exact limit; keeps a derivative w.r.t. A through the first-order term
        return u + 0.5 * A * u * (u - 1.0)
    return (ad.exp(A * u) - 1.0) / (ad.exp(A) - 1.0)


@dataclass
class MuscleParams:
    """Constants of one musculotendon actuator.

    ``len_coeffs[i][k]`` multiplies ``q_i ** (k + 1)`` (joint i, degrees, mm) and
    ``ma_coeffs[dof][k]`` likewise for the moment arm.  ``sign`` is +1 for a
    flexor and -1 for an extensor of the torque degree of freedom.  ``slack``
    (mm) is subtracted from the musculotendon length to obtain fiber length;
    0 reproduces the literal length/optimal-length ratio.
    """

    name: str
    A: float
    F0m: float
    L0: float
    phi0: float
    kappa: float
    r: float
    len_coeffs: tuple = ((), ())
    ma_coeffs: tuple = ((),)
    sign: float = 1.0
    slack: float = 0.0
    gamma: float = 0.45
    Af: float = 0.25
    Flen: float = 1.4
    kPE: float = 4.0
    eps0: float = 0.6
    vmax: float = 10.0
    geometry_unit: str = "mm"
    bounds: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        checks = {
            "F0m": float(_v(self.F0m)) > 0,
            "L0": float(_v(self.L0)) > 0,
            "phi0": 0.0 <= self.phi0 < math.pi / 2,
            "Flen": self.Flen > 1.0,
            "Af": self.Af > 0.0,
            "eps0": self.eps0 > 0.0,
            "vmax": self.vmax > 0.0,
            "gamma": self.gamma > 0.0,
            "A": -3.0 - 1e-12 <= float(_v(self.A)) <= 1e-12,
        }
        for key, ok in checks.items():
            if not ok:
                raise BoundsError(f"{self.name}: invalid {key}={getattr(self, key)!r}")
        if self.geometry_unit not in ("mm", "cm"):
            raise BoundsError(f"{self.name}: geometry_unit must be 'mm' or 'cm'")
        for key, (lo, hi) in self.bounds.items():
            val = float(_v(getattr(self, key)))
            if not lo <= val <= hi:
                raise BoundsError(f"{self.name}: {key}={val} outside box [{lo}, {hi}]")

    @property
    def unit_scale(self) -> float:
        """Factor taking kappa and r to millimetres."""
        return 10.0 if self.geometry_unit == "cm" else 1.0

    def with_values(self, **kw) -> "MuscleParams":
        return replace(self, **kw)


def _poly_no_const(q, coeffs):
    """sum_k coeffs[k] * q**(k+1), Horner form."""
    if len(coeffs) == 0:
        return 0.0 * q
    acc = 0.0 * q + coeffs[-1]
    for c in reversed(coeffs[:-1]):
        acc = acc * q + c
    return acc * q


def muscle_length(q1, q2, m: MuscleParams):
    """Musculotendon length in mm from the two joint angles in degrees."""
    for q in (q1, q2):
        if np.isnan(_v(q)).any():
            raise DomainError("muscle_length: NaN joint angle")
    out = m.kappa * m.unit_scale
    for q, coeffs in zip((q1, q2), m.len_coeffs):
        out = out + _poly_no_const(q, tuple(coeffs))
    return out


def moment_arm(q, m: MuscleParams, dof: int = 0):
    """Moment-arm magnitude in mm about ``dof`` at joint angle ``q`` (deg)."""
    if np.isnan(_v(q)).any():
        raise DomainError("moment_arm: NaN joint angle")
    return m.r * m.unit_scale + _poly_no_const(q, tuple(m.ma_coeffs[dof]))


def active_fl(lbar, gamma=0.45):
    return ad.exp(-((lbar - 1.0) ** 2) / gamma)


def fv_breakpoint(Af, Flen):
    """Velocity where the lengthening curve switches to its linear extension."""
    return 10.0 * (Flen - 1.0) * (0.95 * Flen - 1.0) / ((1.0 + 1.0 / Af) * Flen)


def force_velocity(vbar, Af=0.25, Flen=1.4):
    """Piecewise normalized force-velocity curve.

    Negative ``vbar`` is shortening.  Each branch is evaluated on the input
    clamped to its own interval so unselected branches stay finite.
    """
    if not (Flen > 1.0 and Af > 0.0):
        raise BoundsError(f"force_velocity needs Flen > 1 and Af > 0, got Flen={Flen}, Af={Af}")
    psi = fv_breakpoint(Af, Flen)
    inv = 1.0 / Af
    vv = _v(vbar)

    v1 = ad.clip(vbar, -np.inf, -1.0)
    b1 = (v1 + 1.0) / (1.0 + inv)
    v2 = ad.clip(vbar, -1.0, 0.0)
    b2 = (v2 + 1.0) / (1.0 - v2 * inv)
    v3 = ad.clip(vbar, 0.0, psi)
    k = 2.0 + 2.0 * inv
    b3 = (k * v3 * Flen + Flen - 1.0) / (k * v3 + Flen - 1.0)
    v4 = ad.clip(vbar, psi, np.inf)
    b4 = Flen / (20.0 * (Flen - 1.0)) * (
        (1.0 + inv) * Flen * v4 / (10.0 * (Flen - 1.0)) + 18.05 * Flen - 18.0)

    return ad.where(vv <= -1.0, b1,
                    ad.where(vv <= 0.0, b2,
                             ad.where(vv <= psi, b3, b4)))


def passive_fl(lbar, kPE=4.0, eps0=0.6):
    """Exponential below the strain knee 1 + eps0, linear continuation above."""
    knee = 1.0 + eps0
    lv = _v(lbar)
    l_lo = ad.clip(lbar, -np.inf, knee)
    low = ad.exp(kPE * (l_lo - 1.0) / eps0) / math.exp(kPE)
    l_hi = ad.clip(lbar, knee, np.inf)
    high = 1.0 + (kPE / eps0) * (l_hi - knee)
    return ad.where(lv <= knee, low, high)


def pennation(lm, m: MuscleParams):
    """Pennation angle (rad) from fiber length ``lm`` (m)."""
    lv = _v(lm)
    zero_len = lv == 0.0
    safe = ad.where(zero_len, 1.0, lm) if ad.is_tensor(lm) else np.where(zero_len, 1.0, lv)
    w = m.L0 * math.sin(m.phi0) / safe
    wv = _v(w)
    inner = ad.asin(ad.clip(w, 0.0, 1.0 - 1e-12))
    phi = ad.where(wv >= 1.0, math.pi / 2, ad.where(wv <= 0.0, 0.0, inner))
    return ad.where(zero_len, 0.0, phi)


def muscle_force(a, lbar, vbar, lm, m: MuscleParams):
    fa = active_fl(lbar, m.gamma)
    fv = force_velocity(vbar, m.Af, m.Flen)
    fp = passive_fl(lbar, m.kPE, m.eps0)
    return m.F0m * (a * fa * fv + fp) * ad.cos(pennation(lm, m))


def joint_torque(forces, moment_arms):
    """Sum over muscles of force (N) times moment arm (m)."""
    forces, moment_arms = list(forces), list(moment_arms)
    if len(forces) != len(moment_arms):
        raise ValueError(f"{len(forces)} forces but {len(moment_arms)} moment arms")
    total = 0.0
    for f, ma in zip(forces, moment_arms):
        total = total + f * ma
    return total


def time_derivative(x, dt: float):
    """Central differences along the last axis, one-sided at both ends."""
    n = np.shape(_v(x))[-1]
    if n < 2:
        raise DomainError("need at least two samples to differentiate")
    if n == 2:
        d = (x[..., 1:] - x[..., :1]) / dt
        return ad.concat([d, d], axis=-1)
    first = (x[..., 1:2] - x[..., 0:1]) / dt
    mid = (x[..., 2:] - x[..., :-2]) / (2.0 * dt)
    last = (x[..., -1:] - x[..., -2:-1]) / dt
    return ad.concat([first, mid, last], axis=-1)


@dataclass
class MuscleStateSeries:
    u: np.ndarray
    a: np.ndarray
    lm: np.ndarray
    lbar: np.ndarray
    vbar: np.ndarray
    force: np.ndarray
    moment_arm: np.ndarray


def muscle_pipeline(e, q1, q2, dt, m: MuscleParams, exc: ExcitationParams, dof: int = 0):
    """One channel: envelope -> (force N, signed moment arm m, state series)."""
    u = excitation_filter(e, exc)
    u = ad.clip(u, 0.0, 1.0)
    a = activation(u, m.A)
    ml = muscle_length(q1, q2, m)
    lm = (ml - m.slack) / 1000.0
    lbar = lm / m.L0
    vbar = time_derivative(lbar, dt) / m.vmax
    force = muscle_force(a, lbar, vbar, lm, m)
    ma = m.sign * moment_arm((q1, q2)[dof], m, dof) / 1000.0
    return force, ma, MuscleStateSeries(u, a, lm, lbar, vbar, force, ma)


def forward_torque(emg, kin: KinematicsTrace, muscles, exc: ExcitationParams,
                   dof: int = 0, return_states: bool = False):
    """Torque series (N*m) at ``dof`` from six envelopes.

    ``emg`` is (6, T), or (B, 6, T) when the kinematics arrays are (B, T); it may
    also be an :class:`EmgEnvelopeSet`, whose sample rate must match ``kin``.
    """
    if isinstance(emg, EmgEnvelopeSet):
        if abs(emg.rate_hz - kin.rate_hz) > 1e-6 * kin.rate_hz:
            raise ValueError(f"EMG rate {emg.rate_hz} Hz != kinematics rate {kin.rate_hz} Hz")
        emg = emg.values
    shape = np.shape(_v(emg))
    if len(muscles) != N_CHANNELS or shape[-2] != N_CHANNELS:
        raise ValueError(f"expected {N_CHANNELS} channels and muscles, got "
                         f"{shape[-2]} channels and {len(muscles)} muscles")
    T = shape[-1]
    if T < 3:
        raise ValueError("forward_torque needs at least 3 samples")
    if np.shape(kin.q1)[-1] != T:
        raise ValueError(f"EMG has {T} samples, kinematics {np.shape(kin.q1)[-1]}")
    forces, arms, states = [], [], []
    for j, m in enumerate(muscles):
        f, ma, st = muscle_pipeline(emg[..., j, :], kin.q1, kin.q2, kin.dt, m, exc, dof)
        forces.append(f)
        arms.append(ma)
        states.append(st)
    tau = joint_torque(forces, arms)
    if return_states:
        return tau, states
    return tau
