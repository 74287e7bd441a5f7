"""Six-muscle elbow model and the 32 personalised, box-bounded parameters.

Boxes for F0m, L0, A, c, kappa and r are physiological ranges per muscle.
The default geometry polynomials are a smooth, self-consistent choice: moment
arms peak near 90 deg of flexion and muscle length is the integral of the
moment arm (virtual work), so length and moment arm can never disagree about
the direction a muscle pulls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .msk import ExcitationParams, MuscleParams

MUSCLES = ("Biclong", "Bicshort", "Brach", "Trilong", "Trilat", "Trimed")
FLEXORS = (0, 1, 2)
EXTENSORS = (3, 4, 5)

F0M_BOX = {
    "Biclong": (312.17, 936.45),
    "Bicshort": (217.80, 653.40),
    "Brach": (493.65, 1480.95),
    "Trilong": (399.25, 1197.75),
    "Trilat": (312.17, 936.45),
    "Trimed": (312.17, 936.45),
}
L0_BOX = {
    "Biclong": (0.1131, 0.1246),
    "Bicshort": (0.1287, 0.1420),
    "Brach": (0.0838, 0.0882),
    "Trilong": (0.1306, 0.1441),
    "Trilat": (0.1112, 0.1226),
    "Trimed": (0.1112, 0.1168),
}
A_BOX = (-3.0, 0.0)
C_BOX = (-1.0, 1.0)
# magnitudes are mm-scale (a "cm" unit label would be implausible); read as mm
KAPPA_BOX = {
    "Biclong": (207.93, 415.86),
    "Bicshort": (207.93, 415.86),
    "Brach": (50.61, 101.22),
    "Trilong": (143.02, 286.05),
    "Trilat": (143.02, 286.05),
    "Trimed": (143.02, 286.05),
}
R_BOX = {
    "Biclong": (12.09, 15.12),
    "Bicshort": (12.09, 15.12),
    "Brach": (4.87, 6.09),
    "Trilong": (20.49, 25.61),
    "Trilat": (20.49, 25.61),
    "Trimed": (20.49, 25.61),
}

# elbow moment-arm polynomial terms (mm/deg, mm/deg^2) added to r
_MA_TERMS = {
    "Biclong": (0.6551, -0.003773),
    "Bicshort": (0.6551, -0.003773),
    "Brach": (0.3449, -0.001795),
    "Trilong": (-0.04, 0.0),
    "Trilat": (-0.04, 0.0),
    "Trimed": (-0.04, 0.0),
}
# shoulder length terms for the biarticular heads (mm/deg)
_SHOULDER_LEN = {"Biclong": (0.2,), "Bicshort": (0.15,), "Trilong": (-0.25,)}
_PHI0 = {"Biclong": 0.0, "Bicshort": 0.0, "Brach": 0.0,
         "Trilong": 0.17, "Trilat": 0.157, "Trimed": 0.157}
# elbow angle (deg) at which fiber length equals L0 in the reference arm
REST_ANGLE = {"flexor": 45.0, "extensor": 110.0}
RAW_LIMIT = 30.0


def bound_reparam(raw, lo, hi):
    """lo + (hi - lo) * sigmoid(raw), strictly inside (lo, hi)."""
    return lo + (hi - lo) * ad.sigmoid(ad.clip(raw, -RAW_LIMIT, RAW_LIMIT))


def bound_reparam_inverse(x, lo, hi):
    p = (np.asarray(x, dtype=np.float64) - lo) / (np.asarray(hi) - lo)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("value must lie strictly inside its box")
    return np.log(p) - np.log1p(-p)


def elbow_length_coeffs(r: float, terms, sign: float) -> tuple:
    """Length polynomial whose derivative is -sign * moment arm (mm per deg)."""
    k = math.pi / 180.0
    x1, x2 = terms
    return (-sign * k * r, -sign * k * x1 / 2.0, -sign * k * x2 / 3.0)


def param_names() -> tuple[str, ...]:
    names = [f"A_{m}" for m in MUSCLES] + ["c1", "c2"]
    for key in ("F0m", "L0", "kappa", "r"):
        names += [f"{key}_{m}" for m in MUSCLES]
    return tuple(names)


def default_boxes() -> dict[str, tuple[float, float]]:
    boxes = {f"A_{m}": A_BOX for m in MUSCLES}
    boxes["c1"] = C_BOX
    boxes["c2"] = C_BOX
    for key, table in (("F0m", F0M_BOX), ("L0", L0_BOX), ("kappa", KAPPA_BOX), ("r", R_BOX)):
        for m in MUSCLES:
            boxes[f"{key}_{m}"] = table[m]
    return boxes


@dataclass
class ArmGeometry:
    """Fixed (non-personalised) muscle constants."""

    len_coeffs: dict
    ma_coeffs: dict
    phi0: dict
    sign: dict
    offset: dict
    gamma: float = 0.45
    Af: float = 0.25
    Flen: float = 1.4
    kPE: float = 4.0
    eps0: float = 0.6
    vmax: float = 10.0
    geometry_unit: str = "mm"

    @classmethod
    def reference(cls, boxes: dict | None = None) -> "ArmGeometry":
        boxes = boxes or default_boxes()
        len_c, ma_c, sign, offset = {}, {}, {}, {}
        for j, m in enumerate(MUSCLES):
            s = 1.0 if j in FLEXORS else -1.0
            r_mid = sum(boxes[f"r_{m}"]) / 2.0
            kappa_mid = sum(boxes[f"kappa_{m}"]) / 2.0
            l0_mid = sum(boxes[f"L0_{m}"]) / 2.0
            elbow = elbow_length_coeffs(r_mid, _MA_TERMS[m], s)
            len_c[m] = (elbow, _SHOULDER_LEN.get(m, ()))
            ma_c[m] = (_MA_TERMS[m],)
            sign[m] = s
            q = REST_ANGLE["flexor" if j in FLEXORS else "extensor"]
            ml = kappa_mid + sum(c * q ** (k + 1) for k, c in enumerate(elbow))
            offset[m] = ml - 1000.0 * l0_mid
        return cls(len_c, ma_c, dict(_PHI0), sign, offset)

    def to_dict(self) -> dict:
        return {
            "len_coeffs": {m: [list(c) for c in v] for m, v in self.len_coeffs.items()},
            "ma_coeffs": {m: [list(c) for c in v] for m, v in self.ma_coeffs.items()},
            "phi0": dict(self.phi0), "sign": dict(self.sign), "offset": dict(self.offset),
            "gamma": self.gamma, "Af": self.Af, "Flen": self.Flen, "kPE": self.kPE,
            "eps0": self.eps0, "vmax": self.vmax, "geometry_unit": self.geometry_unit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArmGeometry":
        d = dict(d)
        d["len_coeffs"] = {m: tuple(tuple(c) for c in v) for m, v in d["len_coeffs"].items()}
        d["ma_coeffs"] = {m: tuple(tuple(c) for c in v) for m, v in d["ma_coeffs"].items()}
        return cls(**d)


@dataclass
class PhysioParamSet:
    """The 32 personalised parameters, stored as unbounded raw values."""

    raw: np.ndarray = field(default_factory=lambda: np.zeros(32))
    boxes: dict = field(default_factory=default_boxes)

    def __post_init__(self):
        self.raw = np.asarray(self.raw, dtype=np.float64).copy()
        names = param_names()
        if self.raw.shape != (len(names),):
            raise ValueError(f"expected {len(names)} raw parameters, got {self.raw.shape}")
        missing = [n for n in names if n not in self.boxes]
        if missing:
            raise ValueError(f"missing boxes for {missing}")
        for n in names:
            lo, hi = self.boxes[n]
            if not lo < hi:
                raise ValueError(f"empty box for {n}: [{lo}, {hi}]")

    names = property(lambda self: param_names())

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.boxes[n][0] for n in self.names])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.boxes[n][1] for n in self.names])

    @property
    def values(self) -> np.ndarray:
        return bound_reparam(self.raw, self.lo, self.hi)

    def bounded(self, raw=None):
        """Bounded values for ``raw`` (defaults to the stored vector); tensor-aware."""
        return bound_reparam(self.raw if raw is None else raw, self.lo, self.hi)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.values)))

    @classmethod
    def from_values(cls, values: dict | np.ndarray, boxes: dict | None = None) -> "PhysioParamSet":
        boxes = dict(boxes or default_boxes())
        names = param_names()
        if isinstance(values, dict):
            values = np.array([values[n] for n in names])
        lo = np.array([boxes[n][0] for n in names])
        hi = np.array([boxes[n][1] for n in names])
        return cls(bound_reparam_inverse(values, lo, hi), boxes)

    @classmethod
    def midbox(cls, boxes: dict | None = None) -> "PhysioParamSet":
        return cls(np.zeros(32), dict(boxes or default_boxes()))

    def copy(self) -> "PhysioParamSet":
        return PhysioParamSet(self.raw.copy(), dict(self.boxes))


def build_muscles(values, geometry: ArmGeometry, delay: int = 0):
    """MuscleParams list and ExcitationParams from a 32-vector (array or Tensor)."""
    idx = {n: i for i, n in enumerate(param_names())}
    muscles = []
    for m in MUSCLES:
        muscles.append(MuscleParams(
            name=m,
            A=values[idx[f"A_{m}"]],
            F0m=values[idx[f"F0m_{m}"]],
            L0=values[idx[f"L0_{m}"]],
            phi0=geometry.phi0[m],
            kappa=values[idx[f"kappa_{m}"]],
            r=values[idx[f"r_{m}"]],
            len_coeffs=geometry.len_coeffs[m],
            ma_coeffs=geometry.ma_coeffs[m],
            sign=geometry.sign[m],
            slack=geometry.offset[m],
            gamma=geometry.gamma, Af=geometry.Af, Flen=geometry.Flen,
            kPE=geometry.kPE, eps0=geometry.eps0, vmax=geometry.vmax,
            geometry_unit=geometry.geometry_unit,
        ))
    exc = ExcitationParams(values[idx["c1"]], values[idx["c2"]], delay)
    return muscles, exc
