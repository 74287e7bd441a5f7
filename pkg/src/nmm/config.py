"""Run configuration: one file, one master seed, validated before any work starts.

Files may be JSON or YAML.  Unknown keys are rejected at every level.  The
serialised form always spells out every field, so parse -> dump -> parse is
the identity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

import jsonschema
import yaml

from .network import NmmConfig
from .physio import default_boxes, param_names
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}


def _props_for(cls, skip=("seed",)) -> dict:
    props = {}
    for f in fields(cls):
        if f.name in skip:
            continue
        d = f.default
        if isinstance(d, bool):
            props[f.name] = _BOOL
        elif isinstance(d, int):
            props[f.name] = _INT
        elif isinstance(d, float):
            props[f.name] = _NUM
        elif isinstance(d, tuple):
            item = {"type": "string"} if d and isinstance(d[0], str) else _NUM
            if d and isinstance(d[0], int) and not isinstance(d[0], bool):
                item = _INT
            props[f.name] = {"type": "array", "items": item}
        else:
            props[f.name] = {}
    return {"type": "object", "properties": props, "additionalProperties": False}


@dataclass
class SynthSection:
    loads: tuple = (0.0, 2.0, 4.0)
    sets_per_load: int = 2
    trials_per_set: int = 10
    repetitions: int = 1
    period: float = 1.6
    rest: float = 0.2
    q_min: float = 10.0
    q_max: float = 130.0
    noise: float = 0.0
    angle_noise_deg: float = 0.0
    jitter: bool = True

    def trial_kwargs(self) -> dict:
        return {k: getattr(self, k) for k in
                ("repetitions", "period", "rest", "q_min", "q_max", "noise", "angle_noise_deg", "jitter")}


@dataclass
class BaselineSection:
    n_syn: int = 3
    nmf_iters: int = 4000
    tol_m: float = 1e-6
    torque_iters: int = 2000
    tol_tau: float = 0.1
    lr: float = 1e-3
    mode: str = "frozen"


SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "network": _props_for(NmmConfig),
        "train": _props_for(TrainConfig),
        "synth": _props_for(SynthSection, skip=()),
        "baseline": _props_for(BaselineSection, skip=()),
        "boxes": {
            "type": "object",
            "propertyNames": {"enum": list(param_names())},
            "additionalProperties": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2},
        },
        "delay": {"type": "integer", "minimum": 0},
    },
    "additionalProperties": False,
}
SCHEMA["properties"]["baseline"]["properties"]["mode"] = {"enum": ["frozen", "joint"]}


@dataclass
class RunConfig:
    seed: int = 0
    network: NmmConfig = field(default_factory=NmmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSection = field(default_factory=SynthSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    boxes: dict = field(default_factory=default_boxes)
    delay: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        try:
            jsonschema.validate(d, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config error at {where}: {exc.message}") from None
        seed = d.get("seed", 0)
        boxes = default_boxes()
        boxes.update({k: tuple(v) for k, v in d.get("boxes", {}).items()})
        for k, (lo, hi) in boxes.items():
            if not lo < hi:
                raise ConfigError(f"config error at boxes/{k}: empty box [{lo}, {hi}]")
        synth = dict(d.get("synth", {}))
        if "loads" in synth:
            synth["loads"] = tuple(float(x) for x in synth["loads"])
        try:
            return cls(
                seed=seed,
                network=NmmConfig(**{**d.get("network", {}), "seed": seed}),
                train=TrainConfig(**{**d.get("train", {}), "seed": seed}),
                synth=SynthSection(**synth),
                baseline=BaselineSection(**d.get("baseline", {})),
                boxes=boxes,
                delay=d.get("delay", 0),
            )
        except ValueError as exc:
            raise ConfigError(f"config error: {exc}") from None

    def to_dict(self) -> dict:
        net = self.network.to_dict()
        net.pop("seed")
        tr = self.train.to_dict()
        tr.pop("seed")
        synth = {f.name: getattr(self.synth, f.name) for f in fields(SynthSection)}
        synth["loads"] = list(synth["loads"])
        return {
            "seed": self.seed,
            "network": net,
            "train": tr,
            "synth": synth,
            "baseline": {f.name: getattr(self.baseline, f.name) for f in fields(BaselineSection)},
            "boxes": {k: list(self.boxes[k]) for k in param_names()},
            "delay": self.delay,
        }

    def dumps(self, fmt: str = "json") -> str:
        d = self.to_dict()
        if fmt == "yaml":
            return yaml.safe_dump(d, sort_keys=True)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def loads(text: str, fmt: str = "json") -> RunConfig:
    try:
        d = yaml.safe_load(text) if fmt == "yaml" else json.loads(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping at the top level")
    return RunConfig.from_dict(d)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: config file not found")
    fmt = "yaml" if path.suffix.lower() in (".yaml", ".yml") else "json"
    return loads(path.read_text(encoding="utf-8"), fmt)
