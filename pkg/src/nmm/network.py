"""Attention encoder-decoder mapping kinematics and load to six EMG envelopes.

Encoder tokens are the per-sample kinematic channels, lifted by a linear map;
decoder tokens are the lifted load mass, one per sample.  Optional sinusoidal
position channels are appended to both token streams before lifting.  The
decoder's cross-attention reads the final encoder output in every block, and a
three-layer GELU head with a sigmoid output produces envelopes in (0, 1).

Weights live in an ordered ``dict`` of float64 arrays.  Forward functions take
a mapping of the same keys whose values are arrays or autodiff tensors.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import KinematicsTrace, N_CHANNELS

KIN_CHANNELS = ("q1", "q2", "qdot1", "qdot2")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class NmmConfig:
    d_model: int = 6
    n_blocks: int = 4
    n_heads: int = 12
    d_k: int = 32
    d_v: int = 32
    ffn_hidden: tuple = (64, 128, 256, 128, 64)
    head_hidden: tuple = (64, 32)
    encoder_channels: tuple = KIN_CHANNELS
    n_outputs: int = N_CHANNELS
    unmeasured: tuple = (3, 6)  # 1-based channel numbers
    positional: bool = True
    n_positional: int = 8
    positional_period_s: float = 8.0
    emg_input: bool = False
    angle_scale: float = 90.0
    velocity_scale: float = 180.0
    mass_scale: float = 4.0
    ln_eps: float = 1e-5
    output_bias: float = -2.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ffn_hidden", tuple(self.ffn_hidden))
        object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        object.__setattr__(self, "unmeasured", tuple(int(i) for i in self.unmeasured))
        if self.n_outputs != N_CHANNELS:
            raise ConfigError(f"n_outputs must be {N_CHANNELS}")
        if any(not 1 <= i <= N_CHANNELS for i in self.unmeasured):
            raise ConfigError(f"unmeasured channels must lie in 1..{N_CHANNELS}: {self.unmeasured}")
        if len(set(self.unmeasured)) != len(self.unmeasured):
            raise ConfigError("duplicate unmeasured channel")
        if self.n_blocks < 1 or self.n_heads < 1 or self.d_model < 1:
            raise ConfigError("n_blocks, n_heads and d_model must be >= 1")
        bad = [c for c in self.encoder_channels if c not in KIN_CHANNELS]
        if bad or not self.encoder_channels:
            raise ConfigError(f"encoder channels must be a non-empty subset of {KIN_CHANNELS}")
        if self.positional and (self.n_positional < 2 or self.n_positional % 2):
            raise ConfigError("n_positional must be an even number >= 2")

    @property
    def measured(self) -> tuple[int, ...]:
        """0-based indices of the measured channels."""
        return tuple(i for i in range(self.n_outputs) if i + 1 not in self.unmeasured)

    @property
    def unmeasured_idx(self) -> tuple[int, ...]:
        return tuple(i - 1 for i in self.unmeasured)

    @property
    def n_pos(self) -> int:
        return self.n_positional if self.positional else 0

    @property
    def encoder_in(self) -> int:
        extra = len(self.measured) if self.emg_input else 0
        return len(self.encoder_channels) + extra + self.n_pos

    @property
    def decoder_in(self) -> int:
        return 1 + self.n_pos

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NmmConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown NmmConfig keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- parameters

def _dense(rng, fan_in: int, fan_out: int):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def _mlp_shapes(widths):
    return list(zip(widths[:-1], widths[1:]))


def init_weights(cfg: NmmConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Fan-in scaled symmetric uniform initialisation, in declaration order."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    d, h = cfg.d_model, cfg.n_heads
    w: dict[str, np.ndarray] = {}

    def dense(prefix, fan_in, fan_out):
        w[f"{prefix}.W"], w[f"{prefix}.b"] = _dense(rng, fan_in, fan_out)

    def attention(prefix):
        bound = 1.0 / math.sqrt(d)
        w[f"{prefix}.W_Q"] = rng.uniform(-bound, bound, (h, d, cfg.d_k))
        w[f"{prefix}.W_K"] = rng.uniform(-bound, bound, (h, d, cfg.d_k))
        w[f"{prefix}.W_V"] = rng.uniform(-bound, bound, (h, d, cfg.d_v))
        dense(f"{prefix}.Lambda", h * cfg.d_v, d)

    def norm(prefix):
        w[f"{prefix}.g"] = np.ones(d)
        w[f"{prefix}.b"] = np.zeros(d)

    def ffn(prefix):
        for k, (a, b) in enumerate(_mlp_shapes((d,) + cfg.ffn_hidden + (d,))):
            dense(f"{prefix}.{k}", a, b)

    dense("P_q", cfg.encoder_in, d)
    dense("P_m", cfg.decoder_in, d)
    for j in range(cfg.n_blocks):
        attention(f"enc{j}.self")
        norm(f"enc{j}.ln1")
        ffn(f"enc{j}.ffn")
        norm(f"enc{j}.ln2")
    for j in range(cfg.n_blocks):
        attention(f"dec{j}.self")
        norm(f"dec{j}.ln1")
        attention(f"dec{j}.cross")
        norm(f"dec{j}.ln2")
        ffn(f"dec{j}.ffn")
        norm(f"dec{j}.ln3")
    for k, (a, b) in enumerate(_mlp_shapes((d,) + cfg.head_hidden + (cfg.n_outputs,))):
        dense(f"P_D.{k}", a, b)
    last = len(cfg.head_hidden)
    w[f"P_D.{last}.b"] = np.full(cfg.n_outputs, float(cfg.output_bias))
    return w


def check_weights(w: dict, cfg: NmmConfig) -> None:
    ref = init_weights(cfg)
    if list(ref) != list(w):
        missing = set(ref) - set(w)
        extra = set(w) - set(ref)
        raise ConfigError(f"weight names do not match config (missing {sorted(missing)[:3]}, "
                          f"unexpected {sorted(extra)[:3]})")
    for k, v in w.items():
        val = ad.value_of(v)
        if np.shape(val) != ref[k].shape:
            raise ConfigError(f"{k}: shape {np.shape(val)} != {ref[k].shape}")
        if not np.all(np.isfinite(val)):
            raise ConfigError(f"{k}: non-finite weights")


# ---------------------------------------------------------------- layers

def linear(x, w, prefix):
    return x @ w[f"{prefix}.W"] + w[f"{prefix}.b"]


def layer_norm(x, g, b, eps=1e-5):
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, axis=-1, keepdims=True)
    return xc / ad.sqrt(var + eps) * g + b


def scaled_attention(Q, K, V, W_Q, W_K, W_V):
    """softmax((Q W_Q)(K W_K)^T / sqrt(d_k)) (V W_V) for a single head."""
    if np.shape(ad.value_of(Q))[-1] != np.shape(ad.value_of(W_Q))[0]:
        raise ValueError("query width does not match W_Q")
    if np.shape(ad.value_of(K))[-2] != np.shape(ad.value_of(V))[-2]:
        raise ValueError("keys and values must have the same length")
    d_k = np.shape(ad.value_of(W_Q))[-1]
    q = Q @ W_Q
    k = K @ W_K
    v = V @ W_V
    scores = (q @ ad.swapaxes(k, -1, -2)) / math.sqrt(d_k)
    return ad.softmax(scores, axis=-1) @ v


def _project(x, W):
    """x (..., T, d) through per-head maps W (h, d, k) -> (..., h, T, k), one GEMM."""
    h, d, k = np.shape(ad.value_of(W))
    flat = ad.reshape(ad.transpose(W, (1, 0, 2)), (d, h * k))
    y = x @ flat
    shape = np.shape(ad.value_of(y))
    y = ad.reshape(y, shape[:-1] + (h, k))
    nd = len(shape) - 2
    return ad.transpose(y, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def multi_head(Q, K, V, w, prefix):
    """Lambda(Concat(head_1, ..., head_h)); all heads evaluated as one batch."""
    W_Q, W_K, W_V = w[f"{prefix}.W_Q"], w[f"{prefix}.W_K"], w[f"{prefix}.W_V"]
    h, _, d_k = np.shape(ad.value_of(W_Q))
    d_v = np.shape(ad.value_of(W_V))[-1]
    lead = np.shape(ad.value_of(Q))[:-2]
    Tq = np.shape(ad.value_of(Q))[-2]
    q = _project(Q, W_Q) * (1.0 / math.sqrt(d_k))
    k = _project(K, W_K)
    v = _project(V, W_V)
    heads = ad.softmax(q @ ad.swapaxes(k, -1, -2), axis=-1) @ v   # (..., h, Tq, d_v)
    nd = len(lead)
    heads = ad.transpose(heads, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    concat = ad.reshape(heads, lead + (Tq, h * d_v))
    return linear(concat, w, f"{prefix}.Lambda")


def ffn(x, w, prefix, n_layers):
    for k in range(n_layers):
        x = linear(x, w, f"{prefix}.{k}")
        if k < n_layers - 1:
            x = ad.gelu(x)
    return x


def encoder_block(x, w, j: int, cfg: NmmConfig, hook=None):
    p = f"enc{j}"
    pre1 = x + multi_head(x, x, x, w, f"{p}.self")
    s1 = layer_norm(pre1, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"], cfg.ln_eps)
    pre2 = s1 + ffn(s1, w, f"{p}.ffn", len(cfg.ffn_hidden) + 1)
    if hook is not None:
        hook(p, pre1, pre2)
    return layer_norm(pre2, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"], cfg.ln_eps)


def decoder_block(y, enc_out, w, j: int, cfg: NmmConfig):
    p = f"dec{j}"
    s1 = layer_norm(y + multi_head(y, y, y, w, f"{p}.self"),
                    w[f"{p}.ln1.g"], w[f"{p}.ln1.b"], cfg.ln_eps)
    s2 = layer_norm(s1 + multi_head(s1, enc_out, enc_out, w, f"{p}.cross"),
                    w[f"{p}.ln2.g"], w[f"{p}.ln2.b"], cfg.ln_eps)
    return layer_norm(s2 + ffn(s2, w, f"{p}.ffn", len(cfg.ffn_hidden) + 1),
                      w[f"{p}.ln3.g"], w[f"{p}.ln3.b"], cfg.ln_eps)


# ---------------------------------------------------------------- inputs

def positional_channels(n: int, dt: float, cfg: NmmConfig) -> np.ndarray:
    """(n, n_positional) sin/cos pairs with periods period_s / 2**k seconds."""
    t = np.arange(n) * dt
    cols = []
    for k in range(cfg.n_positional // 2):
        omega = 2.0 * math.pi * (2 ** k) / cfg.positional_period_s
        cols += [np.sin(omega * t), np.cos(omega * t)]
    return np.stack(cols, axis=1)


def encoder_features(kin: KinematicsTrace, cfg: NmmConfig, emg=None) -> np.ndarray:
    scale = {"q1": cfg.angle_scale, "q2": cfg.angle_scale,
             "qdot1": cfg.velocity_scale, "qdot2": cfg.velocity_scale}
    cols = [getattr(kin, c) / scale[c] for c in cfg.encoder_channels]
    if cfg.emg_input:
        if emg is None:
            raise ValueError("emg_input is enabled but no measured envelopes were given")
        cols += [np.asarray(emg)[i] for i in cfg.measured]
    feats = np.stack(cols, axis=1)
    if cfg.positional:
        feats = np.concatenate([feats, positional_channels(len(kin), kin.dt, cfg)], axis=1)
    return feats


def decoder_features(n: int, mass: float, dt: float, cfg: NmmConfig) -> np.ndarray:
    feats = np.full((n, 1), float(mass) / cfg.mass_scale)
    if cfg.positional:
        feats = np.concatenate([feats, positional_channels(n, dt, cfg)], axis=1)
    return feats


def forward(w, enc_in, dec_in, cfg: NmmConfig):
    """Envelopes (..., T, 6) from encoder (..., T, C_e) and decoder (..., T, C_d) inputs."""
    x = linear(enc_in, w, "P_q")
    for j in range(cfg.n_blocks):
        x = encoder_block(x, w, j, cfg)
    y = linear(dec_in, w, "P_m")
    for j in range(cfg.n_blocks):
        y = decoder_block(y, x, w, j, cfg)
    n = len(cfg.head_hidden) + 1
    for k in range(n):
        y = linear(y, w, f"P_D.{k}")
        if k < n - 1:
            y = ad.gelu(y)
    return ad.sigmoid(y)


def nmm_forward(kin: KinematicsTrace, mass: float, w: dict, cfg: NmmConfig, emg=None) -> np.ndarray:
    """(6, T) envelope matrix for one trial."""
    if len(kin) < 1:
        raise ValueError("empty kinematics trace")
    check_weights(w, cfg)
    dt = kin.dt if len(kin) > 1 else 1.0
    enc = encoder_features(kin, cfg, emg)
    dec = decoder_features(len(kin), mass, dt, cfg)
    out = forward(w, enc, dec, cfg)
    return np.asarray(ad.value_of(out)).T


def predict_deep(kin: KinematicsTrace, mass: float, w: dict, cfg: NmmConfig, emg=None) -> np.ndarray:
    """Only the unmeasured channels, (len(cfg.unmeasured), T)."""
    full = nmm_forward(kin, mass, w, cfg, emg)
    return full[list(cfg.unmeasured_idx)]
