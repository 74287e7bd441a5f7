"""Torque-constrained muscle synergy extrapolation.

Measured envelopes ``M`` (T x N_m) are factorised as ``S W_m`` with
non-negative synergy activations ``S`` and weights ``W_m``.  Unmeasured
envelopes are then built as ``E_r = S W_r`` with ``W_r`` chosen so that the
musculoskeletal model driven by ``[M, E_r]`` reproduces the inverse-dynamics
torque.  Non-negativity comes from optimising softplus surrogates with Adam.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import msk
from .data import N_CHANNELS
from .signals import vaf
from .trainer import adamw_step


class BaselineDomainError(ValueError):
    pass


class BaselineDivergedError(FloatingPointError):
    def __init__(self, iteration: int, iterate: dict):
        self.iteration = iteration
        self.iterate = iterate
        dump = ", ".join(f"{k}={np.array2string(np.asarray(v), precision=4)}" for k, v in iterate.items())
        super().__init__(f"non-finite torque at iteration {iteration}: {dump}")


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    with np.errstate(divide="ignore"):
        # log(expm1(y)) written to stay finite for large y
        return np.where(y > 30.0, y + np.log(-np.expm1(-np.minimum(y, 700.0))), np.log(np.expm1(np.minimum(y, 30.0))))


@dataclass
class SynergyModel:
    S: np.ndarray
    W_m: np.ndarray
    W_r: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def reconstruct(self) -> np.ndarray:
        return self.S @ self.W_m

    def extrapolated(self) -> np.ndarray:
        return self.S @ self.W_r


@dataclass
class NmfResult:
    S: np.ndarray
    W_m: np.ndarray
    residual: float
    iterations: int
    history: list


def _init_factors(M: np.ndarray, n_syn: int, rng: np.random.Generator):
    T, n = M.shape
    S = np.abs(rng.standard_normal((T, n_syn)))
    W = np.abs(rng.standard_normal((n_syn, n)))
    # match column norms of M
    col = np.linalg.norm(M, axis=0)
    approx = np.linalg.norm(S @ W, axis=0)
    W *= np.where(approx > 0, col / approx, 0.0)
    return S, W


def _check_nonneg(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise BaselineDomainError(f"expected a T x N matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise BaselineDomainError("matrix contains non-finite entries")
    if np.any(M < 0):
        raise BaselineDomainError("matrix has negative entries")
    return M


def nmf_fit(M, n_syn: int = 3, max_iters: int = 4000, tol: float = 1e-6, lr: float = 1e-3,
            seed: int = 0, log_every: int = 100) -> NmfResult:
    """Adam on softplus surrogates minimising mean((M - S W)^2)."""
    M = _check_nonneg(M)
    if n_syn < 1:
        raise BaselineDomainError("need at least one synergy")
    T, n = M.shape
    if not np.any(M):
        return NmfResult(np.zeros((T, n_syn)), np.zeros((n_syn, n)), 0.0, 0, [(0, 0.0)])
    S0, W0 = _init_factors(M, n_syn, np.random.default_rng(seed))
    params = {"S": softplus_inverse(np.maximum(S0, 1e-12)), "W": softplus_inverse(np.maximum(W0, 1e-12))}
    moments: dict = {}
    history = []
    it = 0
    for it in range(1, max_iters + 1):
        leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
        R = M - ad.softplus(leaves["S"]) @ ad.softplus(leaves["W"])
        loss = ad.mean(R * R)
        err = float(loss.value)
        if it == 1 or it % log_every == 0:
            history.append((it, err))
        if err <= tol:
            break
        g = ad.backward(loss)
        params, moments = adamw_step(params, {k: g[leaves[k]] for k in params}, moments, it, lr)
    S = np.logaddexp(0.0, params["S"])
    W = np.logaddexp(0.0, params["W"])
    residual = float(np.mean((M - S @ W) ** 2))
    history.append((it, residual))
    return NmfResult(S, W, residual, it, history)


def nmf_multiplicative(M, n_syn: int = 3, max_iters: int = 4000, tol: float = 1e-6,
                       seed: int = 0) -> NmfResult:
    """Lee-Seung multiplicative updates for the Frobenius objective (cross-check)."""
    M = _check_nonneg(M)
    T, n = M.shape
    if not np.any(M):
        return NmfResult(np.zeros((T, n_syn)), np.zeros((n_syn, n)), 0.0, 0, [(0, 0.0)])
    S, W = _init_factors(M, n_syn, np.random.default_rng(seed))
    tiny = 1e-300
    it = 0
    history = []
    for it in range(1, max_iters + 1):
        W *= (S.T @ M) / (S.T @ S @ W + tiny)
        S *= (M @ W.T) / (S @ W @ W.T + tiny)
        err = float(np.mean((M - S @ W) ** 2))
        if it == 1 or it % 100 == 0:
            history.append((it, err))
        if err <= tol:
            break
    return NmfResult(S, W, float(np.mean((M - S @ W) ** 2)), it, history)


@dataclass
class ExtrapolationResult:
    E_r: np.ndarray           # (T_total, N_r)
    W_r: np.ndarray
    S: np.ndarray
    W_m: np.ndarray
    torque_mse: float
    iterations: int
    history: list


def _segments(lengths):
    bounds = np.cumsum([0] + list(lengths))
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def torque_from_stack(M, E_r, segments, kins, muscles, exc, measured, unmeasured):
    """Torque per segment from measured (T x N_m) and extrapolated (T x N_r) envelopes."""
    taus = []
    for seg, kin in zip(segments, kins):
        rows = [None] * N_CHANNELS
        for j, c in enumerate(measured):
            rows[c] = M[seg, j]
        for j, c in enumerate(unmeasured):
            rows[c] = E_r[seg, j]
        emg = ad.stack(rows, axis=0)
        taus.append(msk.forward_torque(emg, kin, muscles, exc))
    return ad.concat(taus, axis=0)


def extrapolate(S, M, kins, muscles, exc, tau_ref, measured=(0, 1, 3, 4), unmeasured=(2, 5),
                max_iters: int = 2000, tol_tau: float = 0.1, lr: float = 1e-3,
                W_m=None, W_r0=None, mode: str = "frozen", seed: int = 0) -> ExtrapolationResult:
    """Fit ``W_r`` (and, in ``joint`` mode, ``S`` and ``W_m``) to the torque target.

    ``S`` and ``M`` hold the concatenated samples of every trial in ``kins``;
    torque MSE is averaged over all samples.  In ``frozen`` mode ``S`` stays
    fixed; ``joint`` adds the factorisation error to the objective and updates
    all three factors.
    """
    S = _check_nonneg(S)
    M = _check_nonneg(M)
    tau_ref = np.asarray(tau_ref, dtype=np.float64)
    lengths = [len(k.q1) for k in kins]
    if sum(lengths) != S.shape[0] or M.shape[0] != S.shape[0] or tau_ref.shape[0] != S.shape[0]:
        raise BaselineDomainError("S, M, tau_ref and the kinematics must cover the same samples")
    if mode not in ("frozen", "joint"):
        raise BaselineDomainError(f"unknown mode {mode!r}")
    n_syn = S.shape[1]
    n_r = len(unmeasured)
    segs = _segments(lengths)
    if n_r == 0:
        return ExtrapolationResult(np.zeros((S.shape[0], 0)), np.zeros((n_syn, 0)), S, W_m,
                                   float("nan"), 0, [])
    if W_r0 is None:
        rng = np.random.default_rng(seed)
        W_r0 = np.abs(rng.standard_normal((n_syn, n_r))) * (np.mean(M) / max(np.mean(S), 1e-12)) / n_syn
    params = {"W_r": softplus_inverse(W_r0)}
    if mode == "joint":
        if W_m is None:
            raise BaselineDomainError("joint mode needs W_m")
        params["S"] = softplus_inverse(np.maximum(S, 1e-12))
        params["W_m"] = softplus_inverse(np.maximum(W_m, 1e-12))
    moments: dict = {}
    history = []
    err = float("inf")
    it = 0
    for it in range(1, max_iters + 1):
        leaves = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
        S_cur = ad.softplus(leaves["S"]) if mode == "joint" else S
        E_r = S_cur @ ad.softplus(leaves["W_r"])
        tau = torque_from_stack(M, E_r, segs, kins, muscles, exc, measured, unmeasured)
        if not np.all(np.isfinite(ad.value_of(tau))):
            raise BaselineDivergedError(it, {k: np.logaddexp(0.0, v) for k, v in params.items()})
        r = tau - tau_ref
        loss = ad.mean(r * r)
        err = float(ad.value_of(loss))
        history.append((it, err))
        if err <= tol_tau:
            break
        if mode == "joint":
            R = M - S_cur @ ad.softplus(leaves["W_m"])
            loss = loss + ad.mean(R * R)
        if not isinstance(loss, ad.Tensor) or not loss.requires_grad:
            break
        g = ad.backward(loss)
        grads = {k: g.get(leaves[k], np.zeros_like(v)) for k, v in params.items()}
        params, moments = adamw_step(params, grads, moments, it, lr)
    W_r = np.logaddexp(0.0, params["W_r"])
    S_out = np.logaddexp(0.0, params["S"]) if mode == "joint" else S
    W_m_out = np.logaddexp(0.0, params["W_m"]) if mode == "joint" else W_m
    E_r = S_out @ W_r
    tau = ad.value_of(torque_from_stack(M, E_r, segs, kins, muscles, exc, measured, unmeasured))
    return ExtrapolationResult(E_r, W_r, S_out, W_m_out, float(np.mean((tau - tau_ref) ** 2)), it, history)


def fit_report(nmf: NmfResult, M, ext: ExtrapolationResult | None) -> dict:
    rep = {"residual": nmf.residual, "vaf": vaf(M, nmf.S @ nmf.W_m) if np.any(M) else 100.0,
           "nmf_iterations": nmf.iterations}
    if ext is not None:
        rep["torque_mse"] = ext.torque_mse
        rep["torque_iterations"] = ext.iterations
    return rep
