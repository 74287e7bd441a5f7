"""EMG and joint-angle pre-processing, plus the evaluation metrics.

The envelope chain is band-pass, full-wave rectification, low-pass, decimation
and MVC normalisation.  All Butterworth filters are 4th order and run forward
and backward (zero phase).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal

EMG_RATE_HZ = 4000.0
ENVELOPE_RATE_HZ = 125.0
BAND_HZ = (10.0, 450.0)
LOWPASS_HZ = 7.0
FILTER_ORDER = 4


class SignalError(ValueError):
    pass


def _sos(kind: str, cutoff, fs: float, order: int = FILTER_ORDER):
    return signal.butter(order, cutoff, btype=kind, fs=fs, output="sos")


def _min_length(sos) -> int:
    # sosfiltfilt's default edge padding
    return 3 * (2 * len(sos) + 1 - min((sos[:, 2] == 0).sum(), (sos[:, 5] == 0).sum()))


def bandpass_rectify_lowpass(raw, fs: float = EMG_RATE_HZ, band=BAND_HZ,
                             lowpass: float = LOWPASS_HZ) -> np.ndarray:
    """Linear envelope at the input rate (before decimation and normalisation)."""
    x = np.asarray(raw, dtype=np.float64)
    bp = _sos("bandpass", band, fs)
    lp = _sos("lowpass", lowpass, fs)
    need = max(_min_length(bp), _min_length(lp)) + 1
    if x.shape[-1] < need:
        raise SignalError(f"series too short for the filters: {x.shape[-1]} < {need} samples")
    if not np.all(np.isfinite(x)):
        raise SignalError("raw EMG contains non-finite samples")
    y = np.abs(signal.sosfiltfilt(bp, x, axis=-1))
    return signal.sosfiltfilt(lp, y, axis=-1)


def emg_envelope(raw, mvc, fs: float = EMG_RATE_HZ, out_rate: float = ENVELOPE_RATE_HZ,
                 band=BAND_HZ, lowpass: float = LOWPASS_HZ) -> np.ndarray:
    """Envelope in [0, 1] at ``out_rate`` from raw EMG (uV) at ``fs``.

    ``raw`` may be one channel (N,) or several (C, N) with one MVC per channel.
    """
    x = np.asarray(raw, dtype=np.float64)
    mvc = np.asarray(mvc, dtype=np.float64)
    if np.any(~np.isfinite(mvc)) or np.any(mvc <= 0):
        raise SignalError("MVC reference must be positive")
    factor = fs / out_rate
    if abs(factor - round(factor)) > 1e-9:
        raise SignalError(f"input rate {fs} Hz is not an integer multiple of {out_rate} Hz")
    env = bandpass_rectify_lowpass(x, fs, band, lowpass)[..., ::int(round(factor))]
    if x.ndim == 2:
        mvc = np.broadcast_to(mvc, (x.shape[0],))[:, None]
    return np.clip(env / mvc, 0.0, 1.0)


def gaussian_kernel(sigma: float, window: int) -> np.ndarray:
    """Unit-sum Gaussian truncated to offsets -window//2 .. window//2."""
    if sigma <= 0 or window < 1:
        raise SignalError("sigma must be positive and window at least 1")
    half = window // 2
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    return k / k.sum()


def smooth_angle(angle, sigma: float = 10.0, window: int = 6) -> np.ndarray:
    """Truncated-Gaussian smoothing with mirrored edges."""
    x = np.asarray(angle, dtype=np.float64)
    k = gaussian_kernel(sigma, window)
    half = len(k) // 2
    if half == 0:
        return x.copy()
    if len(x) <= half:
        raise SignalError(f"series of {len(x)} samples is shorter than the kernel half-width")
    padded = np.pad(x, half, mode="reflect")
    return np.convolve(padded, k, mode="valid")


def wide_smoothing(sigma: float = 10.0) -> dict:
    """Kernel settings that keep +-3 sigma of the Gaussian."""
    return {"sigma": sigma, "window": int(6 * sigma + 1)}


def angular_velocity(angle, dt: float) -> np.ndarray:
    """Central differences inside, one-sided at the ends (deg/s)."""
    x = np.asarray(angle, dtype=np.float64)
    if dt <= 0:
        raise SignalError("dt must be positive")
    if len(x) < 2:
        raise SignalError("need at least two samples")
    return np.gradient(x, dt)


def welch_psd(x, segment_len: int = 256, overlap: float = 0.5, window: str = "hann",
              fs: float = ENVELOPE_RATE_HZ, detrend: bool = False):
    """Averaged periodogram ``(1/K) sum |X_i(f)|^2 / N`` over windowed segments.

    Returns the non-negative DFT frequencies (Hz) and P_xx at those bins.
    ``detrend`` removes each segment's mean before windowing.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise SignalError("welch_psd expects a 1-d series")
    if segment_len > len(x):
        raise SignalError(f"segment of {segment_len} samples is longer than the signal ({len(x)})")
    if not 0.0 <= overlap < 1.0:
        raise SignalError("overlap must lie in [0, 1)")
    step = max(1, int(round(segment_len * (1.0 - overlap))))
    segs = sliding_window_view(x, segment_len)[::step]
    if detrend:
        segs = segs - segs.mean(axis=1, keepdims=True)
    segs = segs * signal.get_window(window, segment_len)
    X = np.fft.rfft(segs, axis=1)
    pxx = np.mean(np.abs(X) ** 2, axis=0) / segment_len
    return np.fft.rfftfreq(segment_len, 1.0 / fs), pxx


def psd_peak_frequency(x, **kw) -> float:
    f, p = welch_psd(x, **kw)
    return float(f[np.argmax(p)])


def l2_norm(y) -> float:
    return float(np.sqrt(np.sum(np.asarray(y, dtype=np.float64) ** 2)))


def rae(y, yhat) -> float:
    """Relative absolute error of ``yhat`` against ground truth ``y``."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise SignalError(f"shape mismatch {y.shape} vs {yhat.shape}")
    den = np.sum(np.abs(y - y.mean()))
    if den == 0:
        raise SignalError("rae is undefined for a constant reference")
    return float(np.sum(np.abs(y - yhat)) / den)


def pcc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise SignalError(f"shape mismatch {x.shape} vs {y.shape}")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sum(xc * xc), np.sum(yc * yc)
    if sx == 0 or sy == 0:
        raise SignalError("pcc is undefined for a constant series")
    return float(np.clip(np.sum(xc * yc) / np.sqrt(sx * sy), -1.0, 1.0))


def vaf(M, M_hat) -> float:
    """Variance accounted for, in percent."""
    M = np.asarray(M, dtype=np.float64)
    M_hat = np.asarray(M_hat, dtype=np.float64)
    den = np.sum(M ** 2)
    if den == 0:
        raise SignalError("vaf is undefined for an all-zero reference")
    return float(100.0 * (1.0 - np.sum((M - M_hat) ** 2) / den))
