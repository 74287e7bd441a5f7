import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal as sps

from nmm import signals as sg


def tone(freq, amp=1.0, seconds=2.0, fs=sg.EMG_RATE_HZ):
    t = np.arange(int(seconds * fs)) / fs
    return amp * np.sin(2 * np.pi * freq * t)


# envelope -----------------------------------------------------------------

def test_zero_input_gives_zero_envelope():
    env = sg.emg_envelope(np.zeros(8000), mvc=1.0)
    assert env.shape == (250,)
    assert np.all(env == 0.0)


def test_rectified_sine_plateau():
    A = 3.0
    lin = sg.bandpass_rectify_lowpass(tone(60.0, A))
    plateau = lin[2000:6000]
    assert np.mean(plateau) == pytest.approx(2 * A / math.pi, rel=0.05)


def test_high_tone_attenuation_matches_filter_response():
    # forward-backward doubles the magnitude response in dB
    lin_hi = sg.bandpass_rectify_lowpass(tone(500.0))[2000:6000]
    lin_lo = sg.bandpass_rectify_lowpass(tone(60.0))[2000:6000]
    sos = sps.butter(4, sg.BAND_HZ, btype="bandpass", fs=sg.EMG_RATE_HZ, output="sos")
    _, h = sps.sosfreqz(sos, worN=[60.0, 500.0], fs=sg.EMG_RATE_HZ)
    gain = np.abs(h) ** 2
    # sampled rectified means differ from 2/pi at 8 samples per period
    rect = np.mean(np.abs(tone(500.0))) / np.mean(np.abs(tone(60.0)))
    expected = rect * gain[1] / gain[0]
    assert np.mean(lin_hi) / np.mean(lin_lo) == pytest.approx(expected, rel=0.01)
    assert gain[1] / gain[0] < 0.3


def test_envelope_range_and_multichannel():
    rng = np.random.default_rng(0)
    raw = np.tile(rng.normal(0, 50.0, 8000), (3, 1))
    env = sg.emg_envelope(raw, mvc=[10.0, 40.0, 1e6])
    assert env.shape == (3, 250)
    assert env.min() >= 0.0 and env.max() <= 1.0
    assert np.all(env[0] >= env[1]) and np.all(env[1] >= env[2])


def test_envelope_monotone_in_scale():
    rng = np.random.default_rng(1)
    raw = rng.normal(0, 1.0, 8000)
    small = sg.emg_envelope(raw, mvc=100.0)
    big = sg.emg_envelope(2 * raw, mvc=100.0)
    assert np.allclose(big, np.minimum(2 * small, 1.0), atol=1e-12)


@pytest.mark.parametrize("mvc", [0.0, -1.0, float("nan")])
def test_envelope_rejects_bad_mvc(mvc):
    with pytest.raises(sg.SignalError):
        sg.emg_envelope(np.zeros(8000), mvc=mvc)


def test_envelope_rejects_short_series():
    with pytest.raises(sg.SignalError, match="too short"):
        sg.emg_envelope(np.zeros(10), mvc=1.0)


# angle smoothing ----------------------------------------------------------

def test_kernel_unit_sum_and_taps():
    k = sg.gaussian_kernel(10.0, 6)
    assert len(k) == 7
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    assert np.allclose(k, k[::-1])


def test_smooth_constant_unchanged():
    x = np.full(40, 12.5)
    assert np.allclose(sg.smooth_angle(x), x, atol=1e-12)


def test_smooth_impulse_gives_kernel():
    x = np.zeros(41)
    x[20] = 1.0
    y = sg.smooth_angle(x, sigma=2.0, window=6)
    k = sg.gaussian_kernel(2.0, 6)
    assert np.allclose(y[17:24], k, atol=1e-15)
    assert y.sum() == pytest.approx(1.0, abs=1e-12)


def test_smooth_ramp_interior_unchanged():
    x = 0.7 * np.arange(50) + 3.0
    y = sg.smooth_angle(x, sigma=3.0, window=6)
    assert np.max(np.abs(y[3:-3] - x[3:-3])) < 1e-9


def test_wide_smoothing_window():
    assert sg.wide_smoothing(10.0) == {"sigma": 10.0, "window": 61}


def test_angular_velocity_examples():
    dt = 0.008
    assert np.all(sg.angular_velocity(np.full(10, 3.0), dt) == 0.0)
    assert np.allclose(sg.angular_velocity(2.5 * np.arange(10) * dt, dt), 2.5)
    t = np.arange(0, 1, dt)
    w = 2 * np.pi
    err = np.abs(sg.angular_velocity(np.sin(w * t), dt) - w * np.cos(w * t))[1:-1]
    assert err.max() < w ** 3 * dt ** 2


# psd ----------------------------------------------------------------------

def test_psd_sinusoid_on_bin():
    fs, n = 125.0, 256
    f0 = 10 * fs / n
    x = np.sin(2 * np.pi * f0 * np.arange(1024) / fs)
    f, p = sg.welch_psd(x, segment_len=n, fs=fs)
    assert f[np.argmax(p)] == pytest.approx(f0)


def test_psd_white_noise_flat():
    rng = np.random.default_rng(4)
    n = 64
    x = rng.normal(size=n * 101 // 2 + n)
    f, p = sg.welch_psd(x, segment_len=n, window="boxcar", overlap=0.0)
    inner = p[1:-1]
    assert inner.mean() == pytest.approx(1.0, rel=0.1)
    assert np.std(inner) / inner.mean() < 0.4


def test_psd_zero_and_errors():
    f, p = sg.welch_psd(np.zeros(300))
    assert np.all(p == 0)
    with pytest.raises(sg.SignalError):
        sg.welch_psd(np.zeros(100), segment_len=256)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_psd_scales_quadratically(c, seed):
    x = np.random.default_rng(seed).normal(size=300)
    _, p = sg.welch_psd(x)
    _, pc = sg.welch_psd(c * x)
    assert np.allclose(pc, c * c * p, rtol=1e-10, atol=1e-300)


# metrics ------------------------------------------------------------------

def test_metric_trivia():
    x = np.array([1.0, 3.0, 2.0, 5.0])
    assert sg.l2_norm(np.zeros(5)) == 0.0
    assert sg.rae(x, x) == 0.0
    assert sg.pcc(x, x) == 1.0
    assert sg.pcc(x, -x) == -1.0


def test_metric_degenerate_inputs_raise():
    c = np.ones(5)
    with pytest.raises(sg.SignalError):
        sg.rae(c, c)
    with pytest.raises(sg.SignalError):
        sg.pcc(c, np.arange(5.0))
    with pytest.raises(sg.SignalError):
        sg.vaf(np.zeros((2, 2)), np.zeros((2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.integers(3, 40))
def test_metrics_match_elementwise_oracle(seed, n):
    rng = np.random.default_rng(seed)
    y, yh = rng.normal(size=n).tolist(), rng.normal(size=n).tolist()
    my, mh = sum(y) / n, sum(yh) / n
    l2 = math.sqrt(sum(v * v for v in y))
    rae = sum(abs(a - b) for a, b in zip(y, yh)) / sum(abs(a - my) for a in y)
    num = sum((a - my) * (b - mh) for a, b in zip(y, yh))
    den = math.sqrt(sum((a - my) ** 2 for a in y) * sum((b - mh) ** 2 for b in yh))
    assert sg.l2_norm(y) == pytest.approx(l2, rel=1e-12)
    assert sg.rae(y, yh) == pytest.approx(rae, rel=1e-12)
    assert sg.pcc(y, yh) == pytest.approx(num / den, rel=1e-12, abs=1e-12)
