import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmm import msk, synth
from nmm.physio import ArmGeometry, PhysioParamSet, build_muscles

AN = synth.ArmAnthropometrics()
G = 9.81


def test_static_horizontal_forearm():
    tau = synth.inverse_dynamics_torque(np.full(10, 90.0), 0.0, AN)
    assert np.allclose(tau, AN.forearm_mass * AN.com_distance * G, rtol=0, atol=1e-12)


def test_static_vertical_forearm():
    tau = synth.inverse_dynamics_torque(np.zeros(10), 0.0, AN)
    assert np.allclose(tau, 0.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 150.0))
def test_load_superposition(q):
    t0 = synth.inverse_dynamics_torque(np.full(5, q), 0.0, AN)
    t2 = synth.inverse_dynamics_torque(np.full(5, q), 2.0, AN)
    theta = np.deg2rad(q - 90.0)
    assert np.allclose(t2 - t0, 2.0 * AN.hand_distance * G * np.cos(theta), atol=1e-12)


def test_inverse_dynamics_errors():
    with pytest.raises(ValueError):
        synth.inverse_dynamics_torque([1.0, 2.0], 0.0)
    with pytest.raises(ValueError):
        synth.inverse_dynamics_torque(np.zeros(5), -1.0)


def test_inertia_default():
    assert AN.moment_of_inertia == pytest.approx(1.5 * (0.28 * 0.526) ** 2)


@pytest.fixture(scope="module")
def trials():
    kw = dict(repetitions=1, rest=0.2, period=1.6)
    return {load: synth.generate_trial(synth.TrialSpec(load=load, seed=3, **kw)) for load in (0.0, 2.0, 4.0)}


@pytest.mark.parametrize("load", [0.0, 2.0, 4.0])
def test_closed_loop_self_consistency(trials, load):
    tr = trials[load]
    muscles, exc = build_muscles(PhysioParamSet.midbox().values, ArmGeometry.reference())
    tau = msk.forward_torque(tr.emg, tr.kin, muscles, exc)
    rel = np.linalg.norm(tau - tr.tau_id) / np.linalg.norm(tr.tau_id)
    assert rel < 0.02


def test_extensor_below_flexor_at_zero_load(trials):
    emg = trials[0.0].emg
    assert emg[3:].max() < emg[:3].max()


def test_deep_norm_increases_with_load(trials):
    for c in (2, 5):
        assert np.linalg.norm(trials[4.0].emg[c]) > np.linalg.norm(trials[0.0].emg[c])


def test_envelopes_in_unit_interval(trials):
    for tr in trials.values():
        assert tr.emg.min() >= 0.0 and tr.emg.max() <= 1.0


def test_same_seed_identical():
    spec = synth.TrialSpec(load=2.0, seed=11, repetitions=1, period=1.6, rest=0.2, noise=0.1,
                           angle_noise_deg=0.5)
    a, b = synth.generate_trial(spec), synth.generate_trial(spec)
    assert np.array_equal(a.emg, b.emg)
    assert np.array_equal(a.kin.q1, b.kin.q1)
    assert np.array_equal(a.tau_id, b.tau_id)


def test_infeasible_load_names_muscle():
    with pytest.raises(synth.InfeasibleTrialError) as info:
        synth.generate_trial(synth.TrialSpec(load=60.0, repetitions=1, period=1.6, rest=0.2))
    assert info.value.muscle in synth.MUSCLES
    assert info.value.peak > 1.0


def test_session_layout():
    s = synth.SessionSpec(loads=(0.0, 4.0), sets_per_load=1, trials_per_set=2, seed=5,
                          trial=dict(repetitions=1, period=1.6, rest=0.2))
    names = [n for n, _ in s.trial_specs()]
    assert names == ["load0kg_set1_trial01", "load0kg_set1_trial02",
                     "load4kg_set1_trial01", "load4kg_set1_trial02"]
    seeds = [sp.seed for _, sp in s.trial_specs()]
    assert len(set(seeds)) == 4


def test_activation_inversion_roundtrip():
    a = np.linspace(0.0, 1.0, 11)
    for A in (-3.0, -1.2, -0.01):
        u = synth.invert_activation(a, A)
        assert np.allclose(msk.activation(u, A), a, atol=1e-12)
