import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsasan import cstr
from tsasan.cstr import (FAULT_IDS, MODE_IDS, VARIABLES, CstrParams, check_mode_stability, export_run,
                         fault_spec, load_run, mode_spec, simulate, steady_state)
from tsasan.errors import ConfigurationError

P = CstrParams()
QUIET = P.noiseless()


@pytest.fixture(scope="module")
def quiet_runs():
    return {(m, f): simulate(QUIET, mode_spec(m), fault_spec(f), 0)
            for m in ("M1",) for f in FAULT_IDS}


def test_defaults_valid_and_positive():
    P.validate()
    for f in dataclasses.fields(P):
        v = getattr(P, f.name)
        if isinstance(v, float) and f.name not in ("Qc_min", "Kp"):
            assert v > 0, f.name


@pytest.mark.parametrize("override", [{"V": -1.0}, {"dt": 0.3}, {"Qc_max": 0.0}, {"noise_std": (1.0,)}])
def test_invalid_params_rejected(override):
    with pytest.raises(ConfigurationError):
        dataclasses.replace(P, **override).validate()


def test_mode_setpoints():
    assert mode_spec("M2").temp_setpoint == mode_spec("M1").temp_setpoint + 5
    assert mode_spec("M3").temp_setpoint == mode_spec("M1").temp_setpoint + 10
    with pytest.raises(ConfigurationError):
        mode_spec("M4")


def test_unknown_fault_lists_valid_ids():
    with pytest.raises(ConfigurationError) as exc:
        fault_spec("F99")
    for f in FAULT_IDS:
        assert f in str(exc.value)


def test_healthy_has_no_perturbation():
    h = fault_spec("H")
    assert h.offset(900.0) == 0.0 and h.factor(900.0) == 1.0


def test_decay_faults():
    f8, f9 = fault_spec("F8"), fault_spec("F9")
    assert f8.factor(199.0) == 1.0
    assert f8.factor(300.0) == pytest.approx(np.exp(-0.0005 * 100))
    assert f9.factor(1200.0) == pytest.approx(np.exp(-0.001 * 1000))


@pytest.mark.parametrize("mode", MODE_IDS)
def test_steady_state_tracks_setpoint(mode):
    ms = mode_spec(mode)
    x = steady_state(P, ms)
    assert abs(x[1] - ms.temp_setpoint) < 0.1
    resid = cstr._rhs(QUIET, ms.temp_setpoint, fault_spec("H"), 0.0, x, (0.0, 0.0, 0.0))
    assert max(abs(r) for r in resid[:3]) < 1e-3


def test_mode_temperature_offsets():
    t = [steady_state(P, mode_spec(m))[1] for m in MODE_IDS]
    assert t[1] - t[0] == pytest.approx(5.0, abs=0.2)
    assert t[2] - t[0] == pytest.approx(10.0, abs=0.2)


def test_run_shape_and_onset(quiet_runs):
    run = quiet_runs["M1", "F3"]
    assert run.measurements.shape == (1200, len(VARIABLES))
    assert run.onset_index == 200
    assert np.all(np.isfinite(run.measurements))


@pytest.mark.parametrize("fault,var,rate", [
    ("F1", "C_i", 0.001), ("F2", "T_i", 0.05), ("F6", "T_ci", 0.05),
])
def test_input_ramp_exact(quiet_runs, fault, var, rate):
    run = quiet_runs["M1", fault]
    j = VARIABLES.index(var)
    t = run.time_min
    base = run.measurements[0, j]
    expected = np.where(t >= 200, rate * (t - 200), 0.0)
    assert np.max(np.abs(run.measurements[:, j] - base - expected)) < 1e-12


@pytest.mark.parametrize("fault,var,col,rate", [
    ("F3", "C", 0, 0.001), ("F4", "T", 1, 0.05), ("F7", "T_c", 2, 0.05), ("F5", "Q_c", 3, -0.1),
])
def test_sensor_ramp_exact(quiet_runs, fault, var, col, rate):
    run = quiet_runs["M1", fault]
    t = run.time_min
    bias = run.measurements[:, VARIABLES.index(var)] - run.states[:, col]
    assert np.max(np.abs(bias - np.where(t >= 200, rate * (t - 200), 0.0))) < 1e-12


def test_biased_temperature_sensor_moves_true_temperature(quiet_runs):
    # the loop tracks the biased reading, so the real temperature drifts down
    run = quiet_runs["M1", "F4"]
    assert run.states[-1, 1] < run.states[199, 1] - 10


def test_faults_change_the_process(quiet_runs):
    h = quiet_runs["M1", "H"].measurements
    for f in FAULT_IDS[1:]:
        m = quiet_runs["M1", f].measurements
        assert np.allclose(m[:200], h[:200])
        assert not np.allclose(m[-100:], h[-100:], atol=1e-3), f


@pytest.mark.parametrize("mode", MODE_IDS)
def test_noiseless_healthy_run_is_stable_everywhere(mode):
    run = simulate(QUIET, mode_spec(mode), fault_spec("H"), 0)
    T = run.measurements[:, VARIABLES.index("T")]
    assert all(check_mode_stability(T, 0.01, 60, s) for s in range(0, len(T) - 60 + 1))


def test_step_halving_converges():
    fine = dataclasses.replace(P, dt=0.025)
    for f in ("H", "F2", "F8"):
        a = simulate(P, mode_spec("M1"), fault_spec(f), 3).states
        b = simulate(fine, mode_spec("M1"), fault_spec(f), 3).states
        assert np.max(np.abs(a - b) / np.abs(b)) < 1e-4, f


def test_seeded_determinism():
    a = simulate(P, mode_spec("M2"), fault_spec("F6"), 11)
    b = simulate(P, mode_spec("M2"), fault_spec("F6"), 11)
    assert a.measurements.tobytes() == b.measurements.tobytes()
    c = simulate(P, mode_spec("M2"), fault_spec("H"), 12)
    d = simulate(P, mode_spec("M2"), fault_spec("H"), 13)
    diff = np.abs(c.measurements - d.measurements).max(axis=0)
    # different seeds differ, but only at noise scale
    assert np.all(diff > 0) and diff[VARIABLES.index("T")] < 5.0


def test_stability_check_cases():
    assert check_mode_stability(np.full(100, 3.0), 1e-9, 60)
    assert not check_mode_stability(0.02 * np.arange(100.0), 0.01, 60)
    with pytest.raises(ConfigurationError):
        check_mode_stability(np.zeros(10), 0.01, 60)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-3, 1.0), st.integers(2, 40))
def test_stability_check_brute_force(seed, threshold, window):
    x = 350 + np.random.default_rng(seed).normal(0, 0.01, size=60)
    expected = True
    for t in range(1, window):
        if abs(x[t] - x[0]) / t >= threshold:
            expected = False
    assert check_mode_stability(x, threshold, window) == expected


def test_export_round_trip(tmp_path):
    run = simulate(P, mode_spec("M3"), fault_spec("F9"), 5)
    path, sidecar = export_run(run, tmp_path / cstr.run_filename("M3", "F9", 5))
    assert len(path.read_text().splitlines()) == 1201
    meta = json.loads(sidecar.read_text())
    assert meta["fault_id"] == "F9" and meta["onset_index"] == 200
    back = load_run(path)
    assert back.measurements.tobytes() == run.measurements.tobytes()
    assert back.seed == 5 and back.params_snapshot == P
