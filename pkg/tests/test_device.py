import copy

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from paramgate.device import (
    BUNDLED_DEVICE,
    DeviceConfigError,
    avg_freq_under_modulation,
    device_from_dict,
    device_to_dict,
    dump_device,
    freq_vs_flux,
    load_device,
    to_angular,
    to_linear,
)


def _raw():
    return yaml.safe_load(BUNDLED_DEVICE.read_text())


def test_bundled_device_values(device):
    assert device.qubit(0).f01_max == 3719.1
    assert len(device.qubits) == 8
    assert [q.tunable for q in device.qubits] == [False, True] * 4


def test_ring_topology(device):
    for k in range(8):
        device.edge(k, (k + 1) % 8)
    with pytest.raises(KeyError):
        device.edge(0, 2)


def test_t2_above_twice_t1_rejected():
    raw = _raw()
    raw["qubits"][0]["T2_star"] = 2.0 * raw["qubits"][0]["T1"] + 1.0
    with pytest.raises(DeviceConfigError, match="Q0"):
        device_from_dict(raw)


def test_missing_f01_min_on_tunable_rejected():
    raw = _raw()
    raw["qubits"][1]["f01_min"] = None
    with pytest.raises(DeviceConfigError, match="Q1"):
        device_from_dict(raw)
    raw = _raw()
    del raw["qubits"][1]["f01_min"]
    with pytest.raises(DeviceConfigError, match="f01_min"):
        device_from_dict(raw)


def test_non_alternating_ring_rejected():
    raw = _raw()
    raw["edges"].append({"qubit_a": 0, "qubit_b": 2})
    with pytest.raises(DeviceConfigError):
        device_from_dict(raw)


def test_unknown_dispersive_qubit_rejected():
    raw = _raw()
    raw["dispersive_shifts"].append({"qubits": [0, 11], "chi_khz": 5.0})
    with pytest.raises(DeviceConfigError, match="unknown"):
        device_from_dict(raw)


def test_schema_version_required():
    raw = _raw()
    del raw["schema_version"]
    with pytest.raises(DeviceConfigError, match="schema_version"):
        device_from_dict(raw)


def test_missing_file_raises(tmp_path):
    with pytest.raises(OSError):
        load_device(tmp_path / "absent.yaml")


def test_round_trip_bit_exact(device, tmp_path):
    path = tmp_path / "dev.yaml"
    dump_device(device, path)
    again = load_device(path)
    assert device_to_dict(again) == device_to_dict(device)
    assert again.fingerprint() == device.fingerprint()


def test_dispersive_shifts_are_directional(device):
    assert device.chi(1, 3) == 270.0
    assert device.chi(3, 1) == 0.0
    assert device.chi(0, 3) == 150.0


def test_unit_conversion_boundary():
    assert to_angular(1.0) == pytest.approx(2 * np.pi)
    assert to_linear(to_angular(123.4)) == pytest.approx(123.4)


def test_freq_vs_flux_endpoints(device):
    q1, fr = device.qubit(1), device.flux[1]
    assert freq_vs_flux(q1, fr, 0.0) == pytest.approx(q1.f01_max, abs=1e-9)
    assert freq_vs_flux(q1, fr, 0.5) == pytest.approx(3817.9, abs=1e-9)
    h = 1e-6
    slope = (freq_vs_flux(q1, fr, 0.5 + h) - freq_vs_flux(q1, fr, 0.5 - h)) / (2 * h)
    assert abs(slope) < 1e-3


def test_freq_vs_flux_rejects_fixed_qubit(device):
    with pytest.raises(ValueError):
        freq_vs_flux(device.qubit(0), device.flux[1], 0.1)


@settings(max_examples=50, deadline=None)
@given(st.floats(-3.0, 3.0))
def test_freq_vs_flux_periodic_and_even(phi):
    dev = load_device()
    q, fr = dev.qubit(3), dev.flux[3]
    f = freq_vs_flux(q, fr, phi)
    assert freq_vs_flux(q, fr, phi + 1.0) == pytest.approx(f, rel=1e-13)
    assert freq_vs_flux(q, fr, -phi) == pytest.approx(f, rel=1e-13)


def test_no_modulation_no_shift(device):
    _, dw = avg_freq_under_modulation(device.qubit(1), device.flux[1], 0.0)
    assert dw == pytest.approx(0.0, abs=1e-9)


def test_delta_omega_q1_reference_value(device):
    _, dw = avg_freq_under_modulation(device.qubit(1), device.flux[1], 0.20)
    assert abs(dw - 270.0) <= 27.0


def test_quadrature_self_convergence(device):
    q, fr = device.qubit(1), device.flux[1]
    w3, _ = avg_freq_under_modulation(q, fr, 0.2, points=1000)
    w4, _ = avg_freq_under_modulation(q, fr, 0.2, points=10000)
    assert abs(w3 - w4) < 1e-3  # 1 kHz


@settings(max_examples=30, deadline=None)
@given(st.floats(0.005, 0.49), st.floats(0.001, 0.01))
def test_delta_omega_monotone_in_amplitude(phi_p, step):
    dev = load_device()
    q, fr = dev.qubit(1), dev.flux[1]
    lo = avg_freq_under_modulation(q, fr, phi_p)[1]
    hi = avg_freq_under_modulation(q, fr, min(phi_p + step, 0.499))[1]
    assert lo > 0
    assert hi >= lo


def test_phi_p_out_of_range(device):
    with pytest.raises(ValueError):
        avg_freq_under_modulation(device.qubit(1), device.flux[1], 0.5)


def test_with_coupling_is_a_copy(device):
    other = device.with_coupling(0, 1, 9.0)
    assert other.edge(0, 1).g == 9.0
    assert device.edge(0, 1).g != 9.0
    raw = copy.deepcopy(device_to_dict(other))
    assert device_from_dict(raw).edge(0, 1).g == 9.0
