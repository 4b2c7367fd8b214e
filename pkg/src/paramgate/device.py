"""Physical description of the 8-qubit ring and its flux response.

Frequencies in configs and public APIs are linear frequencies in MHz; times
are microseconds for coherence and nanoseconds for pulses. Dynamics work in
angular units (rad/us); :func:`to_angular` is the single conversion point.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import yaml

SCHEMA_VERSION = 1
DEFAULT_COUPLING_MHZ = 2.5
SWEET_SPOT = 0.5
QUADRATURE_POINTS = 4096

BUNDLED_DEVICE = Path(__file__).parent / "data" / "device_8q.yaml"


class DeviceConfigError(ValueError):
    """Raised when a device config fails to parse or violates an invariant."""


def to_angular(f_mhz):
    """MHz (linear) to rad/us (angular)."""
    return 2.0 * math.pi * f_mhz


def to_linear(w_rad_us):
    """rad/us (angular) to MHz (linear)."""
    return w_rad_us / (2.0 * math.pi)


@dataclass(frozen=True)
class QubitParams:
    index: int
    resonator_freq: float
    f01_max: float
    f01_min: float | None
    anharmonicity_eta: float
    T1: float
    T2_star: float
    readout_fidelity: float
    single_qubit_error_p: float
    non_qnd_readout: bool = False

    @property
    def tunable(self) -> bool:
        return self.f01_min is not None

    @property
    def idle_freq(self) -> float:
        """Operating frequency: the lower sweet spot for tunable qubits."""
        return self.f01_min if self.tunable else self.f01_max

    def validate(self):
        where = f"qubit Q{self.index}"
        if self.f01_min is not None and not self.f01_min < self.f01_max:
            raise DeviceConfigError(f"{where}: f01_min must be below f01_max")
        if self.T1 <= 0:
            raise DeviceConfigError(f"{where}: T1 must be positive")
        if self.T2_star <= 0:
            raise DeviceConfigError(f"{where}: T2_star must be positive")
        if self.T2_star > 2.0 * self.T1:
            raise DeviceConfigError(f"{where}: T2_star exceeds 2*T1")
        if self.anharmonicity_eta <= 0:
            raise DeviceConfigError(f"{where}: anharmonicity_eta is stored positive")
        for name in ("readout_fidelity", "single_qubit_error_p"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise DeviceConfigError(f"{where}: {name} must lie in [0, 1]")


@dataclass(frozen=True)
class CouplingEdge:
    qubit_a: int
    qubit_b: int
    g: float = DEFAULT_COUPLING_MHZ

    @property
    def pair(self) -> tuple[int, int]:
        return (self.qubit_a, self.qubit_b)


@dataclass(frozen=True)
class FluxResponse:
    asymmetry_d: float
    dc_bias: float = SWEET_SPOT


@dataclass(frozen=True)
class GateOperatingPoint:
    """Measured operating point of a CZ gate (flux amplitude, harmonic, T2 under drive)."""

    pair: tuple[int, int]
    kind: str
    harmonic: int
    phi_p: float
    T2_eff: float | None = None
    g_n_published: float | None = None
    tau_published: float | None = None
    fidelity_published: float | None = None


@dataclass(frozen=True)
class DeviceModel:
    qubits: tuple[QubitParams, ...]
    edges: tuple[CouplingEdge, ...]
    flux: Mapping[int, FluxResponse]
    dispersive_shifts: Mapping[tuple[int, int], float] = field(default_factory=dict)
    gates: tuple[GateOperatingPoint, ...] = ()
    name: str = "device"

    def qubit(self, index: int) -> QubitParams:
        for q in self.qubits:
            if q.index == index:
                return q
        raise KeyError(f"no qubit Q{index}")

    def edge(self, a: int, b: int) -> CouplingEdge:
        for e in self.edges:
            if {e.qubit_a, e.qubit_b} == {a, b}:
                return e
        raise KeyError(f"Q{a} and Q{b} are not coupled")

    def operating_point(self, a: int, b: int) -> GateOperatingPoint:
        for gp in self.gates:
            if set(gp.pair) == {a, b}:
                return gp
        raise KeyError(f"no gate operating point for Q{a}-Q{b}")

    def chi(self, target: int, source: int) -> float:
        """Frequency pull (kHz) on ``target`` while ``source`` is excited; 0 when not listed."""
        return self.dispersive_shifts.get((target, source), 0.0)

    def with_coupling(self, a: int, b: int, g: float) -> "DeviceModel":
        edges = tuple(
            CouplingEdge(e.qubit_a, e.qubit_b, g) if {e.qubit_a, e.qubit_b} == {a, b} else e
            for e in self.edges
        )
        return _replace(self, edges=edges)

    def with_dispersive_shifts(self, shifts: Mapping[tuple[int, int], float]) -> "DeviceModel":
        return _replace(self, dispersive_shifts=dict(shifts))

    def fingerprint(self) -> str:
        """Short content hash of the serialized config."""
        text = yaml.safe_dump(device_to_dict(self), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def validate(self):
        indices = [q.index for q in self.qubits]
        if len(set(indices)) != len(indices):
            raise DeviceConfigError("duplicate qubit indices")
        for q in self.qubits:
            q.validate()
        n = len(self.qubits)
        known = set(indices)
        for e in self.edges:
            for idx in e.pair:
                if idx not in known:
                    raise DeviceConfigError(f"edge Q{e.qubit_a}-Q{e.qubit_b}: unknown qubit Q{idx}")
            if e.g <= 0:
                raise DeviceConfigError(f"edge Q{e.qubit_a}-Q{e.qubit_b}: g must be positive")
            if (e.qubit_b - e.qubit_a) % n not in (1, n - 1):
                raise DeviceConfigError(f"edge Q{e.qubit_a}-Q{e.qubit_b}: not nearest neighbours on the ring")
            if self.qubit(e.qubit_a).tunable == self.qubit(e.qubit_b).tunable:
                raise DeviceConfigError(
                    f"edge Q{e.qubit_a}-Q{e.qubit_b}: ring must alternate tunable and fixed qubits"
                )
        for idx in self.flux:
            if idx not in known or not self.qubit(idx).tunable:
                raise DeviceConfigError(f"flux entry for Q{idx}: not a tunable qubit")
        for q in self.qubits:
            if q.tunable and q.index not in self.flux:
                raise DeviceConfigError(f"qubit Q{q.index}: tunable but has no flux response")
        for a, b in self.dispersive_shifts:
            if a not in known or b not in known:
                raise DeviceConfigError(f"dispersive shift ({a}, {b}): unknown qubit")


def _replace(device: DeviceModel, **changes) -> DeviceModel:
    from dataclasses import replace

    return replace(device, **changes)


# -- flux response ----------------------------------------------------------

def asymmetry_from_frequencies(f01_max: float, f01_min: float, eta: float) -> float:
    """Junction asymmetry d that puts the Phi0/2 frequency at ``f01_min``."""
    ratio = (f01_min + eta) / (f01_max + eta)
    return ratio * ratio


def freq_vs_flux(q: QubitParams, fr: FluxResponse, phi):
    """Tunable-transmon 0-1 frequency (MHz) at flux ``phi`` (units of Phi0).

    Asymmetric-SQUID transmon: f = (fmax + eta) [d^2 + (1 - d^2) cos^2(pi phi)]^(1/4) - eta.
    Accepts scalars or arrays.
    """
    if not q.tunable:
        raise ValueError(f"Q{q.index} is a fixed-frequency qubit")
    d2 = fr.asymmetry_d ** 2
    c = np.cos(np.pi * np.asarray(phi, dtype=float))
    scale = np.sqrt(np.sqrt(d2 + (1.0 - d2) * c * c))
    out = (q.f01_max + q.anharmonicity_eta) * scale - q.anharmonicity_eta
    return float(out) if np.ndim(out) == 0 else out


def modulation_profile(q: QubitParams, fr: FluxResponse, phi_p: float, points: int = QUADRATURE_POINTS):
    """Frequency samples over one flux period at uniform phase, bias at ``fr.dc_bias``."""
    theta = 2.0 * np.pi * np.arange(points) / points
    return freq_vs_flux(q, fr, fr.dc_bias + phi_p * np.cos(theta))


def avg_freq_under_modulation(q: QubitParams, fr: FluxResponse, phi_p: float, f_mod: float | None = None,
                              points: int = QUADRATURE_POINTS) -> tuple[float, float]:
    """Time-averaged frequency and its shift from the idle point.

    Returns ``(omega_bar_T, delta_omega)`` in MHz. The average is a periodic
    trapezoid rule over one flux period, so it does not depend on the drive
    frequency ``f_mod``; the argument is accepted for interface symmetry.
    """
    if not q.tunable:
        raise ValueError(f"Q{q.index} is a fixed-frequency qubit")
    if not 0.0 <= phi_p < 0.5:
        raise ValueError(f"phi_p={phi_p} outside [0, 0.5)")
    if f_mod is not None and f_mod <= 0:
        raise ValueError("f_mod must be positive")
    samples = modulation_profile(q, fr, phi_p, points)
    avg = float(np.mean(samples))
    return avg, avg - freq_vs_flux(q, fr, fr.dc_bias)


def excursion_amplitude(q: QubitParams, fr: FluxResponse, phi_p: float, points: int = QUADRATURE_POINTS) -> float:
    """Amplitude (MHz) of the fundamental of the qubit-frequency modulation.

    At the Phi0/2 bias the frequency oscillates at twice the flux-drive
    frequency; this is the magnitude of that first Fourier harmonic, the
    sinusoidal-equivalent excursion used in the sideband couplings.
    """
    samples = modulation_profile(q, fr, phi_p, points)
    theta = 2.0 * np.pi * np.arange(points) / points
    c = np.mean(samples * np.exp(-2j * theta))
    return float(2.0 * abs(c))


# -- config IO --------------------------------------------------------------

_QUBIT_FIELDS = ("index", "resonator_freq", "f01_max", "f01_min", "anharmonicity_eta", "T1", "T2_star",
                 "readout_fidelity", "single_qubit_error_p")


def _qubit_from_dict(raw: dict) -> QubitParams:
    missing = [k for k in _QUBIT_FIELDS if k not in raw]
    if missing:
        raise DeviceConfigError(f"qubit stanza {raw.get('index', '?')}: missing field(s) {', '.join(missing)}")
    kwargs = {k: raw[k] for k in _QUBIT_FIELDS}
    kwargs["non_qnd_readout"] = bool(raw.get("non_qnd_readout", False))
    try:
        kwargs["index"] = int(kwargs["index"])
        for k in _QUBIT_FIELDS[1:]:
            if kwargs[k] is not None:
                kwargs[k] = float(kwargs[k])
    except (TypeError, ValueError) as exc:
        raise DeviceConfigError(f"qubit Q{raw.get('index')}: {exc}") from None
    for k in _QUBIT_FIELDS[1:]:
        if k != "f01_min" and kwargs[k] is None:
            raise DeviceConfigError(f"qubit Q{kwargs['index']}: field {k} is required")
    return QubitParams(**kwargs)


def device_from_dict(raw: dict) -> DeviceModel:
    """Build and validate a :class:`DeviceModel` from parsed config data."""
    if not isinstance(raw, dict):
        raise DeviceConfigError("device config must be a mapping")
    if raw.get("schema_version") != SCHEMA_VERSION:
        raise DeviceConfigError(f"unsupported or missing schema_version (expected {SCHEMA_VERSION})")
    qubits = tuple(_qubit_from_dict(q) for q in raw.get("qubits", []))
    if not qubits:
        raise DeviceConfigError("no qubits defined")
    default_g = float(raw.get("default_coupling_g", DEFAULT_COUPLING_MHZ))
    edges = tuple(
        CouplingEdge(int(e["qubit_a"]), int(e["qubit_b"]), float(e.get("g", default_g)))
        for e in raw.get("edges", [])
    )
    by_index = {q.index: q for q in qubits}
    flux_raw = {int(k): (v or {}) for k, v in (raw.get("flux") or {}).items()}
    for q in qubits:
        if q.tunable and q.index not in flux_raw:
            flux_raw[q.index] = {}
        if not q.tunable and q.index in flux_raw:
            raise DeviceConfigError(f"flux entry for Q{q.index}: not a tunable qubit")
    flux = {}
    for idx, spec in sorted(flux_raw.items()):
        if idx not in by_index:
            raise DeviceConfigError(f"flux entry for unknown qubit Q{idx}")
        q = by_index[idx]
        d = spec.get("asymmetry_d")
        if d is None:
            d = asymmetry_from_frequencies(q.f01_max, q.f01_min, q.anharmonicity_eta)
        d = float(d)
        if not 0.0 <= d <= 1.0:
            raise DeviceConfigError(f"qubit Q{idx}: asymmetry_d outside [0, 1]")
        flux[idx] = FluxResponse(asymmetry_d=d, dc_bias=float(spec.get("dc_bias", SWEET_SPOT)))
    shifts = {}
    for s in raw.get("dispersive_shifts", []) or []:
        a, b = (int(v) for v in s["qubits"])  # (target, source)
        if a == b:
            raise DeviceConfigError(f"dispersive shift ({a}, {b}) needs two distinct qubits")
        shifts[(a, b)] = float(s["chi_khz"])
    gates = tuple(
        GateOperatingPoint(
            pair=tuple(int(v) for v in gp["pair"]),
            kind=str(gp["kind"]).lower(),
            harmonic=int(gp["harmonic"]),
            phi_p=float(gp["phi_p"]),
            T2_eff=None if gp.get("T2_eff") is None else float(gp["T2_eff"]),
            g_n_published=None if gp.get("g_n_published") is None else float(gp["g_n_published"]),
            tau_published=None if gp.get("tau_published") is None else float(gp["tau_published"]),
            fidelity_published=None if gp.get("fidelity_published") is None else float(gp["fidelity_published"]),
        )
        for gp in raw.get("gates", []) or []
    )
    device = DeviceModel(qubits=qubits, edges=edges, flux=flux, dispersive_shifts=shifts, gates=gates,
                         name=str(raw.get("name", "device")))
    device.validate()
    return device


def device_to_dict(device: DeviceModel) -> dict:
    out = {
        "schema_version": SCHEMA_VERSION,
        "name": device.name,
        "qubits": [],
        "flux": {},
        "edges": [{"qubit_a": e.qubit_a, "qubit_b": e.qubit_b, "g": e.g} for e in device.edges],
        "dispersive_shifts": [
            {"qubits": [a, b], "chi_khz": chi} for (a, b), chi in sorted(device.dispersive_shifts.items())
        ],
        "gates": [],
    }
    for q in device.qubits:
        entry = {k: getattr(q, k) for k in _QUBIT_FIELDS}
        if q.non_qnd_readout:
            entry["non_qnd_readout"] = True
        out["qubits"].append(entry)
    for idx, fr in sorted(device.flux.items()):
        out["flux"][idx] = {"asymmetry_d": fr.asymmetry_d, "dc_bias": fr.dc_bias}
    for gp in device.gates:
        entry = {"pair": list(gp.pair), "kind": gp.kind, "harmonic": gp.harmonic, "phi_p": gp.phi_p}
        for k in ("T2_eff", "g_n_published", "tau_published", "fidelity_published"):
            if getattr(gp, k) is not None:
                entry[k] = getattr(gp, k)
        out["gates"].append(entry)
    return out


def load_device(config_path: str | Path | None = None) -> DeviceModel:
    """Load a YAML device config (the bundled 8-qubit device when no path is given)."""
    path = Path(config_path) if config_path is not None else BUNDLED_DEVICE
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise
    except yaml.YAMLError as exc:
        raise DeviceConfigError(f"{path}: parse failure: {exc}") from None
    try:
        return device_from_dict(raw)
    except (KeyError, TypeError) as exc:
        raise DeviceConfigError(f"{path}: malformed entry: {exc}") from None


def dump_device(device: DeviceModel, path: str | Path | None = None) -> str:
    text = yaml.safe_dump(device_to_dict(device), sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text
