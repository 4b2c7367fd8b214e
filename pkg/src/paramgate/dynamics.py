"""Time evolution of flux-modulated transmon pairs and small registers.

Each transmon is truncated to three levels. A coupled pair lives in a 9-level
space ordered ``|fixed, tunable>`` with index ``3*f + t``. The tunable
frequency is evaluated through the full flux response at the instantaneous
flux, so the mean shift and the excursion amplitude emerge from the
simulation rather than being inputs.

Numerics: the Hamiltonian is held piecewise constant on steps of
1/(64 f_flux) and each step is exponentiated exactly. Because the coupling
conserves total excitation number, the pair is simulated in a frame
rotating at the fixed-qubit frequency times that number; this removes the
fast common phase without approximation. Results are reported in the idle
dressed frame, where an undriven pair does not evolve at all (static ZZ
included), which is the frame software Z-corrections act in.

Units: frequencies in MHz (linear), pulse times in ns, coherence times in
us. Generators are built in rad/us.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.linalg import expm
from scipy.optimize import linear_sum_assignment, minimize, minimize_scalar

from . import _kernels
from .device import DeviceModel, freq_vs_flux, to_angular
from .theory import GateKind, pair_roles, predict_gate, fit_bare_coupling

LEVELS = 3
STEPS_PER_PERIOD = 64
DEFAULT_RISETIME = 40.0

SIGMA = np.diag([1.0, math.sqrt(2.0)], k=1)  # |0><1| + sqrt2 |1><2|
NUMBER = np.diag([0.0, 1.0, 2.0])
I3 = np.eye(LEVELS)

# computational states of a pair inside the 9-level space: 00, 01, 10, 11
COMPUTATIONAL = np.array([0, 1, 3, 4])
CZ = np.diag([1.0, 1.0, 1.0, -1.0]).astype(complex)


class DynamicsError(RuntimeError):
    pass


class CalibrationError(DynamicsError):
    pass


@dataclass(frozen=True)
class ModulationDrive:
    """Flat-top sinusoidal flux pulse around the Phi0/2 bias.

    The flux is ``0.5 + phi_p * env(t) * cos(2 pi f_flux t + theta_m)`` with
    cosine-squared ramps of length ``risetime`` at both ends of ``duration``.
    """

    phi_p: float
    f_flux: float  # MHz
    duration: float  # ns, ramps included
    theta_m: float = 0.0
    risetime: float = DEFAULT_RISETIME

    def __post_init__(self):
        if not 0.0 <= self.phi_p < 0.5:
            raise ValueError(f"phi_p={self.phi_p} outside [0, 0.5)")
        if self.f_flux <= 0:
            raise ValueError("f_flux must be positive")
        if self.duration < 0 or self.risetime < 0:
            raise ValueError("duration and risetime must be non-negative")
        if self.duration > 0 and self.duration < 2.0 * self.risetime:
            raise ValueError(f"duration {self.duration} ns shorter than two risetimes ({self.risetime} ns)")

    @property
    def flat(self) -> float:
        return max(self.duration - 2.0 * self.risetime, 0.0)

    @property
    def step(self) -> float:
        """Integration step in ns."""
        return 1e3 / (STEPS_PER_PERIOD * self.f_flux)

    def envelope(self, t):
        t = np.asarray(t, dtype=float)
        r = self.risetime
        env = np.ones_like(t)
        if r > 0:
            up = t < r
            down = t > self.duration - r
            env = np.where(up, np.sin(0.5 * np.pi * t / r) ** 2, env)
            env = np.where(down, np.sin(0.5 * np.pi * (self.duration - t) / r) ** 2, env)
        return np.clip(env, 0.0, 1.0)

    def flux(self, t, bias: float = 0.5):
        t = np.asarray(t, dtype=float)
        phase = 2.0 * np.pi * self.f_flux * t * 1e-3 + self.theta_m
        return bias + self.phi_p * self.envelope(t) * np.cos(phase)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class NoiseChannel:
    """Markovian noise for the two members of a pair.

    ``T1`` and ``T2_star`` map qubit index to microseconds. ``T2_eff_mod``
    replaces the tunable qubit's T2* while a drive is active.
    """

    T1: dict
    T2_star: dict
    T2_eff_mod: float | None = None

    def __post_init__(self):
        for q, t1 in self.T1.items():
            t2 = self.T2_star[q]
            if t1 <= 0 or t2 <= 0:
                raise ValueError(f"Q{q}: coherence times must be positive")
            if t2 > 2.0 * t1 * (1 + 1e-12):
                raise ValueError(f"Q{q}: T2*={t2} exceeds 2*T1={2 * t1}")
        if self.T2_eff_mod is not None and self.T2_eff_mod <= 0:
            raise ValueError("T2_eff_mod must be positive")

    @classmethod
    def from_device(cls, device: DeviceModel, qubits, T2_eff_mod: float | None = None) -> "NoiseChannel":
        qs = [device.qubit(q) for q in qubits]
        return cls({q.index: q.T1 for q in qs}, {q.index: q.T2_star for q in qs}, T2_eff_mod)

    def rates(self, q: int, driven_tunable: bool = False) -> tuple[float, float]:
        """(gamma_1, gamma_phi) in 1/us for qubit ``q``."""
        t1 = self.T1[q]
        t2 = self.T2_star[q]
        if driven_tunable and self.T2_eff_mod is not None:
            t2 = self.T2_eff_mod
        gphi = 1.0 / t2 - 0.5 / t1
        if gphi < -1e-12:
            raise ValueError(f"Q{q}: negative pure dephasing rate")
        return 1.0 / t1, max(gphi, 0.0)

    def scaled(self, factor: float) -> "NoiseChannel":
        """All rates multiplied by ``factor`` (0 turns noise off)."""
        if factor <= 0:
            big = 1e30
            return NoiseChannel({q: big for q in self.T1}, {q: big for q in self.T1}, None)
        t2eff = None if self.T2_eff_mod is None else self.T2_eff_mod / factor
        return NoiseChannel({q: t / factor for q, t in self.T1.items()},
                            {q: t / factor for q, t in self.T2_star.items()}, t2eff)


@dataclass
class DensityState:
    dims: list
    matrix: np.ndarray

    def __post_init__(self):
        self.dims = [int(d) for d in self.dims]
        self.matrix = np.asarray(self.matrix, dtype=complex)
        n = int(np.prod(self.dims))
        if self.matrix.shape != (n, n):
            raise ValueError(f"matrix shape {self.matrix.shape} does not match dims {self.dims}")

    @classmethod
    def pure(cls, dims, psi) -> "DensityState":
        psi = np.asarray(psi, dtype=complex).reshape(-1)
        return cls(list(dims), np.outer(psi, psi.conj()))

    @classmethod
    def basis(cls, dims, levels) -> "DensityState":
        """Product state with qudit ``i`` in level ``levels[i]``."""
        idx = int(np.ravel_multi_index(tuple(levels), tuple(dims)))
        psi = np.zeros(int(np.prod(dims)), dtype=complex)
        psi[idx] = 1.0
        return cls.pure(dims, psi)

    def validate(self, tol: float = 1e-9) -> None:
        m = self.matrix
        if abs(np.trace(m) - 1.0) > tol:
            raise ValueError(f"trace {np.trace(m).real:.3e} differs from 1")
        if np.max(np.abs(m - m.conj().T)) > tol:
            raise ValueError("matrix is not Hermitian")
        w = np.linalg.eigvalsh(0.5 * (m + m.conj().T))
        if w.min() < -tol:
            raise ValueError(f"negative eigenvalue {w.min():.3e}")

    def populations(self) -> np.ndarray:
        return np.real(np.diag(self.matrix)).copy()


# -- pair Hamiltonian ------------------------------------------------------------

def _pair_setup(device: DeviceModel, pair):
    roles = pair_roles(device, pair)
    qf, qt = device.qubit(roles.fixed), device.qubit(roles.tunable)
    return roles, qf, qt, device.flux[roles.tunable]


def coupling_operator(g: float) -> np.ndarray:
    """g (s_F^dag s_T + s_F s_T^dag) on the 9-level pair space, in the units of g."""
    up_down = np.kron(SIGMA.T, SIGMA)
    return g * (up_down + up_down.T)


def _level_energies(w_f: float, eta_f: float, w_t, eta_t: float, frame: float = 0.0):
    """Pair energies for tunable frequency ``w_t`` (scalar or array), last axis 9."""
    w_t = np.asarray(w_t, dtype=float)[..., None]
    f = np.repeat(np.arange(LEVELS), LEVELS)
    t = np.tile(np.arange(LEVELS), LEVELS)
    e = f * w_f - eta_f * (f == 2) + t * w_t - eta_t * (t == 2)
    return e - frame * (f + t)


def hamiltonian_at(device: DeviceModel, pair, drive: ModulationDrive, t: float) -> np.ndarray:
    """Lab-frame pair Hamiltonian at time ``t`` (ns), angular units rad/us."""
    if t < 0 or t > drive.duration:
        raise ValueError(f"t={t} outside [0, {drive.duration}] ns")
    roles, qf, qt, fr = _pair_setup(device, pair)
    w_t = freq_vs_flux(qt, fr, float(drive.flux(t, fr.dc_bias)))
    e = _level_energies(qf.f01_max, qf.anharmonicity_eta, w_t, qt.anharmonicity_eta)
    h = np.diag(e) + coupling_operator(device.edge(*pair).g)
    return to_angular(h).astype(complex)


def _step_grid(drive: ModulationDrive):
    """Step midpoints (ns), widths (ns) and the [k0, k1) range of fully flat steps."""
    dur = drive.duration
    if dur <= 0:
        return np.zeros(0), np.zeros(0), (0, 0)
    h = drive.step
    n_full = int(math.floor(dur / h + 1e-9))
    edges = h * np.arange(n_full + 1)
    if dur - edges[-1] > 1e-9 * h:
        edges = np.append(edges, dur)
    else:
        edges[-1] = dur
    left, right = edges[:-1], edges[1:]
    flat = (left >= drive.risetime - 1e-12) & (right <= dur - drive.risetime + 1e-12)
    flat &= np.isclose(right - left, h, rtol=0, atol=1e-9 * h)
    idx = np.flatnonzero(flat)
    span = (int(idx[0]), int(idx[-1]) + 1) if idx.size else (0, 0)
    return 0.5 * (left + right), right - left, span


def _pair_energies(device, pair, drive, t_mid):
    """Rotating-frame energies (MHz) at the step midpoints, shape (K, 9)."""
    roles, qf, qt, fr = _pair_setup(device, pair)
    w_t = freq_vs_flux(qt, fr, drive.flux(t_mid, fr.dc_bias))
    return _level_energies(qf.f01_max, qf.anharmonicity_eta, w_t, qt.anharmonicity_eta, frame=qf.f01_max)


def _static_energies(device, pair):
    roles, qf, qt, fr = _pair_setup(device, pair)
    w_t = freq_vs_flux(qt, fr, fr.dc_bias)
    return _level_energies(qf.f01_max, qf.anharmonicity_eta, w_t, qt.anharmonicity_eta, frame=qf.f01_max)


def dressed_frame(device: DeviceModel, pair):
    """Idle dressed eigenbasis: (W, energies) with column k continuing bare state k.

    Energies are in MHz in the rotating frame; W's diagonal is made real
    positive so the labelling is unambiguous.
    """
    h0 = np.diag(_static_energies(device, pair)) + coupling_operator(device.edge(*pair).g)
    vals, vecs = np.linalg.eigh(h0)
    rows, cols = linear_sum_assignment(-np.abs(vecs) ** 2)
    order = cols[np.argsort(rows)]
    w = vecs[:, order].astype(complex)
    ph = np.diag(w) / np.abs(np.diag(w))
    return w / ph[None, :], vals[order]


def _propagate_periodic(diag_gen, const_gen, dts, span, period=STEPS_PER_PERIOD):
    """Ordered step product; full periods inside ``span`` are raised to a matrix power."""
    k0, k1 = span
    m = (k1 - k0) // period
    if m < 2:
        return _kernels.propagate(diag_gen, const_gen, dts)
    head = _kernels.propagate(diag_gen[:k0], const_gen, dts[:k0])
    one = _kernels.propagate(diag_gen[k0:k0 + period], const_gen, dts[k0:k0 + period])
    cut = k0 + m * period
    tail = _kernels.propagate(diag_gen[cut:], const_gen, dts[cut:])
    return tail @ np.linalg.matrix_power(one, m) @ head


def raw_propagator(device: DeviceModel, pair, drive: ModulationDrive) -> np.ndarray:
    """Pulse propagator in the rotating (not dressed) frame."""
    if drive.duration <= 0:
        return np.eye(LEVELS ** 2, dtype=complex)
    v = -1j * to_angular(coupling_operator(device.edge(*pair).g))
    if drive.phi_p == 0.0:
        e = _static_energies(device, pair)
        return expm((np.diag(-1j * to_angular(e)) + v) * drive.duration * 1e-3)
    t_mid, dts, span = _step_grid(drive)
    diag = -1j * to_angular(_pair_energies(device, pair, drive, t_mid))
    return _propagate_periodic(diag, v.astype(complex), dts * 1e-3, span)


def _frame_out(device, pair, duration):
    w, e = dressed_frame(device, pair)
    out = np.exp(1j * to_angular(e) * duration * 1e-3)[:, None] * w.conj().T
    return w, out


def pair_unitary(device: DeviceModel, pair, drive: ModulationDrive) -> np.ndarray:
    """Closed-system 9x9 propagator of the pulse in the idle dressed frame."""
    w, out = _frame_out(device, pair, drive.duration)
    return out @ raw_propagator(device, pair, drive) @ w


# -- open system ------------------------------------------------------------------

def _lindblad_dissipator(ops) -> np.ndarray:
    n = ops[0].shape[0] if ops else LEVELS ** 2
    eye = np.eye(n)
    d = np.zeros((n * n, n * n), dtype=complex)
    for c in ops:
        cdc = c.conj().T @ c
        d += np.kron(c, c.conj()) - 0.5 * (np.kron(cdc, eye) + np.kron(eye, cdc.T))
    return d


def _pair_jump_ops(noise: NoiseChannel, roles, driven: bool):
    ops = []
    for q, slot in ((roles.fixed, 0), (roles.tunable, 1)):
        g1, gphi = noise.rates(q, driven_tunable=driven and q == roles.tunable)
        embed = (lambda a: np.kron(a, I3)) if slot == 0 else (lambda a: np.kron(I3, a))
        if g1 > 0:
            ops.append(math.sqrt(g1) * embed(SIGMA))
        if gphi > 0:
            ops.append(math.sqrt(2.0 * gphi) * embed(NUMBER))
    return ops


def pair_superoperator(device: DeviceModel, pair, drive: ModulationDrive,
                       noise: NoiseChannel | None = None) -> np.ndarray:
    """81x81 row-major superoperator of the pulse in the idle dressed frame.

    vec(rho) is the row-major flattening, so vec(A rho B) = (A kron B^T) vec(rho).
    """
    w, out = _frame_out(device, pair, drive.duration)
    if noise is None:
        u = out @ raw_propagator(device, pair, drive) @ w
        return np.kron(u, u.conj())
    n = LEVELS ** 2
    eye = np.eye(n)
    roles = pair_roles(device, pair)
    v = to_angular(coupling_operator(device.edge(*pair).g))
    driven = drive.phi_p > 0.0
    const = -1j * (np.kron(v, eye) - np.kron(eye, v.T)) + _lindblad_dissipator(_pair_jump_ops(noise, roles, driven))
    if drive.duration <= 0:
        s = np.eye(n * n, dtype=complex)
    elif not driven:
        e = to_angular(_static_energies(device, pair))
        diag = -1j * (e[:, None] - e[None, :]).reshape(-1)
        s = expm((np.diag(diag) + const) * drive.duration * 1e-3)
    else:
        t_mid, dts, span = _step_grid(drive)
        e = to_angular(_pair_energies(device, pair, drive, t_mid))
        diag = -1j * (e[:, :, None] - e[:, None, :]).reshape(len(t_mid), -1)
        s = _propagate_periodic(diag, const.astype(complex), dts * 1e-3, span)
    return np.kron(out, out.conj()) @ s @ np.kron(w, w.conj())


def evolve(device: DeviceModel, pair, drive: ModulationDrive, noise: NoiseChannel | None,
           rho0: DensityState) -> DensityState:
    """Evolve a pair state through one pulse; input and output in the idle dressed frame."""
    if rho0.dims != [LEVELS, LEVELS]:
        raise ValueError("pair evolution expects dims [3, 3]")
    s = pair_superoperator(device, pair, drive, noise)
    rho = (s @ rho0.matrix.reshape(-1)).reshape(LEVELS ** 2, LEVELS ** 2)
    rho = 0.5 * (rho + rho.conj().T)
    err = abs(np.trace(rho).real - 1.0)
    if err > 1e-8:
        raise DynamicsError(f"trace drifted by {err:.2e} during evolution")
    return DensityState([LEVELS, LEVELS], rho)


# -- chevrons and Ramsey ------------------------------------------------------------

def _partner_index(kind: GateKind) -> int:
    kind = GateKind(kind)
    if kind is GateKind.CZ02:
        return 2  # |02>
    if kind is GateKind.CZ20:
        return 6  # |20>
    return 1  # |01>, partner of |10>


def _start_index(kind: GateKind) -> int:
    return 3 if GateKind(kind) is GateKind.ISWAP else 4


def chevron_scan(device: DeviceModel, pair, f_flux_values, durations, phi_p: float,
                 kind: GateKind | str = GateKind.CZ02, risetime: float = 0.0):
    """Population of the initial state (``|11>`` for CZ kinds) after pulses on a grid.

    ``durations`` are flat-top lengths in ns. With square pulses
    (``risetime=0``) one cumulative propagation per frequency gives every
    duration. Returns ``(p_start, p_partner)``, each shaped
    ``(len(f_flux_values), len(durations))``.
    """
    f_vals = np.atleast_1d(np.asarray(f_flux_values, dtype=float))
    durs = np.atleast_1d(np.asarray(durations, dtype=float))
    if f_vals.size == 0 or durs.size == 0:
        raise ValueError("empty scan range")
    i0, i1 = _start_index(kind), _partner_index(kind)
    p0 = np.empty((f_vals.size, durs.size))
    p1 = np.empty_like(p0)
    v = (-1j * to_angular(coupling_operator(device.edge(*pair).g))).astype(complex)
    for a, f in enumerate(f_vals):
        if risetime > 0:
            for b, d in enumerate(durs):
                u = raw_propagator(device, pair, ModulationDrive(phi_p, f, d + 2 * risetime, 0.0, risetime))
                p0[a, b] = abs(u[i0, i0]) ** 2
                p1[a, b] = abs(u[i1, i0]) ** 2
            continue
        tmax = durs.max()
        drive = ModulationDrive(phi_p, f, tmax, 0.0, 0.0)
        h = drive.step
        n = int(math.ceil(tmax / h)) + 1
        t_mid = h * (np.arange(n) + 0.5)
        diag = -1j * to_angular(_pair_energies(device, pair, drive, t_mid))
        cum = _kernels.propagate_cumulative(diag, v, np.full(n, h * 1e-3))
        for b, d in enumerate(durs):
            k = int(math.floor(d / h))
            frac = d - k * h
            u = cum[k]
            if frac > 1e-12:
                u = expm((np.diag(diag[k]) + v) * frac * 1e-3) @ u
            p0[a, b] = abs(u[i0, i0]) ** 2
            p1[a, b] = abs(u[i1, i0]) ** 2
    return p0, p1


def _fringe_phase(rho_t: np.ndarray, n_phases: int = 16):
    """Fit the Ramsey fringe of a single-qutrit state; returns (phase, r2)."""
    phis = 2.0 * np.pi * np.arange(n_phases) / n_phases
    p1 = np.empty(n_phases)
    for i, phi in enumerate(phis):
        r = embed_qubit_unitary(rotation_xy(math.pi / 2, phi))
        out = r @ rho_t @ r.conj().T
        p1[i] = np.real(out[1, 1] + out[2, 2])  # |2> reads as 1
    design = np.column_stack([np.ones_like(phis), np.cos(phis), np.sin(phis)])
    coef, *_ = np.linalg.lstsq(design, p1, rcond=None)
    fit = design @ coef
    ss_tot = np.sum((p1 - p1.mean()) ** 2)
    r2 = 1.0 - np.sum((p1 - fit) ** 2) / ss_tot if ss_tot > 0 else 0.0
    # P1 = 1/2 - sin(theta - phi)/2  =>  cos-coef = -sin(theta)/2, sin-coef = cos(theta)/2
    return math.atan2(-coef[1], coef[2]), r2


def ramsey_phase(device: DeviceModel, pair, drive: ModulationDrive, control_state: int,
                 target: str = "tunable", noise: NoiseChannel | None = None) -> float:
    """Phase of the target qubit's Ramsey fringe with the other qubit in ``control_state``.

    The target starts in (|0> + |1>)/sqrt2, the pulse is applied, and an
    analysis pi/2 pulse of varying axis phase maps the accumulated phase onto
    the |1> population (|2> counted as 1). Returns the fitted phase in rad.
    """
    if control_state not in (0, 1):
        raise ValueError("control_state must be 0 or 1")
    plus = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
    ctrl = np.zeros(LEVELS)
    ctrl[control_state] = 1.0
    psi = np.kron(ctrl, plus) if target == "tunable" else np.kron(plus, ctrl)
    rho0 = DensityState.pure([LEVELS, LEVELS], psi)
    rho = evolve(device, pair, drive, noise, rho0).matrix.reshape(LEVELS, LEVELS, LEVELS, LEVELS)
    red = np.einsum("fafb->ab", rho) if target == "tunable" else np.einsum("atbt->ab", rho)
    phase, r2 = _fringe_phase(red)
    if r2 < 0.9:
        raise DynamicsError(f"Ramsey fringe fit failed (R^2 = {r2:.3f})")
    return phase


# -- calibration ---------------------------------------------------------------------

@dataclass(frozen=True)
class CalibratedGate:
    pair: tuple
    kind: GateKind
    harmonic: int
    drive: ModulationDrive
    rz_correction: float  # rad, on the tunable qubit
    rz_correction_fixed: float  # rad, on the fixed qubit
    achieved_unitary_fidelity: float
    leakage: float
    coupling_g: float
    T2_eff: float | None = None

    def to_dict(self) -> dict:
        return {
            "pair": list(self.pair),
            "kind": GateKind(self.kind).value,
            "harmonic": self.harmonic,
            "drive": self.drive.to_dict(),
            "rz_correction": self.rz_correction,
            "rz_correction_fixed": self.rz_correction_fixed,
            "achieved_unitary_fidelity": self.achieved_unitary_fidelity,
            "leakage": self.leakage,
            "coupling_g": self.coupling_g,
            "T2_eff": self.T2_eff,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "CalibratedGate":
        return cls(
            pair=tuple(raw["pair"]),
            kind=GateKind(raw["kind"]),
            harmonic=int(raw["harmonic"]),
            drive=ModulationDrive(**raw["drive"]),
            rz_correction=float(raw["rz_correction"]),
            rz_correction_fixed=float(raw["rz_correction_fixed"]),
            achieved_unitary_fidelity=float(raw["achieved_unitary_fidelity"]),
            leakage=float(raw["leakage"]),
            coupling_g=float(raw["coupling_g"]),
            T2_eff=raw.get("T2_eff"),
        )

    def device_for(self, device: DeviceModel) -> DeviceModel:
        """The device with this gate's (possibly fitted) edge coupling."""
        return device.with_coupling(*self.pair, self.coupling_g)


def virtual_z(theta: float) -> np.ndarray:
    """Frame rotation exp(i theta n) on a qutrit, up to global phase Rz(theta)."""
    return np.diag(np.exp(1j * theta * np.arange(LEVELS)) * np.exp(-0.5j * theta))


def correction_unitary(rz_fixed: float, rz_tunable: float) -> np.ndarray:
    return np.kron(virtual_z(rz_fixed), virtual_z(rz_tunable))


def unitary_fidelity(m: np.ndarray, target: np.ndarray) -> float:
    """Average gate fidelity of a (possibly leaky) subspace block ``m`` to ``target``."""
    d = target.shape[0]
    return float((np.real(np.trace(m @ m.conj().T)) + abs(np.trace(target.conj().T @ m)) ** 2) / (d * (d + 1)))


def _single_phases(u: np.ndarray) -> tuple[float, float]:
    """Phases of |10> and |01> relative to |00> in a 9x9 pair unitary."""
    a00 = np.angle(u[0, 0])
    return float(np.angle(u[3, 3]) - a00), float(np.angle(u[1, 1]) - a00)


def _corrected_block(u: np.ndarray):
    th_f, th_t = _single_phases(u)
    c = correction_unitary(-th_f, -th_t) @ u
    return c[np.ix_(COMPUTATIONAL, COMPUTATIONAL)], (-th_f, -th_t)


def _gate_drive(f, flat, phi_p, risetime):
    return ModulationDrive(phi_p, f, flat + 2.0 * risetime, 0.0, risetime)


def simulated_exchange(device: DeviceModel, pair, kind, phi_p: float, harmonic: int):
    """Resonant flux frequency and full exchange period of a square pulse.

    Returns ``(f_flux, period_ns)`` found numerically: the frequency that
    maximises transfer at the predicted half period, then the time of best
    return. ``1 / (2 period)`` is the simulated effective coupling.
    """
    kind = GateKind(kind)
    pred = predict_gate(device, pair, kind, phi_p, harmonic, 0.0)
    i0 = _start_index(kind)

    def ret(f, t):
        return abs(raw_propagator(device, pair, ModulationDrive(phi_p, f, t, 0.0, 0.0))[i0, i0]) ** 2

    width = pred.g_eff / abs(harmonic)
    f = minimize_scalar(lambda x: ret(x, 0.5 * pred.tau_flat), bounds=(pred.f_mod_flux - width, pred.f_mod_flux + width),
                        method="bounded", options={"xatol": 1e-5}).x
    t = minimize_scalar(lambda x: 1.0 - ret(f, x), bounds=(0.75 * pred.tau_flat, 1.25 * pred.tau_flat),
                        method="bounded", options={"xatol": 1e-4}).x
    return float(f), float(t)


def fit_coupling_numeric(device: DeviceModel, pair, kind, phi_p: float, harmonic: int, g_eff_target: float,
                         iterations: int = 4) -> float:
    """Bare coupling for which the simulated square-pulse exchange rate is ``g_eff_target``.

    Starts from the closed-form fit and rescales by the ratio of simulated to
    target period; the period is inversely proportional to g near resonance.
    """
    g = fit_bare_coupling(device, pair, kind, phi_p, harmonic, g_eff_target)
    target = 1e3 / (2.0 * g_eff_target)
    for _ in range(iterations):
        _, period = simulated_exchange(device.with_coupling(*pair, g), pair, kind, phi_p, harmonic)
        g *= period / target
        if abs(period / target - 1.0) < 1e-5:
            break
    return g


def calibrate_cz(device: DeviceModel, pair, phi_p: float | None = None, kind=None, harmonic: int | None = None,
                 risetime: float = DEFAULT_RISETIME, target_g_eff: float | None = None,
                 refine: bool = True) -> CalibratedGate:
    """Tune frequency, duration and Z corrections of a parametric CZ (closed system).

    Defaults come from the device's stored operating point for ``pair``.
    ``target_g_eff`` rescales the bare coupling so the predicted effective
    coupling equals it before calibrating.
    """
    op = next((o for o in device.gates if set(o.pair) == set(pair)), None)
    if phi_p is None or kind is None or harmonic is None:
        if op is None:
            raise CalibrationError(f"no operating point stored for pair {pair}")
    phi_p = op.phi_p if phi_p is None else phi_p
    kind = GateKind(op.kind if kind is None else kind)
    harmonic = op.harmonic if harmonic is None else harmonic
    if not kind.is_cz:
        raise CalibrationError("calibrate_cz needs a CZ gate kind")
    if target_g_eff is not None:
        device = device.with_coupling(*pair, fit_coupling_numeric(device, pair, kind, phi_p, harmonic, target_g_eff))
    pred = predict_gate(device, pair, kind, phi_p, harmonic, risetime)
    f0, g_eff, tau = pred.f_mod_flux, pred.g_eff, pred.tau_flat
    i0 = _start_index(kind)

    def u_of(f, flat):
        return raw_propagator(device, pair, _gate_drive(f, flat, phi_p, risetime))

    # 1. exchange contrast at half a period, coarse grid then bounded golden search
    half = 0.5 * tau
    width = 2.0 * g_eff / abs(harmonic)
    grid = f0 + np.linspace(-width, width, 21)
    transfer = np.array([1.0 - abs(u_of(f, half)[i0, i0]) ** 2 for f in grid])
    best = int(np.argmax(transfer))
    if transfer[best] < 0.5:
        raise CalibrationError(f"exchange contrast {transfer[best]:.3f} < 0.5 near {f0:.3f} MHz")
    cell = grid[1] - grid[0]
    res = minimize_scalar(lambda f: abs(u_of(f, half)[i0, i0]) ** 2,
                          bounds=(grid[best] - cell, grid[best] + cell), method="bounded",
                          options={"xatol": 1e-5})
    f_cal = float(res.x)

    # 2. full period: best return to the start state on a 1 ns grid, then polished
    flats = np.arange(0.7 * tau, 1.3 * tau, 1.0)
    back = np.array([abs(u_of(f_cal, t)[i0, i0]) ** 2 for t in flats])
    k = int(np.argmax(back))
    res = minimize_scalar(lambda t: 1.0 - abs(u_of(f_cal, t)[i0, i0]) ** 2,
                          bounds=(flats[max(k - 1, 0)], flats[min(k + 1, len(flats) - 1)]),
                          method="bounded", options={"xatol": 1e-3})
    flat = float(res.x)

    def infidelity(x):
        u = pair_unitary(device, pair, _gate_drive(x[0], x[1], phi_p, risetime))
        block, _ = _corrected_block(u)
        return 1.0 - unitary_fidelity(block, CZ)

    # 3. optional joint refinement on the Z-corrected fidelity: a local grid
    # (spurious sidebands make the landscape ripple) followed by Nelder-Mead
    if refine:
        cands = [(infidelity([f, t]), f, t)
                 for f in f_cal + cell * np.linspace(-0.5, 0.5, 7)
                 for t in flat + np.arange(-12.0, 12.5, 2.0)]
        _, f_start, t_start = min(cands)
        res = minimize(infidelity, [f_start, t_start], method="Nelder-Mead",
                       options={"xatol": 1e-5, "fatol": 1e-10, "initial_simplex":
                                [[f_start, t_start], [f_start + 0.05 * cell, t_start], [f_start, t_start + 0.5]]})
        if res.fun < infidelity([f_cal, flat]):
            f_cal, flat = float(res.x[0]), float(res.x[1])

    drive = _gate_drive(f_cal, flat, phi_p, risetime)
    # 4. single-qubit phases from Ramsey fringes with the partner in |0>
    th_t = ramsey_phase(device, pair, drive, 0, "tunable")
    th_f = ramsey_phase(device, pair, drive, 0, "fixed")
    u = correction_unitary(-th_f, -th_t) @ pair_unitary(device, pair, drive)
    block = u[np.ix_(COMPUTATIONAL, COMPUTATIONAL)]
    leak = 1.0 - np.real(np.trace(block.conj().T @ block)) / 4.0
    return CalibratedGate(
        pair=tuple(pair),
        kind=kind,
        harmonic=harmonic,
        drive=drive,
        rz_correction=-th_t,
        rz_correction_fixed=-th_f,
        achieved_unitary_fidelity=unitary_fidelity(block, CZ),
        leakage=float(max(leak, 0.0)),
        coupling_g=device.edge(*pair).g,
        T2_eff=None if op is None else op.T2_eff,
    )


def calibrated_unitary(device: DeviceModel, cal: CalibratedGate) -> np.ndarray:
    """9x9 corrected gate unitary, ``|fixed, tunable>`` ordering."""
    dev = cal.device_for(device)
    u = pair_unitary(dev, cal.pair, cal.drive)
    return correction_unitary(cal.rz_correction_fixed, cal.rz_correction) @ u


def calibrated_superoperator(device: DeviceModel, cal: CalibratedGate,
                             noise: NoiseChannel | None = None) -> np.ndarray:
    """81x81 corrected gate channel, ``|fixed, tunable>`` ordering."""
    dev = cal.device_for(device)
    c = correction_unitary(cal.rz_correction_fixed, cal.rz_correction)
    s = pair_superoperator(dev, cal.pair, cal.drive, noise)
    return np.kron(c, c.conj()) @ s


def gate_noise(device: DeviceModel, cal: CalibratedGate, T2_eff: float | None = "default") -> NoiseChannel:
    """Noise channel for a calibrated gate using the device coherences and T2_eff."""
    t2 = cal.T2_eff if T2_eff == "default" else T2_eff
    return NoiseChannel.from_device(device, cal.pair, t2)


# -- single-qubit gates on qutrits ---------------------------------------------------

PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
PAULI_Z = np.diag([1.0, -1.0]).astype(complex)


def rotation_xy(angle: float, axis_phase: float) -> np.ndarray:
    """Qubit rotation by ``angle`` about cos(phase) X + sin(phase) Y."""
    n = math.cos(axis_phase) * PAULI_X + math.sin(axis_phase) * PAULI_Y
    return math.cos(angle / 2) * np.eye(2) - 1j * math.sin(angle / 2) * n


def embed_qubit_unitary(u2: np.ndarray) -> np.ndarray:
    """Act with a qubit unitary on {|0>,|1>} of a qutrit, leaving |2> alone."""
    u = np.eye(LEVELS, dtype=complex)
    u[:2, :2] = u2
    return u


def single_qubit_gate(name: str, theta: float | None = None) -> np.ndarray:
    """Qutrit-embedded unitary for ``i, x, y, h, rx, ry, rz``."""
    name = name.lower()
    if name == "i":
        return np.eye(LEVELS, dtype=complex)
    if name == "x":
        return embed_qubit_unitary(rotation_xy(math.pi, 0.0))
    if name == "y":
        return embed_qubit_unitary(rotation_xy(math.pi, math.pi / 2))
    if name == "h":
        return embed_qubit_unitary((PAULI_X + PAULI_Z) / math.sqrt(2.0))
    if theta is None:
        raise ValueError(f"gate {name} needs an angle")
    if name == "rx":
        return embed_qubit_unitary(rotation_xy(theta, 0.0))
    if name == "ry":
        return embed_qubit_unitary(rotation_xy(theta, math.pi / 2))
    if name == "rz":
        return virtual_z(theta)
    raise ValueError(f"unknown gate '{name}'")


def depolarizing_superop(p: float) -> np.ndarray:
    """rho -> (1-p) rho + p I/2 on the qubit subspace of a qutrit (9x9 superop).

    Paulis are extended by the identity on |2> so every Kraus operator stays
    unitary and leaked population is untouched.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("depolarizing strength must lie in [0, 1]")
    ops = [np.eye(LEVELS, dtype=complex)] + [embed_qubit_unitary(s) for s in (PAULI_X, PAULI_Y, PAULI_Z)]
    weights = [1.0 - 0.75 * p, 0.25 * p, 0.25 * p, 0.25 * p]
    return sum(w * np.kron(k, k.conj()) for w, k in zip(weights, ops))


def idle_superop(T1: float, T2_star: float, duration_ns: float) -> np.ndarray:
    """Single-qutrit relaxation and dephasing over ``duration_ns`` (9x9 superop)."""
    if duration_ns <= 0:
        return np.eye(LEVELS ** 2, dtype=complex)
    g1 = 1.0 / T1
    gphi = max(1.0 / T2_star - 0.5 / T1, 0.0)
    d = _lindblad_dissipator([math.sqrt(g1) * SIGMA, math.sqrt(2.0 * gphi) * NUMBER])
    return expm(d * duration_ns * 1e-3)


# -- register operations ---------------------------------------------------------------

def _apply_superop(rho: np.ndarray, s: np.ndarray, targets, dims) -> np.ndarray:
    """Apply a row-major superoperator on ``targets`` of a register density matrix."""
    n = len(dims)
    k = len(targets)
    tdims = [dims[t] for t in targets]
    t = rho.reshape(list(dims) + list(dims))
    s_t = s.reshape(tdims + tdims + tdims + tdims)
    in_axes = list(targets) + [n + x for x in targets]
    out = np.tensordot(s_t, t, axes=(list(range(2 * k, 4 * k)), in_axes))
    rest = [a for a in range(2 * n) if a not in in_axes]
    # out axes: row targets, col targets, then remaining axes in original order
    order = list(targets) + [n + x for x in targets] + rest
    return _restore_axes(out, order).reshape(rho.shape)


def _restore_axes(arr: np.ndarray, order) -> np.ndarray:
    inv = np.argsort(order)
    return np.transpose(arr, inv)


def _apply_unitary(rho: np.ndarray, u: np.ndarray, targets, dims) -> np.ndarray:
    return _apply_superop(rho, np.kron(u, u.conj()), targets, dims)


@dataclass(frozen=True)
class CircuitNoise:
    """Which error sources a circuit run includes."""

    depolarizing: bool = True
    decoherence: bool = True  # T1/T2 during the two-qubit gates
    dispersive: bool = True
    T2_eff: dict = field(default_factory=dict)  # pair (sorted tuple) -> us override
    idle: bool = False  # T1/T2* on register qubits that wait out a two-qubit gate
    ideal_gates: bool = False  # CZ as the exact phase flip of |11>, ignoring the calibration


NOISELESS = CircuitNoise(False, False, False)
IDEAL = CircuitNoise(False, False, False, ideal_gates=True)
IDEAL_CZ9 = np.diag([1, 1, 1, 1, -1, 1, 1, 1, 1]).astype(complex)


def run_circuit(device: DeviceModel, circuit, register, calibrations: dict | None = None,
                noise: CircuitNoise | None = None, initial: DensityState | None = None) -> DensityState:
    """Simulate a gate list on a register of qutrits.

    ``circuit`` items are tuples ``(name, qubit[, angle])`` for single-qubit
    gates and ``("cz", a, b)`` for calibrated two-qubit gates. ``register``
    lists device qubit indices; its order sets the tensor ordering. The CZ
    channel comes from ``calibrations[(a, b)]`` (either orientation).
    During each CZ, gate qubits pick up conditional phases from the
    dispersive pull of excited register spectators. Idle decoherence of the
    waiting qubits is off unless ``noise.idle`` is set. With
    ``noise.ideal_gates`` each CZ is the exact |11> phase flip and needs no
    calibration.
    """
    noise = NOISELESS if noise is None else noise
    calibrations = calibrations or {}
    register = list(register)
    dims = [LEVELS] * len(register)
    pos = {q: i for i, q in enumerate(register)}
    rho = (DensityState.basis(dims, [0] * len(register)) if initial is None else initial).matrix.copy()
    cache = {}

    def where(q):
        if q not in pos:
            raise ValueError(f"gate addresses Q{q}, which is not in the register {register}")
        return pos[q]

    for op in circuit:
        name = str(op[0]).lower()
        if name == "cz":
            a, b = int(op[1]), int(op[2])
            if noise.ideal_gates:
                targets = [where(a), where(b)]
                rho = _apply_superop(rho, np.kron(IDEAL_CZ9, IDEAL_CZ9), targets, dims)
                continue
            cal = calibrations.get((a, b)) or calibrations.get((b, a))
            if cal is None:
                raise ValueError(f"no calibration for CZ on Q{a}-Q{b}")
            key = (cal.pair, noise.decoherence)
            if key not in cache:
                if noise.decoherence:
                    t2 = noise.T2_eff.get(tuple(sorted(cal.pair)), cal.T2_eff)
                    ch = calibrated_superoperator(device, cal, NoiseChannel.from_device(device, cal.pair, t2))
                else:
                    u = calibrated_unitary(device, cal)
                    ch = np.kron(u, u.conj())
                cache[key] = ch
            roles = pair_roles(device, cal.pair)
            targets = [where(roles.fixed), where(roles.tunable)]
            rho = _apply_superop(rho, cache[key], targets, dims)
            tau = cal.drive.duration
            for q in register:
                if q in (a, b):
                    continue
                if noise.idle:
                    qp = device.qubit(q)
                    rho = _apply_superop(rho, idle_superop(qp.T1, qp.T2_star, tau), [pos[q]], dims)
            if noise.dispersive:
                rho = _dispersive_phases(device, rho, (a, b), register, dims, tau)
        else:
            q = int(op[1])
            theta = float(op[2]) if len(op) > 2 else None
            u = single_qubit_gate(name, theta)
            rho = _apply_unitary(rho, u, [where(q)], dims)
            if noise.depolarizing and name not in ("i", "rz"):
                p = device.qubit(q).single_qubit_error_p
                rho = _apply_superop(rho, depolarizing_superop(p), [where(q)], dims)
    rho = 0.5 * (rho + rho.conj().T)
    return DensityState(dims, rho)


def dispersive_phase(chi_khz: float, duration_ns: float) -> float:
    """Phase 2 pi chi tau in rad for chi in kHz and tau in ns."""
    return 2.0 * math.pi * chi_khz * 1e-3 * duration_ns * 1e-3


def _dispersive_phases(device, rho, gate_pair, register, dims, tau):
    """Conditional phase exp(i 2 pi chi tau n_t n_s) for gate qubits t pulled by spectators s."""
    n = len(register)
    pos = {q: i for i, q in enumerate(register)}
    diag = np.zeros([LEVELS] * n)
    grids = np.meshgrid(*[np.arange(LEVELS)] * n, indexing="ij")
    for (t, s), chi in device.dispersive_shifts.items():
        if t not in gate_pair or s in gate_pair or s not in pos:
            continue
        diag = diag + dispersive_phase(chi, tau) * grids[pos[t]] * grids[pos[s]]
    if not np.any(diag):
        return rho
    ph = np.exp(1j * diag.reshape(-1))
    return ph[:, None] * rho * ph.conj()[None, :]


def spectator_phases(device: DeviceModel, pair, spectator: int, duration_ns: float) -> dict:
    """Phase (rad) each gate qubit picks up while ``spectator`` is excited."""
    out = {}
    for q in pair:
        chi = device.chi(q, spectator)
        out[q] = dispersive_phase(chi, duration_ns)
    return out
