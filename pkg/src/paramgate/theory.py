"""Closed-form sideband theory for parametrically modulated transmon pairs.

Modulating the tunable qubit brings one two-qubit transition into resonance
with a harmonic of the modulation. This module computes the sideband
couplings g_n = g J_n(eps/omega_m), the modulation frequencies that satisfy
the resonance conditions, and the resulting flat-top gate times.

Conventions: all frequencies are linear MHz, times are ns. At the Phi0/2
bias the qubit frequency oscillates at omega_m = 2 f_flux, so the physical
flux drive runs at half the qubit modulation frequency.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .device import (
    DeviceModel,
    avg_freq_under_modulation,
    excursion_amplitude,
    freq_vs_flux,
)

BESSEL_MAX_ORDER = 20
BESSEL_MAX_ARG = 50.0
SEARCH_HALF_WIDTH = 500.0  # MHz, around the unmodulated estimate
ROOT_TOL = 1e-3  # MHz
DEFAULT_RISETIME = 40.0  # ns


class ResonanceError(RuntimeError):
    """No resonance inside the search window."""


class GateKind(str, enum.Enum):
    ISWAP = "iswap"  # |10> <-> |01>
    CZ02 = "cz02"  # |11> <-> |02>
    CZ20 = "cz20"  # |11> <-> |20>

    @property
    def is_cz(self) -> bool:
        return self is not GateKind.ISWAP

    @property
    def matrix_element(self) -> float:
        """Ladder-operator factor of the transition (sqrt 2 when |2> is involved)."""
        return math.sqrt(2.0) if self.is_cz else 1.0


@dataclass(frozen=True)
class SidebandCoupling:
    n: int
    g_n: complex
    beta_n: float

    @property
    def magnitude(self) -> float:
        return abs(self.g_n)


@dataclass(frozen=True)
class PairRoles:
    """Which member of a coupled pair is fixed and which is tunable."""

    fixed: int
    tunable: int


@dataclass(frozen=True)
class GatePrediction:
    kind: GateKind
    harmonic: int
    f_mod_flux: float  # MHz, physical flux-drive frequency
    detuning: float  # MHz, omega_bar_T - omega_F
    g_eff: float  # MHz, full transition matrix element
    tau_flat: float  # ns, one full population-exchange period
    phi_p: float
    delta_omega: float = 0.0  # MHz
    risetime: float = DEFAULT_RISETIME

    @property
    def tau_total(self) -> float:
        """Flat-top time plus the two pulse ramps (the tabulated gate duration)."""
        return self.tau_flat + 2.0 * self.risetime

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "harmonic": self.harmonic,
            "f_mod_flux_mhz": self.f_mod_flux,
            "detuning_mhz": self.detuning,
            "g_eff_mhz": self.g_eff,
            "tau_flat_ns": self.tau_flat,
            "tau_total_ns": self.tau_total,
            "risetime_ns": self.risetime,
            "phi_p": self.phi_p,
            "delta_omega_mhz": self.delta_omega,
        }


def bessel_J(n: int, x: float) -> float:
    """Bessel function of the first kind, validated for |n| <= 20, |x| <= 50."""
    if abs(n) > BESSEL_MAX_ORDER or abs(x) > BESSEL_MAX_ARG:
        raise ValueError(f"J_{n}({x}) outside the validated range |n|<=20, |x|<=50")
    return _kernels.bessel_jn(int(n), float(x))


def sideband_coupling(g: float, eps: float, f_qubit_mod: float, n: int, theta_m: float = 0.0,
                      omega_tilde: float = 0.0) -> SidebandCoupling:
    """Effective coupling of the n-th sideband, g_n = g J_n(eps/f) exp(i beta_n).

    ``eps`` and ``f_qubit_mod`` are the excursion amplitude and the qubit
    modulation frequency in the same units. The interaction phase is
    beta_n = n (theta_m + pi) + omega_tilde sin(theta_m / omega_m), with
    omega_tilde and omega_m angular; it vanishes apart from n*pi at theta_m = 0.
    """
    if f_qubit_mod <= 0:
        raise ValueError("modulation frequency must be positive")
    amp = g * bessel_J(n, eps / f_qubit_mod)
    omega_m = 2.0 * math.pi * f_qubit_mod
    beta = n * (theta_m + math.pi) + omega_tilde * math.sin(theta_m / omega_m)
    return SidebandCoupling(n=n, g_n=amp * complex(math.cos(beta), math.sin(beta)), beta_n=beta)


def pair_roles(device: DeviceModel, pair) -> PairRoles:
    a, b = pair
    device.edge(a, b)
    qa, qb = device.qubit(a), device.qubit(b)
    if qa.tunable == qb.tunable:
        raise ValueError(f"pair Q{a}-Q{b} is not a tunable/fixed pair")
    return PairRoles(fixed=b, tunable=a) if qa.tunable else PairRoles(fixed=a, tunable=b)


def transition_frequency(kind: GateKind, omega_t: float, omega_f: float, eta_t: float, eta_f: float) -> float:
    """Signed energy gap (MHz) of the transition driven by ``kind``.

    ``eta_*`` are the positive stored anharmonicities.
    """
    kind = GateKind(kind)
    if kind is GateKind.ISWAP:
        return omega_t - omega_f
    if kind is GateKind.CZ02:
        return omega_t - eta_t - omega_f
    return omega_t - (omega_f - eta_f)


def transition_detunings(device: DeviceModel, pair, phi_p: float) -> dict:
    """Static gaps of all three transitions at the modulated mean frequency."""
    roles = pair_roles(device, pair)
    qt, qf = device.qubit(roles.tunable), device.qubit(roles.fixed)
    wbar, _ = avg_freq_under_modulation(qt, device.flux[roles.tunable], phi_p)
    return {
        k: transition_frequency(k, wbar, qf.f01_max, qt.anharmonicity_eta, qf.anharmonicity_eta)
        for k in GateKind
    }


def _bisect(fun, lo: float, hi: float, tol: float = ROOT_TOL, max_iter: int = 200) -> float:
    flo, fhi = fun(lo), fun(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if np.sign(flo) == np.sign(fhi):
        raise ResonanceError(f"no sign change of the resonance residual in [{lo:.3f}, {hi:.3f}] MHz")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = fun(mid)
        if fm == 0.0 or hi - lo < tol:
            return mid
        if np.sign(fm) == np.sign(flo):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def resonance_residual(device: DeviceModel, pair, kind: GateKind, phi_p: float, harmonic: int):
    """Residual r(f) = 2 n f - |gap(omega_bar_T(phi_p, f))| as a callable of f (MHz)."""
    roles = pair_roles(device, pair)
    qt, qf = device.qubit(roles.tunable), device.qubit(roles.fixed)
    fr = device.flux[roles.tunable]
    kind = GateKind(kind)

    def residual(f_flux: float) -> float:
        wbar, _ = avg_freq_under_modulation(qt, fr, phi_p, f_mod=max(f_flux, 1e-9))
        gap = transition_frequency(kind, wbar, qf.f01_max, qt.anharmonicity_eta, qf.anharmonicity_eta)
        return 2.0 * abs(harmonic) * f_flux - abs(gap)

    return residual


def resonant_flux_frequency(device: DeviceModel, pair, kind: GateKind, phi_p: float, harmonic: int = 1) -> float:
    """Flux-drive frequency (MHz) meeting the resonance condition of ``kind``."""
    if harmonic == 0:
        raise ValueError("harmonic must be non-zero")
    roles = pair_roles(device, pair)
    qt, qf = device.qubit(roles.tunable), device.qubit(roles.fixed)
    w0 = freq_vs_flux(qt, device.flux[roles.tunable], device.flux[roles.tunable].dc_bias)
    gap0 = transition_frequency(kind, w0, qf.f01_max, qt.anharmonicity_eta, qf.anharmonicity_eta)
    guess = abs(gap0) / (2.0 * abs(harmonic))
    lo = max(guess - SEARCH_HALF_WIDTH, 1e-6)
    hi = guess + SEARCH_HALF_WIDTH
    return _bisect(resonance_residual(device, pair, kind, phi_p, harmonic), lo, hi)


def resonance_curves(device: DeviceModel, pair, phi_p: float, harmonics=(1, 2)) -> dict:
    """Flux-drive frequencies for every gate kind and harmonic.

    Returns ``{GateKind: {n: f_flux_MHz}}``; the first harmonic sits at
    omega_m/2 and the second at omega_m/4.
    """
    return {
        kind: {n: resonant_flux_frequency(device, pair, kind, phi_p, n) for n in harmonics}
        for kind in GateKind
    }


def predict_gate(device: DeviceModel, pair, kind: GateKind, phi_p: float, harmonic: int = 1,
                 risetime: float = DEFAULT_RISETIME, theta_m: float = 0.0) -> GatePrediction:
    kind = GateKind(kind)
    roles = pair_roles(device, pair)
    qt, qf = device.qubit(roles.tunable), device.qubit(roles.fixed)
    fr = device.flux[roles.tunable]
    f_flux = resonant_flux_frequency(device, pair, kind, phi_p, harmonic)
    f_qubit_mod = 2.0 * f_flux
    eps = excursion_amplitude(qt, fr, phi_p)
    wbar, dw = avg_freq_under_modulation(qt, fr, phi_p, f_mod=f_flux)
    g = device.edge(*pair).g
    sb = sideband_coupling(g, eps, f_qubit_mod, harmonic, theta_m, omega_tilde=2.0 * math.pi * wbar)
    g_eff = kind.matrix_element * sb.magnitude
    return GatePrediction(
        kind=kind,
        harmonic=harmonic,
        f_mod_flux=f_flux,
        detuning=wbar - qf.f01_max,
        g_eff=g_eff,
        tau_flat=gate_time_from_coupling(g_eff),
        phi_p=phi_p,
        delta_omega=dw,
        risetime=risetime,
    )


def gate_time_from_coupling(g_eff: float) -> float:
    """Full exchange period 1/(2 g_eff) in ns for g_eff in MHz."""
    if g_eff <= 0:
        raise ValueError("g_eff must be positive")
    return 1e3 / (2.0 * g_eff)


def fit_bare_coupling(device: DeviceModel, pair, kind: GateKind, phi_p: float, harmonic: int,
                      g_eff_target: float) -> float:
    """Bare coupling g (MHz) for which the predicted g_eff equals ``g_eff_target``."""
    unit = predict_gate(device.with_coupling(*pair, 1.0), pair, kind, phi_p, harmonic)
    return g_eff_target / unit.g_eff


def sweep_curves(device: DeviceModel, pair, phi_p_grid, kinds=tuple(GateKind), harmonics=(1, 2),
                 risetime: float = DEFAULT_RISETIME):
    """Rows of (phi_p, kind, n, f_mod, g_eff, tau) across a modulation-amplitude grid.

    Points whose sideband coupling vanishes are reported with ``tau = inf``.
    """
    rows = []
    for phi_p in phi_p_grid:
        for kind in kinds:
            for n in harmonics:
                try:
                    p = predict_gate(device, pair, kind, float(phi_p), n, risetime)
                    tau = p.tau_flat
                    rows.append((float(phi_p), kind.value, n, p.f_mod_flux, p.g_eff, tau, p.delta_omega))
                except ValueError:
                    f = resonant_flux_frequency(device, pair, kind, float(phi_p), n)
                    _, dw = avg_freq_under_modulation(device.qubit(pair_roles(device, pair).tunable),
                                                      device.flux[pair_roles(device, pair).tunable], float(phi_p))
                    rows.append((float(phi_p), kind.value, n, f, 0.0, math.inf, dw))
    return rows
