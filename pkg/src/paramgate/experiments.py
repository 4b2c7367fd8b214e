"""End-to-end synthetic experiments: gate QPT, GHZ QST, spectator crosstalk and error budgets.

Every experiment simulates qutrits. Tomography rotations act on the qubit
subspace, readout maps |2> to the |1> outcome, and the classifier-level
readout errors enter as a column-stochastic confusion matrix that doubles as
the POVM handed to the maximum-likelihood fit.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import polar

from . import __version__
from .device import DeviceModel
from .dynamics import (
    COMPUTATIONAL,
    CZ,
    LEVELS,
    CalibratedGate,
    ModulationDrive,
    correction_unitary,
    CircuitNoise,
    NOISELESS,
    _apply_superop,
    _apply_unitary,
    calibrate_cz,
    calibrated_superoperator,
    calibrated_unitary,
    depolarizing_superop,
    dispersive_phase,
    dressed_frame,
    embed_qubit_unitary,
    gate_noise,
    pair_unitary,
    run_circuit,
    unitary_fidelity,
    _gate_drive,
)
from .readout import model_from_device
from .theory import pair_roles
from .tomography import (
    ROTATIONS,
    ExperimentRecord,
    ProcessPTM,
    TomographySettings,
    avg_gate_fidelity,
    linear_inversion_ptm,
    nearest_unitary,
    pauli_basis,
    project_cptp,
    project_density,
    ptm_of_unitary,
    qpt_mle,
    qst_mle,
    sample_counts,
    state_fidelity,
)

SUMMARY_SCHEMA = "paramgate.summary/1"
CROSSTALK_SPECTATORS = (2, 3, 4, 5, 6, 7)
DRIFT_LINEWIDTH = 2.0  # MHz
DRIFT_EXCURSION = 0.08  # MHz


class ExperimentError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class ReadoutToggles:
    """Which state-preparation and measurement imperfections a run includes."""

    rotation_errors: bool = True
    readout_errors: bool = True


IDEAL_SPAM = ReadoutToggles(False, False)


@dataclass
class ExperimentPlan:
    name: str
    device: DeviceModel
    shots: int
    seed: int
    qubits: tuple = ()
    gate_noise: bool = True
    spam: ReadoutToggles = field(default_factory=ReadoutToggles)
    constraints: str = "cptp"
    out: str | None = None


# -- hashing and output ----------------------------------------------------------------

def calibration_hash(cals) -> str:
    items = sorted((json.dumps(c.to_dict(), sort_keys=True) for c in cals))
    return hashlib.sha256("\n".join(items).encode()).hexdigest()[:16]


def provenance(device: DeviceModel, seed: int, cals=()) -> dict:
    return {
        "schema": SUMMARY_SCHEMA,
        "tool_version": __version__,
        "seed": int(seed),
        "device_hash": device.fingerprint(),
        "calibration_hash": calibration_hash(cals),
    }


def write_run(out: str | Path, name: str, summary: dict, tables: dict | None = None) -> Path:
    """Write ``summary.json`` and ``raw/<table>.csv`` into a fresh run directory.

    Existing runs are never overwritten; a numeric suffix is appended instead.
    """
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    run = root / name
    k = 1
    while run.exists():
        run = root / f"{name}-{k}"
        k += 1
    (run / "raw").mkdir(parents=True)
    (run / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    for tname, (header, rows) in (tables or {}).items():
        with (run / "raw" / f"{tname}.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
    return run


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj)}")


def spawn_rngs(seed: int, n: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


# -- calibrations -------------------------------------------------------------------------

def calibrate_all(device: DeviceModel, pairs=None) -> dict:
    """Closed-system calibration of every stored CZ operating point (or of ``pairs``)."""
    pairs = [tuple(g.pair) for g in device.gates] if pairs is None else [tuple(p) for p in pairs]
    out = {}
    for p in pairs:
        try:
            out[p] = calibrate_cz(device, p)
        except Exception as exc:  # noqa: BLE001 - tag and re-raise
            raise ExperimentError("calibration", f"pair {p}: {exc}") from exc
    return out


def save_calibrations(cals: dict, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cals.values()], indent=2))


def load_calibrations(path) -> dict:
    raw = json.loads(Path(path).read_text())
    cals = [CalibratedGate.from_dict(r) for r in raw]
    return {tuple(c.pair): c for c in cals}


def _find_cal(cals: dict, pair) -> CalibratedGate:
    cal = cals.get(tuple(pair)) or cals.get(tuple(reversed(pair)))
    if cal is None:
        raise ExperimentError("calibration", f"no calibrated gate for pair {tuple(pair)}")
    return cal


# -- qutrit tomography plumbing -------------------------------------------------------------

def _rotation_ops(n_qubits: int, device: DeviceModel, qubits, rotation_errors: bool):
    """Per setting, list of (register position, qutrit unitary, depolarizing superop or None)."""
    ops = []
    for combo in itertools.product(range(4), repeat=n_qubits):
        step = []
        for pos, c in enumerate(combo):
            if c == 0:
                continue
            dep = depolarizing_superop(device.qubit(qubits[pos]).single_qubit_error_p) if rotation_errors else None
            step.append((pos, embed_qubit_unitary(ROTATIONS[c]), dep))
        ops.append(step)
    return ops


def _rotate(rho, step, dims):
    for pos, u, dep in step:
        rho = _apply_unitary(rho, u, [pos], dims)
        if dep is not None:
            rho = _apply_superop(rho, dep, [pos], dims)
    return rho


def _qubit_populations(rho: np.ndarray, n: int) -> np.ndarray:
    """Outcome probabilities of a qutrit register read as qubits (|2> reads as 1)."""
    pops = np.clip(np.real(np.diag(rho)), 0.0, None).reshape([LEVELS] * n)
    for ax in range(n):
        pops = np.moveaxis(pops, ax, 0)
        pops = np.concatenate([pops[:1], pops[1:2] + pops[2:3]], axis=0)
        pops = np.moveaxis(pops, 0, ax)
    return pops.reshape(-1)


def readout_confusion(device: DeviceModel, qubits, readout_errors: bool = True) -> np.ndarray:
    n = len(qubits)
    if not readout_errors:
        return np.eye(2 ** n)
    return model_from_device(device, qubits).confusion()


def _register_superop(device: DeviceModel, cal: CalibratedGate, register, noisy: bool,
                      T2_eff="default") -> np.ndarray:
    """81x81 calibrated gate channel in ``register`` qutrit order."""
    if noisy:
        s = calibrated_superoperator(device, cal, gate_noise(device, cal, T2_eff))
    else:
        u = calibrated_unitary(device, cal)
        s = np.kron(u, u.conj())
    roles = pair_roles(device, cal.pair)
    if tuple(register) == (roles.fixed, roles.tunable):
        return s
    if tuple(register) != (roles.tunable, roles.fixed):
        raise ExperimentError("simulation", f"register {register} does not match gate pair {cal.pair}")
    sw = _swap_qutrits()
    p = np.kron(sw, sw)
    return p @ s @ p.T


def _swap_qutrits() -> np.ndarray:
    sw = np.zeros((LEVELS ** 2, LEVELS ** 2))
    for a in range(LEVELS):
        for b in range(LEVELS):
            sw[b * LEVELS + a, a * LEVELS + b] = 1.0
    return sw


def _register_unitary(device: DeviceModel, cal: CalibratedGate, register) -> np.ndarray:
    """9x9 calibrated gate unitary in ``register`` qutrit order."""
    u = calibrated_unitary(device, cal)
    roles = pair_roles(device, cal.pair)
    if tuple(register) == (roles.fixed, roles.tunable):
        return u
    sw = _swap_qutrits()
    return sw @ u @ sw.T


def ideal_cz_superop() -> np.ndarray:
    u = np.eye(LEVELS ** 2, dtype=complex)
    u[4, 4] = -1.0
    return np.kron(u, u.conj())


def qpt_probabilities(device: DeviceModel, register, channel: np.ndarray, spam: ReadoutToggles,
                      confusion: np.ndarray | None = None) -> np.ndarray:
    """p_jkl for a two-qutrit channel through qutrit pre/post rotations and readout."""
    dims = [LEVELS, LEVELS]
    rots = _rotation_ops(2, device, register, spam.rotation_errors)
    conf = readout_confusion(device, register, spam.readout_errors) if confusion is None else confusion
    rho0 = np.zeros((LEVELS ** 2, LEVELS ** 2), dtype=complex)
    rho0[0, 0] = 1.0
    probs = np.zeros((4, len(rots), len(rots)))
    for l, pre in enumerate(rots):
        rho = _rotate(rho0, pre, dims)
        rho = (channel @ rho.reshape(-1)).reshape(rho.shape)
        for k, post in enumerate(rots):
            probs[:, k, l] = conf @ _qubit_populations(_rotate(rho, post, dims), 2)
    return probs


def _estimate_ptm(probs, settings, shots, rng, constraints):
    """ML estimate from sampled counts, or the exact channel when ``shots`` is None."""
    if shots is None:
        rec = ExperimentRecord("qpt", np.zeros(probs.shape, dtype=int), settings)
        a = settings.measurement_matrix()
        b = settings.preparation_matrix()
        f = probs.reshape(a.shape[0], b.shape[0])
        r = np.linalg.pinv(a) @ f @ np.linalg.pinv(b).T
        return ProcessPTM(project_cptp(r), True, True, {"exact": True}), rec
    counts = sample_counts(probs, shots, rng)
    rec = ExperimentRecord("qpt", counts, settings)
    return qpt_mle(rec, constraints), rec


@dataclass
class QPTResult:
    pair: tuple
    ptm: ProcessPTM
    fidelity: float
    record: ExperimentRecord
    linear_fidelity: float

    def to_dict(self) -> dict:
        return {"pair": list(self.pair), "fidelity": self.fidelity, "linear_inversion_fidelity": self.linear_fidelity,
                "ptm": self.ptm.to_dict()}


def run_gate_qpt(device: DeviceModel, cal: CalibratedGate, shots: int | None = 3000, seed: int = 0,
                 noise: bool = True, spam: ReadoutToggles = ReadoutToggles(), constraints: str = "cptp",
                 T2_eff="default", channel: np.ndarray | None = None, rng=None) -> QPTResult:
    """Simulated process tomography of a calibrated CZ.

    The register is ``cal.pair`` in the listed order. ``channel`` overrides
    the simulated 81x81 gate superoperator (same ordering).
    """
    register = tuple(cal.pair)
    try:
        s = _register_superop(device, cal, register, noise, T2_eff) if channel is None else channel
    except ExperimentError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise ExperimentError("simulation", str(exc)) from exc
    conf = readout_confusion(device, register, spam.readout_errors)
    try:
        probs = qpt_probabilities(device, register, s, spam, conf)
    except Exception as exc:  # noqa: BLE001
        raise ExperimentError("simulation", str(exc)) from exc
    settings = TomographySettings(2, povm=conf, shots_per_setting=shots or 1)
    rng = np.random.default_rng(seed) if rng is None else rng
    try:
        est, rec = _estimate_ptm(probs, settings, shots, rng, constraints)
    except Exception as exc:  # noqa: BLE001
        raise ExperimentError("tomography", str(exc)) from exc
    r_cz = ptm_of_unitary(CZ).R
    lin = est.R if shots is None else linear_inversion_ptm(rec)
    return QPTResult(register, est, avg_gate_fidelity(est, r_cz), rec, avg_gate_fidelity(lin, r_cz))


# -- GHZ -----------------------------------------------------------------------------------

GHZ_REGISTER = (0, 1, 2, 3)


def ghz_circuit(register=GHZ_REGISTER) -> list:
    """Hadamard on the first qubit, then CNOTs down the chain built as Ry(-pi/2) CZ Ry(pi/2)."""
    circ = [("h", register[0])]
    for a, b in zip(register[:-1], register[1:]):
        circ += [("ry", b, -math.pi / 2), ("cz", a, b), ("ry", b, math.pi / 2)]
    return circ


def ghz_target(n: int) -> np.ndarray:
    psi = np.zeros(2 ** n, dtype=complex)
    psi[0] = psi[-1] = 1.0 / math.sqrt(2.0)
    return psi


def qst_probabilities(device: DeviceModel, register, rho: np.ndarray, spam: ReadoutToggles,
                      confusion: np.ndarray | None = None) -> np.ndarray:
    n = len(register)
    dims = [LEVELS] * n
    rots = _rotation_ops(n, device, register, spam.rotation_errors)
    conf = readout_confusion(device, register, spam.readout_errors) if confusion is None else confusion
    probs = np.zeros((2 ** n, len(rots)))
    for k, post in enumerate(rots):
        probs[:, k] = conf @ _qubit_populations(_rotate(rho, post, dims), n)
    return probs


@dataclass
class GHZResult:
    rho: np.ndarray
    fidelity: float
    fidelity_unconstrained: float
    per_gate_geometric_mean: float
    info: dict
    record: ExperimentRecord | None = None

    def to_dict(self) -> dict:
        return {"fidelity": self.fidelity, "fidelity_unconstrained": self.fidelity_unconstrained,
                "implied_per_gate": self.per_gate_geometric_mean, "info": self.info,
                "rho_real": np.real(self.rho).tolist(), "rho_imag": np.imag(self.rho).tolist()}


def run_ghz(device: DeviceModel, cals: dict, shots: int | None = 3000, seed: int = 0, noise: bool = True,
            spam: ReadoutToggles = ReadoutToggles(), register=GHZ_REGISTER) -> GHZResult:
    register = tuple(register)
    circuit = ghz_circuit(register)
    for a, b in zip(register[:-1], register[1:]):
        _find_cal(cals, (a, b))
    cnoise = CircuitNoise() if noise else NOISELESS
    try:
        state = run_circuit(device, circuit, register, cals, cnoise)
    except Exception as exc:  # noqa: BLE001
        raise ExperimentError("simulation", str(exc)) from exc
    n = len(register)
    conf = readout_confusion(device, register, spam.readout_errors)
    probs = qst_probabilities(device, register, state.matrix, spam, conf)
    settings = TomographySettings(n, povm=conf, shots_per_setting=shots or 1)
    psi = ghz_target(n)
    try:
        if shots is None:
            rho = _exact_state(probs, settings)
            rho_free, info, rec = rho, {"exact": True}, None
        else:
            rec = ExperimentRecord("qst", sample_counts(probs, shots, np.random.default_rng(seed)), settings)
            rho, info = qst_mle(rec, constrain_positive=True)
            rho_free, _ = qst_mle(rec, constrain_positive=False)
    except Exception as exc:  # noqa: BLE001
        raise ExperimentError("tomography", str(exc)) from exc
    f = state_fidelity(rho, psi)
    return GHZResult(rho, f, state_fidelity(rho_free, psi), f ** (1.0 / (n - 1)), info, rec)


def _exact_state(probs, settings):
    a = settings.measurement_matrix()
    vec = np.linalg.pinv(a) @ probs.reshape(-1)
    return project_density(pauli_basis(settings.n_qubits).operator(vec))


def geometric_mean(values) -> float:
    values = np.asarray(list(values), dtype=float)
    return float(np.exp(np.mean(np.log(values))))


# -- crosstalk -------------------------------------------------------------------------------

def kick_diagonal(phases) -> np.ndarray:
    """Diagonal of exp(i sum_q phi_q n_q) on a two-qutrit register."""
    n = np.arange(LEVELS)
    return np.exp(1j * (phases[0] * n[:, None] + phases[1] * n[None, :])).reshape(-1)


def crosstalk_channel(device: DeviceModel, cal: CalibratedGate, gate_superop: np.ndarray, bitstring: str,
                      spectators=CROSSTALK_SPECTATORS, rotation_errors: bool = True) -> np.ndarray:
    """Gate channel with dispersive phase kicks from the prepared spectators.

    A spectator prepared by an Rx(pi) with depolarizing strength p is excited
    with probability 1 - p/2; the channel is the matching mixture over the
    excitation patterns of the spectators that have a dispersive shift to the
    gate pair.
    """
    register = tuple(cal.pair)
    tau = cal.drive.duration
    excited = {}
    for q, b in zip(spectators, bitstring):
        if b == "1":
            p = device.qubit(q).single_qubit_error_p if rotation_errors else 0.0
            excited[q] = 1.0 - 0.5 * p
    relevant = [q for q in excited if any(device.chi(g, q) != 0.0 for g in register)]
    out = np.zeros_like(gate_superop)
    for pattern in itertools.product((0, 1), repeat=len(relevant)):
        w = 1.0
        phases = [0.0, 0.0]
        for q, on in zip(relevant, pattern):
            w *= excited[q] if on else 1.0 - excited[q]
            if on:
                for i, g in enumerate(register):
                    phases[i] += dispersive_phase(device.chi(g, q), tau)
        d = kick_diagonal(phases)
        out += w * (np.outer(d, d.conj()).reshape(-1)[:, None] * gate_superop)
    return out


def _crosstalk_task(args):
    device, cal, gate_s, bitstring, shots, rng, constraints = args
    ch = crosstalk_channel(device, cal, gate_s, bitstring)
    res = run_gate_qpt(device, cal, shots, channel=ch, constraints=constraints, rng=rng)
    return bitstring, res.fidelity


@dataclass
class CrosstalkResult:
    fidelities: dict  # bitstring -> fidelity
    control: dict = field(default_factory=dict)
    shot_sigma: float | None = None

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.fidelities.values())))

    @property
    def std(self) -> float:
        return float(np.std(list(self.fidelities.values()), ddof=1))

    def by_excitations(self, which: str = "fidelities") -> dict:
        data = getattr(self, which)
        groups: dict = {}
        for b, f in data.items():
            groups.setdefault(b.count("1"), []).append(f)
        return {k: float(np.mean(v)) for k, v in sorted(groups.items())}

    def split_on(self, position: int, which: str = "fidelities"):
        """Mean fidelity with the spectator at ``position`` excited and not excited."""
        data = getattr(self, which)
        on = [f for b, f in data.items() if b[position] == "1"]
        off = [f for b, f in data.items() if b[position] == "0"]
        return float(np.mean(on)), float(np.mean(off))

    def outliers(self, n: int = 5) -> list:
        return sorted(self.fidelities.items(), key=lambda kv: kv[1])[:n]

    def control_flat(self) -> bool:
        """Null-effect check on the decoupled control runs.

        Flat means the Q3-excited and Q3-ground halves agree to within three
        standard errors and no bitstring sits more than four shot-noise
        standard deviations from the control mean. The control has no true
        effect, so the cuts are set for a small false-alarm rate.
        """
        if not self.control or not self.shot_sigma:
            return False
        vals = np.array(list(self.control.values()))
        pos = CROSSTALK_SPECTATORS.index(3)
        on, off = self.split_on(pos, "control")
        half = len(vals) / 2
        se = self.shot_sigma * math.sqrt(2.0 / half)
        return bool(abs(on - off) < 3 * se and np.max(np.abs(vals - vals.mean())) < 4 * self.shot_sigma)

    def to_dict(self) -> dict:
        out = {"mean": self.mean, "std": self.std, "by_excitations": self.by_excitations(),
               "outliers": self.outliers(), "n_bitstrings": len(self.fidelities)}
        if self.control:
            out["control_mean"] = float(np.mean(list(self.control.values())))
            out["control_std"] = float(np.std(list(self.control.values()), ddof=1))
            out["control_flat"] = self.control_flat()
        if self.shot_sigma is not None:
            out["shot_sigma"] = self.shot_sigma
        return out


def run_crosstalk(device: DeviceModel, cal: CalibratedGate, shots: int = 250, seed: int = 0,
                  control: bool = True, bootstrap: int = 8, constraints: str = "cptp",
                  workers: int = 1) -> CrosstalkResult:
    """QPT of the gate for all 64 spectator bitstrings on Q2..Q7.

    With ``control`` the sweep is repeated with every dispersive shift set to
    zero, and ``bootstrap`` repeated baseline runs estimate the shot-noise
    spread of a single fidelity.
    """
    bitstrings = [format(k, "06b") for k in range(64)]
    gate_s = _register_superop(device, cal, tuple(cal.pair), True)
    rngs = spawn_rngs(seed, 2 * len(bitstrings) + bootstrap)

    def sweep(dev, offset):
        tasks = [(dev, cal, gate_s, b, shots, rngs[offset + i], constraints) for i, b in enumerate(bitstrings)]
        if workers > 1:
            with ProcessPoolExecutor(workers) as pool:
                return dict(pool.map(_crosstalk_task, tasks))
        return dict(map(_crosstalk_task, tasks))

    result = CrosstalkResult(sweep(device, 0))
    if control:
        decoupled = device.with_dispersive_shifts({})
        result.control = sweep(decoupled, len(bitstrings))
    if bootstrap:
        base = [
            run_gate_qpt(device, cal, shots, channel=gate_s, constraints=constraints,
                         rng=rngs[2 * len(bitstrings) + i]).fidelity
            for i in range(bootstrap)
        ]
        result.shot_sigma = float(np.std(base, ddof=1))
    return result


def full_register_check(device: DeviceModel, cal: CalibratedGate, bitstrings, spectators=CROSSTALK_SPECTATORS,
                        ) -> float:
    """Exact noise-free pure-state check of the phase-kick model on the whole register.

    For each spectator bitstring, every computational input of the gate pair
    is evolved on the 3^(2+m) register with the gate unitary and the full
    dispersive phase diagonal. Returns the largest amplitude deviation from
    the two-qubit kick model.
    """
    register = tuple(cal.pair) + tuple(spectators)
    n = len(register)
    u_pair = _register_unitary(device, cal, tuple(cal.pair))
    tau = cal.drive.duration
    worst = 0.0
    levels = np.indices([LEVELS] * n).reshape(n, -1)
    phase = np.zeros(levels.shape[1])
    for (t, s), chi in device.dispersive_shifts.items():
        if t in cal.pair and s in register and s not in cal.pair:
            phase += dispersive_phase(chi, tau) * levels[register.index(t)] * levels[register.index(s)]
    diag = np.exp(1j * phase)
    for bits in bitstrings:
        spec = [int(c) for c in bits]
        phases = [sum(dispersive_phase(device.chi(g, q), tau) for q, b in zip(spectators, spec) if b)
                  for g in cal.pair]
        model = kick_diagonal(phases)[:, None] * u_pair
        for c in COMPUTATIONAL:
            psi = np.zeros([LEVELS] * n, dtype=complex)
            psi[(c // LEVELS, c % LEVELS) + tuple(spec)] = 1.0
            psi = np.tensordot(u_pair.reshape(LEVELS, LEVELS, LEVELS, LEVELS), psi, axes=([2, 3], [0, 1]))
            psi = diag * psi.reshape(-1)
            out = psi.reshape(LEVELS ** 2, -1)[:, int(np.ravel_multi_index(spec, [LEVELS] * len(spec)))]
            worst = max(worst, float(np.max(np.abs(out - model[:, c]))))
    return worst


# -- error budget ------------------------------------------------------------------------------

BUDGET_CHANNELS = ("decoherence", "spam", "tomography_rotations", "leakage", "residual_zz",
                   "spurious_sidebands", "drift")


@dataclass
class ErrorBudget:
    entries: dict
    total_infidelity: float | None = None
    notes: dict = field(default_factory=dict)

    def __post_init__(self):
        for k, v in self.entries.items():
            if v < 0:
                raise ValueError(f"negative budget entry {k}={v}")

    @property
    def sum(self) -> float:
        return float(sum(self.entries.values()))

    def to_dict(self) -> dict:
        return {"entries": self.entries, "sum": self.sum, "total_infidelity": self.total_infidelity,
                "notes": self.notes}


def drift_sensitivity(linewidth_mhz: float, rate_mhz_per_hour: float, minutes: float) -> float:
    """Linear fidelity loss (1/linewidth) * (d omega/dt) * dt."""
    if linewidth_mhz <= 0:
        raise ValueError("linewidth must be positive")
    return rate_mhz_per_hour * (minutes / 60.0) / linewidth_mhz


def drift_from_excursion(linewidth_mhz: float, excursion_mhz: float) -> float:
    if linewidth_mhz <= 0:
        raise ValueError("linewidth must be positive")
    return excursion_mhz / linewidth_mhz


def detuned_gate_infidelity(device: DeviceModel, cal: CalibratedGate, detuning_mhz: float) -> float:
    """Closed-system CZ infidelity when the resonance is missed by ``detuning_mhz``.

    A shift of the time-averaged tunable frequency by delta is equivalent to
    moving the n-th harmonic of the qubit modulation by delta, i.e. the flux
    drive by delta / (2 n). Z corrections stay at their calibrated values.
    """
    d = cal.drive
    drive = ModulationDrive(d.phi_p, d.f_flux + detuning_mhz / (2.0 * cal.harmonic), d.duration, d.theta_m, d.risetime)
    u = pair_unitary(cal.device_for(device), cal.pair, drive)
    u = correction_unitary(cal.rz_correction_fixed, cal.rz_correction) @ u
    return max(1.0 - unitary_fidelity(u[np.ix_(COMPUTATIONAL, COMPUTATIONAL)], CZ), 0.0)


def static_zz(device: DeviceModel, pair) -> float:
    """Idle ZZ rate E11 - E10 - E01 + E00 of the dressed pair (MHz)."""
    _, e = dressed_frame(device, pair)
    return float(e[4] - e[3] - e[1] + e[0])


def controlled_phase_infidelity(phi: float) -> float:
    u = np.diag([1, 1, 1, np.exp(1j * phi)])
    return 1.0 - unitary_fidelity(u, np.eye(4))


def gate_leakage(u9: np.ndarray) -> float:
    """Mean population leaving the computational subspace for computational inputs."""
    block = u9[np.ix_(COMPUTATIONAL, COMPUTATIONAL)]
    return float(max(1.0 - np.real(np.trace(block.conj().T @ block)) / 4.0, 0.0))


def leakage_vs_overrotation(device: DeviceModel, cal: CalibratedGate, extra_periods) -> np.ndarray:
    """Residual non-computational population from |11> as the flat top is lengthened.

    The flat top grows by whole flux-modulation periods, so the ramp-down
    starts at the calibrated modulation phase and only the exchange angle is
    miscalibrated. (Fractional extensions also move the phase of the
    |11>-|02> crossing the ramps sweep through, which makes leakage ripple on
    a nanosecond scale.)
    """
    dev = cal.device_for(device)
    period = 1e3 / cal.drive.f_flux
    out = []
    for k in extra_periods:
        drive = _gate_drive(cal.drive.f_flux, cal.drive.flat + k * period, cal.drive.phi_p, cal.drive.risetime)
        u = pair_unitary(dev, cal.pair, drive)
        out.append(1.0 - float(np.sum(np.abs(u[COMPUTATIONAL, 4]) ** 2)))
    return np.array(out)


def error_budget(device: DeviceModel, cal: CalibratedGate, shots: int | None = None, seed: int = 0,
                 ideal: bool = False, readout_cal_shots: int = 2000, linewidth: float = DRIFT_LINEWIDTH,
                 excursion: float = DRIFT_EXCURSION) -> ErrorBudget:
    """Bounds on each infidelity channel from targeted simulations.

    ``shots=None`` evaluates tomography entries with exact outcome
    probabilities. ``ideal`` replaces the simulated gate with a perfect CZ
    and switches off SPAM errors and drift; only the structural idle ZZ
    remains.
    """
    rngs = spawn_rngs(seed, 4)
    register = tuple(cal.pair)
    notes = {}
    exact_cz = ideal_cz_superop()
    entries = {}
    spam = IDEAL_SPAM if ideal else ReadoutToggles()

    # decoherence: gate noise only, perfect SPAM; decoherent part of the nearest-unitary split
    noisy = exact_cz if ideal else _register_superop(device, cal, register, True)
    qpt = run_gate_qpt(device, cal, shots, channel=noisy, spam=IDEAL_SPAM, rng=rngs[0])
    _, coherent, decoherent = nearest_unitary(qpt.ptm, CZ)
    entries["decoherence"] = max(decoherent, 0.0)
    notes["coherent_infidelity"] = coherent
    notes["gate_only_fidelity"] = qpt.fidelity

    # SPAM: perfect gate and rotations; readout calibrated from finite shots
    if spam.readout_errors:
        conf_true = readout_confusion(device, register, True)
        cols = [rngs[1].multinomial(readout_cal_shots, conf_true[:, k]) / readout_cal_shots
                for k in range(conf_true.shape[1])]
        conf_est = np.array(cols).T
        probs = qpt_probabilities(device, register, exact_cz, ReadoutToggles(False, True), conf_true)
        settings = TomographySettings(2, povm=conf_est, shots_per_setting=shots or 1)
        est, _ = _estimate_ptm(probs, settings, shots, rngs[2], "cptp")
        entries["spam"] = max(1.0 - avg_gate_fidelity(est, ptm_of_unitary(CZ)), 0.0)
    else:
        entries["spam"] = 0.0

    # tomography rotations: perfect gate and readout, depolarizing rotations
    rot = ReadoutToggles(spam.rotation_errors, False)
    entries["tomography_rotations"] = max(
        1.0 - run_gate_qpt(device, cal, shots, channel=exact_cz, spam=rot, rng=rngs[3]).fidelity, 0.0)

    if ideal:
        entries["leakage"] = 0.0
        entries["spurious_sidebands"] = 0.0
    else:
        u = calibrated_unitary(device, cal)
        entries["leakage"] = gate_leakage(u)
        block = u[np.ix_(COMPUTATIONAL, COMPUTATIONAL)]
        unit, _ = polar(block)
        entries["spurious_sidebands"] = max(1.0 - unitary_fidelity(unit, CZ), 0.0)

    zz = static_zz(cal.device_for(device), cal.pair)
    entries["residual_zz"] = controlled_phase_infidelity(2.0 * math.pi * zz * cal.drive.duration * 1e-3)
    notes["static_zz_mhz"] = zz

    entries["drift"] = 0.0 if ideal else drift_from_excursion(linewidth, excursion)
    total = None
    if not ideal:
        total = 1.0 - run_gate_qpt(device, cal, shots, rng=rngs[0]).fidelity
    return ErrorBudget(entries, total, notes)

