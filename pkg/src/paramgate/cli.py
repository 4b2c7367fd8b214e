"""Command-line interface: ``paramgate <command> ...``.

Prediction and simulation commands print JSON or CSV to stdout (or ``--out``
files). Experiment commands (qpt-gate, ghz, crosstalk, budget, drift) write
one append-only run directory holding ``summary.json`` and ``raw/*.csv`` and
exit with status 2 when any stage fails.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import __version__
from .device import DeviceConfigError, load_device
from .dynamics import (
    CalibratedGate,
    CircuitNoise,
    NOISELESS,
    CZ,
    calibrate_cz,
    chevron_scan,
    run_circuit,
)
from .experiments import (
    CROSSTALK_SPECTATORS,
    DRIFT_EXCURSION,
    DRIFT_LINEWIDTH,
    GHZ_REGISTER,
    IDEAL_SPAM,
    ExperimentError,
    ReadoutToggles,
    calibrate_all,
    detuned_gate_infidelity,
    drift_from_excursion,
    drift_sensitivity,
    error_budget,
    full_register_check,
    ghz_target,
    load_calibrations,
    provenance,
    run_crosstalk,
    run_gate_qpt,
    run_ghz,
    save_calibrations,
    write_run,
)
from .readout import (
    evaluate_classifier,
    load_classifier,
    model_from_device,
    read_shots_csv,
    sample_dataset,
    save_classifier,
    train_classifier,
    write_shots_csv,
)
from .theory import GateKind, predict_gate, resonant_flux_frequency, sweep_curves
from .tomography import (
    ExperimentRecord,
    TomographyError,
    avg_gate_fidelity,
    ptm_of_unitary,
    qpt_mle,
    qst_mle,
    state_fidelity,
)

log = logging.getLogger("paramgate")

STATE_LABELS = {GateKind.CZ02: ("p11", "p02"), GateKind.CZ20: ("p11", "p20"), GateKind.ISWAP: ("p10", "p01")}


# -- argument helpers ---------------------------------------------------------------------

def parse_qubits(text: str) -> tuple:
    """``"Q0,Q1"`` or ``"0,1"`` -> (0, 1)."""
    try:
        return tuple(int(tok.strip().upper().lstrip("Q")) for tok in text.split(",") if tok.strip())
    except ValueError as exc:
        raise click.BadParameter(f"cannot parse qubit list '{text}'") from exc


def parse_pair(text: str) -> tuple:
    q = parse_qubits(text)
    if len(q) != 2 or q[0] == q[1]:
        raise click.BadParameter(f"expected two distinct qubits, got '{text}'")
    return q


def parse_circuit(text: str) -> list:
    """``"h 0; ry 1 -1.5708; cz 0 1"`` -> [("h", 0), ("ry", 1, -1.5708), ("cz", 0, 1)]."""
    ops = []
    for chunk in text.split(";"):
        tok = chunk.replace(",", " ").split()
        if not tok:
            continue
        name = tok[0].lower()
        try:
            if name == "cz":
                ops.append(("cz", int(tok[1].upper().lstrip("Q")), int(tok[2].upper().lstrip("Q"))))
            else:
                op = (name, int(tok[1].upper().lstrip("Q")))
                ops.append(op + ((float(tok[2]),) if len(tok) > 2 else ()))
        except (IndexError, ValueError) as exc:
            raise click.BadParameter(f"cannot parse circuit step '{chunk.strip()}'") from exc
    if not ops:
        raise click.BadParameter("empty circuit")
    return ops


def _load_device(path):
    try:
        return load_device(path)
    except (DeviceConfigError, OSError) as exc:
        raise click.ClickException(f"device config: {exc}") from exc


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        click.echo(text, nl=not text.endswith("\n"))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _calibrations(device, path, pairs):
    """Calibrations from ``path`` when given, else calibrate ``pairs`` now."""
    if path:
        cals = load_calibrations(path)
        missing = [p for p in pairs if p not in cals and tuple(reversed(p)) not in cals]
        if missing:
            raise ExperimentError("calibration", f"{path} has no gate for {missing}")
        return cals
    log.info("calibrating %s", pairs)
    return calibrate_all(device, pairs)


def _cal_for(cals, pair) -> CalibratedGate:
    return cals.get(tuple(pair)) or cals[tuple(reversed(pair))]


def experiment_options(shots_default):
    def wrap(fn):
        fn = click.option("--out", type=click.Path(file_okay=False), default="runs", show_default=True,
                          help="Directory receiving the run subdirectory.")(fn)
        fn = click.option("--shots", type=int, default=shots_default, show_default=True,
                          help="Shots per tomography setting.")(fn)
        fn = click.option("--seed", type=int, default=0, show_default=True)(fn)
        fn = click.option("--device", "device_path", type=click.Path(dir_okay=False), default=None,
                          help="Device YAML; the bundled 8-qubit config when omitted.")(fn)
        return fn
    return wrap


def _run_stage(fn):
    """Turn experiment failures into a message and exit status 2."""
    try:
        return fn()
    except ExperimentError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except (ValueError, RuntimeError, KeyError, OSError, TomographyError) as exc:
        click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
        sys.exit(2)


def _finish(run_dir: Path, summary: dict) -> None:
    click.echo(str(run_dir))
    for key in ("fidelity", "mean", "sum", "linear_estimate"):
        if key in summary.get("result", {}):
            click.echo(f"{key}={summary['result'][key]:.6f}")


# -- root group ---------------------------------------------------------------------------------

@click.group()
@click.version_option(__version__, prog_name="paramgate")
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Parametric-gate modelling, readout classification and tomography tools."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


# -- theory ---------------------------------------------------------------------------------------

@main.command()
@click.option("--device", "device_path", type=click.Path(dir_okay=False), default=None)
@click.option("--pair", required=True, help="Coupled pair, e.g. Q0,Q1.")
@click.option("--kind", type=click.Choice([k.value for k in GateKind]), default="cz02", show_default=True)
@click.option("--phi-p", type=float, required=True, help="Flux modulation amplitude in units of Phi0.")
@click.option("--harmonic", type=int, default=1, show_default=True)
@click.option("--risetime", type=float, default=40.0, show_default=True, help="Ramp length in ns.")
def predict(device_path, pair, kind, phi_p, harmonic, risetime):
    """Predict modulation frequency, coupling and duration of one gate."""
    device = _load_device(device_path)
    try:
        pred = predict_gate(device, parse_pair(pair), kind, phi_p, harmonic, risetime)
    except (ValueError, RuntimeError, KeyError) as exc:
        raise click.ClickException(str(exc)) from exc
    click.echo(json.dumps(pred.to_dict(), indent=2))


@main.command()
@click.option("--device", "device_path", type=click.Path(dir_okay=False), default=None)
@click.option("--pair", default="Q0,Q1", show_default=True)
@click.option("--phi-min", type=float, default=0.05, show_default=True)
@click.option("--phi-max", type=float, default=0.35, show_default=True)
@click.option("--points", type=int, default=31, show_default=True)
@click.option("--kind", "kinds", type=click.Choice([k.value for k in GateKind]), multiple=True,
              help="Repeat to select transitions; all when omitted.")
@click.option("--harmonic", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def curves(device_path, pair, phi_min, phi_max, points, kinds, harmonic, out):
    """Sweep phi_p and emit CSV (phi_p, kind, f_mod, g_eff, tau)."""
    device = _load_device(device_path)
    if points < 1 or not 0 <= phi_min <= phi_max < 0.5:
        raise click.BadParameter("need 0 <= phi-min <= phi-max < 0.5 and points >= 1")
    kinds = tuple(GateKind(k) for k in kinds) or tuple(GateKind)
    try:
        rows = sweep_curves(device, parse_pair(pair), np.linspace(phi_min, phi_max, points), kinds, (harmonic,))
    except (ValueError, RuntimeError, KeyError) as exc:
        raise click.ClickException(str(exc)) from exc
    body = [(r[0], r[1], r[3], r[4], r[5]) for r in rows]
    _emit(_csv_text(["phi_p", "kind", "f_mod", "g_eff", "tau"], body), out)


# -- dynamics -----------------------------------------------------------------------------------

@main.command()
@click.option("--device", "device_path", type=click.Path(dir_okay=False), default=None)
@click.option("--pair", default="Q0,Q1", show_default=True)
@click.option("--kind", type=click.Choice([k.value for k in GateKind]), default=None,
              help="Defaults to the stored operating point.")
@click.option("--phi-p", type=float, default=None, help="Defaults to the stored operating point.")
@click.option("--harmonic", type=int, default=None)
@click.option("--span", type=float, default=10.0, show_default=True, help="Flux-frequency half-span in MHz.")
@click.option("--f-points", type=int, default=41, show_default=True)
@click.option("--max-duration", type=float, default=600.0, show_default=True, help="Longest flat top in ns.")
@click.option("--duration-points", type=int, default=61, show_default=True)
@click.option("--risetime", type=float, default=0.0, show_default=True,
              help="Ramp length in ns; 0 gives square pulses.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def chevron(device_path, pair, kind, phi_p, harmonic, span, f_points, max_duration, duration_points,
            risetime, out):
    """Population-exchange chevron versus flux frequency and pulse length (CSV)."""
    device = _load_device(device_path)
    pair = parse_pair(pair)
    try:
        op = device.operating_point(*pair)
    except KeyError:
        op = None
    if op is None and (kind is None or phi_p is None):
        raise click.BadParameter("pair has no stored operating point; pass --kind and --phi-p")
    kind = GateKind(kind or op.kind)
    phi_p = op.phi_p if phi_p is None else phi_p
    harmonic = (op.harmonic if op else 1) if harmonic is None else harmonic
    try:
        f0 = resonant_flux_frequency(device, pair, kind, phi_p, harmonic)
        f_vals = np.linspace(f0 - span, f0 + span, f_points)
        durs = np.linspace(0.0, max_duration, duration_points)
        p_start, p_partner = chevron_scan(device, pair, f_vals, durs, phi_p, kind, risetime)
    except (ValueError, RuntimeError, KeyError) as exc:
        raise click.ClickException(str(exc)) from exc
    a, b = STATE_LABELS[kind]
    rows = [(f_vals[i], durs[j], p_start[i, j], p_partner[i, j])
            for i in range(f_vals.size) for j in range(durs.size)]
    _emit(_csv_text(["f_flux", "duration", a, b], rows), out)


@main.command()
@click.option("--device", "device_path", type=click.Path(dir_okay=False), default=None)
@click.option("--pair", "pairs", multiple=True, help="Repeat per pair; all stored operating points when omitted.")
@click.option("--phi-p", type=float, default=None)
@click.option("--kind", type=click.Choice([k.value for k in GateKind if k.is_cz]), default=None)
@click.option("--harmonic", type=int, default=None)
@click.option("--target-g-eff", type=float, default=None,
              help="Rescale the bare coupling so the effective coupling (MHz) matches.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="JSON file; stdout when omitted.")
def calibrate(device_path, pairs, phi_p, kind, harmonic, target_g_eff, out):
    """Calibrate CZ gates and emit a list of CalibratedGate records (JSON)."""
    device = _load_device(device_path)
    pairs = [parse_pair(p) for p in pairs] or [tuple(g.pair) for g in device.gates]
    cals = {}
    for p in pairs:
        try:
            cals[p] = calibrate_cz(device, p, phi_p, kind, harmonic, target_g_eff=target_g_eff)
        except (ValueError, RuntimeError, KeyError) as exc:
            raise click.ClickException(f"pair {p}: {exc}") from exc
        log.info("Q%d-Q%d: F=%.6f", *p, cals[p].achieved_unitary_fidelity)
    if out:
        save_calibrations(cals, out)
    else:
        click.echo(json.dumps([c.to_dict() for c in cals.values()], indent=2))


@main.command()
@click.option("--device", "device_path", type=click.Path(dir_okay=False), default=None)
@click.option("--circuit", required=True, help='Steps separated by ";", e.g. "h 0; ry 1 -1.5708; cz 0 1".')
@click.option("--register", default=None, help="Qubit order of the register; inferred from the circuit if omitted.")
@click.option("--calibration", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--noise/--no-noise", default=True, show_default=True)
@click.option("--idle", is_flag=True, help="Also decohere qubits that wait during two-qubit gates.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def run(device_path, circuit, register, calibration, noise, idle, out):
    """Simulate a circuit and emit the final qubit-subspace populations and density matrix (JSON)."""
    device = _load_device(device_path)
    steps = parse_circuit(circuit)
    if register:
        reg = parse_qubits(register)
    else:
        reg = tuple(sorted({q for op in steps for q in ((op[1], op[2]) if op[0] == "cz" else (op[1],))}))
    cz_pairs = sorted({(op[1], op[2]) for op in steps if op[0] == "cz"})
    try:
        cals = _calibrations(device, calibration, cz_pairs) if cz_pairs else {}
        cnoise = CircuitNoise(idle=idle) if noise else NOISELESS
        state = run_circuit(device, steps, reg, cals, cnoise)
    except (ExperimentError, ValueError, RuntimeError, KeyError) as exc:
        raise click.ClickException(str(exc)) from exc
    n = len(reg)
    pops = state.populations().reshape([3] * n)
    qubit_pops = pops[(slice(0, 2),) * n].reshape(-1)
    result = {
        "register": list(reg),
        "circuit": [list(op) for op in steps],
        "qubit_populations": {format(k, f"0{n}b"): float(v) for k, v in enumerate(qubit_pops)},
        "leakage": float(1.0 - qubit_pops.sum()),
        "rho_real": np.real(state.matrix).tolist(),
        "rho_imag": np.imag(state.matrix).tolist(),
    }
    _emit(json.dumps(result, indent=2), out)


# -- readout ------------------------------------------------------------------------------------

def _shots_for(device_path, qubits, shots_file, shots, seed):
    if shots_file:
        return read_shots_csv(shots_file)
    device = _load_device(device_path)
    return sample_dataset(model_from_device(device, parse_qubits(qubits)), shots, seed)


@main.command("readout-train")
@click.option("--device", "device_path", type=click.Path(dir_okay=False), default=None)
@click.option("--qubits", default="0,1,2,3", show_default=True)
@click.option("--shots-file", type=click.Path(dir_okay=False, exists=True), default=None,
              help="Shot CSV; synthetic shots are generated when omitted.")
@click.option("--shots", type=int, default=2000, show_default=True, help="Synthetic shots per prepared state.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for synthetic shots.")
@click.option("--save-shots", type=click.Path(dir_okay=False), default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True, help="Classifier JSON.")
def readout_train(device_path, qubits, shots_file, shots, seed, save_shots, out):
    """Fit the standardized-PCA logistic classifier and save it as JSON."""
    table = _shots_for(device_path, qubits, shots_file, shots, seed)
    if save_shots:
        write_shots_csv(table, save_shots)
    try:
        clf = train_classifier(table, qubits=parse_qubits(qubits))
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    save_classifier(clf, out)
    click.echo(json.dumps({"penalties": clf.penalties.tolist(), "thresholds": clf.thresholds.tolist(),
                           "gradient_norms": clf.gradient_norms.tolist()}, indent=2))


@main.command("readout-eval")
@click.option("--classifier", type=click.Path(dir_okay=False, exists=True), required=True)
@click.option("--device", "device_path", type=click.Path(dir_okay=False), default=None)
@click.option("--shots-file", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--shots", type=int, default=1000, show_default=True, help="Synthetic shots per prepared state.")
@click.option("--seed", type=int, default=1, show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def readout_eval(classifier, device_path, shots_file, shots, seed, out):
    """Per-qubit metrics and the joint confusion matrix of a saved classifier (JSON)."""
    clf = load_classifier(classifier)
    qubits = ",".join(str(q) for q in clf.qubits) or ",".join(str(i) for i in range(clf.n_qubits))
    table = _shots_for(device_path, qubits, shots_file, shots, seed)
    try:
        metrics, conf = evaluate_classifier(clf, table)
    except ValueError as exc:
        raise click.ClickException(str(exc)) from exc
    result = {"qubits": list(clf.qubits), "metrics": [m.to_dict() for m in metrics],
              "joint_assignment_fidelity": conf.assignment_fidelity(), "confusion": conf.P.tolist()}
    _emit(json.dumps(result, indent=2), out)


# -- tomography on records ----------------------------------------------------------------------

def _read_record(path, kind):
    try:
        rec = ExperimentRecord.from_json(Path(path).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise click.ClickException(f"{path}: {exc}") from exc
    if rec.kind != kind:
        raise click.ClickException(f"{path} holds a {rec.kind} record, expected {kind}")
    return rec


@main.command()
@click.argument("record", type=click.Path(dir_okay=False, exists=True))
@click.option("--constraints", type=click.Choice(["none", "tp", "cptp"]), default="cptp", show_default=True)
@click.option("--target", type=click.Choice(["cz", "identity"]), default="cz", show_default=True)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="PTM JSON; stdout when omitted.")
def qpt(record, constraints, target, out):
    """Maximum-likelihood process tomography of a two-qubit record."""
    rec = _read_record(record, "qpt")
    try:
        est = qpt_mle(rec, constraints)
    except (TomographyError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    d = 2 ** rec.settings.n_qubits
    u = CZ if target == "cz" and d == 4 else np.eye(d)
    f = avg_gate_fidelity(est, ptm_of_unitary(u))
    _emit(json.dumps(est.to_dict(), indent=2), out)
    click.echo(f"qpt constraints={constraints} target={target} fidelity={f:.6f} "
               f"loglik={est.info['log_likelihood']:.6f}")


@main.command()
@click.argument("record", type=click.Path(dir_okay=False, exists=True))
@click.option("--constraints", type=click.Choice(["none", "cptp"]), default="cptp", show_default=True,
              help="cptp keeps the state positive; none only fixes the trace.")
@click.option("--out", type=click.Path(dir_okay=False), default=None)
def qst(record, constraints, out):
    """Maximum-likelihood state tomography, reported against the GHZ state."""
    rec = _read_record(record, "qst")
    try:
        rho, info = qst_mle(rec, constrain_positive=constraints == "cptp")
    except (TomographyError, ValueError) as exc:
        raise click.ClickException(str(exc)) from exc
    f = state_fidelity(rho, ghz_target(rec.settings.n_qubits))
    _emit(json.dumps({"rho_real": np.real(rho).tolist(), "rho_imag": np.imag(rho).tolist(), "info": info},
                     indent=2, default=float), out)
    click.echo(f"qst constraints={constraints} target=ghz fidelity={f:.6f}")


# -- experiments ------------------------------------------------------------------------------

def _counts_table(rec: ExperimentRecord):
    c = rec.counts
    if c.ndim == 2:
        return ["outcome", "post", "count"], [(j, k, int(c[j, k])) for j in range(c.shape[0]) for k in range(c.shape[1])]
    return ["outcome", "post", "prep", "count"], [
        (j, k, l, int(c[j, k, l])) for j in range(c.shape[0]) for k in range(c.shape[1]) for l in range(c.shape[2])]


def _matrix_table(m: np.ndarray):
    return ["row", "col", "value"], [(i, j, repr(float(m[i, j]))) for i in range(m.shape[0]) for j in range(m.shape[1])]


@main.command("qpt-gate")
@experiment_options(3000)
@click.option("--pair", default="Q0,Q1", show_default=True)
@click.option("--calibration", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--constraints", type=click.Choice(["none", "tp", "cptp"]), default="cptp", show_default=True)
@click.option("--t2-eff", type=float, default=None, help="Override T2 under modulation (us).")
@click.option("--noise/--no-noise", default=True, show_default=True)
@click.option("--ideal-spam", is_flag=True, help="Perfect tomography rotations and readout.")
def qpt_gate(device_path, seed, shots, out, pair, calibration, constraints, t2_eff, noise, ideal_spam):
    """Simulated process tomography of one calibrated CZ."""
    device = _load_device(device_path)
    pair = parse_pair(pair)
    cals = _run_stage(lambda: _calibrations(device, calibration, [pair]))
    cal = _cal_for(cals, pair)
    t0 = time.perf_counter()
    res = _run_stage(lambda: run_gate_qpt(device, cal, shots, seed, noise, IDEAL_SPAM if ideal_spam else ReadoutToggles(),
                                          constraints, "default" if t2_eff is None else t2_eff))
    summary = provenance(device, seed, [cal])
    summary["experiment"] = "qpt-gate"
    summary["parameters"] = {"pair": list(pair), "shots": shots, "constraints": constraints, "noise": noise,
                             "ideal_spam": ideal_spam, "t2_eff": t2_eff}
    summary["result"] = {"fidelity": res.fidelity, "linear_inversion_fidelity": res.linear_fidelity,
                         "optimizer": res.ptm.info, "runtime_s": time.perf_counter() - t0}
    run_dir = write_run(out, f"qpt-gate-Q{pair[0]}Q{pair[1]}", summary,
                        {"ptm": _matrix_table(res.ptm.R), "counts": _counts_table(res.record)})
    (run_dir / "raw" / "record.json").write_text(res.record.to_json())
    _finish(run_dir, summary)


@main.command()
@experiment_options(3000)
@click.option("--register", default=",".join(str(q) for q in GHZ_REGISTER), show_default=True)
@click.option("--calibration", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--noise/--no-noise", default=True, show_default=True)
def ghz(device_path, seed, shots, out, register, calibration, noise):
    """Prepare a GHZ state along the register chain and reconstruct it by state tomography."""
    device = _load_device(device_path)
    reg = parse_qubits(register)
    if len(reg) < 2:
        raise click.BadParameter("register needs at least two qubits")
    pairs = list(zip(reg[:-1], reg[1:]))
    cals = _run_stage(lambda: _calibrations(device, calibration, pairs))
    used = [_cal_for(cals, p) for p in pairs]
    res = _run_stage(lambda: run_ghz(device, cals, shots, seed, noise, register=reg))
    summary = provenance(device, seed, used)
    summary["experiment"] = "ghz"
    summary["parameters"] = {"register": list(reg), "shots": shots, "noise": noise}
    summary["result"] = {"fidelity": res.fidelity, "fidelity_unconstrained": res.fidelity_unconstrained,
                         "implied_per_gate": res.per_gate_geometric_mean, "optimizer": res.info}
    tables = {"rho_real": _matrix_table(np.real(res.rho)), "rho_imag": _matrix_table(np.imag(res.rho))}
    if res.record is not None:
        tables["counts"] = _counts_table(res.record)
    run_dir = write_run(out, "ghz", summary, tables)
    if res.record is not None:
        (run_dir / "raw" / "record.json").write_text(res.record.to_json())
    _finish(run_dir, summary)


@main.command()
@experiment_options(250)
@click.option("--pair", default="Q0,Q1", show_default=True)
@click.option("--calibration", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--control/--no-control", default=True, show_default=True,
              help="Repeat the sweep with all dispersive shifts zeroed.")
@click.option("--bootstrap", type=int, default=8, show_default=True,
              help="Repeated baseline runs that estimate the shot-noise spread.")
@click.option("--workers", type=int, default=1, show_default=True)
@click.option("--full-register", is_flag=True,
              help="Also verify the phase-kick model by exact pure-state evolution of the whole register.")
@click.option("--full-register-bitstrings", default="000000,010000,111111", show_default=True)
def crosstalk(device_path, seed, shots, out, pair, calibration, control, bootstrap, workers, full_register,
              full_register_bitstrings):
    """Gate QPT for all 64 spectator bitstrings on Q2..Q7."""
    device = _load_device(device_path)
    pair = parse_pair(pair)
    cals = _run_stage(lambda: _calibrations(device, calibration, [pair]))
    cal = _cal_for(cals, pair)
    res = _run_stage(lambda: run_crosstalk(device, cal, shots, seed, control, bootstrap, workers=workers))
    summary = provenance(device, seed, [cal])
    summary["experiment"] = "crosstalk"
    summary["parameters"] = {"pair": list(pair), "shots": shots, "control": control, "bootstrap": bootstrap,
                             "spectators": list(CROSSTALK_SPECTATORS)}
    summary["result"] = res.to_dict()
    if full_register:
        bits = [b.strip() for b in full_register_bitstrings.split(",") if b.strip()]
        if any(len(b) != len(CROSSTALK_SPECTATORS) or set(b) - {"0", "1"} for b in bits):
            raise click.BadParameter("full-register bitstrings must be six characters of 0/1")
        summary["result"]["full_register_max_deviation"] = _run_stage(
            lambda: full_register_check(device, cal, bits))
        summary["result"]["full_register_bitstrings"] = bits
    header = ["bitstring", "excitations", "fidelity"] + (["control_fidelity"] if res.control else [])
    rows = []
    for b, f in res.fidelities.items():
        row = [b, b.count("1"), repr(f)]
        if res.control:
            row.append(repr(res.control[b]))
        rows.append(row)
    run_dir = write_run(out, f"crosstalk-Q{pair[0]}Q{pair[1]}", summary, {"bitstrings": (header, rows)})
    _finish(run_dir, summary)


@main.command()
@experiment_options(3000)
@click.option("--pair", default="Q0,Q1", show_default=True)
@click.option("--calibration", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--exact", is_flag=True, help="Use exact outcome probabilities instead of sampled shots.")
@click.option("--ideal", is_flag=True, help="Budget of a perfect CZ with SPAM errors and drift off.")
@click.option("--linewidth", type=float, default=DRIFT_LINEWIDTH, show_default=True, help="Chevron linewidth (MHz).")
@click.option("--excursion", type=float, default=DRIFT_EXCURSION, show_default=True,
              help="Worst-case frequency excursion (MHz).")
def budget(device_path, seed, shots, out, pair, calibration, exact, ideal, linewidth, excursion):
    """Per-channel infidelity budget of one calibrated CZ."""
    device = _load_device(device_path)
    pair = parse_pair(pair)
    cals = _run_stage(lambda: _calibrations(device, calibration, [pair]))
    cal = _cal_for(cals, pair)
    b = _run_stage(lambda: error_budget(device, cal, None if exact else shots, seed, ideal,
                                        linewidth=linewidth, excursion=excursion))
    summary = provenance(device, seed, [cal])
    summary["experiment"] = "budget"
    summary["parameters"] = {"pair": list(pair), "shots": None if exact else shots, "ideal": ideal,
                             "linewidth_mhz": linewidth, "excursion_mhz": excursion}
    summary["result"] = b.to_dict()
    rows = [(k, repr(float(v))) for k, v in b.entries.items()]
    run_dir = write_run(out, f"budget-Q{pair[0]}Q{pair[1]}", summary, {"budget": (["channel", "infidelity"], rows)})
    _finish(run_dir, summary)


@main.command()
@experiment_options(0)
@click.option("--pair", default="Q0,Q1", show_default=True)
@click.option("--calibration", type=click.Path(dir_okay=False, exists=True), default=None)
@click.option("--linewidth", type=float, default=DRIFT_LINEWIDTH, show_default=True, help="Chevron linewidth (MHz).")
@click.option("--rate", type=float, default=1.0, show_default=True, help="Frequency drift rate (MHz/hour).")
@click.option("--minutes", type=float, default=5.0, show_default=True, help="Time since calibration.")
@click.option("--simulate/--no-simulate", default=True, show_default=True,
              help="Also simulate the closed-system gate with the drifted resonance.")
def drift(device_path, seed, shots, out, pair, calibration, linewidth, rate, minutes, simulate):
    """Linear drift-sensitivity estimate, optionally checked against a detuned-gate simulation.

    ``--shots`` is recorded for uniformity; the estimate uses no sampling.
    """
    device = _load_device(device_path)
    pair = parse_pair(pair)
    linear = _run_stage(lambda: drift_sensitivity(linewidth, rate, minutes))
    shift = rate * minutes / 60.0
    result = {"linear_estimate": linear, "frequency_shift_mhz": shift,
              "excursion_estimate": _run_stage(lambda: drift_from_excursion(linewidth, DRIFT_EXCURSION))}
    used = []
    if simulate:
        cals = _run_stage(lambda: _calibrations(device, calibration, [pair]))
        cal = _cal_for(cals, pair)
        used = [cal]
        base = _run_stage(lambda: detuned_gate_infidelity(device, cal, 0.0))
        drifted = _run_stage(lambda: detuned_gate_infidelity(device, cal, shift))
        result["simulated_infidelity_increase"] = max(drifted - base, 0.0)
        result["simulated_infidelity"] = drifted
    summary = provenance(device, seed, used)
    summary["experiment"] = "drift"
    summary["parameters"] = {"pair": list(pair), "shots": shots, "linewidth_mhz": linewidth,
                             "rate_mhz_per_hour": rate, "minutes": minutes}
    summary["result"] = result
    rows = [(k, repr(float(v))) for k, v in result.items()]
    run_dir = write_run(out, "drift", summary, {"drift": (["quantity", "value"], rows)})
    _finish(run_dir, summary)


if __name__ == "__main__":  # pragma: no cover
    main()
