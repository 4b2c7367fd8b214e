"""Pauli-basis channel algebra and maximum-likelihood state/process tomography.

Processes are Pauli transfer matrices R_kl = Tr[P_k L(P_l)] in the normalized
basis P = {I, X, Y, Z}^{(x)n} / sqrt(d), first qubit most significant. The
Choi matrix used for complete positivity is J = sum_kl R_kl P_l^T (x) P_k
(input factor first); the map R -> J is an isometry, so Euclidean
projections in R and Frobenius projections of J coincide.

Measurement model: a tomography experiment prepares rho0, applies a
pre-rotation R_l (process tomography only), the unknown map, a
post-rotation R_k, and reads out through a POVM {N_j}. Outcome probabilities
are linear in the unknown, p_jkl = a_jk^T R b_l, which makes the
multinomial log-likelihood concave.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import polar
from scipy.optimize import minimize, nnls

PAULIS = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.diag([1.0, -1.0]).astype(complex),
)
PAULI_LABELS = "IXYZ"

# single-qubit tomography rotations: I, Rx(pi/2), Ry(pi/2), Rx(pi)
ROTATION_LABELS = ("I", "Rx90", "Ry90", "Rx180")


def _rot(angle, axis):
    return math.cos(angle / 2) * PAULIS[0] - 1j * math.sin(angle / 2) * PAULIS[axis]


ROTATIONS = (PAULIS[0], _rot(math.pi / 2, 1), _rot(math.pi / 2, 2), _rot(math.pi, 1))


class TomographyError(RuntimeError):
    pass


@dataclass(frozen=True)
class PauliBasis:
    n_qubits: int
    operators: np.ndarray  # (d^2, d, d)
    labels: tuple

    @property
    def dim(self) -> int:
        return 2 ** self.n_qubits

    def vector(self, op: np.ndarray) -> np.ndarray:
        """Real coordinates Tr(P_m op) of a Hermitian operator."""
        return np.real(np.einsum("mij,ji->m", self.operators, op))

    def operator(self, vec) -> np.ndarray:
        return np.einsum("m,mij->ij", np.asarray(vec), self.operators)


_BASIS_CACHE: dict = {}


def pauli_basis(n_qubits: int) -> PauliBasis:
    """Normalized n-qubit Pauli basis, Tr(P_l P_m) = delta_lm."""
    if n_qubits not in _BASIS_CACHE:
        d = 2 ** n_qubits
        ops, labels = [], []
        for combo in itertools.product(range(4), repeat=n_qubits):
            m = np.ones((1, 1), dtype=complex)
            for c in combo:
                m = np.kron(m, PAULIS[c])
            ops.append(m / math.sqrt(d))
            labels.append("".join(PAULI_LABELS[c] for c in combo))
        _BASIS_CACHE[n_qubits] = PauliBasis(n_qubits, np.array(ops), tuple(labels))
    return _BASIS_CACHE[n_qubits]


@dataclass
class ProcessPTM:
    R: np.ndarray
    cp_projected: bool = False
    tp_constrained: bool = False
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        n = self.R.shape[0]
        if self.R.shape != (n, n) or round(math.log(n, 4)) != math.log(n, 4):
            raise ValueError(f"PTM must be 4^n x 4^n, got {self.R.shape}")

    @property
    def n_qubits(self) -> int:
        return int(round(math.log(self.R.shape[0], 4)))

    @property
    def dim(self) -> int:
        return 2 ** self.n_qubits

    def choi(self) -> np.ndarray:
        return ptm_to_choi(self.R)

    def to_dict(self) -> dict:
        return {"R": self.R.tolist(), "cp_projected": self.cp_projected,
                "tp_constrained": self.tp_constrained, "info": self.info}

    @classmethod
    def from_dict(cls, raw: dict) -> "ProcessPTM":
        return cls(np.array(raw["R"]), bool(raw.get("cp_projected")), bool(raw.get("tp_constrained")),
                   dict(raw.get("info", {})))


def _check_unitary(u: np.ndarray, tol: float = 1e-10) -> None:
    if np.max(np.abs(u.conj().T @ u - np.eye(u.shape[0]))) > tol:
        raise ValueError("matrix is not unitary")


def ptm_of_channel(apply, n_qubits: int) -> np.ndarray:
    """PTM of a linear map given as a callable on d x d matrices."""
    basis = pauli_basis(n_qubits)
    cols = [basis.vector(apply(p)) for p in basis.operators]
    return np.array(cols).T


def ptm_of_unitary(u: np.ndarray, basis: PauliBasis | None = None) -> ProcessPTM:
    u = np.asarray(u, dtype=complex)
    _check_unitary(u)
    n = int(round(math.log2(u.shape[0])))
    basis = basis or pauli_basis(n)
    ops = basis.operators
    m = ops.shape[0]
    mapped = u[None] @ ops @ u.conj().T[None]
    # R_kl = Tr(P_k U P_l U^dag); Paulis are Hermitian so Tr(A B) = sum conj(A) * B
    r = np.real(ops.reshape(m, -1).conj() @ mapped.reshape(m, -1).T)
    return ProcessPTM(r, cp_projected=True, tp_constrained=True)


_CHOI_CACHE: dict = {}


def _choi_map(n: int) -> np.ndarray:
    """Matrix T with vec(J) = T vec(R), both row-major."""
    if n not in _CHOI_CACHE:
        ops = pauli_basis(n).operators
        d = ops.shape[1]
        # J = sum_kl R_kl P_l^T (x) P_k
        t = np.einsum("lba,kcd->acbdkl", ops, ops).reshape(d ** 4, d ** 4)
        _CHOI_CACHE[n] = t
    return _CHOI_CACHE[n]


def ptm_to_choi(r: np.ndarray) -> np.ndarray:
    n = int(round(math.log(r.shape[0], 4)))
    d = 2 ** n
    return (_choi_map(n) @ np.asarray(r, dtype=float).reshape(-1)).reshape(d * d, d * d)


def choi_to_ptm(j: np.ndarray) -> np.ndarray:
    d = int(round(math.sqrt(j.shape[0])))
    n = int(round(math.log2(d)))
    # the map is an isometry, so its inverse is the adjoint: R_kl = Tr[(P_l^T (x) P_k) J]
    return np.real(_choi_map(n).conj().T @ j.reshape(-1)).reshape(d * d, d * d)


def depolarizing_ptm(n_qubits: int, strength: float = 1.0) -> np.ndarray:
    """PTM of rho -> (1-s) rho + s Tr(rho) I/d."""
    r = (1.0 - strength) * np.eye(4 ** n_qubits)
    r[0, 0] = 1.0
    return r


# -- projections ------------------------------------------------------------------

def project_cp(r: np.ndarray) -> np.ndarray:
    """Nearest PTM (Euclidean) with positive semidefinite Choi matrix."""
    j = ptm_to_choi(r)
    j = 0.5 * (j + j.conj().T)
    w, v = np.linalg.eigh(j)
    j = (v * np.clip(w, 0.0, None)) @ v.conj().T
    return choi_to_ptm(j)


def project_tp(r: np.ndarray) -> np.ndarray:
    out = np.array(r, dtype=float, copy=True)
    out[0, :] = 0.0
    out[0, 0] = 1.0
    return out


def min_choi_eigenvalue(r: np.ndarray) -> float:
    j = ptm_to_choi(r)
    return float(np.linalg.eigvalsh(0.5 * (j + j.conj().T)).min())


def _restore_cp(x: np.ndarray) -> np.ndarray:
    """Mix with the fully depolarizing map just enough to lift a slightly negative Choi spectrum."""
    lam = min_choi_eigenvalue(x)
    if lam >= -1e-12:
        return x
    n = int(round(math.log(x.shape[0], 4)))
    d = 2 ** n
    # Choi of the depolarizer is I/d; mixing by t moves the lowest eigenvalue to (1-t) lam + t/d
    t = -lam / (1.0 / d - lam)
    return (1.0 - t) * x + t * depolarizing_ptm(n)


def project_cptp_dykstra(r: np.ndarray, tol: float = 1e-12, max_iter: int = 5000) -> np.ndarray:
    """Dykstra alternating projection onto {CP} and {TP} (reference implementation)."""
    x = np.array(r, dtype=float, copy=True)
    p = np.zeros_like(x)
    for _ in range(max_iter):
        y = project_cp(x + p)
        p = x + p - y
        x_new = project_tp(y)
        done = np.max(np.abs(x_new - x)) < tol
        x = x_new
        if done:
            break
    return _restore_cp(x)


def project_cptp(r: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Euclidean projection onto CPTP maps.

    TP fixes the first row of R, so the projection is Pi_CP(R + e_0 y^T) for
    the multiplier y solving the concave dual; y is found with L-BFGS. The
    answer coincides with the Dykstra fixed point but needs far fewer
    eigendecompositions when the channel is close to rank one. The row is
    then pinned exactly and any residual Choi negativity (of the order of
    the dual tolerance) is removed by a minimal depolarizing mix.
    """
    r = np.asarray(r, dtype=float)
    n = r.shape[0]
    target = np.zeros(n)
    target[0] = 1.0

    def neg_dual(y):
        z = r.copy()
        z[0] += y
        x = project_cp(z)
        q = 0.5 * float(np.sum((x - r) ** 2)) - float(y @ (x[0] - target))
        return -q, x[0] - target

    y0 = target - r[0]
    res = minimize(neg_dual, y0, jac=True, method="L-BFGS-B",
                   options={"gtol": tol, "ftol": 1e-16, "maxiter": 2000, "maxcor": 30})
    z = r.copy()
    z[0] += res.x
    return _restore_cp(project_tp(project_cp(z)))


def project_density(rho: np.ndarray) -> np.ndarray:
    """Nearest density matrix in Frobenius norm (eigenvalue simplex projection)."""
    rho = 0.5 * (rho + rho.conj().T)
    w, v = np.linalg.eigh(rho)
    u = np.sort(w)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, len(u) + 1)
    cond = u - (css - 1.0) / k > 0
    idx = k[cond][-1]
    theta = (css[idx - 1] - 1.0) / idx
    w = np.clip(w - theta, 0.0, None)
    return (v * w) @ v.conj().T


# -- measurement model ---------------------------------------------------------------

@dataclass
class TomographySettings:
    """Rotation sets, readout POVM and initial state for n-qubit tomography.

    ``povm`` holds the diagonals of the POVM elements, shape (n_outcomes, d),
    i.e. ``povm[j, k] = p(j | k)`` from a column-stochastic confusion matrix.
    """

    n_qubits: int
    povm: np.ndarray | None = None
    rho0: np.ndarray | None = None
    shots_per_setting: int = 3000

    def __post_init__(self):
        d = 2 ** self.n_qubits
        self.povm = np.eye(d) if self.povm is None else np.asarray(self.povm, dtype=float)
        if self.povm.ndim != 2 or self.povm.shape[1] != d:
            raise ValueError(f"POVM must have shape (n_outcomes, {d})")
        if np.max(np.abs(self.povm.sum(axis=0) - 1.0)) > 1e-9 or np.any(self.povm < -1e-15):
            raise TomographyError("incomplete POVM: elements must be PSD and sum to the identity")
        if self.rho0 is None:
            self.rho0 = np.zeros((d, d), dtype=complex)
            self.rho0[0, 0] = 1.0
        if self.shots_per_setting < 1:
            raise ValueError("shots_per_setting must be >= 1")

    @property
    def dim(self) -> int:
        return 2 ** self.n_qubits

    def rotations(self) -> list:
        """All 4^n products of the single-qubit rotation set (first qubit most significant)."""
        out = []
        for combo in itertools.product(range(4), repeat=self.n_qubits):
            m = np.ones((1, 1), dtype=complex)
            for c in combo:
                m = np.kron(m, ROTATIONS[c])
            out.append(m)
        return out

    def rotation_labels(self) -> list:
        return ["".join(f"{ROTATION_LABELS[c]}." for c in combo).rstrip(".")
                for combo in itertools.product(range(4), repeat=self.n_qubits)]

    def povm_vectors(self) -> np.ndarray:
        basis = pauli_basis(self.n_qubits)
        return np.array([basis.vector(np.diag(e).astype(complex)) for e in self.povm])

    def measurement_matrix(self) -> np.ndarray:
        """A with rows a_jk = R_{R_k}^T n_j, ordered (j, k); shape (n_out*K, d^2)."""
        rot_ptms = [ptm_of_unitary(u).R for u in self.rotations()]
        nvec = self.povm_vectors()
        a = np.einsum("kml,jm->jkl", np.array(rot_ptms), nvec)
        return a.reshape(-1, a.shape[-1])

    def preparation_matrix(self) -> np.ndarray:
        """B with rows b_l = R_{R_l} r0; shape (L, d^2)."""
        basis = pauli_basis(self.n_qubits)
        r0 = basis.vector(self.rho0)
        return np.array([ptm_of_unitary(u).R @ r0 for u in self.rotations()])

    def to_dict(self) -> dict:
        return {"n_qubits": self.n_qubits, "povm": self.povm.tolist(),
                "rho0_real": np.real(self.rho0).tolist(), "rho0_imag": np.imag(self.rho0).tolist(),
                "shots_per_setting": self.shots_per_setting, "rotations": list(ROTATION_LABELS)}

    @classmethod
    def from_dict(cls, raw: dict) -> "TomographySettings":
        rho0 = None
        if "rho0_real" in raw:
            rho0 = np.array(raw["rho0_real"]) + 1j * np.array(raw.get("rho0_imag", 0.0))
        return cls(int(raw["n_qubits"]), np.array(raw["povm"]), rho0, int(raw.get("shots_per_setting", 3000)))


def predicted_probabilities(r, settings: TomographySettings) -> np.ndarray:
    """p_jkl for a process (PTM or ProcessPTM); shape (n_out, K, L)."""
    r = r.R if isinstance(r, ProcessPTM) else np.asarray(r)
    a = settings.measurement_matrix()
    b = settings.preparation_matrix()
    n_out = settings.povm.shape[0]
    return (a @ r @ b.T).reshape(n_out, -1, b.shape[0])


def predicted_state_probabilities(rho: np.ndarray, settings: TomographySettings) -> np.ndarray:
    """p_jk for a state; shape (n_out, K)."""
    vec = pauli_basis(settings.n_qubits).vector(rho)
    a = settings.measurement_matrix()
    return (a @ vec).reshape(settings.povm.shape[0], -1)


@dataclass
class ExperimentRecord:
    """Shot histograms. QST counts are (n_out, K); QPT counts are (n_out, K, L)."""

    kind: str
    counts: np.ndarray
    settings: TomographySettings
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.kind not in ("qst", "qpt"):
            raise ValueError("kind must be 'qst' or 'qpt'")
        if np.any(self.counts < 0):
            raise ValueError("negative counts")
        want = 2 if self.kind == "qst" else 3
        if self.counts.ndim != want:
            raise ValueError(f"{self.kind} counts must have {want} axes")

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "counts": self.counts.tolist(),
                           "settings": self.settings.to_dict(), "metadata": self.metadata})

    @classmethod
    def from_json(cls, text: str) -> "ExperimentRecord":
        raw = json.loads(text)
        return cls(raw["kind"], np.array(raw["counts"]), TomographySettings.from_dict(raw["settings"]),
                   raw.get("metadata", {}))


def sample_counts(probs: np.ndarray, shots: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial histograms along axis 0 for every setting."""
    probs = np.clip(probs, 0.0, None)
    flat = probs.reshape(probs.shape[0], -1)
    flat = flat / flat.sum(axis=0, keepdims=True)
    out = np.empty(flat.shape, dtype=np.int64)
    for c in range(flat.shape[1]):
        out[:, c] = rng.multinomial(shots, flat[:, c])
    return out.reshape(probs.shape)


# -- likelihood ------------------------------------------------------------------

def log_likelihood(probs: np.ndarray, counts: np.ndarray) -> float:
    """Sum of n log p; -inf if a counted outcome has non-positive probability."""
    probs = np.asarray(probs, dtype=float)
    counts = np.asarray(counts)
    hit = counts > 0
    if np.any(probs[hit] <= 0):
        return -math.inf
    return float(np.sum(counts[hit] * np.log(probs[hit])))


class _LinearModel:
    """p = M x + c over free parameters x, with counts and setting totals."""

    def __init__(self, mat, offset, counts, poisson_totals=None):
        self.m = mat
        self.c = offset
        self.n = counts.astype(float)
        self.extra = None if poisson_totals is None else mat.T @ poisson_totals
        self.extra_c = 0.0 if poisson_totals is None else float(poisson_totals @ offset)

    def probs(self, x):
        return self.m @ x + self.c

    def value(self, x, weights=None):
        w = self.n if weights is None else weights
        p = self.probs(x)
        hit = w > 0
        if np.any(p[hit] <= 0):
            return -math.inf
        val = float(np.sum(w[hit] * np.log(p[hit])))
        if self.extra is not None:
            val -= float(self.extra @ x) + self.extra_c
        return val

    def grad(self, x, weights=None):
        w = self.n if weights is None else weights
        p = self.probs(x)
        g = self.m.T @ np.where(w > 0, w / np.where(p > 0, p, 1.0), 0.0)
        if self.extra is not None:
            g = g - self.extra
        return g


def _barrier_newton(model: _LinearModel, x0, max_newton: int = 60):
    """Interior Newton ascent of the log-likelihood on {p >= 0}.

    A log barrier mu * sum log p keeps iterates interior; mu is driven from a
    fraction of the mean count down to 1e-10 so the final point maximizes the
    plain likelihood to high accuracy. Returns (x, iterations, converged).
    """
    x = np.array(x0, dtype=float)
    scale = max(float(model.n.mean()), 1.0)
    total_iter = 0
    converged = False
    for mu in scale * np.logspace(-2, -12, 6):
        w = model.n + mu
        for _ in range(max_newton):
            total_iter += 1
            p = model.probs(x)
            g = model.grad(x, w)
            h = (model.m * (w / p ** 2)[:, None]).T @ model.m
            try:
                step = np.linalg.solve(h + 1e-12 * np.trace(h) / h.shape[0] * np.eye(h.shape[0]), g)
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(h, g, rcond=None)[0]
            dec = float(g @ step)
            if dec < 1e-10:
                converged = True
                break
            dp = model.m @ step
            neg = dp < 0
            alpha = 1.0
            if np.any(neg):
                alpha = min(1.0, 0.99 * float(np.min(-p[neg] / dp[neg])))
            f0 = model.value(x, w)
            while alpha > 1e-14:
                xn = x + alpha * step
                if model.value(xn, w) >= f0 + 0.25 * alpha * dec:
                    break
                alpha *= 0.5
            x = x + alpha * step
    return x, total_iter, converged


def _kkt_residual(model: _LinearModel, x, active_tol: float = 1e-7) -> float:
    """Stationarity residual min_{lam>=0} |grad + M_A^T lam| over active p >= 0 constraints."""
    g = model.grad(x)
    p = model.probs(x)
    active = p < active_tol * max(float(np.max(np.abs(p))), 1.0)
    if not np.any(active):
        return float(np.linalg.norm(g))
    _, res = nnls(model.m[active].T, -g)
    return float(res)


def _feasible_start(model_probs, x_li, x_mixed, min_prob: float = 1e-6):
    """Mix linear inversion with a maximally mixed point until all p >= min_prob."""
    for lam in np.concatenate([[0.0], np.logspace(-4, 0, 41)]):
        x = (1.0 - lam) * x_li + lam * x_mixed
        if np.all(model_probs(x) >= min_prob):
            return x
    return x_mixed


def _spg(value, grad, project, x0, rel_tol: float = 1e-10, max_iter: int = 5000, patience: int = 10):
    """Spectral projected gradient ascent with backtracking (monotone).

    Returns (x, f, iterations, converged, mapping_norm).
    """
    x = project(x0)
    f = value(x)
    g = grad(x)
    alpha = 1.0 / max(np.max(np.abs(g)), 1e-300)
    converged = False
    quiet = 0
    it = 0
    for it in range(1, max_iter + 1):
        while True:
            xn = project(x + alpha * g)
            d = xn - x
            fn = value(xn)
            if fn >= f + 1e-4 * float(np.real(np.vdot(g, d))) or alpha < 1e-300:
                break
            alpha *= 0.5
        gn = grad(xn)
        s = (xn - x).ravel()
        y = (gn - g).ravel()
        sy = -float(np.real(np.vdot(s, y)))
        alpha = float(np.real(np.vdot(s, s))) / sy if sy > 0 else alpha * 2.0
        improve = fn - f
        x, f, g = xn, fn, gn
        # a single short backtracked step can stall briefly; require a quiet streak
        quiet = quiet + 1 if abs(improve) <= rel_tol * abs(f) else 0
        if quiet >= patience:
            converged = True
            break
    mapping = float(np.linalg.norm(project(x + g / max(np.max(np.abs(g)), 1e-300)) - x))
    return x, f, it, converged, mapping


# -- QPT -------------------------------------------------------------------------------

def linear_inversion_ptm(record: ExperimentRecord) -> np.ndarray:
    s = record.settings
    a = s.measurement_matrix()
    b = s.preparation_matrix()
    freq = record.counts / np.maximum(record.totals[None], 1)
    f = freq.reshape(a.shape[0], b.shape[0])
    return np.linalg.pinv(a) @ f @ np.linalg.pinv(b).T


def _qpt_design(record):
    s = record.settings
    a = s.measurement_matrix()
    b = s.preparation_matrix()
    # p[(j,k), l] = a_jk^T R b_l  ->  row (j,k,l) of kron(a_jk, b_l) against vec(R) (row-major)
    design = np.einsum("im,ln->ilmn", a, b).reshape(a.shape[0] * b.shape[0], -1)
    return design


def qpt_mle(record: ExperimentRecord, constraints: str = "cptp", rel_tol: float = 1e-10,
            max_iter: int = 5000) -> ProcessPTM:
    """Maximum-likelihood PTM from a QPT record.

    ``constraints``:
      * ``none``: only R_00 = 1; Poisson-extended likelihood, since
        probabilities need not sum to one per setting.
      * ``tp``: first row pinned to e_0 (trace preserving).
      * ``cptp``: TP plus positive semidefinite Choi matrix, by spectral
        projected gradient with Dykstra projection.
    """
    if record.kind != "qpt":
        raise ValueError("qpt_mle needs a QPT record")
    constraints = constraints.lower().replace("+", "")
    if constraints not in ("none", "tp", "cptp"):
        raise ValueError("constraints must be one of none, tp, cptp")
    n_par = 4 ** record.settings.n_qubits
    design = _qpt_design(record)
    counts = record.counts.reshape(-1).astype(float)
    totals = np.broadcast_to(record.totals[None], record.counts.shape).reshape(-1).astype(float)
    r_li = linear_inversion_ptm(record)
    r_mixed = depolarizing_ptm(record.settings.n_qubits)

    if constraints in ("none", "tp"):
        if constraints == "none":
            free = np.ones(n_par * n_par, dtype=bool)
            free[0] = False
        else:
            free = np.ones((n_par, n_par), dtype=bool)
            free[0, :] = False
            free = free.ravel()
        fixed = np.zeros(n_par * n_par)
        fixed[0] = 1.0
        model = _LinearModel(design[:, free], design @ fixed, counts,
                             poisson_totals=totals if constraints == "none" else None)
        r_start = project_tp(r_li) if constraints == "tp" else r_li.copy()
        r_start[0, 0] = 1.0
        x0 = _feasible_start(model.probs, r_start.ravel()[free], r_mixed.ravel()[free])
        x, iters, converged = _barrier_newton(model, x0)
        r_vec = fixed.copy()
        r_vec[free] = x
        r = r_vec.reshape(n_par, n_par)
        grad_norm = _kkt_residual(model, x)
    else:
        def value(r):
            return log_likelihood(design @ r.ravel(), counts)

        def grad(r):
            p = design @ r.ravel()
            w = np.where(counts > 0, counts / np.where(p > 0, p, 1.0), 0.0)
            return (design.T @ w).reshape(n_par, n_par)

        start = project_cptp(r_li)
        start = 0.999 * start + 0.001 * r_mixed
        r, _, iters, converged, grad_norm = _spg(value, grad, project_cptp, start, rel_tol, max_iter)

    probs = design @ r.ravel()
    ll = log_likelihood(probs, counts)
    if not converged:
        warnings.warn("qpt_mle did not converge", RuntimeWarning)
    if not np.isfinite(ll):
        raise TomographyError("estimate assigns zero probability to an observed outcome")
    return ProcessPTM(r, cp_projected=constraints == "cptp", tp_constrained=constraints != "none",
                      info={"log_likelihood": ll, "gradient_norm": grad_norm, "iterations": iters,
                            "converged": bool(converged), "constraints": constraints})


# -- QST -------------------------------------------------------------------------------

def linear_inversion_state(record: ExperimentRecord) -> np.ndarray:
    s = record.settings
    a = s.measurement_matrix()
    freq = (record.counts / np.maximum(record.totals[None], 1)).reshape(-1)
    vec = np.linalg.pinv(a) @ freq
    return pauli_basis(s.n_qubits).operator(vec)


def qst_mle(record: ExperimentRecord, constrain_positive: bool = True, rel_tol: float = 1e-10,
            max_iter: int = 5000):
    """Maximum-likelihood density matrix from post-rotation histograms.

    Returns ``(rho, info)``; ``info`` carries the log-likelihood, the
    gradient (or gradient-mapping) norm, the iteration count and a
    convergence flag.
    """
    if record.kind != "qst":
        raise ValueError("qst_mle needs a QST record")
    s = record.settings
    d = s.dim
    basis = pauli_basis(s.n_qubits)
    a = s.measurement_matrix()
    counts = record.counts.reshape(-1).astype(float)
    rho_li = linear_inversion_state(record)
    if not constrain_positive:
        free = np.ones(d * d, dtype=bool)
        free[0] = False
        fixed = np.zeros(d * d)
        fixed[0] = 1.0 / math.sqrt(d)
        model = _LinearModel(a[:, free], a @ fixed, counts)
        v_li = basis.vector(rho_li)
        v_mixed = basis.vector(np.eye(d) / d)
        x0 = _feasible_start(model.probs, v_li[free], v_mixed[free])
        x, iters, converged = _barrier_newton(model, x0)
        vec = fixed.copy()
        vec[free] = x
        rho = basis.operator(vec)
        grad_norm = _kkt_residual(model, x)
    else:
        ops = basis.operators

        def to_vec(rho):
            return np.real(np.einsum("mij,ji->m", ops, rho))

        def value(rho):
            return log_likelihood(a @ to_vec(rho), counts)

        def grad(rho):
            p = a @ to_vec(rho)
            w = np.where(counts > 0, counts / np.where(p > 0, p, 1.0), 0.0)
            # d/d rho of sum w log(a.vec(rho)): Hermitian operator sum_m (A^T w)_m P_m
            return basis.operator(a.T @ w)

        start = 0.999 * project_density(rho_li) + 0.001 * np.eye(d) / d
        rho, _, iters, converged, grad_norm = _spg(value, grad, project_density, start, rel_tol, max_iter)
    ll = log_likelihood(predicted_state_probabilities(rho, s).reshape(-1), counts)
    if not converged:
        warnings.warn("qst_mle did not converge", RuntimeWarning)
    if not np.isfinite(ll):
        raise TomographyError("estimate assigns zero probability to an observed outcome")
    rho = 0.5 * (rho + rho.conj().T)
    return rho, {"log_likelihood": ll, "gradient_norm": grad_norm, "iterations": iters,
                 "converged": bool(converged), "positive": constrain_positive}


# -- fidelities and decompositions -----------------------------------------------------

def avg_gate_fidelity(r, r_ideal) -> float:
    """(Tr(R^T R_ideal)/d + 1) / (d + 1)."""
    r = r.R if isinstance(r, ProcessPTM) else np.asarray(r)
    ri = r_ideal.R if isinstance(r_ideal, ProcessPTM) else np.asarray(r_ideal)
    if r.shape != ri.shape:
        raise ValueError(f"dimension mismatch {r.shape} vs {ri.shape}")
    d = math.sqrt(r.shape[0])
    return float((np.trace(r.T @ ri) / d + 1.0) / (d + 1.0))


def state_fidelity(rho, psi) -> float:
    rho = rho.matrix if hasattr(rho, "matrix") else np.asarray(rho)
    psi = np.asarray(psi, dtype=complex).reshape(-1)
    if rho.shape != (psi.size, psi.size):
        raise ValueError("dimension mismatch between state and target")
    return float(np.real(psi.conj() @ rho @ psi))


def nearest_unitary(r, u_ideal: np.ndarray, gap_tol: float = 1e-6):
    """Unitary closest to a process and the split of its infidelity.

    Takes the dominant eigenvector of the Choi matrix, reshapes it into an
    operator and keeps the unitary factor of its polar decomposition.
    Returns ``(V, coherent_infidelity, decoherent_infidelity)`` with
    coherent = 1 - F(V, U_ideal) and decoherent = 1 - F(R, PTM(V)).
    """
    r = r.R if isinstance(r, ProcessPTM) else np.asarray(r)
    d = 2 ** int(round(math.log(r.shape[0], 4)))
    j = ptm_to_choi(r)
    w, v = np.linalg.eigh(0.5 * (j + j.conj().T))
    if w[-1] - w[-2] < gap_tol * max(abs(w[-1]), 1.0):
        raise TomographyError("leading Choi eigenvalue is degenerate; no unique nearest unitary")
    # for a unitary channel J = |U>><<U| with |U>> = sum_i |i> (x) U|i>
    k = v[:, -1].reshape(d, d).T
    vmat, _ = polar(k)
    r_v = ptm_of_unitary(vmat).R
    coherent = 1.0 - avg_gate_fidelity(r_v, ptm_of_unitary(u_ideal).R)
    decoherent = 1.0 - avg_gate_fidelity(r, r_v)
    return vmat, coherent, decoherent
