"""Synthetic dispersive readout, per-qubit logistic classifiers and readout POVMs.

Shots are integrated IQ points, one complex value per qubit. The classifier
pipeline standardizes the 2n features, decorrelates them with PCA and fits
one L2-penalized logistic model per qubit on the full feature vector, so
each qubit's decision can use its neighbours' signals.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.stats import norm, rankdata

LAMBDA_GRID = np.logspace(-4, 2, 10)
READOUT_TIME_US = 1.0
CROSSTALK_FRACTION = 0.03  # neighbour-induced mean shift, in units of the cloud separation


class ReadoutError(ValueError):
    pass


@dataclass
class ReadoutSimModel:
    """Gaussian IQ clouds for a register of qubits.

    ``crosstalk_shift[(i, j)]`` is added to qubit i's mean when register
    qubit j is prepared in |1>. Indices are register positions.
    """

    qubits: tuple
    mean_0: np.ndarray  # (n, 2)
    mean_1: np.ndarray  # (n, 2)
    sigma: np.ndarray  # (n,)
    t1_flip_prob: np.ndarray  # (n,)
    crosstalk_shift: dict = field(default_factory=dict)

    def __post_init__(self):
        self.qubits = tuple(int(q) for q in self.qubits)
        n = len(self.qubits)
        self.mean_0 = np.asarray(self.mean_0, dtype=float).reshape(n, 2)
        self.mean_1 = np.asarray(self.mean_1, dtype=float).reshape(n, 2)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=float), (n,)).copy()
        self.t1_flip_prob = np.broadcast_to(np.asarray(self.t1_flip_prob, dtype=float), (n,)).copy()
        if np.any(self.sigma <= 0):
            raise ReadoutError("sigma must be positive")
        if np.any((self.t1_flip_prob < 0) | (self.t1_flip_prob > 1)):
            raise ReadoutError("t1_flip_prob must lie in [0, 1]")

    @property
    def n_qubits(self) -> int:
        return len(self.qubits)

    def separation(self) -> np.ndarray:
        return np.linalg.norm(self.mean_1 - self.mean_0, axis=1) / self.sigma

    def ideal_assignment(self) -> np.ndarray:
        """Per-qubit (p(0|0), p(1|1)) for the midpoint threshold, ignoring crosstalk."""
        phi = norm.cdf(0.5 * self.separation())
        f = self.t1_flip_prob
        return np.stack([phi, (1 - f) * phi + f * (1 - phi)], axis=1)

    def ideal_fidelity(self) -> np.ndarray:
        return self.ideal_assignment().mean(axis=1)

    def confusion(self) -> np.ndarray:
        """Joint midpoint-threshold confusion matrix, first register qubit most significant."""
        out = np.ones((1, 1))
        for p00, p11 in self.ideal_assignment():
            out = np.kron(out, np.array([[p00, 1 - p11], [1 - p00, p11]]))
        return out


def _flip_probability(T1_us: float, readout_time_us: float = READOUT_TIME_US) -> float:
    """Chance that |1> decays before the integration midpoint."""
    return 1.0 - math.exp(-0.5 * readout_time_us / T1_us)


def _separation_for(fidelity: float, flip: float) -> float:
    """Separation/sigma giving midpoint-threshold fidelity ``fidelity`` with decay ``flip``."""
    def gap(s):
        phi = norm.cdf(0.5 * s)
        return 0.5 * (phi + (1 - flip) * phi + flip * (1 - phi)) - fidelity

    if gap(40.0) < 0:
        raise ReadoutError(f"fidelity {fidelity} unreachable with decay probability {flip:.4f}")
    return brentq(gap, 0.0, 40.0, xtol=1e-12)


def model_from_device(device, qubits, readout_time_us: float = READOUT_TIME_US,
                      crosstalk: float = CROSSTALK_FRACTION) -> ReadoutSimModel:
    """Synthetic clouds whose midpoint fidelity equals each qubit's readout_fidelity."""
    qubits = tuple(int(q) for q in qubits)
    n = len(qubits)
    m0 = np.zeros((n, 2))
    m1 = np.zeros((n, 2))
    flips = np.zeros(n)
    for i, q in enumerate(qubits):
        qp = device.qubit(q)
        flips[i] = _flip_probability(qp.T1, readout_time_us)
        s = _separation_for(qp.readout_fidelity, flips[i])
        # each resonator gets its own IQ-plane orientation
        angle = 2.0 * math.pi * ((qp.resonator_freq % 1000.0) / 1000.0)
        direction = np.array([math.cos(angle), math.sin(angle)])
        m0[i] = -0.5 * s * direction
        m1[i] = 0.5 * s * direction
    shifts = {}
    n_dev = len(device.qubits)
    for i, q in enumerate(qubits):
        for j, r in enumerate(qubits):
            if i != j and (abs(q - r) == 1 or abs(q - r) == n_dev - 1):
                shifts[(i, j)] = crosstalk * (m1[i] - m0[i])
    return ReadoutSimModel(qubits, m0, m1, np.ones(n), flips, shifts)


@dataclass
class ShotTable:
    """Integrated shots: prepared bitstrings and an (n_shots, n_qubits, 2) IQ array."""

    prepared: np.ndarray  # (n,) str
    iq: np.ndarray  # (n, n_qubits, 2)

    def __post_init__(self):
        self.prepared = np.asarray(self.prepared, dtype=str)
        self.iq = np.asarray(self.iq, dtype=float)
        if self.iq.ndim != 3 or self.iq.shape[2] != 2 or self.iq.shape[0] != self.prepared.shape[0]:
            raise ReadoutError("iq must have shape (n_shots, n_qubits, 2) matching the labels")
        if not np.all(np.isfinite(self.iq)):
            raise ReadoutError("non-finite IQ values")

    def __len__(self):
        return self.prepared.shape[0]

    @property
    def n_qubits(self) -> int:
        return self.iq.shape[1]

    def features(self) -> np.ndarray:
        return self.iq.reshape(len(self), -1)

    def bits(self) -> np.ndarray:
        """(n_shots, n_qubits) integer array of prepared bits."""
        return np.array([[int(c) for c in s] for s in self.prepared], dtype=int).reshape(len(self), self.n_qubits)

    def subset(self, idx) -> "ShotTable":
        return ShotTable(self.prepared[idx], self.iq[idx])

    @staticmethod
    def concat(tables) -> "ShotTable":
        tables = list(tables)
        return ShotTable(np.concatenate([t.prepared for t in tables]), np.concatenate([t.iq for t in tables]))


def _check_bitstring(bits: str, n: int) -> str:
    if len(bits) != n or set(bits) - {"0", "1"}:
        raise ReadoutError(f"bitstring '{bits}' is not {n} characters of 0/1")
    return bits


def sample_shots(model: ReadoutSimModel, prepared: str, n: int, seed: int | np.random.Generator) -> ShotTable:
    if n < 1:
        raise ReadoutError("n must be >= 1")
    prepared = _check_bitstring(prepared, model.n_qubits)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bits = np.array([int(c) for c in prepared])
    measured = np.repeat(bits[None, :], n, axis=0)
    flips = rng.random((n, model.n_qubits)) < model.t1_flip_prob[None, :]
    measured = np.where((measured == 1) & flips, 0, measured)
    means = np.where(measured[..., None] == 1, model.mean_1[None], model.mean_0[None])
    for (i, j), shift in model.crosstalk_shift.items():
        if bits[j]:
            means[:, i, :] += shift
    iq = means + rng.normal(size=means.shape) * model.sigma[None, :, None]
    return ShotTable(np.full(n, prepared), iq)


def all_bitstrings(n: int) -> list:
    return [format(k, f"0{n}b") for k in range(2 ** n)]


def sample_dataset(model: ReadoutSimModel, shots_per_state: int, seed: int) -> ShotTable:
    """Shots for every joint basis state, one independent stream per state."""
    rng = np.random.default_rng(seed)
    return ShotTable.concat(sample_shots(model, b, shots_per_state, rng) for b in all_bitstrings(model.n_qubits))


# -- logistic regression ---------------------------------------------------------------

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def logistic_loss(w: np.ndarray, x: np.ndarray, y: np.ndarray, lam: float) -> float:
    """Mean log-loss plus (lam/2)|beta1|^2; w = (beta0, beta1...)."""
    z = w[0] + x @ w[1:]
    # log(1 + e^z) - y z, computed stably
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * lam * np.dot(w[1:], w[1:]))


def logistic_grad(w: np.ndarray, x: np.ndarray, y: np.ndarray, lam: float) -> np.ndarray:
    r = _sigmoid(w[0] + x @ w[1:]) - y
    g = np.empty_like(w)
    g[0] = r.mean()
    g[1:] = x.T @ r / len(y) + lam * w[1:]
    return g


def fit_logistic(x, y, lam: float, tol: float = 1e-8, max_iter: int = 20000):
    """Gradient descent with Barzilai-Borwein trial steps and Armijo backtracking.

    Returns (w, gradient_inf_norm, iterations).
    """
    w = np.zeros(x.shape[1] + 1)
    f = logistic_loss(w, x, y, lam)
    g = logistic_grad(w, x, y, lam)
    step = 1.0
    it = 0
    for it in range(1, max_iter + 1):
        gn = float(np.max(np.abs(g)))
        if gn < tol:
            return w, gn, it - 1
        while True:
            wn = w - step * g
            fn = logistic_loss(wn, x, y, lam)
            if fn <= f - 1e-4 * step * float(g @ g) or step < 1e-20:
                break
            step *= 0.5
        gnew = logistic_grad(wn, x, y, lam)
        s, d = wn - w, gnew - g
        sd = float(s @ d)
        step = float(s @ s) / sd if sd > 1e-300 else 2.0 * step
        w, f, g = wn, fn, gnew
    gn = float(np.max(np.abs(g)))
    if gn >= tol:
        warnings.warn(f"logistic fit stopped at gradient norm {gn:.2e}", RuntimeWarning)
    return w, gn, it


# -- classifier ------------------------------------------------------------------------

@dataclass
class Classifier:
    feature_mean: np.ndarray
    feature_std: np.ndarray
    pca_rotation: np.ndarray  # columns are components
    weights: np.ndarray  # (n_qubits, p + 1), intercept first
    thresholds: np.ndarray  # (n_qubits,)
    penalties: np.ndarray  # (n_qubits,)
    gradient_norms: np.ndarray = None
    qubits: tuple = ()

    @property
    def n_qubits(self) -> int:
        return self.weights.shape[0]

    def transform(self, features: np.ndarray) -> np.ndarray:
        return ((features - self.feature_mean) / self.feature_std) @ self.pca_rotation

    def scores(self, shots: ShotTable) -> np.ndarray:
        """(n_shots, n_qubits) probability of |1>."""
        z = self.transform(shots.features())
        return _sigmoid(self.weights[:, 0][None, :] + z @ self.weights[:, 1:].T)

    def predict(self, shots: ShotTable) -> np.ndarray:
        return (self.scores(shots) >= self.thresholds[None, :]).astype(int)

    def to_dict(self) -> dict:
        return {
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "pca_rotation": self.pca_rotation.tolist(),
            "weights": self.weights.tolist(),
            "thresholds": self.thresholds.tolist(),
            "penalties": self.penalties.tolist(),
            "gradient_norms": None if self.gradient_norms is None else self.gradient_norms.tolist(),
            "qubits": list(self.qubits),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Classifier":
        gn = raw.get("gradient_norms")
        return cls(np.array(raw["feature_mean"]), np.array(raw["feature_std"]), np.array(raw["pca_rotation"]),
                   np.array(raw["weights"]), np.array(raw["thresholds"]), np.array(raw["penalties"]),
                   None if gn is None else np.array(gn), tuple(raw.get("qubits", ())))


def pca_rotation(z: np.ndarray) -> np.ndarray:
    """Eigenvectors of the empirical covariance, descending variance, sign-fixed."""
    cov = np.cov(z, rowvar=False, bias=True)
    vals, vecs = np.linalg.eigh(cov)
    vecs = vecs[:, np.argsort(vals)[::-1]]
    big = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[big, np.arange(vecs.shape[1])])
    return vecs * signs[None, :]


def stratified_split(labels: np.ndarray, holdout_frac: float, seed: int):
    """Per-class deterministic shuffle; returns (train_idx, holdout_idx)."""
    rng = np.random.default_rng(seed)
    train, hold = [], []
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        k = int(round(holdout_frac * idx.size))
        hold.append(idx[:k])
        train.append(idx[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(hold))


def stratified_folds(labels: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Fold id per sample, classes spread round-robin after a per-class shuffle."""
    rng = np.random.default_rng(seed)
    fold = np.empty(labels.shape[0], dtype=int)
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        fold[idx] = np.arange(idx.size) % folds
    return fold


def ks_threshold(scores: np.ndarray, y: np.ndarray):
    """Threshold maximizing |F_pos(t) - F_neg(t)| and the KS statistic."""
    pos, neg = np.sort(scores[y == 1]), np.sort(scores[y == 0])
    if pos.size == 0 or neg.size == 0:
        raise ReadoutError("both classes are needed for a threshold")
    cand = np.unique(scores)
    f_pos = np.searchsorted(pos, cand, side="left") / pos.size
    f_neg = np.searchsorted(neg, cand, side="left") / neg.size
    gap = np.abs(f_pos - f_neg)
    k = int(np.argmax(gap))
    # put the threshold midway between neighbouring scores
    t = cand[k] if k == 0 else 0.5 * (cand[k] + cand[k - 1])
    return float(np.clip(t, 1e-12, 1 - 1e-12)), float(gap[k])


def train_classifier(shots: ShotTable, folds: int = 3, lambda_grid=LAMBDA_GRID, holdout_frac: float = 0.2,
                     seed: int = 42, qubits=()) -> Classifier:
    labels = shots.prepared
    n_classes = len(set(labels.tolist()))
    if n_classes < 2 ** shots.n_qubits:
        raise ReadoutError(f"training data covers {n_classes} of {2 ** shots.n_qubits} joint states")
    train_idx, hold_idx = stratified_split(labels, holdout_frac, seed)
    if hold_idx.size == 0:
        raise ReadoutError("holdout set is empty")
    x_raw = shots.features()
    bits = shots.bits()
    xt = x_raw[train_idx]
    mean = xt.mean(axis=0)
    std = xt.std(axis=0)
    std[std == 0] = 1.0
    zt = (xt - mean) / std
    rot = pca_rotation(zt)
    zt = zt @ rot
    zh = ((x_raw[hold_idx] - mean) / std) @ rot
    fold = stratified_folds(labels[train_idx], folds, seed)
    nq = shots.n_qubits
    weights = np.zeros((nq, zt.shape[1] + 1))
    thresholds = np.zeros(nq)
    penalties = np.zeros(nq)
    gnorms = np.zeros(nq)
    for q in range(nq):
        y = bits[train_idx, q].astype(float)
        best = (-1.0, None)
        for lam in lambda_grid:
            acc = 0.0
            for k in range(folds):
                tr, va = fold != k, fold == k
                w, _, _ = fit_logistic(zt[tr], y[tr], lam)
                pred = (_sigmoid(w[0] + zt[va] @ w[1:]) >= 0.5).astype(float)
                acc += np.mean(pred == y[va]) / folds
            if acc > best[0] + 1e-12:
                best = (acc, lam)
        w, gn, _ = fit_logistic(zt, y, best[1])
        hs = _sigmoid(w[0] + zh @ w[1:])
        thresholds[q], _ = ks_threshold(hs, bits[hold_idx, q])
        weights[q], penalties[q], gnorms[q] = w, best[1], gn
    return Classifier(mean, std, rot, weights, thresholds, penalties, gnorms, tuple(qubits))


# -- metrics ---------------------------------------------------------------------------

def roc_auc(scores: np.ndarray, y: np.ndarray) -> float:
    """Probability a random positive outscores a random negative (ties count half)."""
    y = np.asarray(y).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ReadoutError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores: np.ndarray, y: np.ndarray):
    """(fpr, tpr) at every distinct threshold, from (0,0) to (1,1)."""
    y = np.asarray(y).astype(bool)
    order = np.argsort(-scores, kind="stable")
    s, yy = scores[order], y[order]
    distinct = np.flatnonzero(np.diff(s)) if s.size > 1 else np.array([], dtype=int)
    cut = np.concatenate([distinct, [s.size - 1]])
    tps = np.cumsum(yy)[cut]
    fps = np.cumsum(~yy)[cut]
    tpr = np.concatenate([[0.0], tps / max(y.sum(), 1)])
    fpr = np.concatenate([[0.0], fps / max((~y).sum(), 1)])
    return fpr, tpr


def trapezoid_auc(scores, y) -> float:
    fpr, tpr = roc_curve(np.asarray(scores), y)
    return float(np.trapezoid(tpr, fpr)) if hasattr(np, "trapezoid") else float(np.trapz(tpr, fpr))


@dataclass
class ConfusionMatrix:
    """Column-stochastic P[j, k] = p(detected j | prepared k)."""

    P: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        if self.P.ndim != 2 or self.P.shape[0] != self.P.shape[1]:
            raise ReadoutError("confusion matrix must be square")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=0) - 1.0)) > 1e-12:
            raise ReadoutError("confusion matrix must be column-stochastic")

    @property
    def dim(self) -> int:
        return self.P.shape[0]

    def assignment_fidelity(self) -> float:
        return float(np.trace(self.P) / self.dim)

    def to_dict(self) -> dict:
        return {"P": self.P.tolist()}

    @classmethod
    def from_counts(cls, prepared_idx, detected_idx, d: int) -> "ConfusionMatrix":
        counts = np.zeros((d, d))
        np.add.at(counts, (detected_idx, prepared_idx), 1.0)
        tot = counts.sum(axis=0)
        if np.any(tot == 0):
            raise ReadoutError("every prepared state needs at least one shot")
        return cls(counts / tot[None, :])


@dataclass
class ReadoutPOVM:
    elements: np.ndarray  # (n_outcomes, d, d)

    @property
    def diagonals(self) -> np.ndarray:
        return np.real(np.einsum("jkk->jk", self.elements))


def confusion_to_povm(conf) -> ReadoutPOVM:
    """N_j = sum_k p(j|k) |k><k|."""
    p = conf.P if isinstance(conf, ConfusionMatrix) else np.asarray(conf, dtype=float)
    ConfusionMatrix(p)
    d = p.shape[1]
    elems = np.zeros((p.shape[0], d, d))
    idx = np.arange(d)
    elems[:, idx, idx] = p
    return ReadoutPOVM(elems)


@dataclass
class QubitMetrics:
    accuracy: float
    tpr: float
    fpr: float
    precision: float
    f1: float
    auc: float
    ks: float
    assignment_fidelity: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _bits_to_index(bits: np.ndarray) -> np.ndarray:
    n = bits.shape[1]
    return bits @ (1 << np.arange(n - 1, -1, -1))


def evaluate_classifier(clf: Classifier, shots: ShotTable):
    """Per-qubit metrics and the joint confusion matrix on held-out shots.

    Per-qubit assignment fidelity is class-balanced over the joint prepared
    states, so it equals the matching marginal of the joint confusion matrix.
    """
    if len(shots) == 0:
        raise ReadoutError("empty holdout set")
    s = clf.scores(shots)
    pred = (s >= clf.thresholds[None, :]).astype(int)
    bits = shots.bits()
    nq = bits.shape[1]
    conf = ConfusionMatrix.from_counts(_bits_to_index(bits), _bits_to_index(pred), 2 ** nq)
    metrics = []
    marg = marginal_assignment(conf)
    for q in range(nq):
        y, p = bits[:, q], pred[:, q]
        tp = int(np.sum((p == 1) & (y == 1)))
        fp = int(np.sum((p == 1) & (y == 0)))
        fn = int(np.sum((p == 0) & (y == 1)))
        tn = int(np.sum((p == 0) & (y == 0)))
        tpr = tp / max(tp + fn, 1)
        fpr = fp / max(fp + tn, 1)
        prec = tp / max(tp + fp, 1)
        f1 = 2 * prec * tpr / (prec + tpr) if prec + tpr > 0 else 0.0
        _, ks = ks_threshold(s[:, q], y)
        metrics.append(QubitMetrics((tp + tn) / len(y), tpr, fpr, prec, f1, roc_auc(s[:, q], y), ks,
                                    float(marg[q].mean())))
    return metrics, conf


def marginal_assignment(conf: ConfusionMatrix) -> np.ndarray:
    """Per-qubit (p(0|0), p(1|1)) with uniform weight over the other qubits' states."""
    d = conf.dim
    n = int(round(math.log2(d)))
    out = np.zeros((n, 2))
    idx = np.arange(d)
    for q in range(n):
        bit = (idx >> (n - 1 - q)) & 1
        same = (bit[:, None] == bit[None, :])  # detected bit equals prepared bit
        correct = (conf.P * same).sum(axis=0)
        out[q] = [correct[bit == 0].mean(), correct[bit == 1].mean()]
    return out


# -- file IO ---------------------------------------------------------------------------

def write_shots_csv(shots: ShotTable, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["shot_index", "prepared_bitstring"]
                   + [f"q{i}_{c}" for i in range(shots.n_qubits) for c in ("I", "Q")])
        for k in range(len(shots)):
            w.writerow([k, shots.prepared[k]] + [repr(float(v)) for v in shots.iq[k].ravel()])


def read_shots_csv(path) -> ShotTable:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["shot_index", "prepared_bitstring"]:
        raise ReadoutError(f"{path}: not a shot file")
    body = rows[1:]
    nq = (len(rows[0]) - 2) // 2
    prepared = np.array([r[1] for r in body], dtype=str)
    iq = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), nq, 2)
    return ShotTable(prepared, iq)


def save_classifier(clf: Classifier, path) -> None:
    Path(path).write_text(json.dumps(clf.to_dict(), indent=2))


def load_classifier(path) -> Classifier:
    return Classifier.from_dict(json.loads(Path(path).read_text()))
