"""Reference implementations of the numerical kernels (numpy/scipy only)."""
import numpy as np
from scipy.linalg import expm


def _bessel_nodes(n, x):
    # aliasing error of the periodic trapezoid rule is J_{N-|n|}(x), negligible once
    # N - |n| comfortably exceeds |x|
    m = 2 * (abs(n) + int(abs(x))) + 64
    return m


def bessel_jn(n, x):
    """Bessel function of the first kind via the periodic trapezoid rule.

    J_n(x) = (1/2pi) int_0^{2pi} cos(n t - x sin t) dt, which converges
    geometrically for a periodic analytic integrand.
    """
    n = int(n)
    x = float(x)
    m = _bessel_nodes(n, x)
    t = 2.0 * np.pi * np.arange(m) / m
    return float(np.mean(np.cos(n * t - x * np.sin(t))))


def bessel_jn_array(n, x):
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape)
    flat = out.reshape(-1)
    for i, xi in enumerate(x.reshape(-1)):
        flat[i] = bessel_jn(n, xi)
    return out


def propagate(diag_gen, const_gen, dts):
    """Ordered product of exp((diag(diag_gen[k]) + const_gen) * dts[k]).

    Later steps multiply from the left, so the result maps the initial vector
    to the final one.
    """
    diag_gen = np.ascontiguousarray(diag_gen, dtype=complex)
    const_gen = np.ascontiguousarray(const_gen, dtype=complex)
    dts = np.ascontiguousarray(dts, dtype=float)
    n = const_gen.shape[0]
    out = np.eye(n, dtype=complex)
    for k in range(dts.shape[0]):
        step = expm((np.diag(diag_gen[k]) + const_gen) * dts[k])
        out = step @ out
    return out


def propagate_cumulative(diag_gen, const_gen, dts):
    """Like :func:`propagate` but returns every partial product, shape (K+1, n, n)."""
    diag_gen = np.ascontiguousarray(diag_gen, dtype=complex)
    const_gen = np.ascontiguousarray(const_gen, dtype=complex)
    n = const_gen.shape[0]
    k_steps = len(dts)
    out = np.empty((k_steps + 1, n, n), dtype=complex)
    out[0] = np.eye(n)
    for k in range(k_steps):
        step = expm((np.diag(diag_gen[k]) + const_gen) * dts[k])
        out[k + 1] = step @ out[k]
    return out
