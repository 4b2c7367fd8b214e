# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: Bessel quadrature and piecewise-constant propagation.

The propagation kernel computes exp(G dt) with a Taylor/Horner scheme plus
scaling and squaring, calling BLAS zgemm directly so the per-step Python
overhead of scipy.linalg.expm disappears. Arrays are C-ordered; BLAS is
column-major, so every product is issued with the operands swapped.
"""
import numpy as np

from libc.math cimport cos, sin, fabs, ceil, log2, M_PI, ldexp
from libc.string cimport memcpy
from scipy.linalg.cython_blas cimport zgemm

ctypedef double complex cplx

# ||A dt||_1 is scaled below THETA; the degree-16 Taylor remainder is then < 3e-17
cdef double THETA = 0.75
cdef double[17] INV_FACT
INV_FACT[0] = 1.0
for _k in range(1, 17):
    INV_FACT[_k] = INV_FACT[_k - 1] / _k
# below this size a plain triple loop beats the zgemm call overhead
cdef int SMALL = 4


cdef double _bessel(int n, double x) noexcept nogil:
    cdef int an = n if n >= 0 else -n
    cdef int m = 2 * (an + <int>fabs(x)) + 64
    cdef double acc = 0.0
    cdef double t
    cdef int k
    for k in range(m):
        t = 2.0 * M_PI * k / m
        acc += cos(n * t - x * sin(t))
    return acc / m


def bessel_jn(int n, double x):
    """J_n(x) by the periodic trapezoid rule."""
    return _bessel(n, x)


def bessel_jn_array(int n, x):
    cdef double[::1] xs = np.ascontiguousarray(np.asarray(x, dtype=float).reshape(-1))
    out = np.empty(xs.shape[0])
    cdef double[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(xs.shape[0]):
            o[i] = _bessel(n, xs[i])
    return out.reshape(np.shape(x))


cdef inline void _matmul(cplx* a, cplx* b, cplx* c, int n) noexcept nogil:
    # row-major c = a @ b
    cdef char tr = b'N'
    cdef cplx one = 1.0
    cdef cplx zero = 0.0
    cdef int i, j, k
    cdef cplx aik
    if n <= SMALL:
        for i in range(n * n):
            c[i] = 0.0
        for i in range(n):
            for k in range(n):
                aik = a[i * n + k]
                for j in range(n):
                    c[i * n + j] = c[i * n + j] + aik * b[k * n + j]
        return
    zgemm(&tr, &tr, &n, &n, &n, &one, b, &n, a, &n, &zero, c, &n)


cdef inline void _block(cplx* out, cplx* a1, cplx* a2, cplx* a3, int base,
                        int nn, int n) noexcept nogil:
    # out = c_base I + c_{base+1} A + c_{base+2} A^2 + c_{base+3} A^3 (+=, identity handled by caller)
    cdef int i
    for i in range(nn):
        out[i] = out[i] + INV_FACT[base + 1] * a1[i] + INV_FACT[base + 2] * a2[i] \
            + INV_FACT[base + 3] * a3[i]
    for i in range(n):
        out[i * n + i] = out[i * n + i] + INV_FACT[base]


cdef void _expm(cplx* a, cplx* out, cplx* w, int n) noexcept nogil:
    """out = exp(a) with scaling and squaring; a is scaled in place.

    The degree-16 Taylor polynomial is evaluated by Paterson-Stockmeyer with
    block size 4: seven products instead of sixteen. ``w`` must hold 4*n*n.
    """
    cdef int i, j, k, s = 0
    cdef double norm = 0.0, col
    cdef int nn = n * n
    cdef cplx* a2 = w
    cdef cplx* a3 = w + nn
    cdef cplx* a4 = w + 2 * nn
    cdef cplx* tmp = w + 3 * nn
    for j in range(n):
        col = 0.0
        for i in range(n):
            col += fabs(a[i * n + j].real) + fabs(a[i * n + j].imag)
        if col > norm:
            norm = col
    if norm > THETA:
        s = <int>ceil(log2(norm / THETA))
        for i in range(nn):
            a[i] = ldexp(a[i].real, -s) + 1j * ldexp(a[i].imag, -s)
    _matmul(a, a, a2, n)
    _matmul(a2, a, a3, n)
    _matmul(a2, a2, a4, n)
    # Horner in A^4 over blocks [12..15], [8..11], [4..7], [0..3] plus the A^16 term
    for i in range(nn):
        out[i] = INV_FACT[16] * a4[i]
    _block(out, a, a2, a3, 12, nn, n)
    for k in range(2, -1, -1):
        _matmul(a4, out, tmp, n)
        memcpy(out, tmp, nn * sizeof(cplx))
        _block(out, a, a2, a3, 4 * k, nn, n)
    for k in range(s):
        _matmul(out, out, tmp, n)
        memcpy(out, tmp, nn * sizeof(cplx))


def propagate(diag_gen, const_gen, dts):
    """Ordered product of exp((diag(diag_gen[k]) + const_gen) * dts[k])."""
    cdef cplx[:, ::1] dg = np.ascontiguousarray(diag_gen, dtype=complex)
    cdef cplx[:, ::1] cg = np.ascontiguousarray(const_gen, dtype=complex)
    cdef double[::1] dt = np.ascontiguousarray(dts, dtype=float)
    cdef int n = cg.shape[0]
    cdef Py_ssize_t steps = dt.shape[0]
    out = np.eye(n, dtype=complex)
    cdef cplx[:, ::1] acc = out
    cdef cplx[:, ::1] a = np.empty((n, n), dtype=complex)
    cdef cplx[:, ::1] e = np.empty((n, n), dtype=complex)
    cdef cplx[:, ::1] w = np.empty((4 * n, n), dtype=complex)
    cdef Py_ssize_t k
    cdef int i, j
    if n == 0:
        return out
    with nogil:
        for k in range(steps):
            for i in range(n):
                for j in range(n):
                    a[i, j] = cg[i, j] * dt[k]
                a[i, i] = a[i, i] + dg[k, i] * dt[k]
            _expm(&a[0, 0], &e[0, 0], &w[0, 0], n)
            _matmul(&e[0, 0], &acc[0, 0], &a[0, 0], n)
            memcpy(&acc[0, 0], &a[0, 0], n * n * sizeof(cplx))
    return out


def propagate_cumulative(diag_gen, const_gen, dts):
    """Every partial product of :func:`propagate`, shape (K+1, n, n)."""
    cdef cplx[:, ::1] dg = np.ascontiguousarray(diag_gen, dtype=complex)
    cdef cplx[:, ::1] cg = np.ascontiguousarray(const_gen, dtype=complex)
    cdef double[::1] dt = np.ascontiguousarray(dts, dtype=float)
    cdef int n = cg.shape[0]
    cdef Py_ssize_t steps = dt.shape[0]
    out = np.empty((steps + 1, n, n), dtype=complex)
    out[0] = np.eye(n)
    cdef cplx[:, :, ::1] acc = out
    cdef cplx[:, ::1] a = np.empty((n, n), dtype=complex)
    cdef cplx[:, ::1] e = np.empty((n, n), dtype=complex)
    cdef cplx[:, ::1] w = np.empty((4 * n, n), dtype=complex)
    cdef Py_ssize_t k
    cdef int i, j
    if n == 0:
        return out
    with nogil:
        for k in range(steps):
            for i in range(n):
                for j in range(n):
                    a[i, j] = cg[i, j] * dt[k]
                a[i, i] = a[i, i] + dg[k, i] * dt[k]
            _expm(&a[0, 0], &e[0, 0], &w[0, 0], n)
            _matmul(&e[0, 0], &acc[k, 0, 0], &acc[k + 1, 0, 0], n)
    return out
