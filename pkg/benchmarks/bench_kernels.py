"""Compare the compiled kernels against the numpy/scipy fallback.

Run with ``python benchmarks/bench_kernels.py [--repeat N]``. Each row reports
the best wall time per call for both backends, their speedup and the largest
absolute difference between their outputs.
"""
import argparse
import timeit

import numpy as np

from paramgate import _kernels


def _generators(n, steps, seed=0):
    rng = np.random.default_rng(seed)
    diag = -1j * rng.normal(scale=50.0, size=(steps, n))
    v = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    v = -1j * 0.5 * (v + v.conj().T)
    dts = np.full(steps, 1e-3)
    return diag, v, dts


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_propagate(n, steps, repeat):
    diag, v, dts = _generators(n, steps)
    out = {}
    for name, mod in (("python", _kernels.python), ("cython", _kernels.compiled)):
        if mod is None:
            continue
        out[name] = (_time(lambda: mod.propagate(diag, v, dts), repeat), mod.propagate(diag, v, dts))
    return out


def bench_bessel(points, repeat):
    x = np.linspace(0.0, 40.0, points)
    out = {}
    for name, mod in (("python", _kernels.python), ("cython", _kernels.compiled)):
        if mod is None:
            continue
        out[name] = (_time(lambda: mod.bessel_jn_array(3, x), repeat), mod.bessel_jn_array(3, x))
    return out


def report(label, res):
    py_t, py_v = res["python"]
    if "cython" not in res:
        print(f"{label:<28} python {py_t * 1e3:9.3f} ms   (compiled extension not built)")
        return
    cy_t, cy_v = res["cython"]
    diff = float(np.max(np.abs(np.asarray(py_v) - np.asarray(cy_v))))
    print(f"{label:<28} python {py_t * 1e3:9.3f} ms   cython {cy_t * 1e3:9.3f} ms   "
          f"speedup {py_t / cy_t:5.2f}x   max|diff| {diff:.1e}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"active backend: {_kernels.BACKEND}")
    for n, steps in ((4, 4000), (9, 4000), (81, 400)):
        report(f"propagate n={n} steps={steps}", bench_propagate(n, steps, args.repeat))
    report("bessel J_3 on 2000 points", bench_bessel(2000, args.repeat))


if __name__ == "__main__":
    main()
