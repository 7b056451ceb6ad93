"""Time the compiled kernels against the numpy fallback on desk-scale inputs.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from transmix import kernels
from transmix.lattice import build_lattice, make_theta
from transmix.mc import EMScheme
from transmix.orbits import _dirichlet_stencil
from transmix.spectrum import MasterOperator, TruncationPolicy


def cases():
    lat = build_lattice(2, 24)
    theta = make_theta("unit_shell", lattice=lat)
    rng = np.random.default_rng(0)
    Y = rng.random(lat.size)
    Y = 0.5 * (Y + Y[::-1])
    op = MasterOperator(lat, theta, 1.0, policy=TruncationPolicy("conservative"))
    yield "stencil_apply N=24", "stencil_apply", (Y, op.src, op.w, op.diag)

    lat3 = build_lattice(3, 8)
    th3 = make_theta("shells", lattice=lat3, R=2)
    op3 = MasterOperator(lat3, th3, 1.0)
    Y3 = rng.random(lat3.size)
    yield "stencil_apply d=3 N=8 shells(2)", "stencil_apply", (Y3, op3.src, op3.w, op3.diag)

    dst, w = _dirichlet_stencil(lat, theta)
    yield "dirichlet_sum p=3 N=24", "dirichlet_sum", (Y, dst, w, 3.0)

    lat8 = build_lattice(2, 8)
    th8 = make_theta("unit_shell", lattice=lat8)
    sch = EMScheme(lat8, th8, 1.0)
    P = 256
    ext = np.zeros((P, lat8.size + 1), dtype=np.complex128)
    ext[:, :-1] = rng.standard_normal((P, lat8.size)) + 1j * rng.standard_normal((P, lat8.size))
    dW = rng.standard_normal((P, sch.src.shape[0])) + 1j * rng.standard_normal((P, sch.src.shape[0]))
    yield "noise_apply N=8 paths=256", "noise_apply", (ext, sch.src, sch.coef, dW)


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}  (active: {kernels.BACKEND})")
    print(f"{'case':36s}" + "".join(f"{b:>14s}" for b in backends) + "    speedup  max|diff|")
    for label, fn, args_ in cases():
        times, outs = [], []
        for b in backends:
            f = getattr(kernels.get_backend(b), fn)
            outs.append(f(*args_))
            n = max(1, args.repeat)
            times.append(min(timeit.repeat(lambda: f(*args_), number=n, repeat=3)) / n)
        diff = float(np.max(np.abs(np.asarray(outs[0]) - np.asarray(outs[-1]))))
        speed = times[0] / times[-1] if len(times) > 1 else 1.0
        print(f"{label:36s}" + "".join(f"{t * 1e6:12.1f}us" for t in times) + f"  {speed:8.1f}x  {diff:.1e}")


if __name__ == "__main__":
    main()
