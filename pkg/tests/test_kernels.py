import os
import subprocess
import sys

import numpy as np
import pytest

from transmix import kernels
from transmix.lattice import build_lattice, make_theta
from transmix.mc import EMScheme
from transmix.orbits import _dirichlet_stencil
from transmix.spectrum import MasterOperator, TruncationPolicy

needs_compiled = pytest.mark.skipif("cython" not in kernels.available_backends(),
                                    reason="compiled kernels not built")


def test_backend_lookup():
    assert kernels.get_backend("numpy").BACKEND == "numpy"
    assert kernels.get_backend().BACKEND == kernels.BACKEND
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@needs_compiled
@pytest.mark.parametrize("mode", ["conservative", "absorbing"])
def test_stencil_backends_agree(mode):
    lat = build_lattice(3, 5)
    th = make_theta("shells", lattice=lat, R=1.5)
    op = MasterOperator(lat, th, 1.0, policy=TruncationPolicy(mode))
    Y = np.random.default_rng(0).random(lat.size)
    a = kernels.get_backend("numpy").stencil_apply(Y, op.src, op.w, op.diag)
    b = kernels.get_backend("cython").stencil_apply(Y, op.src, op.w, op.diag)
    assert np.array_equal(a, b)


@needs_compiled
@pytest.mark.parametrize("p", [1.5, 2.0, 3.0])
def test_dirichlet_backends_agree(p):
    lat = build_lattice(2, 12)
    th = make_theta("unit_shell", lattice=lat)
    dst, w = _dirichlet_stencil(lat, th)
    Y = np.random.default_rng(1).random(lat.size)
    a = kernels.get_backend("numpy").dirichlet_sum(Y, dst, w, p)
    b = kernels.get_backend("cython").dirichlet_sum(Y, dst, w, p)
    assert b == pytest.approx(a, rel=1e-13)


@needs_compiled
def test_noise_backends_agree():
    lat = build_lattice(2, 5)
    th = make_theta("powerlaw", lattice=lat, alpha=0.5, M=2)
    sch = EMScheme(lat, th, 1.0)
    rng = np.random.default_rng(2)
    P = 7
    ext = np.zeros((P, lat.size + 1), dtype=np.complex128)
    ext[:, :-1] = rng.standard_normal((P, lat.size)) + 1j * rng.standard_normal((P, lat.size))
    dW = rng.standard_normal((P, sch.src.shape[0])) + 1j * rng.standard_normal((P, sch.src.shape[0]))
    a = kernels.get_backend("numpy").noise_apply(ext, sch.src, sch.coef, dW)
    b = kernels.get_backend("cython").noise_apply(ext, sch.src, sch.coef, dW)
    assert np.max(np.abs(a - b)) <= 1e-13 * np.max(np.abs(a))


def test_out_argument_is_filled():
    lat = build_lattice(2, 4)
    th = make_theta("unit_shell", lattice=lat)
    op = MasterOperator(lat, th, 1.0)
    Y = np.ones(lat.size)
    out = np.empty(lat.size)
    res = kernels.stencil_apply(Y, op.src, op.w, op.diag, out)
    assert res is out
    assert np.allclose(out, kernels.get_backend("numpy").stencil_apply(Y, op.src, op.w, op.diag))


def test_pure_python_switch():
    env = dict(os.environ, TRANSMIX_PURE_PYTHON="1")
    code = "from transmix import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
