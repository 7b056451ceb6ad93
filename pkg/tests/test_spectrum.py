import math

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from transmix.lattice import basis_vectors, build_lattice, make_theta, mixing_constants
from transmix.spectrum import (
    DtPolicy,
    IntegrationError,
    MasterOperator,
    SpectrumState,
    TruncationPolicy,
    fit_decay_rate,
    h_minus1_drift,
    heat_rhs,
    integrate,
    spectrum_norms,
    theoretical_bounds,
    transport_rhs,
)

PI2 = math.pi**2


def brute_force_rhs(lat, theta, kappa, Y, mode):
    """Double loop over (k, l, i) using the frames directly."""
    d = lat.d
    c_d = d / (d - 1)
    out = np.zeros(lat.size)
    pos = {tuple(k): i for i, k in enumerate(lat.points)}
    for i, k in enumerate(lat.points):
        if mode == "absorbing":
            out[i] -= 8 * PI2 * kappa * float(k @ k) * Y[i]
        for l, th in zip(theta.steps, theta.values):
            frame = basis_vectors(l)
            rate = 8 * PI2 * c_d * kappa * th**2 * sum(float(a @ k) ** 2 for a in frame)
            src = pos.get(tuple(k - l))
            if src is not None:
                out[i] += rate * Y[src]
            if mode == "conservative":
                # flux k -> k + l uses the weight at the destination
                dst = pos.get(tuple(k + l))
                if dst is not None:
                    out[i] -= 8 * PI2 * c_d * kappa * th**2 * sum(
                        float(a @ (k + l)) ** 2 for a in frame) * Y[i]
    return out


def random_symmetric(lat, rng):
    y = rng.random(lat.size)
    return 0.5 * (y + y[::-1])


@pytest.mark.parametrize("d,N,family,params", [
    (2, 5, "unit_shell", {}),
    (2, 6, "powerlaw", {"alpha": 0.5, "M": 2}),
    (3, 3, "unit_shell", {}),
    (3, 3, "shells", {"R": 1.5}),
])
@pytest.mark.parametrize("mode", ["conservative", "absorbing"])
def test_rhs_matches_brute_force(d, N, family, params, mode):
    lat = build_lattice(d, N)
    th = make_theta(family, lattice=lat, **params)
    Y = random_symmetric(lat, np.random.default_rng(3))
    got = transport_rhs(Y, th, 0.7, TruncationPolicy(mode), lattice=lat)
    want = brute_force_rhs(lat, th, 0.7, Y, mode)
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12 * np.abs(want).max())


def test_hand_example_delta_at_e1():
    lat = build_lattice(2, 4)
    th = make_theta("unit_shell", lattice=lat)
    Y = SpectrumState.from_modes(lat, {(1, 0): 1.0})
    r = transport_rhs(Y, th, 1.0)
    assert r[lat.index((1, 0))] == pytest.approx(-8 * PI2)
    assert r[lat.index((1, 1))] == pytest.approx(4 * PI2)
    assert r[lat.index((1, -1))] == pytest.approx(4 * PI2)
    others = np.ones(lat.size, bool)
    for k in [(1, 0), (1, 1), (1, -1), (-1, 0), (-1, -1), (-1, 1)]:
        others[lat.index(k)] = False
    assert np.all(r[others] == 0)


def test_conservative_flux_balance_and_symmetry():
    lat = build_lattice(2, 8)
    th = make_theta("powerlaw", lattice=lat, alpha=0.5, M=2)
    op = MasterOperator(lat, th, 1.0)
    Y = random_symmetric(lat, np.random.default_rng(0))
    assert abs(op.apply(Y).sum()) <= 1e-12 * Y.sum() * op.max_rate
    # rate of j -> j + l equals rate of j + l -> j for the mirrored step
    A = op.matrix().toarray()
    off = A - np.diag(np.diag(A))
    assert np.allclose(off, off.T, atol=1e-12 * np.abs(off).max())


def test_zero_spectrum():
    lat = build_lattice(2, 3)
    th = make_theta("unit_shell", lattice=lat)
    assert np.all(transport_rhs(np.zeros(lat.size), th, 1.0, lattice=lat) == 0)


def test_transport_needs_positive_kappa():
    lat = build_lattice(2, 3)
    th = make_theta("unit_shell", lattice=lat)
    with pytest.raises(ValueError):
        transport_rhs(np.zeros(lat.size), th, 0.0, lattice=lat)


def test_heat_rhs_rules():
    lat = build_lattice(2, 4)
    th = make_theta("unit_shell", lattice=lat)
    Y = SpectrumState.from_modes(lat, {(1, 0): 1.0})
    with pytest.raises(ValueError):
        heat_rhs(Y, th, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        heat_rhs(Y, th, 1.0, -1.0, 0.1)
    # kappa = 0: pure growth 2 lam against viscous loss 8 pi^2 nu |k|^2
    op = MasterOperator(lat, th, 0.0, lam=1.0, nu=1 / (8 * PI2))
    r = op.apply(Y.values)
    assert r[lat.index((1, 0))] == pytest.approx(1.0)


def test_heat_degenerates_to_transport_bitwise():
    lat = build_lattice(2, 6)
    th = make_theta("unit_shell", lattice=lat)
    Y = random_symmetric(lat, np.random.default_rng(5))
    a = MasterOperator(lat, th, 1.0, lam=0.0, nu=0.0).apply(Y)
    b = transport_rhs(Y, th, 1.0, lattice=lat)
    assert np.array_equal(a, b)


def test_spectrum_state_validation():
    lat = build_lattice(2, 2)
    with pytest.raises(ValueError):
        SpectrumState(lat, np.ones(lat.size - 1))
    y = np.ones(lat.size)
    y[0] = -1
    y[-1] = -1
    with pytest.raises(ValueError):
        SpectrumState(lat, y)
    y = np.arange(lat.size, dtype=float)
    with pytest.raises(ValueError):
        SpectrumState(lat, y)


def test_spectrum_norms_examples():
    lat = build_lattice(2, 3)
    Y = np.zeros(lat.size)
    Y[lat.index((1, 0))] = 1.0
    n = spectrum_norms(Y, [1.5, 2, 7], [-1.0], lattice=lat)
    assert n["H-1"] == pytest.approx(1 / (4 * PI2))
    assert n["l1.5"] == pytest.approx(1.0) and n["l7"] == pytest.approx(1.0)
    U = np.zeros(lat.size)
    U[:8] = 1.0
    assert spectrum_norms(U, [2], lattice=lat)["l2"] == pytest.approx(math.sqrt(8))
    with pytest.raises(ValueError):
        spectrum_norms(U, [0.5], lattice=lat)


def test_integrate_single_mode_without_gains():
    lat = build_lattice(2, 3)
    th = make_theta("unit_shell", lattice=lat)
    op = MasterOperator(lat, th, 1.0, policy=TruncationPolicy("absorbing"))
    op.w[:] = 0.0
    Y0 = SpectrumState.from_modes(lat, {(1, 1): 1.0})
    tr = integrate(Y0, op, 0.01, DtPolicy(dt=1e-4))
    i = lat.index((1, 1))
    assert tr.final.values[i] == pytest.approx(math.exp(-16 * PI2 * 0.01), rel=1e-9)


def test_integrate_conserves_mass():
    lat = build_lattice(2, 12)
    th = make_theta("unit_shell", lattice=lat)
    tr = integrate(SpectrumState.ball(lat, 2), MasterOperator(lat, th, 1.0), 0.01)
    m = tr.records["sum_Y"]
    assert np.max(np.abs(m - m[0])) <= 1e-10 * m[0]


def test_integrate_matches_matrix_exponential():
    lat = build_lattice(2, 6)
    th = make_theta("unit_shell", lattice=lat)
    op = MasterOperator(lat, th, 1.0, policy=TruncationPolicy("absorbing"))
    Y0 = SpectrumState.ball(lat, 2)
    tr = integrate(Y0, op, 0.005, DtPolicy(safety=0.25))
    exact = spla.expm_multiply(op.matrix() * 0.005, Y0.values)
    assert np.allclose(tr.final.values, exact, rtol=1e-6, atol=1e-12)


def test_integrate_reports_blowup():
    lat = build_lattice(2, 3)
    th = make_theta("unit_shell", lattice=lat)
    op = MasterOperator(lat, th, 1.0)
    with pytest.raises(IntegrationError):
        integrate(SpectrumState.ball(lat, 2), op, 1.0, DtPolicy(dt=0.5))
    with pytest.raises(ValueError):
        integrate(SpectrumState.ball(lat, 2), op, 0.0)


def test_fit_decay_rate_examples():
    t = np.linspace(0, 1, 50)
    f = fit_decay_rate(t, np.exp(-3 * t))
    assert f.fitted_rate == pytest.approx(3.0, abs=1e-9)
    g = fit_decay_rate(t, 5 * np.exp(-3 * t))
    assert g.intercept == pytest.approx(math.log(5))
    t2 = np.linspace(0, 3, 200)
    late = fit_decay_rate(t2, np.exp(-3 * t2) + np.exp(-10 * t2), window=(2.0, 3.0))
    assert abs(late.fitted_rate - 3.0) < 1e-3
    with pytest.raises(ValueError):
        fit_decay_rate(t[:5], np.exp(-t[:5]))
    with pytest.raises(ValueError):
        fit_decay_rate(t, -np.exp(-t))


def test_theoretical_bound_examples():
    c = mixing_constants(make_theta("unit_shell", d=2), kappa=1.0)
    assert theoretical_bounds(c, "lp_spectrum", p=2).rate == pytest.approx(PI2 / 4)
    heat = theoretical_bounds(c, "heat_energy", lam=1.0, nu=0.01)
    assert heat.rate == pytest.approx(-2 + 8 * PI2 * 0.01 + PI2 / 4)
    assert heat.rate == pytest.approx(1.257, abs=1e-3)
    assert heat.prefactor == pytest.approx(4.125, abs=1e-3)
    h1 = theoretical_bounds(c, "h1_growth")
    assert h1.rate == pytest.approx(-8 * PI2) and h1.exact
    with pytest.raises(ValueError):
        theoretical_bounds(c, "negative_sobolev", beta=0.25, epsilon=1.0)
    neg = theoretical_bounds(c, "negative_sobolev", beta=0.25)
    assert neg.prefactor is None
    with pytest.raises(ValueError):
        neg(0.1)


def test_drift_zero_and_flag():
    lat = build_lattice(2, 4)
    th = make_theta("unit_shell", lattice=lat)
    assert h_minus1_drift(np.zeros(lat.size), th, 1.0, lat).value == 0.0
    edge = SpectrumState.from_modes(lat, {(4, 0): 1.0})
    assert h_minus1_drift(edge, th, 1.0).touches_boundary
