import math

import numpy as np
import pytest

from transmix.lattice import (
    Lattice,
    basis_vectors,
    build_lattice,
    lex_representative,
    make_theta,
    mixing_constants,
    perp_proj_sq,
    shell_points,
)


def test_box_layout_and_mirror():
    lat = build_lattice(2, 3)
    assert lat.size == 48
    assert np.array_equal(lat.points[lat.mirror(np.arange(lat.size))], -lat.points)
    reps = lat.points[lat.representatives]
    first = np.array([k[np.flatnonzero(k)[0]] for k in reps])
    assert np.all(first > 0)


def test_ids_roundtrip_and_outside():
    lat = build_lattice(3, 2)
    assert np.array_equal(lat.ids(lat.points), np.arange(lat.size))
    assert lat.index((0, 0, 0)) == -1
    assert lat.index((3, 0, 0)) == -1
    assert lat.index((-2, 2, 1)) >= 0


def test_lattice_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Lattice(1, 4)
    with pytest.raises(ValueError):
        Lattice(2, 0)


def test_unit_shell_theta():
    th = make_theta("unit_shell", d=2)
    assert sorted(map(tuple, th.steps)) == [(-1, 0), (0, -1), (0, 1), (1, 0)]
    assert np.allclose(th.values, 0.5)
    assert th.hnorm(-1) == pytest.approx(1.0)
    assert th.hnorm(1) == pytest.approx(1.0)


def test_theta_steps_are_mirror_ordered():
    th = make_theta("powerlaw", d=2, alpha=0.5, M=4)
    m = len(th.steps)
    assert np.array_equal(th.steps[::-1], -th.steps)
    assert np.sum(th.values**2) == pytest.approx(1.0)
    assert th.values[0] == th.values[m - 1]


def test_shells_is_a_ball():
    th = make_theta("shells", d=2, R=math.sqrt(2))
    assert len(th.steps) == 8
    assert np.allclose(th.values, th.values[0])


def test_powerlaw_weights():
    th = make_theta("powerlaw", d=2, alpha=1.0, M=3)
    d = th.as_dict()
    # theta ~ |k|^-(1+alpha) = |k|^-2
    assert d[(2, 0)] / d[(1, 0)] == pytest.approx(0.25)
    assert d[(1, 1)] / d[(1, 0)] == pytest.approx(0.5)


def test_explicit_needs_complete_shells():
    with pytest.raises(ValueError):
        make_theta("explicit", d=2, values={(1, 0): 1.0, (-1, 0): 1.0})
    th = make_theta("explicit", d=2, values={(1, 0): 1, (-1, 0): 1, (0, 1): 1, (0, -1): 1})
    assert np.allclose(th.values, 0.5)


def test_support_must_fit_box():
    with pytest.raises(ValueError):
        make_theta("powerlaw", lattice=build_lattice(2, 2), alpha=0.5, M=4)


def test_theta_csv_header():
    text = make_theta("unit_shell", d=3).to_csv()
    assert text.splitlines()[0] == "k1,k2,k3,theta"
    assert len(text.splitlines()) == 7


def test_shell_points_count():
    assert len(shell_points(2, 5)) == 8
    assert len(shell_points(3, 1)) == 6


def test_mixing_constants_unit_shell_d2():
    c = mixing_constants(make_theta("unit_shell", d=2), kappa=1.0)
    assert c.c_theta == pytest.approx(math.pi**2)
    assert c.d_theta == pytest.approx(math.pi**2 / 4)
    assert c.t0 == pytest.approx(1.98e-5, rel=2e-3)


def test_mixing_constants_d_vs_c():
    for d in (2, 3):
        c = mixing_constants(make_theta("unit_shell", d=d))
        assert c.d_theta <= c.c_theta / 4 * (1 + 1e-12)


def test_mixing_constants_kappa_positive():
    with pytest.raises(ValueError):
        mixing_constants(make_theta("unit_shell", d=2), kappa=0.0)


@pytest.mark.parametrize("k", [(1, 0), (2, -3), (0, 1, 1), (3, -1, 2), (1, 2, 3, 4)])
def test_basis_vectors_are_an_orthonormal_complement(k):
    k = np.array(k)
    B = basis_vectors(k)
    assert B.shape == (len(k) - 1, len(k))
    assert np.allclose(B @ B.T, np.eye(len(k) - 1), atol=1e-14)
    assert np.allclose(B @ k, 0, atol=1e-13)
    assert np.array_equal(basis_vectors(-k), B)


def test_lex_representative():
    rep, sign = lex_representative((0, -2, 1))
    assert tuple(rep) == (0, 2, -1) and sign == -1


def test_perp_projection_exact():
    assert perp_proj_sq((1, 0), (0, 1)) == 1.0
    assert perp_proj_sq((1, 1), (1, 0)) == 1.0
    assert perp_proj_sq((2, 2), (1, 1)) == 0.0
    with pytest.raises(ValueError):
        perp_proj_sq((1, 0), (0, 0))
