"""Truncated integer lattice, radially symmetric noise coefficients and frames.

Wavenumbers live in the sup-norm box ``0 < |k|_inf <= N`` of Z^d, stored in
lexicographic order.  With that ordering the mirror of id ``i`` is
``size - 1 - i`` and the lexicographically positive representatives are the
upper half of the ids, which the rest of the package relies on.
"""
from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class Lattice:
    """Nonzero points of Z^d with sup-norm at most ``N``."""

    def __init__(self, d: int, N: int):
        if int(d) != d or d < 2:
            raise ValueError(f"dimension must be an integer >= 2, got {d}")
        if int(N) != N or N < 1:
            raise ValueError(f"box half-width must be an integer >= 1, got {N}")
        self.d = int(d)
        self.N = int(N)
        self.width = 2 * self.N + 1
        grid = np.array(list(itertools.product(range(-N, N + 1), repeat=d)), dtype=np.int64)
        centre = (self.width**d - 1) // 2
        self.points = np.delete(grid, centre, axis=0)
        self.points.setflags(write=False)
        self.size = len(self.points)
        self.norm_sq = np.einsum("ij,ij->i", self.points, self.points)
        self.sup_norm = np.abs(self.points).max(axis=1)
        self._strides = self.width ** np.arange(d - 1, -1, -1)
        self._centre = centre

    def __repr__(self):
        return f"Lattice(d={self.d}, N={self.N})"

    def __eq__(self, other):
        return isinstance(other, Lattice) and (self.d, self.N) == (other.d, other.N)

    def __hash__(self):
        return hash((self.d, self.N))

    @property
    def representatives(self) -> np.ndarray:
        """Ids whose first nonzero coordinate is positive."""
        return np.arange(self.size // 2, self.size)

    def mirror(self, ids):
        return self.size - 1 - np.asarray(ids)

    def ids(self, pts) -> np.ndarray:
        """Lattice ids of integer points (shape (..., d)); -1 outside the box or at 0."""
        pts = np.asarray(pts, dtype=np.int64)
        inside = (np.abs(pts) <= self.N).all(axis=-1)
        flat = (pts + self.N) @ self._strides
        out = np.where(flat > self._centre, flat - 1, flat)
        out = np.where(inside & (flat != self._centre), out, -1)
        return out

    def index(self, k: Sequence[int]) -> int:
        return int(self.ids(np.asarray(k)))

    def boundary_band(self, margin: int) -> np.ndarray:
        """Boolean mask of points within ``margin`` layers of the box edge."""
        return self.sup_norm > self.N - margin


def build_lattice(d: int, N: int) -> Lattice:
    return Lattice(d, N)


def shell_points(d: int, r2: int) -> np.ndarray:
    """All integer points with |k|^2 == r2, lexicographic."""
    R = math.isqrt(r2)
    rng = range(-R, R + 1)
    pts = [p for p in itertools.product(rng, repeat=d) if sum(c * c for c in p) == r2]
    return np.array(pts, dtype=np.int64).reshape(-1, d)


@dataclass(frozen=True, eq=False)
class Theta:
    """Radially symmetric, l2-normalized noise coefficients with finite support.

    ``steps`` holds the support in lexicographic order (negatives first) so
    that the mirror of step ``s`` is ``len(steps) - 1 - s``.
    """

    d: int
    steps: np.ndarray
    values: np.ndarray
    family: str = "explicit"
    params: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def support_radius(self) -> float:
        return float(np.sqrt((self.steps**2).sum(axis=1).max()))

    @property
    def support_sup(self) -> int:
        return int(np.abs(self.steps).max())

    @property
    def norm_sq(self) -> np.ndarray:
        return (self.steps**2).sum(axis=1)

    @property
    def representatives(self) -> np.ndarray:
        m = len(self.steps)
        return np.arange(m // 2, m)

    def hnorm(self, beta: float) -> float:
        beta = float(beta)
        if beta not in self._cache:
            # sum shell by shell in increasing radius so the result does not
            # depend on how the support is enumerated
            r2 = self.norm_sq
            total = 0.0
            for r in np.unique(r2):
                sel = r2 == r
                total += float(np.sum(self.values[sel] ** 2)) * float(r) ** beta
            self._cache[beta] = total
        return self._cache[beta]

    def as_dict(self) -> dict:
        return {tuple(int(c) for c in k): float(v) for k, v in zip(self.steps, self.values)}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"k{i + 1}" for i in range(self.d)] + ["theta"])
        for k, v in zip(self.steps, self.values):
            w.writerow([int(c) for c in k] + [repr(float(v))])
        return buf.getvalue()


def theta_hnorm(theta: Theta, beta: float) -> float:
    """Squared weighted norm: sum of theta_k^2 |k|^(2 beta)."""
    return theta.hnorm(beta)


def _from_shell_weights(d, weights: dict, family, params) -> Theta:
    """Build from {|k|^2: unnormalized value}, normalizing in l2."""
    steps, vals = [], []
    for r2 in sorted(weights):
        pts = shell_points(d, r2)
        steps.append(pts)
        vals.append(np.full(len(pts), float(weights[r2])))
    steps = np.concatenate(steps)
    vals = np.concatenate(vals)
    keep = vals > 0
    steps, vals = steps[keep], vals[keep]
    if len(steps) == 0:
        raise ValueError("noise coefficients have empty support")
    order = np.lexsort(steps.T[::-1])
    steps, vals = steps[order], vals[order]
    vals = vals / np.sqrt(np.sum(vals**2))
    steps.setflags(write=False)
    vals.setflags(write=False)
    return Theta(d, steps, vals, family, dict(params))


def make_theta(family: str, lattice: Lattice | None = None, d: int | None = None, **params) -> Theta:
    """Construct coefficients for one of the supported families.

    ``unit_shell``: equal weights on the 2d unit vectors.
    ``shells`` (``R``): equal weights on every point with 0 < |k| <= R.
    ``powerlaw`` (``alpha``, ``M``): weights |k|^-(1+alpha) for 0 < |k| <= M.
    ``explicit`` (``values``): mapping or rows ``(k..., value)``; must be
    constant on each sphere |k|^2 = const and complete on it.
    """
    if d is None:
        if lattice is None:
            raise ValueError("need a lattice or a dimension")
        d = lattice.d
    if family == "unit_shell":
        th = _from_shell_weights(d, {1: 1.0}, family, params)
    elif family == "shells":
        R = float(params["R"])
        if R < 1:
            raise ValueError("shells radius must be >= 1")
        r2max = math.floor(R * R + 1e-9)
        th = _from_shell_weights(d, {r2: 1.0 for r2 in range(1, r2max + 1)}, family, params)
    elif family == "powerlaw":
        alpha, M = float(params["alpha"]), float(params["M"])
        if alpha < 0 or M < 1:
            raise ValueError("powerlaw needs alpha >= 0 and M >= 1")
        r2max = math.floor(M * M + 1e-9)
        th = _from_shell_weights(
            d, {r2: r2 ** (-(1 + alpha) / 2) for r2 in range(1, r2max + 1)}, family, params
        )
    elif family == "explicit":
        th = _explicit(d, params["values"], params)
    else:
        raise ValueError(f"unknown noise family {family!r}")
    if lattice is not None and th.support_sup > lattice.N:
        raise ValueError(
            f"noise support (sup-norm {th.support_sup}) exceeds the lattice box N={lattice.N}"
        )
    return th


def _explicit(d, values, params) -> Theta:
    if isinstance(values, dict):
        items = [(tuple(int(c) for c in k), float(v)) for k, v in values.items()]
    else:
        items = [(tuple(int(c) for c in row[:-1]), float(row[-1])) for row in values]
    given = {}
    for k, v in items:
        if len(k) != d:
            raise ValueError(f"wavenumber {k} has wrong dimension (expected {d})")
        if not any(k):
            raise ValueError("zero wavenumber cannot carry noise")
        if v < 0:
            raise ValueError(f"negative coefficient at {k}")
        given[k] = v
    by_shell: dict[int, float] = {}
    for k, v in given.items():
        r2 = sum(c * c for c in k)
        if v == 0:
            continue
        by_shell.setdefault(r2, v)
    for r2, v in by_shell.items():
        for p in shell_points(d, r2):
            got = given.get(tuple(int(c) for c in p), 0.0)
            if not math.isclose(got, v, rel_tol=1e-12, abs_tol=0.0):
                raise ValueError(
                    f"explicit coefficients are not radially symmetric on |k|^2={r2}: "
                    f"{tuple(int(c) for c in p)} has {got}, expected {v}"
                )
    if not by_shell:
        raise ValueError("noise coefficients have empty support")
    return _from_shell_weights(d, by_shell, "explicit", params)


@dataclass(frozen=True)
class MixingConstants:
    d: int
    kappa: float
    c_d: float
    c_theta: float
    d_theta: float
    h_minus1: float
    h_plus1: float
    t0: float


def mixing_constants(theta: Theta, d: int | None = None, kappa: float = 1.0) -> MixingConstants:
    d = theta.d if d is None else int(d)
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    hm, hp = theta.hnorm(-1.0), theta.hnorm(1.0)
    c_d = d / (d - 1)
    pi2 = math.pi**2
    if d == 2:
        c_theta = pi2 * hm
        d_theta = pi2 * hm / 4
    else:
        c_theta = 2 * pi2 / 5 * c_d * hm
        if d == 3:
            d_theta = 3 / 20 * pi2 * hm
        else:
            d_theta = 4 / 5 * (d - 3) / (d * (d - 1)) * pi2 * hm
    t0 = ((math.sqrt(11) - 3) / 16) ** 2 / (pi2 * d * kappa * hp)
    return MixingConstants(d, float(kappa), c_d, c_theta, d_theta, hm, hp, t0)


def lex_representative(k) -> tuple[np.ndarray, int]:
    """Return (rep, sign) with rep = sign * k lexicographically positive."""
    k = np.asarray(k)
    nz = np.flatnonzero(k)
    if len(nz) == 0:
        raise ValueError("the zero vector has no orthogonal frame")
    sign = 1 if k[nz[0]] > 0 else -1
    return sign * k, sign


def basis_vectors(k, d: int | None = None) -> np.ndarray:
    """Orthonormal basis of the complement of ``k``, shape (d-1, d).

    Gram-Schmidt of the canonical vectors (skipping the first nonzero
    coordinate of the representative) against the representative of {k, -k},
    so ``k`` and ``-k`` get the same frame.
    """
    k = np.asarray(k, dtype=np.int64)
    if d is not None and len(k) != d:
        raise ValueError("dimension mismatch")
    rep, _ = lex_representative(k)
    d = len(rep)
    pivot = int(np.flatnonzero(rep)[0])
    u = rep / np.sqrt(float(rep @ rep))
    frame = [u]
    for j in range(d):
        if j == pivot:
            continue
        v = np.zeros(d)
        v[j] = 1.0
        for _ in range(2):
            for q in frame:
                v = v - (v @ q) * q
        frame.append(v / np.sqrt(v @ v))
    return np.array(frame[1:])


def frames_for(steps: np.ndarray) -> np.ndarray:
    """Frames for each row of ``steps``, shape (m, d-1, d)."""
    return np.array([basis_vectors(s) for s in steps])


def perp_proj_sq(k, l) -> float:
    """|k|^2 - (k.l)^2/|l|^2, with an exact integer numerator for integer input."""
    k = [int(c) for c in k]
    l = [int(c) for c in l]
    ll = sum(c * c for c in l)
    if ll == 0:
        raise ValueError("projection direction must be nonzero")
    kk = sum(c * c for c in k)
    kl = sum(a * b for a, b in zip(k, l))
    return (kk * ll - kl * kl) / ll


def perp_proj_sq_array(points: np.ndarray, l) -> np.ndarray:
    """Vectorized ``perp_proj_sq`` over the rows of ``points``."""
    l = np.asarray(l, dtype=np.int64)
    ll = int(l @ l)
    kk = np.einsum("ij,ij->i", points, points)
    kl = points @ l
    return (kk * ll - kl * kl) / ll


def iter_points(rows: Iterable) -> list[tuple[int, ...]]:
    return [tuple(int(c) for c in r) for r in rows]
