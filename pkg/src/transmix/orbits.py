"""Discrete Poincare inequality, lattice orbits and the Dirichlet-form comparison.

For a pair of equal-length independent steps (l1, l2) every lattice point
z = a l1 + b l2 + h splits into a plane offset h and plane coordinates (a, b).
Each plane is cut into four quadrants with bases (l1, l2), (l2, -l1),
(-l1, -l2), (-l2, l1).  Inside a quadrant with basis (u, v) an orbit starts
from a point and alternately steps u, v, u, ... (class 1) or v, u, v, ...
(class 2).  Starting points are chosen so that the maximal orbits cover every
point of the plane exactly twice; when h is itself a nonzero lattice point
two extra orbits through h close the gap.

All plane coordinates are kept as integer numerators over the Gram
determinant, so membership tests are exact.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .lattice import Lattice, Theta, build_lattice, perp_proj_sq_array


def poincare_gap(a: Sequence[float], p: float) -> tuple[float, float]:
    """Both sides of sum a_n^p <= 2p^2/(p-1) sum (n+1)^2 (a_{n+1}^{p-1}-a_n^{p-1})(a_{n+1}-a_n).

    ``a`` is finitely supported (zero after its last entry).  Signed entries
    are allowed only for p = 2.
    """
    if not p > 1:
        raise ValueError("p must be > 1")
    x = np.append(np.asarray(a, dtype=float), 0.0)
    if p != 2 and np.any(x < 0):
        raise ValueError("negative entries are only allowed for p = 2")
    lhs = float(np.sum(np.abs(x) ** p)) if p != 2 else float(np.sum(x * x))
    n = np.arange(1, len(x), dtype=float)
    if p == 2:
        diffs = (x[1:] - x[:-1]) ** 2
    else:
        q = x ** (p - 1)
        diffs = (q[1:] - q[:-1]) * (x[1:] - x[:-1])
    rhs = 2 * p * p / (p - 1) * float(np.sum(n * n * diffs))
    return lhs, rhs


# quadrant i: (basis u, basis v) as signed picks from (l1, l2), and the
# coordinates (alpha, beta) of a point in that basis from (a, b)
_QUADRANTS = {
    1: ((1, 0), (0, 1), lambda a, b: (a, b)),
    2: ((0, 1), (-1, 0), lambda a, b: (b, -a)),
    3: ((-1, 0), (0, -1), lambda a, b: (-a, -b)),
    4: ((0, -1), (1, 0), lambda a, b: (-b, a)),
}


def _pick(sel, l1, l2):
    return tuple(sel[0] * x + sel[1] * y for x, y in zip(l1, l2))


@dataclass
class Orbit:
    points: np.ndarray
    first: tuple
    second: tuple
    cls: int
    quadrant: int
    plane: tuple
    special: bool = False

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.points, axis=0)


@dataclass
class QuadrantDecomposition:
    """Exact plane coordinates for one plane S_h and its starting sets."""

    l1: tuple
    l2: tuple
    det: int
    plane: tuple
    h: np.ndarray
    h_is_lattice: bool
    starts: dict = field(default_factory=dict)


@dataclass
class OrbitFamily:
    lattice: Lattice
    l1: tuple
    l2: tuple
    planes: dict
    orbits: list

    @property
    def step_norm(self) -> float:
        return math.sqrt(sum(c * c for c in self.l1))

    def to_rows(self):
        for oid, o in enumerate(self.orbits):
            kind = f"{'special' if o.special else 'regular'}{o.cls}"
            for n, pt in enumerate(o.points):
                yield [oid, kind, o.quadrant, n] + [int(c) for c in pt]


def _coords(points: np.ndarray, l1, l2):
    l1 = np.asarray(l1, dtype=np.int64)
    l2 = np.asarray(l2, dtype=np.int64)
    g11, g12, g22 = int(l1 @ l1), int(l1 @ l2), int(l2 @ l2)
    det = g11 * g22 - g12 * g12
    A = points @ l1
    B = points @ l2
    a_num = g22 * A - g12 * B
    b_num = g11 * B - g12 * A
    key = det * points - np.outer(a_num, l1) - np.outer(b_num, l2)
    return a_num, b_num, key, det


def _is_start(cls, al, be, det):
    if cls == 1:
        return (al > 0 and 0 < be < det) or (al == 0 and be > 0)
    return (be > 0 and 0 < al < det) or (be == 0 and al > 0)


def _walk(z, u, v, N, limit):
    pts = [z]
    cur = z
    n = 0
    while n < limit:
        step = u if n % 2 == 0 else v
        cur = tuple(c + s for c, s in zip(cur, step))
        if max(abs(c) for c in cur) > N:
            break
        pts.append(cur)
        n += 1
    return pts


def _build(l1, l2, lattice: Lattice) -> OrbitFamily:
    l1 = tuple(int(c) for c in l1)
    l2 = tuple(int(c) for c in l2)
    d = lattice.d
    if len(l1) != d or len(l2) != d:
        raise ValueError("step vectors must match the lattice dimension")
    n1, n2 = sum(c * c for c in l1), sum(c * c for c in l2)
    if n1 == 0 or n2 == 0:
        raise ValueError("step vectors must be nonzero")
    if n1 != n2:
        raise ValueError("step vectors must have equal length")
    a_num, b_num, key, det = _coords(lattice.points, l1, l2)
    if det == 0:
        raise ValueError("step vectors are parallel")
    N = lattice.N
    limit = 8 * N * d + 8
    planes: dict = {}
    keys = [tuple(int(c) for c in row) for row in key]
    for i, kk in enumerate(keys):
        if kk not in planes:
            h = np.asarray(kk, dtype=float) / det
            is_lat = all(c % det == 0 for c in kk) and any(kk)
            planes[kk] = QuadrantDecomposition(l1, l2, det, kk, h, is_lat,
                                               {(q, c): [] for q in _QUADRANTS for c in (1, 2)})
        a, b = int(a_num[i]), int(b_num[i])
        for q, (_, _, to_ab) in _QUADRANTS.items():
            al, be = to_ab(a, b)
            if al < 0 or be < 0 or (al == 0 and be == 0):
                continue
            for c in (1, 2):
                if _is_start(c, al, be, det):
                    planes[kk].starts[(q, c)].append(tuple(int(x) for x in lattice.points[i]))
    orbits = []
    for kk in sorted(planes):
        dec = planes[kk]
        special_at = {}
        if dec.h_is_lattice:
            h = tuple(c // det for c in kk)
            special_at[(1, tuple(x + y for x, y in zip(h, l2)))] = h
            special_at[(2, tuple(x + y for x, y in zip(h, l1)))] = h
        for q, (su, sv, _) in _QUADRANTS.items():
            u, v = _pick(su, l1, l2), _pick(sv, l1, l2)
            for c in (1, 2):
                first, second = (u, v) if c == 1 else (v, u)
                for z in dec.starts[(q, c)]:
                    pts = _walk(z, first, second, N, limit)
                    h = special_at.get((c, z)) if q == 1 else None
                    if h is not None and max(abs(x) for x in h) <= N:
                        # prepend h: the orbit now opens with the other step
                        orbits.append(Orbit(np.array([h] + pts, dtype=np.int64),
                                            second, first, c, q, kk, True))
                    else:
                        orbits.append(Orbit(np.array(pts, dtype=np.int64), first, second, c, q, kk))
        # a lattice offset with h in the box but neither neighbour in the box
        # still needs its two special orbits
        if dec.h_is_lattice:
            h = tuple(x // det for x in kk)
            if max(abs(x) for x in h) <= N:
                for c, nb in ((1, tuple(x + y for x, y in zip(h, l2))), (2, tuple(x + y for x, y in zip(h, l1)))):
                    if max(abs(x) for x in nb) > N:
                        first, second = (l2, l1) if c == 1 else (l1, l2)
                        orbits.append(Orbit(np.array([h], dtype=np.int64), first, second, c, 1, kk, True))
    return OrbitFamily(lattice, l1, l2, planes, orbits)


def build_orbits_2d(l, box: int | Lattice) -> OrbitFamily:
    """Orbits of Z^2 in the box for the pair (l, l_perp), l_perp = (-l_2, l_1)."""
    lattice = box if isinstance(box, Lattice) else build_lattice(2, box)
    if lattice.d != 2:
        raise ValueError("build_orbits_2d needs a 2-D box")
    l = tuple(int(c) for c in l)
    if l == (0, 0):
        raise ValueError("step vector must be nonzero")
    return _build(l, (-l[1], l[0]), lattice)


def build_orbits_hd(l1, l2, box: int | Lattice, d: int | None = None) -> OrbitFamily:
    """Orbits on every plane a l1 + b l2 + h meeting the box (d >= 3)."""
    if isinstance(box, Lattice):
        lattice = box
    else:
        lattice = build_lattice(d if d is not None else len(l1), box)
    if lattice.d < 3:
        raise ValueError("build_orbits_hd needs d >= 3")
    return _build(l1, l2, lattice)


@dataclass
class CoverReport:
    multiplicity: np.ndarray
    certified: np.ndarray
    violations: list
    truncation_frontier: int
    certified_radius: float

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json(self) -> str:
        return json.dumps({
            "certified_points": int(self.certified.sum()),
            "certified_radius": self.certified_radius,
            "violations": [[list(p), int(m)] for p, m in self.violations],
            "truncation_frontier": self.truncation_frontier,
            "ok": self.ok,
        }, indent=2, sort_keys=True)


def cover_multiplicity(family: OrbitFamily, margin: int = 3) -> CoverReport:
    """Count orbit visits per lattice point and check multiplicity 2 where certified.

    A point is certified when every orbit segment that could cover it lies in
    the box: |h| + gamma |z - h| <= N, with gamma = 1 for l1.l2 >= 0 and
    sqrt(2/(1+cos)) otherwise, and additionally |z|_inf <= N - margin |l1|.
    """
    lat = family.lattice
    counts = np.zeros(lat.size, dtype=np.int64)
    for o in family.orbits:
        np.add.at(counts, lat.ids(o.points), 1)
    l1 = np.asarray(family.l1, dtype=float)
    l2 = np.asarray(family.l2, dtype=float)
    cos = float(l1 @ l2) / float(l1 @ l1)
    gamma = 1.0 if cos >= 0 else math.sqrt(2 / (1 + cos))
    a_num, b_num, key, det = _coords(lat.points, family.l1, family.l2)
    h = key / det
    hn = np.sqrt((h**2).sum(axis=1))
    rn = np.sqrt(((lat.points - h) ** 2).sum(axis=1))
    radius = lat.N - margin * family.step_norm
    cert = (hn + gamma * rn <= lat.N + 1e-9) & (lat.sup_norm <= radius)
    bad = np.flatnonzero(cert & (counts != 2))
    violations = [(tuple(int(c) for c in lat.points[i]), int(counts[i])) for i in bad]
    frontier = int(np.sum(~cert & (counts != 2)))
    return CoverReport(counts, cert, violations, frontier, float(radius))


def projection_bound_margin(orbit: Orbit) -> float:
    """min over n of |P_step O(n)|^2 * denom / (n+1)^2, denom = 4|l|^2 (5|l|^2 for special orbits).

    The claimed lower bound holds when the result is >= 1; +inf for a single-point orbit.
    """
    pts = orbit.points
    if len(pts) < 2:
        return math.inf
    ll = int(sum(c * c for c in orbit.first))
    denom = (5 if orbit.special else 4) * ll
    best = math.inf
    for n in range(len(pts) - 1):
        z = [int(c) for c in pts[n]]
        s = [int(a) - int(b) for a, b in zip(pts[n + 1], pts[n])]
        ss = sum(c * c for c in s)
        zs = sum(a * b for a, b in zip(z, s))
        zz = sum(c * c for c in z)
        num = (zz * ss - zs * zs) * denom
        best = min(best, num / (ss * (n + 1) ** 2))
    return best


class DirichletRatio(NamedTuple):
    dirichlet: float
    power_sum: float
    ratio: float


def dirichlet_bound(theta: Theta, p: float, d: int | None = None) -> float:
    """Certified ceiling for sum Y^p / D(Y): 8p^2/((p-1) h) in 2-D, 10p^2/((p-1) h) above."""
    d = theta.d if d is None else d
    c = 8 if d == 2 else 10
    return c * p * p / ((p - 1) * theta.hnorm(-1.0))


def dirichlet_ratio(Y, theta: Theta, p: float, lattice: Lattice | None = None) -> DirichletRatio:
    """D(Y) = sum_l sum_k theta_l^2 |P_l k|^2 (Y_{k+l}^{p-1} - Y_k^{p-1})(Y_{k+l} - Y_k).

    ``Y`` must vanish within sup-distance of the noise support from the box edge.
    ``ratio`` is nan when D(Y) = 0.
    """
    if hasattr(Y, "values"):
        lattice, y = Y.lattice, np.asarray(Y.values, dtype=float)
    else:
        y = np.asarray(Y, dtype=float)
    if not p > 1:
        raise ValueError("p must be > 1")
    if np.any(y < 0):
        raise ValueError("Y must be nonnegative")
    reach = theta.support_sup
    if np.any(y[lattice.sup_norm > lattice.N - reach] != 0):
        raise ValueError("Y must be supported at least one noise step inside the box")
    dst, w = _dirichlet_stencil(lattice, theta)
    D = kernels.dirichlet_sum(np.ascontiguousarray(y), dst, w, float(p))
    S = float(np.sum(y**p))
    ratio = S / D if D > 0 else math.nan
    return DirichletRatio(D, S, ratio)


_STENCILS: dict = {}


def _dirichlet_stencil(lattice: Lattice, theta: Theta):
    key = (lattice, id(theta))
    if key not in _STENCILS:
        m = len(theta.steps)
        dst = np.empty((m, lattice.size), dtype=np.int64)
        w = np.empty((m, lattice.size))
        for s, (l, th) in enumerate(zip(theta.steps, theta.values)):
            dst[s] = lattice.ids(lattice.points + l)
            w[s] = th**2 * perp_proj_sq_array(lattice.points, l)
        _STENCILS[key] = (dst, w, theta)
    dst, w, _ = _STENCILS[key]
    return dst, w
