"""Second-moment spectrum Y_k = E|u_k|^2 under the lattice master equation.

Mass hops from k-l to k at rate 8 pi^2 C_d kappa theta_l^2 |P_l k|^2, where
|P_l k|^2 is the squared component of k orthogonal to l.  Two truncations to
the finite box are supported: ``conservative`` keeps only hops with both
endpoints inside (so total mass is conserved), ``absorbing`` keeps the full
loss on every mode and only in-box gains (matching the Galerkin truncation
used by the Monte Carlo code).
"""
from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .lattice import Lattice, MixingConstants, Theta, perp_proj_sq_array

PI2 = math.pi**2


@dataclass
class TruncationPolicy:
    mode: str = "conservative"
    boundary_margin: int = 2

    def __post_init__(self):
        if self.mode not in ("conservative", "absorbing"):
            raise ValueError(f"unknown truncation mode {self.mode!r}")
        if self.boundary_margin < 1:
            raise ValueError("boundary margin must be >= 1")


@dataclass
class SpectrumState:
    lattice: Lattice
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.lattice.size,):
            raise ValueError("spectrum length does not match the lattice")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrum contains non-finite values")
        if np.any(self.values < 0):
            raise ValueError("second moments must be nonnegative")
        mirrored = self.values[::-1]
        if not np.allclose(self.values, mirrored, rtol=1e-12, atol=0.0):
            raise ValueError("spectrum is not symmetric under k -> -k")

    @classmethod
    def from_modes(cls, lattice: Lattice, modes: dict, t: float = 0.0) -> "SpectrumState":
        """Place the given values at k and -k."""
        Y = np.zeros(lattice.size)
        for k, v in modes.items():
            i = lattice.index(k)
            if i < 0:
                raise ValueError(f"mode {k} is outside the box")
            Y[i] = v
            Y[lattice.size - 1 - i] = v
        return cls(lattice, Y, t)

    @classmethod
    def ball(cls, lattice: Lattice, r2: int, total: float = 1.0) -> "SpectrumState":
        """Uniform spectrum on 0 < |k|^2 <= r2 with the given total mass."""
        Y = (lattice.norm_sq <= r2).astype(float)
        return cls(lattice, Y * (total / Y.sum()))


class MasterOperator:
    """Linear generator of the truncated master equation, with optional heat terms.

    dY_k/dt = diag_k Y_k + sum_s w[s, k] Y[src[s, k]], evaluated by the
    compiled stencil kernel when it is available.
    """

    def __init__(self, lattice: Lattice, theta: Theta, kappa: float, lam: float = 0.0,
                 nu: float = 0.0, policy: TruncationPolicy | None = None):
        if theta.d != lattice.d:
            raise ValueError("noise and lattice dimensions differ")
        if theta.support_sup > lattice.N:
            raise ValueError("noise support exceeds the lattice box")
        if kappa < 0:
            raise ValueError("kappa must be nonnegative")
        self.lattice, self.theta = lattice, theta
        self.kappa, self.lam, self.nu = float(kappa), float(lam), float(nu)
        self.policy = policy or TruncationPolicy()
        d = lattice.d
        c_d = d / (d - 1)
        pts = lattice.points
        m = len(theta.steps)
        self.src = np.empty((m, lattice.size), dtype=np.int64)
        self.w = np.empty((m, lattice.size))
        for s, (l, th) in enumerate(zip(theta.steps, theta.values)):
            src = lattice.ids(pts - l)
            rate = 8 * PI2 * c_d * self.kappa * th**2 * perp_proj_sq_array(pts, l)
            self.src[s] = src
            self.w[s] = np.where(src >= 0, rate, 0.0)
        if self.policy.mode == "conservative":
            loss = np.zeros(lattice.size)
            for s in range(m):
                loss = loss + self.w[s]
            base = -loss
        else:
            base = -8 * PI2 * self.kappa * lattice.norm_sq
        self.diag = base + 2 * self.lam - 8 * PI2 * self.nu * lattice.norm_sq
        self.max_rate = 8 * PI2 * (self.nu + self.kappa) * float(lattice.norm_sq.max()) + 2 * self.lam

    def apply(self, Y: np.ndarray) -> np.ndarray:
        return kernels.stencil_apply(np.ascontiguousarray(Y, dtype=np.float64), self.src, self.w, self.diag)

    __call__ = apply

    def matrix(self):
        """The generator as a scipy sparse matrix (used by tests and oracles)."""
        from scipy import sparse

        n = self.lattice.size
        rows, cols, vals = [np.arange(n)], [np.arange(n)], [self.diag]
        for s in range(len(self.src)):
            ok = self.src[s] >= 0
            rows.append(np.flatnonzero(ok))
            cols.append(self.src[s][ok])
            vals.append(self.w[s][ok])
        return sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
        )


@functools.lru_cache(maxsize=32)
def _operator(lattice, theta, kappa, lam, nu, mode, margin):
    return MasterOperator(lattice, theta, kappa, lam, nu, TruncationPolicy(mode, margin))


def _values(Y):
    return Y.values if isinstance(Y, SpectrumState) else np.asarray(Y, dtype=np.float64)


def transport_rhs(Y, theta: Theta, kappa: float, policy: TruncationPolicy | None = None,
                  lattice: Lattice | None = None) -> np.ndarray:
    """Time derivative of the spectrum for the pure transport equation."""
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    lattice = Y.lattice if isinstance(Y, SpectrumState) else lattice
    policy = policy or TruncationPolicy()
    op = _operator(lattice, theta, float(kappa), 0.0, 0.0, policy.mode, policy.boundary_margin)
    return op.apply(_values(Y))


def heat_rhs(Y, theta: Theta, kappa: float, lam: float, nu: float,
             policy: TruncationPolicy | None = None, lattice: Lattice | None = None) -> np.ndarray:
    """Time derivative with the extra growth 2 lam and viscous loss 8 pi^2 nu |k|^2."""
    if not nu > 0:
        raise ValueError("viscosity nu must be positive")
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    lattice = Y.lattice if isinstance(Y, SpectrumState) else lattice
    policy = policy or TruncationPolicy()
    op = _operator(lattice, theta, float(kappa), float(lam), float(nu), policy.mode,
                   policy.boundary_margin)
    return op.apply(_values(Y))


def spectrum_norms(Y, p_list: Sequence[float] = (2.0,), beta_list: Sequence[float] = (),
                   lattice: Lattice | None = None) -> dict:
    """l^p norms of Y and the Sobolev sums sum |2 pi k|^(2 beta) Y_k."""
    lattice = Y.lattice if isinstance(Y, SpectrumState) else lattice
    y = _values(Y)
    out = {}
    for p in p_list:
        if p < 1:
            raise ValueError("p must be >= 1")
        out[f"l{p:g}"] = float(np.sum(np.abs(y) ** p) ** (1.0 / p))
    if beta_list:
        k2 = 4 * PI2 * lattice.norm_sq.astype(float)
        for b in beta_list:
            out[f"H{b:g}"] = float(np.sum(k2**b * y))
    return out


class DriftResult(tuple):
    """(value, touches_boundary)."""

    def __new__(cls, value, touches_boundary):
        return super().__new__(cls, (value, touches_boundary))

    @property
    def value(self):
        return self[0]

    @property
    def touches_boundary(self):
        return self[1]


def h_minus1_drift(Y, theta: Theta, kappa: float, lattice: Lattice | None = None) -> DriftResult:
    """Instantaneous d/dt of sum_k Y_k / |2 pi k|^2 on the infinite lattice.

    Uses the symmetrized form
    C_d kappa sum_k Y_k sum_l theta_l^2 |P_l k|^2 (1/|k+l|^2 + 1/|k-l|^2 - 2/|k|^2).
    """
    lattice = Y.lattice if isinstance(Y, SpectrumState) else lattice
    y = _values(Y)
    d = lattice.d
    live = np.flatnonzero(y)
    if len(live) == 0:
        return DriftResult(0.0, False)
    pts = lattice.points[live]
    k2 = lattice.norm_sq[live].astype(float)
    acc = np.zeros(len(live))
    for l, th in zip(theta.steps, theta.values):
        pp = perp_proj_sq_array(pts, l)
        kp = ((pts + l) ** 2).sum(axis=1).astype(float)
        km = ((pts - l) ** 2).sum(axis=1).astype(float)
        # pp vanishes exactly when k is parallel to l, which is the only way k +- l can be 0
        with np.errstate(divide="ignore", invalid="ignore"):
            bracket = np.where(pp > 0, 1 / kp + 1 / km - 2 / k2, 0.0)
        acc = acc + th**2 * pp * bracket
    value = d / (d - 1) * kappa * float(np.sum(y[live] * acc))
    band = lattice.boundary_band(theta.support_sup + 1)
    return DriftResult(value, bool(np.any(y[band] > 0)))


@dataclass
class DtPolicy:
    safety: float = 0.5
    dt: float | None = None
    sample_stride: int = 10


@dataclass
class Trajectory:
    times: np.ndarray
    records: dict
    final: SpectrumState
    dt: float
    steps: int

    def column(self, name):
        return self.records[name]

    def gated(self, threshold: float = 1e-3, weight: str = "mass") -> np.ndarray:
        """Samples whose band leakage is below ``threshold``.

        ``weight="mass"`` uses the plain band fraction of sum Y; ``"H1"`` the
        band fraction of sum |2 pi k|^2 Y, which is the relevant leakage for
        positive Sobolev norms since those are dominated by the tail.
        """
        col = "boundary_mass" if weight == "mass" else f"boundary_{weight}"
        return self.records[col] < threshold

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        names = list(self.records)
        w.writerow(["t"] + names)
        for i, t in enumerate(self.times):
            w.writerow([repr(float(t))] + [repr(float(self.records[n][i])) for n in names])
        return buf.getvalue()


class IntegrationError(RuntimeError):
    pass


def integrate(Y0: SpectrumState, rhs: MasterOperator | Callable, T: float,
              dt_policy: DtPolicy | None = None, p_list: Sequence[float] = (1.5, 3.0),
              beta_list: Sequence[float] = (-1.0, 1.0), margin: int | None = None,
              max_rate: float | None = None) -> Trajectory:
    """Classical RK4 from Y0 to time T, sampling every ``sample_stride`` steps.

    The step is ``safety * 2.5 / max_rate`` (shrunk so that T is hit exactly)
    unless ``dt_policy.dt`` is given.
    """
    if not T > 0:
        raise ValueError("T must be positive")
    pol = dt_policy or DtPolicy()
    lattice = Y0.lattice
    if max_rate is None:
        max_rate = getattr(rhs, "max_rate", None)
    if pol.dt is not None:
        dt_max = pol.dt
    elif max_rate:
        dt_max = pol.safety * 2.5 / max_rate
    else:
        raise ValueError("need an explicit dt or an operator with max_rate")
    nsteps = max(1, math.ceil(T / dt_max - 1e-9))
    dt = T / nsteps
    if margin is None:
        margin = rhs.policy.boundary_margin if hasattr(rhs, "policy") else 2
    band = lattice.boundary_band(margin)
    ps = [1.0, 2.0] + [p for p in p_list if p not in (1.0, 2.0)]
    k2 = 4 * PI2 * lattice.norm_sq.astype(float)
    powers = {b: k2**b for b in beta_list}
    pos = [b for b in beta_list if b > 0]
    names = (["sum_Y"] + [f"l{p:g}" for p in ps] + [f"H{b:g}" for b in beta_list]
             + ["boundary_mass"] + [f"boundary_H{b:g}" for b in pos])
    rows = []
    times = []

    def record(t, y):
        total = float(np.sum(y))
        row = [total]
        row += [float(np.sum(np.abs(y) ** p) ** (1 / p)) for p in ps]
        row += [float(np.sum(powers[b] * y)) for b in beta_list]
        row.append(float(np.sum(y[band])) / total if total > 0 else 0.0)
        for b in pos:
            wy = powers[b] * y
            whole = float(np.sum(wy))
            row.append(float(np.sum(wy[band])) / whole if whole > 0 else 0.0)
        rows.append(row)
        times.append(t)

    f = rhs.apply if hasattr(rhs, "apply") else rhs
    y = Y0.values.copy()
    t0 = Y0.t
    record(t0, y)
    for n in range(1, nsteps + 1):
        k1 = f(y)
        k2_ = f(y + 0.5 * dt * k1)
        k3 = f(y + 0.5 * dt * k2_)
        k4 = f(y + dt * k3)
        y = y + dt / 6.0 * (k1 + 2.0 * k2_ + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite spectrum at step {n}")
        total = float(np.sum(y))
        if float(y.min()) < -1e-14 * abs(total):
            raise IntegrationError(
                f"negative second moment {float(y.min())!r} at step {n} (total {total!r})"
            )
        if n % pol.sample_stride == 0 or n == nsteps:
            record(t0 + n * dt, y)
    recs = np.array(rows)
    records = {name: recs[:, i] for i, name in enumerate(names)}
    final = SpectrumState.__new__(SpectrumState)
    final.lattice, final.values, final.t = lattice, y, t0 + T
    return Trajectory(np.array(times), records, final, dt, nsteps)


@dataclass
class RateFit:
    window: tuple
    fitted_rate: float
    intercept: float
    residual_rms: float
    leakage_max: float = 0.0
    samples: int = 0


def fit_decay_rate(times, values, window: tuple | None = None, leakage=None) -> RateFit:
    """Least-squares slope of log(value) against t; ``fitted_rate`` is minus the slope."""
    t = np.asarray(times, dtype=float)
    v = np.asarray(values, dtype=float)
    if window is not None:
        sel = (t >= window[0]) & (t <= window[1])
        t, v = t[sel], v[sel]
        leak = None if leakage is None else np.asarray(leakage, dtype=float)[sel]
    else:
        leak = None if leakage is None else np.asarray(leakage, dtype=float)
    if len(t) < 8:
        raise ValueError(f"need at least 8 samples to fit a rate, got {len(t)}")
    if np.any(v <= 0) or not np.all(np.isfinite(v)):
        raise ValueError("rate fit needs strictly positive finite values")
    logv = np.log(v)
    tc = t - t.mean()
    slope = float(np.sum(tc * (logv - logv.mean())) / np.sum(tc * tc))
    intercept = float(logv.mean() - slope * t.mean())
    resid = logv - (intercept + slope * t)
    return RateFit(
        (float(t[0]), float(t[-1])), -slope, intercept, float(np.sqrt(np.mean(resid**2))),
        float(leak.max()) if leak is not None and len(leak) else 0.0, len(t),
    )


@dataclass
class BoundCurve:
    """prefactor * exp(-rate * t) times the initial quantity.

    ``prefactor`` is None when only the rate is known; ``exact`` marks an
    identity rather than an upper bound.
    """

    name: str
    quantity: str
    rate: float
    prefactor: float | None = 1.0
    exact: bool = False
    params: dict = field(default_factory=dict)

    def __call__(self, t, initial=1.0):
        if self.prefactor is None:
            raise ValueError(f"{self.name}: prefactor is unknown, only the rate can be checked")
        return self.prefactor * np.exp(-self.rate * np.asarray(t)) * initial


def theoretical_bounds(constants: MixingConstants, variant: str, **params) -> BoundCurve:
    """Rate/prefactor descriptors for the proven mixing and growth estimates.

    Variants:
      ``negative_sobolev``  E||u||^2_{H^-beta} decay, rate only (``beta``, optional ``epsilon``)
      ``lp_spectrum``       ||Y||_{l^p} decay (``p``), prefactor 1
      ``heat_energy``       E||u||^2_{L^2} for the heat variant (``lam``, ``nu``)
      ``h1_growth``         E||u||^2_{H^1} exact exponential growth
      ``interval_sup``      decay of E sup over windows of length t0, rate only
    """
    c, d, kappa = constants.c_theta, constants.d, constants.kappa
    if variant == "negative_sobolev":
        beta = float(params["beta"])
        if not beta > 0:
            raise ValueError("negative Sobolev decay needs beta > 0")
        if beta <= d / 4:
            top = beta * (d - 2 * beta) / d**2
            eps = float(params.get("epsilon", top / 2))
            if not 0 < eps < top:
                raise ValueError(
                    f"epsilon must lie in (0, beta(d-2beta)/d^2) = (0, {top!r}) for beta <= d/4"
                )
            rate = 2 * kappa * c * (top - eps)
            return BoundCurve(variant, f"H-{beta:g}", rate, None, params={"beta": beta, "epsilon": eps})
        return BoundCurve(variant, f"H-{beta:g}", kappa * c / 4, None, params={"beta": beta})
    if variant == "lp_spectrum":
        p = float(params["p"])
        if not p > 1:
            raise ValueError("l^p decay needs p > 1")
        return BoundCurve(variant, f"l{p:g}", kappa * c * (1 / p) * (1 - 1 / p), 1.0, params={"p": p})
    if variant == "heat_energy":
        lam, nu = float(params["lam"]), float(params["nu"])
        if not nu > 0 or lam < 0:
            raise ValueError("heat bound needs lam >= 0 and nu > 0")
        dk = constants.d_theta * kappa
        rate = -2 * lam + 8 * PI2 * nu + dk
        pref = (8 * PI2 * nu + dk) / (2 * nu) / (4 * PI2)
        return BoundCurve(variant, "L2", rate, pref, params={"lam": lam, "nu": nu})
    if variant == "h1_growth":
        return BoundCurve(variant, "H1", -8 * PI2 * kappa * constants.h_plus1, 1.0, exact=True)
    if variant == "interval_sup":
        rate = kappa * c / 4 if d <= 3 else 2 * kappa * (d - 3) * c / d**2
        return BoundCurve(variant, "H-1", rate, None)
    raise ValueError(f"unknown bound variant {variant!r}")
