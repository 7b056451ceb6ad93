"""Monte Carlo for the Fourier-mode SDE of the transport (and heat) equation.

Each representative mode k (first nonzero coordinate positive) evolves by an
exponential Euler-Maruyama step

    u_k <- E_k * (u_k + 2 pi i sqrt(C_d kappa) sum_{l,i} theta_l (a_{l,i}.k) u_{k-l} dW^{l,i})

with E_k = exp((lam - 4 pi^2 (kappa + nu) |k|^2) dt); the mirror modes are
then overwritten by complex conjugation, so the field stays real exactly.
Sources k-l outside the box are dropped (absorbing truncation).

Complex increments are dW = dB1 + i dB2 with independent real parts of
variance dt; dW^{-l} is the conjugate of dW^{l}.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .lattice import Lattice, Theta, build_lattice, frames_for, mixing_constants

PI2 = math.pi**2


@dataclass
class ModeState:
    """Complex amplitudes on every lattice id; a leading path axis is allowed."""

    lattice: Lattice
    amplitudes: np.ndarray
    t: float = 0.0

    @classmethod
    def from_modes(cls, lattice: Lattice, modes: dict, t: float = 0.0) -> "ModeState":
        u = np.zeros(lattice.size, dtype=np.complex128)
        for k, v in modes.items():
            i = lattice.index(k)
            if i < 0:
                raise ValueError(f"mode {k} is outside the box")
            u[i] = v
            u[lattice.size - 1 - i] = np.conj(v)
        return cls(lattice, u, t)

    def power(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def energy(self) -> np.ndarray:
        return self.power().sum(axis=-1)


def realness_defect(state: ModeState) -> float:
    """max_k |u_{-k} - conj(u_k)|."""
    u = np.asarray(state.amplitudes)
    if u.size == 0:
        return 0.0
    return float(np.max(np.abs(u[..., ::-1] - np.conj(u))))


@dataclass
class NoiseDraw:
    """Increments for the representative noise steps, shape (..., m_rep, d-1)."""

    steps: np.ndarray
    increments: np.ndarray
    dt: float

    def full(self) -> np.ndarray:
        """Increments for every support step in lexicographic order, shape (..., m, d-1)."""
        mirror = np.conj(self.increments[..., ::-1, :])
        return np.concatenate([mirror, self.increments], axis=-2)


def noise_increments(theta: Theta, dt: float, rng: np.random.Generator, size=()) -> NoiseDraw:
    if not dt > 0:
        raise ValueError("dt must be positive")
    size = tuple(np.atleast_1d(size)) if size != () else ()
    reps = theta.steps[theta.representatives]
    z = rng.standard_normal(size + (len(reps), theta.d - 1, 2))
    return NoiseDraw(reps, _complexify(z, dt), float(dt))


def _complexify(z, dt):
    s = math.sqrt(dt)
    return s * z[..., 0] + 1j * (s * z[..., 1])


class EMScheme:
    """Precomputed gather tables for the noise sum on a lattice."""

    def __init__(self, lattice: Lattice, theta: Theta | None, kappa: float,
                 lam: float = 0.0, nu: float = 0.0):
        self.lattice, self.theta = lattice, theta
        self.kappa, self.lam, self.nu = float(kappa), float(lam), float(nu)
        n = lattice.size
        self.reps = lattice.representatives
        krep = lattice.points[self.reps]
        self.rate = lam - 4 * PI2 * (kappa + nu) * lattice.norm_sq[self.reps].astype(float)
        if theta is None:
            self.src = np.zeros((0, len(self.reps)), dtype=np.int64)
            self.coef = np.zeros((0, len(self.reps)), dtype=np.complex128)
            return
        if theta.support_sup > lattice.N:
            raise ValueError("noise support exceeds the lattice box")
        d = lattice.d
        frames = frames_for(theta.steps)
        amp = 2j * math.pi * math.sqrt(d / (d - 1) * kappa)
        src, coef = [], []
        for s, l in enumerate(theta.steps):
            ids = lattice.ids(krep - l)
            ids = np.where(ids >= 0, ids, n)
            for i in range(d - 1):
                src.append(ids)
                coef.append(amp * theta.values[s] * (krep @ frames[s, i]))
        self.src = np.ascontiguousarray(src, dtype=np.int64)
        self.coef = np.ascontiguousarray(coef, dtype=np.complex128)

    def decay(self, dt):
        return np.exp(self.rate * dt)

    def advance(self, ext: np.ndarray, dW: np.ndarray | None, decay: np.ndarray) -> None:
        """One step in place on ``ext`` of shape (P, n+1) (last column is a zero sentinel).

        ``dW`` has shape (P, channels), channels ordered by (support step, frame index).
        """
        n = self.lattice.size
        half = n // 2
        rep = ext[:, half:n]
        if dW is not None and len(self.src):
            rep = rep + kernels.noise_apply(ext, self.src, self.coef, np.ascontiguousarray(dW))
        rep = rep * decay
        ext[:, half:n] = rep
        ext[:, :half] = np.conj(rep[:, ::-1])


def em_step(state: ModeState, theta: Theta | None, kappa: float, lam: float, nu: float,
            draw: NoiseDraw | None, dt: float | None = None) -> ModeState:
    """Single exponential Euler-Maruyama step (works on one path or a leading path axis)."""
    if draw is None and dt is None:
        raise ValueError("need a noise draw or an explicit dt")
    dt = draw.dt if draw is not None else dt
    u = np.asarray(state.amplitudes)
    if not np.all(np.isfinite(u)):
        raise FloatingPointError("non-finite amplitudes")
    scheme = EMScheme(state.lattice, theta, kappa, lam, nu)
    single = u.ndim == 1
    ext = np.zeros((1 if single else u.shape[0], state.lattice.size + 1), dtype=np.complex128)
    ext[:, :-1] = u
    dW = None
    if draw is not None and theta is not None:
        full = draw.full()
        dW = full.reshape(full.shape[:-2] + (-1,))
        dW = dW.reshape(1, -1) if single else dW
    scheme.advance(ext, dW, scheme.decay(dt))
    out = ext[0, :-1] if single else ext[:, :-1]
    return ModeState(state.lattice, out.copy(), state.t + dt)


def stability_budget(lattice: Lattice, kappa: float, lam: float = 0.0, nu: float = 0.0) -> float:
    return 0.5 / (4 * PI2 * (kappa + nu) * float(lattice.norm_sq.max()) + lam)


@dataclass
class MCConfig:
    d: int = 2
    N: int = 8
    theta: Theta | None = None
    kappa: float = 1.0
    lam: float = 0.0
    nu: float = 0.0
    dt: float = 1e-5
    T: float = 0.01
    u0: dict | None = None
    tau: float | None = None
    sample_every: int = 10
    checkpoints: tuple = ()
    beta_list: tuple = (1.0,)
    block: int = 256
    chunk: int = 200

    def lattice(self) -> Lattice:
        return build_lattice(self.d, self.N)


@dataclass
class EnsembleStats:
    paths: int
    base_seed: int
    dt: float
    steps: int
    times: np.ndarray
    energy: np.ndarray
    hneg: dict
    tau: float
    interval_sup: np.ndarray
    interval_start: np.ndarray
    checkpoint_times: np.ndarray
    checkpoint_power: np.ndarray
    u0_energy: float
    u0_hneg1: float
    lattice: Lattice
    ci_level: float = 0.95
    seed_rule: str = "SeedSequence(base_seed, spawn_key=(path,))"
    extra: dict = field(default_factory=dict)

    @staticmethod
    def _mean_se(x, axis=0):
        m = x.mean(axis=axis)
        se = x.std(axis=axis, ddof=1) / math.sqrt(x.shape[axis])
        return m, se

    def energy_mean_se(self):
        return self._mean_se(self.energy)

    def hneg_mean_se(self, beta=1.0):
        return self._mean_se(self.hneg[beta])

    def mode_mean_se(self, which=-1):
        return self._mean_se(self.checkpoint_power[:, which, :])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        betas = sorted(self.hneg)
        head = ["t", "energy_mean", "energy_se"]
        for b in betas:
            head += [f"Hm{b:g}_mean", f"Hm{b:g}_se"]
        w.writerow(head)
        em, es = self.energy_mean_se()
        cols = [em, es]
        for b in betas:
            cols += list(self.hneg_mean_se(b))
        for i, t in enumerate(self.times):
            w.writerow([repr(float(t))] + [repr(float(c[i])) for c in cols])
        return buf.getvalue()

    def modes_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        d = self.lattice.d
        w.writerow(["t"] + [f"k{i + 1}" for i in range(d)] + ["mean", "se"])
        for c, t in enumerate(self.checkpoint_times):
            m, se = self.mode_mean_se(c)
            for j in range(self.lattice.size):
                w.writerow([repr(float(t))] + [int(x) for x in self.lattice.points[j]]
                           + [repr(float(m[j])), repr(float(se[j]))])
        return buf.getvalue()


def _path_rng(base_seed: int, path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(base_seed), spawn_key=(int(path),)))


def _initial(lattice: Lattice, u0) -> np.ndarray:
    if u0 is None:
        u0 = {tuple(int(c) for c in k): 1.0 for k in lattice.points[lattice.representatives]
              if int(k @ k) <= 2}
    if isinstance(u0, dict):
        return ModeState.from_modes(lattice, u0).amplitudes
    u = np.asarray(u0, dtype=np.complex128)
    if realness_defect(ModeState(lattice, u)) > 0:
        raise ValueError("initial amplitudes violate u_{-k} = conj(u_k)")
    return u


def _interval_table(nsteps, dt, tau, T):
    n_int = int(math.floor(T / tau + 1e-9))
    lo = np.full(nsteps + 1, -1)
    hi = np.full(nsteps + 1, -1)
    for n in range(n_int):
        a = int(math.ceil(n * tau / dt - 1e-9))
        b = min(nsteps, int(math.floor((n + 1) * tau / dt + 1e-9)))
        for j in range(a, b + 1):
            if lo[j] < 0:
                lo[j] = n
            else:
                hi[j] = n
    return n_int, lo, hi


def _run_block(cfg: MCConfig, scheme: EMScheme, paths: range, base_seed, nsteps, u0,
               weights, sample_steps, ck_steps, tab):
    lat = scheme.lattice
    n = lat.size
    P = len(paths)
    ext = np.zeros((P, n + 1), dtype=np.complex128)
    ext[:, :n] = u0
    rngs = [_path_rng(base_seed, p) for p in paths]
    theta = scheme.theta
    m_rep = 0 if theta is None else len(theta.representatives)
    d = lat.d
    decay = scheme.decay(cfg.dt)
    n_int, lo, hi = tab
    sup = np.zeros((P, max(n_int, 0)))
    nsamp = len(sample_steps)
    energy = np.empty((P, nsamp))
    hneg = {b: np.empty((P, nsamp)) for b in weights}
    ck = np.empty((P, len(ck_steps), n))
    samp_pos = {s: i for i, s in enumerate(sample_steps)}
    ck_pos = {s: i for i, s in enumerate(ck_steps)}
    w1 = weights[1.0] if 1.0 in weights else None

    def observe(j):
        pw = np.abs(ext[:, :n]) ** 2
        if n_int:
            v = (pw * w1).sum(axis=1)
            if lo[j] >= 0:
                sup[:, lo[j]] = np.maximum(sup[:, lo[j]], v)
            if hi[j] >= 0:
                sup[:, hi[j]] = np.maximum(sup[:, hi[j]], v)
        if j in samp_pos:
            i = samp_pos[j]
            energy[:, i] = pw.sum(axis=1)
            for b, wb in weights.items():
                hneg[b][:, i] = (pw * wb).sum(axis=1)
        if j in ck_pos:
            ck[:, ck_pos[j], :] = pw

    observe(0)
    j = 0
    while j < nsteps:
        K = min(cfg.chunk, nsteps - j)
        dW = None
        if theta is not None:
            z = np.stack([g.standard_normal((K, m_rep, d - 1, 2)) for g in rngs])
            inc = _complexify(z, cfg.dt)
            full = np.concatenate([np.conj(inc[:, :, ::-1, :]), inc], axis=2)
            dW = full.reshape(P, K, -1)
        for q in range(K):
            scheme.advance(ext, None if dW is None else dW[:, q], decay)
            j += 1
            observe(j)
        if not np.all(np.isfinite(ext)):
            raise FloatingPointError(f"non-finite amplitudes by step {j}")
    return energy, hneg, sup, ck


def simulate_ensemble(cfg: MCConfig, paths: int, base_seed: int = 0, workers: int = 1) -> EnsembleStats:
    """Run ``paths`` independent paths; results depend only on (cfg, paths, base_seed)."""
    if paths < 2:
        raise ValueError("need at least 2 paths")
    lat = cfg.lattice()
    budget = stability_budget(lat, cfg.kappa, cfg.lam, cfg.nu)
    if cfg.dt > budget:
        raise ValueError(f"dt={cfg.dt!r} exceeds the stability budget; use dt <= {budget!r}")
    theta = cfg.theta
    scheme = EMScheme(lat, theta, cfg.kappa, cfg.lam, cfg.nu)
    nsteps = int(round(cfg.T / cfg.dt))
    if nsteps < 1 or abs(nsteps * cfg.dt - cfg.T) > 1e-9 * cfg.T:
        raise ValueError("T must be a whole number of steps dt")
    tau = cfg.tau
    if tau is None:
        tau = mixing_constants(theta, lat.d, cfg.kappa).t0 if theta is not None else cfg.T
    u0 = _initial(lat, cfg.u0)
    k2 = 4 * PI2 * lat.norm_sq.astype(float)
    betas = sorted(set(cfg.beta_list) | {1.0})
    weights = {b: k2 ** (-b) for b in betas}
    sample_steps = sorted(set(range(0, nsteps + 1, cfg.sample_every)) | {nsteps})
    ck_times = tuple(cfg.checkpoints) or (cfg.T,)
    ck_steps = [int(round(t / cfg.dt)) for t in ck_times]
    tab = _interval_table(nsteps, cfg.dt, tau, cfg.T)
    blocks = [range(a, min(paths, a + cfg.block)) for a in range(0, paths, cfg.block)]

    def job(b):
        return _run_block(cfg, scheme, b, base_seed, nsteps, u0, weights, sample_steps, ck_steps, tab)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(job, blocks))
    else:
        parts = [job(b) for b in blocks]
    energy = np.concatenate([p[0] for p in parts])
    hneg = {b: np.concatenate([p[1][b] for p in parts]) for b in betas}
    sup = np.concatenate([p[2] for p in parts])
    ck = np.concatenate([p[3] for p in parts])
    pw0 = np.abs(u0) ** 2
    return EnsembleStats(
        paths=paths, base_seed=int(base_seed), dt=cfg.dt, steps=nsteps,
        times=np.array(sample_steps) * cfg.dt, energy=energy, hneg=hneg, tau=float(tau),
        interval_sup=sup, interval_start=np.arange(sup.shape[1]) * tau,
        checkpoint_times=np.array(ck_steps) * cfg.dt, checkpoint_power=ck,
        u0_energy=float(pw0.sum()), u0_hneg1=float(pw0 @ weights[1.0]), lattice=lat,
    )


def em_mean_recursion(lattice: Lattice, theta: Theta, kappa: float, lam: float, nu: float,
                      Y0: np.ndarray, dt: float, nsteps: int) -> np.ndarray:
    """Exact expectation of |u_k|^2 under the discrete scheme (no sampling noise).

    One step maps Y to E_k^2 (Y_k + dt * gains_k(Y)), with gains from in-box sources.
    """
    from .spectrum import MasterOperator, TruncationPolicy

    op = MasterOperator(lattice, theta, kappa, policy=TruncationPolicy("absorbing"))
    rate = lam - 4 * PI2 * (kappa + nu) * lattice.norm_sq.astype(float)
    damp = np.exp(2 * rate * dt)
    zero_diag = np.zeros(lattice.size)
    from . import kernels as _k

    Y = np.asarray(Y0, dtype=float).copy()
    for _ in range(nsteps):
        gains = _k.stencil_apply(Y, op.src, op.w, zero_diag)
        Y = damp * (Y + dt * gains)
    return Y


def mean_bias_estimate(lattice: Lattice, theta: Theta, kappa: float, lam: float, nu: float,
                       Y0: np.ndarray, dt: float, nsteps: int) -> np.ndarray:
    """Per-mode discretization bias of the scheme mean at step dt.

    Two Richardson levels over dt, dt/2, dt/4 remove the first and second order
    terms; the bias is the distance of the dt mean from the extrapolated limit.
    """
    y1, y2, y4 = (em_mean_recursion(lattice, theta, kappa, lam, nu, Y0, dt / r, nsteps * r)
                  for r in (1, 2, 4))
    limit = (8 * y4 - 6 * y2 + y1) / 3
    return np.abs(y1 - limit)


@dataclass
class DecayReport:
    fitted_rate: float | None
    interval_means: np.ndarray
    interval_se: np.ndarray
    factor_ratio: np.ndarray
    envelope: np.ndarray
    quantiles: dict
    warning: str | None = None


def interval_sup_stats(stats: EnsembleStats, lambda_target: float, theta: Theta | None = None,
                       kappa: float | None = None) -> DecayReport:
    """Decay of E sup over windows of length tau and per-path envelope constants.

    The envelope for a path is the smallest C with
    ||u(t)||^2_{H^-1} <= C exp(-lambda t) ||u_0||^2_{L^2} at every recorded time.
    """
    from .spectrum import fit_decay_rate

    sup = stats.interval_sup
    if sup.shape[1] < 3:
        raise ValueError("need at least 3 recorded windows; increase T or decrease tau")
    warn = None
    if theta is not None and kappa is not None:
        dk = mixing_constants(theta, stats.lattice.d, kappa).d_theta * kappa
        if lambda_target >= dk:
            warn = (f"target rate {lambda_target!r} is not below D(theta,d) kappa = {dk!r}; "
                    "the almost-sure envelope is not covered by the proven estimate")
            warnings.warn(warn)
    m = sup.mean(axis=0)
    se = sup.std(axis=0, ddof=1) / math.sqrt(sup.shape[0])
    rate = None
    if len(m) >= 8 and np.all(m > 0):
        rate = fit_decay_rate(stats.interval_start, m).fitted_rate
    # E sup over [n tau, (n+1) tau] against E ||u(n tau)||^2 at the window start
    hm = stats.hneg[1.0].mean(axis=0)
    starts = np.searchsorted(stats.times, stats.interval_start - 1e-12)
    ok = starts < len(stats.times)
    ratio = np.full(len(m), np.nan)
    ratio[ok] = m[ok] / hm[starts[ok]]
    env = np.max(stats.hneg[1.0] * np.exp(lambda_target * stats.times), axis=1) / stats.u0_energy
    q = {f"q{int(100 * a)}": float(np.quantile(env, a)) for a in (0.5, 0.9, 0.99)}
    return DecayReport(rate, m, se, ratio, env, q, warn)
