"""Acceptance criteria at their stated tolerances; one PASS/FAIL line each in the summary.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are printed
under "acceptance criteria" at the end of the session.
"""
import math
import time

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from transmix.config import parse_config
from transmix.euler2d import (
    Grid,
    VorticityState,
    advection_orthogonality,
    em_step_euler,
    euler_theta,
    kappa_for_target_rate,
    NoiseField,
)
from transmix.lattice import build_lattice, make_theta
from transmix.mc import noise_increments
from transmix.orbits import (
    build_orbits_2d,
    build_orbits_hd,
    cover_multiplicity,
    dirichlet_bound,
    dirichlet_ratio,
    projection_bound_margin,
)
from transmix.runner import read_csv, run_command
from transmix.spectrum import MasterOperator, SpectrumState, h_minus1_drift

PI2 = math.pi**2


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def verdicts(res):
    return {r["criterion"]: r for r in res["summary"]["criteria"]}


@pytest.fixture(scope="module")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


SPECTRUM = {"command": "spectrum", "d": 2, "N": 24, "theta": {"family": "unit_shell"}, "kappa": 1.0,
            "init_r2": 2, "T": 0.03, "p_list": [1.5, 2, 3], "beta_list": [-1, 1], "gate": 1e-3}


@pytest.fixture(scope="module")
def spectrum_run(outdir):
    res, secs = timed(lambda: run_command(parse_config(SPECTRUM), outdir / "spectrum"))
    traj = read_csv((outdir / "spectrum" / "trajectory.csv").read_text())
    return res, traj, secs


def test_c01_mass_conservation(spectrum_run, record):
    res, traj, secs = spectrum_run
    leak = float(traj["boundary_mass"].max())
    mass = traj["sum_Y"]
    err = float(np.max(np.abs(mass - mass[0])) / mass[0])
    ok = record(1, "mass conservation", err <= 1e-10 and leak < 1e-3 and secs < 10,
                f"max rel drift {err:.2e} <= 1e-10, boundary mass {leak:.2e} < 1e-3", secs, 10)
    assert ok


def test_c02_lp_monotone(spectrum_run, record):
    _, traj, _ = spectrum_run
    worst = max(float(np.max(traj[k][1:] / traj[k][:-1])) - 1 for k in ("l1.5", "l2", "l3"))
    ok = record(2, "l^p nonincreasing, p in {1.5, 2, 3}", worst <= 1e-9,
                f"max relative step increase {worst:.2e} <= 1e-9")
    assert ok


def test_c03_l2_decay_bound(spectrum_run, record):
    res, traj, _ = spectrum_run
    t = traj["t"]
    gated = (traj["boundary_mass"] < 1e-3) & (t > 0)
    ratio = traj["l2"][gated] / (np.exp(-PI2 / 4 * t[gated]) * traj["l2"][0])
    worst = float(ratio.max())
    ok = record(3, "l2 decay bound, rate pi^2/4", worst <= 1 + 1e-6 and gated.sum() > 0
                and verdicts(res)["l2_decay_bound"]["status"] == "pass",
                f"max ratio {worst:.4f} <= 1+1e-6 on {int(gated.sum())} gated samples")
    assert ok


def test_c04_h1_growth(spectrum_run, record):
    res, _, _ = spectrum_run
    v = verdicts(res)["h1_growth_rate"]
    ok = record(4, "H1 growth rate 8 pi^2", v["status"] == "pass",
                f"relative error {v['observed']:.2e} <= 1e-4 ({v['gate']})")
    assert ok


def test_c05_heat_enhancement(outdir, record):
    cfg = {"command": "heat", "d": 2, "N": 24, "kappa": 1.0, "lam": 1.0, "nu": 0.01, "T": 0.5, "init_r2": 2}
    res, secs = timed(lambda: run_command(parse_config(cfg), outdir / "heat"))
    traj = read_csv((outdir / "heat" / "trajectory.csv").read_text())
    t = traj["t"]
    gated = (traj["boundary_mass"] < 1e-3) & (t > 0)
    ratio = traj["sum_Y"][gated] / (4.15 * np.exp(-1.257 * t[gated]) * traj["sum_Y"][0])
    worst = float(ratio.max())
    ok = record(5, "heat energy <= 4.15 exp(-1.257 t)", worst <= 1.0 and secs < 30
                and verdicts(res)["heat_energy_bound"]["status"] == "pass",
                f"max ratio {worst:.3f} <= 1 on {int(gated.sum())} gated samples", secs, 30)
    assert ok


def test_c06_drift_counterexample(record):
    t0 = time.perf_counter()
    lat = build_lattice(2, 8)
    th = make_theta("unit_shell", lattice=lat)
    Y = SpectrumState.from_modes(lat, {(1, 1): 1.0})
    kappa = 1.0
    drift = h_minus1_drift(Y, th, kappa)
    # independent oracle: five-point difference of sum Y/|2 pi k|^2 along the master-equation flow
    A = MasterOperator(lat, th, kappa).matrix()
    weights = 1 / (4 * PI2 * lat.norm_sq)

    def hneg(t):
        return float(weights @ spla.expm_multiply(A * t, Y.values))

    h = 1e-5
    fd = (-hneg(2 * h) + 8 * hneg(h) - 8 * hneg(-h) + hneg(-2 * h)) / (12 * h)
    # bracket factor (4k0^4 + 2k0^2)/(4k0^4 + 1) - 1 at k0 = 1, for each of +-(1,1)
    bracket = (4 + 2) / (4 + 1) - 1
    by_hand = bracket * 2 * kappa * Y.values.sum()
    secs = time.perf_counter() - t0
    ok = record(6, "H^-1 drift counterexample", drift.value > 0 and abs(drift.value - fd) <= 1e-10
                and abs(drift.value - by_hand) <= 1e-12 and not drift.touches_boundary and secs < 1,
                f"drift {drift.value:.12f}, oracle {fd:.12f}, bracket value {by_hand:.12f}", secs, 1)
    assert ok


def test_c07_poincare(outdir, record):
    cfg = {"command": "poincare", "sequences": 1000, "max_support": 64, "p_list": [1.5, 2, 3, 5]}
    res, secs = timed(lambda: run_command(parse_config(cfg), outdir / "poincare"))
    v = verdicts(res)
    ok = record(7, "discrete Poincare inequality", all(r["status"] == "pass" for r in v.values())
                and {"poincare_hand_unit", "poincare_hand_pair"} <= set(v) and secs < 1,
                f"worst lhs/rhs {v['poincare_inequality']['observed']:.3f} <= 1, hand cases exact", secs, 1)
    assert ok


def test_c08_orbits(record, stopwatch):
    lat = build_lattice(2, 40)
    steps = [(a, b) for a in range(-3, 4) for b in range(-3, 4) if 0 < a * a + b * b <= 9]
    bad, worst, certified = 0, math.inf, 0
    for l in steps:
        fam = build_orbits_2d(l, lat)
        rep = cover_multiplicity(fam)
        bad += len(rep.violations)
        certified += int(rep.certified.sum())
        worst = min(worst, min(projection_bound_margin(o) for o in fam.orbits))
    worst3, specials = math.inf, 0
    for l1, l2 in (((1, 0, 0), (0, 1, 0)), ((1, 1, 0), (1, -1, 0))):
        fam = build_orbits_hd(l1, l2, 6)
        rep = cover_multiplicity(fam)
        bad += len(rep.violations)
        sp = [o for o in fam.orbits if o.special and len(o.points) > 1 and any(o.points[0])]
        specials += len(sp)
        worst3 = min(worst3, min(projection_bound_margin(o) for o in fam.orbits))
    secs = stopwatch()
    ok = record(8, "orbit cover twice and projection bounds", bad == 0 and worst >= 1 and worst3 >= 1
                and specials > 0 and secs < 30,
                f"{len(steps)} steps, {bad} violations, min ratio 2-D {worst:.3f} 3-D {worst3:.3f}"
                f" ({specials} special orbits)", secs, 30)
    assert ok


def test_c09_dirichlet_constant(record, stopwatch):
    lat = build_lattice(2, 12)
    th = make_theta("unit_shell", lattice=lat)
    rng = np.random.default_rng(0)
    inner = np.flatnonzero(lat.sup_norm <= 8)
    worst = 0.0
    for _ in range(200):
        y = np.zeros(lat.size)
        pick = rng.choice(inner, size=rng.integers(1, 40), replace=False)
        y[pick] = rng.random(len(pick))
        y = y + y[::-1]
        r = dirichlet_ratio(y, th, 2.0, lattice=lat)
        worst = max(worst, r.power_sum / (32 * r.dirichlet))
    secs = stopwatch()
    ok = record(9, "sum Y^2 <= 32 D(Y)", worst <= 1.0 and dirichlet_bound(th, 2.0) == 32.0 and secs < 5,
                f"worst ratio {worst:.3f} <= 1", secs, 5)
    assert ok


MC = {"command": "transport-mc", "d": 2, "N": 8, "theta": {"family": "unit_shell"}, "kappa": 1.0,
      "dt": 1e-5, "T": 0.01, "paths": 4096, "base_seed": 0, "init_r2": 2, "sample_stride": 10}


@pytest.fixture(scope="module")
def mc_run(outdir):
    return timed(lambda: run_command(parse_config(MC), outdir / "mc"))


@pytest.mark.slow
def test_c10_mc_vs_master(mc_run, record):
    res, secs = mc_run
    v = verdicts(res)["moments_vs_master_equation"]
    ok = record(10, "MC moments vs master equation", v["status"] == "pass" and secs < 300,
                f"worst |mean-Y|/(4SE+bias) {v['observed']:.3f} <= 1 (base_seed 0)", secs, 300)
    assert ok


@pytest.mark.slow
def test_c11_interval_sup(mc_run, record):
    res, _ = mc_run
    v = verdicts(res)["interval_sup_factor_two"]
    tau = res["summary"]["meta"]["tau"]
    ok = record(11, "E sup_[0,t0] H^-1 <= 2 H^-1(0)", v["status"] == "pass" and abs(tau - 1.98e-5) < 1e-7,
                f"mean-3SE {v['observed']:.4g} <= {v['bound']:.4g}, t0 {tau:.4g}")
    assert ok


def test_c12_noise_statistics(record, stopwatch):
    th = make_theta("unit_shell", d=2)
    dt = 1e-3
    z = noise_increments(th, dt, np.random.default_rng(12), size=500_000).increments.ravel()
    n = z.size
    a = np.abs(z) ** 2
    za = abs(a.mean() - 2 * dt) / (a.std() / math.sqrt(n))
    s = z * z
    zr = abs(s.real.mean()) / (s.real.std() / math.sqrt(n))
    zi = abs(s.imag.mean()) / (s.imag.std() / math.sqrt(n))
    secs = stopwatch()
    ok = record(12, "noise increment statistics", n == 10**6 and max(za, zr, zi) <= 4 and secs < 5,
                f"{n} draws, |z| for E|dW|^2=2dt {za:.2f}, E dW^2=0 {max(zr, zi):.2f} <= 4", secs, 5)
    assert ok


def test_c13a_euler_deterministic(record, stopwatch):
    st = VorticityState.random_lowmode(64, 0.5, 5, 1.0, seed=0)
    e0 = st.energy()
    dt = 2e-3
    for _ in range(500):
        st = em_step_euler(st, None, 0.0, dt)
    drift = abs(st.energy() - e0) / e0
    secs = stopwatch()
    ok = record(13.1, "Euler (a) noise off energy drift over t=1", drift <= 1e-6 and abs(st.t - 1) < 1e-9,
                f"relative drift {drift:.2e} <= 1e-6", secs)
    assert ok


def test_c13b_euler_invariants_every_step(record, stopwatch):
    g = Grid(64)
    kappa = kappa_for_target_rate(1.0, 1.0, 0.5, 10)
    th = euler_theta(0.5, 10)
    nf = NoiseField(g, th, kappa)
    st = VorticityState.random_lowmode(64, 0.5, 5, 1.0, seed=0)
    rng = [np.random.default_rng(13)]
    adv = div = 0.0
    m1, m2 = g.velocity_multiplier(0.5)
    for _ in range(200):
        st = em_step_euler(st, th, kappa, 5e-6, nf.draw(rng, 1, 5e-6)[:, 0])
        adv = max(adv, advection_orthogonality(st))
        div = max(div, float(np.max(np.abs(g.k1 * m1 * st.what + g.k2 * m2 * st.what))))
    secs = stopwatch()
    ok = record(13.2, "Euler (b) invariants at every step", adv <= 1e-10 and div <= 1e-12,
                f"advection {adv:.1e} <= 1e-10, divergence {div:.1e} <= 1e-12 over 200 noisy steps", secs)
    assert ok


EULER = {"command": "euler", "grid": 64, "alpha": 0.5, "M": 10, "kappa": "auto", "lam": 1.0,
         "paths": 64, "T": 0.01, "dt": 5e-6, "sample_stride": 40, "refine_paths": 4, "base_seed": 0}


@pytest.mark.slow
def test_c13c_euler_ensemble(outdir, record):
    res, secs = timed(lambda: run_command(parse_config(EULER), outdir / "euler"))
    v = verdicts(res)
    meta = res["summary"]["meta"]
    need = ["energy_controlled", "energy_excess_shrinks_with_dt", "girsanov_ceiling", "kappa_budget",
            "advection_orthogonality", "incompressibility", "hneg1_decreasing"]
    ok = record(13.3, "Euler (c) 64-path ensemble", all(v[n]["status"] == "pass" for n in need) and secs < 600,
                f"excess/allowance {v['energy_controlled']['observed']:.3f} <= 1, worst-path excess "
                f"{' -> '.join(f'{x:.3f}' for x in meta['refined_excess'])} under dt halving, "
                f"qv {v['girsanov_ceiling']['observed']:.3f} <= 1, H^-1 slope {v['hneg1_decreasing']['observed']:.1f} "
                f"(reported, not certified against lambda), kappa {meta['kappa']:.4f}", secs, 600)
    assert ok


def test_c14_determinism(outdir, record, stopwatch):
    reruns = [
        (SPECTRUM, ["trajectory.csv"]),
        ({"command": "poincare", "sequences": 1000, "max_support": 64, "p_list": [1.5, 2, 3, 5]}, ["poincare.csv"]),
        ({"command": "orbits", "l": [2, 1], "N": 24}, ["orbits.csv", "projection.csv"]),
        ({**MC, "paths": 256}, ["ensemble.csv", "modes.csv", "interval_sup.csv"]),
    ]
    same = True
    for cfg, names in reruns:
        a = outdir / "rerun_a" / cfg["command"]
        b = outdir / "rerun_b" / cfg["command"]
        run_command(parse_config(cfg), a)
        run_command(parse_config({**cfg, "workers": 2}), b)
        for n in names:
            same &= (a / n).read_bytes() == (b / n).read_bytes()
    secs = stopwatch()
    ok = record(14, "byte-identical CSVs on rerun", same,
                "spectrum, poincare, orbits, MC rerun with the same seed (1 vs 2 workers)", secs)
    assert ok
