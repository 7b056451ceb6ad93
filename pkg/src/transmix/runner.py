"""Orchestration: dispatch a RunConfig, write artifacts atomically, judge the results.

Every verdict is computed by an ``evaluate_*`` function from the emitted CSV
text plus the bound descriptors stored in the summary, so the ``report``
command can rebuild the same table from a run directory alone.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .config import RunConfig, envelope_warning, parse_config

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_INCONCLUSIVE = 0, 1, 2, 3
SUMMARY = "summary.json"
MARKER = "RUNNING"
H1_GATE = 1e-4


def atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(text: str) -> dict:
    rows = list(csv.reader(io.StringIO(text)))
    head, body = rows[0], rows[1:]
    cols = {}
    for j, name in enumerate(head):
        vals = [r[j] for r in body]
        try:
            cols[name] = np.array([float(v) for v in vals])
        except ValueError:
            cols[name] = vals
    return cols


def _rows_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def criterion(name, observed, bound, passed, gate="n/a", note=""):
    if passed is None:
        status = "inconclusive"
    else:
        status = "pass" if passed else "fail"
    return {"criterion": name, "observed": _num(observed), "bound": _num(bound),
            "margin": _num(bound - observed) if _finite(observed) and _finite(bound) else None,
            "gate": gate, "status": status, "note": note}


def _finite(x):
    return isinstance(x, (int, float, np.floating)) and math.isfinite(float(x))


def _num(x):
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else repr(x)


def _theta(cfg: RunConfig, lattice=None, d=None):
    from .lattice import make_theta

    params = {k: v for k, v in cfg.theta.items() if k != "family"}
    return make_theta(cfg.theta["family"], lattice=lattice, d=d, **params)


# spectrum / heat


def _run_spectrum(cfg: RunConfig):
    from .lattice import build_lattice, mixing_constants
    from .spectrum import DtPolicy, MasterOperator, SpectrumState, TruncationPolicy, integrate, theoretical_bounds

    lat = build_lattice(cfg.d, cfg.N)
    theta = _theta(cfg, lat)
    consts = mixing_constants(theta, cfg.d, cfg.kappa)
    heat = cfg.command == "heat"
    op = MasterOperator(lat, theta, cfg.kappa, cfg.lam if heat else 0.0, cfg.nu if heat else 0.0,
                        TruncationPolicy(cfg.truncation, cfg.margin))
    Y0 = SpectrumState.ball(lat, cfg.init_r2)
    traj = integrate(Y0, op, cfg.T, DtPolicy(cfg.safety, cfg.dt, cfg.sample_stride),
                     [p for p in cfg.p_list if p != 2.0], cfg.beta_list, cfg.margin)
    bounds = {}
    if heat:
        b = theoretical_bounds(consts, "heat_energy", lam=cfg.lam, nu=cfg.nu)
        bounds["heat_energy"] = {"rate": b.rate, "prefactor": b.prefactor}
    else:
        for p in cfg.p_list:
            b = theoretical_bounds(consts, "lp_spectrum", p=p)
            bounds[f"l{p:g}"] = {"rate": b.rate, "prefactor": b.prefactor}
        bounds["H1"] = {"rate": theoretical_bounds(consts, "h1_growth").rate}
        for beta in cfg.beta_list:
            if beta < 0:
                kw = {} if cfg.epsilon is None else {"epsilon": cfg.epsilon}
                b = theoretical_bounds(consts, "negative_sobolev", beta=-beta, **kw)
                bounds[f"H{beta:g}"] = {"rate": b.rate, "rate_only": True}
    meta = {"bounds": bounds, "gate": cfg.gate, "truncation": cfg.truncation, "dt": traj.dt,
            "steps": traj.steps, "constants": asdict(consts)}
    return {"trajectory.csv": traj.to_csv()}, meta


def evaluate_spectrum(files: dict, meta: dict) -> list:
    s = read_csv(files["trajectory.csv"])
    t, gate = s["t"], meta["gate"]
    out = []
    mass = s["sum_Y"]
    gated = s["boundary_mass"] < gate
    if "heat_energy" in meta["bounds"]:
        b = meta["bounds"]["heat_energy"]
        ok = gated & (t > 0)
        if not ok.any():
            return [criterion("heat_energy_bound", math.nan, math.nan, None, "no gated samples")]
        ratio = mass[ok] / (b["prefactor"] * np.exp(-b["rate"] * t[ok]) * mass[0])
        out.append(criterion("heat_energy_bound", ratio.max(), 1.0, bool(ratio.max() <= 1.0),
                             f"{int(ok.sum())}/{len(t)} gated"))
        return out
    if meta["truncation"] == "conservative":
        err = float(np.max(np.abs(mass - mass[0])) / mass[0])
        out.append(criterion("mass_conservation", err, 1e-10, err <= 1e-10))
    for name, b in meta["bounds"].items():
        if name.startswith("l") and name in s:
            y = s[name]
            inc = float(np.max(y[1:] / y[:-1])) - 1 if len(y) > 1 else 0.0
            out.append(criterion(f"{name}_nonincreasing", inc, 1e-9, inc <= 1e-9))
    if "l2" in meta["bounds"]:
        b = meta["bounds"]["l2"]
        ok = gated & (t > 0)
        if ok.any():
            ratio = s["l2"][ok] / (np.exp(-b["rate"] * t[ok]) * s["l2"][0])
            out.append(criterion("l2_decay_bound", ratio.max(), 1 + 1e-6, bool(ratio.max() <= 1 + 1e-6),
                                 f"{int(ok.sum())}/{len(t)} gated"))
        else:
            out.append(criterion("l2_decay_bound", math.nan, 1 + 1e-6, None, "no gated samples"))
    if "H1" in meta["bounds"] and "H1" in s and "boundary_H1" in s:
        from .spectrum import fit_decay_rate

        rate = meta["bounds"]["H1"]["rate"]
        ok = s["boundary_H1"] < H1_GATE
        if ok.sum() >= 8:
            fit = fit_decay_rate(t[ok], s["H1"][ok])
            rel = abs(fit.fitted_rate - rate) / abs(rate)
            out.append(criterion("h1_growth_rate", rel, 1e-4, rel <= 1e-4,
                                 f"H1 band fraction < {H1_GATE:g} on t <= {fit.window[1]:.4g}"))
        else:
            out.append(criterion("h1_growth_rate", math.nan, 1e-4, None, "fewer than 8 gated samples"))
    for name, b in meta["bounds"].items():
        if b.get("rate_only") and name in s:
            from .spectrum import fit_decay_rate

            ok = gated
            if ok.sum() >= 8:
                fit = fit_decay_rate(t[ok], s[name][ok])
                out.append(criterion(f"{name}_rate_reported", fit.fitted_rate, b["rate"], True,
                                     "rate-only bound; fitted rate reported, not certified"))
    return out


# Monte Carlo


def _mc_initial(lat, r2):
    return {tuple(int(c) for c in k): 1.0 for k in lat.points[lat.representatives] if int(k @ k) <= r2}


def _run_mc(cfg: RunConfig):
    import scipy.sparse.linalg as spla

    from .lattice import build_lattice, mixing_constants
    from .mc import MCConfig, _initial, interval_sup_stats, mean_bias_estimate, simulate_ensemble
    from .spectrum import MasterOperator, TruncationPolicy

    lat = build_lattice(cfg.d, cfg.N)
    theta = _theta(cfg, lat)
    heat = cfg.command == "heat-mc"
    lam, nu = (cfg.lam, cfg.nu) if heat else (0.0, 0.0)
    dt = cfg.dt if cfg.dt is not None else 1e-5
    u0 = _mc_initial(lat, cfg.init_r2)
    mcfg = MCConfig(d=cfg.d, N=cfg.N, theta=theta, kappa=cfg.kappa, lam=lam, nu=nu, dt=dt, T=cfg.T,
                    u0=u0, tau=cfg.tau, sample_every=cfg.sample_stride, beta_list=(1.0,))
    stats = simulate_ensemble(mcfg, cfg.paths, cfg.base_seed, cfg.workers)
    consts = mixing_constants(theta, cfg.d, cfg.kappa)
    warn = envelope_warning(cfg, consts.d_theta)
    Y0 = np.abs(_initial(lat, u0)) ** 2
    op = MasterOperator(lat, theta, cfg.kappa, lam, nu, TruncationPolicy("absorbing"))
    YT = spla.expm_multiply(op.matrix() * cfg.T, Y0)
    bias = mean_bias_estimate(lat, theta, cfg.kappa, lam, nu, Y0, dt, stats.steps)
    m, se = stats.mode_mean_se(-1)
    rows = []
    for i in lat.representatives:
        rows.append([int(c) for c in lat.points[i]] + [float(m[i]), float(se[i]), float(YT[i]), float(bias[i])])
    hd = [f"k{j + 1}" for j in range(cfg.d)]
    files = {
        "ensemble.csv": stats.to_csv(),
        "modes.csv": _rows_csv(hd + ["mc_mean", "mc_se", "master", "bias"], rows),
    }
    lam_t = cfg.lambda_target if cfg.lambda_target is not None else 0.5 * consts.d_theta * cfg.kappa
    meta = {"tau": stats.tau, "u0_hneg1": stats.u0_hneg1, "u0_energy": stats.u0_energy,
            "dt": dt, "steps": stats.steps, "paths": cfg.paths, "base_seed": cfg.base_seed,
            "seed_rule": stats.seed_rule, "lambda_target": lam_t, "warning": warn}
    nint = stats.interval_sup.shape[1]
    sup_rows = []
    sm = stats.interval_sup.mean(axis=0)
    ss = stats.interval_sup.std(axis=0, ddof=1) / math.sqrt(cfg.paths)
    for n in range(nint):
        sup_rows.append([n, float(n * stats.tau), float(sm[n]), float(ss[n])])
    files["interval_sup.csv"] = _rows_csv(["n", "start", "sup_mean", "sup_se"], sup_rows)
    if nint >= 3:
        rep = interval_sup_stats(stats, lam_t)
        meta["envelope_quantiles"] = rep.quantiles
        meta["interval_sup_rate"] = rep.fitted_rate
    if heat:
        E_T = float(np.sum(YT))
        meta["master_energy_T"] = E_T
        meta["master_energy_bias"] = float(np.sum(bias))
    return files, meta


def evaluate_mc(files: dict, meta: dict) -> list:
    out = []
    modes = read_csv(files["modes.csv"])
    tol = 4 * modes["mc_se"] + modes["bias"]
    dev = np.abs(modes["mc_mean"] - modes["master"])
    live = tol > 0
    ratio = float(np.max(dev[live] / tol[live])) if live.any() else 0.0
    out.append(criterion("moments_vs_master_equation", ratio, 1.0, ratio <= 1.0,
                         note="|mean - Y| / (4 SE + dt bias), worst mode"))
    sup = read_csv(files["interval_sup.csv"])
    if len(sup["n"]):
        first, se = sup["sup_mean"][0], sup["sup_se"][0]
        bound = 2 * meta["u0_hneg1"]
        out.append(criterion("interval_sup_factor_two", first - 3 * se, bound, first - 3 * se <= bound,
                             note=f"E sup over [0, {meta['tau']:.4g}] minus 3 SE"))
    ens = read_csv(files["ensemble.csv"])
    e_end, e_se = ens["energy_mean"][-1], ens["energy_se"][-1]
    out.append(criterion("mean_energy_nonincreasing", e_end - 3 * e_se, ens["energy_mean"][0],
                         e_end - 3 * e_se <= ens["energy_mean"][0]))
    if "master_energy_T" in meta:
        dev = abs(e_end - meta["master_energy_T"])
        tol = 4 * e_se + meta["master_energy_bias"]
        out.append(criterion("heat_energy_vs_master_equation", dev, tol, dev <= tol))
    return out


# Euler


def _run_euler(cfg: RunConfig):
    from .euler2d import EulerConfig, decay_budget, run_euler_ensemble

    ecfg = EulerConfig(N=cfg.grid, alpha=cfg.alpha, M=cfg.M,
                       kappa=None if cfg.kappa == "auto" else float(cfg.kappa), lam=cfg.lam, R=cfg.R,
                       dt=cfg.dt if cfg.dt is not None else 5e-6, T=cfg.T,
                       sample_every=cfg.sample_stride, init_r2=cfg.init_r2, init_seed=cfg.base_seed)
    ens = run_euler_ensemble(ecfg, cfg.paths, cfg.base_seed, refine_paths=cfg.refine_paths)
    R = ens.extra["R"]
    led = ens.ledger
    qv_ratio = np.max(np.where(led.ceiling > 0, led.qv / np.where(led.ceiling > 0, led.ceiling, 1.0), 0.0),
                      axis=1)
    tol = ens.extra["energy_tol"]
    rows = [[p, float(ens.max_energy_ratio[p]), float(qv_ratio[p]), tol[p]] for p in range(cfg.paths)]
    files = {"euler.csv": ens.to_csv(),
             "paths.csv": _rows_csv(["path", "max_energy_ratio", "max_qv_over_ceiling", "energy_tol"], rows)}
    meta = {"kappa": ens.kappa, "R": R, "lambda": cfg.lam,
            "decay_budget": decay_budget(ens.kappa, R, cfg.alpha, cfg.M),
            "refined_paths": ens.extra.get("refined_paths"),
            "refined_excess": ens.extra.get("refined_excess"),
            "advect_defect": ens.advect_defect, "divergence_defect": ens.divergence_defect,
            "shift_max": led.shift_max, "unabsorbed_fraction": led.unabsorbed_fraction,
            "steps": ens.extra["steps"]}
    return files, meta


def evaluate_euler(files: dict, meta: dict) -> list:
    from .spectrum import fit_decay_rate

    out = []
    p = read_csv(files["paths.csv"])
    tol = p["energy_tol"]
    e = float(np.max((p["max_energy_ratio"] - 1) / tol))
    out.append(criterion("energy_controlled", e, 1.0, e <= 1.0,
                         note="worst excess over its per-path scheme allowance"))
    levels = meta.get("refined_excess")
    if levels:
        out.append(criterion("energy_excess_shrinks_with_dt", levels[-1], levels[0], levels[-1] < levels[0],
                             note="worst paths rerun at dt/2 and dt/4 on the same Brownian paths"))
    q = float(np.max((p["max_qv_over_ceiling"] - 1) / tol))
    out.append(criterion("girsanov_ceiling", q, 1.0, q <= 1.0, note="excess over the energy allowance"))
    out.append(criterion("kappa_budget", meta["lambda"], meta["decay_budget"],
                         meta["decay_budget"] >= meta["lambda"] * (1 - 1e-12)))
    out.append(criterion("advection_orthogonality", meta["advect_defect"], 1e-10, meta["advect_defect"] <= 1e-10))
    out.append(criterion("incompressibility", meta["divergence_defect"], 1e-12, meta["divergence_defect"] <= 1e-12))
    s = read_csv(files["euler.csv"])
    h = s["hneg1_mean"]
    dec = bool(np.all(np.diff(h) < 0))
    slope = -fit_decay_rate(s["t"], h).fitted_rate if len(h) >= 8 else math.nan
    out.append(criterion("hneg1_decreasing", slope, 0.0, dec and slope < 0,
                         note="fitted log-slope reported; not certified against lambda"))
    return out


# Poincare / orbits


def _run_poincare(cfg: RunConfig):
    from .orbits import poincare_gap

    rng = np.random.default_rng(cfg.base_seed)
    ps = sorted(set(cfg.p_list))
    rows = []
    for i in range(cfg.sequences):
        n = int(rng.integers(1, cfg.max_support + 1))
        a = rng.random(n) * (rng.random(n) < 0.8)
        for p in ps:
            lhs, rhs = poincare_gap(a, p)
            rows.append([i, p, lhs, rhs])
    for name, a in (("unit", [1.0]), ("pair", [1.0, 1.0])):
        lhs, rhs = poincare_gap(a, 2.0)
        rows.append([name, 2.0, lhs, rhs])
    return {"poincare.csv": _rows_csv(["case", "p", "lhs", "rhs"], rows)}, {}


def evaluate_poincare(files: dict, meta: dict) -> list:
    s = read_csv(files["poincare.csv"])
    lhs, rhs = s["lhs"], s["rhs"]
    pos = rhs > 0
    worst = float(np.max(lhs[pos] / rhs[pos])) if pos.any() else 0.0
    zero_ok = bool(np.all(lhs[~pos] <= 0))
    out = [criterion("poincare_inequality", worst, 1.0, worst <= 1.0 and zero_ok)]
    cases = list(s["case"]) if isinstance(s["case"], list) else []
    for name, want in (("unit", (1.0, 8.0)), ("pair", (2.0, 32.0))):
        if name in cases:
            j = cases.index(name)
            got = (lhs[j], rhs[j])
            out.append(criterion(f"poincare_hand_{name}", abs(got[1] - want[1]), 1e-12,
                                 abs(got[0] - want[0]) <= 1e-12 and abs(got[1] - want[1]) <= 1e-12))
    return out


def _run_orbits(cfg: RunConfig):
    from .orbits import build_orbits_2d, build_orbits_hd, cover_multiplicity, projection_bound_margin

    if cfg.l2 is None:
        fam = build_orbits_2d([int(c) for c in cfg.l], cfg.N)
    else:
        fam = build_orbits_hd([int(c) for c in cfg.l], [int(c) for c in cfg.l2], cfg.N)
    rep = cover_multiplicity(fam, cfg.cover_margin)
    d = fam.lattice.d
    files = {"orbits.csv": _rows_csv(["orbit", "kind", "quadrant", "n"] + [f"k{j + 1}" for j in range(d)],
                                     fam.to_rows()),
             "cover.json": rep.to_json() + "\n"}
    margins = [[i, "special" if o.special else "regular", projection_bound_margin(o)]
               for i, o in enumerate(fam.orbits) if len(o.points) > 1]
    files["projection.csv"] = _rows_csv(["orbit", "kind", "ratio"], margins)
    return files, {"l": list(fam.l1), "l2": list(fam.l2), "orbits": len(fam.orbits)}


def evaluate_orbits(files: dict, meta: dict) -> list:
    cover = json.loads(files["cover.json"])
    out = [criterion("cover_exactly_twice", len(cover["violations"]), 0, cover["ok"],
                     note=f"{cover['certified_points']} certified points")]
    pr = read_csv(files["projection.csv"])
    worst = float(np.min(pr["ratio"])) if len(pr["ratio"]) else math.inf
    out.append(criterion("projection_lower_bound", worst, 1.0, worst >= 1.0 - 1e-12))
    return out


RUNNERS = {
    "spectrum": (_run_spectrum, evaluate_spectrum),
    "heat": (_run_spectrum, evaluate_spectrum),
    "transport-mc": (_run_mc, evaluate_mc),
    "heat-mc": (_run_mc, evaluate_mc),
    "euler": (_run_euler, evaluate_euler),
    "poincare": (_run_poincare, evaluate_poincare),
    "orbits": (_run_orbits, evaluate_orbits),
}


def overall_status(records) -> str:
    st = [r["status"] for r in records]
    if "fail" in st:
        return "fail"
    if "inconclusive" in st or not st:
        return "inconclusive"
    return "pass"


def exit_code(status: str) -> int:
    return {"pass": EXIT_PASS, "fail": EXIT_FAIL, "inconclusive": EXIT_INCONCLUSIVE}[status]


def default_output(cfg: RunConfig) -> Path:
    root = Path(os.environ.get("TRANSMIX_OUTPUT", "runs"))
    return root / cfg.command


def run_command(cfg: RunConfig, outdir: str | Path | None = None) -> dict:
    """Run, write artifacts and return the report (summary plus provenance)."""
    out = Path(outdir or cfg.output or default_output(cfg))
    out.mkdir(parents=True, exist_ok=True)
    if cfg.command == "report":
        return build_report(cfg, out)
    summary_path = out / SUMMARY
    if summary_path.exists():
        summary_path.unlink()
    atomic_write(out / MARKER, "incomplete run\n")
    t0 = time.perf_counter()
    run, evaluate = RUNNERS[cfg.command]
    files, meta = run(cfg)
    for name, text in sorted(files.items()):
        atomic_write(out / name, text)
    records = evaluate(files, meta)
    status = overall_status(records)
    summary = {"command": cfg.command, "config": json.loads(cfg.to_json()), "meta": meta,
               "criteria": records, "status": status, "files": sorted(files), "version": __version__}
    prov = {"backend": kernels.BACKEND, "wall_time_s": time.perf_counter() - t0,
            "python": sys.version.split()[0], "platform": platform.platform(),
            "numpy": np.__version__, "base_seed": cfg.base_seed}
    atomic_write(out / "provenance.json", json.dumps(prov, indent=2, sort_keys=True) + "\n")
    atomic_write(summary_path, json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    os.unlink(out / MARKER)
    return {"summary": summary, "provenance": prov, "exit_code": exit_code(status), "output": str(out)}


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def load_run(directory) -> tuple[dict, dict]:
    d = Path(directory)
    if (d / MARKER).exists():
        raise ValueError(f"{d}: run did not complete")
    summary = json.loads((d / SUMMARY).read_text())
    files = {name: (d / name).read_text() for name in summary["files"]}
    return summary, files


def compare_bounds(runs: list) -> list:
    """Re-judge each (name, summary, files) from its CSVs; one row per criterion."""
    seen = {}
    rows = []
    for name, summary, files in runs:
        cmd = summary.get("command")
        if cmd not in RUNNERS:
            raise ValueError(f"{name}: unknown command {cmd!r}")
        key = json.dumps(summary["config"], sort_keys=True)
        if name in seen and seen[name] != key:
            raise ValueError(f"{name}: runs with the same name have different configs")
        seen[name] = key
        for rec in RUNNERS[cmd][1](files, summary["meta"]):
            rows.append({"run": name, "command": cmd, **rec})
    return rows


def build_report(cfg: RunConfig, out: Path) -> dict:
    runs = []
    for path in cfg.inputs:
        summary, files = load_run(path)
        runs.append((str(path), summary, files))
    rows = compare_bounds(runs)
    status = overall_status(rows)
    cols = ["run", "command", "criterion", "observed", "bound", "margin", "gate", "status"]
    atomic_write(out / "report.csv", _rows_csv(cols, ([r[c] for c in cols] for r in rows)))
    summary = {"command": "report", "criteria": rows, "status": status}
    atomic_write(out / "report.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"summary": summary, "exit_code": exit_code(status), "output": str(out)}


def run_from_text(text: str, outdir=None) -> dict:
    return run_command(parse_config(text), outdir)
