"""Command line entry point: ``transmix <command> [flags]`` or ``transmix <command> --config run.json``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import COMMANDS, ConfigError, parse_config
from .runner import EXIT_CONFIG, run_command


def _kv(text):
    key, _, val = text.partition("=")
    if not key or not _:
        raise argparse.ArgumentTypeError("expected key=value")
    try:
        return key, json.loads(val)
    except json.JSONDecodeError:
        return key, val


def _ints(text):
    return [int(x) for x in text.split(",")]


def _floats(text):
    return [float(x) for x in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="transmix", description="Transport-noise mixing experiments.")
    sub = ap.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", type=Path, help="JSON run configuration; flags override it")
        p.add_argument("--output", "-o", help="output directory (default $TRANSMIX_OUTPUT/<command>)")
        p.add_argument("--d", type=int)
        p.add_argument("--N", type=int, help="lattice box radius (sup norm)")
        p.add_argument("--theta", dest="family", help="noise family")
        p.add_argument("--theta-param", action="append", type=_kv, default=[], metavar="KEY=VALUE")
        p.add_argument("--kappa", help="noise intensity, or 'auto' for euler")
        p.add_argument("--lambda", dest="lam", type=float)
        p.add_argument("--nu", type=float)
        p.add_argument("--alpha", type=float)
        p.add_argument("--p", dest="p_list", type=_floats)
        p.add_argument("--beta", dest="beta_list", type=_floats)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--dt", type=float)
        p.add_argument("--safety", type=float)
        p.add_argument("--stride", dest="sample_stride", type=int)
        p.add_argument("--T", type=float)
        p.add_argument("--paths", type=int)
        p.add_argument("--seed", dest="base_seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--truncation", choices=["conservative", "absorbing"])
        p.add_argument("--margin", type=int)
        p.add_argument("--gate", type=float)
        p.add_argument("--init-r2", dest="init_r2", type=int)
        p.add_argument("--tau", type=float)
        p.add_argument("--lambda-target", dest="lambda_target", type=float)
        p.add_argument("--grid", type=int)
        p.add_argument("--M", type=float)
        p.add_argument("--R", type=float)
        p.add_argument("--refine-paths", dest="refine_paths", type=int)
        p.add_argument("--l", type=_ints, help="step vector, comma separated")
        p.add_argument("--l2", type=_ints)
        p.add_argument("--sequences", type=int)
        p.add_argument("inputs", nargs="*", help="run directories (report only)")
    return ap


_SKIP = {"config", "command", "family", "theta_param", "inputs"}


def config_from_args(ns) -> dict:
    raw = json.loads(ns.config.read_text()) if ns.config else {}
    if raw.get("command", ns.command) != ns.command:
        raise ConfigError([f"config file is for {raw['command']!r}, not {ns.command!r}"])
    raw["command"] = ns.command
    for k, v in vars(ns).items():
        if k in _SKIP or v is None:
            continue
        if k == "kappa" and v != "auto":
            try:
                v = float(v)
            except ValueError:
                raise ConfigError([f"kappa: expected a number or 'auto', got {v!r}"]) from None
        raw[k] = v
    if ns.family or ns.theta_param:
        theta = dict(raw.get("theta", {"family": "unit_shell"}))
        if ns.family:
            theta = {"family": ns.family}
        theta.update(dict(ns.theta_param))
        raw["theta"] = theta
    if ns.inputs:
        raw["inputs"] = list(ns.inputs)
    if ns.command == "euler":
        raw.setdefault("kappa", "auto")
        raw.setdefault("lam", 1.0)
    return raw


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        cfg = parse_config(config_from_args(ns))
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, json.JSONDecodeError) as e:
        print(f"cannot read configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        res = run_command(cfg)
    except (ValueError, FloatingPointError) as e:
        print(f"{cfg.command} failed: {e}", file=sys.stderr)
        return EXIT_CONFIG
    for rec in res["summary"]["criteria"]:
        run = f"{rec['run']} " if "run" in rec else ""
        print(f"{rec['status'].upper():12s} {run}{rec['criterion']}  observed={rec['observed']}  bound={rec['bound']}")
    print(f"{res['summary']['status']}: outputs in {res['output']}")
    return res["exit_code"]


if __name__ == "__main__":
    sys.exit(main())
