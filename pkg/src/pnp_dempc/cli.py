"""Command-line front end: ``pnp-dempc design|simulate|pnp``.

Exit codes: 0 success, 1 bad input (parse errors, unknown ids), 2 design or
plug-and-play rejection, 3 infeasibility during simulation.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import pickle
import sys
import tempfile
from pathlib import Path

import numpy as np

from .lqr import spectral_radius
from .pnp import Network, PlugRejected, UnplugRejected, design_all, plug_in, unplug
from .powernet import SCENARIO_LOADS, LoadSchedule, load_network, scenario
from .rpi import rpi_check, rpi_exact_check
from .sim import SimInfeasible, simulate
from .tube_synth import DesignOptions, DesignRejected, Subsystem

EXIT_OK, EXIT_INPUT, EXIT_REJECTED, EXIT_INFEASIBLE = 0, 1, 2, 3
SNAPSHOT_FORMAT = "pnp-dempc-snapshot"
SNAPSHOT_VERSION = 1
TRACE_HEADER_STATE = "x"
FLOAT_FMT = ".12g"

log = logging.getLogger("pnp_dempc")


class InputError(Exception):
    pass


def _fmt(v):
    return format(float(v), FLOAT_FMT)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj) if np.isfinite(obj) else str(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def _write_json(path, doc):
    _atomic_write(path, json.dumps(_jsonable(doc), indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _atomic_write(path, data, binary=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb" if binary else "w", newline=None if binary else "") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_snapshot(path, net, schedule):
    doc = {"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION, "network": net, "schedule": schedule}
    _atomic_write(path, pickle.dumps(doc), binary=True)


def load_snapshot(path):
    """Read a snapshot written by :func:`save_snapshot` (pickle: trusted files only)."""
    try:
        with open(path, "rb") as fh:
            doc = pickle.load(fh)
    except (OSError, pickle.UnpicklingError, EOFError, AttributeError, ImportError) as exc:
        raise InputError(f"cannot read snapshot {path}: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != SNAPSHOT_FORMAT:
        raise InputError(f"{path} is not a network snapshot")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise InputError(f"unsupported snapshot version {doc.get('version')}")
    return doc["network"], doc["schedule"]


# -- configuration ------------------------------------------------------------

def _options(args, defaults):
    kw = {}
    for key in ("horizon", "delta", "mu_alpha", "mu_beta", "budget"):
        val = getattr(args, key, None)
        if val is None:
            val = defaults.get(key)
        if val is not None:
            kw[key] = int(val) if key in ("horizon", "budget") else float(val)
    unknown = set(defaults) - {"horizon", "delta", "mu_alpha", "mu_beta", "budget"}
    if unknown:
        raise InputError(f"unknown defaults keys: {sorted(unknown)}")
    opts = DesignOptions(**kw)
    if opts.horizon < 1 or opts.delta <= 0 or opts.mu_alpha < 0 or opts.mu_beta < 0 or opts.budget < 1:
        raise InputError("invalid design options")
    return opts


def parse_subsystems(doc):
    """Generic linear network: ``{"subsystems": [{"id", "A", "B", "couplings": {id: A_ij},
    "x_bounds", "u_bounds"}], "defaults": {...}}`` with box constraints and no loads."""
    subs = {}
    for s in doc["subsystems"]:
        extra = set(s) - {"id", "A", "B", "couplings", "x_bounds", "u_bounds"}
        if extra:
            raise ValueError(f"subsystem {s.get('id')}: unknown keys {sorted(extra)}")
        i = int(s["id"])
        if i in subs:
            raise ValueError(f"duplicate subsystem id {i}")
        cpl = {int(j): np.array(M, dtype=float) for j, M in s.get("couplings", {}).items()}
        subs[i] = Subsystem.from_boxes(i, np.array(s["A"], dtype=float), np.array(s["B"], dtype=float), cpl,
                                       s["x_bounds"], s["u_bounds"])
    if doc.get("loads"):
        raise ValueError("generic subsystem networks take no load schedule")
    return subs, dict(doc.get("defaults", {}))


def _read_network(path, args):
    with open(path) as fh:
        doc = json.load(fh)
    if isinstance(doc, dict) and "subsystems" in doc:
        subs, defaults = parse_subsystems(doc)
        return Network(subs, options=_options(args, defaults)), LoadSchedule()
    cat, members, schedule, defaults = load_network(path)
    net = Network(cat.subsystems(members), param_dependent=True, options=_options(args, defaults), catalogue=cat)
    return net, schedule


def _load_source(args):
    """Network and load schedule from ``--snapshot``, ``--network`` or ``--scenario``."""
    if getattr(args, "snapshot", None):
        net, schedule = load_snapshot(args.snapshot)
        if any(getattr(args, k, None) is not None for k in ("horizon", "delta", "mu_alpha", "mu_beta", "budget")):
            net.options = _options(args, {})
        return net, schedule, True
    if args.network:
        try:
            net, schedule = _read_network(args.network, args)
        except (OSError, json.JSONDecodeError, ValueError, TypeError, KeyError) as exc:
            raise InputError(f"cannot load network {args.network}: {exc}") from exc
        return net, schedule, False
    sid = args.scenario if args.scenario is not None else 1
    net, schedule = scenario(sid)
    net.options = _options(args, {})
    return net, schedule, False


def _design(net):
    design_all(net)


def design_report(net, mc_samples=0, seed=0):
    G, schur = net.gamma()
    areas = {}
    rng = np.random.default_rng(seed)
    for i in net.ids:
        c, sub = net.controllers[i], net.subsystems[i]
        Phi = c.closed_loop(sub)
        entry = {
            "alpha": c.alpha,
            "lhat": c.lhat,
            "beta": c.beta,
            "delta": c.delta,
            "K": c.K,
            "Q_diag": np.diag(c.stage_weights.Q),
            "R_diag": np.diag(c.stage_weights.R),
            "closed_loop_spectral_radius": spectral_radius(Phi),
            "rpi_steps": c.Z.steps,
            "rpi_excess": c.Z.delta,
            "rpi_generators": c.Z.set.order,
            "rpi_box_halfwidths": np.abs(c.Z.set.G).sum(axis=1),
            "rpi_exact_check": rpi_exact_check(Phi, c.W, c.Z.set),
            "xhat_scale": c.Xhat.scale,
            "v_normals": c.V.normals,
            "v_offsets": c.V.offsets,
            "terminal_faces": c.terminal_set.n_faces,
            "fingerprint": c.fingerprint(),
        }
        if mc_samples:
            entry["rpi_monte_carlo"] = rpi_check(Phi, c.W, c.Z.set, samples=mc_samples, rng=rng)
        areas[i] = entry
    return {
        "ids": net.ids,
        "areas": areas,
        "gamma": G,
        "gamma_spectral_radius": spectral_radius(G) if G.size else 0.0,
        "gamma_schur": schur,
        "options": {k: getattr(net.options, k) for k in ("horizon", "delta", "mu_alpha", "mu_beta", "budget")},
    }


# -- commands -------------------------------------------------------------------

def cmd_design(args):
    net, schedule, designed = _load_source(args)
    if not designed or not net.controllers:
        try:
            _design(net)
        except DesignRejected as exc:
            report = {"status": "rejected", "reason": exc.reason, "subsystem": exc.sub_id, "message": str(exc)}
            _emit(args, "design.json", report)
            return EXIT_REJECTED
    report = {"status": "ok", **design_report(net, args.mc_samples, args.seed)}
    _emit(args, "design.json", report)
    if args.out:
        save_snapshot(Path(args.out) / "network.pkl", net, schedule)
    return EXIT_OK


def write_trace_csv(path, tr):
    n = tr.x.shape[2]
    header = ["t", "area"] + [f"{TRACE_HEADER_STATE}{k + 1}" for k in range(n)] + ["u", "load", "vopt", "cost"]
    lines = [",".join(header)]
    for k in range(len(tr)):
        for a, i in enumerate(tr.ids):
            row = [_fmt(tr.t[k]), str(i)] + [_fmt(v) for v in tr.x[k, a]]
            row += [_fmt(tr.u[k, a, 0]), _fmt(tr.load[k, a, 0] if tr.load.shape[2] else 0.0),
                    _fmt(tr.vopt[k, a, 0]), _fmt(tr.cost[k, a])]
            lines.append(",".join(row))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_ties_csv(path, tr):
    lines = ["t,i,j,ptie"]
    for k in range(len(tr)):
        for l, (i, j, _) in enumerate(tr.ties):
            lines.append(",".join([_fmt(tr.t[k]), str(i), str(j), _fmt(tr.ptie[k, l])]))
    _atomic_write(path, "\n".join(lines) + "\n")


def trace_summary(net, tr):
    out = {"mode": tr.mode, "steps": len(tr), "t_final": float(tr.t[-1]) if len(tr) else None, "areas": {}}
    for a, i in enumerate(tr.ids):
        sub = net.subsystems[i]
        x, u = tr.x[:, a], tr.u[:, a, :sub.m]
        xm = 1.0 - (x @ sub.Xh.normals.T).max(initial=-np.inf) if len(tr) else None
        um = 1.0 - (u @ sub.U.normals.T).max(initial=-np.inf) if len(tr) else None
        out["areas"][i] = {
            "min_state_margin": xm,
            "min_input_margin": um,
            "final_state_norm": float(np.linalg.norm(x[-1])) if len(tr) else None,
            "final_abs_omega": float(abs(x[-1, 1])) if len(tr) and x.shape[1] > 1 else None,
            "iae_omega": float(np.abs(x[:, 1]).sum() * (tr.t[1] - tr.t[0])) if len(tr) > 1 and x.shape[1] > 1 else 0.0,
        }
    if tr.ptie is not None and len(tr) and tr.ties:
        out["final_abs_tie_power"] = float(np.abs(tr.ptie[-1]).max())
    return out


def cmd_simulate(args):
    net, schedule, designed = _load_source(args)
    if args.zero_load:
        schedule = LoadSchedule()
    if not net.controllers:
        try:
            _design(net)
        except DesignRejected as exc:
            _emit(args, None, {"status": "rejected", "reason": exc.reason, "subsystem": exc.sub_id})
            return EXIT_REJECTED
    mode = {"dec": "decentralized", "cen": "centralized"}[args.mode]
    code, status = EXIT_OK, {"status": "ok"}
    try:
        tr = simulate(net, schedule, args.t_end, mode, horizon=args.horizon)
    except SimInfeasible as exc:
        tr = exc.trace
        code = EXIT_INFEASIBLE
        status = {"status": "infeasible", "subsystem": exc.sub_id, "time": exc.time}
    out = Path(args.out) if args.out else Path(".")
    write_trace_csv(out / f"trace_{args.mode}.csv", tr)
    write_ties_csv(out / f"ties_{args.mode}.csv", tr)
    summary = {**status, **trace_summary(net, tr)}
    _write_json(out / f"summary_{args.mode}.json", summary)
    print(json.dumps(_jsonable(summary), indent=2, sort_keys=True, ensure_ascii=False))
    return code


def cmd_pnp(args):
    net, schedule, designed = _load_source(args)
    if not net.controllers:
        try:
            _design(net)
        except DesignRejected as exc:
            _emit(args, "pnp.json", {"status": "rejected", "reason": exc.reason, "subsystem": exc.sub_id})
            return EXIT_REJECTED
    before = net.hashes()
    target = args.target
    try:
        if args.op == "plug":
            if target in net.subsystems:
                raise InputError(f"subsystem {target} is already connected")
            cat = net.catalogue
            if cat is None or target not in getattr(cat, "areas", {}):
                raise InputError(f"unknown subsystem id {target}")
            new = cat.build(target, frozenset(net.subsystems) | {target})
            rep = plug_in(net, new)
            report = {"status": "ok", "op": "plug", "target": target, "redesigned": list(rep.redesigned),
                      "gamma_rho_before": rep.gamma_before, "gamma_rho_after": rep.gamma_after}
        else:
            if target not in net.subsystems:
                raise InputError(f"unknown subsystem id {target}")
            rep = unplug(net, target, retune=args.retune)
            report = {"status": "ok", "op": "unplug", "target": target, "redesigned": list(rep.redesigned),
                      "retune_suggested": list(rep.retune_suggested),
                      "gamma_rho_before": rep.gamma_before, "gamma_rho_after": rep.gamma_after}
    except (PlugRejected, UnplugRejected) as exc:
        report = {"status": "rejected", "op": args.op, "target": target, "reason": exc.step,
                  "subsystem": exc.sub_id, "message": str(exc)}
        _emit(args, "pnp.json", report)
        return EXIT_REJECTED
    after = net.hashes()
    report["changed_controllers"] = sorted(i for i in set(before) | set(after) if before.get(i) != after.get(i))
    _emit(args, "pnp.json", report)
    if args.snapshot:
        save_snapshot(args.snapshot, net, schedule)
    elif args.out:
        save_snapshot(Path(args.out) / "network.pkl", net, schedule)
    return EXIT_OK


def _emit(args, name, doc):
    print(json.dumps(_jsonable(doc), indent=2, sort_keys=True, ensure_ascii=False))
    if args.out and name:
        _write_json(Path(args.out) / name, doc)


# -- argument parsing -------------------------------------------------------------

def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    src = common.add_mutually_exclusive_group()
    src.add_argument("--scenario", type=int, choices=sorted(SCENARIO_LOADS), help="built-in scenario (default 1)")
    src.add_argument("--network", metavar="FILE", help="custom network JSON")
    src.add_argument("--snapshot", metavar="FILE", help="designed network snapshot")
    common.add_argument("--horizon", type=int, metavar="N", help="prediction horizon (default 20)")
    common.add_argument("--delta", type=_positive_float, help="RPI approximation accuracy (default 1e-4)")
    common.add_argument("--mu-alpha", dest="mu_alpha", type=float, help="tuning weight on alpha (default 1)")
    common.add_argument("--mu-beta", dest="mu_beta", type=float, help="tuning weight on beta (default 1)")
    common.add_argument("--budget", type=int, help="tuning evaluations per subsystem (default 500)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="seed for Monte-Carlo checks")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pnp-dempc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    d = sub.add_parser("design", parents=[common], help="design all controllers and report")
    d.add_argument("--mc-samples", type=int, default=0, help="Monte-Carlo RPI samples per area")
    d.set_defaults(func=cmd_design)
    s = sub.add_parser("simulate", parents=[common], help="closed-loop simulation")
    s.add_argument("--mode", choices=("dec", "cen"), default="dec")
    s.add_argument("--t-end", dest="t_end", type=_positive_float, default=100.0)
    s.add_argument("--zero-load", action="store_true", help="ignore the load schedule")
    s.set_defaults(func=cmd_simulate)
    q = sub.add_parser("pnp", parents=[common], help="plug in or unplug a subsystem")
    q.add_argument("op", choices=("plug", "unplug"))
    q.add_argument("target", type=int)
    q.add_argument("--retune", action="store_true", help="redesign successors after unplugging")
    q.set_defaults(func=cmd_pnp)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (InputError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
