"""Command-line harness: ``lbscaling <experiment> [flags]`` or ``lbscaling run --config FILE``.

Config files are flat ``key = value`` text; list values are comma-separated
and ``#`` starts a comment. Output files embed the fully resolved config as
``#@ key=value`` header lines, so any output file can itself be passed as
``--config`` to reproduce its data rows.

Exit codes: 0 success, 1 a verified claim failed, 2 config or runtime error.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import json
import logging
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import __version__
from .analysis import (check_drift_bound, make_bound_params, ssc_tail, verify_derived_bounds,
                       verify_identities, verify_stationarity, verify_excess_bound)
from .exact import exact_metrics, solve, transition_edges
from .model import ModelError, make_params
from .policies import Policy, check_pi_membership
from .simulator import SimConfig, estimated_events, simulate_sweep

log = logging.getLogger("lbscaling")

EXPERIMENTS = ("simulate", "exact", "check-pi", "verify", "sweep", "fig-scaling")
SCHEMA_VERSION = 1
BUDGET_EVENTS = 1e10
OUT_DIR_ENV = "LBSCALING_OUT"

METRIC_COLUMNS = [
    "experiment", "policy", "d", "sampling", "N", "alpha", "b", "lambda", "seed", "provenance",
    "ES1", "ES1_se", "ES2", "ES2_se", "ES3", "ES3_se", "ES_total",
    "p_W", "p_W_se", "p_B", "p_B_se", "EW", "EW_se", "Eh1", "Eh1_se", "kbar",
    "scaled_ES2", "scaled_ES2_se", "NES3", "NES3_se",
    "events", "warmup", "horizon", "batches",
    "res_level3", "res_work", "res_little", "res_little_buffer",
]
PI_COLUMNS = [
    "experiment", "policy", "d", "sampling", "N", "alpha", "b", "r", "mode", "member",
    "cond1_holds", "cond1_margin", "cond1_witness",
    "cond2_holds", "cond2_margin", "cond2_witness",
    "cond3_holds", "cond3_margin", "cond3_witness",
]
VERIFY_COLUMNS = [
    "experiment", "policy", "d", "sampling", "N", "alpha", "b", "r", "seed", "claim",
    "premise_holds", "lhs", "rhs", "se", "satisfied", "provenance",
]


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration

def _ints(text):
    return [int(float(x)) for x in _split(text)]


def _floats(text):
    return [float(x) for x in _split(text)]


def _split(text):
    if isinstance(text, (list, tuple)):
        return list(text)
    return [x.strip() for x in str(text).split(",") if x.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off", ""):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if text in (None, "", "none") else float(text)


def _d_value(text):
    return "auto" if str(text).strip().lower() == "auto" else int(float(text))


# key -> (parser, default)
KEYS = {
    "experiment": (str, None),
    "policy": (lambda t: [x.lower() for x in _split(t)], ["jsq"]),
    "d": (_d_value, 2),
    "sampling": (str, "with"),
    "N": (_ints, None),
    "alpha": (_floats, [0.5]),
    "b": (int, 3),
    "r": (int, 1),
    "lambda": (_opt_float, None),
    "horizon": (_opt_float, None),
    "warmup": (_opt_float, None),
    "time_scale": (str, "absolute"),
    "batches": (int, 20),
    "seed": (lambda t: None if t in (None, "", "none") else int(t), None),
    "mode": (str, "aggregate"),
    "r_max": (int, 1),
    "workers": (int, 1),
    "method": (str, "auto"),
    "cap": (lambda t: int(float(t)), 10 ** 7),
    "pi_mode": (str, "analytic"),
    "source": (str, "auto"),
    "exact_max_states": (lambda t: int(float(t)), 20_000),
    "out": (str, None),
    "format": (str, "csv"),
    "yes": (_bool, False),
}
# keys that do not change data rows
_NON_DATA_KEYS = {"out", "format", "yes", "workers"}


def read_config_file(path) -> dict:
    """Parse a flat key=value file, or the embedded config of an output file."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    embedded = bool(lines) and lines[0].startswith("# lbscaling")
    if lines and lines[0].lstrip().startswith("{"):
        meta = json.loads("\n".join(lines)).get("meta", {})
        return {k: v for k, v in meta.get("config", {}).items() if v is not None}
    raw = {}
    for no, line in enumerate(lines, 1):
        if embedded:
            if not line.startswith("#@ "):
                continue
            line = line[3:]
        else:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
        if "=" not in line:
            raise ConfigError(f"{path}:{no}: expected key = value, got {line!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        raw[key] = value
    return raw


def resolve_config(raw: dict) -> dict:
    unknown = sorted(set(raw) - set(KEYS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (parse, default) in KEYS.items():
        value = raw.get(key)
        try:
            cfg[key] = default if value is None else parse(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from exc
    exp = cfg["experiment"]
    if exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {', '.join(EXPERIMENTS)}; got {exp!r}")
    if not cfg["N"]:
        raise ConfigError("grid is empty: give at least one N")
    if not cfg["alpha"]:
        raise ConfigError("grid is empty: give at least one alpha")
    if not cfg["policy"]:
        raise ConfigError("give at least one policy")
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    if cfg["time_scale"] not in ("absolute", "relaxation"):
        raise ConfigError("time_scale must be absolute or relaxation")
    if exp in ("simulate", "sweep", "fig-scaling") and cfg["seed"] is None:
        raise ConfigError(f"seed is mandatory for {exp}")
    return cfg


def config_lines(cfg: dict) -> list:
    def fmt(v):
        if isinstance(v, (list, tuple)):
            return ",".join(fmt(x) for x in v)
        if v is None:
            return "none"
        if isinstance(v, float):
            return repr(v)
        return str(v)
    return [f"{k}={fmt(v)}" for k, v in cfg.items() if k not in _NON_DATA_KEYS]


# ---------------------------------------------------------------------------
# grid helpers


@dataclass(frozen=True)
class Point:
    policy: Policy
    N: int
    alpha: float


def _policy(name: str, cfg: dict, N: int, alpha: float) -> Policy:
    d = cfg["d"]
    if d == "auto":
        d = max(1, math.ceil(N ** alpha * math.log(N) ** 2))
    return Policy.parse(name, d=d, sampling=cfg["sampling"])


def _grid(cfg: dict):
    for name in cfg["policy"]:
        for alpha in cfg["alpha"]:
            for N in cfg["N"]:
                yield Point(_policy(name, cfg, N, alpha), N, alpha)


def _params(cfg, pt: Point):
    return make_params(pt.N, pt.alpha, cfg["b"], cfg["lambda"])


def _sim_config(cfg, params) -> SimConfig:
    scale = 1.0
    if cfg["time_scale"] == "relaxation":
        scale = max(1.0, params.N ** (2.0 * params.alpha - 1.0))
    warmup = None if cfg["warmup"] is None else cfg["warmup"] * scale
    horizon = None if cfg["horizon"] is None else cfg["horizon"] * scale
    return SimConfig(seed=cfg["seed"], horizon=horizon, warmup=warmup, batches=cfg["batches"],
                     mode=cfg["mode"], r_max=max(cfg["r_max"], cfg["r"]),
                     kbar=32.0 * max(cfg["r_max"], cfg["r"]) * cfg["b"] + 1.0)


def _base_row(cfg, pt: Point, params):
    return {
        "experiment": cfg["experiment"], "policy": pt.policy.kind,
        "d": pt.policy.d if pt.policy.kind == "pod" else "",
        "sampling": ("with" if pt.policy.replace else "without") if pt.policy.kind == "pod" else "",
        "N": pt.N, "alpha": pt.alpha, "b": params.b, "lambda": params.lam,
    }


def metrics_row(cfg, pt, params, m, residuals=None) -> dict:
    row = _base_row(cfg, pt, params)
    es = list(m.ES) + [0.0] * 3
    es_se = list(m.ES_se) + [0.0] * 3
    scale = pt.N ** (1.0 - params.alpha)
    row.update({
        "seed": "" if m.exact else m.info.get("seed"),
        "provenance": "exact" if m.exact else f"simulated-{m.info.get('mode')}",
        "ES1": es[0], "ES1_se": es_se[0], "ES2": es[1], "ES2_se": es_se[1],
        "ES3": es[2], "ES3_se": es_se[2], "ES_total": m.ES_total,
        "p_W": m.p_W, "p_W_se": m.p_W_se, "p_B": m.p_B, "p_B_se": m.p_B_se,
        "EW": m.EW, "EW_se": m.EW_se, "Eh1": m.Eh[0], "Eh1_se": m.Eh_se[0], "kbar": m.kbar,
        "scaled_ES2": scale * es[1], "scaled_ES2_se": scale * es_se[1],
        "NES3": pt.N * es[2], "NES3_se": pt.N * es_se[2],
        "events": m.events, "warmup": m.info.get("warmup", ""),
        "horizon": m.info.get("horizon", ""), "batches": m.info.get("batches", ""),
    })
    residuals = residuals or {}
    for key, claim in (("res_level3", "level3-balance"), ("res_work", "work-conservation"),
                       ("res_little", "little"), ("res_little_buffer", "little-buffer")):
        row[key] = residuals.get(claim, "")
    return row


def _residuals(reports) -> dict:
    return {r.claim: r.lhs - r.rhs for r in reports}


# ---------------------------------------------------------------------------
# experiments


def run_exact(cfg):
    rows = []
    for pt in _grid(cfg):
        params = _params(cfg, pt)
        space, Q, st = solve(params, pt.policy, method=cfg["method"], cap=cfg["cap"])
        m = exact_metrics(space, st, pt.policy, params, r_max=max(cfg["r_max"], cfg["r"]))
        rows.append(metrics_row(cfg, pt, params, m,
                                _residuals(verify_identities(m, pt.policy, params))))
    return METRIC_COLUMNS, rows, {}


def _simulate_points(cfg, points):
    jobs = []
    for pt in points:
        params = _params(cfg, pt)
        jobs.append((pt.policy, params, _sim_config(cfg, params)))
    total = sum(estimated_events(p, c) for _, p, c in jobs)
    log.info("estimated events: %.3g", total)
    if total > BUDGET_EVENTS and not cfg["yes"]:
        raise BudgetRefused(f"estimated {total:.3g} events exceeds {BUDGET_EVENTS:.0e}; "
                            "pass --yes to proceed")
    results = simulate_sweep(jobs, master_seed=cfg["seed"], workers=cfg["workers"])
    return jobs, results


class BudgetRefused(RuntimeError):
    pass


def run_simulate(cfg):
    points = list(_grid(cfg))
    jobs, results = _simulate_points(cfg, points)
    rows, errors = [], []
    for pt, (_, params, _), res in zip(points, jobs, results):
        if res.ok:
            rows.append(metrics_row(cfg, pt, params, res.estimate,
                                    _residuals(verify_identities(res.estimate, pt.policy, params))))
        else:
            errors.append({"policy": pt.policy.label, "N": pt.N, "alpha": pt.alpha,
                           "error": res.error.splitlines()[0]})
    return METRIC_COLUMNS, rows, {"errors": errors} if errors else {}


def flatness(rows) -> list:
    """max/min of the scaled E[S_2] across N, per (policy, alpha)."""
    groups = {}
    for row in rows:
        groups.setdefault((row["policy"], row["d"], row["alpha"]), []).append(row["scaled_ES2"])
    out = []
    for (policy, d, alpha), vals in groups.items():
        lo, hi = min(vals), max(vals)
        ratio = hi / lo if lo > 0 else math.inf
        out.append({"policy": policy, "d": d, "alpha": alpha, "n_points": len(vals),
                    "max_over_min": ratio})
    return out


def run_fig_scaling(cfg):
    columns, rows, meta = run_simulate(cfg)
    meta["flatness"] = flatness(rows)
    return columns, rows, meta


def run_check_pi(cfg):
    rows = []
    for pt in _grid(cfg):
        params = _params(cfg, pt)
        rep = check_pi_membership(pt.policy, params, cfg["r"], mode=cfg["pi_mode"], cap=cfg["cap"])
        row = _base_row(cfg, pt, params)
        row.pop("lambda")
        row.update({"r": cfg["r"], "mode": rep.mode, "member": rep.member})
        for name in ("cond1", "cond2", "cond3"):
            c = getattr(rep, name)
            row[f"{name}_holds"] = c.holds
            row[f"{name}_margin"] = c.margin
            row[f"{name}_witness"] = " ".join(map(str, c.witness.counts)) if c.witness else ""
        rows.append(row)
    return PI_COLUMNS, rows, {}


def run_verify(cfg):
    r = cfg["r"]
    rows, failed = [], []
    for pt in _grid(cfg):
        params = _params(cfg, pt)
        bp = make_bound_params(r, params)
        n_states = math.comb(pt.N + params.b, params.b)
        use_exact = cfg["source"] == "exact" or (
            cfg["source"] == "auto" and n_states <= cfg["exact_max_states"])
        reports = []
        seed = ""
        if use_exact:
            space, Q, st = solve(params, pt.policy, method=cfg["method"], cap=cfg["cap"])
            m = exact_metrics(space, st, pt.policy, params, r_max=r, kbar=bp.k)
            edges = transition_edges(space, pt.policy, params)
            reports += verify_stationarity(space, st, pt.policy, params, bp, edges)
            reports.append(ssc_tail(space, st, bp, params))
            reports.append(check_drift_bound(space, pt.policy, params, bp, edges))
        else:
            if cfg["seed"] is None:
                raise ConfigError("seed is mandatory when verify falls back to simulation")
            sim_cfg = _sim_config(cfg, params)
            res = simulate_sweep([(pt.policy, params, sim_cfg)], master_seed=cfg["seed"])[0]
            if not res.ok:
                raise RuntimeError(res.error)
            m, seed = res.estimate, cfg["seed"]
        reports.append(verify_excess_bound(m, params, bp))
        reports += verify_derived_bounds(m, params, bp)
        reports += verify_identities(m, pt.policy, params)
        base = _base_row(cfg, pt, params)
        base.pop("lambda")
        for rep in reports:
            row = dict(base, r=r, seed=seed, claim=rep.claim, premise_holds=rep.premise_holds,
                       lhs=rep.lhs, rhs=rep.rhs, se=rep.se,
                       satisfied="" if rep.satisfied is None else rep.satisfied,
                       provenance=rep.provenance)
            rows.append(row)
            if rep.satisfied is False:
                failed.append(f"{rep.claim}[{pt.policy.label},N={pt.N},alpha={pt.alpha}]")
    return VERIFY_COLUMNS, rows, {"failed_claims": failed}


RUNNERS = {
    "exact": run_exact,
    "simulate": run_simulate,
    "sweep": run_simulate,
    "fig-scaling": run_fig_scaling,
    "check-pi": run_check_pi,
    "verify": run_verify,
}


# ---------------------------------------------------------------------------
# output


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return "" if v is None else str(v)


def render(cfg, columns, rows, meta) -> str:
    stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    if cfg["format"] == "json":
        doc = {
            "meta": {"generator": f"lbscaling {__version__}", "schema": SCHEMA_VERSION,
                     "generated": stamp,
                     "config": {k: v for k, v in cfg.items() if k not in _NON_DATA_KEYS},
                     **meta},
            "columns": columns,
            "rows": [{c: _json_value(row.get(c, "")) for c in columns} for row in rows],
        }
        return json.dumps(doc, indent=2, default=_json_value) + "\n"
    buf = io.StringIO()
    buf.write(f"# lbscaling {__version__} schema={SCHEMA_VERSION}\n")
    buf.write(f"# generated {stamp}\n")
    for line in config_lines(cfg):
        buf.write(f"#@ {line}\n")
    for key, value in meta.items():
        buf.write(f"# {key}: {json.dumps(value, default=_json_value)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_cell(row.get(c, "")) for c in columns])
    return buf.getvalue()


def _json_value(v):
    if isinstance(v, np.bool_):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        v = float(v)
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def _output_path(cfg) -> str:
    out = cfg["out"]
    if out == "-":
        return out
    if out is None:
        out = f"{cfg['experiment']}.{cfg['format']}"
    if not os.path.isabs(out):
        out = os.path.join(os.environ.get(OUT_DIR_ENV, "."), out)
    return out


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="lbscaling",
        description="Simulate, solve and verify heavy-traffic load balancing.",
        epilog=f"Experiments: {', '.join(EXPERIMENTS)}. Output directory defaults to ${OUT_DIR_ENV}.")
    p.add_argument("command", choices=("run",) + EXPERIMENTS)
    p.add_argument("--config", help="flat key=value config file (or a previous output file)")
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--policy", help="comma list of jsq, i1f, pod, jiq, random")
    p.add_argument("--d", help="choices for pod, or 'auto' for ceil(N^alpha log^2 N)")
    p.add_argument("--sampling", choices=("with", "without"))
    p.add_argument("--N", dest="N", help="comma list of server counts")
    p.add_argument("--alpha", help="comma list of heavy-traffic exponents")
    p.add_argument("--b", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--lambda", dest="lambda_", help="override the load")
    p.add_argument("--horizon", type=float)
    p.add_argument("--warmup", type=float)
    p.add_argument("--time-scale", dest="time_scale", choices=("absolute", "relaxation"))
    p.add_argument("--batches", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=("aggregate", "per-server"))
    p.add_argument("--r-max", dest="r_max", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--method", choices=("auto", "direct", "power"))
    p.add_argument("--cap", type=float)
    p.add_argument("--pi-mode", dest="pi_mode", choices=("analytic", "enumerate"))
    p.add_argument("--source", choices=("auto", "exact", "simulate"))
    p.add_argument("--out", help="output path, '-' for stdout")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--yes", action="store_true", default=None,
                   help="proceed past the 1e10-event simulation budget")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        raw = read_config_file(args.config) if args.config else {}
        if args.command != "run":
            raw["experiment"] = args.command
        elif args.experiment:
            raw["experiment"] = args.experiment
        elif not args.config:
            parser.print_usage(sys.stderr)
            print("lbscaling: error: run needs --config or --experiment", file=sys.stderr)
            return 2
        flags = {k: v for k, v in vars(args).items()
                 if v is not None and k not in ("command", "config", "experiment", "verbose",
                                                "lambda_")}
        if args.lambda_ is not None:
            flags["lambda"] = args.lambda_
        raw.update(flags)
        cfg = resolve_config(raw)
        columns, rows, meta = RUNNERS[cfg["experiment"]](cfg)
        text = render(cfg, columns, rows, meta)
        path = _output_path(cfg)
        if path == "-":
            sys.stdout.write(text)
        else:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            with open(path, "w") as fh:
                fh.write(text)
            log.info("wrote %s", path)
    except (ConfigError, ModelError, BudgetRefused) as exc:
        print(f"lbscaling: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"lbscaling: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    failed = meta.get("failed_claims")
    if failed:
        print("failed claims: " + ", ".join(failed), file=sys.stderr)
        return 1
    errors = meta.get("errors")
    if errors:
        print(f"{len(errors)} sweep point(s) failed", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
