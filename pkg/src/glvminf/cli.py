"""Command-line interface: ``glvminf {fit,cv,test,simulate}``.

Settings come from flags, then an optional ``--config`` file (JSON, or TOML
when ``tomli`` is installed), then defaults. Exit codes: 0 success, 1 usage,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import platform
import sys
import time
import traceback

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "family": "bernoulli-logit",
    "K": None,
    "lam": "cv",
    "lambda_grid": None,
    "alpha": 0.05,
    "correction": "bonferroni",
    "targets": "all",
    "seed": 0,
    "threads": 1,
    "max_outer": 50,
    "tol_outer": 1e-4,
    "box_D": 10.0,
    "M1": None,
    "M2": None,
    "cv_folds": 5,
    "step_rule": "lipschitz",
    "lambda_prime": None,
    "at_null": False,
    "init": "spectral+refine",
    "min_item_responses": 2,
    "min_subject_responses": 10,
    # simulate
    "n": 100, "p": 80, "q": 60, "rho": 0.2, "a": 0.5, "J": 10, "s": 5, "reps": 2,
    "method": "proposed", "sim_max_outer": 10, "cells": None,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _lam(value):
    if value == "cv":
        return value
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--lambda must be a number or 'cv'") from None


def _lam_prime(value):
    if value == "cv":
        return value
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--lambda-prime must be a number or 'cv'") from None


def build_parser():
    p = _Parser(prog="glvminf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    def common(sp):
        sp.add_argument("--config", help="JSON or TOML settings file")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=S)
        sp.add_argument("--threads", type=int, default=S)

    def data_args(sp):
        sp.add_argument("--responses", default=S, help="responses CSV (subjects x items)")
        sp.add_argument("--covariates", default=S, help="covariates CSV (subjects x covariates)")
        sp.add_argument("--family", default=S)
        sp.add_argument("-K", type=int, default=S, dest="K")
        sp.add_argument("--lambda", type=_lam, default=S, dest="lam")
        sp.add_argument("--lambda-grid", type=lambda s: [float(v) for v in s.split(",")], default=S,
                        dest="lambda_grid")
        sp.add_argument("--max-outer", type=int, default=S, dest="max_outer")
        sp.add_argument("--tol-outer", type=float, default=S, dest="tol_outer")
        sp.add_argument("--box-D", type=float, default=S, dest="box_D")
        sp.add_argument("--M1", type=int, default=S)
        sp.add_argument("--M2", type=int, default=S)
        sp.add_argument("--cv-folds", type=int, default=S, dest="cv_folds")
        sp.add_argument("--step-rule", choices=("lipschitz", "backtracking"), default=S, dest="step_rule")
        sp.add_argument("--init", choices=("spectral", "spectral+refine"), default=S)
        sp.add_argument("--min-item-responses", type=int, default=S, dest="min_item_responses")
        sp.add_argument("--min-subject-responses", type=int, default=S, dest="min_subject_responses")

    for name, help_ in (("fit", "fit the model"), ("cv", "cross-validate lambda")):
        sp = sub.add_parser(name, help=help_)
        common(sp)
        data_args(sp)
    sp = sub.add_parser("test", help="debiased tests for covariate effects")
    common(sp)
    data_args(sp)
    sp.add_argument("--fit", dest="fit_dir", default=S, help="reuse a fit directory written by 'fit'")
    sp.add_argument("--alpha", type=float, default=S)
    sp.add_argument("--correction", choices=("none", "bonferroni"), default=S)
    sp.add_argument("--targets", default=S,
                    help="all | items:ID,ID | covariates:NAME,NAME | pairs:ITEM/COV,ITEM/COV")
    sp.add_argument("--lambda-prime", type=_lam_prime, default=S, dest="lambda_prime",
                    help="number, or 'cv' for held-out selection (default: rate rule)")
    sp.add_argument("--at-null", action="store_true", default=S, dest="at_null")
    sp = sub.add_parser("simulate", help="run the Monte Carlo grid")
    common(sp)
    for key in ("n", "p", "q", "K", "J", "s", "reps"):
        sp.add_argument(f"--{key}", type=int, default=S, dest=key)
    sp.add_argument("--rho", type=float, default=S)
    sp.add_argument("--a", type=float, default=S)
    sp.add_argument("--family", default=S)
    sp.add_argument("--lambda", type=_lam, default=S, dest="lam")
    sp.add_argument("--max-outer", type=int, default=S, dest="sim_max_outer")
    sp.add_argument("--method", choices=("proposed", "baseline", "both"), default=S)
    return p


def load_config_file(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if path.endswith(".toml"):
        try:
            import tomli
        except ImportError:
            raise UsageError("TOML config needs the 'tomli' package; use JSON instead") from None
        cfg = tomli.loads(raw.decode())
    else:
        cfg = json.loads(raw.decode())
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a key-value mapping")
    cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    if "lambda" in cfg:
        cfg["lam"] = cfg.pop("lambda")
    unknown = set(cfg) - set(DEFAULTS) - {"responses", "covariates", "fit_dir"}
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    return cfg


def resolve(args) -> dict:
    """Merge flags over config file over defaults."""
    cfg = dict(DEFAULTS)
    if args.config:
        cfg.update(load_config_file(args.config))
    cfg.update({k: v for k, v in vars(args).items() if k != "config"})
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _need(cfg, *keys):
    for k in keys:
        if cfg.get(k) in (None, ""):
            raise UsageError(f"missing required setting '{k}'")
    for k in ("responses", "covariates"):
        if k in keys and not os.path.exists(cfg[k]):
            raise UsageError(f"{k} file not found: {cfg[k]}")
    if "K" in keys and int(cfg["K"]) < 1:
        raise UsageError("K must be at least 1")


def _ingest(cfg):
    from .io import ingest

    return ingest(cfg["responses"], cfg["covariates"], family=cfg["family"],
                  min_item_responses=cfg["min_item_responses"],
                  min_subject_responses=cfg["min_subject_responses"])


def _fit_config(cfg):
    from .altfit import FitConfig

    return FitConfig(lam=cfg["lam"], lambda_grid=cfg["lambda_grid"], M1=cfg["M1"], M2=cfg["M2"],
                     max_outer=cfg["max_outer"], tol_outer=cfg["tol_outer"], box_D=cfg["box_D"],
                     step_rule=cfg["step_rule"], cv_folds=cfg["cv_folds"], seed=cfg["seed"])


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return str(v)


def _save_fit(out, ing, res, cfg):
    from .io import save_params

    meta = {"family": cfg["family"], "lambda": res.lambda_used, "seed": cfg["seed"], "K": int(res.params.K),
            "subject_ids": ing.subject_ids, "item_ids": ing.item_ids, "covariate_names": ing.covariate_names,
            "x_center": ing.x_center.tolist(), "outer_iters": res.outer_iters, "converged": res.converged,
            "clamp_count": res.clamp_count}
    save_params(res.params, os.path.join(out, "fit"), meta)
    _write_json(os.path.join(out, "fit", "trace.json"), res.trace)
    if getattr(res, "cv_table", None):
        _write_cv(out, res.lambda_used, res.cv_table)


def _write_cv(out, lam, table):
    import csv

    with open(os.path.join(out, "cv_table.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "cv_error"])
        for l, e in table:
            w.writerow([repr(l), repr(e)])
    _write_json(os.path.join(out, "cv_choice.json"), {"lambda": lam})


def cmd_fit(cfg, out, state):
    from .altfit import fit

    _need(cfg, "responses", "covariates", "K")
    ing = _ingest(cfg)
    state["n_subjects"], state["n_items"] = ing.data.n, ing.data.q
    state["dropped_items"], state["dropped_subjects"] = ing.dropped_items, ing.dropped_subjects
    res = fit(ing.data, int(cfg["K"]), _fit_config(cfg), init_method=cfg["init"])
    _save_fit(out, ing, res, cfg)
    state["lambda"] = res.lambda_used
    return ing, res


def cmd_cv(cfg, out, state):
    from .altfit import cross_validate

    _need(cfg, "responses", "covariates", "K")
    ing = _ingest(cfg)
    fc = _fit_config({**cfg, "lam": "cv"})
    lam, table = cross_validate(ing.data, int(cfg["K"]), fc, init_method=cfg["init"])
    _write_cv(out, lam, table)
    state["lambda"] = lam


def parse_targets(spec, item_ids, covariate_names):
    """Expand a target spec into ``(item, covariate)`` index pairs."""
    q, p = len(item_ids), len(covariate_names)
    item_pos = {s: j for j, s in enumerate(item_ids)}
    cov_pos = {s: k for k, s in enumerate(covariate_names)}

    def lookup(table, key, what):
        if key not in table:
            raise UsageError(f"unknown {what} {key!r} in --targets")
        return table[key]

    spec = (spec or "all").strip()
    if spec == "all":
        return [(j, k) for j in range(q) for k in range(p)]
    kind, _, rest = spec.partition(":")
    vals = [v.strip() for v in rest.split(",") if v.strip()]
    if kind == "items":
        return [(lookup(item_pos, v, "item"), k) for v in vals for k in range(p)]
    if kind == "covariates":
        return [(j, lookup(cov_pos, v, "covariate")) for j in range(q) for v in vals]
    if kind == "pairs":
        out = []
        for v in vals:
            it, sep, cv = v.partition("/")
            if not sep:
                raise UsageError(f"pair {v!r} must look like ITEM/COVARIATE")
            out.append((lookup(item_pos, it, "item"), lookup(cov_pos, cv, "covariate")))
        return out
    raise UsageError(f"cannot parse --targets {spec!r}")


def cmd_test(cfg, out, state):
    from .altfit import FitResult
    from .debias import screen
    from .io import load_params, write_counts, write_heatmap, write_reports

    _need(cfg, "responses", "covariates")
    if cfg.get("fit_dir"):
        ing = _ingest(cfg)
        params, meta = load_params(os.path.join(cfg["fit_dir"], "fit"))
        if meta["item_ids"] != ing.item_ids or meta["subject_ids"] != ing.subject_ids:
            raise UsageError("fit directory does not match the ingested data")
        res = FitResult(params, meta["outer_iters"], [], meta["lambda"], meta["clamp_count"], meta["converged"])
    else:
        _need(cfg, "K")
        ing, res = cmd_fit(cfg, out, state)
    targets = parse_targets(cfg["targets"], ing.item_ids, ing.covariate_names)
    sr = screen(ing.data, res, targets, lambda_prime=cfg["lambda_prime"], alpha=cfg["alpha"],
                correction=cfg["correction"], at_null=bool(cfg["at_null"]))
    write_reports(os.path.join(out, "reports.csv"), sr.reports, ing.item_ids, ing.covariate_names)
    write_counts(os.path.join(out, "biased_item_counts.csv"), sr.biased_item_counts(ing.data.p),
                 ing.covariate_names)
    write_heatmap(os.path.join(out, "heatmap_long.csv"), sr.reports, ing.item_ids, ing.covariate_names)
    state["n_targets"] = len(targets)
    state["n_flagged"] = int(sum(sr.flags))
    state["n_target_errors"] = sum(bool(r.error) for r in sr.reports)


def cmd_simulate(cfg, out, state):
    from .simlab import SimConfig, run_grid

    base = {k: cfg[k] for k in ("n", "p", "q", "rho", "a", "J", "s", "reps", "family", "seed")}
    base["K"] = 3 if cfg["K"] is None else int(cfg["K"])
    base["max_outer"] = cfg["sim_max_outer"]
    base["lam"] = "cv-first" if cfg["lam"] == "cv" else cfg["lam"]
    if cfg["lambda_grid"]:
        base["lambda_grid"] = cfg["lambda_grid"]
    cells = cfg["cells"] or [{}]
    cfgs = [SimConfig(**{**base, **c}) for c in cells]
    methods = ("proposed", "baseline") if cfg["method"] == "both" else (cfg["method"],)
    rows = []
    for m in methods:
        rows += run_grid(cfgs, m, out_dir=out, workers=int(cfg["threads"]))
    state["rows"] = len(rows)
    state["reps_failed"] = int(sum(r["reps_failed"] for r in rows))


COMMANDS = {"fit": cmd_fit, "cv": cmd_cv, "test": cmd_test, "simulate": cmd_simulate}


def run(argv=None) -> int:
    from . import __version__
    from ._solvers import NumericalError
    from .debias import DegenerateInformationError
    from .families import FamilyDomainError
    from .io import DataError
    from .model import DimensionError

    t0 = time.time()
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
    except UsageError as exc:
        print(f"glvminf: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    state = {}
    status, code, message = "ok", EXIT_OK, ""
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(int(cfg["threads"]) if cfg["command"] != "simulate" else 1):
            COMMANDS[cfg["command"]](cfg, out, state)
    except UsageError as exc:
        status, code, message = "usage error", EXIT_USAGE, str(exc)
    except (DataError, FamilyDomainError, DimensionError) as exc:
        status, code, message = "data error", EXIT_DATA, str(exc)
    except (NumericalError, FloatingPointError, DegenerateInformationError, np.linalg.LinAlgError) as exc:
        status, code, message = "numerical failure", EXIT_NUMERIC, str(exc)
    except ValueError as exc:
        status, code, message = "data error", EXIT_DATA, str(exc)
    if code:
        print(f"glvminf: {status}: {message}", file=sys.stderr)
        if os.environ.get("GLVMINF_DEBUG"):
            traceback.print_exc()
    manifest = {
        "command": cfg["command"], "status": status, "exit_code": code, "message": message,
        "partial": code != EXIT_OK, "config": cfg, "seed": cfg["seed"], "state": state,
        "versions": {"glvminf": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "wall_time_s": time.time() - t0,
    }
    _write_json(os.path.join(out, "manifest.json"), manifest)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
