"""Monte Carlo laboratory for the simulation design.

``generate`` draws one replicate, ``align`` resolves the rotational
indeterminacy of the latent factors, ``evaluate`` turns a screening result
into rejection rates and errors, and ``run_grid`` runs seeded, resumable
replications and aggregates them into a table with Monte Carlo standard
errors.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .altfit import (
    FitConfig,
    FitResult,
    alternate,
    baseline_result,
    cross_validate,
    cross_validate_baseline,
)
from .debias import screen
from .families import get_family
from .init import initialize
from .model import DataSet, ParamSet

METHODS = ("proposed", "baseline")
METRICS = ("type1", "power", "mse_B", "coverage", "align_err_U", "align_err_Gamma", "est_err")


def _default_null_items(q, J):
    start = 50 if q >= 60 else max(J, (5 * q) // 6)
    return list(range(start, min(start + 10, q)))


@dataclass
class SimConfig:
    """One design cell plus the fitting settings used on it.

    ``lam`` is a number, ``"cv"`` (cross-validate every replicate) or
    ``"cv-first"`` (cross-validate on replicate 0 and reuse that value).
    Blocks are lists of 0-based ``(item, covariate)`` pairs; ``None`` gives
    the defaults ``[10] x [10]`` for power and items ``51..60`` for type I.
    """

    n: int = 300
    p: int = 80
    q: int = 60
    K: int = 3
    rho: float = 0.2
    a: float = 0.5
    J: int = 10
    s: int = 5
    intercept: float = 1.0
    family: str = "bernoulli-logit"
    reps: int = 50
    seed: int = 0
    null_block: list = None
    signal_block: list = None
    lam: object = "cv-first"
    lambda_grid: list = None
    max_outer: int = 10
    tol_outer: float = 1e-4
    box_D: float = 10.0
    cv_folds: int = 5
    alpha: float = 0.05
    lambda_prime: object = "cv"  # number, None (rate rule) or "cv"
    inference: bool = True

    def __post_init__(self):
        if min(self.n, self.p, self.q) < 1 or self.K < 0:
            raise ValueError("dimensions must be positive")
        if not 0 <= self.rho < 1:
            raise ValueError("rho must lie in [0, 1)")
        if not (0 <= self.J <= self.q and 0 <= self.s <= self.p):
            raise ValueError("need J <= q and s <= p")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        get_family(self.family)
        if self.signal_block is None:
            # non-zero entries of the 10 x 10 corner
            self.signal_block = [(j, k) for j in range(min(10, self.J)) for k in range(min(10, self.s))]
        if self.null_block is None:
            self.null_block = [(j, k) for j in _default_null_items(self.q, self.J) for k in range(min(10, self.p))]
        self.signal_block = [tuple(int(v) for v in t) for t in self.signal_block]
        self.null_block = [tuple(int(v) for v in t) for t in self.null_block]
        for j, k in self.signal_block + self.null_block:
            if not (0 <= j < self.q and 0 <= k < self.p):
                raise ValueError(f"block entry ({j}, {k}) out of range")
        support = {(j, k) for j in range(self.J) for k in range(self.s)}
        if any(t in support for t in self.null_block):
            raise ValueError("null_block intersects the true support")
        if any(t not in support for t in self.signal_block):
            raise ValueError("signal_block must lie inside the true support")

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def fit_config(self, lam=None) -> FitConfig:
        return FitConfig(
            lam=self.lam if lam is None else lam,
            lambda_grid=self.lambda_grid,
            max_outer=self.max_outer,
            tol_outer=self.tol_outer,
            box_D=self.box_D,
            cv_folds=self.cv_folds,
            seed=self.seed,
        )


@dataclass
class SimMetrics:
    type1: float
    power: float
    mse_B: float
    coverage: float
    align_err_U: float = float("nan")
    align_err_Gamma: float = float("nan")
    est_err: float = float("nan")
    cells: dict = field(default_factory=dict)


def covariance(cfg: SimConfig) -> np.ndarray:
    """AR(1) covariance of ``(X_i, U_i)``: ``Sigma_ab = rho^|a - b|``."""
    d = cfg.p + cfg.K
    idx = np.arange(d)
    return cfg.rho ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def _rng(cfg: SimConfig, rep_index):
    return np.random.default_rng([int(cfg.seed), int(rep_index)])


def generate(cfg: SimConfig, rep_index: int):
    """One replicate: ``(DataSet, truth ParamSet)``, deterministic in ``(seed, rep_index)``."""
    rng = _rng(cfg, rep_index)
    n, p, q, K = cfg.n, cfg.p, cfg.q, cfg.K
    d = p + K
    # stationary AR(1) recursion across the p + K coordinates
    E = rng.standard_normal((n, d))
    XU = np.empty((n, d))
    XU[:, 0] = E[:, 0]
    c = math.sqrt(1.0 - cfg.rho ** 2)
    for a in range(1, d):
        XU[:, a] = cfg.rho * XU[:, a - 1] + c * E[:, a]
    X, U = XU[:, :p], XU[:, p:]
    Gamma = rng.standard_normal((q, K))
    B = np.zeros((q, p))
    B[:cfg.J, :cfg.s] = rng.uniform(cfg.a, cfg.a + 0.5, (cfg.J, cfg.s))
    beta0 = np.full(q, float(cfg.intercept))
    truth = ParamSet(beta0, B, Gamma, U)
    W = beta0[None, :] + U @ Gamma.T + X @ B.T
    fam = get_family(cfg.family)
    Y = fam.sample(W, rng)
    return DataSet(Y, np.ones((n, q), dtype=bool), X, cfg.family), truth


def align(U_hat, U_true):
    """Least-squares ``G`` minimizing ``||U_hat G' - U_true||_F`` and the scaled error."""
    U_hat = np.asarray(U_hat, dtype=float)
    U_true = np.asarray(U_true, dtype=float)
    if U_hat.shape != U_true.shape:
        raise ValueError(f"shape mismatch {U_hat.shape} vs {U_true.shape}")
    if np.linalg.matrix_rank(U_hat) < U_hat.shape[1]:
        raise np.linalg.LinAlgError("U_hat is rank deficient")
    Gt, *_ = np.linalg.lstsq(U_hat, U_true, rcond=None)
    err = np.linalg.norm(U_hat @ Gt - U_true) / math.sqrt(U_hat.shape[0])
    return Gt.T, float(err)


def align_gamma(Gamma_hat, Gamma_true, G):
    """Loading error ``||Gamma_hat G^{-1} - Gamma_true||_F / sqrt(q)`` under the latent alignment."""
    Gamma_hat = np.asarray(Gamma_hat, dtype=float)
    return float(np.linalg.norm(Gamma_hat @ np.linalg.inv(G) - Gamma_true) / math.sqrt(Gamma_hat.shape[0]))


def evaluate(reports, truth: ParamSet, cfg: SimConfig, params: ParamSet = None) -> SimMetrics:
    """Rejection rates over the blocks, CI coverage, and estimation errors.

    ``reports`` is a ``ScreenResult`` or a list of ``DebiasReport``; rejections
    use each report's ``flagged`` field.
    """
    reports = getattr(reports, "reports", reports)
    by_cell = {(r.item, r.covariate): r for r in reports}
    missing = [t for t in cfg.signal_block + cfg.null_block if t not in by_cell]
    if missing:
        raise ValueError(f"reports do not cover block cells, e.g. {missing[0]}")
    cells = {t: bool(by_cell[t].flagged) for t in cfg.null_block + cfg.signal_block}
    type1 = float(np.mean([cells[t] for t in cfg.null_block])) if cfg.null_block else float("nan")
    power = float(np.mean([cells[t] for t in cfg.signal_block])) if cfg.signal_block else float("nan")
    cover = [by_cell[t].ci_low <= truth.B[t] <= by_cell[t].ci_high for t in cfg.signal_block]
    coverage = float(np.mean(cover)) if cover else float("nan")
    m = SimMetrics(type1, power, float("nan"), coverage, cells=cells)
    if params is not None:
        _estimation_errors(m, params, truth, cfg)
    return m


def _estimation_errors(m: SimMetrics, params: ParamSet, truth: ParamSet, cfg: SimConfig):
    m.mse_B = float(np.sum((params.B - truth.B) ** 2) / truth.B.size)
    J = max(cfg.J, 1)
    m.est_err = float(np.median(np.linalg.norm(params.B[:J] - truth.B[:J], axis=1)))
    if params.K and params.K == truth.K:
        try:
            G, m.align_err_U = align(params.U, truth.U)
            m.align_err_Gamma = align_gamma(params.Gamma, truth.Gamma, G)
        except np.linalg.LinAlgError:
            pass


# ---------------------------------------------------------------------------
# replication runner
# ---------------------------------------------------------------------------

def select_lambda(cfg: SimConfig, method: str, data: DataSet) -> float:
    fc = cfg.fit_config(lam="cv")
    if method == "baseline":
        lam, _ = cross_validate_baseline(data, fc)
    else:
        lam, _ = cross_validate(data, cfg.K, fc)
    return lam


def _fit(cfg: SimConfig, method: str, data: DataSet, lam: float) -> FitResult:
    if method == "baseline":
        return baseline_result(data, lam)
    init = initialize(data, cfg.K, box_D=cfg.box_D)
    return alternate(data, cfg.K, cfg.fit_config(lam), init, lam=lam)


def run_rep(cfg: SimConfig, method: str, rep_index: int, lam=None) -> dict:
    """Generate, fit, screen and evaluate one replicate; never raises."""
    from threadpoolctl import threadpool_limits

    rec = {"rep": int(rep_index), "method": method, "status": "ok"}
    try:
        with threadpool_limits(1):
            data, truth = generate(cfg, rep_index)
            if lam is None:
                lam = select_lambda(cfg, method, data) if isinstance(cfg.lam, str) else float(cfg.lam)
            res = _fit(cfg, method, data, lam)
            rec["lambda"] = float(lam)
            rec["outer_iters"] = int(res.outer_iters)
            if cfg.inference:
                targets = cfg.signal_block + cfg.null_block
                sr = screen(data, res, targets, lambda_prime=cfg.lambda_prime, alpha=cfg.alpha)
                met = evaluate(sr, truth, cfg, res.params)
                rec["z_true"] = [(r.beta_tilde - truth.B[r.item, r.covariate]) / r.se for r in sr.reports]
                rec["reject"] = [bool(r.flagged) for r in sr.reports]
                rec["covered"] = [bool(r.ci_low <= truth.B[r.item, r.covariate] <= r.ci_high) for r in sr.reports]
            else:
                met = SimMetrics(float("nan"), float("nan"), float("nan"), float("nan"))
                _estimation_errors(met, res.params, truth, cfg)
            for name in METRICS:
                rec[name] = float(getattr(met, name))
    except Exception as exc:  # recorded, counted and excluded downstream
        rec["status"] = "failed"
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def _load_jsonl(path):
    out = {}
    if os.path.exists(path):
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    rec = json.loads(line)
                    out[rec["rep"]] = rec
    return out


def _shared_lambda(cfg, method, out_dir):
    """Lambda chosen on replicate 0 for ``lam='cv-first'``, cached on disk when possible."""
    path = os.path.join(out_dir, f"lambda_{cfg.key()}_{method}.json") if out_dir else None
    if path and os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)["lambda"]
    from threadpoolctl import threadpool_limits

    with threadpool_limits(1):
        data, _ = generate(cfg, 0)
        lam = select_lambda(cfg, method, data)
    if path:
        with open(path, "w") as fh:
            json.dump({"lambda": lam}, fh)
    return lam


def run_reps(cfg: SimConfig, method: str = "proposed", out_dir=None, workers=1) -> list:
    """All replicate records for one cell, resuming from ``out_dir`` if present."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    path = None
    done = {}
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"reps_{cfg.key()}_{method}.jsonl")
        done = _load_jsonl(path)
    todo = [r for r in range(cfg.reps) if r not in done]
    lam = None
    if cfg.lam == "cv-first" and todo:
        lam = _shared_lambda(cfg, method, out_dir)
    elif not isinstance(cfg.lam, str):
        lam = float(cfg.lam)
    if todo:
        fh = open(path, "a") if path else None
        try:
            if workers > 1:
                with ProcessPoolExecutor(max_workers=workers) as ex:
                    futs = [ex.submit(run_rep, cfg, method, r, lam) for r in todo]
                    for fut in futs:
                        rec = fut.result()
                        done[rec["rep"]] = rec
                        if fh:
                            fh.write(json.dumps(rec) + "\n")
                            fh.flush()
            else:
                for r in todo:
                    rec = run_rep(cfg, method, r, lam)
                    done[r] = rec
                    if fh:
                        fh.write(json.dumps(rec) + "\n")
                        fh.flush()
        finally:
            if fh:
                fh.close()
    return [done[r] for r in range(cfg.reps)]


def summarize(cfg: SimConfig, method: str, records: list) -> dict:
    ok = [r for r in records if r["status"] == "ok"]
    row = {"key": cfg.key(), "method": method, "n": cfg.n, "p": cfg.p, "q": cfg.q, "K": cfg.K,
           "rho": cfg.rho, "family": cfg.family, "reps": cfg.reps, "reps_ok": len(ok),
           "reps_failed": len(records) - len(ok)}
    lams = sorted({r["lambda"] for r in ok})
    row["lambda"] = lams[0] if len(lams) == 1 else float("nan")
    for name in METRICS:
        vals = np.array([r[name] for r in ok], dtype=float)
        vals = vals[np.isfinite(vals)]
        if vals.size:
            row[f"{name}_mean"] = float(vals.mean())
            row[f"{name}_se"] = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else float("nan")
            row[f"{name}_median"] = float(np.median(vals))
        else:
            row[f"{name}_mean"] = row[f"{name}_se"] = row[f"{name}_median"] = float("nan")
    return row


def run_grid(cfgs, method="proposed", out_dir=None, workers=1) -> list:
    """Aggregate rows (means, Monte Carlo SEs, medians) for each config.

    With ``out_dir`` the per-replicate records are appended to JSONL files as
    they finish (so an interrupted grid resumes), and ``table.csv``,
    ``table_long.csv`` and ``manifest.json`` are written at the end.
    """
    if isinstance(cfgs, SimConfig):
        cfgs = [cfgs]
    t0 = time.time()
    rows = [summarize(c, method, run_reps(c, method, out_dir, workers)) for c in cfgs]
    if out_dir:
        write_table(rows, os.path.join(out_dir, f"table_{method}.csv"))
        write_long(rows, os.path.join(out_dir, f"table_{method}_long.csv"))
        write_manifest(out_dir, cfgs, method, time.time() - t0, workers)
    return rows


def write_table(rows, path):
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


def write_long(rows, path):
    """Plot-ready panels: one line per (cell, panel) with value and SE."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["panel", "method", "rho", "n", "p", "q", "value", "se"])
        for row in rows:
            for panel in ("type1", "power"):
                w.writerow([panel, row["method"], row["rho"], row["n"], row["p"], row["q"],
                            repr(row[f"{panel}_mean"]), repr(row[f"{panel}_se"])])


def write_manifest(out_dir, cfgs, method, wall, workers):
    from . import __version__

    manifest = {
        "method": method,
        "configs": [asdict(c) | {"key": c.key()} for c in cfgs],
        "versions": {"glvminf": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "workers": workers,
        "wall_time_s": wall,
    }
    with open(os.path.join(out_dir, f"manifest_{method}.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, default=list)
