"""Reading response/covariate tables and persisting fits and reports."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .families import FamilyDomainError
from .model import DataSet, DimensionError, ParamSet

MISSING = {"", "na", "nan", "null", "."}
_ARRAYS = ("beta0", "B", "Gamma", "U")


class DataError(ValueError):
    """Input files cannot be turned into a valid data set."""


@dataclass
class Ingested:
    data: DataSet
    subject_ids: list
    item_ids: list
    covariate_names: list
    x_center: np.ndarray
    dropped_items: list = field(default_factory=list)
    dropped_subjects: list = field(default_factory=list)


def _read_table(path, allow_missing):
    """Header, row ids and a float matrix (NaN for missing cells if allowed)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: file is empty")
    header = [h.strip() for h in rows[0][1:]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    ids, values = [], []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header) + 1:
            raise DataError(f"{path}: row {r} has {len(row) - 1} values, header has {len(header)}")
        ids.append(row[0].strip())
        vals = []
        for c, cell in enumerate(row[1:]):
            s = cell.strip()
            if s.lower() in MISSING:
                if not allow_missing:
                    raise DataError(f"{path}: missing value at row {r}, column {c + 2} ({header[c]!r})")
                vals.append(np.nan)
                continue
            try:
                vals.append(float(s))
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric value {s!r} at row {r}, column {c + 2} ({header[c]!r})"
                ) from None
        values.append(vals)
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate subject ids")
    M = np.array(values, dtype=float).reshape(len(ids), len(header))
    if not allow_missing and not np.all(np.isfinite(M)):
        r, c = np.argwhere(~np.isfinite(M))[0]
        raise DataError(f"{path}: non-finite value at row {r + 2}, column {c + 2}")
    return header, ids, M


def clean_mask(mask, min_item_responses=2, min_subject_responses=10):
    """Iteratively drop sparse items, then sparse subjects, until nothing changes.

    Returns boolean keep-vectors ``(rows, cols)``.
    """
    rows = np.ones(mask.shape[0], dtype=bool)
    cols = np.ones(mask.shape[1], dtype=bool)
    while True:
        sub = mask[np.ix_(rows, cols)]
        bad_cols = sub.sum(axis=0) < min_item_responses
        if bad_cols.any():
            cols[np.flatnonzero(cols)[bad_cols]] = False
            continue
        bad_rows = sub.sum(axis=1) < min_subject_responses
        if bad_rows.any():
            rows[np.flatnonzero(rows)[bad_rows]] = False
            continue
        return rows, cols


def ingest(responses_path, covariates_path, family="bernoulli-logit", min_item_responses=2,
           min_subject_responses=10, center=True) -> Ingested:
    """Join responses and covariates on subject id, clean, and center covariates."""
    item_ids, subj, R = _read_table(responses_path, allow_missing=True)
    cov_names, cov_subj, X = _read_table(covariates_path, allow_missing=False)
    if not item_ids:
        raise DataError(f"{responses_path}: no item columns")
    pos = {s: i for i, s in enumerate(cov_subj)}
    missing = [s for s in subj if s not in pos]
    if missing:
        raise DataError(f"{len(missing)} subject id(s) in responses not found in covariates, e.g. {missing[:5]}")
    X = X[[pos[s] for s in subj]]
    mask = np.isfinite(R)
    rows, cols = clean_mask(mask, min_item_responses, min_subject_responses)
    if not rows.any() or not cols.any():
        raise DataError("no data left after cleaning")
    Y = np.where(mask, R, 0.0)[np.ix_(rows, cols)]
    mask = mask[np.ix_(rows, cols)]
    X = X[rows]
    x_center = X.mean(axis=0) if center else np.zeros(X.shape[1])
    X = X - x_center
    try:
        data = DataSet(Y, mask, X, family)
    except (FamilyDomainError, DimensionError, ValueError) as exc:
        raise DataError(str(exc)) from exc
    return Ingested(
        data=data,
        subject_ids=[s for s, keep in zip(subj, rows) if keep],
        item_ids=[s for s, keep in zip(item_ids, cols) if keep],
        covariate_names=cov_names,
        x_center=x_center,
        dropped_items=[s for s, keep in zip(item_ids, cols) if not keep],
        dropped_subjects=[s for s, keep in zip(subj, rows) if not keep],
    )


# ---------------------------------------------------------------------------
# parameter persistence
# ---------------------------------------------------------------------------

def save_params(params: ParamSet, directory, meta=None, mirrors=True):
    """Write ``params.bin`` (little-endian float64, C order) with a JSON header.

    ``meta`` (family, lambda, seed, ids, ...) is stored in the header verbatim.
    CSV mirrors are for inspection only.
    """
    os.makedirs(directory, exist_ok=True)
    layout, offset = [], 0
    with open(os.path.join(directory, "params.bin"), "wb") as fh:
        for name in _ARRAYS:
            a = np.ascontiguousarray(getattr(params, name), dtype="<f8")
            fh.write(a.tobytes())
            layout.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.nbytes
    n, q, p, K = params.shape
    header = {"format": "glvminf-params-1", "dtype": "<f8", "dims": {"n": n, "q": q, "p": p, "K": K},
              "arrays": layout, "meta": meta or {}}
    with open(os.path.join(directory, "params.json"), "w") as fh:
        json.dump(header, fh, indent=2)
    if mirrors:
        for name in _ARRAYS:
            a = np.atleast_2d(getattr(params, name))
            np.savetxt(os.path.join(directory, f"{name}.csv"), a if name != "beta0" else a.T,
                       delimiter=",", fmt="%.17g")


def load_params(directory):
    """Inverse of ``save_params``: ``(ParamSet, meta)``."""
    with open(os.path.join(directory, "params.json")) as fh:
        header = json.load(fh)
    if header.get("format") != "glvminf-params-1":
        raise DataError(f"{directory}: unknown parameter format")
    raw = open(os.path.join(directory, "params.bin"), "rb").read()
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"]))
        a = np.frombuffer(raw, dtype="<f8", count=count, offset=entry["offset"])
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(float)
    return ParamSet(**arrays), header["meta"]


# ---------------------------------------------------------------------------
# report tables
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("item", "covariate", "item_id", "covariate_name", "beta_hat", "beta_tilde", "info_F", "se",
                  "z", "p_value", "ci_low", "ci_high", "w_hat_support", "lambda_prime", "n_obs", "flagged",
                  "error")


def write_reports(path, reports, item_ids=None, covariate_names=None):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        for r in reports:
            d = r.as_dict()
            d["item_id"] = item_ids[r.item] if item_ids else r.item
            d["covariate_name"] = covariate_names[r.covariate] if covariate_names else r.covariate
            w.writerow({k: repr(d[k]) if isinstance(d[k], float) else d[k] for k in REPORT_COLUMNS})


def write_counts(path, counts, covariate_names=None):
    """Number of flagged items per covariate."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate", "covariate_name", "biased_items"])
        for k, c in sorted(counts.items()):
            w.writerow([k, covariate_names[k] if covariate_names else k, c])


def write_heatmap(path, reports, item_ids=None, covariate_names=None):
    """Long format (covariate x item) with estimate, CI and flag, ready for a heatmap."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["covariate_name", "item_id", "beta_tilde", "ci_low", "ci_high", "flagged"])
        for r in reports:
            w.writerow([covariate_names[r.covariate] if covariate_names else r.covariate,
                        item_ids[r.item] if item_ids else r.item,
                        repr(r.beta_tilde), repr(r.ci_low), repr(r.ci_high), int(r.flagged)])
