"""Command-line front end for the joint trajectory-relapse model.

Subcommands
-----------
simulate
    Generate a synthetic dataset (CSV files plus the latent truth).
fit
    Fit the joint model to longitudinal/survival/covariate CSV files.
select
    Grid-search the tuning parameters by the information criterion and
    refit at the best candidate.
bootstrap
    Fit, then compute subject-resampling standard errors.
predict
    Fit, then predict relapse-time distributions for new subjects from
    their baseline trajectories.

Every subcommand takes ``--config FILE``, a flat ``key=value`` text
file ('#' starts a comment).  Unknown keys are hard errors.  Every run
writes ``config_resolved`` (all defaults materialized) into the output
directory.  The output directory and worker count can be overridden by
the ``FPCOX_OUT`` / ``FPCOX_WORKERS`` environment variables or the
``--outdir`` / ``--workers`` flags (flag beats environment beats
config).

Exit status: 0 on success, 2 on configuration or data-validation
errors, 3 on convergence failure (best-so-far outputs still written).
"""

import csv
import json
import os
import sys
import warnings
from dataclasses import dataclass

import click
import numpy as np

from .errors import (ConfigError, DataValidationError, FpcoxError,
                     InvalidArgumentError, KnotPlacementError,
                     UnsupportedGridError)
from .inference import bootstrap_se, louis_information, predict_new_subject
from .kernels import derive_rng
from .mcem import FitConfig, fit
from .model import (BINARY, GAUSSIAN, Subject, SurvivalRecord,
                    TrajectorySet, TuningParams)
from .selection import aic, grid_search
from .simulate import SimDesign, generate_dataset

_STREAM_PREDICT_SUBJECT = 7102

_VALIDATION_ERRORS = (ConfigError, DataValidationError,
                      InvalidArgumentError, KnotPlacementError,
                      UnsupportedGridError)


def _f17(x):
    """Floats with 17 significant digits: bit-faithful round trips."""
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# Config schema


@dataclass(frozen=True)
class _Key:
    name: str
    parse: callable
    default: object = None          # None with required=True means "must set"
    required: bool = False
    fmt: callable = str


def _parse_int(s):
    return int(s)


def _parse_float(s):
    return float(s)


def _parse_family(s):
    if s not in (GAUSSIAN, BINARY):
        raise ValueError(f"family must be '{GAUSSIAN}' or '{BINARY}'")
    return s


def _parse_k(s):
    return None if s == "auto" else int(s)


def _fmt_k(v):
    return "auto" if v is None else str(v)


def _parse_sigma_b2(s):
    return "select" if s == "select" else float(s)


def _fmt_sigma_b2(v):
    return "select" if v == "select" else repr(float(v))


def _parse_int_list(s):
    return tuple(int(tok) for tok in s.split(",") if tok.strip())


def _parse_grid(s):
    if s == "auto":
        return None
    return tuple(float(tok) for tok in s.split(",") if tok.strip())


def _fmt_grid(v):
    return "auto" if v is None else ",".join(repr(float(x)) for x in v)


def _fmt_float(v):
    return repr(float(v))


def _fmt_list(v):
    return ",".join(str(x) for x in v)


_IO_KEYS = [
    _Key("longitudinal", str, required=True),
    _Key("survival", str, required=True),
    _Key("covariates", str, required=True),
]
_MODEL_KEYS = [
    _Key("family", _parse_family, GAUSSIAN),
    _Key("seed", _parse_int, 0),
    _Key("q", _parse_int, 8),
    _Key("degree", _parse_int, 3),
    _Key("K", _parse_k, None, fmt=_fmt_k),
    _Key("R0", _parse_int, 100),
    _Key("Rmax", _parse_int, 10000),
    _Key("tol", _parse_float, 1e-3, fmt=_fmt_float),
    _Key("maxIter", _parse_int, 100),
    _Key("outdir", str, required=True),
    _Key("workers", _parse_int, 1),
]
_TUNING_KEYS = [
    _Key("p", _parse_int, 2),
    _Key("h_mu", _parse_float, 1.0, fmt=_fmt_float),
    _Key("h_psi", _parse_float, 1.0, fmt=_fmt_float),
    _Key("sigma_b2", _parse_sigma_b2, 1.0, fmt=_fmt_sigma_b2),
]

_SCHEMAS = {
    "simulate": [
        _Key("family", _parse_family, GAUSSIAN),
        _Key("seed", _parse_int, 0),
        _Key("n_subjects", _parse_int, 100),
        _Key("n_obs", _parse_int, 20),
        _Key("outdir", str, required=True),
        _Key("workers", _parse_int, 1),
    ],
    "fit": _IO_KEYS + _MODEL_KEYS + _TUNING_KEYS,
    "select": _IO_KEYS + _MODEL_KEYS + [
        _Key("p", _parse_int_list, (1, 2, 3), fmt=_fmt_list),
        _Key("h_grid", _parse_grid, None, fmt=_fmt_grid),
        _Key("sigma_b_grid", _parse_grid, None, fmt=_fmt_grid),
    ],
    "bootstrap": _IO_KEYS + _MODEL_KEYS + _TUNING_KEYS + [
        _Key("n_boot", _parse_int, 50),
    ],
    "predict": _IO_KEYS + _MODEL_KEYS + _TUNING_KEYS + [
        _Key("new_longitudinal", str, required=True),
        _Key("new_covariates", str, required=True),
        _Key("alpha", _parse_float, 0.05, fmt=_fmt_float),
        _Key("n_draws", _parse_int, 2000),
    ],
}


def read_config(path, schema):
    """Parse a flat key=value config file against one schema.

    Lines are ``key=value``; blank lines and '#' comments are ignored.
    Unknown or duplicate keys, malformed lines, bad values, and missing
    required keys all raise ConfigError.
    """
    by_name = {key.name: key for key in schema}
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{path}:{lineno}: expected key=value, got {line!r}")
            name, _, text = line.partition("=")
            name, text = name.strip(), text.strip()
            if name not in by_name:
                raise ConfigError(
                    f"{path}:{lineno}: unknown key {name!r} (valid: "
                    f"{', '.join(sorted(by_name))})")
            if name in values:
                raise ConfigError(f"{path}:{lineno}: duplicate key {name!r}")
            try:
                values[name] = by_name[name].parse(text)
            except ValueError as exc:
                raise ConfigError(
                    f"{path}:{lineno}: bad value for {name!r}: {exc}")
    for key in schema:
        if key.name not in values:
            if key.required:
                raise ConfigError(f"{path}: missing required key "
                                  f"{key.name!r}")
            values[key.name] = key.default
    return values


def _apply_overrides(values, schema, workers_flag, outdir_flag):
    names = {key.name for key in schema}
    env_out = os.environ.get("FPCOX_OUT")
    if env_out and "outdir" in names:
        values["outdir"] = env_out
    env_workers = os.environ.get("FPCOX_WORKERS")
    if env_workers and "workers" in names:
        try:
            values["workers"] = int(env_workers)
        except ValueError:
            raise ConfigError(f"FPCOX_WORKERS={env_workers!r} is not an "
                              "integer")
    if outdir_flag is not None and "outdir" in names:
        values["outdir"] = outdir_flag
    if workers_flag is not None and "workers" in names:
        values["workers"] = workers_flag


def _write_config_resolved(values, schema):
    path = os.path.join(values["outdir"], "config_resolved")
    with open(path, "w") as fh:
        for key in sorted(schema, key=lambda k: k.name):
            fh.write(f"{key.name}={key.fmt(values[key.name])}\n")
    return path


# ---------------------------------------------------------------------------
# CSV ingestion


def _read_rows(path, columns):
    """DictReader rows with a strict header; yields (line_number, row)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataValidationError(f"{path}: empty file")
        if list(reader.fieldnames) != list(columns):
            raise DataValidationError(
                f"{path}: expected columns {','.join(columns)}, got "
                f"{','.join(reader.fieldnames)}")
        for lineno, row in enumerate(reader, start=2):
            if any(v is None or v == "" for v in row.values()):
                raise DataValidationError(
                    f"{path}: row {lineno}: missing field")
            yield lineno, row


def _parse_cell(path, lineno, name, text):
    try:
        return float(text)
    except ValueError:
        raise DataValidationError(
            f"{path}: row {lineno}: {name}={text!r} is not a number")


def ingest(longitudinal_path, survival_path, covariates_path,
           family=GAUSSIAN):
    """Read the three study CSV files into a trajectory set.

    Expected columns: ``subject_id,time,value`` (longitudinal, one row
    per observation), ``subject_id,t_left,t_right,delta`` (survival,
    one row per subject), and ``subject_id,<name>...`` (covariates, one
    row per subject).  Subjects are joined on id; ids present in one
    file but not another raise a join error naming the id.  Under the
    binary family, values must be 0 or 1 (errors carry the row number).
    Unsorted observation times are sorted with a warning.

    Returns
    -------
    data : TrajectorySet
    records : list of SurvivalRecord
        In subject order (same objects as in ``data``).
    """
    times = {}
    values = {}
    order = []
    for lineno, row in _read_rows(longitudinal_path,
                                  ["subject_id", "time", "value"]):
        sid = row["subject_id"]
        t = _parse_cell(longitudinal_path, lineno, "time", row["time"])
        y = _parse_cell(longitudinal_path, lineno, "value", row["value"])
        if family == BINARY and y not in (0.0, 1.0):
            raise DataValidationError(
                f"{longitudinal_path}: row {lineno}: value {row['value']} "
                "not in {0,1} under the binary family")
        if sid not in times:
            order.append(sid)
            times[sid] = []
            values[sid] = []
        times[sid].append(t)
        values[sid].append(y)

    survival = {}
    for lineno, row in _read_rows(survival_path,
                                  ["subject_id", "t_left", "t_right",
                                   "delta"]):
        sid = row["subject_id"]
        if sid in survival:
            raise DataValidationError(
                f"{survival_path}: row {lineno}: duplicate subject "
                f"{sid!r}")
        t_left = _parse_cell(survival_path, lineno, "t_left",
                             row["t_left"])
        t_right = _parse_cell(survival_path, lineno, "t_right",
                              row["t_right"])
        delta = _parse_cell(survival_path, lineno, "delta", row["delta"])
        if delta not in (0.0, 1.0):
            raise DataValidationError(
                f"{survival_path}: row {lineno}: delta={row['delta']} "
                "must be 0 or 1")
        survival[sid] = SurvivalRecord(t_left=t_left, t_right=t_right,
                                       delta=int(delta))

    with open(covariates_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or reader.fieldnames[0] != "subject_id":
            raise DataValidationError(
                f"{covariates_path}: first column must be subject_id")
        covariate_names = list(reader.fieldnames[1:])
        if not covariate_names:
            raise DataValidationError(
                f"{covariates_path}: no covariate columns")
        covariates = {}
        for lineno, row in enumerate(reader, start=2):
            sid = row["subject_id"]
            if sid in covariates:
                raise DataValidationError(
                    f"{covariates_path}: row {lineno}: duplicate subject "
                    f"{sid!r}")
            covariates[sid] = np.array(
                [_parse_cell(covariates_path, lineno, name, row[name])
                 for name in covariate_names])

    for sid in order:
        if sid not in survival:
            raise DataValidationError(
                f"subject {sid!r} has no row in {survival_path}")
        if sid not in covariates:
            raise DataValidationError(
                f"subject {sid!r} has no row in {covariates_path}")
    known = set(order)
    for path, table in ((survival_path, survival),
                        (covariates_path, covariates)):
        for sid in table:
            if sid not in known:
                raise DataValidationError(
                    f"subject {sid!r} in {path} has no longitudinal "
                    "observations")

    subjects = []
    for sid in order:
        t = np.asarray(times[sid], dtype=float)
        y = np.asarray(values[sid], dtype=float)
        if np.any(np.diff(t) < 0):
            warnings.warn(f"observation times for subject {sid!r} were "
                          "unsorted; sorting", stacklevel=2)
            idx = np.argsort(t, kind="stable")
            t, y = t[idx], y[idx]
        subjects.append(Subject(id=sid, times=t, y=y, z=covariates[sid],
                                survival=survival[sid]))

    lo = min(0.0, min(float(s.times.min()) for s in subjects))
    hi = max(max(float(s.times.max()) for s in subjects),
             max(max(r.t_left, r.t_right) for r in survival.values()))
    data = TrajectorySet(subjects=subjects, family=family,
                         domain=(lo, hi))
    data.validate()
    return data, [s.survival for s in subjects]


def _read_new_subjects(longitudinal_path, covariates_path, family, m):
    """New-subject baseline data: (id, times, y, z) in file order."""
    times = {}
    values = {}
    order = []
    for lineno, row in _read_rows(longitudinal_path,
                                  ["subject_id", "time", "value"]):
        sid = row["subject_id"]
        y = _parse_cell(longitudinal_path, lineno, "value", row["value"])
        if family == BINARY and y not in (0.0, 1.0):
            raise DataValidationError(
                f"{longitudinal_path}: row {lineno}: value {row['value']} "
                "not in {0,1} under the binary family")
        if sid not in times:
            order.append(sid)
            times[sid] = []
            values[sid] = []
        times[sid].append(_parse_cell(longitudinal_path, lineno, "time",
                                      row["time"]))
        values[sid].append(y)

    covariates = {}
    with open(covariates_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or reader.fieldnames[0] != "subject_id":
            raise DataValidationError(
                f"{covariates_path}: first column must be subject_id")
        names = list(reader.fieldnames[1:])
        if len(names) != m:
            raise DataValidationError(
                f"{covariates_path}: {len(names)} covariate column(s); "
                f"the fitted model has {m}")
        for lineno, row in enumerate(reader, start=2):
            covariates[row["subject_id"]] = np.array(
                [_parse_cell(covariates_path, lineno, name, row[name])
                 for name in names])

    out = []
    for sid in order:
        if sid not in covariates:
            raise DataValidationError(
                f"subject {sid!r} has no row in {covariates_path}")
        t = np.asarray(times[sid], dtype=float)
        y = np.asarray(values[sid], dtype=float)
        idx = np.argsort(t, kind="stable")
        out.append((sid, t[idx], y[idx], covariates[sid]))
    return out


# ---------------------------------------------------------------------------
# Output writers


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def _param_labels(params, family):
    """Column labels matching the packed parameter vector layout."""
    labels = [f"theta_mu[{j}]" for j in range(params.q)]
    labels += [f"theta_psi[{l},{j}]" for l in range(params.p)
               for j in range(params.q)]
    if family == GAUSSIAN:
        labels.append("sigma_eps2")
    labels += [f"d[{l}]" for l in range(params.p)]
    labels += ["a[0]", "a[1]"]
    labels += [f"b[{k}]" for k in range(params.K)]
    labels += [f"beta[{l}]" for l in range(params.p)]
    labels += [f"eta[{j}]" for j in range(params.m)]
    return labels


def _write_trace(outdir, res):
    header = (["iteration", "q", "mc_se", "max_rel_change", "acceptance",
               "r"] + _param_labels(res.params, res.family))
    rows = []
    for row in res.trace:
        rows.append([row["iteration"], _f17(row["q"]), _f17(row["mc_se"]),
                     _f17(row["max_rel_change"]), _f17(row["acceptance"]),
                     row["r"]] + [_f17(v) for v in row["params"]])
    return _write_csv(os.path.join(outdir, "trace.csv"), header, rows)


def _write_functions(outdir, res):
    basis = res.bases.longitudinal
    grid = np.linspace(basis.domain[0], basis.domain[1], 200)
    B = basis.design(grid)
    mu = B @ res.params.theta_mu
    psi = B @ res.params.theta_psi
    loghaz = (res.bases.hazard.design(grid)
              @ np.concatenate((res.params.a, res.params.b)))
    header = (["t", "mu"] + [f"psi{l + 1}" for l in range(res.params.p)]
              + ["loghaz"])
    rows = [[_f17(grid[j]), _f17(mu[j])]
            + [_f17(psi[j, l]) for l in range(res.params.p)]
            + [_f17(loghaz[j])] for j in range(len(grid))]
    return _write_csv(os.path.join(outdir, "functions.csv"), header, rows)


def _se_blocks(cov, params, family):
    se = dict(zip(cov.parameter_names, cov.se.tolist()))

    def block(prefix, n):
        vals = [se.get(f"{prefix}[{i}]") for i in range(n)]
        return vals if all(v is not None for v in vals) else None

    out = {"theta_mu": block("theta_mu", params.q),
           "d": block("d", params.p),
           "a": block("a", 2),
           "b": block("b", params.K),
           "beta": block("beta", params.p),
           "eta": block("eta", params.m)}
    if family == GAUSSIAN:
        out["sigma_eps2"] = se.get("sigma_eps2")
    return out


def _write_estimates(outdir, res, tuning, aic_value, cov):
    params = res.params
    doc = {
        "family": res.family,
        "converged": bool(res.converged),
        "iterations": int(res.iterations),
        "aic": None if aic_value is None else float(aic_value),
        "tuning": {"p": tuning.p, "h_mu": tuning.h_mu,
                   "h_psi": tuning.h_psi, "sigma_b2": tuning.sigma_b2},
        "parameters": {
            "theta_mu": params.theta_mu.tolist(),
            "theta_psi": params.theta_psi.T.tolist(),
            "sigma_eps2": (None if params.sigma_eps2 is None
                           else float(params.sigma_eps2)),
            "d": params.d.tolist(),
            "a": params.a.tolist(),
            "b": params.b.tolist(),
            "beta": params.beta.tolist(),
            "eta": params.eta.tolist(),
            "hazard_knots": res.bases.hazard.knots.tolist(),
            "hazard_t_max": float(res.bases.hazard.t_max),
        },
        "se": None if cov is None else _se_blocks(cov, params, res.family),
        "se_method": None if cov is None else cov.method,
    }
    path = os.path.join(outdir, "estimates.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _write_aic_report(outdir, report):
    rows = report.to_rows()
    header = ["p", "h", "sigma_b2", "aic", "df_mu", "df_psi", "df_hazard",
              "M", "expected_loglik", "converged", "error"]
    out = []
    for row in rows:
        out.append([row["p"], _f17(row["h"]), _f17(row["sigma_b2"]),
                    _f17(row["aic"]) if row["aic"] is not None else "nan",
                    _f17(row["df_mu"]), _f17(row["df_psi"]),
                    _f17(row["df_hazard"]), _f17(row["M"]),
                    _f17(row["expected_loglik"]),
                    int(bool(row["converged"])), row["error"]])
    return _write_csv(os.path.join(outdir, "aic_report.csv"), header, out)


# ---------------------------------------------------------------------------
# Subcommand bodies


def _fit_config(values):
    return FitConfig(seed=values["seed"], r0=values["R0"],
                     r_max=values["Rmax"], tol=values["tol"],
                     max_iter=values["maxIter"], n_basis=values["q"],
                     degree=values["degree"], hazard_knots=values["K"],
                     workers=values["workers"])


def _fit_from_values(values):
    data, _ = ingest(values["longitudinal"], values["survival"],
                     values["covariates"], values["family"])
    config = _fit_config(values)
    if values.get("sigma_b2") == "select":
        report = grid_search(data, [values["p"]], config=config)
        return data, report.best_fit, report.best_tuning, report
    tuning = TuningParams(p=values["p"], h_mu=values["h_mu"],
                          h_psi=values["h_psi"],
                          sigma_b2=values["sigma_b2"])
    return data, fit(data, tuning, config), tuning, None


def _write_fit_outputs(values, data, res, tuning, report):
    outdir = values["outdir"]
    try:
        aic_value = aic(res, data)
    except FpcoxError:
        aic_value = None
    try:
        cov = louis_information(res, data)
    except Exception:
        cov = None
    _write_estimates(outdir, res, tuning, aic_value, cov)
    _write_functions(outdir, res)
    _write_trace(outdir, res)
    if report is not None:
        _write_aic_report(outdir, report)
    return 0 if res.converged else 3


def _simulate_body(values):
    design = SimDesign(n_subjects=values["n_subjects"],
                       n_obs=values["n_obs"], family=values["family"],
                       seed=values["seed"])
    data, records, truth = generate_dataset(design)
    outdir = values["outdir"]
    _write_csv(os.path.join(outdir, "longitudinal.csv"),
               ["subject_id", "time", "value"],
               [[s.id, _f17(t), _f17(y)]
                for s in data.subjects for t, y in zip(s.times, s.y)])
    _write_csv(os.path.join(outdir, "survival.csv"),
               ["subject_id", "t_left", "t_right", "delta"],
               [[s.id, _f17(r.t_left), _f17(r.t_right), r.delta]
                for s, r in zip(data.subjects, records)])
    _write_csv(os.path.join(outdir, "covariates.csv"),
               ["subject_id", "z"],
               [[s.id, _f17(s.z[0])] for s in data.subjects])
    _write_csv(os.path.join(outdir, "truth.csv"),
               ["subject_id", "xi1", "xi2", "z", "linear_predictor",
                "event_time", "observed"],
               [[s.id, _f17(truth.xi[i, 0]), _f17(truth.xi[i, 1]),
                 _f17(truth.z[i]), _f17(truth.linear_predictor[i]),
                 _f17(truth.event_times[i]), truth.observed[i]]
                for i, s in enumerate(data.subjects)])
    return 0


def _fit_body(values):
    data, res, tuning, report = _fit_from_values(values)
    return _write_fit_outputs(values, data, res, tuning, report)


def _select_body(values):
    data, _ = ingest(values["longitudinal"], values["survival"],
                     values["covariates"], values["family"])
    config = _fit_config(values)
    report = grid_search(data, values["p"], h_grid=values["h_grid"],
                         sigma_b_grid=values["sigma_b_grid"],
                         config=config)
    _write_aic_report(values["outdir"], report)
    res, tuning = report.best_fit, report.best_tuning
    code = _write_fit_outputs(values, data, res, tuning, None)
    return code


def _bootstrap_body(values):
    data, res, tuning, report = _fit_from_values(values)
    code = _write_fit_outputs(values, data, res, tuning, report)
    config = _fit_config(values)
    cov = bootstrap_se(data, tuning, values["n_boot"], config=config,
                       base_fit=res)
    path = os.path.join(values["outdir"], "bootstrap.json")
    with open(path, "w") as fh:
        json.dump(cov.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return code


def _predict_body(values):
    data, res, tuning, report = _fit_from_values(values)
    code = _write_fit_outputs(values, data, res, tuning, report)
    new_subjects = _read_new_subjects(values["new_longitudinal"],
                                      values["new_covariates"],
                                      values["family"], res.params.m)
    entries = []
    for j, (sid, t, y, z) in enumerate(new_subjects):
        seed = int(derive_rng(values["seed"], _STREAM_PREDICT_SUBJECT, j)
                   .integers(2 ** 31 - 1))
        result = predict_new_subject(res, t, y, z, R=values["n_draws"],
                                     alpha=values["alpha"], seed=seed)
        entries.append({"subject_id": sid, **result.to_dict()})
    doc = {"alpha": values["alpha"], "n_draws": values["n_draws"],
           "subjects": entries}
    path = os.path.join(values["outdir"], "prediction.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return code


# ---------------------------------------------------------------------------
# Click wiring


def _execute(command, config_path, workers, outdir):
    schema = _SCHEMAS[command]
    body = {"simulate": _simulate_body, "fit": _fit_body,
            "select": _select_body, "bootstrap": _bootstrap_body,
            "predict": _predict_body}[command]
    try:
        values = read_config(config_path, schema)
        _apply_overrides(values, schema, workers, outdir)
        os.makedirs(values["outdir"], exist_ok=True)
        _write_config_resolved(values, schema)
        code = body(values)
    except _VALIDATION_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except FpcoxError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(3)
    if code:
        click.echo("warning: fit did not converge; best-so-far outputs "
                   "written", err=True)
        sys.exit(code)


def _common_options(f):
    f = click.option("--outdir", type=click.Path(file_okay=False),
                     default=None,
                     help="Override the output directory (also "
                          "FPCOX_OUT).")(f)
    f = click.option("--workers", type=int, default=None,
                     help="Override the worker count (also "
                          "FPCOX_WORKERS).")(f)
    f = click.option("--config", "-c", "config_path", required=True,
                     type=click.Path(exists=True, dir_okay=False),
                     help="Flat key=value config file.")(f)
    return f


@click.group()
def main():
    """Joint modeling of longitudinal trajectories and relapse times.

    All subcommands read a flat key=value config file and write their
    outputs (plus config_resolved) to the configured directory.  Exit
    status: 0 success, 2 validation error, 3 convergence failure.
    """


@main.command()
@_common_options
def simulate(config_path, workers, outdir):
    """Generate a synthetic dataset.

    Config keys: family, seed, n_subjects, n_obs, outdir, workers.

    Outputs: longitudinal.csv (subject_id,time,value), survival.csv
    (subject_id,t_left,t_right,delta), covariates.csv (subject_id,z),
    truth.csv (subject_id,xi1,xi2,z,linear_predictor,event_time,
    observed), config_resolved.
    """
    _execute("simulate", config_path, workers, outdir)


@main.command()
@_common_options
def fit(config_path, workers, outdir):
    """Fit the joint model to CSV data.

    Config keys: longitudinal, survival, covariates (input CSV paths),
    family, seed, q, degree, K (or auto for the subjects/4 rule), p,
    h_mu, h_psi, sigma_b2 (or select to grid-search h and sigma_b2 at
    this p), R0, Rmax, tol, maxIter, outdir, workers.

    Outputs: estimates.json (labeled estimates, SEs when available,
    AIC), functions.csv (t,mu,psi1..psiP,loghaz on a 200-point grid),
    trace.csv (iteration,q,mc_se,max_rel_change,acceptance,r,one column
    per packed parameter), aic_report.csv (only when sigma_b2=select),
    config_resolved.
    """
    _execute("fit", config_path, workers, outdir)


@main.command()
@_common_options
def select(config_path, workers, outdir):
    """Grid-search tuning by the information criterion, then refit.

    Config keys: as for fit, except p is a comma list of candidate
    component counts (default 1,2,3) and h_grid / sigma_b_grid are
    comma lists of tuning values (default: auto five-point grids).

    Outputs: aic_report.csv (p,h,sigma_b2,aic,df_mu,df_psi,df_hazard,
    M,expected_loglik,converged,error; one row per candidate), plus the
    fit outputs (estimates.json, functions.csv, trace.csv) at the best
    candidate, config_resolved.
    """
    _execute("select", config_path, workers, outdir)


@main.command()
@_common_options
def bootstrap(config_path, workers, outdir):
    """Fit, then compute subject-resampling standard errors.

    Config keys: as for fit, plus n_boot (replicates, default 50).

    Outputs: the fit outputs, plus bootstrap.json (parameter names,
    covariance, se, replicate diagnostics), config_resolved.
    """
    _execute("bootstrap", config_path, workers, outdir)


@main.command()
@_common_options
def predict(config_path, workers, outdir):
    """Fit, then predict relapse times for new subjects.

    Config keys: as for fit, plus new_longitudinal / new_covariates
    (baseline data of the subjects to predict, same schemas as the
    training files), alpha (interval level, default 0.05), n_draws
    (posterior draws, default 2000).

    Outputs: the fit outputs, plus prediction.json (per subject:
    median, lower, upper, alpha, truncated_fraction, draws),
    config_resolved.
    """
    _execute("predict", config_path, workers, outdir)


if __name__ == "__main__":
    main()
