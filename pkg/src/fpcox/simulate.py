"""Replication studies for the joint trajectory-relapse model.

A :class:`SimDesign` fixes a two-component data-generating law on
[0, 20]: smooth mean and orthonormal component functions, Gaussian or
binary observations, and relapse times from a proportional-hazards law
with linear baseline hazard acting on the latent scores plus one binary
covariate.  Relapse times are observed through a mix of exact, interval
and right censoring.

:func:`generate_dataset` draws one replicate together with the latent
truth needed to score it; :func:`run_study` repeats generate + fit over
derived seeds, aligns every fitted component to the generating ones,
and aggregates parameter estimates, pointwise function envelopes,
component errors and tuning-selection counts.  Results live in a
:class:`StudySummary`, optionally written out as CSV reports.
"""

import csv
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import expit

from .baselines import two_stage_fit
from .errors import InvalidArgumentError
from .inference import louis_information
from .kernels import derive_rng
from .mcem import FitConfig, fit
from .model import BINARY, GAUSSIAN, Subject, SurvivalRecord, TrajectorySet
from .selection import grid_search

DOMAIN = (0.0, 20.0)

_STREAM_REPLICATE = 7101

__all__ = [
    "DOMAIN", "SimDesign", "Truth", "StudySummary", "true_mean",
    "true_components", "true_log_hazard", "generate_dataset",
    "align_to_truth", "run_study",
]


def true_mean(t):
    """Generating mean function t/60 + sin(3 pi t / 20).

    Parameters
    ----------
    t : array_like
        Times in [0, 20].

    Returns
    -------
    ndarray
        Mean values, same shape as ``t``.
    """
    t = np.asarray(t, dtype=float)
    return t / 60.0 + np.sin(3.0 * np.pi * t / 20.0)


def true_components(t):
    """Generating component functions, orthonormal on [0, 20].

    Parameters
    ----------
    t : array_like
        Times in [0, 20].

    Returns
    -------
    ndarray, shape (len(t), 2)
        Columns -cos(pi t / 10)/sqrt(10) and sin(pi t / 10)/sqrt(10),
        ordered by decreasing score variance.
    """
    t = np.asarray(t, dtype=float)
    return np.column_stack((-np.cos(np.pi * t / 10.0) / np.sqrt(10.0),
                            np.sin(np.pi * t / 10.0) / np.sqrt(10.0)))


def true_log_hazard(t):
    """Log of the generating baseline hazard t/20 (-inf at t = 0)."""
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(t / 20.0)


@dataclass(frozen=True)
class SimDesign:
    """Data-generating design for one replication study.

    Latent trajectories are X_i(t) = mu(t) + xi_i1 psi_1(t) +
    xi_i2 psi_2(t) with mu, psi fixed by :func:`true_mean` and
    :func:`true_components` and independent centred normal scores of
    variance ``d``.  Gaussian responses add N(0, sigma_eps2) noise;
    binary responses are Bernoulli(logistic(X_i(t))).  Relapse times
    follow baseline hazard t/20 scaled by exp(beta . xi_i + eta z_i)
    with z_i ~ Bernoulli(p_covariate).  Times beyond the last grid
    point are right censored there; otherwise an independent coin with
    probability ``p_interval`` reports the bracketing pair from the
    censoring grid instead of the exact time.

    Parameters
    ----------
    n_subjects : int
        Subjects per replicate.
    n_obs : int
        Observations per subject, equally spaced on [0, 20].
    family : str
        "gaussian" or "binary".
    d : tuple of float
        Score variances, decreasing.
    sigma_eps2 : float
        Gaussian noise variance (ignored for the binary family).
    beta : tuple of float
        Relapse log-hazard ratios of the two scores.
    eta : float
        Relapse log-hazard ratio of the binary covariate.
    censor_grid : tuple of float
        Increasing inspection times; the last entry ends follow-up.
    p_interval : float
        Probability that an in-window relapse is interval censored.
    p_covariate : float
        Success probability of the binary covariate.
    seed : int
        Base seed; replicates use seeds derived from it.
    """

    n_subjects: int = 100
    n_obs: int = 20
    family: str = GAUSSIAN
    d: tuple = (9.0, 2.25)
    sigma_eps2: float = 0.49
    beta: tuple = (1.0, 1.0)
    eta: float = 1.0
    censor_grid: tuple = (4.0, 10.0, 20.0)
    p_interval: float = 0.5
    p_covariate: float = 0.5
    seed: int = 0

    def validate(self):
        if self.n_subjects < 1:
            raise InvalidArgumentError("n_subjects must be positive")
        if self.n_obs < 1:
            raise InvalidArgumentError("n_obs must be positive")
        if self.family not in (GAUSSIAN, BINARY):
            raise InvalidArgumentError(f"unknown family {self.family!r}")
        if len(self.d) != 2 or len(self.beta) != 2:
            raise InvalidArgumentError("d and beta must have two entries")
        if min(self.d) <= 0:
            raise InvalidArgumentError("score variances must be positive")
        if self.family == GAUSSIAN and self.sigma_eps2 <= 0:
            raise InvalidArgumentError("sigma_eps2 must be positive")
        grid = np.asarray(self.censor_grid, dtype=float)
        if grid.size < 1 or np.any(np.diff(grid) <= 0) or grid[0] <= 0:
            raise InvalidArgumentError(
                "censor_grid must be positive and strictly increasing")
        for name in ("p_interval", "p_covariate"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise InvalidArgumentError(f"{name}={val} not in [0, 1]")


@dataclass
class Truth:
    """Latent generating quantities retained for scoring a replicate.

    Attributes
    ----------
    xi : ndarray, shape (n_subjects, 2)
        Latent scores.
    z : ndarray, shape (n_subjects,)
        Binary covariate.
    linear_predictor : ndarray, shape (n_subjects,)
        beta . xi + eta z per subject.
    event_times : ndarray, shape (n_subjects,)
        Latent relapse times before censoring.
    observed : list of str
        Observation class per subject: "exact", "interval" or "right".
    design : SimDesign
    """

    xi: np.ndarray
    z: np.ndarray
    linear_predictor: np.ndarray
    event_times: np.ndarray
    observed: list
    design: SimDesign

    def trajectories(self, t):
        """Latent X_i(t) on a grid, one row per subject."""
        t = np.asarray(t, dtype=float)
        return true_mean(t)[None, :] + self.xi @ true_components(t).T


def _bracket(t, grid):
    """Bracketing pair of t among {0} + grid (t in (lo, hi])."""
    edges = np.concatenate(([0.0], np.asarray(grid, dtype=float)))
    j = max(int(np.searchsorted(edges, t)), 1)
    return float(edges[j - 1]), float(edges[j])


def generate_dataset(design, seed=None):
    """Draw one replicate from the generating design.

    The per-subject draw order is fixed (scores, response noise,
    covariate, relapse uniform, censoring coin), so a given seed always
    yields the same dataset.  The censoring coin is drawn even for
    subjects censored at the end of follow-up.

    Parameters
    ----------
    design : SimDesign
    seed : int, optional
        Overrides ``design.seed``.

    Returns
    -------
    data : TrajectorySet
        Observed trajectories, covariates and relapse records.
    records : list of SurvivalRecord
        The relapse records, in subject order (same objects as in
        ``data``).
    truth : Truth
        Latent scores, relapse times and observation classes.
    """
    design.validate()
    rng = np.random.default_rng(design.seed if seed is None else seed)
    times = np.linspace(DOMAIN[0], DOMAIN[1], design.n_obs)
    mean = true_mean(times)
    comps = true_components(times)
    root_d = np.sqrt(np.asarray(design.d, dtype=float))
    beta = np.asarray(design.beta, dtype=float)
    follow = float(design.censor_grid[-1])

    n = design.n_subjects
    xi = np.empty((n, 2))
    z = np.empty(n)
    lp = np.empty(n)
    event = np.empty(n)
    observed = []
    subjects = []
    for i in range(n):
        xi[i] = root_d * rng.standard_normal(2)
        x = mean + comps @ xi[i]
        if design.family == GAUSSIAN:
            y = x + np.sqrt(design.sigma_eps2) * rng.standard_normal(
                design.n_obs)
        else:
            y = (rng.random(design.n_obs) < expit(x)).astype(float)
        z[i] = float(rng.random() < design.p_covariate)
        lp[i] = float(beta @ xi[i] + design.eta * z[i])
        u = rng.random()
        event[i] = np.sqrt(max(-40.0 * np.log(u) * np.exp(-lp[i]), 0.0))
        coin = rng.random() < design.p_interval
        if event[i] > follow:
            record = SurvivalRecord(t_left=follow, t_right=follow, delta=0)
            observed.append("right")
        elif coin:
            lo, hi = _bracket(event[i], design.censor_grid)
            record = SurvivalRecord(t_left=lo, t_right=hi, delta=1)
            observed.append("interval")
        else:
            record = SurvivalRecord(t_left=event[i], t_right=event[i],
                                    delta=1)
            observed.append("exact")
        subjects.append(Subject(id=f"s{i:04d}", times=times, y=y,
                                z=np.array([z[i]]), survival=record))

    data = TrajectorySet(subjects=subjects, family=design.family,
                         domain=DOMAIN)
    truth = Truth(xi=xi, z=z, linear_predictor=lp, event_times=event,
                  observed=observed, design=design)
    return data, [s.survival for s in subjects], truth


def align_to_truth(params, basis, n_grid=200):
    """Match fitted components to the generating ones.

    Components are assigned to the generating functions by maximal
    absolute inner product on a quadrature grid (with each estimated
    component normalized to unit norm, so the match is scale-free),
    reordered so matched components come first in generating order,
    and sign-flipped so the matched inner products are positive.  Score variances and relapse
    coefficients are permuted along, and coefficients of flipped
    components change sign (the fitted model is invariant under these
    relabelings).  Unmatched components keep their order and sign.

    Parameters
    ----------
    params : JointParams
    basis : OrthonormalBSplineBasis
        Longitudinal basis the parameters refer to.
    n_grid : int
        Quadrature grid size.

    Returns
    -------
    aligned : JointParams
        Relabeled copy.
    perm : ndarray of int
        Original column index now in each slot.
    signs : ndarray of float
        Sign applied to each slot.
    """
    p = params.p
    grid = np.linspace(DOMAIN[0], DOMAIN[1], n_grid)
    hat = basis.design(grid) @ params.theta_psi
    tru = true_components(grid)
    norms = np.sqrt([max(np.trapezoid(hat[:, l] ** 2, grid), 1e-300)
                     for l in range(p)])
    inner = np.empty((p, tru.shape[1]))
    for l in range(p):
        for c in range(tru.shape[1]):
            inner[l, c] = (np.trapezoid(hat[:, l] * tru[:, c], grid)
                           / norms[l])
    rows, cols = linear_sum_assignment(-np.abs(inner))
    matched = sorted(zip(cols, rows))
    perm = [r for _, r in matched]
    signs = [1.0 if inner[r, c] >= 0 else -1.0 for c, r in matched]
    for l in range(p):
        if l not in perm:
            perm.append(l)
            signs.append(1.0)
    perm = np.asarray(perm, dtype=int)
    signs = np.asarray(signs, dtype=float)

    aligned = params.copy()
    aligned.theta_psi = params.theta_psi[:, perm] * signs
    aligned.d = params.d[perm]
    if params.beta is not None and len(params.beta) == p:
        aligned.beta = params.beta[perm] * signs
    return aligned, perm, signs


_PARAM_LABELS = ("beta1", "beta2", "eta", "d1", "d2", "sigma_eps2")


def _true_value(design, label):
    return {"beta1": design.beta[0], "beta2": design.beta[1],
            "eta": design.eta, "d1": design.d[0], "d2": design.d[1],
            "sigma_eps2": design.sigma_eps2}[label]


def _entry_names(perm):
    """Covariance labels of beta1 beta2 eta d1 d2 sigma after aligning."""
    return {"beta1": f"beta[{perm[0]}]",
            "beta2": f"beta[{perm[1]}]" if len(perm) > 1 else None,
            "eta": "eta[0]",
            "d1": f"d[{perm[0]}]",
            "d2": f"d[{perm[1]}]" if len(perm) > 1 else None,
            "sigma_eps2": "sigma_eps2"}


def _param_dict(aligned, stage_params, family):
    """Table entries from aligned relapse values + trajectory params."""
    out = {"beta1": float(aligned.beta[0]), "eta": float(aligned.eta[0]),
           "d1": float(stage_params.d[0])}
    if aligned.p > 1:
        out["beta2"] = float(aligned.beta[1])
        out["d2"] = float(stage_params.d[1])
    if family == GAUSSIAN:
        out["sigma_eps2"] = float(stage_params.sigma_eps2)
    return out


def _se_dict(cov, perm, family):
    names = _entry_names(perm)
    out = {}
    for label, name in names.items():
        if name is None or (label == "sigma_eps2" and family != GAUSSIAN):
            continue
        try:
            out[label] = cov.se_for(name)
        except ValueError:
            continue
    return out


def _run_replicate(design, seed, config, tuning, select, p_candidates,
                   h_grid, sigma_b_grid, with_two_stage, with_louis):
    """Generate, fit and score one replicate; never raises."""
    rec = {"seed": seed, "error": "", "p": 0, "converged": False,
           "joint_est": {}, "joint_se": {}, "ts_est": {}, "ts_se": {},
           "curves": {}, "ise": {}}
    try:
        data, _, truth = generate_dataset(design, seed=seed)
        cfg = replace(config, seed=seed)
        if select:
            report = grid_search(data, p_candidates, h_grid=h_grid,
                                 sigma_b_grid=sigma_b_grid, config=cfg)
            res, tun = report.best_fit, report.best_tuning
        else:
            res = fit(data, tuning, cfg)
            tun = tuning
        rec["p"] = tun.p
        rec["converged"] = bool(res.converged)

        basis = res.bases.longitudinal
        aligned, perm, _ = align_to_truth(res.params, basis)
        rec["joint_est"] = _param_dict(aligned, aligned, design.family)

        grid = np.linspace(DOMAIN[0], DOMAIN[1], 200)
        H = basis.design(grid)
        psi_hat = H @ aligned.theta_psi
        tru = true_components(grid)
        rec["curves"]["mu"] = H @ aligned.theta_mu
        rec["curves"]["psi1"] = psi_hat[:, 0]
        rec["curves"]["psi2"] = psi_hat[:, 1] if tun.p > 1 else None
        rec["curves"]["loghaz"] = (
            res.bases.hazard.design(grid)
            @ np.concatenate((aligned.a, aligned.b)))
        rec["ise"]["psi1"] = float(
            np.trapezoid((psi_hat[:, 0] - tru[:, 0]) ** 2, grid))
        if tun.p > 1:
            rec["ise"]["psi2"] = float(
                np.trapezoid((psi_hat[:, 1] - tru[:, 1]) ** 2, grid))

        if with_louis:
            try:
                cov = louis_information(res, data)
                rec["joint_se"] = _se_dict(cov, perm, design.family)
            except Exception:
                rec["joint_se"] = {}
        if with_two_stage:
            ts = two_stage_fit(data, tun, config=cfg)
            s1 = ts.trajectory
            ts_params = s1.params.copy()
            ts_params.beta = np.asarray(ts.beta, dtype=float)
            ts_params.eta = np.asarray(ts.eta, dtype=float)
            ts_params.a = np.asarray(ts.a, dtype=float)
            ts_params.b = np.asarray(ts.b, dtype=float)
            ts_aligned, ts_perm, _ = align_to_truth(
                ts_params, s1.bases.longitudinal)
            rec["ts_est"] = _param_dict(ts_aligned, ts_aligned,
                                        design.family)
            se_beta = np.asarray(ts.se_beta, dtype=float)[ts_perm]
            rec["ts_se"] = {"beta1": float(se_beta[0]),
                            "eta": float(ts.se_eta[0])}
            if tun.p > 1:
                rec["ts_se"]["beta2"] = float(se_beta[1])
    except Exception as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
    return rec


def _replicate_worker(args):
    return _run_replicate(*args)


@dataclass
class StudySummary:
    """Aggregated outcome of a replication study.

    Attributes
    ----------
    design : SimDesign
    n_replicates : int
    n_failed : int
        Replicates that raised; their errors are in ``errors``.
    errors : list of str
    parameters : list of dict
        One row per (estimator, parameter): keys ``estimator``,
        ``parameter``, ``true``, ``mean``, ``sd``, ``mean_se``, ``n``.
        ``sd`` is NaN when fewer than two replicates contribute.
    grid : ndarray
        200-point time grid of the function summaries.
    curves : dict
        Name ("mu", "psi1", "psi2", "loghaz") to dict with keys
        ``truth``, ``p5``, ``p50``, ``p95`` (pointwise percentiles of
        the aligned fits across replicates).
    imse : dict
        Mean integrated squared error of each fitted component.
    aic_counts : dict
        Selected (or fixed) component count to number of replicates.
    replicates : list of dict
        Per-replicate records (seed, estimates, errors, curves).
    """

    design: SimDesign
    n_replicates: int
    n_failed: int
    errors: list
    parameters: list
    grid: np.ndarray
    curves: dict
    imse: dict
    aic_counts: dict
    replicates: list

    def parameter_row(self, estimator, parameter):
        """The summary row for one (estimator, parameter) pair."""
        for row in self.parameters:
            if (row["estimator"] == estimator
                    and row["parameter"] == parameter):
                return row
        raise KeyError(f"{estimator}/{parameter}")

    def write(self, out_dir):
        """Write the CSV reports; returns the file paths.

        Files: ``table1.csv`` (parameter summaries), ``curves_mu.csv``,
        ``curves_psi1.csv``, ``curves_psi2.csv``, ``curves_loghaz.csv``
        (grid, truth and pointwise 5/50/95 percentiles), and
        ``aic_selection.csv`` (component-count histogram).
        """
        os.makedirs(out_dir, exist_ok=True)
        paths = []

        path = os.path.join(out_dir, "table1.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["estimator", "parameter", "true", "mean",
                             "sd", "mean_se", "n"])
            for row in self.parameters:
                writer.writerow([row["estimator"], row["parameter"],
                                 _fmt(row["true"]), _fmt(row["mean"]),
                                 _fmt(row["sd"]), _fmt(row["mean_se"]),
                                 row["n"]])
        paths.append(path)

        for name in ("mu", "psi1", "psi2", "loghaz"):
            path = os.path.join(out_dir, f"curves_{name}.csv")
            curve = self.curves[name]
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["t", "truth", "p5", "p50", "p95"])
                for j, t in enumerate(self.grid):
                    writer.writerow([_fmt(t), _fmt(curve["truth"][j]),
                                     _fmt(curve["p5"][j]),
                                     _fmt(curve["p50"][j]),
                                     _fmt(curve["p95"][j])])
            paths.append(path)

        path = os.path.join(out_dir, "aic_selection.csv")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["p", "count"])
            for p in sorted(self.aic_counts):
                writer.writerow([p, self.aic_counts[p]])
        paths.append(path)
        return paths


def _fmt(x):
    return format(float(x), ".10g")


def _column(records, group, label):
    vals = [r[group].get(label, np.nan) for r in records]
    return np.asarray(vals, dtype=float)


def _summarize(vals):
    vals = vals[np.isfinite(vals)]
    n = len(vals)
    mean = float(np.mean(vals)) if n else float("nan")
    sd = float(np.std(vals, ddof=1)) if n > 1 else float("nan")
    return mean, sd, n


def _aggregate(design, records, n_replicates):
    ok = [r for r in records if not r["error"]]
    errors = [r["error"] for r in records if r["error"]]

    labels = [lab for lab in _PARAM_LABELS
              if design.family == GAUSSIAN or lab != "sigma_eps2"]
    parameters = []
    for estimator, est_key, se_key in (("joint", "joint_est", "joint_se"),
                                       ("two_stage", "ts_est", "ts_se")):
        for label in labels:
            mean, sd, n = _summarize(_column(ok, est_key, label))
            mean_se, _, n_se = _summarize(_column(ok, se_key, label))
            parameters.append({
                "estimator": estimator, "parameter": label,
                "true": _true_value(design, label), "mean": mean,
                "sd": sd, "mean_se": mean_se if n_se else float("nan"),
                "n": n})

    grid = np.linspace(DOMAIN[0], DOMAIN[1], 200)
    truths = {"mu": true_mean(grid),
              "psi1": true_components(grid)[:, 0],
              "psi2": true_components(grid)[:, 1],
              "loghaz": true_log_hazard(grid)}
    curves = {}
    for name, truth in truths.items():
        stack = [r["curves"][name] for r in ok
                 if r["curves"].get(name) is not None]
        if stack:
            arr = np.vstack(stack)
            p5, p50, p95 = np.percentile(arr, [5.0, 50.0, 95.0], axis=0)
        else:
            p5 = p50 = p95 = np.full(grid.shape, np.nan)
        curves[name] = {"truth": truth, "p5": p5, "p50": p50, "p95": p95}

    imse = {}
    for name in ("psi1", "psi2"):
        vals = np.asarray([r["ise"].get(name, np.nan) for r in ok])
        vals = vals[np.isfinite(vals)]
        imse[name] = float(np.mean(vals)) if len(vals) else float("nan")

    aic_counts = dict(Counter(r["p"] for r in ok if r["p"] > 0))
    return StudySummary(design=design, n_replicates=n_replicates,
                        n_failed=len(errors), errors=errors,
                        parameters=parameters, grid=grid, curves=curves,
                        imse=imse, aic_counts=aic_counts,
                        replicates=records)


def run_study(design, n_replicates, config=None, tuning=None, select=False,
              p_candidates=(1, 2, 3), h_grid=None, sigma_b_grid=None,
              two_stage=True, louis=True, workers=None, out_dir=None):
    """Run a replication study of the joint and two-stage estimators.

    Each replicate generates a dataset with a seed derived from
    ``design.seed``, fits the joint model (with fixed tuning, or the
    best candidate of an information-criterion grid search when
    ``select`` is true), optionally refits the two-stage comparator
    and the Louis covariance, aligns all components to the generating
    functions, and records estimates, function curves on a 200-point
    grid, and integrated squared component errors.  Failed replicates
    are recorded and skipped, never fatal.  Results are deterministic
    in ``design.seed`` regardless of ``workers``.

    Parameters
    ----------
    design : SimDesign
    n_replicates : int
    config : FitConfig, optional
        Fit settings; ``hazard_knots`` defaults to 12 here.
    tuning : TuningParams, optional
        Fixed tuning; required unless ``select`` is true.
    select : bool
        Select tuning per replicate by grid search.
    p_candidates : sequence of int
        Component counts scanned when selecting.
    h_grid, sigma_b_grid : sequences of float, optional
        Tuning grids for the search (defaults as in the search itself).
    two_stage : bool
        Also fit the two-stage comparator per replicate.
    louis : bool
        Also compute Louis standard errors per replicate.
    workers : int, optional
        Process count for replicates (defaults to ``config.workers``).
    out_dir : str, optional
        Write CSV reports here (see :meth:`StudySummary.write`).

    Returns
    -------
    StudySummary
    """
    design.validate()
    if n_replicates < 1:
        raise InvalidArgumentError("n_replicates must be positive")
    config = config or FitConfig()
    if config.hazard_knots is None:
        config = replace(config, hazard_knots=12)
    if not select and tuning is None:
        raise InvalidArgumentError("tuning is required unless select=True")
    workers = int(workers if workers is not None else config.workers)

    seeds = [int(derive_rng(design.seed, _STREAM_REPLICATE, r)
                 .integers(2 ** 31 - 1)) for r in range(n_replicates)]
    args = [(design, seed, config, tuning, select, tuple(p_candidates),
             h_grid, sigma_b_grid, two_stage, louis) for seed in seeds]
    if workers > 1 and n_replicates > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replicate_worker, args))
    else:
        records = [_replicate_worker(a) for a in args]

    summary = _aggregate(design, records, n_replicates)
    if out_dir is not None:
        summary.write(out_dir)
    return summary
