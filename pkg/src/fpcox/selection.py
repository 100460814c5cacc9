"""Model-complexity accounting and tuning-parameter selection.

Effective degrees of freedom are smoother traces: the trajectory blocks
use the penalized-spline hat-matrix trace, the log-hazard block uses the
ridge trace of the truncated-power design evaluated at event-time proxies
(interval midpoints).  The information criterion is
-2 E[complete-data log-likelihood | data] + 2 M, with the expectation
taken over the final E-step draws, likelihood normalizing constants
reinstated so candidates with different component counts are comparable,
and M the total effective parameter count.  The grid search scans
(p, h, sigma_b2) with h shared between the mean and component penalties.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .basis import roughness_penalty
from .errors import (FpcoxError, GridSearchError, InvalidArgumentError,
                     SingularDesignError)
from .mcem import FitConfig, _default_bases, expected_complete_loglik, fit
from .model import GAUSSIAN, TuningParams

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)


def df_longitudinal(h, designs, penalty):
    """Effective degrees of freedom of a penalized trajectory smoother.

    Parameters
    ----------
    h : float
        Roughness penalty weight, >= 0.
    designs : sequence of ndarray
        Per-subject basis design matrices B_i.
    penalty : PenaltyMatrix

    Returns
    -------
    float
        trace{(sum B_i'B_i + h J)^-1 sum B_i'B_i}; q at h=0, falling to
        the penalty null-space dimension (2 for a second-derivative
        penalty) as h grows.
    """
    if h < 0:
        raise InvalidArgumentError(f"negative penalty weight h={h}")
    S = sum(B.T @ B for B in designs)
    G = S + h * penalty.J
    w = np.linalg.eigvalsh(G)
    if w[0] <= len(w) * np.finfo(float).eps * max(w[-1], 0.0):
        raise SingularDesignError(
            f"singular smoother normal matrix at h={h}; "
            "need more observations or a positive penalty")
    return float(np.trace(np.linalg.solve(G, S)))


def _event_time_proxy(record):
    if record.kind == "interval":
        return 0.5 * (record.t_left + record.t_right)
    if record.kind == "right":
        return record.t_right
    return record.t_left


def df_hazard(sigma_b2, records, hazard_basis):
    """Effective degrees of freedom of the penalized log-hazard spline.

    Each record contributes the truncated-power row ((T_m - k_1)_+, ...)
    evaluated at its event-time proxy: the interval midpoint, the
    right-censoring time, or the exact event time.  Returns the ridge
    trace, between 0 (sigma_b2 -> 0) and K (sigma_b2 -> inf).
    """
    if sigma_b2 <= 0:
        raise InvalidArgumentError(f"sigma_b2={sigma_b2} must be positive")
    knots = hazard_basis.knots
    K = len(knots)
    if K == 0:
        return 0.0
    tm = np.array([_event_time_proxy(r) for r in records], dtype=float)
    T = np.maximum(tm[:, None] - knots[None, :], 0.0)
    G = T.T @ T
    return float(np.trace(np.linalg.solve(G + np.eye(K) / sigma_b2, G)))


def effective_parameter_count(df_mu, df_psi, df_haz, p, m):
    """Total model complexity M.

    One penalized mean curve, p penalized component curves each carrying
    a variance, the penalized log-hazard spline, m covariate effects,
    p score effects on the hazard, and the 2 unpenalized log-hazard
    coefficients (intercept and slope).
    """
    return float(df_mu + p * (df_psi + 1.0) + df_haz + m + p + 2.0)


def aic_terms(fit_result, data, bases=None, penalty=None):
    """Information-criterion value and its full breakdown.

    Returns a dict with the smoother traces, the parameter count M, the
    Monte Carlo expected complete-data log-likelihood (with normalizing
    constants reinstated), and the criterion value.
    """
    bases = bases if bases is not None else fit_result.bases
    penalty = penalty if penalty is not None else fit_result.penalty
    tun = fit_result.tuning
    designs = [bases.longitudinal.design(np.asarray(s.times, dtype=float))
               for s in data.subjects]
    df_mu = df_longitudinal(tun.h_mu, designs, penalty)
    df_psi = df_longitudinal(tun.h_psi, designs, penalty) if tun.p else 0.0
    df_haz = df_hazard(tun.sigma_b2, [s.survival for s in data.subjects],
                       bases.hazard)
    ell = expected_complete_loglik(fit_result, data)
    N = data.n_subjects
    n_total = sum(len(s.times) for s in data.subjects)
    constants = -0.5 * N * tun.p * _LOG_2PI
    if data.family == GAUSSIAN:
        constants -= 0.5 * n_total * _LOG_2PI
    M = effective_parameter_count(df_mu, df_psi, df_haz, tun.p,
                                  data.n_covariates)
    value = -2.0 * (ell + constants) + 2.0 * M
    return {"aic": value, "M": M, "df_mu": df_mu, "df_psi": df_psi,
            "df_hazard": df_haz, "expected_loglik": ell,
            "constants": constants, "p": tun.p, "m": data.n_covariates}


def aic(fit_result, data, bases=None, penalty=None):
    """Joint-model information criterion (smaller is better)."""
    return aic_terms(fit_result, data, bases=bases, penalty=penalty)["aic"]


@dataclass
class AICReport:
    """Grid-search outcome: one entry per tuning candidate."""

    per_candidate: list
    best: int

    @property
    def best_row(self):
        return self.per_candidate[self.best]

    @property
    def best_fit(self):
        return self.best_row["fit"]

    @property
    def best_tuning(self):
        return self.best_row["tuning"]

    def to_rows(self):
        """Flat records (one dict per candidate) for tabular output."""
        out = []
        for row in self.per_candidate:
            tun = row["tuning"]
            terms = row["terms"] or {}
            out.append({
                "p": tun.p, "h": tun.h_mu, "sigma_b2": tun.sigma_b2,
                "aic": row["aic"],
                "df_mu": terms.get("df_mu", float("nan")),
                "df_psi": terms.get("df_psi", float("nan")),
                "df_hazard": terms.get("df_hazard", float("nan")),
                "M": terms.get("M", float("nan")),
                "expected_loglik": terms.get("expected_loglik",
                                             float("nan")),
                "converged": row["fit"].converged if row["fit"] else False,
                "error": row["error"] or "",
            })
        return out


def default_grids(data, bases, penalty):
    """Five-point log grids for h and sigma_b2.

    The h grid is scaled by trace(sum B'B)/trace(J) so its center sits
    where data fidelity and roughness contribute comparably.
    """
    S = sum(bases.longitudinal.design(np.asarray(s.times, dtype=float)).T
            @ bases.longitudinal.design(np.asarray(s.times, dtype=float))
            for s in data.subjects)
    scale = float(np.trace(S)) / float(np.trace(penalty.J))
    return scale * np.logspace(-2, 2, 5), np.logspace(-2, 2, 5)


def _best_index(rows):
    best, best_key = None, None
    for j, row in enumerate(rows):
        a = row["aic"]
        if a is None or not np.isfinite(a):
            continue
        tun = row["tuning"]
        key = (a, tun.p, -tun.h_mu, tun.sigma_b2)
        if best_key is None or key < best_key:
            best, best_key = j, key
    return best


def grid_search(data, p_candidates, h_grid=None, sigma_b_grid=None,
                config=None):
    """Fit every (p, h, sigma_b2) candidate and rank by the criterion.

    Parameters
    ----------
    data : TrajectorySet
    p_candidates : sequence of int
    h_grid, sigma_b_grid : sequences of float, optional
        Default to five-point log grids (see default_grids).
    config : FitConfig, optional

    Returns
    -------
    AICReport
        Candidates in scan order (p, then h, then sigma_b2 ascending);
        ties break toward smaller p, then larger h, then smaller
        sigma_b2.  Within a p slice each fit warm-starts from the
        previous candidate's estimates.

    Raises
    ------
    GridSearchError
        If every candidate fails; carries per-candidate diagnostics.
    """
    config = config or FitConfig()
    data.validate()
    bases = _default_bases(data, config)
    penalty = roughness_penalty(bases.longitudinal)
    if h_grid is None or sigma_b_grid is None:
        h_default, s_default = default_grids(data, bases, penalty)
        h_grid = h_default if h_grid is None else h_grid
        sigma_b_grid = s_default if sigma_b_grid is None else sigma_b_grid
    h_grid = np.sort(np.asarray(h_grid, dtype=float))
    sigma_b_grid = np.sort(np.asarray(sigma_b_grid, dtype=float))

    rows = []
    for p in sorted(set(int(p) for p in p_candidates)):
        slice_init = None
        for h in h_grid:
            for sb in sigma_b_grid:
                tuning = TuningParams(p=p, h_mu=float(h), h_psi=float(h),
                                      sigma_b2=float(sb))
                try:
                    res = fit(data, tuning, config=config, bases=bases,
                              init=slice_init)
                    terms = aic_terms(res, data, bases=bases,
                                      penalty=penalty)
                    slice_init = res.params
                    rows.append({"tuning": tuning, "fit": res,
                                 "aic": terms["aic"], "terms": terms,
                                 "error": None})
                    logger.info("candidate p=%d h=%.4g sigma_b2=%.4g "
                                "aic=%.4f", p, h, sb, terms["aic"])
                except FpcoxError as err:
                    rows.append({"tuning": tuning, "fit": None,
                                 "aic": float("nan"), "terms": None,
                                 "error": str(err)})
                    logger.warning("candidate p=%d h=%.4g sigma_b2=%.4g "
                                   "failed: %s", p, h, sb, err)
    best = _best_index(rows)
    if best is None:
        raise GridSearchError(
            [f"p={r['tuning'].p} h={r['tuning'].h_mu:.4g} "
             f"sigma_b2={r['tuning'].sigma_b2:.4g}: {r['error']}"
             for r in rows])
    return AICReport(per_candidate=rows, best=best)
