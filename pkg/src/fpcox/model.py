"""Domain types and likelihood components of the joint model.

The complete-data log-likelihood for one subject is the sum of three pieces:
the longitudinal term (Gaussian or binary working model on the latent
trajectory), the relapse term (proportional hazards with exact, interval, or
right censoring), and the frailty term (Gaussian scores).  Additive
normalizing constants (-n/2 log 2pi per Gaussian trajectory, -p/2 log 2pi per
score vector) are dropped everywhere; AIC computation reinstates them.

All evaluations are pure functions, safe to call from concurrent workers.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import (
    DataValidationError,
    InvalidArgumentError,
    NonFiniteHazardError,
    ZeroProbabilityIntervalError,
)

GAUSSIAN = "gaussian"
BINARY = "binary"

# exponent beyond which exp() in the hazard integral is treated as overflow
_EXP_OVERFLOW = 700.0


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SurvivalRecord:
    """Censoring interval (t_left, t_right) and indicator delta.

    Encoding: delta=1 with t_left == t_right is an exactly observed event;
    delta=1 with t_left < t_right is interval censored; delta=0 requires
    t_left == t_right and means right censored at that time.
    """

    t_left: float
    t_right: float
    delta: int

    def validate(self):
        if self.t_left < 0:
            raise DataValidationError(f"t_left={self.t_left} is negative")
        if self.t_right < self.t_left:
            raise DataValidationError(
                f"t_right={self.t_right} < t_left={self.t_left}")
        if self.delta not in (0, 1):
            raise DataValidationError(f"delta={self.delta} not in {{0,1}}")
        if self.delta == 0 and self.t_right != self.t_left:
            raise DataValidationError(
                "delta=0 requires t_left == t_right (right censoring time)")

    @property
    def kind(self):
        if self.delta == 1:
            return "exact" if self.t_left == self.t_right else "interval"
        return "right"


@dataclass
class Subject:
    """One subject: trajectory observations, covariates, survival record."""

    id: str
    times: np.ndarray
    y: np.ndarray
    z: np.ndarray
    survival: SurvivalRecord

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.z = np.asarray(self.z, dtype=float)

    @property
    def n_obs(self):
        return len(self.times)

    def validate(self, family, domain):
        if self.n_obs < 1:
            raise DataValidationError(f"subject {self.id}: no observations")
        if len(self.y) != self.n_obs:
            raise DataValidationError(f"subject {self.id}: times/values length mismatch")
        if not np.all(np.isfinite(self.times)) or not np.all(np.isfinite(self.y)):
            raise DataValidationError(f"subject {self.id}: nonfinite observation")
        lo, hi = domain
        if self.times.min() < lo or self.times.max() > hi:
            raise DataValidationError(
                f"subject {self.id}: observation time outside domain {domain}")
        if family == BINARY and not np.all(np.isin(self.y, (0.0, 1.0))):
            raise DataValidationError(
                f"subject {self.id}: binary family requires values in {{0,1}}")
        self.survival.validate()


@dataclass
class TrajectorySet:
    """All subjects of a study plus the response family and time domain."""

    subjects: list
    family: str
    domain: tuple

    def __post_init__(self):
        if self.family not in (GAUSSIAN, BINARY):
            raise DataValidationError(f"unknown family {self.family!r}")
        self.domain = (float(self.domain[0]), float(self.domain[1]))

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def n_covariates(self):
        return len(self.subjects[0].z) if self.subjects else 0

    @property
    def records(self):
        return [s.survival for s in self.subjects]

    def validate(self):
        if not self.subjects:
            raise DataValidationError("empty subject list")
        m = self.n_covariates
        for s in self.subjects:
            s.validate(self.family, self.domain)
            if len(s.z) != m:
                raise DataValidationError(
                    f"subject {s.id}: covariate length {len(s.z)} != {m}")
        return self


@dataclass
class JointParams:
    """All model parameters.

    theta_mu (q,) and theta_psi (q, p) are spline coefficients of the mean
    and eigenfunctions; sigma_eps2 is the Gaussian residual variance (None
    for binary); d (p,) are score variances; a (2,) and b (K,) are the log
    baseline hazard coefficients; beta (p,) and eta (m,) the hazard
    regression coefficients on scores and covariates.
    """

    theta_mu: np.ndarray
    theta_psi: np.ndarray
    sigma_eps2: float
    d: np.ndarray
    a: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        self.theta_mu = np.asarray(self.theta_mu, dtype=float)
        self.theta_psi = np.asarray(self.theta_psi, dtype=float)
        if self.theta_psi.ndim != 2:
            self.theta_psi = self.theta_psi.reshape(len(self.theta_mu), -1)
        self.d = np.asarray(self.d, dtype=float)
        self.a = np.asarray(self.a, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.beta = np.asarray(self.beta, dtype=float)
        self.eta = np.asarray(self.eta, dtype=float)

    @property
    def q(self):
        return len(self.theta_mu)

    @property
    def p(self):
        return self.theta_psi.shape[1]

    @property
    def K(self):
        return len(self.b)

    @property
    def m(self):
        return len(self.eta)

    def copy(self):
        return JointParams(self.theta_mu.copy(), self.theta_psi.copy(),
                           self.sigma_eps2, self.d.copy(), self.a.copy(),
                           self.b.copy(), self.beta.copy(), self.eta.copy())


@dataclass(frozen=True)
class TuningParams:
    """Number of components and penalty weights."""

    p: int
    h_mu: float
    h_psi: float
    sigma_b2: float

    def validate(self, q=None):
        # p = 0 is permitted programmatically (degenerate no-scores model);
        # the CLI enforces p >= 1
        if self.p < 0:
            raise InvalidArgumentError(f"p={self.p} must be >= 0")
        if q is not None and self.p > q:
            raise InvalidArgumentError(f"p={self.p} exceeds basis dimension q={q}")
        if self.h_mu < 0 or self.h_psi < 0:
            raise InvalidArgumentError("penalties h_mu, h_psi must be >= 0")
        if self.sigma_b2 <= 0:
            raise InvalidArgumentError(f"sigma_b2={self.sigma_b2} must be > 0")
        return self


@dataclass(frozen=True)
class Bases:
    """Longitudinal spline basis + hazard basis bundle."""

    longitudinal: object
    hazard: object


# ---------------------------------------------------------------------------
# Stable exp-integral helpers
#
# f1(x) = (e^x - 1)/x,  g1(x) = int_0^1 t e^{xt} dt,  h2(x) = int_0^1 t^2
# e^{xt} dt; series branches keep relative error ~1e-11 through the
# cancellation region near 0.
# ---------------------------------------------------------------------------

_SERIES_CUT = 1e-2


def _f1(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    xs = np.where(small, 1.0, x)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        closed = np.expm1(xs) / xs
    series = 1.0 + x / 2 * (1.0 + x / 3 * (1.0 + x / 4 * (1.0 + x / 5 * (1.0 + x / 6))))
    return np.where(small, series, closed)


def _g1(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    xs = np.where(small, 1.0, x)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        closed = (xs * np.exp(xs) - np.expm1(xs)) / xs**2
    series = (0.5 + x * (1.0 / 3 + x * (1.0 / 8 + x * (1.0 / 30 + x * (1.0 / 144 + x / 840)))))
    return np.where(small, series, closed)


def _h2(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < _SERIES_CUT
    xs = np.where(small, 1.0, x)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        ex = np.exp(xs)
        closed = (xs**2 * ex - 2 * xs * ex + 2 * np.expm1(xs)) / xs**3
    series = (1.0 / 3 + x * (1.0 / 4 + x * (1.0 / 10 + x * (1.0 / 36 + x * (1.0 / 168 + x / 960)))))
    return np.where(small, series, closed)


def _log1mexp(u):
    """log(1 - e^{-u}) for u > 0, stable near both ends."""
    u = np.asarray(u, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return np.where(u > 0.6931471805599453,
                        np.log1p(-np.exp(-np.minimum(u, _EXP_OVERFLOW))),
                        np.log(-np.expm1(-np.maximum(u, 1e-300))))


# ---------------------------------------------------------------------------
# Baseline hazard: exact piecewise integrals and their derivatives
# ---------------------------------------------------------------------------


def cumulative_hazard_terms(a, b, knots, t, order=0):
    """Integrals of the baseline hazard up to time t.

    The log hazard is a0 + a1*u + sum_k b_k (u - knot_k)_+ , linear on each
    inter-knot segment, so each segment integrates in closed form.  Returns
    (Lambda0, grad, hess) where grad and hess are the derivatives with
    respect to the stacked coefficient vector w = (a0, a1, b_1..b_K); entries
    above `order` are None.

    grad_j  = int_0^t  w_j(u) lambda0(u) du
    hess_jk = int_0^t  w_j(u) w_k(u) lambda0(u) du
    with w_0(u)=1, w_1(u)=u, w_{k+2}(u)=(u-knot_k)_+ .
    """
    t = float(t)
    if t < 0:
        raise InvalidArgumentError(f"negative time {t} for cumulative hazard")
    knots = np.asarray(knots, dtype=float)
    K = len(knots)
    dim = K + 2
    lam = 0.0
    grad = np.zeros(dim) if order >= 1 else None
    hess = np.zeros((dim, dim)) if order >= 2 else None
    if t == 0.0:
        return 0.0, grad, hess

    cuts = np.concatenate(([0.0], knots[knots < t], [t]))
    a0, a1 = float(a[0]), float(a[1])
    for m in range(len(cuts) - 1):
        u1, u2 = cuts[m], cuts[m + 1]
        if u2 <= u1:
            continue
        active = knots <= u1 + 0.0  # knots at the segment start are active
        s = a1 + b[active].sum() if K else a1
        c = a0 - (b[active] * knots[active]).sum() if K else a0
        delta = u2 - u1
        expo = c + s * u1
        if expo + max(s * delta, 0.0) > _EXP_OVERFLOW:
            raise NonFiniteHazardError(
                f"exp overflow integrating baseline hazard near t={u2}")
        base = np.exp(expo)
        x = s * delta
        i0 = base * delta * float(_f1(x))
        lam += i0
        if order >= 1:
            i1 = base * delta * (u1 * float(_f1(x)) + delta * float(_g1(x)))
            alpha = np.zeros(dim)
            gamma = np.zeros(dim)
            alpha[0] = 1.0
            gamma[1] = 1.0
            if K:
                alpha[2:][active] = -knots[active]
                gamma[2:][active] = 1.0
            grad += alpha * i0 + gamma * i1
            if order >= 2:
                i2 = base * delta * (u1 * u1 * float(_f1(x))
                                     + 2.0 * u1 * delta * float(_g1(x))
                                     + delta * delta * float(_h2(x)))
                hess += (np.outer(alpha, alpha) * i0
                         + (np.outer(alpha, gamma) + np.outer(gamma, alpha)) * i1
                         + np.outer(gamma, gamma) * i2)
    return lam, grad, hess


def cumulative_hazard(params, hazard_basis, t):
    """Baseline cumulative hazard Lambda0(t); exact, strictly increasing."""
    lam, _, _ = cumulative_hazard_terms(params.a, params.b, hazard_basis.knots,
                                        t, order=0)
    return lam


def log_baseline_hazard(params, hazard_basis, t):
    """log lambda0(t) = a0 + a1 t + sum_k b_k (t - knot_k)_+ ."""
    w = hazard_basis.design(np.atleast_1d(float(t)))[0]
    return float(w @ np.concatenate((params.a, params.b)))


# ---------------------------------------------------------------------------
# Likelihood components
# ---------------------------------------------------------------------------


def latent_value(params, basis, t, xi):
    """Latent trajectory X(t) = B(t)' (theta_mu + theta_psi xi)."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (params.p,):
        raise InvalidArgumentError(
            f"score vector length {xi.shape} incompatible with p={params.p}")
    bt = basis.evaluate(t)
    return float(bt @ (params.theta_mu + params.theta_psi @ xi))


def loglik_long_gaussian(subject, params, basis, xi):
    """Gaussian trajectory log-likelihood, -n/2 log 2pi dropped."""
    if params.sigma_eps2 is None or params.sigma_eps2 <= 0:
        raise InvalidArgumentError("sigma_eps2 must be positive for the "
                                   "Gaussian family")
    B = basis.design(subject.times)
    r = subject.y - B @ (params.theta_mu + params.theta_psi @ np.asarray(xi, dtype=float))
    s2 = params.sigma_eps2
    return float(-0.5 * subject.n_obs * np.log(s2) - 0.5 * (r @ r) / s2)


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def loglik_long_binary(subject, params, basis, xi):
    """Bernoulli trajectory log-likelihood with logit link, stable form."""
    B = basis.design(subject.times)
    x = B @ (params.theta_mu + params.theta_psi @ np.asarray(xi, dtype=float))
    return float(subject.y @ x - _softplus(x).sum())


def loglik_frailty(params, xi):
    """Gaussian score log-density, -p/2 log 2pi dropped."""
    if np.any(params.d <= 0):
        raise InvalidArgumentError("score variances d must be positive")
    xi = np.asarray(xi, dtype=float)
    return float(-0.5 * np.log(params.d).sum() - 0.5 * (xi**2 / params.d).sum())


def _relapse_constants(record, params, hazard_basis, order=0):
    """Per-record hazard quantities that do not depend on the scores.

    Returns (case, lam_l, dlam, loglam, extras); case is 0 exact / 1 right /
    2 interval.  ``extras`` holds the hazard-coefficient derivative arrays
    when order >= 1 (used by score and M-step computations).
    """
    kind = record.kind
    knots = hazard_basis.knots
    if kind == "exact":
        lam, g, h = cumulative_hazard_terms(params.a, params.b, knots,
                                            record.t_left, order=order)
        loglam = log_baseline_hazard(params, hazard_basis, record.t_left)
        return 0, lam, 0.0, loglam, {"grad_l": g, "hess_l": h}
    if kind == "right":
        lam, g, h = cumulative_hazard_terms(params.a, params.b, knots,
                                            record.t_right, order=order)
        return 1, lam, 0.0, 0.0, {"grad_l": g, "hess_l": h}
    lam_l, gl, hl = cumulative_hazard_terms(params.a, params.b, knots,
                                            record.t_left, order=order)
    lam_r, gr, hr = cumulative_hazard_terms(params.a, params.b, knots,
                                            record.t_right, order=order)
    return 2, lam_l, lam_r - lam_l, 0.0, {
        "grad_l": gl, "hess_l": hl,
        "grad_d": None if gr is None else gr - gl,
        "hess_d": None if hr is None else hr - hl,
    }


def loglik_relapse(subject, params, hazard_basis, xi):
    """Relapse log-likelihood under exact / interval / right censoring.

    exact:    log lambda0(T) + LP - e^LP Lambda0(T)
    right:    -e^LP Lambda0(Tr)
    interval: -e^LP Lambda0(Tl) + log(1 - exp(-e^LP [Lambda0(Tr)-Lambda0(Tl)]))
    """
    xi = np.asarray(xi, dtype=float)
    lp = float(xi @ params.beta + subject.z @ params.eta)
    case, lam_l, dlam, loglam, _ = _relapse_constants(subject.survival, params,
                                                      hazard_basis)
    with np.errstate(over="ignore"):
        elp = np.exp(lp)
    if case == 0:
        return float(loglam + lp - elp * lam_l)
    if case == 1:
        return float(-elp * lam_l)
    if dlam <= 0:
        raise ZeroProbabilityIntervalError(
            f"interval [{subject.survival.t_left}, {subject.survival.t_right}] "
            "carries zero hazard mass")
    u = elp * dlam
    if not np.isfinite(u):
        return -np.inf
    return float(-elp * lam_l + _log1mexp(u))


def loglik_longitudinal(subject, params, basis, xi, family):
    if family == GAUSSIAN:
        return loglik_long_gaussian(subject, params, basis, xi)
    return loglik_long_binary(subject, params, basis, xi)


def complete_loglik(data, params, bases, all_xi):
    """Complete-data log-likelihood: sum of the three components per subject."""
    if len(all_xi) != data.n_subjects:
        raise InvalidArgumentError("need one score vector per subject")
    total = 0.0
    for subject, xi in zip(data.subjects, all_xi):
        total += loglik_longitudinal(subject, params, bases.longitudinal, xi,
                                     data.family)
        total += loglik_relapse(subject, params, bases.hazard, xi)
        total += loglik_frailty(params, xi)
    return total


def penalty_value(params, tuning, penalty):
    """Penalty part of the objective (subtracted from the log-likelihood)."""
    J = penalty.J
    val = 0.5 * tuning.h_mu * float(params.theta_mu @ J @ params.theta_mu)
    for l in range(params.p):
        col = params.theta_psi[:, l]
        val += 0.5 * tuning.h_psi * float(col @ J @ col)
    val += 0.5 * float(params.b @ params.b) / tuning.sigma_b2
    return val


def penalized_loglik(data, params, tuning, penalty, bases, all_xi):
    """Complete-data log-likelihood minus roughness and hazard penalties."""
    tuning.validate()
    return complete_loglik(data, params, bases, all_xi) - penalty_value(
        params, tuning, penalty)


# ---------------------------------------------------------------------------
# Flattened parameter vector (trace records, finite differences, Louis)
# ---------------------------------------------------------------------------


def param_labels(params, family):
    labels = [f"theta_mu[{j}]" for j in range(params.q)]
    for l in range(params.p):
        labels += [f"theta_psi[{j},{l}]" for j in range(params.q)]
    if family == GAUSSIAN:
        labels.append("sigma_eps2")
    labels += [f"d[{l}]" for l in range(params.p)]
    labels += ["a[0]", "a[1]"]
    labels += [f"b[{k}]" for k in range(params.K)]
    labels += [f"beta[{l}]" for l in range(params.p)]
    labels += [f"eta[{j}]" for j in range(params.m)]
    return labels


def flatten_params(params, family):
    parts = [params.theta_mu]
    parts.append(params.theta_psi.T.ravel())
    if family == GAUSSIAN:
        parts.append(np.array([params.sigma_eps2]))
    parts += [params.d, params.a, params.b, params.beta, params.eta]
    return np.concatenate(parts)


def unflatten_params(vec, template, family):
    q, p, K, m = template.q, template.p, template.K, template.m
    pos = 0

    def take(n):
        nonlocal pos
        out = vec[pos:pos + n]
        pos += n
        return np.asarray(out, dtype=float)

    theta_mu = take(q)
    theta_psi = take(q * p).reshape(p, q).T.copy()
    sigma = float(take(1)[0]) if family == GAUSSIAN else None
    d = take(p)
    a = take(2)
    b = take(K)
    beta = take(p)
    eta = take(m)
    if pos != len(vec):
        raise InvalidArgumentError("parameter vector length mismatch")
    return JointParams(theta_mu, theta_psi, sigma, d, a, b, beta, eta)


def _subject_score(subject, params, bases, xi, family):
    """Per-subject gradient of the unpenalized complete-data log-likelihood.

    Returns blocks keyed like flatten_params; penalties are handled by the
    caller because they are not per-subject quantities.
    """
    basis = bases.longitudinal
    xi = np.asarray(xi, dtype=float)
    B = basis.design(subject.times)
    lin = B @ (params.theta_mu + params.theta_psi @ xi)
    g_sigma = None
    if family == GAUSSIAN:
        r = subject.y - lin
        s2 = params.sigma_eps2
        g_mu = B.T @ r / s2
        g_psi = np.outer(B.T @ r / s2, np.ones(params.p)) * xi if params.p else \
            np.zeros((params.q, 0))
        g_sigma = -0.5 * subject.n_obs / s2 + 0.5 * (r @ r) / s2**2
    else:
        e = subject.y - expit(lin)
        g_mu = B.T @ e
        g_psi = np.outer(B.T @ e, np.ones(params.p)) * xi if params.p else \
            np.zeros((params.q, 0))

    g_d = -0.5 / params.d + 0.5 * xi**2 / params.d**2

    lp = float(xi @ params.beta + subject.z @ params.eta)
    case, lam_l, dlam, _, extras = _relapse_constants(subject.survival, params,
                                                      bases.hazard, order=1)
    elp = np.exp(lp)
    if case == 0:
        w_at_t = bases.hazard.design(np.array([subject.survival.t_left]))[0]
        g_w = w_at_t - elp * extras["grad_l"]
        scal = 1.0 - elp * lam_l
    elif case == 1:
        g_w = -elp * extras["grad_l"]
        scal = -elp * lam_l
    else:
        phi = 1.0 / np.expm1(elp * dlam)
        g_w = -elp * extras["grad_l"] + phi * elp * extras["grad_d"]
        scal = -elp * lam_l + phi * elp * dlam
    g_beta = xi * scal
    g_eta = subject.z * scal

    return {"theta_mu": g_mu, "theta_psi": g_psi, "sigma_eps2": g_sigma,
            "d": g_d, "a": g_w[:2], "b": g_w[2:], "beta": g_beta, "eta": g_eta}


def _stack_score(blocks, family):
    parts = [blocks["theta_mu"], blocks["theta_psi"].T.ravel()]
    if family == GAUSSIAN:
        parts.append(np.array([blocks["sigma_eps2"]]))
    parts += [blocks["d"], blocks["a"], blocks["b"], blocks["beta"],
              blocks["eta"]]
    return np.concatenate(parts)


def grad_penalized_loglik(data, params, tuning, penalty, bases, all_xi):
    """Analytic gradient of penalized_loglik over the flattened parameters."""
    family = data.family
    total = None
    for subject, xi in zip(data.subjects, all_xi):
        s = _stack_score(_subject_score(subject, params, bases, xi, family),
                         family)
        total = s if total is None else total + s
    # penalty gradients
    pen = {"theta_mu": -tuning.h_mu * (penalty.J @ params.theta_mu),
           "theta_psi": -tuning.h_psi * (penalty.J @ params.theta_psi),
           "sigma_eps2": 0.0,
           "d": np.zeros(params.p),
           "a": np.zeros(2),
           "b": -params.b / tuning.sigma_b2,
           "beta": np.zeros(params.p),
           "eta": np.zeros(params.m)}
    return total + _stack_score(pen, family)
