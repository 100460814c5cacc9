"""Monte Carlo EM fitting of the joint trajectory-relapse model.

The E-step samples each subject's latent scores with an adaptive
random-walk Metropolis kernel (module ``kernels``); the M-step maximizes
the Monte Carlo Q-function blockwise: penalized (weighted) least squares
for the spline coefficients, closed forms for the variances, and damped
Newton for the relapse block.  After every M-step the loading matrix is
rotated back to the normalized frame (orthonormal columns, descending
score variances).  The draw count R grows geometrically whenever the
Q-increment is indistinguishable from Monte Carlo noise.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from ._mh_py import _log1mexp
from .basis import make_hazard_basis, make_orthonormal_bspline, \
    roughness_penalty
from .errors import (DegenerateComponentError, InsufficientSamplesError,
                     MStepFailureError, SamplerFailureError, StaleFitError)
from .model import (GAUSSIAN, Bases, JointParams, _relapse_constants,
                    flatten_params, penalty_value)

logger = logging.getLogger(__name__)

_LP_GUARD = 690.0


@dataclass
class FitConfig:
    """Algorithmic knobs for ``fit`` (statistical model lives in TuningParams).

    Attributes
    ----------
    seed : int
        Root seed; every random stream is derived from it deterministically.
    r0, r_max, growth : initial draw count, cap, and growth factor of the
        Monte Carlo sample-size schedule.
    tol : float
        Relative parameter-change threshold; must hold on two consecutive
        iterations with the Q-increment at the noise floor to declare
        convergence.
    max_iter : int
        EM iteration cap; exceeding it returns best-so-far, converged=False.
    burn_frac : float
        Burn-in fraction of each chain (discarded, adaptation window).
    adapt_target : float
        Target acceptance rate for proposal-scale adaptation.
    n_basis, degree : trajectory spline basis size and degree.
    hazard_knots : int or None
        Number of hazard spline knots; None applies the small-sample rule.
    workers : int
        Accepted for API compatibility; evaluation is serial.
    """

    seed: int = 0
    r0: int = 200
    r_max: int = 10000
    growth: float = 1.5
    tol: float = 1e-3
    max_iter: int = 100
    burn_frac: float = 0.2
    adapt_target: float = 0.3
    n_basis: int = 8
    degree: int = 3
    hazard_knots: int | None = None
    workers: int = 1


@dataclass
class MHState:
    """Mutable sampler state carried across EM iterations."""

    xi: np.ndarray
    scales: np.ndarray
    acceptance: np.ndarray
    seed: int


@dataclass
class MonteCarloQ:
    """E-step output: stored draws plus their reusable moments.

    increments holds the per-draw complete-data log-likelihood totals
    (summed over subjects, penalty excluded); its batch-means standard
    error drives the sample-size schedule.
    """

    draws: np.ndarray
    xi_bar: np.ndarray
    xi_outer: np.ndarray
    acceptance: np.ndarray
    increments: np.ndarray


@dataclass
class FitResult:
    """Fitted model with trace and final-E-step score summaries."""

    params: JointParams
    tuning: object
    bases: Bases
    penalty: object
    config: FitConfig
    family: str
    include_survival: bool
    trace: list
    converged: bool
    iterations: int
    score_means: np.ndarray
    score_covs: np.ndarray
    draws: np.ndarray
    acceptance: np.ndarray
    final_r: int


def _icbrt(n):
    k = int(round(n ** (1.0 / 3.0)))
    while k ** 3 > n:
        k -= 1
    while (k + 1) ** 3 <= n:
        k += 1
    return k


def mc_error(values, r=None):
    """Batch-means standard error with floor(R^(1/3)) equal batches.

    Parameters
    ----------
    values : array_like
        Per-draw contributions (a correlated Monte Carlo sequence).
    r : int, optional
        Sequence length; defaults to len(values).

    Returns
    -------
    float
        Standard error of the sequence mean.
    """
    values = np.asarray(values, dtype=float)
    R = len(values) if r is None else int(r)
    if R < 8:
        raise InsufficientSamplesError(
            f"batch-means error needs at least 8 draws, got {R}")
    nb = _icbrt(R)
    size = R // nb
    means = values[:nb * size].reshape(nb, size).mean(axis=1)
    return float(means.std(ddof=1) / math.sqrt(nb))


# ---------------------------------------------------------------------------
# per-fit caches

@dataclass
class _Cache:
    B: list
    y: list
    BtB: np.ndarray
    Bty: np.ndarray
    z: np.ndarray
    n_obs: np.ndarray
    q: int


def _build_cache(data, bases, y_override=None):
    basis = bases.longitudinal
    B, y = [], []
    for i, s in enumerate(data.subjects):
        Bi = basis.design(np.asarray(s.times, dtype=float)) \
            if len(s.times) else np.zeros((0, basis.q))
        B.append(Bi)
        yi = y_override[i] if y_override is not None else s.y
        y.append(np.asarray(yi, dtype=float))
    N = len(B)
    q = basis.q
    BtB = np.zeros((N, q, q))
    Bty = np.zeros((N, q))
    for i in range(N):
        BtB[i] = B[i].T @ B[i]
        Bty[i] = B[i].T @ y[i]
    z = np.array([np.asarray(s.z, dtype=float) for s in data.subjects])
    n_obs = np.array([len(yi) for yi in y])
    return _Cache(B=B, y=y, BtB=BtB, Bty=Bty, z=z, n_obs=n_obs, q=q)


@dataclass
class _SurvConsts:
    case: np.ndarray
    lam_l: np.ndarray
    dlam: np.ndarray
    loglam: np.ndarray
    zeta: np.ndarray


def _survival_constants(data, params, hazard_basis, include_survival):
    N = len(data.subjects)
    if not include_survival:
        zero = np.zeros(N)
        return _SurvConsts(case=np.full(N, kernels.CASE_NONE), lam_l=zero,
                           dlam=zero.copy(), loglam=zero.copy(),
                           zeta=zero.copy())
    case = np.empty(N, dtype=int)
    lam_l = np.empty(N)
    dlam = np.empty(N)
    loglam = np.empty(N)
    for i, s in enumerate(data.subjects):
        c, ll, dl, lg, _ = _relapse_constants(s.survival, params, hazard_basis)
        case[i], lam_l[i], dlam[i], loglam[i] = c, ll, dl, lg
    zeta = _z_matrix(data) @ params.eta if params.m else np.zeros(N)
    return _SurvConsts(case=case, lam_l=lam_l, dlam=dlam, loglam=loglam,
                       zeta=zeta)


def _z_matrix(data):
    return np.array([np.asarray(s.z, dtype=float) for s in data.subjects])


def _per_draw_matrix(cache, params, draws, sc, family):
    """Per-subject, per-draw complete-data log-likelihood (N, R)."""
    N, R, p = draws.shape
    out = np.zeros((N, R))

    if family == GAUSSIAN:
        s2 = params.sigma_eps2
        for i in range(N):
            if cache.n_obs[i] == 0:
                continue
            r0 = cache.y[i] - cache.B[i] @ params.theta_mu
            Ai = cache.B[i] @ params.theta_psi
            M = Ai.T @ Ai
            quad = np.einsum("rp,pq,rq->r", draws[i], M, draws[i])
            rss = r0 @ r0 - 2.0 * draws[i] @ (Ai.T @ r0) + quad
            out[i] = -0.5 * cache.n_obs[i] * math.log(s2) - rss / (2.0 * s2)
    else:
        for i in range(N):
            if cache.n_obs[i] == 0:
                continue
            w = (cache.B[i] @ params.theta_mu)[:, None] \
                + (cache.B[i] @ params.theta_psi) @ draws[i].T
            out[i] = cache.y[i] @ w - np.logaddexp(0.0, w).sum(axis=0)

    if p:
        # extreme start guesses may overflow to -inf; the caller treats
        # nonfinite rows as bad starts
        with np.errstate(over="ignore"):
            out -= 0.5 * float(np.log(params.d).sum()) \
                + 0.5 * np.einsum("irp,p->ir", draws ** 2, 1.0 / params.d)

    lp = sc.zeta[:, None] + draws @ params.beta
    elp = np.exp(np.minimum(lp, _LP_GUARD))
    exact = sc.case == 0
    if np.any(exact):
        out[exact] += sc.loglam[exact, None] + lp[exact] \
            - elp[exact] * sc.lam_l[exact, None]
    right = sc.case == 1
    if np.any(right):
        out[right] -= elp[right] * sc.lam_l[right, None]
    inter = sc.case == 2
    if np.any(inter):
        out[inter] += -elp[inter] * sc.lam_l[inter, None] \
            + _log1mexp(elp[inter] * sc.dlam[inter, None])
    over = (lp > _LP_GUARD) & (sc.case != kernels.CASE_NONE)[:, None]
    out[over] = -1e300
    return out


def monte_carlo_q(data, params, tuning, penalty, bases, draws,
                  include_survival=True):
    """Penalized Monte Carlo Q-value: mean per-draw total minus penalty."""
    cache = _build_cache(data, bases)
    sc = _survival_constants(data, params, bases.hazard, include_survival)
    mat = _per_draw_matrix(cache, params, draws, sc, data.family)
    return float(mat.sum(axis=0).mean()
                 - penalty_value(params, tuning, penalty))


def expected_complete_loglik(result, data):
    """MC average of the complete-data log-likelihood over final draws."""
    if result.draws is None:
        raise StaleFitError("fit result holds no final E-step draws")
    cache = _build_cache(data, result.bases)
    sc = _survival_constants(data, result.params, result.bases.hazard,
                             result.include_survival)
    mat = _per_draw_matrix(cache, result.params, result.draws, sc,
                           data.family)
    return float(mat.sum(axis=0).mean())


# ---------------------------------------------------------------------------
# E-step

def estep(data, params, bases, R, state, config=None, stage=0, em_iter=0,
          include_survival=True, cache=None):
    """One E-step: run every subject's chain, return draws and moments.

    Parameters
    ----------
    data : TrajectorySet
    params : JointParams
        Current parameter values (sampling targets).
    bases : Bases
    R : int
        Retained draws per subject (burn-in is extra).
    state : MHState
        Warm-start scores and proposal scales; updated in place.
    config : FitConfig, optional
    stage, em_iter : ints keying the derived random streams.
    include_survival : bool
        False drops the relapse term from the target (longitudinal-only).

    Returns
    -------
    MonteCarloQ
    """
    config = config or FitConfig()
    if cache is None:
        cache = _build_cache(data, bases)
    family = data.family
    N = len(data.subjects)
    sc = _survival_constants(data, params, bases.hazard, include_survival)

    A = [cache.B[i] @ params.theta_psi for i in range(N)]
    off = [cache.B[i] @ params.theta_mu for i in range(N)]
    inputs = kernels.ChainInputs(y=cache.y, A=A, off=off, zeta=sc.zeta,
                                 case=sc.case, lam_l=sc.lam_l, dlam=sc.dlam)

    start = _per_draw_matrix(cache, params, state.xi[:, None, :], sc,
                             family)[:, 0]
    bad = ~np.isfinite(start) | (start <= -1e290)
    if np.any(bad):
        state.xi[bad] = 0.0
        start = _per_draw_matrix(cache, params, state.xi[:, None, :], sc,
                                 family)[:, 0]
        still = np.flatnonzero(~np.isfinite(start) | (start <= -1e290))
        if still.size:
            raise SamplerFailureError(data.subjects[still[0]].id)

    scales = np.tile(0.5 * np.sqrt(params.d), (N, 1))
    draws, acc, final_scales = kernels.sample_batch(
        family, inputs, params.sigma_eps2, params.d, params.beta,
        state.xi, scales, seed=state.seed, stage=stage, em_iter=em_iter,
        R=R, burn_frac=config.burn_frac, target=config.adapt_target)
    if not np.all(np.isfinite(draws)):
        i = int(np.flatnonzero(~np.isfinite(draws).all(axis=(1, 2)))[0])
        raise SamplerFailureError(data.subjects[i].id)

    state.xi = draws[:, -1, :].copy()
    state.scales = final_scales
    state.acceptance = acc

    mat = _per_draw_matrix(cache, params, draws, sc, family)
    xi_bar = draws.mean(axis=1)
    xi_outer = np.einsum("irp,irq->ipq", draws, draws) / R
    return MonteCarloQ(draws=draws, xi_bar=xi_bar, xi_outer=xi_outer,
                       acceptance=acc, increments=mat.sum(axis=0))


def sample_scores(subject, params, bases, R, state=None, family=GAUSSIAN,
                  config=None, include_survival=True, stage=0, em_iter=0,
                  seed=0):
    """Draw R posterior score samples for a single subject.

    Returns the (R, p) draws; ``state`` (if given) is updated in place.
    """
    from .model import TrajectorySet

    config = config or FitConfig(seed=seed)
    data = TrajectorySet(subjects=[subject], family=family,
                         domain=bases.longitudinal.domain)
    if state is None:
        state = MHState(xi=np.zeros((1, params.p)),
                        scales=0.5 * np.sqrt(params.d)[None, :],
                        acceptance=np.zeros((1, params.p)), seed=seed)
    mc = estep(data, params, bases, R, state, config, stage=stage,
               em_iter=em_iter, include_survival=include_survival)
    return mc.draws[0]


# ---------------------------------------------------------------------------
# M-step

def _solve_penalized(G, rhs):
    try:
        return np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        logger.warning("singular normal equations; applying ridge jitter")
        jitter = 1e-10 * (1.0 + float(np.trace(G)) / G.shape[0])
        return np.linalg.solve(G + jitter * np.eye(G.shape[0]), rhs)


def _update_longitudinal_gaussian(cache, tuning, penalty, xi_bar, xi_outer,
                                  sigma2, theta_mu0=None, theta_psi0=None):
    """Joint penalized LS for (theta_mu, theta_psi), then sigma2 closed form."""
    q = cache.q
    p = xi_bar.shape[1]
    if not cache.n_obs.sum():
        # no observations carry no information on the trajectory block
        return theta_mu0, theta_psi0, sigma2
    J = penalty.J
    dim = q * (1 + p)
    G = np.zeros((dim, dim))
    rhs = np.zeros(dim)
    G[:q, :q] = cache.BtB.sum(axis=0) + sigma2 * tuning.h_mu * J
    rhs[:q] = cache.Bty.sum(axis=0)
    for l in range(p):
        sl = slice(q * (1 + l), q * (2 + l))
        cross = np.einsum("i,iqr->qr", xi_bar[:, l], cache.BtB)
        G[:q, sl] = cross
        G[sl, :q] = cross
        rhs[sl] = xi_bar[:, l] @ cache.Bty
        for mcol in range(p):
            sm = slice(q * (1 + mcol), q * (2 + mcol))
            G[sl, sm] = np.einsum("i,iqr->qr", xi_outer[:, l, mcol],
                                  cache.BtB)
        G[sl, sl] += sigma2 * tuning.h_psi * J
    u = _solve_penalized(G, rhs)
    theta_mu = u[:q]
    theta_psi = u[q:].reshape(p, q).T

    rss = 0.0
    for i in range(len(cache.y)):
        if cache.n_obs[i] == 0:
            continue
        r0 = cache.y[i] - cache.B[i] @ theta_mu
        Ai = cache.B[i] @ theta_psi
        rss += r0 @ r0 - 2.0 * xi_bar[i] @ (Ai.T @ r0) \
            + float(np.sum((Ai.T @ Ai) * xi_outer[i]))
    n_total = int(cache.n_obs.sum())
    sigma2_new = max(rss / n_total, 1e-10) if n_total else sigma2
    return theta_mu, theta_psi, sigma2_new


def _binary_q_long(cache, tuning, penalty, theta_mu, theta_psi, draws):
    J = penalty.J
    total = 0.0
    for i in range(len(cache.y)):
        if cache.n_obs[i] == 0:
            continue
        w = (cache.B[i] @ theta_mu)[:, None] \
            + (cache.B[i] @ theta_psi) @ draws[i].T
        total += float((cache.y[i] @ w - np.logaddexp(0.0, w).sum(axis=0))
                       .mean())
    total -= 0.5 * tuning.h_mu * float(theta_mu @ J @ theta_mu)
    for l in range(theta_psi.shape[1]):
        col = theta_psi[:, l]
        total -= 0.5 * tuning.h_psi * float(col @ J @ col)
    return total


def _update_longitudinal_binary(cache, tuning, penalty, draws, theta_mu,
                                theta_psi):
    """Penalized Newton (IRLS) on the MC-averaged binary log-likelihood."""
    q = cache.q
    N, R, p = draws.shape
    if not cache.n_obs.sum():
        return theta_mu.copy(), theta_psi.copy()
    J = penalty.J
    dim = q * (1 + p)
    tm = theta_mu.copy()
    th = theta_psi.copy()
    q_cur = _binary_q_long(cache, tuning, penalty, tm, th, draws)
    for _ in range(40):
        grad = np.zeros(dim)
        H = np.zeros((dim, dim))
        for i in range(N):
            if cache.n_obs[i] == 0:
                continue
            Bi = cache.B[i]
            w = (Bi @ tm)[:, None] + (Bi @ th) @ draws[i].T
            mu = expit(w)
            s = mu * (1.0 - mu)
            e0 = (cache.y[i][:, None] - mu).mean(axis=1)
            e1 = (cache.y[i][:, None] - mu) @ draws[i] / R
            m0 = s.mean(axis=1)
            m1 = s @ draws[i] / R
            M2 = np.einsum("jr,rp,rq->jpq", s, draws[i], draws[i]) / R
            grad[:q] += Bi.T @ e0
            H[:q, :q] -= Bi.T @ (m0[:, None] * Bi)
            for l in range(p):
                sl = slice(q * (1 + l), q * (2 + l))
                grad[sl] += Bi.T @ e1[:, l]
                blk = Bi.T @ (m1[:, l][:, None] * Bi)
                H[:q, sl] -= blk
                H[sl, :q] -= blk
                for mcol in range(p):
                    sm = slice(q * (1 + mcol), q * (2 + mcol))
                    H[sl, sm] -= Bi.T @ (M2[:, l, mcol][:, None] * Bi)
        grad[:q] -= tuning.h_mu * (J @ tm)
        H[:q, :q] -= tuning.h_mu * J
        for l in range(p):
            sl = slice(q * (1 + l), q * (2 + l))
            grad[sl] -= tuning.h_psi * (J @ th[:, l])
            H[sl, sl] -= tuning.h_psi * J

        step = _solve_penalized(-H, grad)
        scale = 1.0
        for _halve in range(50):
            tm_new = tm + scale * step[:q]
            th_new = th + scale * step[q:].reshape(p, q).T
            q_new = _binary_q_long(cache, tuning, penalty, tm_new, th_new,
                                   draws)
            if q_new >= q_cur - 1e-12:
                break
            scale *= 0.5
        else:
            raise MStepFailureError("binary spline update failed to ascend "
                                    "after 50 halvings")
        tm, th, q_cur = tm_new, th_new, q_new
        if scale * float(np.max(np.abs(step))) < 1e-8:
            break
    return tm, th


def _interval_series(u, elp):
    """Stable per-draw coefficient arrays for the interval-censoring block.

    Returns the cross term (phi + psi'' u) e^LP and the quadratic term
    psi'' u^2 + phi u, with series branches near u = 0 where the direct
    expressions cancel catastrophically.
    """
    um = np.clip(u, 1e-300, 30.0)
    em1 = np.expm1(um)
    phi = 1.0 / em1
    phiu = um / em1
    small = u < 1e-4
    coef_cross = np.where(small, (-0.5 + u / 6.0) * elp,
                          phi * elp * (1.0 - um * (phi + 1.0)))
    coef_quad = np.where(small, -0.5 * u + u * u / 6.0,
                         phiu * (1.0 - phiu - um))
    return coef_cross, coef_quad


def _survival_q(data, params, tuning, bases, draws, cache):
    sc = _survival_constants(data, params, bases.hazard, True)
    lp = sc.zeta[:, None] + draws @ params.beta
    elp = np.exp(np.minimum(lp, _LP_GUARD))
    out = np.zeros_like(lp)
    exact = sc.case == 0
    out[exact] = sc.loglam[exact, None] + lp[exact] \
        - elp[exact] * sc.lam_l[exact, None]
    right = sc.case == 1
    out[right] = -elp[right] * sc.lam_l[right, None]
    inter = sc.case == 2
    if np.any(inter):
        out[inter] = -elp[inter] * sc.lam_l[inter, None] \
            + _log1mexp(elp[inter] * sc.dlam[inter, None])
    out[(lp > _LP_GUARD) & (sc.case != kernels.CASE_NONE)[:, None]] = -1e300
    return float(out.mean(axis=1).sum()
                 - 0.5 * float(params.b @ params.b) / tuning.sigma_b2)


def _survival_grad_hess(data, cur, tuning, bases, draws, cache):
    """Gradient and Hessian of the MC-averaged penalized relapse block."""
    N, R, p = draws.shape
    K = cur.K
    m = cur.m
    nw = 2 + K
    dim = nw + p + m
    hazard = bases.hazard
    zmat = cache.z

    lp = (zmat @ cur.eta)[:, None] + draws @ cur.beta
    elp = np.exp(np.minimum(lp, _LP_GUARD))
    c1 = elp.mean(axis=1)
    cxi = np.einsum("ir,irp->ip", elp, draws) / R
    cM = np.einsum("ir,irp,irq->ipq", elp, draws, draws) / R

    grad = np.zeros(dim)
    H = np.zeros((dim, dim))
    for i, s in enumerate(data.subjects):
        case, lam_l, dlam, _, ex = _relapse_constants(
            s.survival, cur, hazard, order=2)
        gl, hl = ex["grad_l"], ex["hess_l"]
        zi = zmat[i]
        if case in (0, 1):
            grad[:nw] -= c1[i] * gl
            grad[nw:nw + p] -= lam_l * cxi[i]
            grad[nw + p:] -= lam_l * c1[i] * zi
            H[:nw, :nw] -= c1[i] * hl
            H[:nw, nw:nw + p] -= np.outer(gl, cxi[i])
            H[:nw, nw + p:] -= c1[i] * np.outer(gl, zi)
            H[nw:nw + p, nw:nw + p] -= lam_l * cM[i]
            H[nw:nw + p, nw + p:] -= lam_l * np.outer(cxi[i], zi)
            H[nw + p:, nw + p:] -= lam_l * c1[i] * np.outer(zi, zi)
            if case == 0:
                x_t = hazard.design(np.array([s.survival.t_left]))[0]
                grad[:nw] += x_t
                grad[nw:nw + p] += draws[i].mean(axis=0)
                grad[nw + p:] += zi
        else:
            gd, hd = ex["grad_d"], ex["hess_d"]
            Ei = elp[i]
            with np.errstate(over="ignore"):
                u = np.clip(Ei * dlam, 1e-300, 1e306)
            em1 = np.expm1(np.minimum(u, 7e2))
            phiE = np.where(u > 690.0, 0.0, Ei / em1)
            phiu = np.where(u > 690.0, 0.0, u / em1)
            mean_E = Ei.mean()
            mean_phiE = phiE.mean()
            psi2E2 = -(phiE ** 2 + phiE * Ei)
            coef_cross, coef_quad = _interval_series(u, Ei)
            coef_quad = coef_quad - Ei * lam_l

            grad[:nw] += -mean_E * gl + mean_phiE * gd
            gb = (phiu - Ei * lam_l)
            grad[nw:nw + p] += gb @ draws[i] / R
            grad[nw + p:] += zi * gb.mean()

            H[:nw, :nw] += -mean_E * hl + mean_phiE * hd \
                + psi2E2.mean() * np.outer(gd, gd)
            cross = np.outer(gl, -(Ei @ draws[i]) / R) \
                + np.outer(gd, coef_cross @ draws[i] / R)
            H[:nw, nw:nw + p] += cross
            H[:nw, nw + p:] += np.outer(
                -mean_E * gl + coef_cross.mean() * gd, zi)
            H[nw:nw + p, nw:nw + p] += np.einsum(
                "r,rp,rq->pq", coef_quad, draws[i], draws[i]) / R
            H[nw:nw + p, nw + p:] += np.outer(
                coef_quad @ draws[i] / R, zi)
            H[nw + p:, nw + p:] += coef_quad.mean() * np.outer(zi, zi)

    grad[2:nw] -= cur.b / tuning.sigma_b2
    H[2:nw, 2:nw] -= np.eye(K) / tuning.sigma_b2
    # only the upper cross blocks were filled; mirror them
    H[nw:nw + p, :nw] = H[:nw, nw:nw + p].T
    H[nw + p:, :nw] = H[:nw, nw + p:].T
    H[nw + p:, nw:nw + p] = H[nw:nw + p, nw + p:].T
    return grad, H


def _update_survival(data, params, tuning, bases, draws, cache):
    """Damped Newton on the MC-averaged penalized relapse log-likelihood."""
    N, R, p = draws.shape
    K = params.K
    m = params.m
    nw = 2 + K
    dim = nw + p + m
    cur = params.copy()
    q_cur = _survival_q(data, cur, tuning, bases, draws, cache)

    for _ in range(50):
        grad, H = _survival_grad_hess(data, cur, tuning, bases, draws,
                                      cache)
        if float(np.max(np.abs(grad))) < 1e-7 * (1.0 + abs(q_cur)):
            break
        step = _solve_penalized(-H + 1e-10 * np.eye(dim), grad)
        if float(grad @ step) <= 0.0:
            # indefinite Hessian gave a non-ascent direction
            step = grad / max(1.0, float(np.abs(np.diag(H)).max()))
        scale = 1.0
        applied = None
        for _halve in range(50):
            w_new = np.concatenate([cur.a, cur.b, cur.beta, cur.eta]) \
                + scale * step
            cand = cur.copy()
            cand.a = w_new[:2]
            cand.b = w_new[2:nw]
            cand.beta = w_new[nw:nw + p]
            cand.eta = w_new[nw + p:]
            q_new = _survival_q(data, cand, tuning, bases, draws, cache)
            if np.isfinite(q_new) and q_new >= q_cur - 1e-12:
                applied = cand
                break
            scale *= 0.5
        else:
            raise MStepFailureError("relapse-block Newton failed to ascend "
                                    "after 50 halvings")
        dq = q_new - q_cur
        cur, q_cur = applied, q_new
        if scale * float(np.max(np.abs(step))) < 1e-9:
            break
        if dq < 1e-9 * (1.0 + abs(q_cur)):
            # progress stalled (typically a flat ridge of the Q surface);
            # the EM outer loop only needs ascent, not exact maximization
            break
    return cur.a, cur.b, cur.beta, cur.eta


def mstep(mc, data, params, tuning, bases, penalty, include_survival=True,
          cache=None):
    """Blockwise maximization of the Monte Carlo Q-function.

    Update order: trajectory coefficients (penalized LS / IRLS), residual
    variance, score variances, then the relapse block by damped Newton.
    The returned parameters are NOT yet renormalized.
    """
    if cache is None:
        cache = _build_cache(data, bases)
    new = params.copy()
    if data.family == GAUSSIAN:
        tm, th, s2 = _update_longitudinal_gaussian(
            cache, tuning, penalty, mc.xi_bar, mc.xi_outer,
            params.sigma_eps2, params.theta_mu, params.theta_psi)
        new.theta_mu, new.theta_psi, new.sigma_eps2 = tm, th, s2
    else:
        tm, th = _update_longitudinal_binary(
            cache, tuning, penalty, mc.draws, params.theta_mu,
            params.theta_psi)
        new.theta_mu, new.theta_psi = tm, th

    if params.p:
        new.d = np.maximum(np.einsum("ipp->p", mc.xi_outer)
                           / len(data.subjects), 1e-10)

    if include_survival:
        a, b, beta, eta = _update_survival(data, new, tuning, bases,
                                           mc.draws, cache)
        new.a, new.b, new.beta, new.eta = a, b, beta, eta
    return new


# ---------------------------------------------------------------------------
# normalization

def normalize_identifiability(params):
    """Rotate to the identified frame: orthonormal loadings, ordered variances.

    Eigendecomposes theta_psi diag(d) theta_psi^T, keeps the top-p pairs,
    fixes each column's sign so its largest-magnitude entry is positive,
    and maps beta contragrediently.  Returns (new_params, A) where
    xi_new = A xi preserves every likelihood term.
    """
    p = params.p
    new = params.copy()
    if p == 0:
        return new, np.zeros((0, 0))
    C = params.theta_psi @ np.diag(params.d) @ params.theta_psi.T
    evals, evecs = np.linalg.eigh(C)
    lam = evals[::-1][:p].copy()
    V = evecs[:, ::-1][:, :p].copy()
    floor = max(lam[0] * 1e-12, 0.0)
    for l in range(p):
        if not np.isfinite(lam[l]) or lam[l] <= floor:
            raise DegenerateComponentError(l + 1)
        j = int(np.argmax(np.abs(V[:, l])))
        if V[j, l] < 0:
            V[:, l] = -V[:, l]
    A = V.T @ params.theta_psi
    new.theta_psi = V
    new.d = lam
    new.beta = np.linalg.solve(A.T, params.beta)
    return new, A


# ---------------------------------------------------------------------------
# initialization

def _working_response(data):
    c = math.log(3.0)
    return [c * (2.0 * np.asarray(s.y, dtype=float) - 1.0)
            for s in data.subjects]


def _init_longitudinal(data, tuning, bases, penalty, config):
    """Deterministic starting values from a latent-free spline fit.

    Gaussian responses get an exact-E-step EM refinement (the conjugate
    posterior is closed form); binary responses are first mapped to a
    working scale, fitted the same way, and the residual variance is
    discarded.
    """
    family = data.family
    y_over = _working_response(data) if family != GAUSSIAN else None
    cache = _build_cache(data, bases, y_override=y_over)
    q = cache.q
    p = tuning.p
    N = len(cache.y)
    J = penalty.J
    sum_BtB = cache.BtB.sum(axis=0)

    G0 = sum_BtB + tuning.h_mu * J + 1e-9 * np.eye(q)
    theta_mu = _solve_penalized(G0, cache.Bty.sum(axis=0))

    ridge = 1e-6 * (1.0 + float(np.trace(sum_BtB)) / q)
    C = np.zeros((q, q))
    rss, n_total = 0.0, 0
    for i in range(N):
        if cache.n_obs[i] == 0:
            continue
        r = cache.y[i] - cache.B[i] @ theta_mu
        ci = np.linalg.solve(cache.BtB[i] + ridge * np.eye(q),
                             cache.B[i].T @ r)
        C += np.outer(ci, ci) / N
        rss += float(r @ r)
        n_total += cache.n_obs[i]
    sigma2 = max(0.5 * rss / max(n_total, 1), 1e-4)

    if p == 0:
        return theta_mu, np.zeros((q, 0)), sigma2, np.zeros(0), \
            np.zeros((N, 0))

    evals, evecs = np.linalg.eigh(C)
    d = np.maximum(evals[::-1][:p].copy(), 1e-3 * (1.0 + evals.max()))
    theta_psi = evecs[:, ::-1][:, :p].copy()

    xi_bar = np.zeros((N, p))
    prev = None
    for _ in range(40):
        S = np.zeros((N, p, p))
        rss = 0.0
        Dinv = np.diag(1.0 / d)
        for i in range(N):
            Ai = cache.B[i] @ theta_psi
            V = np.linalg.inv(Ai.T @ Ai / sigma2 + Dinv)
            mi = V @ (Ai.T @ (cache.y[i] - cache.B[i] @ theta_mu)) / sigma2
            xi_bar[i] = mi
            S[i] = V + np.outer(mi, mi)
        theta_mu, theta_psi, sigma2 = _update_longitudinal_gaussian(
            cache, tuning, penalty, xi_bar, S, sigma2, theta_mu, theta_psi)
        d = np.maximum(np.einsum("ipp->p", S) / N, 1e-10)
        vec = np.concatenate([theta_mu, theta_psi.ravel(),
                              [sigma2], d])
        if prev is not None and np.max(np.abs(vec - prev)
                                       / (np.abs(prev) + 1e-2)) < 1e-6:
            break
        prev = vec
    return theta_mu, theta_psi, sigma2, d, xi_bar


def _init_params(data, tuning, bases, penalty, config, include_survival):
    theta_mu, theta_psi, sigma2, d, xi0 = _init_longitudinal(
        data, tuning, bases, penalty, config)
    K = len(bases.hazard.knots)
    m = data.n_covariates
    n_exact, follow = 0, 0.0
    for s in data.subjects:
        rec = s.survival
        kind = rec.kind
        if kind == "exact":
            n_exact += 1
            follow += rec.t_left
        elif kind == "right":
            follow += rec.t_right
        else:
            follow += 0.5 * (rec.t_left + rec.t_right)
    a0 = math.log(max(n_exact, 0.5) / max(follow, 1e-8))
    params = JointParams(
        theta_mu=theta_mu, theta_psi=theta_psi,
        sigma_eps2=sigma2 if data.family == GAUSSIAN else None,
        d=d, a=np.array([a0, 0.0]), b=np.zeros(K),
        beta=np.zeros(tuning.p), eta=np.zeros(m))
    if tuning.p:
        params, A = normalize_identifiability(params)
        xi0 = xi0 @ A.T
    return params, xi0


# ---------------------------------------------------------------------------
# driver

def _default_bases(data, config):
    longitudinal = make_orthonormal_bspline(config.n_basis, config.degree,
                                            data.domain)
    hazard = make_hazard_basis([s.survival for s in data.subjects],
                               K=config.hazard_knots)
    return Bases(longitudinal=longitudinal, hazard=hazard)


def _aligned_for_change(new_params, prev_params):
    """Copy of new_params with component signs matched to prev_params.

    The normalization pins each column's largest-magnitude entry positive;
    when two entries of a column are close in magnitude, Monte Carlo noise
    can alternate which one wins, flipping the whole component (and its
    beta coordinate) between iterations.  The flip is a gauge change, not
    parameter movement, so the convergence metric measures the change in
    the gauge nearest the previous iterate.  Stored parameters keep the
    convention.
    """
    if new_params.p == 0:
        return new_params
    flips = np.einsum("ql,ql->l", new_params.theta_psi,
                      prev_params.theta_psi) < 0.0
    if not np.any(flips):
        return new_params
    out = new_params.copy()
    signs = np.where(flips, -1.0, 1.0)
    out.theta_psi = out.theta_psi * signs
    out.beta = out.beta * signs
    return out


def fit(data, tuning, config=None, bases=None, include_survival=True,
        init=None):
    """Fit the joint model by Monte Carlo EM.

    Parameters
    ----------
    data : TrajectorySet
    tuning : TuningParams
        Component count and penalty weights (fixed during the fit).
    config : FitConfig, optional
    bases : Bases, optional
        Prebuilt bases; defaults are constructed from the config.
    include_survival : bool
        False fits the trajectory model alone (relapse block untouched).
    init : JointParams, optional
        Warm start; defaults to the deterministic initializer.

    Returns
    -------
    FitResult
        Normalized estimates, per-iteration trace, and final E-step score
        summaries.  ``converged`` is False when the iteration cap was hit;
        the best-so-far parameters are still returned.
    """
    config = config or FitConfig()
    data.validate()
    if bases is None:
        bases = _default_bases(data, config)
    tuning.validate(q=bases.longitudinal.q)
    penalty = roughness_penalty(bases.longitudinal)
    cache = _build_cache(data, bases)
    family = data.family
    N = len(data.subjects)

    if init is not None:
        params = init.copy()
        if tuning.p:
            params, _ = normalize_identifiability(params)
        xi0 = np.zeros((N, tuning.p))
    else:
        params, xi0 = _init_params(data, tuning, bases, penalty, config,
                                   include_survival)
    state = MHState(xi=xi0.copy(),
                    scales=np.tile(0.5 * np.sqrt(params.d), (N, 1)),
                    acceptance=np.zeros((N, tuning.p)), seed=config.seed)

    R = config.r0
    trace = []
    hits = 0
    converged = False
    prev_vec = flatten_params(params, family)
    best_q = -np.inf
    best_params = params

    for it in range(1, config.max_iter + 1):
        mc = estep(data, params, bases, R, state, config, stage=0,
                   em_iter=it, include_survival=include_survival,
                   cache=cache)
        pen_old = penalty_value(params, tuning, penalty)

        new_params = mstep(mc, data, params, tuning, bases, penalty,
                           include_survival=include_survival, cache=cache)

        sc_new = _survival_constants(data, new_params, bases.hazard,
                                     include_survival)
        new_increments = _per_draw_matrix(cache, new_params, mc.draws,
                                          sc_new, family).sum(axis=0)
        pen_new = penalty_value(new_params, tuning, penalty)
        diff = new_increments - mc.increments
        dq = float(diff.mean()) - (pen_new - pen_old)
        mcse = mc_error(diff) if R >= 8 else float("inf")
        q_new = float(new_increments.mean()) - pen_new

        new_params, A = normalize_identifiability(new_params)
        if tuning.p:
            state.xi = state.xi @ A.T

        vec = flatten_params(new_params, family)
        vec_meas = flatten_params(_aligned_for_change(new_params, params),
                                  family)
        rel = float(np.max(np.abs(vec_meas - prev_vec)
                           / (np.abs(prev_vec) + 1e-2)))
        acc_mean = float(mc.acceptance.mean()) if mc.acceptance.size else 0.0
        trace.append({"iteration": it, "q": q_new, "mc_se": mcse,
                      "max_rel_change": rel, "acceptance": acc_mean,
                      "r": R, "params": vec})
        logger.info("iter %d q=%.6f mc_se=%.4g rel=%.4g acc=%.3f R=%d",
                    it, q_new, mcse, rel, acc_mean, R)

        if q_new > best_q:
            best_q = q_new
            best_params = new_params

        at_noise_floor = dq <= 3.0 * mcse
        hits = hits + 1 if rel < config.tol else 0
        params, prev_vec = new_params, vec
        if hits >= 2 and (at_noise_floor or R >= config.r_max):
            converged = True
            break
        if at_noise_floor:
            R = min(int(math.ceil(R * config.growth)), config.r_max)

    if not converged:
        params = best_params

    mc_final = estep(data, params, bases, R, state, config, stage=1,
                     em_iter=0, include_survival=include_survival,
                     cache=cache)
    covs = mc_final.xi_outer - np.einsum("ip,iq->ipq", mc_final.xi_bar,
                                         mc_final.xi_bar)
    return FitResult(params=params, tuning=tuning, bases=bases,
                     penalty=penalty, config=config, family=family,
                     include_survival=include_survival, trace=trace,
                     converged=converged, iterations=len(trace),
                     score_means=mc_final.xi_bar, score_covs=covs,
                     draws=mc_final.draws, acceptance=mc_final.acceptance,
                     final_r=R)
