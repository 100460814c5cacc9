"""Comparator estimators for the joint trajectory-relapse model.

``fit_longitudinal_only`` drops the relapse block and fits the trajectory
model alone.  ``two_stage_fit`` plugs the resulting posterior mean scores
into a relapse fit as fixed covariates, the classic alternative to joint
estimation; because plug-in scores are shrunken versions of the latent
ones, its regression coefficients attenuate toward zero.  ``raw_pca_fit``
replaces the spline representation altogether with an eigendecomposition
of the response matrix on a common observation grid.
"""

from dataclasses import dataclass
from types import SimpleNamespace

import numpy as np

from .basis import make_hazard_basis
from .errors import InvalidArgumentError, UnsupportedGridError
from .model import GAUSSIAN, Bases, JointParams, TuningParams
from . import mcem
from .mcem import FitConfig


def fit_longitudinal_only(data, tuning, config=None, bases=None, init=None):
    """Fit the trajectory model alone (no relapse block).

    Delegates to the joint driver with the relapse log-likelihood
    removed; the Gaussian case then reduces to an EM whose E-step is
    sampled from the conjugate posterior.  Also serves as stage 1 of
    :func:`two_stage_fit`.

    Parameters
    ----------
    data : TrajectorySet
    tuning : TuningParams
    config : FitConfig, optional
    bases, init : optional
        Forwarded to the driver.

    Returns
    -------
    FitResult
        ``params`` holds the trajectory block (the relapse block stays
        at its starting values); ``score_means`` holds the per-subject
        posterior mean scores.
    """
    return mcem.fit(data, tuning, config=config, bases=bases, init=init,
                    include_survival=False)


def _relapse_stage(data, params0, sigma_b2, bases, scores):
    """Newton fit of the relapse block with fixed score covariates.

    Returns the updated (a, b, beta, eta) and the naive model-based
    covariance: the inverse penalized observed information of the
    stage-two likelihood, which ignores the sampling error carried by
    the plugged-in scores.
    """
    draws = np.asarray(scores, dtype=float)[:, None, :]
    tuning = TuningParams(p=draws.shape[2], h_mu=0.0, h_psi=0.0,
                          sigma_b2=sigma_b2)
    cache = SimpleNamespace(
        z=np.stack([np.asarray(s.z, dtype=float) for s in data.subjects]))
    a, b, beta, eta = mcem._update_survival(data, params0, tuning, bases,
                                            draws, cache)
    opt = params0.copy()
    opt.a, opt.b, opt.beta, opt.eta = a, b, beta, eta
    _, H = mcem._survival_grad_hess(data, opt, tuning, bases, draws, cache)
    cov = np.linalg.inv(-H)
    return a, b, beta, eta, cov


class _RelapseBlockMixin:
    """Shared accessors for results carrying a fixed-covariate relapse fit.

    ``covariance`` is ordered [a (2), b (K), beta (p), eta (m)].
    """

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    @property
    def se_beta(self):
        k = len(self.b)
        return self.se[2 + k:2 + k + len(self.beta)]

    @property
    def se_eta(self):
        return self.se[len(self.se) - len(self.eta):]


@dataclass
class TwoStageResult(_RelapseBlockMixin):
    """Stage-1 trajectory fit plus a plug-in relapse fit on its scores."""

    trajectory: object
    scores: np.ndarray
    a: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    covariance: np.ndarray


@dataclass
class RawPcaResult(_RelapseBlockMixin):
    """Grid eigendecomposition plus a relapse fit on its scores.

    ``components`` are orthonormal as grid vectors (unit Euclidean norm
    per column), not as functions; ``explained`` are the corresponding
    shares of total variance.
    """

    grid: np.ndarray
    mean: np.ndarray
    components: np.ndarray
    variances: np.ndarray
    explained: np.ndarray
    scores: np.ndarray
    a: np.ndarray
    b: np.ndarray
    beta: np.ndarray
    eta: np.ndarray
    covariance: np.ndarray


def two_stage_fit(data, tuning, config=None, bases=None, scores=None):
    """Trajectory fit first, relapse regression on its scores second.

    Parameters
    ----------
    data : TrajectorySet
    tuning : TuningParams
    config : FitConfig, optional
    bases : Bases, optional
    scores : (N, p) array, optional
        Override the stage-1 posterior mean scores with externally
        supplied values (e.g. the latent truth, to isolate how much of
        the attenuation is plug-in shrinkage).

    Returns
    -------
    TwoStageResult
        The relapse coefficients, their naive covariance, the stage-1
        fit, and the score covariates actually used.
    """
    config = config or FitConfig()
    stage1 = fit_longitudinal_only(data, tuning, config=config, bases=bases)
    used = stage1.score_means if scores is None \
        else np.asarray(scores, dtype=float)
    if used.shape != (len(data.subjects), tuning.p):
        raise InvalidArgumentError(
            f"scores shape {used.shape} != {(len(data.subjects), tuning.p)}")
    a, b, beta, eta, cov = _relapse_stage(data, stage1.params,
                                          tuning.sigma_b2, stage1.bases,
                                          used)
    return TwoStageResult(trajectory=stage1, scores=used, a=a, b=b,
                          beta=beta, eta=eta, covariance=cov)


def raw_pca_fit(data, n_components, config=None, sigma_b2=1.0):
    """Principal components of gridded responses as relapse covariates.

    No spline representation and no roughness penalty: the centered
    response matrix is eigendecomposed directly, so every subject must
    be observed on the same grid.

    Parameters
    ----------
    data : TrajectorySet
        Gaussian family, common observation grid.
    n_components : int
        Leading components kept as stage-two covariates.
    config : FitConfig, optional
        Supplies the relapse knot count and seed bookkeeping.
    sigma_b2 : float
        Ridge variance for the hazard bend coefficients.

    Returns
    -------
    RawPcaResult
    """
    config = config or FitConfig()
    data.validate()
    if data.family != GAUSSIAN:
        raise InvalidArgumentError("raw PCA requires gaussian responses")
    grids = [np.asarray(s.times, dtype=float) for s in data.subjects]
    grid = grids[0]
    for g in grids[1:]:
        if len(g) != len(grid) or not np.allclose(g, grid, atol=1e-10):
            raise UnsupportedGridError(
                "subjects are observed on different grids")
    n = len(grid)
    if not 1 <= n_components <= min(n, len(grids)):
        raise InvalidArgumentError(
            f"n_components={n_components} outside [1, {min(n, len(grids))}]")

    Y = np.stack([np.asarray(s.y, dtype=float) for s in data.subjects])
    mean = Y.mean(axis=0)
    Yc = Y - mean
    C = Yc.T @ Yc / (len(Y) - 1)
    evals, evecs = np.linalg.eigh(C)
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    # pin each component's largest-magnitude coordinate positive
    piv = evecs[np.argmax(np.abs(evecs), axis=0), np.arange(n)]
    signs = np.sign(piv)
    signs[signs == 0] = 1.0
    evecs = evecs * signs
    components = evecs[:, :n_components].copy()
    variances = np.clip(evals[:n_components], 0.0, None)
    total = float(np.clip(evals, 0.0, None).sum())
    explained = variances / total if total > 0 else np.zeros(n_components)
    scores = Yc @ components

    hazard = make_hazard_basis([s.survival for s in data.subjects],
                               K=config.hazard_knots)
    bases = Bases(longitudinal=None, hazard=hazard)
    n_exact = sum(s.survival.kind == "exact" for s in data.subjects)
    follow = sum({"exact": r.t_left, "right": r.t_right,
                  "interval": 0.5 * (r.t_left + r.t_right)}[r.kind]
                 for r in (s.survival for s in data.subjects))
    params0 = JointParams(
        theta_mu=np.zeros(1), theta_psi=np.zeros((1, n_components)),
        sigma_eps2=None, d=np.ones(n_components),
        a=np.array([np.log(max(n_exact, 0.5) / max(follow, 1e-8)), 0.0]),
        b=np.zeros(hazard.K), beta=np.zeros(n_components),
        eta=np.zeros(data.n_covariates))
    a, b, beta, eta, cov = _relapse_stage(data, params0, sigma_b2, bases,
                                          scores)
    return RawPcaResult(grid=grid, mean=mean, components=components,
                        variances=variances, explained=explained,
                        scores=scores, a=a, b=b, beta=beta, eta=eta,
                        covariance=cov)
