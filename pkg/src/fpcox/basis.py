"""Spline bases for the joint model.

Two bases live here: orthonormalized cubic B-splines on equally spaced
interior knots for the longitudinal mean and eigenfunctions (with the
second-derivative roughness penalty), and the truncated-power linear-spline
design for the log baseline hazard, with knots at empirical quantiles of the
pooled censoring-interval endpoints and midpoints.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import cholesky, solve_triangular

from .errors import InvalidArgumentError, KnotPlacementError, OutOfDomainError

logger = logging.getLogger(__name__)

# Gauss-Legendre order per knot span; exact for polynomial integrands up to
# degree 15, well above the degree-6 products of two cubics.
_QUAD_POINTS = 8


class BSplineBasis:
    """Orthonormalized B-spline basis on a closed interval.

    The raw B-splines are built on ``q - degree - 1`` equally spaced interior
    knots; ``ortho_transform`` maps them to functions whose L2 Gram matrix is
    the identity.  Instances are immutable after construction and safe to
    share across worker processes.

    Attributes
    ----------
    degree : int
        Polynomial degree of each piece (cubic = 3).
    domain : tuple of float
        Closed interval on which the basis lives; evaluation outside raises.
    q : int
        Number of basis functions.
    interior_knots : ndarray
        Strictly increasing interior knots (may be empty).
    ortho_transform : ndarray, shape (q, q)
        Lower-triangular matrix W with  B_ortho(t) = W @ B_raw(t).
    """

    def __init__(self, degree, domain, q, interior_knots, ortho_transform,
                 knot_vector):
        self.degree = int(degree)
        self.domain = (float(domain[0]), float(domain[1]))
        self.q = int(q)
        self.interior_knots = np.asarray(interior_knots, dtype=float)
        self.ortho_transform = np.asarray(ortho_transform, dtype=float)
        self._knot_vector = np.asarray(knot_vector, dtype=float)
        self._splines = {0: BSpline(self._knot_vector, np.eye(self.q),
                                    self.degree, extrapolate=False)}

    def _raw_spline(self, deriv):
        if deriv not in self._splines:
            self._splines[deriv] = self._splines[0].derivative(deriv)
        return self._splines[deriv]

    def design_raw(self, t, deriv=0):
        """Raw (pre-orthonormalization) design matrix, shape (len(t), q)."""
        t = np.asarray(t, dtype=float)
        a, b = self.domain
        if t.size and (t.min() < a or t.max() > b):
            bad = t[(t < a) | (t > b)][0]
            raise OutOfDomainError(
                f"evaluation point {bad!r} outside basis domain [{a}, {b}]")
        vals = self._raw_spline(deriv)(t)
        # scipy returns NaN rows only outside the domain, which the bounds
        # check above already excludes; guard against rounding at endpoints
        return np.nan_to_num(vals, copy=False)

    def design(self, t, deriv=0):
        """Orthonormalized design matrix, shape (len(t), q)."""
        return self.design_raw(t, deriv=deriv) @ self.ortho_transform.T

    def evaluate(self, t):
        """Basis vector at scalar t, shape (q,)."""
        return self.design(np.atleast_1d(float(t)))[0]

    @property
    def spans(self):
        """Consecutive distinct knot pairs covering the domain."""
        pts = np.concatenate(([self.domain[0]], self.interior_knots,
                              [self.domain[1]]))
        return list(zip(pts[:-1], pts[1:]))


@dataclass(frozen=True, eq=False)
class PenaltyMatrix:
    """Second-derivative roughness penalty  J = integral of B'' B''^T."""

    J: np.ndarray


@dataclass(frozen=True, eq=False)
class HazardBasis:
    """Truncated-power linear-spline basis for the log baseline hazard.

    The design at time t is (1, t, (t - k_1)_+, ..., (t - k_K)_+); ``t_max``
    records the largest pooled observation time, used to truncate predicted
    event draws to the supported range.
    """

    knots: np.ndarray
    t_max: float

    @property
    def K(self):
        return len(self.knots)

    def design(self, t):
        """Design matrix for an array of times, shape (len(t), K + 2)."""
        t = np.asarray(t, dtype=float)
        if t.size and t.min() < 0:
            raise InvalidArgumentError(f"negative time {t.min()!r} in hazard design")
        cols = [np.ones_like(t), t]
        for k in self.knots:
            cols.append(np.maximum(t - k, 0.0))
        return np.stack(cols, axis=-1)


def _span_quadrature(spans):
    """Gauss-Legendre nodes/weights pooled over knot spans."""
    x, w = np.polynomial.legendre.leggauss(_QUAD_POINTS)
    nodes, weights = [], []
    for u1, u2 in spans:
        half = 0.5 * (u2 - u1)
        nodes.append(half * x + 0.5 * (u1 + u2))
        weights.append(half * w)
    return np.concatenate(nodes), np.concatenate(weights)


def make_orthonormal_bspline(q, degree, domain):
    """Construct an orthonormalized B-spline basis.

    Parameters
    ----------
    q : int
        Basis dimension; must satisfy q >= degree + 1.
    degree : int
        Spline degree (3 for cubic).
    domain : (float, float)
        Closed, nondegenerate interval.

    Returns
    -------
    BSplineBasis
        Basis whose L2 Gram matrix is the identity to quadrature exactness.
    """
    q, degree = int(q), int(degree)
    a, b = float(domain[0]), float(domain[1])
    if degree < 0:
        raise InvalidArgumentError("degree must be nonnegative")
    if q < degree + 1:
        raise InvalidArgumentError(
            f"q={q} too small for degree {degree}; need q >= {degree + 1}")
    if not b > a:
        raise InvalidArgumentError(f"degenerate domain [{a}, {b}]")

    n_interior = q - degree - 1
    interior = np.linspace(a, b, n_interior + 2)[1:-1]
    knot_vector = np.concatenate((np.full(degree + 1, a), interior,
                                  np.full(degree + 1, b)))
    basis = BSplineBasis(degree, (a, b), q, interior, np.eye(q), knot_vector)

    nodes, weights = _span_quadrature(basis.spans)
    raw = basis.design_raw(nodes)
    gram = (raw * weights[:, None]).T @ raw
    gram = 0.5 * (gram + gram.T)
    L = cholesky(gram, lower=True)
    W = solve_triangular(L, np.eye(q), lower=True)
    return BSplineBasis(degree, (a, b), q, interior, W, knot_vector)


def eval_basis(basis, t):
    """Evaluate the orthonormalized basis at scalar t (length-q vector)."""
    return basis.evaluate(t)


def roughness_penalty(basis):
    """Second-derivative penalty matrix of an orthonormalized basis.

    For cubic splines the null space holds the linear functions, so the
    returned matrix is positive semidefinite of rank q - 2.
    """
    if basis.degree < 2:
        raise InvalidArgumentError(
            f"roughness penalty needs degree >= 2, got {basis.degree}")
    nodes, weights = _span_quadrature(basis.spans)
    d2 = basis.design(nodes, deriv=2)
    J = (d2 * weights[:, None]).T @ d2
    return PenaltyMatrix(J=0.5 * (J + J.T))


def make_hazard_basis(records, K=None):
    """Place truncated-power knots from interval-censored records.

    Knots sit at the k/(K+1) linear-interpolation quantiles (k = 1..K) of the
    de-duplicated pooled set {T_left, T_right, midpoints}.  Duplicate knots
    are dropped with a warning, reducing the effective K.

    Parameters
    ----------
    records : sequence
        Objects with t_left / t_right attributes.
    K : int, optional
        Number of knots; defaults to min(N // 4, 30).
    """
    if not records:
        raise InvalidArgumentError("no survival records to place knots from")
    tl = np.array([r.t_left for r in records], dtype=float)
    tr = np.array([r.t_right for r in records], dtype=float)
    pooled = np.unique(np.concatenate((tl, tr, 0.5 * (tl + tr))))
    if len(pooled) < 2:
        raise KnotPlacementError(
            f"only {len(pooled)} distinct pooled event value(s); need >= 2")
    if K is None:
        K = min(len(records) // 4, 30)
    K = int(K)
    if K < 1:
        raise InvalidArgumentError(f"K={K}; need at least one knot")
    probs = np.arange(1, K + 1) / (K + 1)
    knots = np.unique(np.quantile(pooled, probs, method="linear"))
    if len(knots) < K:
        logger.warning("dropped %d duplicate hazard knot(s); effective K = %d",
                       K - len(knots), len(knots))
    return HazardBasis(knots=knots, t_max=float(pooled.max()))


def eval_hazard_design(basis, t):
    """Hazard design row (1, t, (t-k_1)_+, ..., (t-k_K)_+) at scalar t."""
    t = float(t)
    if t < 0:
        raise InvalidArgumentError(f"negative time {t} in hazard design")
    return basis.design(np.array([t]))[0]
