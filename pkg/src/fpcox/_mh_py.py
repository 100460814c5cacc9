"""Pure-numpy Metropolis-Hastings kernel.

Mirrors the compiled kernel's mathematics but runs all subjects' chains in
lockstep: one vectorized proposal per component per sweep across the whole
batch.  Subjects are padded to a common trajectory length with zero rows,
which contribute exactly zero to every likelihood difference.

Statistically equivalent to the compiled kernel (identical proposal and
uniform streams per subject) but not bit-identical: BLAS-order summation can
flip borderline accept decisions.  Within one kernel, runs are deterministic.
"""

import numpy as np

_OVERFLOW_GUARD = 690.0


def _softplus(x):
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def _log1mexp(u):
    out = np.empty_like(u)
    hi = u > 0.6931471805599453
    out[hi] = np.log1p(-np.exp(-u[hi]))
    lo = ~hi
    # extreme proposals can push u to huge or nonfinite values; the result
    # is nan/-inf and the chain rejects, so only the warnings are suppressed
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        out[lo] = np.log(-np.expm1(-u[lo]))
    return out


def _relapse_ll(lp, case, lam_l, dlam):
    """Vectorized relapse log-likelihood over subjects."""
    out = np.zeros_like(lp)
    guarded = np.minimum(lp, _OVERFLOW_GUARD)
    elp = np.exp(guarded)
    over = lp > _OVERFLOW_GUARD

    exact = case == 0
    out[exact] = lp[exact] - elp[exact] * lam_l[exact]
    right = case == 1
    out[right] = -elp[right] * lam_l[right]
    inter = case == 2
    if np.any(inter):
        out[inter] = -elp[inter] * lam_l[inter] \
            + _log1mexp(elp[inter] * dlam[inter])
    out[over & (case != 3)] = -1e300
    return out


def run_chains(family, y_list, A_list, off_list, sigma2, d, beta, zeta,
               case, lam_l, dlam, xi0, scales_in, z, logu,
               n_burn, n_keep, target):
    """Lockstep chains for a batch of subjects.

    Parameters mirror the compiled kernel, batched: y_list/A_list/off_list
    are per-subject arrays (ragged); zeta, case, lam_l, dlam are (N,); xi0
    and scales_in are (N, p); z and logu are (N, T, p) with
    T = n_burn + n_keep.

    Returns (draws (N, n_keep, p), acceptance rates (N, p), scales (N, p)).
    """
    N = len(y_list)
    p = d.shape[0]
    T = n_burn + n_keep
    nmax = max((len(y) for y in y_list), default=0)

    y = np.zeros((N, nmax))
    A = np.zeros((N, nmax, p))
    off = np.zeros((N, nmax))
    for i, (yi, Ai, oi) in enumerate(zip(y_list, A_list, off_list)):
        n = len(yi)
        y[i, :n] = yi
        A[i, :n, :] = Ai
        off[i, :n] = oi

    xi = np.array(xi0, dtype=float, copy=True)
    scales = np.array(scales_in, dtype=float, copy=True)
    case = np.asarray(case)
    lam_l = np.asarray(lam_l, dtype=float)
    dlam = np.asarray(dlam, dtype=float)
    zeta = np.asarray(zeta, dtype=float)

    colnorm = np.einsum("ijl,ijl->il", A, A)
    lp = zeta + xi @ beta
    if family == 0:
        work = y - off - np.einsum("ijl,il->ij", A, xi)
    else:
        work = off + np.einsum("ijl,il->ij", A, xi)
    rel_cur = _relapse_ll(lp, case, lam_l, dlam)

    draws = np.empty((N, n_keep, p))
    acc_counts = np.zeros((N, p))

    for t in range(T):
        for l in range(p):
            delta = scales[:, l] * z[:, t, l]
            prop = xi[:, l] + delta

            Al = A[:, :, l]
            if family == 0:
                rdot = np.einsum("ij,ij->i", work, Al)
                dlong = (2.0 * delta * rdot - delta**2 * colnorm[:, l]) \
                    / (2.0 * sigma2)
            else:
                shift = delta[:, None] * Al
                dlong = (y * shift - _softplus(work + shift)
                         + _softplus(work)).sum(axis=1)

            lp_prop = lp + delta * beta[l]
            rel_prop = _relapse_ll(lp_prop, case, lam_l, dlam)
            dfrail = -(prop**2 - xi[:, l]**2) / (2.0 * d[l])
            dtot = dlong + (rel_prop - rel_cur) + dfrail

            accept = logu[:, t, l] < dtot
            if np.any(accept):
                xi[accept, l] = prop[accept]
                lp[accept] = lp_prop[accept]
                rel_cur[accept] = rel_prop[accept]
                upd = delta[accept, None] * Al[accept]
                if family == 0:
                    work[accept] -= upd
                else:
                    work[accept] += upd
                if t >= n_burn:
                    acc_counts[accept, l] += 1.0

            if t < n_burn:
                gamma = (t + 1.0) ** -0.6
                scales[:, l] *= np.exp(gamma * (accept - target))

        if t >= n_burn:
            draws[:, t - n_burn, :] = xi

    if n_keep > 0:
        acc_counts /= n_keep
    return draws, acc_counts, scales
