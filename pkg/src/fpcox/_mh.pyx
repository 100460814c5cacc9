# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled Metropolis-Hastings kernel.

Componentwise Gaussian random-walk sweeps for one subject's latent score
chain.  All randomness (proposal normals, log-uniforms) is generated by the
caller and passed in, so chains are reproducible and the pure-numpy fallback
consumes the identical stream.
"""

import numpy as np

from libc.math cimport exp, log, log1p, expm1, fabs, pow

DEF OVERFLOW_GUARD = 690.0


cdef inline double _softplus(double x) nogil:
    if x > 0.0:
        return x + log1p(exp(-x))
    return log1p(exp(x))


cdef inline double _log1mexp(double u) nogil:
    # log(1 - e^{-u}) for u > 0
    if u > 0.6931471805599453:
        return log1p(-exp(-u))
    return log(-expm1(-u))


cdef inline double _relapse_ll(double lp, int case, double lam_l,
                               double dlam) nogil:
    cdef double elp
    if case == 3:
        return 0.0
    if lp > OVERFLOW_GUARD:
        return -1e300
    elp = exp(lp)
    if case == 0:
        return lp - elp * lam_l
    if case == 1:
        return -elp * lam_l
    return -elp * lam_l + _log1mexp(elp * dlam)


def run_chain(int family, double[::1] y, double[:, ::1] A, double[::1] off,
              double sigma2, double[::1] d, double[::1] beta, double zeta,
              int case, double lam_l, double dlam,
              double[::1] xi0, double[::1] scales_in,
              double[:, ::1] z, double[:, ::1] logu,
              int n_burn, int n_keep, double target):
    """Run n_burn + n_keep componentwise sweeps; return kept draws.

    family: 0 Gaussian, 1 binary.  case: 0 exact, 1 right censored,
    2 interval censored, 3 no survival term.  Proposal scales adapt by
    Robbins-Monro toward `target` acceptance during the burn-in only.

    Returns (draws (n_keep, p), acceptance rate per component over the kept
    sweeps, final scales).
    """
    cdef int n = y.shape[0]
    cdef int p = d.shape[0]
    cdef int T = n_burn + n_keep
    cdef int t, l, j
    cdef double delta, prop, cur, dlong, drel, dfrail, dtot
    cdef double rdot, cn, lp_prop, gamma, acc

    draws_arr = np.empty((n_keep, p), dtype=np.float64)
    acc_arr = np.zeros(p, dtype=np.float64)
    scales_arr = np.asarray(scales_in, dtype=np.float64).copy()
    xi_arr = np.asarray(xi0, dtype=np.float64).copy()
    # work = residual (Gaussian) or linear predictor (binary)
    work_arr = np.empty(n, dtype=np.float64)
    colnorm_arr = np.zeros(p, dtype=np.float64)

    cdef double[:, ::1] draws = draws_arr
    cdef double[::1] accv = acc_arr
    cdef double[::1] scales = scales_arr
    cdef double[::1] xi = xi_arr
    cdef double[::1] work = work_arr
    cdef double[::1] colnorm = colnorm_arr
    cdef double lp, rel_cur, rel_prop

    with nogil:
        lp = zeta
        for l in range(p):
            lp += xi[l] * beta[l]
            for j in range(n):
                colnorm[l] += A[j, l] * A[j, l]
        for j in range(n):
            cur = off[j]
            for l in range(p):
                cur += A[j, l] * xi[l]
            if family == 0:
                work[j] = y[j] - cur
            else:
                work[j] = cur
        rel_cur = _relapse_ll(lp, case, lam_l, dlam)

        for t in range(T):
            for l in range(p):
                delta = scales[l] * z[t, l]
                prop = xi[l] + delta

                if family == 0:
                    rdot = 0.0
                    for j in range(n):
                        rdot += work[j] * A[j, l]
                    dlong = (2.0 * delta * rdot - delta * delta * colnorm[l]) \
                        / (2.0 * sigma2)
                else:
                    dlong = 0.0
                    for j in range(n):
                        cur = work[j] + delta * A[j, l]
                        dlong += y[j] * delta * A[j, l] \
                            - _softplus(cur) + _softplus(work[j])

                lp_prop = lp + delta * beta[l]
                rel_prop = _relapse_ll(lp_prop, case, lam_l, dlam)
                drel = rel_prop - rel_cur
                dfrail = -(prop * prop - xi[l] * xi[l]) / (2.0 * d[l])
                dtot = dlong + drel + dfrail

                acc = 0.0
                if logu[t, l] < dtot:
                    acc = 1.0
                    xi[l] = prop
                    lp = lp_prop
                    rel_cur = rel_prop
                    if family == 0:
                        for j in range(n):
                            work[j] -= delta * A[j, l]
                    else:
                        for j in range(n):
                            work[j] += delta * A[j, l]
                    if t >= n_burn:
                        accv[l] += 1.0

                if t < n_burn:
                    gamma = pow(t + 1.0, -0.6)
                    scales[l] *= exp(gamma * (acc - target))

            if t >= n_burn:
                for l in range(p):
                    draws[t - n_burn, l] = xi[l]

    if n_keep > 0:
        acc_arr /= n_keep
    return draws_arr, acc_arr, scales_arr
