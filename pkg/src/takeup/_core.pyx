# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled likelihood kernels.

Inputs are packed per household-month: the attention index and the choice
index (hassle already applied) without the random-effect term, the lagged
decision and the decision.  Households occupy contiguous row blocks given by
``starts`` (length H + 1).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport erfc, log, exp, sqrt, fabs, INFINITY, M_PI

cnp.import_array()

cdef double _SQRT1_2 = 0.7071067811865476
cdef double _HALF_LOG_2PI = 0.9189385332046728
cdef double _RESCALE = 1e-200


cdef inline double _ncdf(double x) nogil:
    return 0.5 * erfc(-x * _SQRT1_2)


cdef inline double _log_ncdf(double x) nogil:
    cdef double x2, r
    if x > -30.0:
        return log(0.5 * erfc(-x * _SQRT1_2))
    # asymptotic Mills-ratio series
    x2 = 1.0 / (x * x)
    r = 1.0 - x2 + 3.0 * x2 * x2 - 15.0 * x2 * x2 * x2 + 105.0 * x2 * x2 * x2 * x2
    return -0.5 * x * x - log(-x) - _HALF_LOG_2PI + log(r)


cdef inline double _logaddexp(double a, double b) nogil:
    if a == -INFINITY:
        return b
    if b == -INFINITY:
        return a
    if a > b:
        return a + log(1.0 + exp(b - a))
    return b + log(1.0 + exp(a - b))


cdef inline double _log_transition(double a, double c, signed char dprev, signed char d) nogil:
    if dprev:
        return _log_ncdf(c) if d else _log_ncdf(-c)
    if d:
        return _log_ncdf(a) + _log_ncdf(c)
    return _logaddexp(_log_ncdf(-a), _log_ncdf(a) + _log_ncdf(-c))


cdef inline double _transition(double a, double c, signed char dprev, signed char d) nogil:
    if dprev:
        return _ncdf(c) if d else _ncdf(-c)
    if d:
        return _ncdf(a) * _ncdf(c)
    return _ncdf(-a) + _ncdf(a) * _ncdf(-c)


cdef inline double _log_cpl(
    const double[::1] ua, const double[::1] uc,
    const signed char[::1] dprev, const signed char[::1] d,
    Py_ssize_t lo, Py_ssize_t hi, double q, double s1, double s2,
) nogil:
    cdef Py_ssize_t t
    cdef double a, c, p, prod = 1.0, acc = 0.0
    for t in range(lo, hi):
        a = ua[t] + s1 * q
        c = uc[t] + s2 * q
        p = _transition(a, c, dprev[t], d[t])
        if p < 1e-290:
            acc += _log_transition(a, c, dprev[t], d[t])
            continue
        prod *= p
        if prod < _RESCALE:
            acc += log(prod)
            prod = 1.0
    return acc + log(prod)


def household_loglik(
    const double[::1] ua,
    const double[::1] uc,
    const signed char[::1] dprev,
    const signed char[::1] d,
    const cnp.int64_t[::1] starts,
    const double[::1] nodes,
    const double[::1] log_weights,
    double sigma1,
    double sigma2,
):
    """Log of the quadrature-marginalized sequence likelihood, one value per household."""
    cdef Py_ssize_t H = starts.shape[0] - 1
    cdef Py_ssize_t K = nodes.shape[0]
    cdef Py_ssize_t h, k
    cdef double m, s, v
    out_arr = np.empty(H, dtype=np.float64)
    tmp_arr = np.empty(K, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] tmp = tmp_arr
    with nogil:
        for h in range(H):
            m = -INFINITY
            for k in range(K):
                v = log_weights[k] + _log_cpl(ua, uc, dprev, d, starts[h], starts[h + 1],
                                              nodes[k], sigma1, sigma2)
                tmp[k] = v
                if v > m:
                    m = v
            if m == -INFINITY:
                out[h] = -INFINITY
                continue
            s = 0.0
            for k in range(K):
                s += exp(tmp[k] - m)
            out[h] = m + log(s)
    return out_arr


def household_log_cpl(
    const double[::1] ua,
    const double[::1] uc,
    const signed char[::1] dprev,
    const signed char[::1] d,
    const cnp.int64_t[::1] starts,
    const double[::1] nodes,
    double sigma1,
    double sigma2,
):
    """Matrix (H, K) of log conditional sequence likelihoods at each node."""
    cdef Py_ssize_t H = starts.shape[0] - 1
    cdef Py_ssize_t K = nodes.shape[0]
    cdef Py_ssize_t h, k
    out_arr = np.empty((H, K), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for h in range(H):
            for k in range(K):
                out[h, k] = _log_cpl(ua, uc, dprev, d, starts[h], starts[h + 1],
                                     nodes[k], sigma1, sigma2)
    return out_arr


cdef inline double _mills(double x) nogil:
    # phi(x) / Phi(x)
    if x > -30.0:
        return exp(-0.5 * x * x - _HALF_LOG_2PI) / _ncdf(x)
    return exp(-0.5 * x * x - _HALF_LOG_2PI - _log_ncdf(x))


cdef inline void _dlog_transition(double a, double c, signed char dprev, signed char d,
                                  double* da, double* dc) nogil:
    cdef double p0, la, lc
    if dprev:
        da[0] = 0.0
        dc[0] = _mills(c) if d else -_mills(-c)
        return
    if d:
        da[0] = _mills(a)
        dc[0] = _mills(c)
        return
    p0 = _ncdf(-a) + _ncdf(a) * _ncdf(-c)
    if p0 > 1e-290:
        da[0] = -exp(-0.5 * a * a - _HALF_LOG_2PI) * _ncdf(c) / p0
        dc[0] = -_ncdf(a) * exp(-0.5 * c * c - _HALF_LOG_2PI) / p0
        return
    la = _log_transition(a, c, 0, 0)
    da[0] = -exp(-0.5 * a * a - _HALF_LOG_2PI + _log_ncdf(c) - la)
    dc[0] = -exp(_log_ncdf(a) - 0.5 * c * c - _HALF_LOG_2PI - la)


def household_loglik_grad(
    const double[::1] ua,
    const double[::1] uc,
    const signed char[::1] dprev,
    const signed char[::1] d,
    const cnp.int64_t[::1] starts,
    const double[::1] nodes,
    const double[::1] log_weights,
    double sigma1,
    double sigma2,
):
    """Per-household log-likelihood and its derivatives.

    Returns ``(loglik, grad_ua, grad_uc, grad_sigma1, grad_sigma2)`` where the
    row gradients are derivatives of the total log-likelihood with respect to
    each month's attention and choice index, and the last two are scalars.
    """
    cdef Py_ssize_t H = starts.shape[0] - 1
    cdef Py_ssize_t K = nodes.shape[0]
    cdef Py_ssize_t n = ua.shape[0]
    cdef Py_ssize_t h, k, t
    cdef double m, s, v, w, q, a, c, da, dc, ta, tc, gs1 = 0.0, gs2 = 0.0
    out_arr = np.empty(H, dtype=np.float64)
    tmp_arr = np.empty(K, dtype=np.float64)
    ga_arr = np.zeros(n, dtype=np.float64)
    gc_arr = np.zeros(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double[::1] tmp = tmp_arr
    cdef double[::1] ga = ga_arr
    cdef double[::1] gc = gc_arr
    with nogil:
        for h in range(H):
            m = -INFINITY
            for k in range(K):
                v = log_weights[k] + _log_cpl(ua, uc, dprev, d, starts[h], starts[h + 1],
                                              nodes[k], sigma1, sigma2)
                tmp[k] = v
                if v > m:
                    m = v
            if m == -INFINITY:
                out[h] = -INFINITY
                continue
            s = 0.0
            for k in range(K):
                s += exp(tmp[k] - m)
            out[h] = m + log(s)
            for k in range(K):
                w = exp(tmp[k] - out[h])
                if w < 1e-15:
                    continue
                q = nodes[k]
                for t in range(starts[h], starts[h + 1]):
                    a = ua[t] + sigma1 * q
                    c = uc[t] + sigma2 * q
                    _dlog_transition(a, c, dprev[t], d[t], &da, &dc)
                    ta = w * da
                    tc = w * dc
                    ga[t] += ta
                    gc[t] += tc
                    gs1 += ta * q
                    gs2 += tc * q
    return out_arr, ga_arr, gc_arr, gs1, gs2
