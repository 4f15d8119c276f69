"""Pure numpy implementation of the likelihood kernels (same signatures as ``_core``)."""

import numpy as np
from scipy.special import log_ndtr, logsumexp

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def _log_transition_matrix(ua, uc, dprev, d, nodes, sigma1, sigma2):
    a = ua[:, None] + sigma1 * nodes[None, :]
    c = uc[:, None] + sigma2 * nodes[None, :]
    out = np.empty_like(a)

    stay = dprev == 1
    m = stay & (d == 1)
    out[m] = log_ndtr(c[m])
    m = stay & (d == 0)
    out[m] = log_ndtr(-c[m])
    m = ~stay & (d == 1)
    out[m] = log_ndtr(a[m]) + log_ndtr(c[m])
    m = ~stay & (d == 0)
    out[m] = np.logaddexp(log_ndtr(-a[m]), log_ndtr(a[m]) + log_ndtr(-c[m]))
    return out


def household_log_cpl(ua, uc, dprev, d, starts, nodes, sigma1, sigma2):
    ua, uc, nodes = (np.asarray(v, dtype=float) for v in (ua, uc, nodes))
    dprev, d, starts = np.asarray(dprev), np.asarray(d), np.asarray(starts, dtype=np.int64)
    H = starts.size - 1
    if H == 0:
        return np.empty((0, nodes.size))
    logp = _log_transition_matrix(ua, uc, dprev, d, nodes, sigma1, sigma2)
    out = np.add.reduceat(logp, starts[:-1], axis=0)
    # reduceat returns the row itself for empty blocks; empty histories are rejected upstream
    return out


def household_loglik(ua, uc, dprev, d, starts, nodes, log_weights, sigma1, sigma2):
    log_cpl = household_log_cpl(ua, uc, dprev, d, starts, nodes, sigma1, sigma2)
    return logsumexp(log_cpl + np.asarray(log_weights)[None, :], axis=1)


def _log_pdf(x):
    return -0.5 * x * x - _HALF_LOG_2PI


def _dlog_transition_matrix(ua, uc, dprev, d, nodes, sigma1, sigma2):
    a = ua[:, None] + sigma1 * nodes[None, :]
    c = uc[:, None] + sigma2 * nodes[None, :]
    da = np.zeros_like(a)
    dc = np.empty_like(c)

    stay = np.broadcast_to((dprev == 1)[:, None], a.shape)
    dd = np.broadcast_to((d == 1)[:, None], a.shape)
    m = stay & dd
    dc[m] = np.exp(_log_pdf(c[m]) - log_ndtr(c[m]))
    m = stay & ~dd
    dc[m] = -np.exp(_log_pdf(c[m]) - log_ndtr(-c[m]))
    m = ~stay & dd
    da[m] = np.exp(_log_pdf(a[m]) - log_ndtr(a[m]))
    dc[m] = np.exp(_log_pdf(c[m]) - log_ndtr(c[m]))
    m = ~stay & ~dd
    am, cm = a[m], c[m]
    lp0 = np.logaddexp(log_ndtr(-am), log_ndtr(am) + log_ndtr(-cm))
    da[m] = -np.exp(_log_pdf(am) + log_ndtr(cm) - lp0)
    dc[m] = -np.exp(log_ndtr(am) + _log_pdf(cm) - lp0)
    return da, dc


def household_loglik_grad(ua, uc, dprev, d, starts, nodes, log_weights, sigma1, sigma2):
    ua, uc, nodes = (np.asarray(v, dtype=float) for v in (ua, uc, nodes))
    dprev, d, starts = np.asarray(dprev), np.asarray(d), np.asarray(starts, dtype=np.int64)
    log_cpl = household_log_cpl(ua, uc, dprev, d, starts, nodes, sigma1, sigma2)
    joint = log_cpl + np.asarray(log_weights)[None, :]
    ll = logsumexp(joint, axis=1)
    post = np.exp(joint - ll[:, None])
    lengths = np.diff(starts)
    post_rows = np.repeat(post, lengths, axis=0)
    da, dc = _dlog_transition_matrix(ua, uc, dprev, d, nodes, sigma1, sigma2)
    wa, wc = post_rows * da, post_rows * dc
    return ll, wa.sum(axis=1), wc.sum(axis=1), float((wa @ nodes).sum()), float((wc @ nodes).sum())
