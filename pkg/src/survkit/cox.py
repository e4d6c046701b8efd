"""Negative Cox partial log-likelihood with Breslow ties, and its gradient."""

import numpy as np

from .errors import DataError


def _risk_set_logsumexp(g, durations):
    """log sum_{j: T_j >= T_i} exp(g_j) for every i."""
    order = np.argsort(-durations, kind="stable")
    cum = np.logaddexp.accumulate(g[order])
    t_sorted = durations[order]
    # position of the last subject (desc order) whose time is >= T_i
    last = np.searchsorted(-t_sorted, -durations, side="right") - 1
    return cum[last]


def _check(g, durations, events):
    g = np.asarray(g, dtype=float).ravel()
    durations = np.asarray(durations, dtype=float).ravel()
    events = np.asarray(events, dtype=bool).ravel()
    if not (len(g) == len(durations) == len(events)):
        raise ValueError("risk, duration and event vectors must have equal length")
    if not events.any():
        raise DataError("partial likelihood undefined: batch contains no events")
    return g, durations, events


def cox_nll(g, durations, events) -> float:
    """Negative partial log-likelihood, summed over observed events.

    Tied times share a risk set (Breslow). Adding a constant to ``g`` leaves
    the value unchanged.
    """
    g, durations, events = _check(g, durations, events)
    log_risk = _risk_set_logsumexp(g, durations)
    return float(np.sum(log_risk[events] - g[events]))


def cox_nll_and_grad(g, durations, events):
    """Loss and its derivative with respect to each risk score.

    d loss / d g_k = sum_{i: D_i=1, T_i <= T_k} exp(g_k - LSE_i) - D_k,
    where LSE_i is the log-sum-exp of ``g`` over the risk set of i.
    """
    g, durations, events = _check(g, durations, events)
    log_risk = _risk_set_logsumexp(g, durations)
    loss = float(np.sum(log_risk[events] - g[events]))

    # log sum_{events i with T_i <= T_k} exp(-LSE_i), accumulated in ascending time
    order = np.argsort(durations, kind="stable")
    contrib = np.where(events, -log_risk, -np.inf)[order]
    cum = np.logaddexp.accumulate(contrib)
    last = np.searchsorted(durations[order], durations, side="right") - 1
    grad = np.exp(g + cum[last]) - events
    return loss, grad
