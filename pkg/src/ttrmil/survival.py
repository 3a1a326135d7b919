"""Survival losses and ranking metrics over per-case log-risk scores.

All functions work on plain numpy arrays plus `SurvivalRecord` rows; nothing
here touches the autodiff tape.  The Cox loss returns its own analytic
gradient so training code can splice it into a tape as a single primitive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, UndefinedMetricError

logger = logging.getLogger(__name__)

__all__ = [
    "SurvivalRecord",
    "CoxLoss",
    "cox_neg_log_partial_likelihood",
    "concordance_index",
    "binary_auc",
    "ttr_from_log_risk",
]


@dataclass(frozen=True)
class SurvivalRecord:
    """One follow-up record: observed event (1) or right-censoring (0)."""

    case_id: str
    event: int
    time_years: float

    def __post_init__(self):
        if self.event not in (0, 1):
            raise ValueError(f"event must be 0 or 1, got {self.event!r}")
        if not (np.isfinite(self.time_years) and self.time_years > 0):
            raise ValueError(f"time_years must be a positive real, got {self.time_years!r}")


def _split_records(records) -> tuple[np.ndarray, np.ndarray]:
    events = np.array([r.event for r in records], dtype=np.int64)
    times = np.array([r.time_years for r in records], dtype=np.float64)
    return events, times


@dataclass
class CoxLoss:
    """Negative log partial likelihood with its gradient w.r.t. log risks."""

    value: float
    grad: np.ndarray
    n_events: int


def cox_neg_log_partial_likelihood(log_risks, records) -> CoxLoss:
    """Breslow-tied negative log partial likelihood.

    For each observed event i the contribution is
    -(h_i - log sum_{j: t_j >= t_i} exp(h_j)), with tied event times sharing
    one risk set.  The inner sums are kept in log space with pairwise
    max-shifting (logaddexp), so arbitrarily large or small log risks stay
    finite in both the loss and the gradient.

    A batch with zero events is legal but uninformative: the loss is 0 with a
    zero gradient and a warning is logged.
    """
    h = np.asarray(log_risks, dtype=np.float64).ravel()
    if h.size != len(records):
        raise DimensionMismatch(f"{h.size} log risks vs {len(records)} records")
    if h.size == 0:
        raise ValueError("empty batch")
    if not np.all(np.isfinite(h)):
        raise ValueError("log risks must be finite")
    events, times = _split_records(records)
    n_events = int(events.sum())
    if n_events == 0:
        logger.warning("cox loss over %d cases with zero events; batch contributes nothing", h.size)
        return CoxLoss(value=0.0, grad=np.zeros_like(h), n_events=0)

    order = np.lexsort((np.arange(h.size), times))  # ascending time, stable
    t_s, e_s, h_s = times[order], events[order], h[order]
    # suffix_lse[i] = log sum_{j >= i} exp(h_s[j]); the risk-set normalizer
    suffix_lse = np.logaddexp.accumulate(h_s[::-1])[::-1]

    loss = 0.0
    coef_log = np.empty_like(h_s)  # log sum over event groups of n_ev_g / S_g
    running = -np.inf
    i = 0
    n = h_s.size
    while i < n:
        j = i
        while j < n and t_s[j] == t_s[i]:
            j += 1
        group_events = int(e_s[i:j].sum())
        if group_events:
            log_s = suffix_lse[i]
            loss += float(np.sum(log_s - h_s[i:j][e_s[i:j] == 1]))
            running = np.logaddexp(running, np.log(group_events) - log_s)
        coef_log[i:j] = running
        i = j

    # exp(h_j + coef_log_j) <= number of groups, so this stays finite
    grad_s = -e_s.astype(np.float64) + np.exp(h_s + coef_log)
    grad = np.empty_like(h)
    grad[order] = grad_s
    return CoxLoss(value=loss, grad=grad, n_events=n_events)


def _censoring_survival_left(times: np.ndarray, events: np.ndarray) -> np.ndarray:
    """Kaplan-Meier estimate G(t-) of the censoring distribution at each t.

    Censorings play the role of events here.  Evaluated as the left limit, so
    a case's own censoring at time t does not discount G at t.
    """
    order = np.argsort(times, kind="stable")
    g = 1.0
    g_left = np.empty(times.size)
    uniq_times = np.unique(times)
    g_at = {}
    at_risk = times.size
    idx = 0
    sorted_t = times[order]
    sorted_cens = (events[order] == 0)
    for ut in uniq_times:
        g_at[ut] = g  # value just before ut
        k = idx
        n_cens = 0
        while k < sorted_t.size and sorted_t[k] == ut:
            n_cens += int(sorted_cens[k])
            k += 1
        n_here = k - idx
        if n_cens and at_risk > 0:
            g *= 1.0 - n_cens / at_risk
        at_risk -= n_here
        idx = k
    for i, t in enumerate(times):
        g_left[i] = g_at[t]
    return g_left


def concordance_index(pred_risks, records, method: str = "harrell",
                      tau: float | None = None) -> float:
    """Censoring-aware concordance of predicted risks against outcomes.

    A pair (i, j) is comparable when t_i < t_j and case i had an event, or
    when t_i == t_j with exactly one event (the event counted as the earlier
    case).  A comparable pair is concordant when the earlier case carries the
    higher risk; tied risks earn half credit.  Two events at the same time are
    not comparable.

    method="harrell" (default) weights every comparable pair equally.
    method="uno" applies inverse-probability-of-censoring weights
    1 / G(t_earlier-)^2 from a Kaplan-Meier fit of the censoring distribution
    and, when `tau` is given, restricts to pairs with earlier time < tau.
    Pairs whose weight is undefined (G == 0) are dropped.  The Uno variant is
    provided for sensitivity checks; reported numbers use Harrell's form.
    """
    risks = np.asarray(pred_risks, dtype=np.float64).ravel()
    if risks.size != len(records):
        raise DimensionMismatch(f"{risks.size} risks vs {len(records)} records")
    if method not in ("harrell", "uno"):
        raise ValueError(f"unknown concordance method {method!r}")
    events, times = _split_records(records)

    t_i = times[:, None]
    t_j = times[None, :]
    e_i = events[:, None] == 1
    e_j = events[None, :] == 1
    # i plays the earlier-event role; each unordered pair contributes once
    comparable = ((t_i < t_j) & e_i) | ((t_i == t_j) & e_i & ~e_j)

    if method == "uno":
        g_left = _censoring_survival_left(times, events)
        weights = np.zeros_like(comparable, dtype=np.float64)
        valid = g_left > 0
        weights[valid, :] = (1.0 / g_left[valid] ** 2)[:, None]
        comparable = comparable & valid[:, None]
        if tau is not None:
            comparable = comparable & (t_i < tau)
    else:
        weights = np.ones_like(comparable, dtype=np.float64)

    w = np.where(comparable, weights, 0.0)
    denom = w.sum()
    if denom == 0:
        raise UndefinedMetricError("no comparable pairs")
    r_i = risks[:, None]
    r_j = risks[None, :]
    credit = np.where(r_i > r_j, 1.0, np.where(r_i == r_j, 0.5, 0.0))
    return float((w * credit).sum() / denom)


def binary_auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores across classes earn half credit."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise DimensionMismatch(f"{s.size} scores vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0/1")
    pos = s[y == 1]
    neg = s[y == 0]
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("binary_auc needs both classes")
    diff = pos[:, None] - neg[None, :]
    wins = (diff > 0).sum() + 0.5 * (diff == 0).sum()
    return float(wins / (pos.size * neg.size))


def ttr_from_log_risk(log_risk):
    """Estimated time to recurrence: exp(-log_risk).  Monotone decreasing."""
    return np.exp(-np.asarray(log_risk, dtype=np.float64))
