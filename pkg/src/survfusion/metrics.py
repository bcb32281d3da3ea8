"""Censored-data evaluation: concordance index, Kaplan-Meier curves,
log-rank test, censoring weights, time-dependent AUC, risk grouping.

The time-dependent AUC follows its defining double sum literally, with a
non-strict inequality on predictions; a constant predictor therefore
scores 1.0 (documented, warned about), and a strict variant is available.
"""

from __future__ import annotations

import io
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .cox import records_to_arrays
from .validation import as_float_array, check_survival_arrays

STRICT = "strict"
HALF_CREDIT = "half_credit"

__all__ = [
    "KMCurve",
    "LogRankResult",
    "AucResult",
    "concordance_index",
    "kaplan_meier",
    "log_rank",
    "censoring_weights_ipcw",
    "time_dependent_auc",
    "risk_groups",
    "STRICT",
    "HALF_CREDIT",
]


def _extract(records_or_times, events=None):
    if events is None:
        return records_to_arrays(records_or_times)[:2]
    return check_survival_arrays(records_or_times, events)


def concordance_index(risks, records, events=None, tie_policy: str = STRICT) -> float:
    """Fraction of comparable pairs ranked concordantly (earlier failure,
    higher predicted risk).

    A pair (i, j) is comparable when y_i < y_j and subject i's event was
    observed.  ``strict`` counts predicted-risk ties as discordant (the
    strict-inequality reading); ``half_credit`` counts them 0.5.
    """
    times, ev = _extract(records, events)
    r = as_float_array(risks, "risks", ndim=1)
    if len(r) != len(times):
        raise ValidationError(f"risks length {len(r)} != observations {len(times)}")
    if tie_policy not in (STRICT, HALF_CREDIT):
        raise ValidationError(f"unknown tie_policy {tie_policy!r}")
    comparable = 0
    score = 0.0
    n = len(r)
    for i in range(n):
        if ev[i] != 1:
            continue
        later = times > times[i]
        comparable += int(later.sum())
        score += float((r[i] > r[later]).sum())
        if tie_policy == HALF_CREDIT:
            score += 0.5 * float((r[i] == r[later]).sum())
    if comparable == 0:
        raise UndefinedMetricError("no comparable pairs (need an observed event before another time)")
    return score / comparable


@dataclass(frozen=True)
class KMCurve:
    """Product-limit survival curve over the distinct event times."""

    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    n_events: np.ndarray

    def survival_at(self, t: float) -> float:
        """S(t): step function, right-continuous."""
        idx = np.searchsorted(self.event_times, t, side="right") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])

    def survival_before(self, t: float) -> float:
        """S(t-): left limit just before t."""
        idx = np.searchsorted(self.event_times, t, side="left") - 1
        return 1.0 if idx < 0 else float(self.survival[idx])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("time,survival,at_risk,n_events\n")
        for t, s, n, d in zip(self.event_times, self.survival, self.at_risk, self.n_events):
            buf.write(f"{t!r},{s!r},{int(n)},{int(d)}\n")
        return buf.getvalue()


def kaplan_meier(records, events=None) -> KMCurve:
    """Kaplan-Meier estimate: S(t) = prod over event times t_k <= t of (1 - d_k/n_k)."""
    times, ev = _extract(records, events)
    if len(times) == 0:
        raise ValidationError("kaplan_meier needs a nonempty cohort")
    order = np.argsort(times, kind="stable")
    t_sorted, e_sorted = times[order], ev[order]
    out_t, out_s, out_n, out_d = [], [], [], []
    s = 1.0
    n_at_risk = len(t_sorted)
    i = 0
    while i < len(t_sorted):
        j = i
        while j < len(t_sorted) and t_sorted[j] == t_sorted[i]:
            j += 1
        d = int(e_sorted[i:j].sum())
        if d > 0:
            s *= 1.0 - d / n_at_risk
            out_t.append(float(t_sorted[i]))
            out_s.append(s)
            out_n.append(n_at_risk)
            out_d.append(d)
        n_at_risk -= j - i
        i = j
    return KMCurve(
        np.array(out_t), np.array(out_s), np.array(out_n, dtype=np.int64),
        np.array(out_d, dtype=np.int64),
    )


@dataclass(frozen=True)
class LogRankResult:
    chi2: float
    p: float
    df: int


def log_rank(group_a, group_b) -> LogRankResult:
    """Two-group log-rank test with hypergeometric variance, chi-square df 1."""
    t_a, e_a = _extract(group_a) if not isinstance(group_a, tuple) else group_a
    t_b, e_b = _extract(group_b) if not isinstance(group_b, tuple) else group_b
    if len(t_a) == 0 or len(t_b) == 0:
        raise ValidationError("both groups must be nonempty")
    if e_a.sum() + e_b.sum() == 0:
        raise UndefinedMetricError("log-rank undefined without any event")
    pooled_times = np.concatenate([t_a, t_b])
    pooled_events = np.concatenate([e_a, e_b])
    event_times = np.unique(pooled_times[pooled_events == 1])
    observed_minus_expected = 0.0
    variance = 0.0
    for t in event_times:
        n_a = int((t_a >= t).sum())
        n_b = int((t_b >= t).sum())
        n_t = n_a + n_b
        d_t = int(pooled_events[pooled_times == t].sum())
        d_a = int(e_a[(t_a == t) & (e_a == 1)].sum())
        expected_a = d_t * n_a / n_t
        observed_minus_expected += d_a - expected_a
        if n_t > 1:
            variance += d_t * (n_t - d_t) * n_a * n_b / (n_t**2 * (n_t - 1))
    if variance == 0.0:
        return LogRankResult(0.0, 1.0, 1)
    chi2 = observed_minus_expected**2 / variance
    p = math.erfc(math.sqrt(chi2 / 2.0))
    return LogRankResult(float(chi2), float(p), 1)


def censoring_weights_ipcw(records, events=None, cap: float = 20.0) -> np.ndarray:
    """Inverse-probability-of-censoring weights 1/G(y_i-).

    G is the Kaplan-Meier estimate of the censoring distribution (event
    and censoring roles swapped), evaluated as the left limit at each
    observed time.  Weights are capped (default 20) to bound variance.
    """
    times, ev = _extract(records, events)
    g_curve = kaplan_meier(times, 1 - ev)
    w = np.empty(len(times))
    capped = False
    for i, t in enumerate(times):
        g = g_curve.survival_before(t)
        if g <= 1.0 / cap:
            w[i] = cap
            capped = True
        else:
            w[i] = 1.0 / g
    if capped:
        warnings.warn(f"censoring survival reached 1/cap; weights capped at {cap}")
    return w


@dataclass(frozen=True)
class AucResult:
    horizons: tuple
    auc_at: dict
    mean_auc: float
    weights_used: np.ndarray


def time_dependent_auc(risks, records, events=None, horizons=(60.0, 120.0),
                       weights: str | np.ndarray = "ipcw",
                       strict_ties: bool = False) -> AucResult:
    """Weighted cumulative/dynamic AUC at each horizon t.

    AUC(t) = [sum_ij w_i 1(y_i <= t) 1(y_j > t) 1(risk_j <= risk_i)]
             / [sum_i w_i 1(y_i <= t) * sum_j 1(y_j > t)],

    evaluated literally: the non-strict inequality means a constant
    predictor scores 1.0 (a warning is emitted); ``strict_ties=True``
    switches the comparison to a strict one.  ``weights`` may be "ipcw",
    "uniform", or an explicit vector.  Horizons with no observed-event
    case or no control are excluded from the mean with a warning.
    """
    times, ev = _extract(records, events)
    r = as_float_array(risks, "risks", ndim=1)
    if len(r) != len(times):
        raise ValidationError(f"risks length {len(r)} != observations {len(times)}")
    if isinstance(weights, str):
        if weights == "ipcw":
            w = censoring_weights_ipcw(times, ev)
        elif weights == "uniform":
            w = np.ones(len(times))
        else:
            raise ValidationError(f"unknown weights mode {weights!r}")
    else:
        w = as_float_array(weights, "weights", ndim=1)
    if len(np.unique(r)) == 1:
        warnings.warn(
            "constant predictor: the non-strict tie rule makes AUC(t) equal 1.0"
        )

    auc_at = {}
    defined = []
    for t in horizons:
        cases = times <= t
        controls = times > t
        has_event_case = bool(np.any(cases & (ev == 1)))
        if not has_event_case or not np.any(controls):
            warnings.warn(f"AUC undefined at horizon {t}: needs an event case and a control")
            auc_at[t] = math.nan
            continue
        if strict_ties:
            pair_hits = r[controls][None, :] < r[cases][:, None]
        else:
            pair_hits = r[controls][None, :] <= r[cases][:, None]
        numer = float((w[cases][:, None] * pair_hits).sum())
        denom = float(w[cases].sum() * controls.sum())
        auc_at[t] = numer / denom
        defined.append(auc_at[t])
    if not defined:
        warnings.warn("AUC undefined at every horizon")
        mean_auc = math.nan
    else:
        mean_auc = float(np.mean(defined))
    return AucResult(tuple(horizons), auc_at, mean_auc, w)


def risk_groups(risks, theta_opt: float) -> np.ndarray:
    """Label risks 'high' (> theta) or 'low'; equality goes to 'low'."""
    r = as_float_array(risks, "risks", ndim=1)
    if not math.isfinite(theta_opt):
        raise ValidationError(f"theta_opt must be finite, got {theta_opt}")
    return np.where(r > theta_opt, "high", "low")
