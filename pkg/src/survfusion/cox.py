"""Weighted Cox partial-likelihood loss and a classical CoxPH fitter.

The training loss is the event-weighted negative log partial likelihood

    L = -(1 / sum_i w_i e_i) * sum_i w_i e_i (r_i - log H_i),

where ``H_i`` is a weighted cumulative hazard.  Two risk-set orderings are
supported: ``time_sorted`` (the default; H_i sums ``w_j exp(r_j)`` over the
standard risk set ``t_j >= t_i``, Breslow ties) and ``verbatim_alg1`` (a
prefix-sum variant: samples sorted by descending risk and H_i taken as the
running cumulative sum in that order).  Cumulative hazards use max-risk
subtraction so ``exp`` never overflows.

The CoxPH fitter maximizes the Breslow partial likelihood by
Newton-Raphson and reports Wald hazard-ratio tables.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .errors import (
    NumericError,
    RankDeficiencyError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)
from .validation import as_float_array, check_survival_arrays, check_weights

TIME_SORTED = "time_sorted"
VERBATIM_ALG1 = "verbatim_alg1"

__all__ = [
    "SurvivalRecord",
    "RiskBatch",
    "CoxModel",
    "HazardRow",
    "CoxPHModel",
    "TIME_SORTED",
    "VERBATIM_ALG1",
    "event_weights",
    "weighted_cox_loss",
    "weighted_cox_loss_grad",
    "fit_coxph",
    "hazard_table",
    "hazard_table_text",
    "hazard_table_csv",
    "records_to_arrays",
]


@dataclass(frozen=True)
class SurvivalRecord:
    """One subject's observed time (months), event indicator, and loss weight."""

    time: float
    event: int
    weight: float = 1.0

    def __post_init__(self):
        if not (self.time > 0 and math.isfinite(self.time)):
            raise ValidationError(f"time must be positive and finite, got {self.time}")
        if self.event not in (0, 1):
            raise ValidationError(f"event must be 0 or 1, got {self.event}")
        if not (self.weight > 0 and math.isfinite(self.weight)):
            raise ValidationError(f"weight must be positive and finite, got {self.weight}")


def records_to_arrays(records) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=np.int64)
    weights = np.array([r.weight for r in records], dtype=np.float64)
    return times, events, weights


@dataclass(frozen=True)
class RiskBatch:
    """Index-aligned risks (log hazard ratios) and survival observations."""

    risks: np.ndarray
    times: np.ndarray
    events: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_records(cls, risks, records) -> "RiskBatch":
        times, events, weights = records_to_arrays(records)
        r = as_float_array(risks, "risks", ndim=1)
        if len(r) != len(times):
            raise ShapeError(f"risks length {len(r)} != records length {len(times)}")
        return cls(r, times, events, weights)

    def as_args(self):
        return self.risks, self.times, self.events, self.weights


def event_weights(events, w_event: float) -> np.ndarray:
    """Per-sample weights: ``w_event`` on events, 1.0 on censored samples."""
    if not (w_event > 0):
        raise ValidationError(f"w_event must be positive, got {w_event}")
    e = np.asarray(events)
    return np.where(e == 1, float(w_event), 1.0)


def _validate_loss_inputs(risks, times, events, weights, mode):
    r = np.asarray(risks, dtype=np.float64)
    if r.ndim != 1:
        raise ShapeError(f"risks must be 1-D, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise NumericError("risks contain non-finite values")
    t, e = check_survival_arrays(times, events)
    w = check_weights(weights, len(r))
    if len(t) != len(r):
        raise ShapeError(f"risks length {len(r)} != times length {len(t)}")
    if e.sum() == 0:
        raise UndefinedMetricError("weighted Cox loss undefined without any event")
    if mode not in (TIME_SORTED, VERBATIM_ALG1):
        raise ValidationError(f"unknown loss mode {mode!r}")
    return r, t, e, w


def _sorted_terms(r, t, e, w, mode):
    """Sorted view plus (log H, event/H suffix quantities) in sorted order.

    Returns (order, log_h, exp_shift, suffix_start) where ``suffix_start[k]``
    is the first sorted position whose H includes position k, i.e. the lower
    bound of the suffix over which d(log H_i)/d(r_k) is nonzero.
    """
    n = len(r)
    if mode == TIME_SORTED:
        order = np.argsort(-t, kind="stable")
    else:
        order = np.argsort(-r, kind="stable")
    rs, ts, es, ws = r[order], t[order], e[order], w[order]
    m = rs.max()
    exp_shift = np.exp(rs - m)
    csum = np.cumsum(ws * exp_shift)
    if mode == TIME_SORTED:
        # Breslow: samples tied in time share the full tied block's risk set
        run_id = np.zeros(n, dtype=np.int64)
        if n > 1:
            run_id[1:] = np.cumsum(ts[:-1] != ts[1:])
        last_of_run = np.searchsorted(run_id, run_id, side="right") - 1
        first_of_run = np.searchsorted(run_id, run_id, side="left")
        h_shifted = csum[last_of_run]
        suffix_start = first_of_run
    else:
        h_shifted = csum
        suffix_start = np.arange(n)
    log_h = m + np.log(h_shifted)
    return order, (rs, ts, es, ws), log_h, exp_shift, h_shifted, suffix_start


def weighted_cox_loss(risks, times, events, weights=None, mode: str = TIME_SORTED) -> float:
    """Event-weighted negative log partial likelihood (scalar)."""
    r, t, e, w = _validate_loss_inputs(risks, times, events, weights, mode)
    e_w = float((w * e).sum())
    _, (rs, ts, es, ws), log_h, _, _, _ = _sorted_terms(r, t, e, w, mode)
    u = ws * (rs - log_h)
    return float(-(u * es).sum() / e_w)


def weighted_cox_loss_grad(risks, times, events, weights=None, mode: str = TIME_SORTED) -> np.ndarray:
    """Analytic gradient of :func:`weighted_cox_loss` w.r.t. the risks."""
    r, t, e, w = _validate_loss_inputs(risks, times, events, weights, mode)
    e_w = float((w * e).sum())
    order, (rs, ts, es, ws), log_h, exp_shift, h_shifted, suffix_start = _sorted_terms(
        r, t, e, w, mode
    )
    # events' contribution 1/H_i, accumulated over the suffix that contains k
    q = ws * es / h_shifted  # shifted H cancels against shifted exp below
    suffix = np.cumsum(q[::-1])[::-1]
    suffix = np.concatenate([suffix, [0.0]])
    m_k = suffix[suffix_start]
    grad_sorted = -(ws * es - ws * exp_shift * m_k) / e_w
    grad = np.empty_like(grad_sorted)
    grad[order] = grad_sorted
    return grad


# -- classical CoxPH fitter -----------------------------------------------------


@dataclass
class CoxModel:
    """Newton-Raphson fit of the Breslow partial likelihood."""

    coefficients: np.ndarray
    covariance: np.ndarray
    n_iterations: int
    converged: bool
    log_likelihood: float
    group_counts: list = field(default_factory=list)

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def _breslow_blocks(x, times, events):
    """Iterate equal-time blocks in descending-time order.

    Yields (block_rows, block_event_rows) index arrays; risk-set statistics
    are accumulated by the caller.
    """
    order = np.argsort(-times, kind="stable")
    ts = times[order]
    boundaries = [0]
    for i in range(1, len(ts)):
        if ts[i] != ts[i - 1]:
            boundaries.append(i)
    boundaries.append(len(ts))
    return order, boundaries


def _partial_likelihood_derivatives(x, times, events, beta):
    """(log-likelihood, score, observed information) under Breslow ties."""
    n, p = x.shape
    eta = x @ beta
    shift = eta.max()
    ex = np.exp(eta - shift)
    order, boundaries = _breslow_blocks(x, times, events)
    ll = 0.0
    score = np.zeros(p)
    info = np.zeros((p, p))
    s0 = 0.0
    s1 = np.zeros(p)
    s2 = np.zeros((p, p))
    for bi in range(len(boundaries) - 1):
        rows = order[boundaries[bi]: boundaries[bi + 1]]
        xb = x[rows]
        exb = ex[rows]
        s0 += exb.sum()
        s1 += exb @ xb
        s2 += (xb * exb[:, None]).T @ xb
        ev = rows[events[rows] == 1]
        d = len(ev)
        if d == 0:
            continue
        xbar = s1 / s0
        ll += float((eta[ev] - shift).sum() - d * math.log(s0))
        score += x[ev].sum(axis=0) - d * xbar
        info += d * (s2 / s0 - np.outer(xbar, xbar))
    return ll, score, info


def _name_singular_column(info, labels):
    eigvals, eigvecs = np.linalg.eigh(info)
    worst = np.argmax(np.abs(eigvecs[:, np.argmin(np.abs(eigvals))]))
    return labels[worst]


def fit_coxph(covariates, records=None, *, times=None, events=None,
              labels=None, tol: float = 1e-8, max_iter: int = 100) -> CoxModel:
    """Fit a proportional-hazards model by Newton-Raphson.

    Convergence when the full Newton step satisfies max|step| < ``tol``;
    the covariance is the inverse observed information at the optimum.
    """
    x = as_float_array(covariates, "covariates", ndim=2)
    if records is not None:
        times, events, _ = records_to_arrays(records)
    t, e = check_survival_arrays(times, events)
    n, p = x.shape
    if len(t) != n:
        raise ShapeError(f"covariates rows {n} != observations {len(t)}")
    if n <= p:
        raise ValidationError(f"need more observations ({n}) than covariates ({p})")
    if e.sum() == 0:
        raise UndefinedMetricError("CoxPH fit undefined without any event")
    labels = list(labels) if labels is not None else [f"x{j}" for j in range(p)]
    for j in range(p):
        if np.ptp(x[:, j]) == 0:
            raise ValidationError(f"covariate column '{labels[j]}' is constant")

    beta = np.zeros(p)
    ll, score, info = _partial_likelihood_derivatives(x, t, e, beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise RankDeficiencyError(
                f"singular information matrix; offending column '{_name_singular_column(info, labels)}'"
            ) from None
        scale = 1.0
        for _ in range(40):
            new_beta = beta + scale * step
            new_ll, new_score, new_info = _partial_likelihood_derivatives(x, t, e, new_beta)
            if new_ll >= ll - 1e-12:
                break
            scale *= 0.5
        beta, ll, score, info = new_beta, new_ll, new_score, new_info
        if np.max(np.abs(step)) < tol:
            converged = True
            break

    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError(
            f"singular information matrix; offending column '{_name_singular_column(info, labels)}'"
        ) from None
    covariance = (covariance + covariance.T) / 2.0

    group_counts = []
    for j in range(p):
        col = x[:, j]
        vals = np.unique(col)
        if len(vals) == 2 and set(vals) <= {0.0, 1.0}:
            group_counts.append((int((col == 1).sum()), int((col == 0).sum())))
        else:
            group_counts.append(None)
    return CoxModel(beta, covariance, it, converged, ll, group_counts)


# -- hazard-ratio tables ----------------------------------------------------------


@dataclass(frozen=True)
class HazardRow:
    """One covariate's hazard ratio with 95% Wald interval and p-value."""

    name: str
    hr: float
    ci_low: float
    ci_high: float
    p: float
    n_per_group: tuple | None = None


def _wald_p(beta: float, se: float) -> float:
    if se == 0.0:
        return 0.0 if beta != 0.0 else 1.0
    z = abs(beta) / se
    return math.erfc(z / math.sqrt(2.0))


def hazard_table(model: CoxModel, labels) -> list[HazardRow]:
    """Wald hazard-ratio rows: HR = exp(beta), CI = exp(beta +- 1.96 se)."""
    if not model.converged:
        raise NumericError("hazard_table requires a converged model")
    labels = list(labels)
    if len(labels) != len(model.coefficients):
        raise ShapeError(f"{len(labels)} labels for {len(model.coefficients)} coefficients")
    rows = []
    for j, name in enumerate(labels):
        beta = float(model.coefficients[j])
        se = float(math.sqrt(model.covariance[j, j]))
        rows.append(
            HazardRow(
                name=name,
                hr=math.exp(beta),
                ci_low=math.exp(beta - 1.96 * se),
                ci_high=math.exp(beta + 1.96 * se),
                p=_wald_p(beta, se),
                n_per_group=model.group_counts[j] if model.group_counts else None,
            )
        )
    return rows


def format_p(p: float) -> str:
    return "<0.005" if p < 0.005 else f"{p:.2f}"


def hazard_table_text(rows) -> str:
    """Plain-text rendering with Parameter / #Patients/Group / HR / CI / p columns."""
    header = f"{'Parameter':<24}{'#Patients/Group':<18}{'HR':>6}  {'95% CI':<14}{'p':>8}"
    lines = [header, "-" * len(header)]
    for row in rows:
        group = f"{row.n_per_group[0]} vs {row.n_per_group[1]}" if row.n_per_group else "-"
        ci = f"{row.ci_low:.2f}-{row.ci_high:.2f}"
        lines.append(
            f"{row.name:<24}{group:<18}{row.hr:>6.2f}  {ci:<14}{format_p(row.p):>8}"
        )
    return "\n".join(lines)


def hazard_table_csv(rows) -> str:
    """CSV rendering: parameter, n_per_group, hr, ci_low, ci_high, p."""
    buf = io.StringIO()
    buf.write("parameter,n_per_group,hr,ci_low,ci_high,p\n")
    for row in rows:
        group = f"{row.n_per_group[0]} vs {row.n_per_group[1]}" if row.n_per_group else ""
        buf.write(
            f"{row.name},{group},{row.hr!r},{row.ci_low!r},{row.ci_high!r},{row.p!r}\n"
        )
    return buf.getvalue()


class CoxPHModel(BaseEstimator):
    """Proportional-hazards estimator with a scikit-learn surface.

    ``fit(X, y)`` accepts y as an (n, 2) array of [time, event] columns, a
    structured array with ``time``/``event`` fields, or a list of
    :class:`SurvivalRecord`.  ``predict`` returns linear risk scores.
    """

    def __init__(self, tol: float = 1e-8, max_iter: int = 100):
        self.tol = tol
        self.max_iter = max_iter

    @staticmethod
    def _split_y(y):
        if isinstance(y, np.ndarray) and y.dtype.names:
            return np.asarray(y["time"], dtype=np.float64), np.asarray(y["event"])
        if len(y) and isinstance(y[0], SurvivalRecord):
            t, e, _ = records_to_arrays(y)
            return t, e
        arr = np.asarray(y, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ShapeError("y must be (n, 2) [time, event], structured, or SurvivalRecords")
        return arr[:, 0], arr[:, 1].astype(np.int64)

    def fit(self, X, y, labels=None):
        times, events = self._split_y(y)
        model = fit_coxph(X, times=times, events=events, labels=labels,
                          tol=self.tol, max_iter=self.max_iter)
        self.model_ = model
        self.coef_ = model.coefficients
        self.covariance_ = model.covariance
        self.n_iter_ = model.n_iterations
        self.converged_ = model.converged
        return self

    def predict(self, X) -> np.ndarray:
        x = as_float_array(X, "X", ndim=2)
        return x @ self.coef_

    def score(self, X, y) -> float:
        """Concordance index of the predicted risks (higher is better)."""
        from .metrics import concordance_index

        times, events = self._split_y(y)
        records = [SurvivalRecord(t, int(e)) for t, e in zip(times, events)]
        return concordance_index(self.predict(X), records)
