"""Estimation-quality metrics and the per-method comparison report.

MSE, bias and variance follow the population (1/N) convention; bias is
mean(truth - estimate), so positive bias means underestimation.  The
variance reported per method is the variance of that method's estimates
around their own mean (a printed-form audit mode that evaluates the
ground-truth variance instead is available on the report builder).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

REPORT_PARAMS = ("f_ic", "f_ees", "radius", "d_ees")

# Largest N for which the Wilcoxon null is enumerated exactly.
_WILCOXON_EXACT_MAX_N = 25


def _paired(truth, estimate):
    o = np.asarray(truth, dtype=float)
    e = np.asarray(estimate, dtype=float)
    if o.shape != e.shape or o.ndim != 1:
        raise ValueError(f"length mismatch: {o.shape} vs {e.shape}")
    if o.size < 1:
        raise ValueError("need at least one sample")
    return o, e


def mse(truth, estimate) -> float:
    """Mean of squared (truth - estimate)."""
    o, e = _paired(truth, estimate)
    d = o - e
    return float(np.mean(d * d))


def bias(truth, estimate) -> float:
    """Mean of (truth - estimate); positive means underestimation."""
    o, e = _paired(truth, estimate)
    return float(np.mean(o - e))


def variance(values) -> float:
    """Population variance of the values around their own mean."""
    v = np.asarray(values, dtype=float)
    if v.size < 1:
        raise ValueError("need at least one sample")
    d = v - v.mean()
    return float(np.mean(d * d))


def pearson_r(truth, estimate) -> float:
    """Sample correlation coefficient in [-1, 1].

    A constant input leaves the coefficient undefined; the explicit
    not-a-value outcome is NaN (never silently zero).
    """
    o, e = _paired(truth, estimate)
    if o.size < 2:
        raise ValueError("need at least two samples")
    do = o - o.mean()
    de = e - e.mean()
    so = np.sqrt(np.sum(do * do))
    se = np.sqrt(np.sum(de * de))
    if so == 0.0 or se == 0.0:
        return float("nan")
    r = float(np.sum(do * de) / (so * se))
    return min(1.0, max(-1.0, r))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # W+: sum of ranks of positive (a - b) differences
    p_two_sided: float
    n_used: int  # pairs remaining after dropping zero differences
    method: str  # "exact" or "normal"
    degenerate: bool = False


def _exact_pmf(double_ranks):
    """Null distribution of twice the positive-rank sum.

    Each rank enters the sum independently with probability 1/2, so the
    pmf is the normalised convolution over per-rank {0, r} choices;
    identical to enumerating all 2^N sign assignments.
    """
    max_sum = int(double_ranks.sum())
    pmf = np.zeros(max_sum + 1)
    pmf[0] = 1.0
    for r in double_ranks:
        r = int(r)
        shifted = np.zeros_like(pmf)
        shifted[r:] = pmf[: max_sum + 1 - r]
        pmf = 0.5 * (pmf + shifted)
    return pmf


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(group_a, group_b) -> WilcoxonResult:
    """Paired two-sided signed-rank test on (a - b).

    Zero differences are dropped; ties share mid-ranks.  The null is
    enumerated exactly for N <= 25 and approximated by a tie-corrected
    normal with continuity correction above that.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("groups must be equal-length 1-D vectors")
    diff = a - b
    nonzero = diff != 0
    n = int(nonzero.sum())
    if n == 0:
        return WilcoxonResult(
            statistic=float("nan"), p_two_sided=float("nan"), n_used=0,
            method="degenerate", degenerate=True,
        )
    if n < 3:
        raise ValueError(f"need >= 3 nonzero differences, got {n}")
    d = diff[nonzero]
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= _WILCOXON_EXACT_MAX_N:
        double_ranks = np.round(2.0 * ranks).astype(int)
        pmf = _exact_pmf(double_ranks)
        w2 = int(round(2.0 * w_plus))
        p_low = float(pmf[: w2 + 1].sum())
        p_high = float(pmf[w2:].sum())
        p = min(1.0, 2.0 * min(p_low, p_high))
        return WilcoxonResult(statistic=w_plus, p_two_sided=p, n_used=n, method="exact")

    mean = ranks.sum() / 2.0
    # Sum of squared mid-ranks / 4 equals the classical tie-corrected
    # variance n(n+1)(2n+1)/24 - sum(t^3 - t)/48.
    var = float(np.sum(ranks * ranks)) / 4.0
    centered = w_plus - mean
    if centered == 0.0 or var == 0.0:
        p = 1.0
    else:
        z = (centered - 0.5 * math.copysign(1.0, centered)) / math.sqrt(var)
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(statistic=w_plus, p_two_sided=p, n_used=n, method="normal")


@dataclass(frozen=True)
class ParamMetricRow:
    mse: float
    bias: float
    variance: float
    pearson_r: float


@dataclass
class FitReport:
    """Per-method, per-parameter metric table plus runtimes."""

    methods: dict  # name -> {param -> ParamMetricRow}
    runtimes_s: dict = field(default_factory=dict)
    dataset: dict | None = None

    def to_json_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "methods": {
                name: {
                    param: {
                        "mse": row.mse,
                        "bias": row.bias,
                        "variance": row.variance,
                        "pearson_r": row.pearson_r,
                    }
                    for param, row in rows.items()
                }
                for name, rows in self.methods.items()
            },
            "runtimes_s": self.runtimes_s,
        }

    def format_table(self) -> str:
        """Aligned text table: one block per metric, methods as rows and
        parameters as columns."""
        lines = []
        names = list(self.methods)
        width = max(12, *(len(n) + 2 for n in names))
        header = "Method".ljust(width) + "".join(p.rjust(12) for p in REPORT_PARAMS)
        for metric, label in (
            ("mse", "MSE"),
            ("bias", "Bias"),
            ("variance", "Variance"),
            ("pearson_r", "Pearson r"),
        ):
            lines.append(label)
            lines.append(header)
            for name in names:
                row = self.methods[name]
                vals = "".join(
                    f"{getattr(row[p], metric):12.4f}" for p in REPORT_PARAMS
                )
                lines.append(name.ljust(width) + vals)
            lines.append("")
        return "\n".join(lines)


def method_report(
    truth: np.ndarray,
    estimates: dict,
    runtimes: dict | None = None,
    dataset_manifest: dict | None = None,
    variance_of_truth: bool = False,
) -> FitReport:
    """All four metrics per parameter per method.

    truth is (N, >=4) in column order f_ic, f_ees, radius, d_ees; every
    estimates entry must cover the identical voxel set.  With
    variance_of_truth the printed-form variance (ground truth around its
    mean, identical across methods) is reported instead.
    """
    truth = np.asarray(truth, dtype=float)
    methods = {}
    for name, est in estimates.items():
        est = np.asarray(est, dtype=float)
        if est.shape[0] != truth.shape[0]:
            raise ValueError(f"estimates for {name!r} misaligned with truth")
        rows = {}
        for k, param in enumerate(REPORT_PARAMS):
            o, e = truth[:, k], est[:, k]
            rows[param] = ParamMetricRow(
                mse=mse(o, e),
                bias=bias(o, e),
                variance=variance(o if variance_of_truth else e),
                pearson_r=pearson_r(o, e),
            )
        methods[name] = rows
    return FitReport(
        methods=methods, runtimes_s=dict(runtimes or {}), dataset=dataset_manifest
    )
