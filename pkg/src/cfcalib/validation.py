"""Model validation and data diagnostics.

Information criteria take a pointwise log-likelihood matrix ``ll`` of shape
``(S draws, N observations)``.
"""

from __future__ import annotations

import csv
from collections import Counter, defaultdict
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from cfcalib.records import COLUMNS

BAD_K = 0.7
MIN_DRAWS_LOO = 100


def _ll(ll):
    ll = np.asarray(ll, dtype=float)
    if ll.ndim == 1:
        ll = ll[:, None]
    if ll.ndim != 2:
        raise ValueError("log-likelihood matrix must be 2-d (draws x observations)")
    return ll


def waic(ll):
    """``(elpd_waic, p_waic)``.

    ``lppd = sum_n log mean_s exp(ll[s, n])`` and ``p_waic = sum_n var_s
    ll[s, n]`` (sample variance).
    """
    ll = _ll(ll)
    s = ll.shape[0]
    if s < 2:
        raise ValueError("waic needs at least two draws")
    lppd = logsumexp(ll, axis=0) - np.log(s)
    p = np.var(ll, axis=0, ddof=1)
    return float(np.sum(lppd - p)), float(np.sum(p))


def waic_pointwise(ll) -> np.ndarray:
    ll = _ll(ll)
    return logsumexp(ll, axis=0) - np.log(ll.shape[0]) - np.var(ll, axis=0, ddof=1)


def gpd_fit(x):
    """Generalized Pareto ``(k, sigma)`` for sorted exceedances ``x`` > 0.

    Empirical-Bayes estimate of Zhang & Stephens with the weakly informative
    shrinkage of ``k`` toward 0.5 used by PSIS.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    prior_bs, prior_k = 3.0, 10.0
    m = 30 + int(np.sqrt(n))
    b = 1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
    b /= prior_bs * x[int(n / 4 + 0.5) - 1]
    b += 1.0 / x[-1]
    k_arr = np.log1p(-b[:, None] * x).mean(axis=1)
    len_scale = n * (np.log(-(b / k_arr)) - k_arr - 1.0)
    w = np.exp(len_scale - logsumexp(len_scale))
    keep = w >= 10 * np.finfo(float).eps
    w, b = w[keep], b[keep]
    w /= w.sum()
    b_post = np.sum(b * w)
    k = np.log1p(-b_post * x).mean()
    sigma = -k / b_post
    k = (n * k + prior_k * 0.5) / (n + prior_k)
    return float(k), float(sigma)


def gpd_quantile(p, k, sigma):
    p = np.asarray(p, dtype=float)
    if abs(k) < np.finfo(float).eps:
        return -sigma * np.log1p(-p)
    return sigma * np.expm1(-k * np.log1p(-p)) / k


def psis_smooth(log_ratios):
    """Pareto-smoothed normalised log weights and the tail shape ``k``.

    The largest ``M = ceil(min(0.2 S, 3 sqrt(S)))`` ratios are replaced by
    expected order statistics of a generalized Pareto fitted to them, then
    weights are truncated at ``S^(3/4)`` times their mean. Constant ratios
    return ``k = -inf``.
    """
    lw = np.array(log_ratios, dtype=float)
    s = len(lw)
    lw -= lw.max()
    if np.ptp(lw) == 0:
        return lw - np.log(s), -np.inf
    m = int(np.ceil(min(0.2 * s, 3.0 * np.sqrt(s))))
    order = np.argsort(lw)
    cutoff = max(lw[order[-m - 1]], np.log(np.finfo(float).tiny))
    tail = np.flatnonzero(lw > cutoff)
    k = np.inf
    if len(tail) > 4:
        tail = tail[np.argsort(lw[tail])]
        exceed = np.exp(lw[tail]) - np.exp(cutoff)
        k, sigma = gpd_fit(exceed)
        if np.isfinite(k) and sigma > 0:
            probs = (np.arange(len(tail)) + 0.5) / len(tail)
            lw[tail] = np.log(gpd_quantile(probs, k, sigma) + np.exp(cutoff))
            lw[lw > 0] = 0.0
    lw -= logsumexp(lw)
    lw = np.minimum(lw, 0.75 * np.log(s) - np.log(s))
    lw -= logsumexp(lw)
    return lw, k


@dataclass
class LooReport:
    elpd_loo: float
    se_loo: float
    pareto_k: np.ndarray
    n_bad_k: int
    elpd_waic: float
    p_waic: float
    se_waic: float
    pointwise_loo: np.ndarray

    def summary(self) -> str:
        return (
            f"elpd_loo  {self.elpd_loo:.3f} (se {self.se_loo:.3f})\n"
            f"elpd_waic {self.elpd_waic:.3f} (se {self.se_waic:.3f})\n"
            f"p_waic    {self.p_waic:.3f}\n"
            f"pareto k > {BAD_K}: {self.n_bad_k} of {len(self.pareto_k)}"
        )


def psis_loo(ll) -> LooReport:
    """PSIS leave-one-out estimate plus WAIC on the same draws."""
    ll = _ll(ll)
    s, n = ll.shape
    if s < MIN_DRAWS_LOO:
        raise ValueError(f"psis_loo needs at least {MIN_DRAWS_LOO} draws, got {s}")
    ks = np.empty(n)
    loo_i = np.empty(n)
    for i in range(n):
        lw, ks[i] = psis_smooth(-ll[:, i])
        loo_i[i] = logsumexp(lw + ll[:, i])
    elpd_waic, p_waic = waic(ll)
    waic_i = waic_pointwise(ll)
    return LooReport(
        elpd_loo=float(loo_i.sum()),
        se_loo=float(np.sqrt(n * np.var(loo_i))),
        pareto_k=ks,
        n_bad_k=int(np.sum(ks > BAD_K)),
        elpd_waic=elpd_waic,
        p_waic=p_waic,
        se_waic=float(np.sqrt(n * np.var(waic_i))),
        pointwise_loo=loo_i,
    )


# --------------------------------------------------------------------------
# partial autocorrelation
# --------------------------------------------------------------------------


def pacf(series, max_lag: int) -> np.ndarray:
    """Partial autocorrelations at lags ``1..max_lag`` (Durbin-Levinson).

    Uses the biased sample autocovariance. The large-sample significance
    band is :func:`pacf_band`.
    """
    x = np.asarray(series, dtype=float)
    n = len(x)
    if n <= max_lag + 1:
        raise ValueError(f"series of length {n} too short for max_lag {max_lag}")
    x = x - x.mean()
    c0 = np.dot(x, x) / n
    if c0 <= 0:
        raise ValueError("pacf undefined for a constant series")
    r = np.array([np.dot(x[: n - k], x[k:]) / n for k in range(max_lag + 1)]) / c0
    out = np.empty(max_lag)
    phi = np.zeros(max_lag + 1)
    v = 1.0
    for k in range(1, max_lag + 1):
        a = (r[k] - np.dot(phi[1:k], r[k - 1 : 0 : -1])) / v
        new = phi.copy()
        new[k] = a
        new[1:k] = phi[1:k] - a * phi[k - 1 : 0 : -1]
        phi = new
        v *= 1.0 - a * a
        out[k - 1] = a
    return out


def pacf_band(n: int) -> float:
    return 1.96 / np.sqrt(n)


def significant_lag_count(series, max_lag: int = 7) -> int:
    """Number of consecutive lags from 1 whose |PACF| exceeds the band."""
    p = pacf(series, max_lag)
    band = pacf_band(len(series))
    count = 0
    for v in p:
        if abs(v) <= band:
            break
        count += 1
    return count


# --------------------------------------------------------------------------
# dataset description
# --------------------------------------------------------------------------


def dataset_summary(instances) -> dict:
    """Frequency tables by framework, driver and their intersection.

    Returns ``{"framework": {fw: {...}}, "driver": {...},
    "framework_driver": {(fw, driver): {...}}}`` with instance and timestep
    counts (plus distinct drivers or frameworks), keys sorted.
    """
    instances = list(instances)
    if not instances:
        raise ValueError("no instances")
    fw = defaultdict(lambda: {"drivers": set(), "instances": 0, "timesteps": 0})
    dr = defaultdict(lambda: {"frameworks": set(), "instances": 0, "timesteps": 0})
    both = defaultdict(lambda: {"instances": 0, "timesteps": 0})
    for inst in instances:
        n = len(inst)
        f, d = inst.framework_id, inst.driver_id
        fw[f]["drivers"].add(d)
        fw[f]["instances"] += 1
        fw[f]["timesteps"] += n
        dr[d]["frameworks"].add(f)
        dr[d]["instances"] += 1
        dr[d]["timesteps"] += n
        both[(f, d)]["instances"] += 1
        both[(f, d)]["timesteps"] += n

    def finish(table, set_key):
        return {k: {**v, set_key: len(v[set_key])} for k, v in sorted(table.items(), key=lambda kv: str(kv[0]))}

    return {
        "framework": finish(fw, "drivers"),
        "driver": finish(dr, "frameworks"),
        "framework_driver": {k: dict(v) for k, v in sorted(both.items(), key=lambda kv: (kv[0][0], str(kv[0][1])))},
    }


def describe(values) -> dict:
    """Moments and quantiles used to judge distribution shape."""
    x = np.asarray(values, dtype=float)
    varies = x.size > 0 and np.ptp(x) > 0  # shape moments are undefined for a constant column
    return {
        "n": int(x.size),
        "mean": float(np.mean(x)),
        "std": float(np.std(x, ddof=1)) if x.size > 1 else 0.0,
        "skew": float(stats.skew(x)) if x.size > 2 and varies else float("nan"),
        "excess_kurtosis": float(stats.kurtosis(x)) if x.size > 3 and varies else float("nan"),
        "min": float(np.min(x)),
        "median": float(np.median(x)),
        "max": float(np.max(x)),
    }


def lag_histogram(instances, max_lag: int = 7, column: str = "a_f") -> Counter:
    """Histogram of significant-lag counts over instances long enough to test."""
    hist = Counter()
    for inst in instances:
        x = getattr(inst, column)
        if len(x) > max_lag + 1 and np.ptp(x) > 0:
            hist[significant_lag_count(x, max_lag)] += 1
    return hist


# --------------------------------------------------------------------------
# report writers
# --------------------------------------------------------------------------


def write_k_values(report: LooReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["point", "pareto_k", "elpd_loo_i", "flagged"])
        for i, (k, e) in enumerate(zip(report.pareto_k, report.pointwise_loo)):
            w.writerow([i, repr(float(k)), repr(float(e)), int(k > BAD_K)])


def write_criteria(report: LooReport, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["criterion", "value"])
        for name in ("elpd_loo", "se_loo", "elpd_waic", "se_waic", "p_waic", "n_bad_k"):
            w.writerow([name, repr(getattr(report, name))])


def write_summary_tables(summary: dict, path_prefix):
    """One CSV per frequency table: ``<prefix>_framework.csv`` etc."""
    paths = []
    for name, table in summary.items():
        path = f"{path_prefix}_{name}.csv"
        rows = list(table.items())
        fields = list(rows[0][1].keys()) if rows else []
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            key_cols = ["framework", "driver"] if name == "framework_driver" else [name]
            w.writerow(key_cols + fields)
            for k, v in rows:
                keys = list(k) if isinstance(k, tuple) else [k]
                w.writerow(keys + [v[f] for f in fields])
        paths.append(path)
    return paths


def write_histograms(instances, path, bins: int = 50):
    """Long-format histogram table ``variable, left, right, count``."""
    instances = list(instances)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variable", "left", "right", "count"])
        for c in COLUMNS:
            x = np.concatenate([getattr(i, c) for i in instances])
            counts, edges = np.histogram(x, bins=bins)
            for k, n in enumerate(counts):
                w.writerow([c, repr(float(edges[k])), repr(float(edges[k + 1])), int(n)])
