"""Point-biserial correlation, one-sample t and Wilcoxon signed-rank tests,
Benjamini-Hochberg adjustment and -log10 display matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ALTERNATIVES = ("greater", "less", "two-sided")


class UndefinedCorrelation(ValueError):
    """Correlation with a constant variable; the caller excludes the sample."""


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    n: int
    alternative: str


def point_biserial(values, mask) -> float:
    x = np.asarray(values, dtype=np.float64)
    y = np.asarray(mask, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if x.size < 2:
        raise ValueError("need at least two observations")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("mask must be binary")
    if y.min() == y.max():
        raise UndefinedCorrelation("mask is constant")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    if sxx == 0.0:
        raise UndefinedCorrelation("values are constant")
    r = float(np.dot(xc, yc)) / math.sqrt(sxx * float(np.dot(yc, yc)))
    return min(1.0, max(-1.0, r))


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float, y: float | None = None) -> float:
    """Regularized incomplete beta function I_x(a, b).

    ``y`` may carry an accurately computed 1 - x for x close to one.
    """
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    y = 1.0 - x if y is None else y
    if x == 0.0 or y == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, y) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t) of Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    t2 = t * t
    if t2 < df:
        # I_x(a, b) = 1 - I_(1-x)(b, a); keeps precision for small |t|
        tail = 0.5 * (1.0 - betainc(0.5, df / 2.0, t2 / (df + t2), df / (df + t2)))
    else:
        tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))
    return tail if t > 0 else 1.0 - tail


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _tail(sf_upper: float, sf_lower: float, alternative: str) -> float:
    if alternative == "greater":
        p = sf_upper
    elif alternative == "less":
        p = sf_lower
    elif alternative == "two-sided":
        p = 2.0 * min(sf_upper, sf_lower)
    else:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}")
    return min(1.0, max(0.0, p))


def t_test_one_sample(values, mu0: float = 0.0, alternative: str = "greater") -> TestResult:
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n < 2:
        raise ValueError("t-test needs at least two values")
    mean = float(x.mean())
    sd = float(np.sqrt(np.sum((x - mean) ** 2) / (n - 1)))
    if sd == 0.0:
        raise ValueError("zero sample variance")
    t = (mean - mu0) / (sd / math.sqrt(n))
    df = n - 1
    p = _tail(student_t_sf(t, df), student_t_sf(-t, df), alternative)
    return TestResult(t, p, n, alternative)


def rank_average(a) -> np.ndarray:
    """1-based ranks, ties sharing the mean of their positions."""
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size)
    sorted_a = a[order]
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and sorted_a[j + 1] == sorted_a[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_null_counts(n: int) -> np.ndarray:
    """counts[w] = number of the 2**n sign patterns with W+ = w (ranks 1..n)."""
    counts = np.zeros(n * (n + 1) // 2 + 1, dtype=np.int64)
    counts[0] = 1
    for k in range(1, n + 1):
        counts[k:] = counts[k:] + counts[:-k].copy()
    return counts


EXACT_MAX_N = 25


def wilcoxon_signed_rank(values, alternative: str = "greater") -> TestResult:
    """Signed-rank test of symmetry about zero; zeros are discarded.

    Exact null enumeration for tie-free samples with n <= 25, otherwise the
    normal approximation with tie and continuity corrections.
    """
    x = np.asarray(values, dtype=np.float64)
    x = x[x != 0.0]
    n = x.size
    if n == 0:
        raise ValueError("all differences are zero")
    ranks = rank_average(np.abs(x))
    w_plus = float(ranks[x > 0].sum())
    ties = np.unique(np.abs(x), return_counts=True)[1]
    if n <= EXACT_MAX_N and (ties == 1).all():
        counts = signed_rank_null_counts(n)
        total = float(2 ** n)
        w = int(round(w_plus))
        upper = counts[w:].sum() / total
        lower = counts[:w + 1].sum() / total
        return TestResult(w_plus, _tail(upper, lower, alternative), n, alternative)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(ties ** 3 - ties)) / 48.0
    sd = math.sqrt(var)
    upper = normal_sf((w_plus - mean - 0.5) / sd)
    lower = normal_sf((mean - w_plus - 0.5) / sd)
    return TestResult(w_plus, _tail(upper, lower, alternative), n, alternative)


def bh_adjust(p_values) -> np.ndarray:
    """Benjamini-Hochberg step-up adjusted p-values, returned in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("p-values must be one-dimensional")
    if p.size == 0:
        return p.copy()
    if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="mergesort")
    q = p[order] * m / np.arange(1, m + 1)
    q = np.minimum.accumulate(q[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(q, 1.0)
    return out


def neglog10_threshold(p_adjusted, alpha: float = 0.05):
    """(display, mask): mask is ``p < alpha``; display is -log10 p there and NaN elsewhere."""
    p = np.asarray(p_adjusted, dtype=np.float64)
    mask = p < alpha
    with np.errstate(divide="ignore", invalid="ignore"):
        display = np.where(mask, -np.log10(p), np.nan)
    return display, mask
