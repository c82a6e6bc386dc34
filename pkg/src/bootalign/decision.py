"""Wilcoxon signed-rank test on paired score vectors and the p < I rule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

EXACT_BELOW = 20
DEFAULT_CONFIDENCE = 0.001
ALTERNATIVES = ("two-sided", "less")


@dataclass(frozen=True)
class WilcoxonResult:
    w_plus: float
    w_minus: float
    w: float
    n_effective: int
    p_value: float
    method: str
    no_evidence: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Verdict:
    label: str
    p_value: float
    confidence_interval: float
    test_detail: WilcoxonResult

    def record(self, app_id: str = "", device_id: str = "") -> dict:
        return {
            "app_id": app_id,
            "device_id": device_id,
            "label": self.label,
            "p_value": self.p_value,
            "I": self.confidence_interval,
            "w": self.test_detail.w,
            "n_effective": self.test_detail.n_effective,
            "method": self.test_detail.method,
        }


def rank_abs(d: np.ndarray) -> np.ndarray:
    """Ranks of |d| starting at 1, ties sharing their average rank."""
    a = np.abs(d)
    order = np.argsort(a, kind="stable")
    ranks = np.empty(len(a), dtype=float)
    sa = a[order]
    i = 0
    while i < len(sa):
        j = i
        while j + 1 < len(sa) and sa[j + 1] == sa[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _exact_cdf(ranks: np.ndarray, t: float) -> float:
    """P(T+ <= t) under H0, every sign pattern equally likely.

    Ranks are at worst half-integers, so the null distribution of twice the
    positive-rank sum is built over the integers by convolution.
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=float)
    counts[0] = 1.0
    top = 0
    for r in doubled:
        counts[r:top + r + 1] += counts[:top + 1].copy()
        top += r
    k = math.floor(2 * t + 1e-9)
    return float(counts[:k + 1].sum() / 2.0 ** len(doubled))


def wilcoxon(x: Sequence[float], y: Sequence[float], alternative: str = "two-sided",
             exact_below: int = EXACT_BELOW, continuity: bool = False) -> WilcoxonResult:
    """Signed-rank test of the paired differences ``x[i] - y[i]``.

    Zero differences are dropped. Below ``exact_below`` remaining pairs the
    p-value comes from the exact null distribution of the signed-rank sum;
    otherwise from the normal approximation with mean n(n+1)/4 and variance
    n(n+1)(2n+1)/24, without continuity correction unless ``continuity``
    is set (then the lower-tail statistic is shifted by +0.5).

    ``alternative="less"`` gives the lower-tail p-value for x shifted below y.
    """
    if alternative not in ALTERNATIVES:
        raise ValueError(f"alternative must be one of {ALTERNATIVES}")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired vectors differ in length: {x.shape} vs {y.shape}")
    if len(x) == 0:
        raise ValueError("empty score vectors")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return WilcoxonResult(0.0, 0.0, 0.0, 0, 1.0, "exact_enumeration", no_evidence=True)
    ranks = rank_abs(d)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    stat = w if alternative == "two-sided" else w_plus

    if n < exact_below:
        method = "exact_enumeration"
        p = _exact_cdf(ranks, stat)
    else:
        method = "normal_approximation"
        mean = n * (n + 1) / 4
        sd = math.sqrt(n * (n + 1) * (2 * n + 1) / 24)
        z = (stat + (0.5 if continuity else 0.0) - mean) / sd
        p = 0.5 * math.erfc(-z / math.sqrt(2))
    if alternative == "two-sided":
        p = 2 * p
    return WilcoxonResult(w_plus, w_minus, w, n, min(1.0, p), method)


def classify(result: WilcoxonResult, confidence: float = DEFAULT_CONFIDENCE) -> Verdict:
    """Malicious iff p < I (strict)."""
    if not 0 < confidence < 1:
        raise ValueError(f"confidence interval I must lie in (0, 1), got {confidence}")
    label = "malicious" if result.p_value < confidence else "legitimate"
    return Verdict(label, result.p_value, confidence, result)
