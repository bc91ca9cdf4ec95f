"""Paired one-sided Wilcoxon signed-rank test and ECDF helpers.

The exact path enumerates the null distribution of the signed-rank sum by
dynamic programming over doubled midranks (doubling makes tied midranks
integral), which is equivalent to summing over all 2^n sign patterns.
Beyond the exact cutoff a normal approximation with continuity and tie
corrections is used. Zero differences are dropped, per standard practice.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

EXACT_LIMIT = 25
_MIN_P = 1e-300


@dataclass(frozen=True)
class WilcoxonResult:
    n: int
    statistic: float
    p_value: float
    method: str
    degenerate: bool = False


def midranks(values) -> list[float]:
    """Ranks (1-based) with tied values sharing their average rank."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        average = (i + j + 2) / 2.0
        for t in range(i, j + 1):
            ranks[order[t]] = average
        i = j + 1
    return ranks


def _exact_p_greater(ranks2: list[int], w2_observed: int) -> float:
    """P(W+ >= observed) with each rank signed +/- independently."""
    total = sum(ranks2)
    counts = [0] * (total + 1)
    counts[0] = 1
    for r in ranks2:
        for s in range(total - r, -1, -1):
            if counts[s]:
                counts[s + r] += counts[s]
    favourable = sum(counts[w2_observed:])
    return favourable / (1 << len(ranks2))


def wilcoxon_signed_rank_greater(deltas, method: str = "auto") -> WilcoxonResult:
    """One-sided test of H1: the differences are stochastically positive.

    method: "exact" (n <= EXACT_LIMIT required), "approx", or "auto"
    (exact up to the cutoff, approximation beyond).
    """
    nonzero = [float(d) for d in deltas if d != 0]
    n = len(nonzero)
    if n == 0:
        return WilcoxonResult(n=0, statistic=0.0, p_value=1.0, method="degenerate", degenerate=True)

    magnitudes = [abs(d) for d in nonzero]
    ranks = midranks(magnitudes)
    w_plus = sum(r for r, d in zip(ranks, nonzero) if d > 0)

    if method == "auto":
        method = "exact" if n <= EXACT_LIMIT else "approx"
    if method == "exact":
        if n > EXACT_LIMIT:
            raise ValueError(f"exact method supports n <= {EXACT_LIMIT}, got {n}")
        ranks2 = [int(round(2 * r)) for r in ranks]
        w2 = int(round(2 * w_plus))
        p = _exact_p_greater(ranks2, w2)
        return WilcoxonResult(n=n, statistic=w_plus, p_value=max(p, _MIN_P), method="exact")
    if method != "approx":
        raise ValueError(f"unknown method {method!r}")

    mean = n * (n + 1) / 4.0
    variance = n * (n + 1) * (2 * n + 1) / 24.0
    seen: dict[float, int] = {}
    for magnitude in magnitudes:
        seen[magnitude] = seen.get(magnitude, 0) + 1
    variance -= sum(t**3 - t for t in seen.values()) / 48.0
    if variance <= 0:
        return WilcoxonResult(n=n, statistic=w_plus, p_value=1.0, method="approx", degenerate=True)
    z = (w_plus - 0.5 - mean) / math.sqrt(variance)
    p = 0.5 * math.erfc(z / math.sqrt(2.0))
    return WilcoxonResult(
        n=n, statistic=w_plus, p_value=min(max(p, _MIN_P), 1.0), method="approx"
    )


def ecdf_points(values) -> list[tuple[float, float]]:
    """Empirical CDF as (value, cumulative fraction) pairs, one per distinct value."""
    ordered = sorted(float(v) for v in values)
    total = len(ordered)
    points: list[tuple[float, float]] = []
    for i, value in enumerate(ordered):
        if i + 1 < total and ordered[i + 1] == value:
            continue
        points.append((value, (i + 1) / total))
    return points
