"""Small statistical helpers: a dip-type unimodality statistic and excess kurtosis.

The unimodality statistic follows the dip construction directly from its
definition: the empirical CDF's deviation from the best fit that is convex
left of a mode and concave right of it, minimised over a grid of candidate
modes.  Significance comes from a Monte-Carlo null of uniform samples of
the same size, which calibrates the statistic exactly as implemented.
"""

from __future__ import annotations

import numpy as np


def _max_deviation_convex(x: np.ndarray, f: np.ndarray) -> float:
    """Max deviation of the points above their greatest convex minorant."""
    hull: list[int] = []
    for i in range(len(x)):
        while len(hull) >= 2:
            i0, i1 = hull[-2], hull[-1]
            # keep the hull convex: pop i1 if it lies above segment (i0, i)
            if (f[i1] - f[i0]) * (x[i] - x[i0]) >= (f[i] - f[i0]) * (x[i1] - x[i0]):
                hull.pop()
            else:
                break
        hull.append(i)
    dev = 0.0
    k = 0
    for i in range(len(x)):
        while k < len(hull) - 1 and x[hull[k + 1]] <= x[i]:
            k += 1
        if k == len(hull) - 1:
            base = f[hull[k]]
        else:
            i0, i1 = hull[k], hull[k + 1]
            t = 0.0 if x[i1] == x[i0] else (x[i] - x[i0]) / (x[i1] - x[i0])
            base = f[i0] + t * (f[i1] - f[i0])
        dev = max(dev, f[i] - base)
    return dev


def unimodality_dip(x: np.ndarray, n_modes: int = 32) -> float:
    """Dip-type departure of a sample's ECDF from the nearest unimodal shape."""
    x = np.sort(np.asarray(x, dtype=np.float64))
    n = len(x)
    if n < 4 or x[0] == x[-1]:
        return 0.0
    f = (np.arange(n) + 1.0) / n
    cut_points = np.unique(
        np.clip((np.linspace(0.0, 1.0, n_modes) * (n - 1)).astype(int), 1, n - 2)
    )
    best = np.inf
    for m in cut_points:
        left = _max_deviation_convex(x[: m + 1], f[: m + 1])
        # concave deviation on the right via the reflected convex problem
        right = _max_deviation_convex(-x[m:][::-1], 1.0 - f[m:][::-1])
        best = min(best, max(left, right))
    return 0.5 * float(best)


def dip_pvalue(
    x: np.ndarray, n_boot: int = 200, seed: int = 0, n_modes: int = 32
) -> tuple[float, float]:
    """(dip, p-value) with a uniform Monte-Carlo null of matching sample size."""
    x = np.asarray(x, dtype=np.float64)
    observed = unimodality_dip(x, n_modes)
    rng = np.random.default_rng(seed)
    null = np.array(
        [unimodality_dip(rng.uniform(size=len(x)), n_modes) for _ in range(n_boot)]
    )
    p = (1.0 + (null >= observed).sum()) / (n_boot + 1.0)
    return observed, float(p)


def excess_kurtosis(x: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean()
    var = (centered**2).mean()
    if var == 0:
        return 0.0
    return float((centered**4).mean() / var**2 - 3.0)
