"""NumPy versions of the compiled loops; same signatures and results."""

from __future__ import annotations

import numpy as np


def pvar_power(x: np.ndarray, p: float) -> float:
    n = len(x)
    best = np.zeros(n)
    for j in range(1, n):
        d = np.sqrt(np.sum((x[j] - x[:j]) ** 2, axis=1))
        best[j] = np.max(best[:j] + d**p)
    return float(best[-1])


def control_table(x: np.ndarray, p: float) -> np.ndarray:
    n = len(x)
    dist = np.sqrt(np.sum((x[None, :, :] - x[:, None, :]) ** 2, axis=2)) ** p
    out = np.zeros((n, n))
    for s in range(n):
        best = np.zeros(n)
        for j in range(s + 1, n):
            best[j] = np.max(best[s:j] + dist[s:j, j])
        out[s, s + 1:] = best[s + 1:]
    return out


def chen_defect(z: np.ndarray, second: np.ndarray) -> float:
    n = len(z)
    worst = 0.0
    for j in range(1, n - 1):
        inc_left = z[j] - z[:j]  # (i, K)
        inc_right = z[j + 1:] - z[j]  # (k, K)
        lhs = second[:j, j + 1:] - second[:j, j][:, None] - second[j, j + 1:][None, :]
        rhs = inc_left[:, None, :, None] * inc_right[None, :, None, :]
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst
