"""Discrete Ito / Stratonovich sums, the Ito-Stratonovich correction, and ensemble checks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .noise import DriverPath, QField
from .spectral import ScalarField


@dataclass(frozen=True)
class IntegralResult:
    value: float
    scheme: str  # "left-point" | "midpoint"
    path_id: int | None
    steps: int


def _aligned(integrand, path: DriverPath, k: int) -> tuple[np.ndarray, np.ndarray]:
    f = np.asarray(integrand, dtype=float)
    if f.shape != (len(path.times),):
        raise ValueError(f"integrand has {f.shape} samples, path has {len(path.times)} nodes")
    if not 0 <= k < path.K:
        raise ValueError(f"component {k} out of range")
    return f, np.diff(path.values[:, k])


def ito_integral(integrand, path: DriverPath, k: int = 0, path_id: int | None = None) -> IntegralResult:
    """Left-point sum  sum_i f(t_i) (W(t_{i+1}) - W(t_i))."""
    f, dw = _aligned(integrand, path, k)
    return IntegralResult(math.fsum(f[:-1] * dw), "left-point", path_id, len(dw))


def stratonovich_integral(integrand, path: DriverPath, k: int = 0,
                          path_id: int | None = None) -> IntegralResult:
    """Midpoint (trapezoidal) sum  sum_i (f(t_i) + f(t_{i+1}))/2 dW_i."""
    f, dw = _aligned(integrand, path, k)
    return IntegralResult(math.fsum(0.5 * (f[:-1] + f[1:]) * dw), "midpoint", path_id, len(dw))


def correction_operator(rho: ScalarField, q: QField) -> ScalarField:
    """1/2 sum_k div(Q_k (x) Q_k grad rho) = 1/2 sum_k (Q_k . grad)^2 rho."""
    if not q.is_constant:
        raise ValueError("correction operator is implemented for constant Q only")
    g = rho.grid
    kk = np.stack(g.odd_wavenumbers)
    sym = np.zeros(g.shape)
    for qk in q.vectors:
        qdotk = np.tensordot(qk, kk, axes=1)
        sym -= 0.5 * qdotk**2
    return ScalarField.from_coeffs(g, sym * rho.coeffs)


# -- ensemble statistics ----------------------------------------------------------------


@dataclass(frozen=True)
class EnsembleStat:
    n_paths: int
    dt: float
    mean: float
    stderr: float
    degenerate: bool

    @property
    def z(self) -> float:
        if self.stderr == 0:
            return 0.0 if self.mean == 0 else math.inf
        return abs(self.mean) / self.stderr

    @property
    def verdict(self) -> str:
        """pass within 3 standard errors, warn up to 5, fail beyond.

        A degenerate ensemble (identical samples) carries no statistical
        information and is reported as such instead of being tested.
        """
        if self.degenerate:
            return "degenerate"
        if self.z <= 3:
            return "pass"
        return "warn" if self.z <= 5 else "fail"

    def as_dict(self) -> dict:
        return {"n_paths": self.n_paths, "dt": self.dt, "mean": self.mean, "stderr": self.stderr,
                "pass": self.verdict != "fail", "verdict": self.verdict,
                "degenerate": self.degenerate}


def ensemble_stat(samples, dt: float) -> EnsembleStat:
    x = np.asarray(samples, dtype=float)
    if len(x) < 2:
        raise ValueError("ensemble needs at least two paths")
    mean = math.fsum(x) / len(x)
    var = math.fsum((x - mean) ** 2) / (len(x) - 1)
    stderr = math.sqrt(var / len(x))
    return EnsembleStat(len(x), dt, mean, stderr, degenerate=bool(stderr == 0.0))


def brownian_correction_samples(K: int, T: float, steps: int, seeds, k: int = 0) -> np.ndarray:
    """Per path: int W o dW - int W dW - T/2 (mean zero, spread O(sqrt(dt)))."""
    from .noise import sample_brownian

    out = []
    for s in seeds:
        path = sample_brownian(K, T, steps, s)
        w = path.values[:, k]
        out.append(stratonovich_integral(w, path, k).value - ito_integral(w, path, k).value - 0.5 * T)
    return np.array(out)


@dataclass(frozen=True)
class CorrectionSample:
    S: float
    I: float
    C: float

    @property
    def defect(self) -> float:
        return self.S - self.I - self.C


def correction_sample(f: np.ndarray, f_noise: np.ndarray, path: DriverPath, k: int) -> CorrectionSample:
    """S, I and C = 1/2 sum_i (noise-driven increment of f)_i dW_i for one path.

    ``f`` is the probe functional at every step node, ``f_noise`` its per-step
    increment due to the noise alone (full step minus noise-free step).
    """
    S = stratonovich_integral(f, path, k).value
    I = ito_integral(f, path, k).value
    dw = np.diff(path.values[:, k])
    C = 0.5 * math.fsum(np.asarray(f_noise, dtype=float) * dw)
    return CorrectionSample(S, I, C)


def correction_identity_check(samples: list[CorrectionSample], dt: float) -> EnsembleStat:
    return ensemble_stat([s.defect for s in samples], dt)


def noise_energy_contribution(traj) -> np.ndarray:
    """Cumulative energy change caused by the noise, step by step.

    Needs a trajectory integrated with ``companion=True``: each entry is
    E(step with noise) - E(same step, noise switched off).
    """
    if traj.energy_noise is None:
        raise ValueError("trajectory was integrated without the noise-free companion step")
    return np.concatenate([[0.0], np.cumsum(traj.energy_noise)])


def probe_functional(q: QField, psi: ScalarField, grid, k: int):
    """f(rho) = int rho Q_k . grad psi as a callable on coefficient arrays."""
    from .spectral import backward

    g = grid
    grad_psi = [backward(1j * g.odd_wavenumbers[j] * psi.coeffs) for j in range(g.dim)]
    qv = q.on_grid(g)
    weight = sum(qv[k, j] * grad_psi[j] for j in range(g.dim))
    vol = g.volume

    def f(rho_c, u_c):
        return float(np.mean(backward(rho_c) * weight)) * vol

    return f
