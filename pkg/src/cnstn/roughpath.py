"""p-variation, controls, rough driver norms and the rough remainder V#.

The remainder is measured against the finite test family
``e_kappa(x) = exp(i kappa.x)``, ``|kappa|_inf <= 3``; each coefficient is
divided by ``||e_kappa||_{W^{3,inf}} = sum_{j<=3} |kappa|^j`` so the reported
norm is a computable stand-in for the dual W^{-3,1} norm.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .io import check_schema_line
from .noise import DriverPath, GeometricLift, QField

TABLE_SCHEMA = "remainder/1.0"
EXACT = "exact"


def _check_p(p: float) -> None:
    if not p >= 1.0:
        raise ValueError(f"p must be >= 1, got {p}")


def _as_values(path) -> np.ndarray:
    if isinstance(path, DriverPath):
        return path.values
    x = np.asarray(path, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def p_variation(path: DriverPath | np.ndarray, p: float) -> float:
    """Exact p-variation of a piecewise-linear path (sup attained on nodes)."""
    _check_p(p)
    x = _as_values(path)
    return kernels.pvar_power(x, p) ** (1.0 / p)


def p_variation_bruteforce(path: DriverPath | np.ndarray, p: float) -> float:
    """Enumerate every partition through the nodes; exponential, for tests only."""
    _check_p(p)
    x = _as_values(path)
    n = len(x)
    best = 0.0
    inner = range(1, n - 1)
    for r in range(n - 1):
        for subset in itertools.combinations(inner, r):
            idx = (0, *subset, n - 1)
            s = sum(np.linalg.norm(x[b] - x[a]) ** p for a, b in zip(idx[:-1], idx[1:]))
            best = max(best, s)
    return best ** (1.0 / p)


@dataclass(frozen=True, eq=False)
class Control:
    times: np.ndarray
    table: np.ndarray  # (M+1, M+1), upper triangle meaningful

    def __call__(self, i: int, j: int) -> float:
        return float(self.table[i, j])

    def superadditivity_defect(self) -> float:
        """max over i <= j <= k of omega(i,j) + omega(j,k) - omega(i,k), clipped at 0."""
        om = self.table
        n = len(om)
        worst = 0.0
        for j in range(n):
            lhs = om[:j + 1, j][:, None] + om[j, j:][None, :]
            worst = max(worst, float(np.max(lhs - om[:j + 1, j:])))
        return max(worst, 0.0)


def control_from_path(path: DriverPath, p: float) -> Control:
    _check_p(p)
    return Control(path.times, kernels.control_table(path.values, p))


def chen_defect(lift: GeometricLift) -> float:
    return kernels.chen_defect(lift.base.values, lift.second)


def ito_adjusted(lift: GeometricLift) -> GeometricLift:
    """Lift with ZZ_st - (t-s)/2 Id: still multiplicative, no longer geometric."""
    t = lift.times
    dt = t[None, :] - t[:, None]
    K = lift.base.K
    return lift.with_second(lift.second - 0.5 * dt[:, :, None, None] * np.eye(K))


@dataclass(frozen=True)
class RoughDriverNorms:
    alpha: float
    C_A1: float
    C_A2: float


def driver_norms(q: QField, lift: GeometricLift, p: float) -> RoughDriverNorms:
    """Hoelder-type constants of A1 = (Q.grad) Z and A2 = (Q.grad)^2 ZZ.

    On the Fourier scale each derivative costs one power of |kappa|, so the
    operator-norm proxies reduce to |Z_st| max|Q| and |ZZ_st|_F max|Q|^2.
    """
    _check_p(p)
    if not q.is_constant:
        raise ValueError("driver norms are only defined for constant Q")
    alpha = 1.0 / p
    t = lift.times
    z = lift.base.values
    qmax = q.max_norm()
    iu = np.triu_indices(len(t), k=1)
    dt = (t[None, :] - t[:, None])[iu]
    z1 = np.linalg.norm((z[None, :, :] - z[:, None, :])[iu], axis=-1)
    z2 = np.linalg.norm(lift.second[iu].reshape(len(dt), -1), axis=-1)
    c1 = float(np.max(z1 * qmax / dt**alpha)) if len(dt) else 0.0
    c2 = float(np.max(z2 * qmax**2 / dt ** (2 * alpha))) if len(dt) else 0.0
    return RoughDriverNorms(alpha, c1, c2)


# -- remainder ---------------------------------------------------------------------


def probe_modes(dim: int, cutoff: int = 3) -> np.ndarray:
    """Wavevectors |kappa|_inf <= cutoff, shape (M, dim)."""
    r = range(-cutoff, cutoff + 1)
    return np.array(list(itertools.product(r, repeat=dim)), dtype=float)


def w3inf_weight(modes: np.ndarray) -> np.ndarray:
    k = np.linalg.norm(modes, axis=1)
    return 1.0 + k + k**2 + k**3


def mode_indices(modes: np.ndarray, points: int) -> tuple[np.ndarray, ...]:
    """Indices of ``modes`` inside an fft-ordered cube of side ``points``."""
    idx = np.mod(modes.astype(int), points)
    return tuple(idx[:, a] for a in range(modes.shape[1]))


@dataclass(frozen=True, eq=False)
class RemainderTable:
    level: np.ndarray
    s: np.ndarray
    t: np.ndarray
    norm: np.ndarray
    flagged: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.flagged is None:
            object.__setattr__(self, "flagged", np.zeros(len(self.norm), dtype=bool))
        if not np.all(np.isfinite(self.norm)):
            raise ValueError("remainder norms must be finite")

    @property
    def levels(self) -> np.ndarray:
        return np.unique(self.level)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {TABLE_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["level", "s", "t", "norm", "flagged"])
        for row in zip(self.level, self.s, self.t, self.norm, self.flagged):
            w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])),
                        repr(float(row[3])), int(row[4])])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "RemainderTable":
        text = str(source) if str(source).startswith("#") else Path(source).read_text()
        lines = text.splitlines()
        check_schema_line(lines[0], TABLE_SCHEMA)
        rows = list(csv.reader(lines[2:]))
        data = np.array([[float(x) for x in r] for r in rows]).reshape(-1, 5)
        return cls(data[:, 0].astype(int), data[:, 1], data[:, 2], data[:, 3], data[:, 4] > 0)

    @classmethod
    def synthetic(cls, levels: int, T: float, func) -> "RemainderTable":
        rows = []
        for lev in range(1, levels + 1):
            h = T / 2**lev
            for j in range(2**lev):
                rows.append((lev, j * h, (j + 1) * h, func(h)))
        a = np.array(rows)
        return cls(a[:, 0].astype(int), a[:, 1], a[:, 2], a[:, 3])


def remainder_table(times: np.ndarray, V: np.ndarray, D: np.ndarray, q: QField | None,
                    lift: GeometricLift, modes: np.ndarray, levels: int | None = None,
                    roundoff: float = 0.0) -> RemainderTable:
    """Evaluate V#_st on every dyadic window of the sampled trajectory.

    ``V`` holds test-mode coefficients, shape (J+1, C, M) for the C unknowns
    (density and momentum components); ``D`` the cumulative drift integrals
    on the same grid.  The lift must have exactly the sample times as nodes.
    """
    times = np.asarray(times, dtype=float)
    J = len(times) - 1
    if V.shape != D.shape or V.shape[0] != J + 1:
        raise ValueError("series and drift integrals must share the time grid")
    if len(lift.times) != J + 1 or not np.allclose(lift.times, times, rtol=0, atol=1e-12):
        raise ValueError("lift nodes do not match the sample times")
    if q is not None and not q.is_constant:
        raise ValueError("rough remainder requires constant Q")
    if J & (J - 1):
        raise ValueError("number of sample intervals must be a power of two")
    L = int(np.log2(J)) if J > 1 else 0
    levels = L if levels is None else min(levels, L)
    # a_k(kappa) = i Q_k . kappa, shape (K, M)
    K = lift.base.K
    a = 1j * (q.vectors @ modes.T) if q is not None else np.zeros((K, len(modes)))
    weight = w3inf_weight(modes)
    kinf = np.max(np.abs(modes), axis=1)
    qmax = q.max_norm() if q is not None else 0.0
    z = lift.base.values
    rows = []
    for lev in range(0, levels + 1):
        stride = J >> lev
        for j in range(2**lev):
            i0, i1 = j * stride, (j + 1) * stride
            Z = z[i1] - z[i0]
            ZZ = lift.second[i0, i1]
            a1 = Z @ a  # (M,)
            a2 = np.einsum("km,kl,lm->m", a, ZZ, a)
            R = V[i1] - V[i0] - (D[i1] - D[i0]) - (a1 + a2)[None, :] * V[i0]
            norm = float(np.max(np.abs(R) / weight[None, :]))
            if norm < roundoff:
                norm = 0.0
            flag = bool(qmax * np.max(kinf) * np.linalg.norm(Z) > 1.0)
            rows.append((lev, times[i0], times[i1], norm, flag))
    arr = np.array([r[:4] for r in rows], dtype=float)
    return RemainderTable(arr[:, 0].astype(int), arr[:, 1], arr[:, 2], arr[:, 3],
                          np.array([r[4] for r in rows]))


@dataclass(frozen=True)
class ScalingFit:
    slope: float | str
    intercept: float
    residual: float
    n_points: int

    @property
    def exact(self) -> bool:
        return self.slope == EXACT

    def passes(self, threshold: float) -> bool:
        return self.exact or self.slope >= threshold

    def to_json(self) -> str:
        return json.dumps({"slope": self.slope, "intercept": self.intercept,
                           "residual": self.residual, "n_points": self.n_points})


def fit_scaling_exponent(table: RemainderTable, min_level: int = 0) -> ScalingFit:
    """Least-squares slope of log|V#| against log(t - s); zero entries are skipped."""
    if len(np.unique(table.level)) < 3:
        raise ValueError("need at least three dyadic levels")
    use = (table.level >= min_level) & (table.norm > 0)
    if not np.any(table.norm > 0):
        return ScalingFit(EXACT, 0.0, 0.0, 0)
    x = np.log(table.t[use] - table.s[use])
    y = np.log(table.norm[use])
    if len(np.unique(x)) < 2:
        raise ValueError("need at least two distinct window lengths with nonzero remainder")
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return ScalingFit(float(coef[0]), float(coef[1]), resid, int(len(x)))
