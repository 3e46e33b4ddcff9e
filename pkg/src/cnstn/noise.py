"""Noise coefficients Q and temporal drivers W (smooth, Brownian, mollified)."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from .spectral import ScalarField, TorusGrid, VectorField, derivative, divergence

PATH_SCHEMA = "driver/1.0"


# -- Q -------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class QField:
    """Family (Q_k), k = 1..K.  ``vectors`` for constant Q, ``fields`` otherwise."""

    kind: str
    vectors: np.ndarray | None = None  # (K, N)
    fields: tuple[VectorField, ...] | None = None

    def __post_init__(self):
        if self.kind == "constant":
            if self.vectors is None or self.vectors.ndim != 2 or len(self.vectors) == 0:
                raise ValueError("constant QField needs a (K, N) array of vectors")
        elif self.kind == "smooth":
            if not self.fields:
                raise ValueError("smooth QField needs at least one vector field")
        else:
            raise ValueError(f"unknown QField kind {self.kind!r}")

    @property
    def K(self) -> int:
        return len(self.vectors) if self.kind == "constant" else len(self.fields)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1] if self.kind == "constant" else self.fields[0].grid.dim

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def scaled(self, factor: float) -> "QField":
        if self.is_constant:
            return QField("constant", vectors=self.vectors * factor)
        return QField(
            "smooth",
            fields=tuple(VectorField.from_values(f.grid, f.values * factor) for f in self.fields),
        )

    def on_grid(self, grid: TorusGrid) -> np.ndarray:
        """Sample values, shape (K, N, *grid.shape)."""
        if self.is_constant:
            shape = (self.K, self.dim) + grid.shape
            return np.broadcast_to(self.vectors.reshape(self.K, self.dim, *(1,) * grid.dim), shape)
        if self.fields[0].grid != grid:
            raise ValueError("QField lives on a different grid")
        return np.stack([f.values for f in self.fields])

    def coeffs(self, grid: TorusGrid) -> np.ndarray:
        """Fourier coefficients, shape (K, N, *grid.shape)."""
        if self.is_constant:
            out = np.zeros((self.K, self.dim) + grid.shape, dtype=complex)
            out[(slice(None), slice(None)) + (0,) * grid.dim] = self.vectors
            return out
        return np.stack([f.coeffs for f in self.fields])

    def divergence(self, grid: TorusGrid) -> list[ScalarField]:
        if self.is_constant:
            return [ScalarField.constant(grid, 0.0) for _ in range(self.K)]
        return [divergence(f) for f in self.fields]

    def max_norm(self) -> float:
        """max_k sup_x |Q_k(x)|."""
        if self.is_constant:
            return float(np.max(np.linalg.norm(self.vectors, axis=1)))
        return float(max(np.max(np.sqrt(np.sum(f.values**2, axis=0))) for f in self.fields))

    def w1inf_norm(self) -> float:
        """sum_k (sup|Q_k| + sup|grad Q_k|), Frobenius norm on the gradient."""
        if self.is_constant:
            return float(np.sum(np.linalg.norm(self.vectors, axis=1)))
        total = 0.0
        for f in self.fields:
            total += np.max(np.sqrt(np.sum(f.values**2, axis=0)))
            grads = np.stack([derivative(f[i], j).values for i in range(f.grid.dim)
                              for j in range(f.grid.dim)])
            total += np.max(np.sqrt(np.sum(grads**2, axis=0)))
        return float(total)


def make_constant_q(vectors) -> QField:
    arr = np.atleast_2d(np.asarray(vectors, dtype=float))
    if arr.size == 0:
        raise ValueError("need at least one Q vector")
    return QField("constant", vectors=arr)


def make_streamfunction_q(grid: TorusGrid, amplitudes) -> QField:
    """Q_k = (d2 psi_k, -d1 psi_k) for trigonometric stream functions.

    ``amplitudes`` holds one mode table per k; each row is
    ``(k1, k2, a_cos, a_sin)`` contributing ``a_cos cos(k.x) + a_sin sin(k.x)``.
    """
    if grid.dim != 2:
        raise ValueError("stream-function noise is only defined in 2D")
    if len(amplitudes) == 0:
        raise ValueError("need at least one stream function")
    x1, x2 = grid.coords
    fields = []
    for table in amplitudes:
        psi = np.zeros(grid.shape)
        for k1, k2, ac, as_ in table:
            phase = k1 * x1 + k2 * x2
            psi += ac * np.cos(phase) + as_ * np.sin(phase)
        psi_f = ScalarField.from_values(grid, psi)
        fields.append(VectorField((derivative(psi_f, 1), -derivative(psi_f, 0))))
    return QField("smooth", fields=tuple(fields))


def make_gradient_q(grid: TorusGrid, amplitudes) -> QField:
    """Curl-free (not divergence-free) Q_k = grad phi_k, same table layout.

    Only for demonstrating what breaks when div Q != 0.
    """
    x = grid.coords
    fields = []
    for table in amplitudes:
        phi = np.zeros(grid.shape)
        for row in table:
            *k, ac, as_ = row
            phase = sum(ki * xi for ki, xi in zip(k, x))
            phi += ac * np.cos(phase) + as_ * np.sin(phase)
        phi_f = ScalarField.from_values(grid, phi)
        fields.append(VectorField(tuple(derivative(phi_f, i) for i in range(grid.dim))))
    return QField("smooth", fields=tuple(fields))


# -- driver paths -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DriverPath:
    """Piecewise-linear path t -> Z(t) in R^K through the given nodes."""

    times: np.ndarray
    values: np.ndarray  # (M+1, K)

    def __post_init__(self):
        t = np.array(self.times, dtype=float)
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("a path needs at least two nodes")
        if len(v) != len(t):
            raise ValueError("times and values have different lengths")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        t.flags.writeable = False
        v.flags.writeable = False
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def K(self) -> int:
        return self.values.shape[1]

    @property
    def T(self) -> float:
        return float(self.times[-1])

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self.times, self.values[:, k]) for k in range(self.K)], axis=-1)
        return out

    def increment(self, s: float, t: float) -> np.ndarray:
        return self(t) - self(s)

    def resample(self, times) -> "DriverPath":
        times = np.asarray(times, dtype=float)
        return DriverPath(times, self(times))

    def sup_distance(self, other: "DriverPath") -> float:
        grid = np.union1d(self.times, other.times)
        return float(np.max(np.abs(self(grid) - other(grid))))

    # CSV interchange: columns t, Z_1..Z_K
    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {PATH_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"Z_{k + 1}" for k in range(self.K)])
        for t, row in zip(self.times, self.values):
            w.writerow([repr(float(t))] + [repr(float(x)) for x in row])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "DriverPath":
        text = str(source) if str(source).startswith("#") else Path(source).read_text()
        lines = text.splitlines()
        from .io import check_schema_line

        check_schema_line(lines[0], PATH_SCHEMA)
        rows = list(csv.reader(lines[1:]))
        header, body = rows[0], rows[1:]
        if header[0] != "t":
            raise ValueError("first column must be t")
        data = np.array([[float(x) for x in r] for r in body])
        return cls(data[:, 0], data[:, 1:])


def zero_path(K: int, T: float, steps: int = 1) -> DriverPath:
    return DriverPath(np.linspace(0.0, T, steps + 1), np.zeros((steps + 1, K)))


def stream_generator(seed: int, index: int = 0, component: int = 0) -> np.random.Generator:
    """Counter-based generator keyed by (seed, realization index, component)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index), int(component)))
    return np.random.Generator(np.random.Philox(ss))


def sample_brownian(K: int, T: float, steps: int, seed: int, index: int = 0) -> DriverPath:
    """K independent Brownian motions on a uniform grid of ``steps`` intervals.

    Each component draws from its own Philox stream so realizations do not
    depend on the order in which they are generated.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = T / steps
    incr = np.empty((steps, K))
    for k in range(K):
        incr[:, k] = stream_generator(seed, index, k).standard_normal(steps) * np.sqrt(dt)
    values = np.vstack([np.zeros((1, K)), np.cumsum(incr, axis=0)])
    return DriverPath(np.linspace(0.0, T, steps + 1), values)


def mollify(path: DriverPath, level: int) -> DriverPath:
    """Wong-Zakai approximation: linear interpolation on 2**level dyadic intervals."""
    if level < 0:
        raise ValueError("level must be >= 0")
    t0, t1 = path.times[0], path.times[-1]
    nodes = t0 + (t1 - t0) * np.arange(2**level + 1) / 2**level
    return path.resample(nodes)


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Piecewise-constant slope of a piecewise-linear path."""

    times: np.ndarray
    slopes: np.ndarray  # (M, K)

    def __call__(self, t) -> np.ndarray:
        idx = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.slopes) - 1)
        return self.slopes[idx]

    def integral(self, s: float | None = None, t: float | None = None) -> np.ndarray:
        s = self.times[0] if s is None else s
        t = self.times[-1] if t is None else t
        lo = np.clip(self.times[:-1], s, t)
        hi = np.clip(self.times[1:], s, t)
        return np.sum(self.slopes * (hi - lo)[:, None], axis=0)


def derivative_steps(path: DriverPath) -> StepFunction:
    dt = np.diff(path.times)
    if np.any(dt <= 0):
        raise ValueError("degenerate zero-length segment")
    return StepFunction(path.times, np.diff(path.values, axis=0) / dt[:, None])


# -- trigonometric smooth drivers ---------------------------------------------------


@dataclass(frozen=True)
class TrigDriver:
    """W_k(t) = drift_k t + sum_j a_j (sin(f_j t + phi_j) - sin(phi_j))."""

    table: tuple  # per component: (drift, ((amp, freq, phase), ...))

    @classmethod
    def from_spec(cls, spec) -> "TrigDriver":
        comps = []
        for comp in spec:
            if isinstance(comp, dict):
                drift = float(comp.get("drift", 0.0))
                modes = tuple((float(m["amp"]), float(m["freq"]), float(m.get("phase", 0.0)))
                              for m in comp.get("modes", ()))
            else:
                drift = 0.0
                modes = tuple((float(a), float(f), float(p)) for a, f, p in comp)
            comps.append((drift, modes))
        return cls(tuple(comps))

    @property
    def K(self) -> int:
        return len(self.table)

    def value(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = []
        for drift, modes in self.table:
            w = drift * t
            for a, f, ph in modes:
                w = w + a * (np.sin(f * t + ph) - np.sin(ph))
            out.append(w)
        return np.stack(out, axis=-1)

    def derivative(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        out = []
        for drift, modes in self.table:
            w = drift + 0.0 * t
            for a, f, ph in modes:
                w = w + a * f * np.cos(f * t + ph)
            out.append(w)
        return np.stack(out, axis=-1)

    def sample(self, T: float, samples: int) -> DriverPath:
        times = np.linspace(0.0, T, samples)
        return DriverPath(times, self.value(times))


def smooth_driver(spec, T: float, samples: int) -> DriverPath:
    """Sample a trigonometric C^1 driver on ``samples`` uniform nodes."""
    return TrigDriver.from_spec(spec).sample(T, samples)


# -- geometric lift ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GeometricLift:
    """Path Z with its second level ZZ[s, t] = int_s^t Z_{s r} (x) dZ_r on node pairs.

    ``second`` has shape (M+1, M+1, K, K); entry [i, j] is meaningful for i <= j.
    """

    base: DriverPath
    second: np.ndarray = field(repr=False)

    @property
    def times(self) -> np.ndarray:
        return self.base.times

    def first(self, i: int, j: int) -> np.ndarray:
        return self.base.values[j] - self.base.values[i]

    def level2(self, i: int, j: int) -> np.ndarray:
        return self.second[i, j]

    def index_of(self, t: float) -> int:
        i = int(np.searchsorted(self.times, t))
        if i >= len(self.times) or not np.isclose(self.times[i], t, rtol=0, atol=1e-12 * max(1.0, abs(t))):
            raise KeyError(f"time {t} is not a node of the lift")
        return i

    def with_second(self, second: np.ndarray) -> "GeometricLift":
        return GeometricLift(self.base, np.array(second, dtype=float))

    @cached_property
    def geometricity_defect(self) -> float:
        """max |Sym(ZZ_st) - Z_st (x) Z_st / 2| over node pairs."""
        z = self.base.values
        inc = z[None, :, :] - z[:, None, :]
        outer = 0.5 * inc[..., :, None] * inc[..., None, :]
        sym = 0.5 * (self.second + np.swapaxes(self.second, -1, -2))
        iu = np.triu_indices(len(z))
        return float(np.max(np.abs(sym - outer)[iu])) if len(z) else 0.0


def lift_geometric(path: DriverPath) -> GeometricLift:
    """Exact iterated integrals of a piecewise-linear path.

    On each segment the integral of (Z_r - Z_s) against the constant slope is
    a midpoint sum, so the prefix A_j = sum_{i<j} (Z_i + Z_{i+1})/2 (x) dZ_i gives
    ZZ_st = A_t - A_s - Z_s (x) (Z_t - Z_s).
    """
    z = path.values
    dz = np.diff(z, axis=0)
    mid = 0.5 * (z[:-1] + z[1:])
    seg = mid[:, :, None] * dz[:, None, :]
    A = np.concatenate([np.zeros((1,) + seg.shape[1:]), np.cumsum(seg, axis=0)])
    second = (A[None, :, :, :] - A[:, None, :, :]
              - z[:, None, :, None] * (z[None, :, None, :] - z[:, None, None, :]))
    return GeometricLift(path, second)
