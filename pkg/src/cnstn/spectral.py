"""Fourier toolkit on the periodic box [0, 2pi)^dim.

Coefficients follow the normalization ``coeffs = fftn(values) / n**dim`` so
that ``cos(x1)`` has coefficient 1/2 at ``k = +-(1, 0)``.  Arrays are indexed
``[i1, i2, ...]`` with axis 0 carrying ``x1``.

Odd-order multipliers (first derivatives, ``riesz_grad``, mixed
``riesz_double``) vanish on the Nyquist plane of the differentiated axis, the
usual convention for real data on even grids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.fft as sfft

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TorusGrid:
    """Uniform grid with ``points`` samples per axis and Galerkin cutoff ``modes``."""

    dim: int
    modes: int
    points: int

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.modes < 1:
            raise ValueError("modes must be >= 1")
        if self.points % 2:
            raise ValueError(f"points per axis must be even, got {self.points}")
        if self.points < 2 * self.modes + 2:
            raise ValueError(
                f"points per axis ({self.points}) must be >= 2*modes+2 ({2 * self.modes + 2})"
            )

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points,) * self.dim

    @property
    def volume(self) -> float:
        return TWO_PI**self.dim

    @property
    def cell_volume(self) -> float:
        return (TWO_PI / self.points) ** self.dim

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        x = TWO_PI * np.arange(self.points) / self.points
        return tuple(np.meshgrid(*([x] * self.dim), indexing="ij"))

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, ...]:
        k = np.fft.fftfreq(self.points, d=1.0 / self.points)
        return tuple(np.meshgrid(*([k] * self.dim), indexing="ij"))

    @cached_property
    def odd_wavenumbers(self) -> tuple[np.ndarray, ...]:
        """Wavenumbers with the Nyquist plane of each axis set to zero."""
        out = []
        for k in self.wavenumbers:
            k = k.copy()
            k[np.abs(k) == self.points // 2] = 0.0
            out.append(k)
        return tuple(out)

    @cached_property
    def k2(self) -> np.ndarray:
        return sum(k * k for k in self.wavenumbers)

    @cached_property
    def inv_k2(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            inv = np.where(self.k2 > 0, 1.0 / np.where(self.k2 > 0, self.k2, 1.0), 0.0)
        return inv

    @cached_property
    def kinf(self) -> np.ndarray:
        return np.max(np.abs(np.stack(self.wavenumbers)), axis=0)

    @cached_property
    def galerkin_mask(self) -> np.ndarray:
        return self.kinf <= self.modes

    def cutoff_mask(self, cutoff: int) -> np.ndarray:
        return self.kinf <= cutoff

    def padded(self, factor: int = 2) -> "TorusGrid":
        return TorusGrid(self.dim, self.modes, self.points * factor)


# -- raw array transforms ---------------------------------------------------


def forward(values: np.ndarray) -> np.ndarray:
    return sfft.fftn(values) / values.size


def backward(coeffs: np.ndarray) -> np.ndarray:
    return sfft.ifftn(coeffs * coeffs.size).real


def pad_coeffs(coeffs: np.ndarray, points: int) -> np.ndarray:
    """Embed a coefficient cube into a larger cube (zero padding in k)."""
    n = coeffs.shape[0]
    if points == n:
        return coeffs
    h = n // 2
    out = np.zeros((points,) * coeffs.ndim, dtype=complex)
    idx_src = np.r_[0:h, n - h + 1 : n]  # drop the Nyquist bin
    idx_dst = np.r_[0:h, points - h + 1 : points]
    out[np.ix_(*([idx_dst] * coeffs.ndim))] = coeffs[np.ix_(*([idx_src] * coeffs.ndim))]
    return out


def truncate_coeffs(coeffs: np.ndarray, points: int) -> np.ndarray:
    """Restrict a coefficient cube to ``|k| < points/2``; the Nyquist bin is zeroed."""
    big = coeffs.shape[0]
    if big == points:
        return coeffs
    h = points // 2
    idx_src = np.r_[0:h, big - h + 1 : big]
    idx_dst = np.r_[0:h, points - h + 1 : points]
    out = np.zeros((points,) * coeffs.ndim, dtype=complex)
    out[np.ix_(*([idx_dst] * coeffs.ndim))] = coeffs[np.ix_(*([idx_src] * coeffs.ndim))]
    return out


def padded_values(coeffs: np.ndarray, factor: int = 2) -> np.ndarray:
    return backward(pad_coeffs(coeffs, coeffs.shape[0] * factor))


def from_padded_values(values: np.ndarray, points: int) -> np.ndarray:
    return truncate_coeffs(forward(values), points)


# -- field containers -------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real periodic field held as samples, Fourier coefficients, or both.

    Whichever representation is missing is computed on first access and
    cached; both arrays are read-only.
    """

    grid: TorusGrid
    _values: np.ndarray | None = field(default=None, repr=False)
    _coeffs: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self._values is None and self._coeffs is None:
            raise ValueError("ScalarField needs values or coeffs")
        for arr in (self._values, self._coeffs):
            if arr is not None:
                if arr.shape != self.grid.shape:
                    raise ValueError(f"array shape {arr.shape} != grid shape {self.grid.shape}")
                arr.flags.writeable = False

    @classmethod
    def from_values(cls, grid: TorusGrid, values) -> "ScalarField":
        return cls(grid, _values=np.array(values, dtype=float))

    @classmethod
    def from_coeffs(cls, grid: TorusGrid, coeffs) -> "ScalarField":
        return cls(grid, _coeffs=np.array(coeffs, dtype=complex))

    @classmethod
    def from_function(cls, grid: TorusGrid, func) -> "ScalarField":
        return cls.from_values(grid, np.broadcast_to(func(*grid.coords), grid.shape))

    @classmethod
    def constant(cls, grid: TorusGrid, value: float) -> "ScalarField":
        return cls.from_values(grid, np.full(grid.shape, float(value)))

    @cached_property
    def values(self) -> np.ndarray:
        if self._values is not None:
            return self._values
        v = backward(self._coeffs)
        v.flags.writeable = False
        return v

    @cached_property
    def coeffs(self) -> np.ndarray:
        if self._coeffs is not None:
            return self._coeffs
        c = forward(self._values)
        c.flags.writeable = False
        return c

    @property
    def has_coeffs(self) -> bool:
        return self._coeffs is not None or "coeffs" in self.__dict__

    def mean(self) -> float:
        return float(self.coeffs.flat[0].real)

    def __add__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField.from_values(self.grid, self.values + other.values)
        return ScalarField.from_values(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField.from_values(self.grid, self.values - other.values)
        return ScalarField.from_values(self.grid, self.values - other)

    def __mul__(self, scalar):
        return ScalarField.from_values(self.grid, self.values * scalar)

    __rmul__ = __mul__

    def __neg__(self):
        return ScalarField.from_values(self.grid, -self.values)


@dataclass(frozen=True, eq=False)
class VectorField:
    components: tuple[ScalarField, ...]

    def __post_init__(self):
        grids = {c.grid for c in self.components}
        if len(grids) != 1:
            raise ValueError("components live on different grids")
        if len(self.components) != self.grid.dim:
            raise ValueError("number of components must equal grid dimension")

    @property
    def grid(self) -> TorusGrid:
        return self.components[0].grid

    def __getitem__(self, i: int) -> ScalarField:
        return self.components[i]

    def __len__(self):
        return len(self.components)

    @classmethod
    def from_values(cls, grid: TorusGrid, values) -> "VectorField":
        return cls(tuple(ScalarField.from_values(grid, v) for v in values))

    @classmethod
    def from_coeffs(cls, grid: TorusGrid, coeffs) -> "VectorField":
        return cls(tuple(ScalarField.from_coeffs(grid, c) for c in coeffs))

    @classmethod
    def zeros(cls, grid: TorusGrid) -> "VectorField":
        return cls(tuple(ScalarField.constant(grid, 0.0) for _ in range(grid.dim)))

    @property
    def values(self) -> np.ndarray:
        return np.stack([c.values for c in self.components])

    @property
    def coeffs(self) -> np.ndarray:
        return np.stack([c.coeffs for c in self.components])


# -- operations ------------------------------------------------------------


def to_spectral(f: ScalarField) -> ScalarField:
    _ = f.coeffs
    return f


def to_physical(f: ScalarField) -> ScalarField:
    return ScalarField.from_values(f.grid, f.values.copy())


def derivative(f: ScalarField, axis: int) -> ScalarField:
    if not 0 <= axis < f.grid.dim:
        raise ValueError(f"axis {axis} out of range for dim {f.grid.dim}")
    return ScalarField.from_coeffs(f.grid, 1j * f.grid.odd_wavenumbers[axis] * f.coeffs)


def gradient(f: ScalarField) -> VectorField:
    return VectorField(tuple(derivative(f, i) for i in range(f.grid.dim)))


def divergence(v: VectorField) -> ScalarField:
    g = v.grid
    c = sum(1j * g.odd_wavenumbers[i] * v[i].coeffs for i in range(g.dim))
    return ScalarField.from_coeffs(g, c)


def laplacian(f: ScalarField) -> ScalarField:
    return ScalarField.from_coeffs(f.grid, -f.grid.k2 * f.coeffs)


def project_modes(f: ScalarField, cutoff: int) -> ScalarField:
    """Galerkin projection: keep only ``|k|_inf <= cutoff``."""
    if cutoff < 0:
        raise ValueError("cutoff must be >= 0")
    return ScalarField.from_coeffs(f.grid, np.where(f.grid.cutoff_mask(cutoff), f.coeffs, 0.0))


def smoothing(f: ScalarField, eta: float) -> ScalarField:
    """Fourier smoothing operator J^eta = projection at cutoff floor(1/eta)."""
    if not 0.0 < eta:
        raise ValueError("eta must be positive")
    return project_modes(f, int(np.floor(1.0 / eta)))


@dataclass(frozen=True, eq=False)
class RieszResult:
    """Output of a Riesz operator plus the mean that was projected out."""

    field: ScalarField | VectorField
    removed_mean: float

    @property
    def mean_removed(self) -> bool:
        return self.removed_mean != 0.0


def riesz_grad(f: ScalarField) -> VectorField:
    """grad (Delta^-1) f; the k=0 coefficient is discarded."""
    return riesz_grad_checked(f).field


def riesz_grad_checked(f: ScalarField) -> RieszResult:
    g = f.grid
    c = f.coeffs
    comps = tuple(
        ScalarField.from_coeffs(g, -1j * g.odd_wavenumbers[i] * g.inv_k2 * c) for i in range(g.dim)
    )
    return RieszResult(VectorField(comps), f.mean())


def riesz_double_multiplier(grid: TorusGrid, i: int, j: int) -> np.ndarray:
    if i == j:
        k = grid.wavenumbers[i]
        return k * k * grid.inv_k2
    return grid.odd_wavenumbers[i] * grid.odd_wavenumbers[j] * grid.inv_k2


def riesz_double(f: ScalarField, i: int, j: int) -> ScalarField:
    """d_i d_j Delta^-1 f, symbol k_i k_j / |k|^2, zero at k = 0."""
    g = f.grid
    if not (0 <= i < g.dim and 0 <= j < g.dim):
        raise ValueError("axis out of range")
    return ScalarField.from_coeffs(g, riesz_double_multiplier(g, i, j) * f.coeffs)


def integrate(f: ScalarField) -> float:
    return float(f.grid.volume * f.coeffs.flat[0].real)


def quadrature(f: ScalarField) -> float:
    """Rectangle rule; exact for trigonometric polynomials resolved by the grid."""
    return float(np.sum(f.values) * f.grid.cell_volume)


def inner(f: ScalarField, g: ScalarField) -> float:
    return float(np.sum(f.values * g.values) * f.grid.cell_volume)


def l2_norm(f: ScalarField) -> float:
    return float(np.sqrt(np.sum(f.values**2) * f.grid.cell_volume))


def l2_norm_spectral(f: ScalarField) -> float:
    return float(np.sqrt(f.grid.volume * np.sum(np.abs(f.coeffs) ** 2)))


def dealias(f: ScalarField, order: int = 2) -> ScalarField:
    """Zero the modes with ``|k|_inf > n / (order + 1)``.

    ``order=2`` is the classical 2/3 rule for quadratic products; ``order=3``
    keeps cubic products alias-free.
    """
    cutoff = f.grid.points // (order + 1)
    return project_modes(f, cutoff)


def multiply(*fields: ScalarField) -> ScalarField:
    """Pointwise product evaluated on the 2n grid and truncated back.

    Exact on the retained modes for up to three band-limited factors.
    """
    if not fields:
        raise ValueError("need at least one factor")
    g = fields[0].grid
    big = g.points * 2
    prod = np.ones((big,) * g.dim)
    for f in fields:
        prod = prod * backward(pad_coeffs(f.coeffs, big))
    return ScalarField.from_coeffs(g, truncate_coeffs(forward(prod), g.points))


def apply_pointwise(f: ScalarField, func, padded: bool = True) -> ScalarField:
    """Evaluate ``func(f)`` on the 2n grid (or the native grid) and transform back."""
    g = f.grid
    if not padded:
        return ScalarField.from_values(g, func(f.values))
    vals = padded_values(f.coeffs)
    return ScalarField.from_coeffs(g, from_padded_values(func(vals), g.points))


def random_field(grid: TorusGrid, rng: np.random.Generator, cutoff: int | None = None,
                 amplitude: float = 1.0, mean: float = 0.0) -> ScalarField:
    """Random real trigonometric polynomial with modes ``|k|_inf <= cutoff``."""
    if cutoff is None:
        cutoff = grid.points // 2 - 1
    noise = rng.standard_normal(grid.shape)
    c = forward(noise)
    c = np.where(grid.cutoff_mask(cutoff), c, 0.0)
    f = backward(c)
    scale = np.max(np.abs(f - f.mean())) or 1.0
    f = (f - f.mean()) * (amplitude / scale) + mean
    return ScalarField.from_values(grid, f)
