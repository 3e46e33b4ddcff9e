"""Galerkin momentum / parabolic continuity scheme with artificial pressure.

Unknowns: density ``rho`` at full spectral resolution and velocity ``u``
supported on ``X_m = {|k|_inf <= m}``.  Per step (size dt, driver slope w):

    rho:  Crank-Nicolson for eps*Lap(rho), explicit Heun for transport + noise
    u:    Heun on  P_m(rho du/dt) = P_m[F(rho, u, w) - u drho/dt]

where F = -div(rho u (x) u) - grad p_delta + div S + eps Lap(rho u)
        + sum_k div(rho u (x) Q_k) w_k.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla

from .noise import DriverPath, QField
from .spectral import (
    ScalarField,
    TorusGrid,
    VectorField,
    backward,
    forward,
    pad_coeffs,
    project_modes,
)

log = logging.getLogger(__name__)


class BlowUp(RuntimeError):
    """Density left the admissible range or the state stopped being finite."""

    def __init__(self, t: float, min_rho: float, reason: str = "density floor breached"):
        super().__init__(f"{reason} at t={t:.6g} (min rho = {min_rho:.6g})")
        self.t = t
        self.min_rho = min_rho
        self.reason = reason
        self.trajectory = None


class CFLWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SchemeParams:
    gamma: float = 2.0
    a: float = 1.0
    mu: float = 0.1
    eta: float = 0.1
    epsilon: float = 0.0
    delta: float = 0.0
    beta: float = 5.0
    m: int = 8
    dt: float = 1e-3
    T: float = 0.5
    density_floor: float | None = None
    stress_factor: float = 1.0  # S = 2 mu c D(u) + eta div u I, D = (grad u + grad u^T)/2

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("a must be positive")
        if not (self.mu > 0 and self.eta > 0):
            raise ValueError("mu and eta must be positive")
        if self.epsilon < 0 or self.delta < 0:
            raise ValueError("epsilon and delta must be >= 0")
        if not (self.dt > 0 and self.T > 0):
            raise ValueError("dt and T must be positive")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if self.gamma <= 1:
            raise ValueError("gamma must exceed 1")
        if not self.beta > max(4.0, self.gamma):
            raise ValueError("beta must exceed max{4, gamma}")

    def check_dimension(self, dim: int) -> None:
        if not self.gamma > dim / 2:
            raise ValueError("gamma must exceed N/2")

    @property
    def steps(self) -> int:
        n = int(round(self.T / self.dt))
        if not np.isclose(n * self.dt, self.T, rtol=1e-12, atol=0):
            raise ValueError("T must be an integer multiple of dt")
        return n


# -- constitutive functions (pointwise on arrays) -----------------------------------------


def _p(r, prm: SchemeParams):
    out = prm.a * r**prm.gamma
    if prm.delta:
        out = out + prm.delta * r**prm.beta
    return out


def _P(r, prm: SchemeParams):
    out = prm.a / (prm.gamma - 1) * r**prm.gamma
    if prm.delta:
        out = out + prm.delta / (prm.beta - 1) * r**prm.beta
    return out


def _dP(r, prm: SchemeParams):
    out = prm.a * prm.gamma / (prm.gamma - 1) * r ** (prm.gamma - 1)
    if prm.delta:
        out = out + prm.delta * prm.beta / (prm.beta - 1) * r ** (prm.beta - 1)
    return out


def _ddP(r, prm: SchemeParams):
    out = prm.a * prm.gamma * r ** (prm.gamma - 2)
    if prm.delta:
        out = out + prm.delta * prm.beta * r ** (prm.beta - 2)
    return out


def _require_nonnegative(rho: ScalarField) -> None:
    lo = float(np.min(rho.values))
    if lo < 0 or not np.isfinite(lo):
        raise BlowUp(float("nan"), lo, "negative density in pressure evaluation")


def pressure(rho: ScalarField, params: SchemeParams) -> ScalarField:
    """p_delta(rho) = a rho^gamma + delta rho^beta, sampled on the grid."""
    _require_nonnegative(rho)
    return ScalarField.from_values(rho.grid, _p(rho.values, params))


def pressure_potential(rho: ScalarField, params: SchemeParams) -> ScalarField:
    _require_nonnegative(rho)
    return ScalarField.from_values(rho.grid, _P(rho.values, params))


def pressure_potential_derivative(rho: ScalarField, params: SchemeParams) -> ScalarField:
    _require_nonnegative(rho)
    return ScalarField.from_values(rho.grid, _dP(rho.values, params))


def pressure_potential_second(rho: ScalarField, params: SchemeParams) -> ScalarField:
    _require_nonnegative(rho)
    return ScalarField.from_values(rho.grid, _ddP(rho.values, params))


# -- truncation ------------------------------------------------------------------------


def _T(s):
    s = np.asarray(s, dtype=float)
    mid = 1.0 + (s - 1.0) - 0.25 * (s - 1.0) ** 2
    return np.where(s <= 1.0, s, np.where(s >= 3.0, 2.0, mid))


def _dT(s):
    s = np.asarray(s, dtype=float)
    return np.where(s <= 1.0, 1.0, np.where(s >= 3.0, 0.0, 1.0 - 0.5 * (s - 1.0)))


def truncation(z, k: float):
    """T_k(z) = k T(z/k); linear below k, concave quadratic bridge, 2k above 3k."""
    if not k > 0:
        raise ValueError("truncation level k must be positive")
    out = k * _T(np.asarray(z, dtype=float) / k)
    return float(out) if np.ndim(out) == 0 else out


def truncation_derivative(z, k: float):
    if not k > 0:
        raise ValueError("truncation level k must be positive")
    out = _dT(np.asarray(z, dtype=float) / k)
    return float(out) if np.ndim(out) == 0 else out


# -- state -----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GalerkinState:
    t: float
    rho: ScalarField
    u: VectorField
    params: SchemeParams

    def __post_init__(self):
        if self.rho.grid != self.u.grid:
            raise ValueError("rho and u on different grids")
        if self.params.m > self.grid.modes:
            raise ValueError("Galerkin cutoff exceeds the grid's mode budget")

    @property
    def grid(self) -> TorusGrid:
        return self.rho.grid

    @classmethod
    def from_arrays(cls, t, grid, rho_c, u_c, params) -> "GalerkinState":
        return cls(t, ScalarField.from_coeffs(grid, rho_c), VectorField.from_coeffs(grid, u_c), params)

    def galerkin_leak(self) -> float:
        """max |u_k| outside X_m (zero by construction)."""
        mask = self.grid.cutoff_mask(self.params.m)
        return float(np.max(np.abs(np.where(mask, 0.0, self.u.coeffs))))


def uniform_state(grid: TorusGrid, params: SchemeParams, rho0: float = 1.0) -> GalerkinState:
    return GalerkinState(0.0, ScalarField.constant(grid, rho0), VectorField.zeros(grid), params)


def regularize_density(rho: ScalarField, cutoff: int, floor: float) -> ScalarField:
    """Project to |k| <= cutoff, lift to stay above ``floor`` and restore the mass."""
    mass = rho.mean()
    r = project_modes(rho, cutoff).values.copy()
    lo = r.min()
    if lo < floor:
        r += floor - lo
    r *= mass / r.mean()
    return ScalarField.from_values(rho.grid, r)


# -- discretization --------------------------------------------------------------------


@dataclass
class StageEval:
    """Everything computed at one stage (state + driver slope)."""

    rho_transport: np.ndarray  # -div(rho u)
    rho_noise: np.ndarray  # (K, ...) div(rho Q_k)
    rho_eps: np.ndarray  # eps Lap rho
    mom_drift: np.ndarray  # (N, ...) projected drift of rho u
    mom_noise: np.ndarray  # (K, N, ...) projected div(rho u (x) Q_k)
    u_dot: np.ndarray  # (N, ...)
    explicit_rho: np.ndarray  # transport + sum_k noise_k w_k


class Discretization:
    """Precomputed multipliers and the array-level right-hand sides."""

    def __init__(self, grid: TorusGrid, params: SchemeParams, q: QField | None,
                 mass_solver: str = "auto"):
        params.check_dimension(grid.dim)
        if params.m > grid.modes:
            raise ValueError("Galerkin cutoff m exceeds grid modes")
        self.grid = grid
        self.params = params
        self.q = q
        self.K = q.K if q is not None else 0
        if q is not None and q.dim != grid.dim:
            raise ValueError("Q dimension does not match the grid")
        self.n = grid.points
        self.big = 2 * grid.points
        self.kk = grid.odd_wavenumbers
        self.k2 = grid.k2
        self.mask = grid.cutoff_mask(params.m)
        if q is not None and q.is_constant:
            # i Q_k . k, shape (K, ...)
            self.q_symbols = 1j * np.einsum("kd,d...->k...", q.vectors, np.stack(self.kk))
            self.q_pad = None
        elif q is not None:
            self.q_symbols = None
            self.q_pad = np.stack([[backward(pad_coeffs(c.coeffs, self.big)) for c in f]
                                   for f in q.fields])
        else:
            self.q_symbols = None
            self.q_pad = None
        # Galerkin index set for the dense mass matrix
        m = params.m
        rng = np.arange(-m, m + 1)
        modes = np.array(np.meshgrid(*([rng] * grid.dim), indexing="ij")).reshape(grid.dim, -1).T
        self.modes = modes
        self.mode_idx = tuple(np.mod(modes[:, a], self.n) for a in range(grid.dim))
        diff = modes[:, None, :] - modes[None, :, :]
        diff_ok = np.max(np.abs(diff), axis=2) < self.n // 2
        flat = np.ravel_multi_index(tuple(np.mod(diff[..., a], self.n) for a in range(grid.dim)),
                                    grid.shape)
        # out-of-band differences point at an appended zero
        self.diff_flat = np.where(diff_ok, flat, self.n**grid.dim)
        self.mode_flat = np.ravel_multi_index(self.mode_idx, grid.shape)
        # zero-padding maps between the n and 2n cubes
        h = self.n // 2
        src = np.r_[0:h, self.n - h + 1:self.n]
        dst = np.r_[0:h, self.big - h + 1:self.big]
        self.pad_src = np.ravel_multi_index(np.meshgrid(*([src] * grid.dim), indexing="ij"),
                                            grid.shape).ravel()
        self.pad_dst = np.ravel_multi_index(np.meshgrid(*([dst] * grid.dim), indexing="ij"),
                                            (self.big,) * grid.dim).ravel()
        size = len(modes)
        if mass_solver == "auto":
            mass_solver = "dense" if size <= 700 else "cg"
        if mass_solver not in ("dense", "cg"):
            raise ValueError("mass_solver must be 'auto', 'dense' or 'cg'")
        self.mass_solver = mass_solver
        self.pairs = np.triu_indices(grid.dim)
        self.cg_iterations = 0

    # transforms
    def pad(self, c):
        """Coefficients (..., n^N) -> values on the 2n padded grid, batched over leading axes."""
        D = self.grid.dim
        lead = c.shape[:c.ndim - D]
        out = np.zeros(lead + (self.big,) * D, dtype=complex)
        out.reshape(lead + (-1,))[..., self.pad_dst] = c.reshape(lead + (-1,))[..., self.pad_src]
        axes = tuple(range(len(lead), len(lead) + D))
        return sfft.ifftn(out, axes=axes).real * self.big**D

    def unpad(self, v):
        D = self.grid.dim
        lead = v.shape[:v.ndim - D]
        axes = tuple(range(len(lead), len(lead) + D))
        big = sfft.fftn(v, axes=axes) / self.big**D
        out = np.zeros(lead + self.grid.shape, dtype=complex)
        out.reshape(lead + (-1,))[..., self.pad_src] = big.reshape(lead + (-1,))[..., self.pad_dst]
        return out

    def proj(self, c):
        return np.where(self.mask, c, 0.0)

    def d(self, c, axis):
        return 1j * self.kk[axis] * c

    # mass matrix P_m(rho .) restricted to X_m
    def solve_mass(self, rho_c, rho_pad, b, guess=None):
        if self.mass_solver == "dense":
            G = np.append(rho_c.ravel(), 0.0)[self.diff_flat]
            cf = sla.cho_factor(G, lower=False, check_finite=False)
            rhs = b.reshape(len(b), -1)[:, self.mode_flat].T
            sol = sla.cho_solve(cf, rhs, check_finite=False)
            out = np.zeros_like(b)
            out.reshape(len(b), -1)[:, self.mode_flat] = sol.T
            return out
        return self._pcg(rho_pad, b, guess)

    def _pcg(self, rho_pad, b, guess=None, rtol=1e-13, maxiter=500):
        inv_rho = 1.0 / rho_pad

        def A(v):
            return self.proj(self.unpad(rho_pad * self.pad(v)))

        def M(r):
            return self.proj(self.unpad(inv_rho * self.pad(r)))

        out = np.zeros_like(b)
        for i in range(len(b)):
            x = np.zeros_like(b[i]) if guess is None else guess[i].copy()
            r = b[i] - A(x)
            bnorm = np.sqrt(np.sum(np.abs(b[i]) ** 2)) or 1.0
            z = M(r)
            p = z.copy()
            rz = np.vdot(r, z).real
            for it in range(maxiter):
                if np.sqrt(np.sum(np.abs(r) ** 2)) <= rtol * bnorm:
                    break
                Ap = A(p)
                alpha = rz / np.vdot(p, Ap).real
                x = x + alpha * p
                r = r - alpha * Ap
                z = M(r)
                rz_new = np.vdot(r, z).real
                p = z + (rz_new / rz) * p
                rz = rz_new
            self.cg_iterations += it
            out[i] = x
        return out

    def momentum_coeffs(self, rho_pad, u_pad):
        return self.unpad(rho_pad * u_pad)

    def evaluate(self, rho_c, u_c, slope, guess=None, with_noise=True) -> StageEval:
        prm = self.params
        N = self.grid.dim
        padded = self.pad(np.concatenate([rho_c[None], u_c]))
        rho_pad, u_pad = padded[0], padded[1:]
        rho_vals = backward(rho_c)
        # quadratic and cubic products in one batched transform
        iu, ju = self.pairs
        prods = self.unpad(np.concatenate([rho_pad * u_pad, rho_pad * u_pad[iu] * u_pad[ju]]))
        ru = prods[:N]
        ruu = np.empty((N, N) + rho_c.shape, dtype=complex)
        ruu[iu, ju] = prods[N:]
        ruu[ju, iu] = prods[N:]
        # continuity
        transport = -sum(self.d(ru[i], i) for i in range(N))
        rho_eps = -prm.epsilon * self.k2 * rho_c
        if self.K:
            if self.q_symbols is not None:
                rho_noise = self.q_symbols * rho_c
            else:
                rq = self.unpad(rho_pad * self.q_pad)
                rho_noise = sum(self.d(rq[:, j], j) for j in range(N))
        else:
            rho_noise = np.zeros((0,) + rho_c.shape, dtype=complex)
        w = np.asarray(slope, dtype=float) if with_noise else np.zeros(self.K)
        explicit = transport + (np.tensordot(w, rho_noise, axes=1) if self.K else 0.0)
        rho_dot = explicit + rho_eps
        # momentum drift
        drift = np.zeros_like(u_c)
        for i in range(N):
            acc = np.zeros_like(rho_c)
            for j in range(N):
                acc -= self.d(ruu[i, j], j)
            drift[i] = acc
        p_c = forward(_p(rho_vals, prm))
        div_u = sum(self.d(u_c[j], j) for j in range(N))
        c = prm.stress_factor
        for i in range(N):
            drift[i] += (-self.d(p_c, i) - c * prm.mu * self.k2 * u_c[i]
                         + (c * prm.mu + prm.eta) * self.d(div_u, i)
                         - prm.epsilon * self.k2 * ru[i])
        drift = np.stack([self.proj(x) for x in drift])
        if self.K:
            if self.q_symbols is not None:
                mom_noise = self.q_symbols[:, None] * ru[None]
            else:
                ruq = self.unpad(rho_pad * u_pad[None, :, None] * self.q_pad[:, None])
                mom_noise = sum(self.d(ruq[:, :, j], j) for j in range(N))
            mom_noise = np.where(self.mask, mom_noise, 0.0)
            force = drift + np.tensordot(w, mom_noise, axes=1)
        else:
            mom_noise = np.zeros((0,) + u_c.shape, dtype=complex)
            force = drift
        rho_dot_pad = self.pad(rho_dot)
        b = np.where(self.mask, force - self.unpad(u_pad * rho_dot_pad), 0.0)
        u_dot = self.solve_mass(rho_c, rho_pad, b, guess)
        return StageEval(transport, rho_noise, rho_eps, drift, mom_noise, u_dot, explicit)

    def check(self, t, rho_c, u_c, floor):
        vals = backward(rho_c)
        lo = float(np.min(vals))
        if not (np.all(np.isfinite(vals)) and np.all(np.isfinite(u_c))):
            raise BlowUp(t, lo, "non-finite state")
        if lo < floor:
            raise BlowUp(t, lo)
        return lo

    def cfl_number(self, rho_c, u_c) -> float:
        prm = self.params
        vals = backward(rho_c)
        umax = float(np.max(np.abs(backward(u_c)))) if u_c.size else 0.0
        rmin = max(float(np.min(vals)), 1e-300)
        m = prm.m
        visc = (2 * prm.stress_factor * prm.mu + prm.eta) * m * m * self.grid.dim / rmin
        cs = np.sqrt(np.max(np.abs(_dP(np.abs(vals), prm) * (prm.gamma - 1)))) if vals.size else 0.0
        adv = (umax + cs) * m * np.sqrt(self.grid.dim)
        return prm.dt * max(visc, adv)

    def step(self, t, rho_c, u_c, slope, floor, with_noise=True, first: StageEval | None = None):
        """One Heun / Crank-Nicolson step. Returns (rho1, u1, stage0, stage1)."""
        dt = self.params.dt
        eps = self.params.epsilon
        s0 = first if first is not None else self.evaluate(rho_c, u_c, slope, with_noise=with_noise)
        rho_star = (rho_c + dt * s0.explicit_rho) / (1.0 + eps * self.k2 * dt)
        u_star = u_c + dt * s0.u_dot
        self.check(t + dt, rho_star, u_star, floor)
        s1 = self.evaluate(rho_star, u_star, slope, guess=s0.u_dot, with_noise=with_noise)
        num = rho_c + 0.5 * dt * (s0.explicit_rho + s1.explicit_rho) - 0.5 * dt * eps * self.k2 * rho_c
        rho1 = num / (1.0 + 0.5 * eps * self.k2 * dt)
        # keep the mean bit-exact
        rho1.flat[0] = rho_c.flat[0]
        u1 = u_c + 0.5 * dt * (s0.u_dot + s1.u_dot)
        u1 = np.where(self.mask, u1, 0.0)
        self.check(t + dt, rho1, u1, floor)
        return rho1, u1, s0, s1


def default_floor(rho0: ScalarField, params: SchemeParams) -> float:
    if params.density_floor is not None:
        return params.density_floor
    return 1e-8 * rho0.mean()


# -- field-level operations --------------------------------------------------------


def stress_divergence(u: VectorField, params: SchemeParams) -> VectorField:
    """div S(u) = c mu Lap u + (c mu + eta) grad div u."""
    g = u.grid
    c = params.stress_factor
    div_c = sum(1j * g.odd_wavenumbers[j] * u[j].coeffs for j in range(g.dim))
    comps = [-c * params.mu * g.k2 * u[i].coeffs + (c * params.mu + params.eta)
             * 1j * g.odd_wavenumbers[i] * div_c for i in range(g.dim)]
    return VectorField.from_coeffs(g, comps)


def _slope_array(q: QField | None, dW) -> np.ndarray:
    K = q.K if q is not None else 0
    w = np.zeros(K) if dW is None else np.atleast_1d(np.asarray(dW, dtype=float))
    if len(w) != K:
        raise ValueError(f"driver slope has {len(w)} components, Q has {K}")
    return w


def rhs_continuity(state: GalerkinState, q: QField | None, dW=None) -> ScalarField:
    """-div(rho u) + eps Lap rho + sum_k div(rho Q_k) dW_k."""
    disc = Discretization(state.grid, state.params, q)
    w = _slope_array(q, dW)
    rho_c = state.rho.coeffs
    u_c = state.u.coeffs
    N = state.grid.dim
    ru = disc.momentum_coeffs(disc.pad(rho_c), np.stack([disc.pad(c) for c in u_c]))
    out = -sum(disc.d(ru[i], i) for i in range(N)) - state.params.epsilon * disc.k2 * rho_c
    if disc.K:
        if disc.q_symbols is not None:
            noise = disc.q_symbols * rho_c
        else:
            rp = disc.pad(rho_c)
            noise = np.stack([sum(disc.d(disc.unpad(rp * disc.q_pad[k, j]), j) for j in range(N))
                              for k in range(disc.K)])
        out = out + np.tensordot(w, noise, axes=1)
    return ScalarField.from_coeffs(state.grid, out)


def rhs_momentum(state: GalerkinState, q: QField | None, dW=None) -> VectorField:
    """P_m of the full momentum forcing (time derivative of rho u)."""
    disc = Discretization(state.grid, state.params, q)
    w = _slope_array(q, dW)
    ev = disc.evaluate(state.rho.coeffs, state.u.coeffs, w)
    force = ev.mom_drift + (np.tensordot(w, ev.mom_noise, axes=1) if disc.K else 0.0)
    return VectorField.from_coeffs(state.grid, force)


def time_derivatives(state: GalerkinState, q: QField | None, dW=None):
    """(d rho/dt, du/dt) of the semi-discrete system."""
    disc = Discretization(state.grid, state.params, q)
    w = _slope_array(q, dW)
    ev = disc.evaluate(state.rho.coeffs, state.u.coeffs, w)
    return (ScalarField.from_coeffs(state.grid, ev.explicit_rho + ev.rho_eps),
            VectorField.from_coeffs(state.grid, ev.u_dot))


def step(state: GalerkinState, q: QField | None, driver: DriverPath | None = None,
         slope=None, with_noise: bool = True) -> GalerkinState:
    """Advance one step of size params.dt.

    The driver slope over [t, t + dt] is taken from ``driver`` (secant) unless
    ``slope`` is given directly.
    """
    prm = state.params
    if state.t + prm.dt > prm.T * (1 + 1e-12) + 1e-15:
        raise ValueError("step would pass the final time T")
    disc = Discretization(state.grid, prm, q)
    if slope is None:
        if driver is not None:
            slope = driver.increment(state.t, state.t + prm.dt) / prm.dt
        else:
            slope = np.zeros(disc.K)
    w = _slope_array(q, slope)
    floor = default_floor(state.rho, prm)
    rho1, u1, _, _ = disc.step(state.t, state.rho.coeffs, state.u.coeffs, w, floor,
                               with_noise=with_noise)
    return GalerkinState.from_arrays(state.t + prm.dt, state.grid, rho1, u1, prm)


# -- trajectories ------------------------------------------------------------------


@dataclass
class Trajectory:
    grid: TorusGrid
    params: SchemeParams
    times: np.ndarray  # stored sample times
    rho: np.ndarray  # (J, *shape) values
    u: np.ndarray  # (J, N, *shape) values
    step_times: np.ndarray  # every step node
    slopes: np.ndarray  # (steps, K)
    driver: DriverPath | None
    ledger: "object | None" = None
    probe_modes: np.ndarray | None = None
    probe_V: np.ndarray | None = None  # (J, 1+N, M) at stored times
    probe_D: np.ndarray | None = None  # cumulative drift integrals at stored times
    functionals: np.ndarray | None = None  # (steps+1, P)
    functional_noise: np.ndarray | None = None  # (steps, P) noise-driven increments
    energy_noise: np.ndarray | None = None  # (steps,) E(full step) - E(noise-free step)
    status: str = "completed"
    blowup: BlowUp | None = field(default=None, repr=False)
    cfl_max: float = 0.0
    min_rho: float = float("inf")
    mass: np.ndarray | None = None  # every step node

    def state(self, j: int) -> GalerkinState:
        mask = self.grid.cutoff_mask(self.params.m)
        u_c = [np.where(mask, forward(v), 0.0) for v in self.u[j]]
        return GalerkinState(float(self.times[j]), ScalarField.from_values(self.grid, self.rho[j]),
                             VectorField.from_coeffs(self.grid, u_c), self.params)

    def states(self):
        for j in range(len(self.times)):
            yield self.state(j)

    def __len__(self):
        return len(self.times)


def _probe_values(disc: Discretization, rho_c, u_c, idx):
    rp = disc.pad(rho_c)
    ru = disc.momentum_coeffs(rp, np.stack([disc.pad(c) for c in u_c]))
    return np.concatenate([rho_c[idx][None], np.stack([r[idx] for r in ru])])


def simulate(state0: GalerkinState, q: QField | None, driver: DriverPath | None = None, *,
             stride: int | None = None, ledger: bool = True, probe_modes: np.ndarray | None = None,
             functionals=None, companion: bool = False, mass_solver: str = "auto",
             record_mass: bool = True) -> Trajectory:
    """Integrate from ``state0`` to params.T.

    ``functionals`` is a list of callables ``f(rho_c, u_c) -> float`` recorded at
    every step; with ``companion=True`` each step is repeated from the same state
    with the noise switched off, and the differences of the functionals and of
    the energy are kept as the noise-driven increments.
    """
    from .diagnostics import LedgerAccumulator, energy_arrays

    prm = state0.params
    grid = state0.grid
    disc = Discretization(grid, prm, q, mass_solver=mass_solver)
    steps = prm.steps
    dt = prm.dt
    K = disc.K
    if driver is not None:
        if driver.K != K:
            raise ValueError("driver and Q have different numbers of components")
        if not np.isclose(driver.T, prm.T, rtol=1e-12):
            raise ValueError("driver does not span [0, T]")
        step_nodes = np.linspace(0.0, prm.T, steps + 1)
        # kinks must sit on the step grid for the secant slopes to be exact
        pos = driver.times / dt
        if np.max(np.abs(pos - np.round(pos))) > 1e-6:
            raise ValueError("driver nodes must lie on the time-step grid")
        slopes = np.diff(driver(step_nodes), axis=0) / dt
    else:
        slopes = np.zeros((steps, K))
    if stride is None:
        stride = max(1, steps // 256)
    floor = default_floor(state0.rho, prm)
    rho_c = np.array(state0.rho.coeffs)
    u_c = np.where(disc.mask, state0.u.coeffs, 0.0)
    disc.check(0.0, rho_c, u_c, floor)

    times, rho_s, u_s = [], [], []
    probe_V, probe_D = [], []
    if probe_modes is not None:
        pidx = tuple(np.mod(probe_modes[:, a].astype(int), grid.points) for a in range(grid.dim))
        D = np.zeros((1 + grid.dim, len(probe_modes)), dtype=complex)

    def store(t, rc, uc):
        times.append(t)
        rho_s.append(backward(rc))
        u_s.append(np.stack([backward(c) for c in uc]))
        if probe_modes is not None:
            probe_V.append(_probe_values(disc, rc, uc, pidx))
            probe_D.append(D.copy())

    acc = LedgerAccumulator(disc, dt) if ledger else None
    fvals = [] if functionals else None
    fnoise = [] if (functionals and companion) else None
    enoise = [] if companion else None
    mass = [rho_c.flat[0].real * grid.volume] if record_mass else None
    cfl_max = 0.0
    min_rho = float("inf")
    traj_status = "completed"
    blow = None

    def record_functionals(rc, uc):
        if fvals is not None:
            fvals.append([f(rc, uc) for f in functionals])

    store(0.0, rho_c, u_c)
    record_functionals(rho_c, u_c)
    t = 0.0
    cfl_warned = False

    def drift_probe(ev):
        return np.concatenate([(ev.rho_transport + ev.rho_eps)[pidx][None],
                               np.stack([x[pidx] for x in ev.mom_drift])])

    try:
        node = disc.evaluate(rho_c, u_c, slopes[0] if steps else np.zeros(K))
        if acc is not None:
            acc.add_node(0.0, rho_c, u_c, node, None)
        for n in range(steps):
            w = slopes[n]
            s0 = node
            if n % 16 == 0:
                c = disc.cfl_number(rho_c, u_c)
                cfl_max = max(cfl_max, c)
                if c > 2.0 and not cfl_warned:
                    warnings.warn(f"explicit stability number {c:.3g} > 2 at t={t:.4g}", CFLWarning)
                    cfl_warned = True
            if companion:
                r0, u0, _, _ = disc.step(t, rho_c, u_c, w, floor, with_noise=False)
            rho1, u1, _, _ = disc.step(t, rho_c, u_c, w, floor, first=s0)
            t = (n + 1) * dt
            w_next = slopes[n + 1] if n + 1 < steps else w
            node = disc.evaluate(rho1, u1, w_next, guess=s0.u_dot)
            if acc is not None:
                acc.add_node(t, rho1, u1, node, w)
            if probe_modes is not None:
                D += 0.5 * dt * (drift_probe(s0) + drift_probe(node))
            if companion:
                enoise.append(sum(energy_arrays(disc, rho1, u1)) - sum(energy_arrays(disc, r0, u0)))
                if fnoise is not None:
                    fnoise.append([f(rho1, u1) - f(r0, u0) for f in functionals])
            rho_c, u_c = rho1, u1
            min_rho = min(min_rho, float(np.min(backward(rho_c))))
            if mass is not None:
                mass.append(rho_c.flat[0].real * grid.volume)
            record_functionals(rho_c, u_c)
            if (n + 1) % stride == 0 or n + 1 == steps:
                store(t, rho_c, u_c)
    except BlowUp as exc:
        traj_status = "blowup"
        blow = exc
        log.warning("blow-up: %s", exc)

    traj = Trajectory(
        grid=grid, params=prm, times=np.array(times), rho=np.array(rho_s), u=np.array(u_s),
        step_times=np.linspace(0.0, prm.T, steps + 1), slopes=slopes, driver=driver,
        ledger=acc.finish() if acc is not None else None,
        probe_modes=probe_modes,
        probe_V=np.array(probe_V) if probe_modes is not None else None,
        probe_D=np.array(probe_D) if probe_modes is not None else None,
        functionals=np.array(fvals) if fvals is not None else None,
        functional_noise=np.array(fnoise) if fnoise is not None else None,
        energy_noise=np.array(enoise) if enoise is not None else None,
        status=traj_status, blowup=blow, cfl_max=cfl_max, min_rho=min_rho,
        mass=np.array(mass) if mass is not None else None,
    )
    if blow is not None:
        blow.trajectory = traj
    return traj


def run(config) -> Trajectory:
    """Build everything from a validated RunConfig and integrate.

    A blow-up is re-raised with the partial trajectory attached.
    """
    from .config import build_problem

    prob = build_problem(config)
    traj = simulate(prob.state0, prob.q, prob.driver, stride=prob.stride,
                    probe_modes=prob.probe_modes)
    if traj.blowup is not None:
        raise traj.blowup
    return traj


def with_params(state: GalerkinState, **changes) -> GalerkinState:
    return replace(state, params=replace(state.params, **changes))
