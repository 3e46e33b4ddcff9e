"""Energy ledger and the other analytic identities, as post-processing audits.

Sign conventions of the ledger: every cumulative term is the amount that
leaves the energy, so for an exact solution

    E(t) - E(0) + dissipation + eps_term + eps_cross + noise = 0

with noise = -int_0^t sum_k W'_k int p(rho) div Q_k (the only noise work that
survives once the transport terms cancel).
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .noise import QField
from .solver import (
    Discretization,
    GalerkinState,
    SchemeParams,
    Trajectory,
    _ddP,
    _dP,
    _P,
    _p,
    truncation,
)
from .spectral import ScalarField, backward, forward, riesz_double

LEDGER_SCHEMA = "ledger/1.0"
LEDGER_COLUMNS = ["t", "kinetic", "potential", "dissipation_cum", "eps_term_cum",
                  "eps_cross_cum", "noise_cum", "residual"]


# -- array-level energy terms --------------------------------------------------------


def _padded_mean(disc: Discretization, arr) -> float:
    return float(np.mean(arr)) * disc.grid.volume


def energy_arrays(disc: Discretization, rho_c, u_c) -> tuple[float, float]:
    """(kinetic, potential); kinetic exact via the 2n grid, potential on the native grid."""
    rho_pad = disc.pad(rho_c)
    u2 = sum(disc.pad(c) ** 2 for c in u_c)
    kinetic = 0.5 * _padded_mean(disc, rho_pad * u2)
    rho_vals = backward(rho_c)
    potential = float(np.mean(_P(rho_vals, disc.params))) * disc.grid.volume
    return kinetic, potential


def node_rates(disc: Discretization, rho_c, u_c, ev=None) -> dict:
    """Instantaneous ledger rates at one state.

    ``noise`` holds, per k, the assembled noise work
    int P'(rho) div(rho Q_k) - 1/2 int |u|^2 div(rho Q_k) + int u . div(rho u (x) Q_k).
    """
    prm = disc.params
    N = disc.grid.dim
    vol = disc.grid.volume
    grads = [[backward(disc.d(u_c[i], j)) for j in range(N)] for i in range(N)]
    div_u = sum(grads[i][i] for i in range(N))
    c = prm.stress_factor
    sym2 = 0.0
    for i in range(N):
        for j in range(N):
            dij = 0.5 * (grads[i][j] + grads[j][i])
            sym2 = sym2 + dij * dij
    diss = float(np.mean(2 * c * prm.mu * sym2 + prm.eta * div_u**2)) * vol
    rho_vals = backward(rho_c)
    if prm.epsilon:
        grad_rho2 = sum(backward(disc.d(rho_c, j)) ** 2 for j in range(N))
        eps_term = prm.epsilon * float(np.mean(_ddP(rho_vals, prm) * grad_rho2)) * vol
        rho_pad = disc.pad(rho_c)
        gu2 = sum(disc.pad(disc.d(u_c[i], j)) ** 2 for i in range(N) for j in range(N))
        eps_cross = prm.epsilon * _padded_mean(disc, rho_pad * gu2)
    else:
        eps_term = 0.0
        eps_cross = 0.0
    noise = np.zeros(disc.K)
    if disc.K:
        if ev is None:
            ev = disc.evaluate(rho_c, u_c, np.zeros(disc.K))
        dP = _dP(rho_vals, prm)
        u_pad = [disc.pad(cc) for cc in u_c]
        u2 = sum(up**2 for up in u_pad)
        for k in range(disc.K):
            a = float(np.mean(dP * backward(ev.rho_noise[k]))) * vol
            b = -0.5 * _padded_mean(disc, u2 * disc.pad(ev.rho_noise[k]))
            cc = sum(float(np.mean(backward(u_c[i]) * backward(ev.mom_noise[k, i]))) for i in range(N)) * vol
            noise[k] = a + b + cc
    return {"diss": diss, "eps_term": eps_term, "eps_cross": eps_cross, "noise": noise}


def pressure_work_rates(disc: Discretization, rho_c) -> np.ndarray:
    """Per k: int p(rho) div Q_k (zero for divergence-free Q)."""
    if not disc.K:
        return np.zeros(0)
    p_vals = _p(backward(rho_c), disc.params)
    if disc.q is not None and disc.q.is_constant:
        return np.zeros(disc.K)
    out = []
    for qf in disc.q.fields:
        divq = sum(backward(disc.d(qf[j].coeffs, j)) for j in range(disc.grid.dim))
        out.append(float(np.mean(p_vals * divq)) * disc.grid.volume)
    return np.array(out)


@dataclass
class EnergyLedger:
    t: np.ndarray
    kinetic: np.ndarray
    potential: np.ndarray
    dissipation_cum: np.ndarray
    eps_term_cum: np.ndarray
    eps_cross_cum: np.ndarray
    noise_cum: np.ndarray
    pressure_work_cum: np.ndarray | None = None  # -int sum_k W'_k int p div Q_k
    min_rates: dict | None = None

    @property
    def energy(self) -> np.ndarray:
        return self.kinetic + self.potential

    @property
    def residual(self) -> np.ndarray:
        return (self.energy - self.energy[0] + self.dissipation_cum + self.eps_term_cum
                + self.eps_cross_cum + self.noise_cum)

    def columns(self) -> dict[str, np.ndarray]:
        return {"t": self.t, "kinetic": self.kinetic, "potential": self.potential,
                "dissipation_cum": self.dissipation_cum, "eps_term_cum": self.eps_term_cum,
                "eps_cross_cum": self.eps_cross_cum, "noise_cum": self.noise_cum,
                "residual": self.residual}

    def nonnegative(self, tol: float = 0.0) -> bool:
        """kinetic, potential and the dissipative increments are all >= -tol."""
        ok = np.all(self.kinetic >= -tol) and np.all(self.potential >= -tol)
        for arr in (self.dissipation_cum, self.eps_term_cum, self.eps_cross_cum):
            ok = ok and np.all(np.diff(arr) >= -tol) and arr[0] == 0.0
        return bool(ok)

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write(f"# schema: {LEDGER_SCHEMA}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        cols = self.columns()
        for j in range(len(self.t)):
            w.writerow([repr(float(cols[c][j])) for c in LEDGER_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


class LedgerAccumulator:
    """Trapezoidal accumulation of the ledger rates on the solver's step grid."""

    def __init__(self, disc: Discretization, dt: float):
        self.disc = disc
        self.dt = dt
        self.rows = []
        self.prev = None
        self.cum = dict(diss=0.0, eps_term=0.0, eps_cross=0.0, noise=0.0, pwork=0.0)

    def add_node(self, t, rho_c, u_c, ev, w_prev):
        kin, pot = energy_arrays(self.disc, rho_c, u_c)
        rates = node_rates(self.disc, rho_c, u_c, ev)
        rates["pwork"] = pressure_work_rates(self.disc, rho_c)
        if self.prev is not None:
            h = 0.5 * self.dt
            p = self.prev
            for key in ("diss", "eps_term", "eps_cross"):
                self.cum[key] += h * (p[key] + rates[key])
            w = np.asarray(w_prev, dtype=float)
            self.cum["noise"] -= h * float(np.dot(w, p["noise"] + rates["noise"]))
            self.cum["pwork"] -= h * float(np.dot(w, p["pwork"] + rates["pwork"]))
        self.prev = rates
        self.rows.append((t, kin, pot, self.cum["diss"], self.cum["eps_term"],
                          self.cum["eps_cross"], self.cum["noise"], self.cum["pwork"]))

    def finish(self) -> EnergyLedger:
        a = np.array(self.rows, dtype=float).reshape(-1, 8)
        return EnergyLedger(*[a[:, i] for i in range(7)], pressure_work_cum=a[:, 7])


# -- public audits ------------------------------------------------------------------------


def _disc_for(state: GalerkinState, q: QField | None = None) -> Discretization:
    return Discretization(state.grid, state.params, q)


def energy(state: GalerkinState) -> tuple[float, float]:
    return energy_arrays(_disc_for(state), state.rho.coeffs, state.u.coeffs)


def energy_audit(traj: Trajectory, q: QField | None = None) -> EnergyLedger:
    """Ledger of a trajectory.

    Returns the step-resolution ledger recorded during the run when present;
    otherwise rebuilds it from the stored samples (trapezoid on the sample
    grid, driver slope averaged over each sample interval).
    """
    if traj.ledger is not None:
        return traj.ledger
    disc = Discretization(traj.grid, traj.params, q)
    acc = LedgerAccumulator(disc, 0.0)
    step_idx = np.rint(traj.times / traj.params.dt).astype(int)
    K = disc.K
    for j, st in enumerate(traj.states()):
        rho_c, u_c = st.rho.coeffs, np.where(disc.mask, st.u.coeffs, 0.0)
        ev = disc.evaluate(rho_c, u_c, np.zeros(K)) if K else None
        if j:
            acc.dt = traj.times[j] - traj.times[j - 1]
            w = (traj.slopes[step_idx[j - 1]:step_idx[j]].mean(axis=0) if K else np.zeros(0))
        else:
            w = None
        acc.add_node(st.t, rho_c, u_c, ev, w)
    return acc.finish()


def mass_momentum(state: GalerkinState) -> tuple[float, np.ndarray]:
    g = state.grid
    mass = g.volume * state.rho.mean()
    disc = _disc_for(state)
    ru = disc.momentum_coeffs(disc.pad(state.rho.coeffs), disc.pad(state.u.coeffs))
    mom = np.array([g.volume * r.flat[0].real for r in ru])
    return float(mass), mom


def _trapezoid(y, x) -> float:
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return 0.0
    return float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x)))


def admissible_theta(dim: int, gamma: float) -> float:
    """Upper end of the higher-integrability range, 2 gamma / N - 1."""
    return 2.0 * gamma / dim - 1.0


def pressure_weight(traj: Trajectory, theta_exp: float) -> float:
    """int_0^T int p_delta(rho) rho^Theta by trapezoid over the stored samples."""
    hi = admissible_theta(traj.grid.dim, traj.params.gamma)
    if not 0 < theta_exp < hi:
        warnings.warn(f"Theta={theta_exp} outside (0, {hi:.4g})", RuntimeWarning)
    vol = traj.grid.volume
    vals = [float(np.mean(_p(r, traj.params) * r**theta_exp)) * vol for r in traj.rho]
    return _trapezoid(vals, traj.times)


@dataclass
class FluxPairSeries:
    t: np.ndarray
    value: np.ndarray
    k: float


def flux_pair(traj: Trajectory, k: float, lam: float | None = None) -> FluxPairSeries:
    """int (p_delta(rho) - (lam + 2 mu) div u) T_k(rho); lam defaults to eta."""
    prm = traj.params
    lam = prm.eta if lam is None else lam
    vals = []
    for st in traj.states():
        div_u = sum(backward(1j * st.grid.odd_wavenumbers[j] * st.u[j].coeffs)
                    for j in range(st.grid.dim))
        r = st.rho.values
        integrand = (_p(r, prm) - (lam + 2 * prm.mu) * div_u) * truncation(r, k)
        vals.append(float(np.mean(integrand)) * st.grid.volume)
    return FluxPairSeries(traj.times.copy(), np.array(vals), k)


def commutator_J5(state: GalerkinState, q: QField) -> float:
    """sum_k sum_ij int u_i (rho R_ij[rho Q_jk] - rho Q_jk R_ij[rho]), R_ij = d_i d_j Lap^-1."""
    g = state.grid
    N = g.dim
    rho = state.rho
    qv = q.on_grid(g)
    total = 0.0
    R_rho = [[riesz_double(rho, i, j).values for j in range(N)] for i in range(N)]
    for k in range(q.K):
        for j in range(N):
            rq = ScalarField.from_values(g, rho.values * qv[k, j])
            for i in range(N):
                term = rho.values * riesz_double(rq, i, j).values - rq.values * R_rho[i][j]
                total += float(np.mean(state.u[i].values * term)) * g.volume
    return total


def commutator_bound(state: GalerkinState, q: QField) -> float:
    """||u||_2 ||rho||_4^2 ||Q||_{W^{1,inf}}."""
    g = state.grid
    u2 = np.sqrt(np.sum(state.u.values**2) * g.cell_volume)
    r4 = (np.sum(state.rho.values**4) * g.cell_volume) ** 0.25
    return float(u2 * r4**2 * q.w1inf_norm())


@dataclass
class RhoLogRho:
    t: np.ndarray
    value: np.ndarray
    residual: np.ndarray


def rho_log_rho(traj: Trajectory) -> RhoLogRho:
    """int rho ln rho and the balance int_0^t int rho div u + [int rho ln rho]_0^t."""
    vol = traj.grid.volume
    vals, work = [], []
    for st in traj.states():
        r = st.rho.values
        if np.min(r) <= 0:
            raise ValueError(f"density not positive at t={st.t}")
        vals.append(float(np.mean(r * np.log(r))) * vol)
        div_u = sum(backward(1j * st.grid.odd_wavenumbers[j] * st.u[j].coeffs)
                    for j in range(st.grid.dim))
        work.append(float(np.mean(r * div_u)) * vol)
    vals = np.array(vals)
    work = np.array(work)
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (work[1:] + work[:-1]) * np.diff(traj.times))])
    return RhoLogRho(traj.times.copy(), vals, cum + vals - vals[0])


def renorm_residual(traj: Trajectory, theta, dtheta, psi: ScalarField,
                    q: QField | None = None, theta_support: float | None = None) -> np.ndarray:
    """Residual of the renormalized continuity equation tested against ``psi``.

    R(t) = [int theta(rho) psi]_0^t - int_0^t ( int theta(rho) u.grad psi
           + int (theta(rho) - theta'(rho) rho) div u psi
           - sum_k W'_k int theta(rho) Q_k.grad psi ).
    The eps-terms are left out, so R = O(eps + sampling dt^2).
    """
    if theta_support is None:
        warnings.warn("theta' support not declared; compact support is assumed", RuntimeWarning)
    g = traj.grid
    N = g.dim
    vol = g.volume
    grad_psi = [backward(1j * g.odd_wavenumbers[j] * psi.coeffs) for j in range(N)]
    psi_v = psi.values
    K = q.K if q is not None else 0
    qv = q.on_grid(g) if K else None
    step_idx = np.rint(traj.times / traj.params.dt).astype(int)
    level, flux, noise = [], [], []
    for st in traj.states():
        r = st.rho.values
        th = theta(r)
        u = st.u.values
        div_u = sum(backward(1j * g.odd_wavenumbers[j] * st.u[j].coeffs) for j in range(N))
        level.append(float(np.mean(th * psi_v)) * vol)
        f = float(np.mean(th * sum(u[j] * grad_psi[j] for j in range(N))
                          + (th - dtheta(r) * r) * div_u * psi_v)) * vol
        flux.append(f)
        if K:
            noise.append([float(np.mean(th * sum(qv[k, j] * grad_psi[j] for j in range(N)))) * vol
                          for k in range(K)])
    level = np.array(level)
    flux = np.array(flux)
    dts = np.diff(traj.times)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (flux[1:] + flux[:-1]) * dts)])
    if K:
        noise = np.array(noise)
        for j in range(1, len(traj.times)):
            w = traj.slopes[step_idx[j - 1]:step_idx[j]].mean(axis=0)
            integral[j:] -= 0.5 * dts[j - 1] * float(np.dot(w, noise[j - 1] + noise[j]))
    return level - level[0] - integral


def jensen_gap(traj: Trajectory) -> np.ndarray:
    """int rho ln rho - M ln(M/|T^N|) per sample; nonnegative by convexity."""
    vol = traj.grid.volume
    out = []
    for r in traj.rho:
        M = float(np.mean(r)) * vol
        out.append(float(np.mean(r * np.log(r))) * vol - M * np.log(M / vol))
    return np.array(out)


@dataclass
class AuditSummary:
    mass_drift: float
    max_abs_residual: float
    final_residual: float
    nonnegative: bool
    jensen_ok: bool
    status: str

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def audit_trajectory(traj: Trajectory, q: QField | None = None, tolerance: float | None = None) -> tuple[AuditSummary, str]:
    """Pass/warn/fail over the cheap trajectory invariants."""
    led = energy_audit(traj, q)
    res = led.residual
    e0 = max(abs(led.energy[0]), 1e-300)
    tol = tolerance if tolerance is not None else 10.0 * traj.params.dt * e0
    mass = traj.mass if traj.mass is not None else np.array(
        [float(np.mean(r)) * traj.grid.volume for r in traj.rho])
    drift = float(np.max(np.abs(mass - mass[0])) / abs(mass[0]))
    jensen = bool(np.all(jensen_gap(traj) >= -1e-10 * e0))
    nonneg = led.nonnegative(tol=1e-14 * e0)
    summary = AuditSummary(drift, float(np.max(np.abs(res))), float(res[-1]), nonneg, jensen,
                           traj.status)
    if drift > 1e-11 or not nonneg or not jensen:
        verdict = "fail"
    elif summary.max_abs_residual > tol:
        verdict = "fail"
    else:
        verdict = "pass"
    return summary, verdict


__all__ = [
    "EnergyLedger", "FluxPairSeries", "RhoLogRho", "LedgerAccumulator", "energy", "energy_arrays",
    "energy_audit", "mass_momentum", "pressure_weight", "flux_pair", "commutator_J5",
    "commutator_bound", "rho_log_rho", "renorm_residual", "jensen_gap", "audit_trajectory",
    "admissible_theta", "node_rates", "SchemeParams",
]
