"""Run configuration (strict JSON) and construction of the discrete problem.

Defaults
--------
=============================  ===========================================
grid.dim / m / n               2 / 8 / 32
params.gamma, a, mu, eta       2.0, 1.0, 0.1, 0.1
params.epsilon, delta, beta    0.0, 0.0, 5.0
params.dt, T                   1e-3, 0.5
params.density_floor           1e-8 * mean(rho0)
params.stress_factor           1.0  (S = 2 mu D(u) + eta div u I)
params.flux_lambda             eta
initial.rho_mean               1.0, no perturbation, u = 0
noise.kind                     "none"
noise.p                        2.5
noise.wong_zakai_levels        [4, 8]
noise.ensemble                 1
output.stride                  max(1, steps // 256)
audit.enabled                  true
=============================  ===========================================
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .noise import (
    DriverPath,
    QField,
    TrigDriver,
    make_constant_q,
    make_gradient_q,
    make_streamfunction_q,
    mollify,
    sample_brownian,
    zero_path,
)
from .solver import GalerkinState, SchemeParams, regularize_density
from .spectral import ScalarField, TorusGrid, VectorField, random_field


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridConfig(Strict):
    dim: int = 2
    m: int = 8
    n: int = 32


class ParamsConfig(Strict):
    gamma: float = 2.0
    a: float = 1.0
    mu: float = 0.1
    eta: float = 0.1
    epsilon: float = 0.0
    delta: float = 0.0
    beta: float = 5.0
    dt: float = 1e-3
    T: float = 0.5
    density_floor: float | None = None
    stress_factor: float = 1.0
    flux_lambda: float | None = None


class RandomInit(Strict):
    seed: int = 0
    rho_amplitude: float = 0.0
    u_amplitude: float = 0.0
    cutoff: int = 3


class InitialConfig(Strict):
    rho_mean: float = 1.0
    rho_modes: list[list[float]] = Field(default_factory=list)  # [k..., a_cos, a_sin]
    u_modes: list[list[float]] = Field(default_factory=list)  # [component, k..., a_cos, a_sin]
    random: RandomInit | None = None


class QConfig(Strict):
    type: Literal["constant", "streamfunction", "gradient"] = "constant"
    vectors: list[list[float]] | None = None
    modes: list[list[list[float]]] | None = None  # per k: rows [k..., a_cos, a_sin]


class TrigMode(Strict):
    amp: float
    freq: float
    phase: float = 0.0


class DriverSpec(Strict):
    drift: float = 0.0
    modes: list[TrigMode] = Field(default_factory=list)


class NoiseConfig(Strict):
    kind: Literal["none", "smooth", "brownian"] = "none"
    K: int | None = None
    q: QConfig | None = None
    amplitude: float = 1.0
    drivers: list[DriverSpec] | None = None
    seed: int = 0
    level: int | None = None
    wong_zakai_levels: tuple[int, int] = (4, 8)
    p: float = 2.5
    ensemble: int = 1
    paths: list[int] | None = None
    path_csv: str | None = None  # externally sampled path used instead of Brownian sampling


class ExperimentConfig(Strict):
    theta_exp: float = 0.9
    truncation_k: float = 2.0
    psi_mode: list[float] | None = None  # [k..., a_cos, a_sin]
    remainder_levels: int | None = None
    corrupt_lift: bool = False


class OutputConfig(Strict):
    dir: str = "cnstn_out"
    stride: int | None = None


class AuditConfig(Strict):
    enabled: bool = True
    tolerance: float | None = None


class RunConfig(Strict):
    grid: GridConfig = Field(default_factory=GridConfig)
    params: ParamsConfig = Field(default_factory=ParamsConfig)
    initial: InitialConfig = Field(default_factory=InitialConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)
    output: OutputConfig = Field(default_factory=OutputConfig)
    audit: AuditConfig = Field(default_factory=AuditConfig)
    informative: bool = False

    @model_validator(mode="after")
    def _invariants(self):
        g, p, nz = self.grid, self.params, self.noise
        if g.dim not in (1, 2, 3):
            raise ValueError("grid.dim must be 1, 2 or 3")
        if not p.gamma > g.dim / 2:
            raise ValueError("gamma must exceed N/2")
        if not p.beta > max(4.0, p.gamma):
            raise ValueError("beta must exceed max{4, gamma}")
        if g.m > g.n // 2 - 1:
            raise ValueError("grid.n must be >= 2m+2")
        if nz.kind != "none":
            if nz.q is None:
                raise ValueError("noise.q is required when noise.kind != 'none'")
            if nz.q.type != "constant" and nz.kind == "brownian" and not self.informative:
                raise ValueError("brownian noise requires constant Q")
            if nz.q.type == "gradient" and not self.informative:
                raise ValueError("noise.q.type 'gradient' is not divergence-free; use informative mode")
            if nz.q.type == "streamfunction" and g.dim != 2:
                raise ValueError("stream-function Q requires dim = 2")
            if nz.kind == "smooth" and nz.drivers is None:
                raise ValueError("smooth noise needs noise.drivers")
        if not 2.0 <= nz.p < 3.0:
            raise ValueError("noise.p must lie in [2, 3)")
        if nz.ensemble < 1:
            raise ValueError("noise.ensemble must be >= 1")
        lo, hi = nz.wong_zakai_levels
        if not 0 <= lo <= hi:
            raise ValueError("wong_zakai_levels must satisfy 0 <= n0 <= n1")
        return self

    def scheme_params(self) -> SchemeParams:
        p = self.params
        return SchemeParams(gamma=p.gamma, a=p.a, mu=p.mu, eta=p.eta, epsilon=p.epsilon,
                            delta=p.delta, beta=p.beta, m=self.grid.m, dt=p.dt, T=p.T,
                            density_floor=p.density_floor, stress_factor=p.stress_factor)


class ConfigError(ValueError):
    pass


def parse_config(text: str, informative: bool | None = None) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if informative is not None:
        data["informative"] = informative
    try:
        cfg = RunConfig.model_validate(data)
        cfg.scheme_params().steps  # T must be a multiple of dt
    except ValidationError as exc:
        msgs = "; ".join(f"{'.'.join(map(str, e['loc'])) or 'config'}: {e['msg']}" for e in exc.errors())
        raise ConfigError(msgs) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def resolved_dict(cfg: RunConfig) -> dict:
    return json.loads(cfg.model_dump_json())


# -- problem construction ---------------------------------------------------------------


@dataclass
class Problem:
    grid: TorusGrid
    params: SchemeParams
    q: QField | None
    driver: DriverPath | None
    state0: GalerkinState
    stride: int
    probe_modes: np.ndarray | None = None
    brownian: DriverPath | None = None  # unmollified sample, when relevant


def _trig(grid: TorusGrid, rows) -> np.ndarray:
    x = grid.coords
    out = np.zeros(grid.shape)
    for row in rows:
        *k, ac, as_ = row
        if len(k) != grid.dim:
            raise ConfigError(f"mode row {row} does not match dim {grid.dim}")
        phase = sum(ki * xi for ki, xi in zip(k, x))
        out += ac * np.cos(phase) + as_ * np.sin(phase)
    return out


def build_grid(cfg: RunConfig) -> TorusGrid:
    return TorusGrid(cfg.grid.dim, cfg.grid.m, cfg.grid.n)


def build_q(cfg: RunConfig, grid: TorusGrid) -> QField | None:
    nz = cfg.noise
    if nz.kind == "none":
        return None
    qc = nz.q
    if qc.type == "constant":
        if not qc.vectors:
            raise ConfigError("constant Q needs noise.q.vectors")
        q = make_constant_q(qc.vectors)
        if q.dim != grid.dim:
            raise ConfigError("Q vectors must have grid.dim components")
    elif qc.type == "streamfunction":
        q = make_streamfunction_q(grid, qc.modes or [])
    else:
        q = make_gradient_q(grid, qc.modes or [])
    if nz.K is not None and nz.K != q.K:
        raise ConfigError(f"noise.K = {nz.K} but Q has {q.K} members")
    return q.scaled(nz.amplitude) if nz.amplitude != 1.0 else q


def build_driver(cfg: RunConfig, K: int, seed: int | None = None, index: int = 0,
                 level: int | None = None) -> tuple[DriverPath | None, DriverPath | None]:
    """(driver used by the solver, raw Brownian sample or None)."""
    nz = cfg.noise
    prm = cfg.scheme_params()
    steps = prm.steps
    if nz.kind == "none":
        return None, None
    if nz.kind == "smooth":
        if len(nz.drivers) != K:
            raise ConfigError(f"noise.drivers has {len(nz.drivers)} entries, Q has {K}")
        spec = [d.model_dump() for d in nz.drivers]
        return TrigDriver.from_spec(spec).sample(prm.T, steps + 1), None
    seed = nz.seed if seed is None else seed
    if nz.path_csv is not None:
        ext = DriverPath.from_csv(nz.path_csv)
        if ext.K != K or not np.isclose(ext.T, prm.T) or ext.times[0] != 0.0:
            raise ConfigError("external path must have K components and span [0, T]")
        raw = ext.resample(np.linspace(0.0, prm.T, steps + 1))
    else:
        raw = sample_brownian(K, prm.T, steps, seed, index)
    level = nz.level if level is None else level
    if level is None:
        return raw, raw
    if steps % 2**level:
        raise ConfigError(f"steps ({steps}) must be a multiple of 2**level ({2**level})")
    return mollify(raw, level), raw


def build_initial(cfg: RunConfig, grid: TorusGrid, prm: SchemeParams) -> GalerkinState:
    ini = cfg.initial
    rho = np.full(grid.shape, ini.rho_mean) + _trig(grid, ini.rho_modes)
    u = np.zeros((grid.dim,) + grid.shape)
    for row in ini.u_modes:
        comp = int(row[0])
        if not 0 <= comp < grid.dim:
            raise ConfigError(f"velocity component {comp} out of range")
        u[comp] += _trig(grid, [row[1:]])
    if ini.random is not None:
        r = ini.random
        from .noise import stream_generator

        gen = stream_generator(r.seed, 0, 10_000)
        rho += random_field(grid, gen, cutoff=r.cutoff, amplitude=r.rho_amplitude).values
        for i in range(grid.dim):
            u[i] += random_field(grid, gen, cutoff=r.cutoff, amplitude=r.u_amplitude).values
    rho_f = ScalarField.from_values(grid, rho)
    floor = prm.density_floor if prm.density_floor is not None else 1e-8 * rho_f.mean()
    # regularized data: modes |k| <= m, kept above a margin over the floor, same mass
    rho_f = regularize_density(rho_f, prm.m, max(10 * floor, 1e-3 * rho_f.mean()))
    mask = grid.cutoff_mask(prm.m)
    u_f = VectorField.from_coeffs(grid, [np.where(mask, np.fft.fftn(c) / c.size, 0.0) for c in u])
    return GalerkinState(0.0, rho_f, u_f, prm)


def build_problem(cfg: RunConfig, seed: int | None = None, index: int = 0,
                  level: int | None = None, probe_modes: np.ndarray | None = None) -> Problem:
    grid = build_grid(cfg)
    prm = cfg.scheme_params()
    q = build_q(cfg, grid)
    driver, raw = build_driver(cfg, q.K if q is not None else 0, seed, index, level)
    state0 = build_initial(cfg, grid, prm)
    stride = cfg.output.stride or max(1, prm.steps // 256)
    return Problem(grid, prm, q, driver, state0, stride, probe_modes, raw)
