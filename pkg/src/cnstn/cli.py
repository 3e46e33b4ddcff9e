"""Command line entry point: ``cnstn <command> --config FILE [--out DIR] [--seed N] [--informative]``.

Exit codes: 0 success, 1 configuration error, 2 numerical blow-up,
3 invariant or audit failure.  ``CNSTN_WORKERS`` sets the number of worker
processes for ensemble commands (default 1).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, build_problem, parse_config, resolved_dict
from .diagnostics import (
    energy as energy_parts,
    audit_trajectory,
    commutator_bound,
    commutator_J5,
    flux_pair,
    pressure_weight,
    renorm_residual,
    rho_log_rho,
)
from .io import blob_hash, canonical_json, read_checkpoint, write_checkpoint, write_table
from .noise import lift_geometric
from .roughpath import (
    chen_defect,
    driver_norms,
    fit_scaling_exponent,
    probe_modes,
    remainder_table,
)
from .solver import BlowUp, Trajectory, simulate, truncation, truncation_derivative
from .spectral import ScalarField
from .stratonovich import (
    correction_sample,
    ensemble_stat,
    noise_energy_contribution,
    probe_functional,
    stratonovich_integral,
    ito_integral,
)

log = logging.getLogger("cnstn")

EXIT_OK, EXIT_CONFIG, EXIT_BLOWUP, EXIT_AUDIT = 0, 1, 2, 3
WORKERS_ENV = "CNSTN_WORKERS"
TRAJ_SCHEMA = "trajectory/1.0"


def workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


class Report:
    """Summary JSON shared by every command."""

    def __init__(self, command: str, cfg: RunConfig):
        resolved = resolved_dict(cfg)
        self.data = {
            "command": command,
            "version": __version__,
            "config": resolved,
            "config_hash": blob_hash(canonical_json(resolved).encode()),
        }

    def __setitem__(self, key, value):
        self.data[key] = value

    def write(self, out: Path, exit_code: int) -> None:
        self.data["exit_code"] = exit_code
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(_jsonable(self.data), indent=2, sort_keys=True))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else str(f)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# -- trajectory persistence ------------------------------------------------------------


def save_trajectory(traj: Trajectory, out: Path, config_hash: str) -> None:
    led = traj.ledger
    arrays = {
        "times": traj.times,
        "rho": np.stack([np.fft.fftn(r) / r.size for r in traj.rho]),
        "u": np.stack([[np.fft.fftn(c) / c.size for c in u] for u in traj.u]),
        "step_times": traj.step_times,
        "slopes": traj.slopes,
    }
    if traj.mass is not None:
        arrays["mass"] = traj.mass
    if led is not None:
        for name, col in led.columns().items():
            if name != "residual":
                arrays["ledger_" + name] = col
    header = {"config_hash": config_hash, "status": traj.status, "grid": list(traj.grid.shape),
              "dim": traj.grid.dim, "modes": traj.grid.modes, "points": traj.grid.points,
              "params": {k: v for k, v in traj.params.__dict__.items()}}
    write_checkpoint(out / "trajectory", header, arrays)


def load_trajectory(out: Path, cfg: RunConfig) -> Trajectory:
    from .diagnostics import EnergyLedger
    from .spectral import TorusGrid

    header, arr = read_checkpoint(out / "trajectory")
    grid = TorusGrid(header["dim"], header["modes"], header["points"])
    prm = cfg.scheme_params()
    rho = np.stack([np.real(np.fft.ifftn(c * c.size)) for c in arr["rho"]])
    u = np.stack([[np.real(np.fft.ifftn(c * c.size)) for c in uu] for uu in arr["u"]])
    ledger = None
    if "ledger_t" in arr:
        ledger = EnergyLedger(arr["ledger_t"], arr["ledger_kinetic"], arr["ledger_potential"],
                              arr["ledger_dissipation_cum"], arr["ledger_eps_term_cum"],
                              arr["ledger_eps_cross_cum"], arr["ledger_noise_cum"])
    return Trajectory(grid=grid, params=prm, times=arr["times"], rho=rho, u=u,
                      step_times=arr["step_times"], slopes=arr["slopes"], driver=None,
                      ledger=ledger, status=header["status"], mass=arr.get("mass"))


def write_series(traj: Trajectory, out: Path) -> None:
    rows = []
    vol = traj.grid.volume
    for j, r in enumerate(traj.rho):
        rows.append([float(traj.times[j]), float(np.mean(r)) * vol, float(np.min(r)),
                     float(np.max(r)), float(np.sqrt(np.mean(np.sum(traj.u[j] ** 2, axis=0))))])
    write_table(out / "trajectory.csv", TRAJ_SCHEMA, ["t", "mass", "rho_min", "rho_max", "u_rms"], rows)


# -- commands --------------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path, report: Report) -> int:
    prob = build_problem(cfg)
    traj = simulate(prob.state0, prob.q, prob.driver, stride=prob.stride)
    out.mkdir(parents=True, exist_ok=True)
    if traj.ledger is not None:
        traj.ledger.to_csv(out / "ledger.csv")
    write_series(traj, out)
    report["cfl_max"] = traj.cfl_max
    report["status"] = traj.status
    if traj.blowup is not None:
        report["blowup"] = {"t": traj.blowup.t, "min_rho": traj.blowup.min_rho,
                            "reason": traj.blowup.reason}
        return EXIT_BLOWUP
    save_trajectory(traj, out, report.data["config_hash"])
    summary, verdict = audit_trajectory(traj, prob.q, cfg.audit.tolerance)
    report["audit"] = {**summary.as_dict(), "verdict": verdict, "enabled": cfg.audit.enabled}
    if cfg.noise.q is not None and cfg.noise.q.type == "gradient":
        report["audit"]["note"] = "Q is not divergence-free: noise work does not cancel (expected)"
    if cfg.audit.enabled and verdict == "fail":
        return EXIT_AUDIT
    return EXIT_OK


def _distance_l1(a: np.ndarray, b: np.ndarray, vol: float) -> float:
    axes = tuple(range(1, a.ndim))
    return float(np.max(np.mean(np.abs(a - b), axis=axes))) * vol


def cmd_wongzakai(cfg: RunConfig, out: Path, report: Report) -> int:
    if cfg.noise.kind != "brownian":
        raise ConfigError("wongzakai requires noise.kind = 'brownian'")
    n0, n1 = cfg.noise.wong_zakai_levels
    steps = cfg.scheme_params().steps
    if steps % 2 ** (n1 + 1):
        raise ConfigError(f"steps ({steps}) must be a multiple of 2**(n1+1) = {2 ** (n1 + 1)}")
    # every step node: with constant Q the solution tracks W(t) pointwise, so
    # sampling only at coarse dyadic nodes would hide the mollification error
    stride = 1
    results = {}
    for level in range(n0, n1 + 2):
        prob = build_problem(cfg, level=level)
        traj = simulate(prob.state0, prob.q, prob.driver, stride=stride, ledger=False)
        results[level] = traj
    levels = list(results)
    d_rho, d_u, failed = [], [], [lv for lv, tr in results.items() if tr.status != "completed"]
    vol = results[levels[0]].grid.volume
    for a, b in zip(levels[:-1], levels[1:]):
        ta, tb = results[a], results[b]
        if ta.status != "completed" or tb.status != "completed":
            d_rho.append(float("nan"))
            d_u.append(float("nan"))
            continue
        d_rho.append(_distance_l1(ta.rho, tb.rho, vol))
        d_u.append(_distance_l1(np.abs(ta.u - tb.u).sum(axis=1), 0.0, vol))
    ratios = [d_rho[i + 1] / d_rho[i] if d_rho[i] > 0 else float("nan") for i in range(len(d_rho) - 1)]
    decreasing = int(sum(1 for i in range(len(d_rho) - 1) if d_rho[i + 1] < d_rho[i]))
    identical = all(d == 0.0 for d in d_rho)
    ok = identical or decreasing >= max(len(ratios) - 1, 1)
    report.data.update({"levels": levels[:-1], "d_rho": d_rho, "d_u": d_u, "ratios": ratios,
                        "decreasing": decreasing, "failed_levels": failed, "pass": ok})
    if cfg.audit.enabled and not ok:
        return EXIT_AUDIT
    return EXIT_OK


def remainder_run(cfg: RunConfig, level: int, dt: float | None = None, seed: int | None = None,
                  index: int = 0, corrupt: bool = False):
    """Simulate at one Wong-Zakai level and tabulate the rough remainder."""
    if dt is not None:
        cfg = cfg.model_copy(update={"params": cfg.params.model_copy(update={"dt": dt})})
    steps = cfg.scheme_params().steps
    if steps % 2**level:
        raise ConfigError(f"steps ({steps}) must be a multiple of 2**level ({2 ** level})")
    if cfg.grid.m < 3:
        raise ConfigError("the remainder test family |kappa| <= 3 needs m >= 3")
    modes = probe_modes(cfg.grid.dim, 3)
    noisy = cfg.noise.kind != "none"
    prob = build_problem(cfg, seed=seed, index=index, level=level if noisy else None,
                         probe_modes=modes)
    traj = simulate(prob.state0, prob.q, prob.driver, stride=steps // 2**level,
                    probe_modes=modes, ledger=False)
    if traj.blowup is not None:
        raise traj.blowup
    if prob.driver is not None:
        lift = lift_geometric(prob.driver.resample(traj.times))
    else:
        from .noise import zero_path

        lift = lift_geometric(zero_path(1, cfg.params.T, 2**level))
    if corrupt:
        second = lift.second.copy()
        second[0, -1, 0, 0] += 0.1
        lift = lift.with_second(second)
    scale = float(np.max(np.abs(traj.probe_V))) or 1.0
    table = remainder_table(traj.times, traj.probe_V, traj.probe_D, prob.q, lift, modes,
                            levels=cfg.experiment.remainder_levels, roundoff=1e-13 * scale)
    return prob, traj, lift, table


def cmd_roughcheck(cfg: RunConfig, out: Path, report: Report, seed: int | None = None) -> int:
    nz = cfg.noise
    if nz.kind != "none" and nz.q.type != "constant":
        raise ConfigError("roughcheck requires constant Q")
    level = nz.level if nz.level is not None else nz.wong_zakai_levels[1]
    prob, traj, lift, table = remainder_run(cfg, level, seed=seed,
                                            corrupt=cfg.experiment.corrupt_lift)
    chen = chen_defect(lift)
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "remainder.csv")
    threshold = 3.0 / nz.p - 0.15
    fit = fit_scaling_exponent(table)
    res = {"chen_defect": chen, "level": level, "threshold": threshold,
           "exponent": fit.slope, "fit_residual": fit.residual,
           "flagged_windows": int(np.sum(table.flagged))}
    if prob.q is not None:
        norms = driver_norms(prob.q, lift, nz.p)
        res.update({"C_A1": norms.C_A1, "C_A2": norms.C_A2, "alpha": norms.alpha})
        ok = fit.passes(threshold)
    else:
        res.update({"C_A1": 0.0, "C_A2": 0.0, "alpha": 1.0 / nz.p})
        # noise-free control: the remainder is pure time-stepping error, so
        # what is checked is its order under dt -> dt/2
        if fit.exact:
            ok = True
        else:
            _, _, _, fine = remainder_run(cfg, level, dt=cfg.params.dt / 2)
            coarse_max, fine_max = float(np.max(table.norm)), float(np.max(fine.norm))
            order = math.log2(coarse_max / fine_max) if fine_max > 0 else float("inf")
            res["dt_order"] = order
            ok = order >= 1.9
    chen_ok = chen <= 1e-12
    res["chen_ok"] = chen_ok
    res["pass"] = bool(ok and chen_ok)
    report.data.update(res)
    if not chen_ok:
        return EXIT_AUDIT
    if cfg.audit.enabled and not ok:
        return EXIT_AUDIT
    return EXIT_OK


def _psi(cfg: RunConfig, grid) -> ScalarField:
    row = cfg.experiment.psi_mode or ([1.0] * grid.dim + [1.0, 0.0])
    *k, ac, as_ = row
    x = grid.coords
    phase = sum(ki * xi for ki, xi in zip(k, x))
    return ScalarField.from_values(grid, ac * np.cos(phase) + as_ * np.sin(phase))


def strat_path(cfg_json: str, index: int, seed: int | None) -> dict:
    """One realization of the Stratonovich ensemble (module level so it pickles)."""
    cfg = RunConfig.model_validate_json(cfg_json)
    prob = build_problem(cfg, seed=seed, index=index)
    driver = prob.brownian  # step-resolution path, no Wong-Zakai mollification
    psi = _psi(cfg, prob.grid)
    K = prob.q.K
    funcs = [probe_functional(prob.q, psi, prob.grid, k) for k in range(K)]
    traj = simulate(prob.state0, prob.q, driver, stride=prob.params.steps, ledger=False,
                    functionals=funcs, companion=True, record_mass=False)
    raw = prob.brownian
    T = prob.params.T
    brown = sum(stratonovich_integral(raw.values[:, k], raw, k).value
                - ito_integral(raw.values[:, k], raw, k).value - 0.5 * T for k in range(K))
    if traj.blowup is not None:
        return {"index": index, "status": "blowup", "brownian": brown}
    defect = 0.0
    on_steps = driver.resample(traj.step_times)
    for k in range(K):
        cs = correction_sample(traj.functionals[:, k], traj.functional_noise[:, k], on_steps, k)
        defect += cs.defect
    energy = float(noise_energy_contribution(traj)[-1])
    e0 = float(sum(energy_parts(prob.state0)))
    return {"index": index, "status": "completed", "defect": defect, "brownian": brown,
            "energy": energy, "e0": e0}


def run_ensemble(cfg: RunConfig, indices, seed: int | None) -> list[dict]:
    cfg_json = cfg.model_dump_json()
    nw = workers()
    if nw == 1:
        res = [strat_path(cfg_json, i, seed) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=nw) as ex:
            res = list(ex.map(strat_path, [cfg_json] * len(indices), indices,
                              [seed] * len(indices), chunksize=max(1, len(indices) // (4 * nw))))
    return sorted(res, key=lambda r: r["index"])


def cmd_strat(cfg: RunConfig, out: Path, report: Report, seed: int | None = None) -> int:
    nz = cfg.noise
    if nz.kind != "brownian":
        raise ConfigError("strat requires noise.kind = 'brownian'")
    indices = nz.paths if nz.paths is not None else list(range(nz.ensemble))
    if len(indices) < 2:
        raise ConfigError("strat needs an ensemble of at least two paths")
    res = run_ensemble(cfg, indices, seed)
    done = [r for r in res if r["status"] == "completed"]
    dt = cfg.params.dt
    brown = ensemble_stat([r["brownian"] for r in res], dt)
    corr = ensemble_stat([r["defect"] for r in done], dt) if len(done) >= 2 else None
    energy = ensemble_stat([r["energy"] for r in done], dt) if len(done) >= 2 else None
    div_free = nz.q.type != "gradient"
    report.data.update({
        "n_paths": len(indices), "n_blowup": len(res) - len(done),
        "brownian": brown.as_dict(),
        "correction": corr.as_dict() if corr else None,
        # the noise energy work is a time-discretization bias (O(dt) per path), not a
        # zero-mean fluctuation, so it is reported relative to dt * E0 rather than tested
        "energy": ({"mean": energy.mean, "stderr": energy.stderr,
                    "mean_over_dt_E0": energy.mean / (dt * np.mean([r["e0"] for r in done])),
                    "expected_fail": not div_free} if energy else None),
        "degenerate": bool(brown.degenerate),
    })
    failed = brown.verdict == "fail" or corr is None or corr.verdict == "fail"
    report["pass"] = not failed
    if cfg.audit.enabled and failed:
        return EXIT_AUDIT
    return EXIT_OK


def cmd_audit(cfg: RunConfig, out: Path, report: Report) -> int:
    prob = build_problem(cfg)
    traj = None
    ck = out / "trajectory.json"
    if ck.exists():
        header = json.loads(ck.read_text())
        if header.get("config_hash") == report.data["config_hash"]:
            traj = load_trajectory(out, cfg)
            report["source"] = "checkpoint"
    if traj is None:
        traj = simulate(prob.state0, prob.q, prob.driver, stride=prob.stride)
        report["source"] = "simulation"
        if traj.blowup is not None:
            report["blowup"] = {"t": traj.blowup.t, "min_rho": traj.blowup.min_rho}
            return EXIT_BLOWUP
    criteria = {}
    summary, verdict = audit_trajectory(traj, prob.q, cfg.audit.tolerance)
    criteria["energy_mass"] = {**summary.as_dict(), "verdict": verdict}
    theta = cfg.experiment.theta_exp
    criteria["pressure_weight"] = {"theta": theta, "value": pressure_weight(traj, theta),
                                   "verdict": "pass"}
    k = cfg.experiment.truncation_k
    fp = flux_pair(traj, k, cfg.params.flux_lambda)
    criteria["flux_pair"] = {"k": k, "final": float(fp.value[-1]),
                             "verdict": "pass" if np.all(np.isfinite(fp.value)) else "fail"}
    rl = rho_log_rho(traj)
    criteria["rho_log_rho"] = {"final_residual": float(rl.residual[-1]),
                               "max_abs_residual": float(np.max(np.abs(rl.residual))),
                               "verdict": "pass"}
    psi = _psi(cfg, prob.grid)
    rr = renorm_residual(traj, lambda r: truncation(r, k), lambda r: truncation_derivative(r, k),
                         psi, prob.q, theta_support=3 * k)
    criteria["renorm"] = {"max_abs_residual": float(np.max(np.abs(rr))), "verdict": "pass"}
    if prob.q is not None:
        st = traj.state(len(traj) - 1)
        j5 = commutator_J5(st, prob.q)
        bound = commutator_bound(st, prob.q)
        if prob.q.is_constant:
            scale = max(bound, float(prob.q.max_norm()) * 1.0, 1.0)
            ok = abs(j5) <= 1e-11 * scale
        else:
            ok = abs(j5) <= bound
        criteria["commutator_J5"] = {"value": j5, "bound": bound, "verdict": "pass" if ok else "fail"}
    report["criteria"] = criteria
    failed = any(c["verdict"] == "fail" for c in criteria.values())
    report["pass"] = not failed
    if cfg.audit.enabled and failed:
        return EXIT_AUDIT
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "wongzakai": cmd_wongzakai,
    "roughcheck": cmd_roughcheck,
    "strat": cmd_strat,
    "audit": cmd_audit,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cnstn", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="JSON run configuration")
    ap.add_argument("--out", help="output directory (default: output.dir of the config)")
    ap.add_argument("--seed", type=int, help="override noise.seed (unsigned 64-bit)")
    ap.add_argument("--informative", action="store_true",
                    help="run out-of-scope configurations with expected-fail annotations")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text()
        cfg = parse_config(text, informative=True if args.informative else None)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.model_copy(update={"noise": cfg.noise.model_copy(update={"seed": args.seed})})
    except (OSError, ConfigError) as exc:
        print(f"cnstn: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or cfg.output.dir)
    report = Report(args.command, cfg)
    try:
        code = COMMANDS[args.command](cfg, out, report)
    except ConfigError as exc:
        print(f"cnstn: config error: {exc}", file=sys.stderr)
        report["error"] = str(exc)
        code = EXIT_CONFIG
    except BlowUp as exc:  # raised outside simulate, e.g. by remainder runs
        report["blowup"] = {"t": exc.t, "min_rho": exc.min_rho, "reason": exc.reason}
        code = EXIT_BLOWUP
    report.write(out, code)
    print(json.dumps({"command": args.command, "exit_code": code, "out": str(out)}))
    return code


if __name__ == "__main__":
    sys.exit(main())
