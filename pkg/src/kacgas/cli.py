"""Command-line experiments.

Every subcommand reads an optional flat config file, applies ``--seed``,
``--workers``, ``--out-dir`` and ``--set key=value`` overrides, writes its
outputs to the output directory and finishes with ``manifest.json`` listing each
output with its sha256.  Exit codes: 0 success, 2 configuration error, 3 a
numerical verdict failed, 1 any other failure (the failing stage is named).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .config import KINDS, ConfigError, ExperimentConfig, parse_config, render_config
from .pde import random_profile

log = logging.getLogger("kacgas")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_VERDICT = 0, 1, 2, 3
BETA_CRITICAL = 0.25


class StageError(RuntimeError):
    def __init__(self, stage: str, exc: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(exc).__name__}: {exc}")
        self.stage = stage


@dataclass
class ResultManifest:
    config: dict
    build: str
    seeds: list = field(default_factory=list)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    verdict: bool | None = None

    def as_dict(self) -> dict:
        return {"config": self.config, "build": self.build, "seeds": self.seeds,
                "outputs": self.outputs, "timings": self.timings, "verdict": self.verdict}


def build_id() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"{__version__}+unknown"


class _Run:
    """Output bookkeeping for one invocation."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.out = Path(cfg.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = ResultManifest(cfg.as_dict(), build_id())

    def stage(self, name: str, fn, *args, **kwargs):
        t0 = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except (ConfigError, StageError):
            raise
        except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
            raise StageError(name, exc) from exc
        finally:
            self.manifest.timings[name] = round(time.perf_counter() - t0, 6)

    def _register(self, path: Path):
        self.manifest.outputs[path.name] = hashlib.sha256(path.read_bytes()).hexdigest()

    def write_json(self, name: str, obj):
        path = self.out / name
        path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
        self._register(path)
        return path

    def write_csv(self, name: str, header, rows):
        path = self.out / name
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(x) for x in row])
        self._register(path)
        return path

    def finish(self):
        path = self.out / "manifest.json"
        path.write_text(json.dumps(self.manifest.as_dict(), indent=2, sort_keys=True) + "\n")
        return self.manifest


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


# ---------------------------------------------------------------- helpers


def _beta(cfg: ExperimentConfig) -> float:
    if cfg.beta_over_beta0 is None:
        return cfg.beta
    from .pde import compute_constants

    return cfg.effective_beta(compute_constants().beta0)


def initial_profile(cfg: ExperimentConfig):
    """``gamma(u)``: linear interpolation of the reservoirs plus ``initial_amp * sin(pi u)``."""
    rm, rp, amp = cfg.rho_minus, cfg.rho_plus, cfg.initial_amp

    def linear(u):
        return 0.5 * (rm + rp) + 0.5 * (rp - rm) * np.asarray(u, dtype=float)

    if cfg.initial == "linear":
        return linear
    if cfg.initial == "constant":
        return lambda u: np.full(np.shape(u), 0.5 * (rm + rp))

    def sine(u):
        return linear(u) + amp * np.sin(np.pi * np.asarray(u, dtype=float))

    return sine


def _density_field(cfg, n_cells=None):
    from .pde import DensityField

    f = initial_profile(cfg)
    g = DensityField.from_function(f, n_cells or cfg.n_cells, cfg.rho_minus, cfg.rho_plus)
    return g


def _replica(args):
    """One seeded replica; module level so that worker processes can import it."""
    cfg, beta, k = args
    from .kernel import build_kernel_table
    from .microdyn import SimParams, rng_stream, sample_bernoulli, simulate

    table = build_kernel_table(cfg.N)
    rng = rng_stream(cfg.seed, k)
    init = sample_bernoulli(initial_profile(cfg), cfg.N, rng)
    params = SimParams(cfg.N, beta, cfg.rho_minus, cfg.rho_plus, cfg.seed, cfg.t_end, cfg.sample_times)
    return simulate(params, table, init, rng=rng)


def run_replicas(cfg: ExperimentConfig, beta: float):
    """Replica ``k`` uses stream ``(seed, k)``, so results do not depend on ``workers``."""
    jobs = [(cfg, beta, k) for k in range(cfg.replicas)]
    if cfg.workers == 1 or cfg.replicas == 1:
        return [_replica(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(_replica, jobs))


def _bin_edges(width: float) -> np.ndarray:
    n = max(1, int(round(2.0 / width)))
    return np.linspace(-1.0, 1.0, n + 1)


def binned_l1(cell_field, pde_values, u, width: float) -> float:
    """L1 distance of bin averages of a lattice field and a nodal PDE field."""
    from .observables import CellField

    edges = _bin_edges(width)
    a = cell_field.bin_average(edges, covered=True)
    # nodal field as cells of the PDE grid (averages of neighbouring nodes)
    h = u[1] - u[0]
    pde_cells = CellField(0.5 * (u[1:] + u[:-1]), h, 0.5 * (pde_values[1:] + pde_values[:-1]))
    b = pde_cells.bin_average(edges)
    return float(np.sum(np.abs(a - b) * np.diff(edges)))


# ---------------------------------------------------------------- pipelines


def _simulate(run: _Run):
    cfg = run.cfg
    beta = _beta(cfg)
    trajs = run.stage("simulate", run_replicas, cfg, beta)
    summary = []
    for k, tr in enumerate(trajs):
        centers = np.arange(-cfg.N + 1, cfg.N) / cfg.N
        rows = ((t, c, d) for t, dens in zip(tr.times, tr.density_matrix()) for c, d in zip(centers, dens))
        run.write_csv(f"simulate_r{k:04d}.csv", ("t", "cell_center", "density"), rows)
        summary.append({"replica": k, "stream": k, "event_count": tr.event_count, "final_time": tr.final_time})
    run.manifest.seeds = [{"seed": cfg.seed, "stream": k} for k in range(cfg.replicas)]
    run.write_json("simulate.json", {"beta": beta, "N": cfg.N, "replicas": summary})
    return None


def _hydro_compare(run: _Run):
    from .observables import replica_mean
    from .pde import evolve

    cfg = run.cfg
    beta = _beta(cfg)
    trajs = run.stage("simulate", run_replicas, cfg, beta)
    mean = run.stage("replica_mean", replica_mean, trajs)
    gamma = _density_field(cfg)
    path = run.stage("evolve", evolve, gamma, beta, cfg.t_end, cfg.dt, cfg.refine)
    l1 = []
    for k, t in enumerate(mean.times):
        m = int(round(t / cfg.dt))
        l1.append(binned_l1(mean.field(k), path.values[m], path.u, cfg.bin_width))
    rows = ((t, c, v, s) for k, t in enumerate(mean.times)
            for c, v, s in zip(mean.centers, mean.mean[k], mean.stderr[k]))
    run.write_csv("replica_mean.csv", ("t", "cell_center", "density", "stderr"), rows)
    _write_path_csv(run, "pde_path.csv", path, every=_every(path, cfg))
    verdict = None if cfg.l1_tol is None else bool(l1[-1] <= cfg.l1_tol)
    run.manifest.seeds = [{"seed": cfg.seed, "stream": k} for k in range(cfg.replicas)]
    run.write_json("hydro_compare.json", {
        "beta": beta, "N": cfg.N, "replicas": cfg.replicas, "times": list(mean.times),
        "l1": l1, "bin_width": cfg.bin_width, "l1_tol": cfg.l1_tol, "holds": verdict,
    })
    return verdict


def _hydrostatic(run: _Run):
    from .kernel import build_kernel_table
    from .microdyn import SimParams, stationary_sample
    from .pde import stationary_profile

    cfg = run.cfg
    beta = _beta(cfg)
    table = build_kernel_table(cfg.N)
    params = SimParams(cfg.N, beta, cfg.rho_minus, cfg.rho_plus, cfg.seed, cfg.t_end, (0.0,))
    sample = run.stage("stationary_sample", stationary_sample, params, table, cfg.burn_in,
                       cfg.n_samples, cfg.thinning)
    prof = run.stage("stationary_profile", stationary_profile, beta, cfg.rho_minus, cfg.rho_plus,
                     cfg.n_cells, tol=cfg.stationary_tol, refine=cfg.refine)
    l1 = binned_l1(sample, prof.field.values, prof.field.u, cfg.bin_width)
    run.write_csv("stationary_sample.csv", ("cell_center", "density", "stderr"),
                  zip(sample.centers, sample.values,
                      sample.stderr if sample.stderr is not None else np.full(sample.values.size, np.nan)))
    run.write_csv("stationary_profile.csv", ("u", "rho"), zip(prof.field.u, prof.field.values))
    verdict = None if cfg.l1_tol is None else bool(l1 <= cfg.l1_tol)
    run.manifest.seeds = [{"seed": cfg.seed, "stream": 0}]
    run.write_json("hydrostatic.json", {"beta": beta, "N": cfg.N, "l1": l1, "residual": prof.residual,
                                        "picard_gap": prof.picard_gap, "l1_tol": cfg.l1_tol,
                                        "holds": verdict})
    return verdict


def _every(path, cfg) -> int:
    """Row stride so that the written path keeps the requested sample times when possible."""
    return max(1, int(round(0.01 / cfg.dt))) if path.times.size > 201 else 1


def _write_path_csv(run: _Run, name: str, path, every: int = 1):
    idx = list(range(0, path.times.size, every))
    if idx[-1] != path.times.size - 1:
        idx.append(path.times.size - 1)
    rows = ((path.times[m], u, v) for m in idx for u, v in zip(path.u, path.values[m]))
    run.write_csv(name, ("t", "u", "rho"), rows)


def _pde_evolve(run: _Run):
    from .pde import evolve, operator_for, step_mass_balance

    cfg = run.cfg
    beta = _beta(cfg)
    gamma = _density_field(cfg)
    path = run.stage("evolve", evolve, gamma, beta, cfg.t_end, cfg.dt, cfg.refine)
    conv = operator_for(path.u, cfg.refine)
    balance = max((step_mass_balance(path.values[m], path.values[m + 1], beta, cfg.dt, path.h, conv)
                   for m in range(path.times.size - 1)), default=0.0)
    _write_path_csv(run, "pde_path.csv", path)
    run.write_json("pde_evolve.json", {"beta": beta, "T": cfg.t_end, "dt": cfg.dt, "n_cells": cfg.n_cells,
                                       "max_mass_balance_error": balance})
    return None


def _pde_stationary(run: _Run):
    from .pde import compute_constants, stationary_multiplicity, stationary_profile

    cfg = run.cfg
    beta = _beta(cfg)
    prof = run.stage("stationary_profile", stationary_profile, beta, cfg.rho_minus, cfg.rho_plus,
                     cfg.n_cells, tol=cfg.stationary_tol, refine=cfg.refine)
    run.write_csv("stationary_profile.csv", ("u", "rho"), zip(prof.field.u, prof.field.values))
    agree = None if prof.picard_gap is None else bool(prof.picard_gap <= 1e-6)
    multiplicity = None
    if beta >= compute_constants().beta0:
        # uniqueness is not guaranteed here; report what several starts give
        multiplicity = run.stage("multiplicity", stationary_multiplicity, beta, cfg.rho_minus,
                                 cfg.rho_plus, seed=cfg.seed, n_cells=cfg.n_cells,
                                 tol=cfg.stationary_tol).as_dict()
    run.write_json("pde_stationary.json", {
        "beta": beta, "residual": prof.residual, "steps": prof.steps,
        "picard_iterations": prof.picard_iterations, "picard_gap": prof.picard_gap,
        "picard_agrees": agree, "multiplicity": multiplicity,
    })
    return agree


def read_path_csv(path: str, rho_minus: float | None = None, rho_plus: float | None = None,
                  n_cells: int = 200, mollify_eps: float = 0.05):
    """Read a density path CSV written by this tool.

    Nodal PDE paths (``t,u,<value>``) are read as is and keep their own
    endpoint values as boundary data.  Lattice paths
    (``t,cell_center,<value>``) are mollified with window ``mollify_eps`` onto
    a uniform node grid whose endpoints carry the reservoir densities.
    Returns ``(DensityPath, is_lattice)``.
    """
    from .observables import CellField, mollify
    from .pde import DensityPath, uniform_grid

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        data = np.array([[float(x) for x in row[:3]] for row in reader if row])
    if len(header) < 3 or header[0] != "t" or header[2] not in ("rho", "value", "density"):
        raise ValueError(f"unrecognised path header {header}")
    times = np.unique(data[:, 0])
    grid = np.unique(data[:, 1])
    if data.shape[0] != times.size * grid.size:
        raise ValueError("path CSV is not a full time x space table")
    order = np.lexsort((data[:, 1], data[:, 0]))
    vals = data[order, 2].reshape(times.size, grid.size)
    if header[1] == "u":
        return DensityPath(times, grid, vals, vals[0, 0], vals[0, -1]), False
    if header[1] != "cell_center":
        raise ValueError(f"unrecognised space column {header[1]!r}")
    if rho_minus is None or rho_plus is None:
        raise ValueError("lattice paths need rho_minus and rho_plus")
    width = float(grid[1] - grid[0])
    u = uniform_grid(n_cells)
    out = np.empty((times.size, u.size))
    for m in range(times.size):
        out[m] = mollify(CellField(grid, width, vals[m]), mollify_eps, u)
    out[:, 0], out[:, -1] = rho_minus, rho_plus
    return DensityPath(times, u, out, rho_minus, rho_plus), True


def _ldp_eval(run: _Run):
    from .ldp import TestBasis, full_rate

    cfg = run.cfg
    beta = _beta(cfg)
    path, lattice = run.stage("read_path", read_path_csv, cfg.path_file, cfg.rho_minus,
                              cfg.rho_plus, cfg.n_cells, cfg.mollify_eps)
    gamma = path.field(0)
    basis = TestBasis(cfg.K, cfg.M, path.T)
    report = run.stage("full_rate", full_rate, path, gamma, basis, beta)
    out = report.as_dict() | {"beta": beta, "exploratory": lattice}
    run.write_json("rate_report.json", out)
    return None


def _ldp_perturb(run: _Run):
    from .ldp import SpaceTimeField, TestBasis, perturbed_solve, rate_from_f, rate_sup

    cfg = run.cfg
    beta = _beta(cfg)
    gamma = _density_field(cfg)
    basis = TestBasis(cfg.K, cfg.M, cfg.t_end)
    F = SpaceTimeField(basis, np.asarray(cfg.f_coeffs))
    path = run.stage("perturbed_solve", perturbed_solve, F, gamma, beta, cfg.t_end, cfg.dt)
    _write_path_csv(run, "perturbed_path.csv", path)
    rf = rate_from_f(path, F)
    rs = run.stage("rate_sup", rate_sup, path, gamma, basis, beta).rate_hat
    rel = abs(rs - rf) / rf if rf > 0 else abs(rs)
    run.write_json("perturb.json", {"beta": beta, "rate_from_f": rf, "rate_sup": rs, "relative_gap": rel})
    return None


def _beta0(run: _Run):
    from .pde import compute_constants

    c = compute_constants()
    flag = c.beta0 >= BETA_CRITICAL
    run.write_json("beta0.json", c.as_dict() | {"beta_c": BETA_CRITICAL, "beta0_below_beta_c": not flag})
    return not flag


def _kernel_info(run: _Run):
    from .kernel import build_kernel_table, row_integrals

    cfg = run.cfg
    table = build_kernel_table(cfg.N)
    u = np.linspace(-1.0, 1.0, 200)
    cont = float(np.max(np.abs(row_integrals(u) - 1.0)))
    run.write_json("kernel_info.json", {
        "N": cfg.N, "kernel": table.kernel_name, "row_sum_error": table.row_sum_error(),
        "continuum_row_integral_error": cont, "sup_grad": table.sup_grad,
    })
    return None


def _contraction_pair(args):
    cfg, beta, k, constants = args
    from .microdyn import rng_stream
    from .pde import DensityField, contraction_check, uniform_grid

    rng = rng_stream(cfg.seed, k)
    u = uniform_grid(cfg.n_cells)
    fields = []
    for _ in range(2):
        f = random_profile(rng, u, cfg.rho_minus, cfg.rho_plus)
        fields.append(DensityField(u, f, cfg.rho_minus, cfg.rho_plus))
    return contraction_check(fields[0], fields[1], beta, cfg.t_end, cfg.dt, constants,
                             tol=cfg.contraction_tol)


def _contraction(run: _Run):
    from .pde import compute_constants

    cfg = run.cfg
    beta = _beta(cfg)
    constants = compute_constants()
    jobs = [(cfg, beta, k, constants) for k in range(cfg.n_pairs)]
    if cfg.workers == 1:
        reports = run.stage("contraction", lambda: [_contraction_pair(j) for j in jobs])
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            reports = run.stage("contraction", lambda: list(pool.map(_contraction_pair, jobs)))
    verdicts = [r.holds for r in reports]
    holds = None if any(v is None for v in verdicts) else all(verdicts)
    run.manifest.seeds = [{"seed": cfg.seed, "stream": k} for k in range(cfg.n_pairs)]
    run.write_json("contraction.json", {
        "beta": beta, "c_beta": constants.c_of_beta(beta), "holds": holds,
        "pairs": [{"holds": r.holds, "max_ratio": float(np.max(r.distance / (r.distance[0] * np.exp(-r.c_beta * r.times))))
                   if r.c_beta > 0 and r.distance[0] > 0 else None} for r in reports],
    })
    return holds


PIPELINES = {
    "simulate": _simulate,
    "hydro-compare": _hydro_compare,
    "hydrostatic": _hydrostatic,
    "pde-evolve": _pde_evolve,
    "pde-stationary": _pde_stationary,
    "ldp-eval": _ldp_eval,
    "ldp-perturb": _ldp_perturb,
    "beta0": _beta0,
    "kernel-info": _kernel_info,
    "contraction": _contraction,
}


def run(cfg: ExperimentConfig) -> ResultManifest:
    """Execute the pipeline of ``cfg.kind``; ``manifest.verdict`` is False on a failed check."""
    r = _Run(cfg)
    r.manifest.verdict = PIPELINES[cfg.kind](r)
    r.write_json("config.json", cfg.as_dict())
    (r.out / "config.txt").write_text(render_config(cfg))
    r._register(r.out / "config.txt")
    return r.finish()


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kacgas", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="kind", required=True)
    for kind in KINDS:
        s = sub.add_parser(kind)
        s.add_argument("--config", help="flat key = value file")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--out-dir")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(args) -> ExperimentConfig:
    text = ""
    if args.config:
        try:
            text = Path(args.config).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError([f"cannot read config file: {exc}"]) from None
    overrides = {}
    bad = []
    for item in args.set:
        if "=" not in item:
            bad.append(f"--set expects KEY=VALUE, got {item!r}")
            continue
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if bad:
        raise ConfigError(bad)
    for key, val in (("seed", args.seed), ("workers", args.workers), ("out_dir", args.out_dir)):
        if val is not None:
            overrides[key] = val
    file_kind = None
    for line in text.splitlines():
        line = line.split("#", 1)[0]
        if "=" in line and line.split("=", 1)[0].strip() == "kind":
            file_kind = line.split("=", 1)[1].strip()
    if file_kind is not None and file_kind != args.kind:
        raise ConfigError([f"config kind '{file_kind}' does not match subcommand '{args.kind}'"])
    overrides["kind"] = args.kind
    return parse_config(text, overrides)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run(cfg)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(json.dumps({"out_dir": str(cfg.out_dir), "verdict": manifest.verdict,
                      "outputs": sorted(manifest.outputs)}))
    return EXIT_VERDICT if manifest.verdict is False else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
