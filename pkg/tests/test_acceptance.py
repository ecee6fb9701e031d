"""Acceptance criteria at their stated tolerances; one PASS/FAIL line each."""

import math
import time

import numpy as np
import pytest

from kacgas.cli import _contraction_pair, _density_field, binned_l1, run_replicas
from kacgas.config import ExperimentConfig
from kacgas.kernel import (
    Configuration,
    build_kernel_table,
    delta_h_exchange,
    hamiltonian,
    row_integrals,
)
from kacgas.ldp import (
    SpaceTimeField,
    TestBasis,
    comparison_bounds,
    energy_q,
    energy_q_var,
    heat_path_bound,
    linear_energy_closed_form,
    perturbed_solve,
    rate_from_f,
    rate_sup,
)
from kacgas.microdyn import (
    SimParams,
    exchange_rate,
    rate_expansion_residual,
    rng_stream,
    sample_bernoulli,
    stationary_sample,
)
from kacgas.observables import replica_mean
from kacgas.pde import (
    DensityField,
    DensityPath,
    compute_constants,
    evolve,
    random_profile,
    stationary_profile,
    uniform_grid,
)

BETA0 = compute_constants().beta0
RHO_MINUS, RHO_PLUS = 0.2, 0.8
T = 0.5
BIN = 0.05


def _random_field(basis, rng, scale=0.15):
    k = np.tile(np.arange(1, basis.K + 1), basis.M + 1)
    return SpaceTimeField(basis, scale * rng.uniform(-1, 1, basis.dim) / k)


def _random_initial(rng, n):
    u = uniform_grid(n)
    return DensityField(u, random_profile(rng, u, RHO_MINUS, RHO_PLUS), RHO_MINUS, RHO_PLUS)


def test_c01_kernel_normalization(criterion):
    err = float(np.max(np.abs(row_integrals(np.linspace(-1, 1, 200)) - 1.0)))
    assert criterion(1, "kernel normalization", err <= 1e-8, f"max |int J - 1| = {err:.2e} (tol 1e-8)")


def test_c02_detailed_balance(criterion):
    N = 64
    table = build_kernel_table(N)
    rng = np.random.default_rng(2)
    worst = 0.0
    for beta in (0.5 * BETA0, 1.0):
        for _ in range(100):
            c = Configuration(N, rng.integers(0, 2, 2 * N + 1))
            for x in range(-N, N):
                fwd = exchange_rate(c, x, table, beta)
                back = exchange_rate(c.exchanged(x, x + 1), x, table, beta)
                dh = delta_h_exchange(c, x, x + 1, table)
                worst = max(worst, abs(fwd - math.exp(-beta * dh) * back))
    assert criterion(2, "detailed balance", worst <= 1e-12, f"max defect {worst:.2e} over 2x100 configurations (tol 1e-12)")


def test_c03_delta_h_oracle(criterion):
    rng = np.random.default_rng(3)
    worst = 0.0
    for N in (4, 8, 16, 32):
        table = build_kernel_table(N)
        for _ in range(25):
            c = Configuration(N, rng.integers(0, 2, 2 * N + 1))
            h0 = hamiltonian(c, table)
            for x in range(-N, N):
                brute = hamiltonian(c.exchanged(x, x + 1), table) - h0
                worst = max(worst, abs(delta_h_exchange(c, x, x + 1, table) - brute))
    assert criterion(3, "energy difference oracle", worst <= 1e-12, f"max gap {worst:.2e} for N <= 32 (tol 1e-12)")


def test_c04_rate_expansion(criterion):
    t0 = time.perf_counter()
    Ns = (64, 128, 256)
    errs = []
    for N in Ns:
        # a configuration drawn from a smooth profile with a fixed seed
        c = sample_bernoulli(lambda u: 0.5 + 0.3 * u, N, rng_stream(4, 0))
        errs.append(float(rate_expansion_residual(c, build_kernel_table(N), 1.0).max()))
    slope = -np.polyfit(np.log(Ns), np.log(errs), 1)[0]
    elapsed = time.perf_counter() - t0
    ok = 1.7 <= slope <= 2.3 and elapsed < 60
    assert criterion(4, "rate expansion", ok,
                     f"fitted exponent {slope:.3f} (band [1.7, 2.3]), residuals "
                     + ", ".join(f"{e:.2e}" for e in errs) + f", {elapsed:.1f} s")


def _hydrostatic_sample(beta, N=200, seed=5):
    params = SimParams(N, beta, RHO_MINUS, RHO_PLUS, seed, 1.0, (0.0,))
    return stationary_sample(params, build_kernel_table(N), burn_in=2.0, n_samples=400, thinning=0.05)


def test_c05_heat_hydrostatics(criterion):
    sample = _hydrostatic_sample(0.0)
    u = uniform_grid(400)
    l1 = binned_l1(sample, 0.5 + 0.3 * u, u, BIN)
    assert criterion(5, "hydrostatics at beta = 0", l1 <= 0.03, f"L1 = {l1:.4f} at N = 200 (tol 0.03)")


def test_c06_hydrodynamic_limit(criterion):
    ok = True
    parts = []
    for ratio in (0.0, 0.5):
        beta = ratio * BETA0
        l1 = []
        gamma = None
        for N in (100, 200, 400):
            cfg = ExperimentConfig(kind="hydro-compare", N=N, beta=beta, seed=6, t_end=T,
                                   sample_times=(T,), replicas=100, n_cells=400, dt=1e-3)
            mean = replica_mean(run_replicas(cfg, beta))
            if gamma is None:
                gamma = _density_field(cfg)
                final = evolve(gamma, beta, T, cfg.dt).final()
            l1.append(binned_l1(mean.field(0), final.values, final.u, BIN))
        mono = l1[0] >= l1[1] >= l1[2]
        ok &= mono and l1[2] <= 0.03
        parts.append(f"beta = {ratio} beta0: L1 " + ", ".join(f"{x:.4f}" for x in l1))
    assert criterion(6, "hydrodynamic limit", ok,
                     "; ".join(parts) + " for N = 100, 200, 400 (nonincreasing, tol 0.03 at N = 400)")


def test_c07_hydrostatic_consistency(criterion):
    beta = 0.5 * BETA0
    sample = _hydrostatic_sample(beta, seed=7)
    prof = stationary_profile(beta, RHO_MINUS, RHO_PLUS, n_cells=400)
    l1 = binned_l1(sample, prof.field.values, prof.field.u, BIN)
    assert criterion(7, "hydrostatics at 0.5 beta0", l1 <= 0.03, f"L1 = {l1:.4f} at N = 200 (tol 0.03)")


def test_c08_contraction(criterion):
    constants = compute_constants()
    assert constants.c_of_beta(0.0) == pytest.approx(math.pi ** 2 / 4, rel=1e-14)
    ok = True
    parts = []
    for ratio in (0.0, 0.25, 0.5):
        beta = ratio * BETA0
        cfg = ExperimentConfig(kind="contraction", seed=8, n_cells=200, t_end=1.0, dt=1e-3,
                               n_pairs=20, contraction_tol=0.05)
        reports = [_contraction_pair((cfg, beta, k, constants)) for k in range(cfg.n_pairs)]
        worst = max(float(np.max(r.distance / (r.distance[0] * np.exp(-r.c_beta * r.times))))
                    for r in reports)
        ok &= all(r.holds is True for r in reports)
        parts.append(f"beta = {ratio} beta0: c = {constants.c_of_beta(beta):.4f}, worst ratio {worst:.4f}")
    assert criterion(8, "contraction", ok, "; ".join(parts) + " (limit 1.05)")


def test_c09_zero_rate_on_hydrodynamic_path(criterion):
    beta = 0.5 * BETA0
    gamma = DensityField.from_function(lambda u: 0.5 + 0.3 * u + 0.2 * np.sin(np.pi * u), 200,
                                       RHO_MINUS, RHO_PLUS)
    basis = TestBasis(8, 8, T)
    hydro = rate_sup(evolve(gamma, beta, T, T / 512), gamma, basis, beta).rate_hat
    frozen = rate_sup(DensityPath.frozen(gamma, T, 512), gamma, basis, beta).rate_hat
    ok = hydro <= 1e-4 and frozen >= 1e-2
    assert criterion(9, "zero rate on hydrodynamic paths", ok,
                     f"hydrodynamic {hydro:.2e} (tol 1e-4), frozen {frozen:.3e} (floor 1e-2)")


def test_c10_rate_representation(criterion):
    beta = 0.5 * BETA0
    gamma = DensityField.from_function(lambda u: 0.5 + 0.3 * u + 0.2 * np.sin(np.pi * u), 200,
                                       RHO_MINUS, RHO_PLUS)
    basis = TestBasis(8, 8, T)
    rng = np.random.default_rng(10)
    gaps = []
    for _ in range(5):
        F = _random_field(basis, rng)
        path = perturbed_solve(F, gamma, beta, T, T / 512)
        target = rate_from_f(path, F)
        gaps.append(abs(rate_sup(path, gamma, basis, beta).rate_hat - target) / target)
    ok = max(gaps) <= 0.05
    assert criterion(10, "rate representation", ok,
                     "relative gaps " + ", ".join(f"{g:.4f}" for g in gaps) + " (tol 0.05)")


def test_c11_comparison_and_heat_bounds(criterion):
    rng = np.random.default_rng(11)
    basis = TestBasis(8, 8, T)
    ok = True
    n_sandwich = n_heat = 0
    for beta in (0.05, 0.1):
        for _ in range(10):
            gamma = _random_initial(rng, 200)
            path = perturbed_solve(_random_field(basis, rng), gamma, beta, T, T / 512)
            cb = comparison_bounds(path, gamma, basis, beta, slack=0.1)
            ok &= cb.holds
            n_sandwich += cb.holds
    heat_ratio = 0.0
    for _ in range(10):
        gamma = _random_initial(rng, 400)
        heat = evolve(gamma, 0.0, T, T / 4096)
        for beta in (0.05, 0.1):
            v = heat_path_bound(heat, gamma, basis, beta, slack=0.1)
            ok &= v.holds
            n_heat += v.holds
            heat_ratio = max(heat_ratio, v.rate / v.bound)
    assert criterion(11, "comparison sandwich and heat-path bound", ok,
                     f"sandwich {n_sandwich}/20, heat bound {n_heat}/20, worst rate/bound {heat_ratio:.3f} "
                     "(10% slack)")


def test_c12_energy_duality(criterion):
    rng = np.random.default_rng(12)
    gaps = []
    for _ in range(5):
        gamma = _random_initial(rng, 400)
        path = evolve(gamma, 0.5 * BETA0, T, T / 512).subsample(8)
        q, qv = energy_q(path), energy_q_var(path)
        gaps.append(abs(q - qv) / q)
    lin = DensityPath.frozen(DensityField.linear(400, RHO_MINUS, RHO_PLUS), 1.0, 4)
    exact = linear_energy_closed_form(RHO_MINUS, RHO_PLUS, 1.0)
    lin_gap = abs(energy_q(lin) - exact) / exact
    ok = max(gaps) <= 0.01 and lin_gap <= 0.01
    assert criterion(12, "energy duality", ok,
                     "integral vs variational gaps " + ", ".join(f"{g:.4f}" for g in gaps)
                     + f"; linear profile gap {lin_gap:.2e} (tol 0.01)")


def test_c13_beta0_sanity(criterion):
    c = compute_constants()
    ok = c.beta0 < 0.25
    assert criterion(13, "beta0 against beta_c = 1/4", ok,
                     f"beta0 = {c.beta0:.6f}, S = {c.S:.6f}" + ("" if ok else " FLAGGED: beta0 >= 1/4"))
