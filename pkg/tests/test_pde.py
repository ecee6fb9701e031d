import math

import numpy as np
import pytest
from scipy import integrate

from kacgas.kernel import neumann_kernel
from kacgas.pde import (
    DensityField,
    DensityPath,
    FieldInvariantError,
    StabilityError,
    StationaryNotConverged,
    _march,
    compute_constants,
    contraction_check,
    convolve,
    evolve,
    l1_distance,
    operator_for,
    random_profile,
    stationary_multiplicity,
    stationary_profile,
    stationary_residual,
    step_mass_balance,
    uniform_grid,
)


def _generic(n, rm=0.2, rp=0.8):
    return DensityField.from_function(lambda u: 0.5 + 0.3 * u + 0.2 * np.sin(np.pi * u), n, rm, rp)


def test_density_field_invariants():
    u = uniform_grid(4)
    with pytest.raises(FieldInvariantError):
        DensityField(u, [0.1, 0.5, 0.5, 0.5, 0.8], 0.2, 0.8)
    with pytest.raises(FieldInvariantError):
        DensityField(u, [0.2, 1.1, 0.5, 0.5, 0.8], 0.2, 0.8)
    DensityField(u, [0.2, 1.0 + 5e-7, 0.5, 0.5, 0.8], 0.2, 0.8)
    with pytest.raises(ValueError):
        DensityField(u, [0.2, 0.8], 0.2, 0.8)
    f = DensityField.linear(4, 0.2, 0.8)
    assert f.interpolate(0.25) == pytest.approx(0.575)


def test_convolve_constant_field():
    f = DensityField.from_function(lambda u: 0.37 + 0 * u, 200, 0.37, 0.37)
    k = convolve(f)
    assert np.max(np.abs(k - 0.37)) <= 1e-8
    assert np.max(np.abs(np.diff(k))) / f.h <= 1e-7 / f.h


def test_convolve_linear_field_against_fine_quadrature():
    n = 200
    u = uniform_grid(n)
    op = operator_for(u)
    k = op(u)
    rng = np.random.default_rng(3)
    for j in rng.choice(n + 1, 10, replace=False):
        oracle, _ = integrate.quad(lambda v: neumann_kernel(u[j], v) * v, -1, 1, epsabs=1e-13,
                                   epsrel=1e-12, limit=400,
                                   points=[p for p in (u[j] - 1, 1 - u[j], -1 - u[j], u[j] + 1) if -1 < p < 1])
        assert abs(k[j] - oracle) <= 1e-8


def test_convolution_gradient_matches_difference_quotient():
    u = uniform_grid(400)
    op = operator_for(u)
    rho = 0.5 + 0.3 * np.sin(2 * u)
    g = op.grad(rho)
    k = op(rho)
    fd = (k[2:] - k[:-2]) / (2 * (u[1] - u[0]))
    assert np.max(np.abs(g[1:-1] - fd)) < 1e-3


def test_heat_equation_keeps_linear_profile():
    g = DensityField.linear(100, 0.2, 0.8)
    p = evolve(g, 0.0, 0.5, 0.01)
    assert np.max(np.abs(p.values - g.values)) <= 1e-8


@pytest.mark.parametrize("beta", [0.0, 0.3, 1.0])
def test_constant_profile_is_preserved(beta):
    g = DensityField.from_function(lambda u: 0.4 + 0 * u, 100, 0.4, 0.4)
    p = evolve(g, beta, 0.1, 0.001)
    assert np.max(np.abs(np.diff(p.values, axis=0))) <= 1e-10


def test_mass_balance_every_step():
    beta = 0.05
    g = _generic(200)
    dt = 1e-3
    p = evolve(g, beta, 0.1, dt)
    op = operator_for(g.u)
    for m in range(p.times.size - 1):
        assert step_mass_balance(p.values[m], p.values[m + 1], beta, dt, g.h, op) <= 1e-10


def test_self_convergence_under_refinement():
    finals = []
    for n, dt in ((50, 0.004), (100, 0.002), (200, 0.001)):
        finals.append(evolve(_generic(n), 0.1, 0.2, dt).final())
    # compare on the coarsest nodes
    e1 = l1_distance(finals[0].values, finals[1].values[::2], finals[0].h)
    e2 = l1_distance(finals[1].values[::2], finals[2].values[::4], finals[0].h)
    assert e1 / e2 >= 1.8


def test_stability_violation_is_rejected():
    g = _generic(100)
    with pytest.raises(StabilityError):
        evolve(g, 10.0, 0.1, 0.01)
    with pytest.raises(ValueError):
        evolve(g, -1.0, 0.1, 0.01)
    with pytest.raises(ValueError):
        evolve(g, 0.0, 0.105, 0.01)


def test_invariant_violation_aborts_run():
    g = DensityField.from_function(lambda u: 0.5 + 0.45 * np.sin(np.pi * u), 100, 0.5, 0.5)
    with pytest.raises(FieldInvariantError):
        _march(g, 200.0, 0.5, 0.05, operator_for(g.u), check_stability=False)


def test_stationary_profile_heat_case():
    r = stationary_profile(0.0, 0.2, 0.8, n_cells=200)
    assert np.max(np.abs(r.field.values - (0.5 + 0.3 * r.field.u))) <= 1e-8


@pytest.mark.parametrize("beta", [0.0, 0.05, 0.5])
def test_stationary_profile_equal_reservoirs(beta):
    r = stationary_profile(beta, 0.35, 0.35, n_cells=100)
    assert np.max(np.abs(r.field.values - 0.35)) <= 1e-10


def test_stationary_profile_time_march_and_picard_agree():
    beta = 0.5 * compute_constants().beta0
    r = stationary_profile(beta, 0.2, 0.8, n_cells=200)
    assert r.residual <= 1e-8
    assert r.picard is not None
    assert r.picard_gap <= 1e-6


def test_stationary_profile_is_stationary_under_evolve():
    beta = 0.5 * compute_constants().beta0
    r = stationary_profile(beta, 0.2, 0.8, n_cells=200)
    p = evolve(r.field, beta, 1.0, 0.01)
    assert np.max(np.abs(p.values - r.field.values)) <= 1e-6
    h = r.field.h
    assert np.max(np.abs(stationary_residual(r.field.values, beta, h, operator_for(r.field.u)))) <= 1e-8


def test_stationary_profile_reports_nonconvergence():
    with pytest.raises(StationaryNotConverged) as exc:
        stationary_profile(0.01, 0.2, 0.8, n_cells=100, max_steps=3, tol=1e-12)
    assert exc.value.iterations == 3
    with pytest.raises(ValueError):
        stationary_profile(-0.1, 0.2, 0.8)


def test_constants():
    c = compute_constants()
    assert c.c_of_beta(0.0) == pytest.approx(math.pi ** 2 / 4, rel=1e-14)
    assert c.a == pytest.approx(1.0 / (6 * c.S ** 2))
    assert 0.25 + 0.5 * c.a * c.S ** 2 == pytest.approx(1.0 / 3.0)
    assert c.C_lambda == pytest.approx(4 / math.pi ** 2)
    # root of c(beta): substituting a gives 1/(1/3 + 3 S^2 C_lambda)
    assert c.beta0 == pytest.approx(1.0 / (1.0 / 3.0 + 3 * c.S ** 2 * c.C_lambda), rel=1e-14)
    assert abs(c.c_of_beta(c.beta0)) < 1e-12
    assert c.c_of_beta(0.99 * c.beta0) > 0 > c.c_of_beta(1.01 * c.beta0)
    assert c.a > 0 and c.C_lambda > 0 and c.beta0 > 0


def test_contraction_identical_data():
    g = _generic(100)
    rep = contraction_check(g, g, 0.0, 0.2, 0.01)
    assert np.all(rep.distance == 0.0)
    assert rep.holds


def test_contraction_heat_case():
    rng = np.random.default_rng(4)
    u = uniform_grid(100)
    a = DensityField(u, np.r_[0.2, 0.5 + 0.2 * rng.uniform(-1, 1, 99), 0.8], 0.2, 0.8)
    b = _generic(100)
    rep = contraction_check(a, b, 0.0, 1.0, 1e-3)
    assert rep.holds
    assert np.all(rep.distance / rep.distance[0] <= np.exp(-math.pi ** 2 / 4 * rep.times) * 1.05)


def test_contraction_above_threshold_skips_bound():
    c = compute_constants()
    rep = contraction_check(_generic(50), DensityField.linear(50, 0.2, 0.8), 1.5 * c.beta0, 0.1, 1e-3)
    assert rep.c_beta <= 0
    assert rep.holds is None and rep.bound is None
    assert rep.distance.size == rep.times.size


def test_density_path_helpers():
    g = _generic(20)
    p = DensityPath.frozen(g, 1.0, 4)
    assert p.T == 1.0 and p.dt == 0.25 and p.values.shape == (5, 21)
    assert np.array_equal(p.final().values, g.values)
    assert p.subsample(2).times.tolist() == [0.0, 0.5, 1.0]
    with pytest.raises(ValueError):
        DensityPath(np.arange(3.0), g.u, np.zeros((2, 21)), 0.2, 0.8)


def test_random_profile_respects_band_and_boundary():
    rng = np.random.default_rng(9)
    u = uniform_grid(100)
    for _ in range(20):
        v = random_profile(rng, u, 0.1, 0.9)
        assert v[0] == 0.1 and v[-1] == 0.9
        assert np.all((v > 0) & (v < 1))


def test_multiplicity_report_small_beta_has_one_limit():
    rep = stationary_multiplicity(0.5 * compute_constants().beta0, 0.2, 0.8, n_starts=3, n_cells=50)
    assert rep.failures == 0 and len(rep.profiles) == 3
    assert rep.n_distinct == 1 and rep.max_gap <= 1e-6
    assert rep.as_dict()["starts"] == 3
