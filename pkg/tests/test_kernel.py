import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from kacgas.kernel import (
    Configuration,
    bump_kernel,
    build_kernel_table,
    delta_h_exchange,
    hamiltonian,
    neumann_kernel,
    neumann_kernel_du,
    row_integrals,
    simpson_weights,
    sup_grad,
)


def test_bump_is_even_supported_and_normalized():
    J = bump_kernel()
    r = np.linspace(-1.5, 1.5, 301)
    assert np.array_equal(J(r), J(-r))
    assert np.all(J(r[np.abs(r) >= 1.0]) == 0.0)
    assert abs(J.total_mass() - 1.0) < 1e-8


def test_normalization_constant_matches_independent_quadrature():
    z, _ = integrate.quad(lambda r: np.exp(-1.0 / (1.0 - r * r)), -1, 1, epsabs=1e-14)
    assert bump_kernel().norm == pytest.approx(z, rel=1e-12)
    assert z == pytest.approx(0.44399381616807937, rel=1e-10)


def test_bump_derivative_matches_finite_difference():
    J = bump_kernel()
    r = np.linspace(-0.95, 0.95, 41)
    eps = 1e-6
    fd = (J(r + eps) - J(r - eps)) / (2 * eps)
    assert np.allclose(J.grad(r), fd, atol=1e-7)


def test_reflected_kernel_symmetric_and_nonnegative():
    u = np.linspace(-1, 1, 61)
    K = neumann_kernel(u[:, None], u[None, :])
    assert np.allclose(K, K.T, atol=1e-15)
    assert np.all(K >= 0)


def test_reflected_rows_integrate_to_one():
    u = np.linspace(-1, 1, 200)
    assert np.max(np.abs(row_integrals(u) - 1.0)) <= 1e-8


def test_reflected_kernel_rejects_points_outside_interval():
    with pytest.raises(ValueError):
        neumann_kernel(1.2, 0.0)
    with pytest.raises(ValueError):
        neumann_kernel_du(0.0, -1.1)


def test_kernel_derivative_matches_finite_difference():
    u = np.linspace(-0.9, 0.9, 19)
    v = np.linspace(-1, 1, 23)
    eps = 1e-6
    fd = (neumann_kernel(u[:, None] + eps, v[None, :]) - neumann_kernel(u[:, None] - eps, v[None, :])) / (2 * eps)
    assert np.allclose(neumann_kernel_du(u[:, None], v[None, :]), fd, atol=1e-6)


def test_sup_grad_value():
    # max |J'(r)| of the normalized bump; the reflected images only add where the peak is not reached
    r = np.linspace(-1, 1, 200_001)
    S_base = np.max(np.abs(bump_kernel().grad(r)))
    S = sup_grad()
    assert S >= S_base * (1 - 1e-6)
    assert S == pytest.approx(3.596579486989185, rel=1e-6)


def test_simpson_weights_integrate_cubics_exactly():
    w = simpson_weights(10, 0.0, 2.0)
    x = np.linspace(0.0, 2.0, 11)
    assert w @ x ** 3 == pytest.approx(4.0, rel=1e-14)
    with pytest.raises(ValueError):
        simpson_weights(5)


def test_kernel_table_invariants():
    for N in (8, 32):
        t = build_kernel_table(N)
        assert t.values.shape == (2 * N + 1, 2 * N + 1)
        assert np.array_equal(t.values, t.values.T)
        assert np.all(t.values >= 0)
        assert t(3, -2) == t(-2, 3)
    with pytest.raises(ValueError):
        build_kernel_table(1)
    with pytest.raises(ValueError):
        build_kernel_table(4)(5, 0)


def test_row_sums_converge_like_one_over_N():
    errs = [build_kernel_table(N).row_sum_error() for N in (64, 128, 256)]
    assert errs[0] > errs[1] > errs[2]
    # bounded by c/N with a single constant
    c = max(e * N for e, N in zip(errs, (64, 128, 256)))
    assert c < 1.0
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.05)


def test_configuration_validation():
    with pytest.raises(ValueError):
        Configuration(3, np.zeros(6))
    with pytest.raises(ValueError):
        Configuration(2, np.array([0, 1, 2, 0, 1]))
    c = Configuration.empty(3)
    assert c[3] == 0 and Configuration.full(3)[-3] == 1
    with pytest.raises(ValueError):
        c[4]


def test_exchange_and_flip_helpers():
    c = Configuration(2, np.array([1, 0, 0, 1, 0]))
    e = c.exchanged(-2, -1)
    assert list(e.occupancy) == [0, 1, 0, 1, 0]
    assert list(c.flipped(2).occupancy) == [1, 0, 0, 1, 1]
    assert c == Configuration(2, [1, 0, 0, 1, 0])
    assert c.copy() is not c and c.copy() == c


def test_hamiltonian_small_case_by_hand():
    N = 2
    t = build_kernel_table(N)
    occ = np.array([1, 0, 1, 0, 0])
    c = Configuration(N, occ)
    J = t.values
    expected = -0.5 * (J[0, 0] + J[2, 2] + 2 * J[0, 2])
    assert hamiltonian(c, t) == pytest.approx(expected, abs=1e-15)
    assert hamiltonian(Configuration.empty(N), t) == 0.0


def test_delta_h_matches_brute_force_exhaustively():
    N = 3
    t = build_kernel_table(N)
    for bits in itertools.product((0, 1), repeat=2 * N + 1):
        c = Configuration(N, np.array(bits))
        for x in range(-N, N):
            brute = hamiltonian(c.exchanged(x, x + 1), t) - hamiltonian(c, t)
            assert abs(delta_h_exchange(c, x, x + 1, t) - brute) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=4, max_value=32), st.integers(min_value=0, max_value=2**32 - 1))
def test_delta_h_matches_brute_force_random(N, seed):
    rng = np.random.default_rng(seed)
    t = build_kernel_table(N)
    c = Configuration(N, rng.integers(0, 2, 2 * N + 1))
    x = int(rng.integers(-N, N))
    brute = hamiltonian(c.exchanged(x, x + 1), t) - hamiltonian(c, t)
    assert abs(delta_h_exchange(c, x, x + 1, t) - brute) <= 1e-12
    # symmetric in the order of the two sites
    assert delta_h_exchange(c, x + 1, x, t) == pytest.approx(delta_h_exchange(c, x, x + 1, t), abs=1e-14)


def test_delta_h_preconditions():
    t = build_kernel_table(4)
    c = Configuration.full(4)
    with pytest.raises(ValueError):
        delta_h_exchange(c, 0, 2, t)
    with pytest.raises(ValueError):
        delta_h_exchange(Configuration.full(3), 0, 1, t)
    assert delta_h_exchange(c, 0, 1, t) == 0.0


def test_bond_bounds_dominate_every_energy_change():
    N = 6
    t = build_kernel_table(N)
    rng = np.random.default_rng(5)
    for _ in range(200):
        c = Configuration(N, rng.integers(0, 2, 2 * N + 1))
        for x in range(-N, N):
            assert abs(delta_h_exchange(c, x, x + 1, t)) <= t.bond_bounds[x + N] + 1e-14
