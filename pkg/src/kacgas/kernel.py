"""Kac interaction on [-1, 1] with reflection at the endpoints.

The base kernel ``J(0, r)`` is a smooth, even probability density supported on
``|r| <= 1``.  Reflecting it at both boundaries gives a symmetric kernel whose
rows integrate to one on the closed interval; its lattice restriction
``J_N(x, y) = J_neum(x/N, y/N) / N`` sets the pair energy of the particle system.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

__all__ = [
    "BaseKernel",
    "Configuration",
    "KernelTable",
    "bump_kernel",
    "build_kernel_table",
    "delta_h_exchange",
    "hamiltonian",
    "neumann_kernel",
    "neumann_kernel_du",
    "row_integrals",
    "sup_grad",
    "simpson_weights",
]

_DOMAIN_TOL = 1e-12


def _bump(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1.0
    ri = r[inside]
    out[inside] = np.exp(-1.0 / (1.0 - ri * ri))
    return out


def _bump_prime(r):
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = np.abs(r) < 1.0
    ri = r[inside]
    q = 1.0 - ri * ri
    out[inside] = -2.0 * ri / (q * q) * np.exp(-1.0 / q)
    return out


@dataclass(frozen=True)
class BaseKernel:
    """Translation-invariant profile ``r -> J(0, r)`` normalized to unit mass."""

    name: str
    profile: object = field(repr=False, compare=False)
    derivative: object = field(repr=False, compare=False)
    norm: float = 1.0

    def __call__(self, r):
        return self.profile(r) / self.norm

    def grad(self, r):
        return self.derivative(r) / self.norm

    def total_mass(self) -> float:
        val, _ = integrate.quad(self, -1.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
        return val


@functools.lru_cache(maxsize=None)
def bump_kernel() -> BaseKernel:
    """Standard mollifier ``exp(-1/(1-r^2))`` rescaled to a probability density."""
    z, _ = integrate.quad(
        lambda r: float(_bump(np.array([r]))[0]), -1.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200
    )
    return BaseKernel(name="bump", profile=_bump, derivative=_bump_prime, norm=z)


KERNELS = {"bump": bump_kernel}


def get_kernel(name: str = "bump") -> BaseKernel:
    try:
        return KERNELS[name]()
    except KeyError:
        raise ValueError(f"unknown kernel profile {name!r}; known: {sorted(KERNELS)}") from None


def _check_domain(*arrays):
    for a in arrays:
        a = np.asarray(a)
        if a.size and (np.min(a) < -1.0 - _DOMAIN_TOL or np.max(a) > 1.0 + _DOMAIN_TOL):
            raise ValueError("kernel arguments must lie in [-1, 1]")


def neumann_kernel(u, v, kernel: BaseKernel | None = None):
    """``J(u,v) + J(u,2-v) + J(u,-2-v)`` for ``u, v`` in [-1, 1] (broadcasting)."""
    kernel = kernel or bump_kernel()
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_domain(u, v)
    out = kernel(v - u) + kernel(2.0 - v - u) + kernel(-2.0 - v - u)
    return out if out.ndim else float(out)


def neumann_kernel_du(u, v, kernel: BaseKernel | None = None):
    """Partial derivative of the reflected kernel in its first argument."""
    kernel = kernel or bump_kernel()
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_domain(u, v)
    out = -kernel.grad(v - u) - kernel.grad(2.0 - v - u) - kernel.grad(-2.0 - v - u)
    return out if out.ndim else float(out)


def simpson_weights(n_intervals: int, a: float = -1.0, b: float = 1.0) -> np.ndarray:
    """Composite Simpson weights on ``n_intervals + 1`` equispaced nodes."""
    if n_intervals < 2 or n_intervals % 2:
        raise ValueError("Simpson's rule needs an even number of intervals >= 2")
    h = (b - a) / n_intervals
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


def row_integrals(u, n_intervals: int = 20000, kernel: BaseKernel | None = None) -> np.ndarray:
    """Simpson quadrature of ``v -> J_neum(u, v)`` over [-1, 1] for each ``u``."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.linspace(-1.0, 1.0, n_intervals + 1)
    w = simpson_weights(n_intervals)
    return np.array([neumann_kernel(ui, v, kernel) @ w for ui in u])


@functools.lru_cache(maxsize=8)
def _sup_grad(kernel_name: str, n_u: int, n_v: int) -> float:
    kernel = get_kernel(kernel_name)
    u = np.linspace(-1.0, 1.0, n_u + 1)
    v = np.linspace(-1.0, 1.0, n_v + 1)
    best = 0.0
    for chunk in np.array_split(v, max(1, n_v // 64)):
        vals = neumann_kernel(u[:, None], chunk[None, :], kernel)
        grad = np.gradient(vals, u, axis=0)
        best = max(best, float(np.max(np.abs(grad))))
    return best


def sup_grad(kernel: BaseKernel | None = None, n_u: int = 10_000, n_v: int = 2_000) -> float:
    """``sup |d/du J_neum(u, v)|`` from centred differences on a 10^4-point grid in ``u``."""
    kernel = kernel or bump_kernel()
    return _sup_grad(kernel.name, n_u, n_v)


@dataclass(frozen=True)
class KernelTable:
    """Lattice pair couplings ``J_N(x, y)`` for ``x, y`` in ``{-N, ..., N}``."""

    N: int
    values: np.ndarray = field(repr=False)
    sup_grad: float
    kernel_name: str = "bump"

    @property
    def sites(self) -> np.ndarray:
        return np.arange(-self.N, self.N + 1)

    def index(self, x: int) -> int:
        if not -self.N <= x <= self.N:
            raise ValueError(f"site {x} outside Lambda_N with N={self.N}")
        return x + self.N

    def __call__(self, x: int, y: int) -> float:
        return float(self.values[self.index(x), self.index(y)])

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)

    def row_sum_error(self) -> float:
        return float(np.max(np.abs(self.row_sums() - 1.0)))

    @functools.cached_property
    def bond_gradients(self) -> np.ndarray:
        """Row ``i`` holds ``J_N(x+1, .) - J_N(x, .)`` for the bond starting at index ``i``."""
        return np.ascontiguousarray(self.values[1:] - self.values[:-1])

    @functools.cached_property
    def self_energy(self) -> np.ndarray:
        """``J_N(x,x+1) - (J_N(x,x) + J_N(x+1,x+1))/2`` per bond; enters every exchange."""
        d = np.diag(self.values)
        off = np.diag(self.values, 1)
        return off - 0.5 * (d[:-1] + d[1:])

    @functools.cached_property
    def bond_bounds(self) -> np.ndarray:
        """Per bond, an upper bound of ``|H_N(eta^{x,x+1}) - H_N(eta)|`` over all configurations."""
        return np.abs(self.bond_gradients).sum(axis=1) + np.abs(self.self_energy)

    def interaction_bound(self) -> float:
        return float(np.max(self.bond_bounds))


def build_kernel_table(N: int, kernel: BaseKernel | None = None) -> KernelTable:
    if N < 2:
        raise ValueError("N must be >= 2")
    kernel = kernel or bump_kernel()
    u = np.arange(-N, N + 1) / N
    values = neumann_kernel(u[:, None], u[None, :], kernel) / N
    values = 0.5 * (values + values.T)  # exact symmetry, removes last-bit asymmetries
    values.setflags(write=False)
    return KernelTable(N=N, values=values, sup_grad=sup_grad(kernel), kernel_name=kernel.name)


@dataclass
class Configuration:
    """Occupation numbers on ``{-N, ..., N}``; index ``i`` is site ``i - N``."""

    N: int
    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.shape != (2 * self.N + 1,):
            raise ValueError(f"occupancy must have length 2N+1={2 * self.N + 1}, got {occ.shape}")
        if not np.all((occ == 0) | (occ == 1)):
            raise ValueError("occupancies must be 0 or 1")
        self.occupancy = occ.astype(np.int8)

    @classmethod
    def empty(cls, N: int) -> Configuration:
        return cls(N, np.zeros(2 * N + 1, dtype=np.int8))

    @classmethod
    def full(cls, N: int) -> Configuration:
        return cls(N, np.ones(2 * N + 1, dtype=np.int8))

    def __getitem__(self, x: int) -> int:
        return int(self.occupancy[self._idx(x)])

    def _idx(self, x: int) -> int:
        if not -self.N <= x <= self.N:
            raise ValueError(f"site {x} outside Lambda_N with N={self.N}")
        return x + self.N

    def exchanged(self, x: int, y: int) -> Configuration:
        occ = self.occupancy.copy()
        i, j = self._idx(x), self._idx(y)
        occ[i], occ[j] = occ[j], occ[i]
        return Configuration(self.N, occ)

    def flipped(self, x: int) -> Configuration:
        occ = self.occupancy.copy()
        i = self._idx(x)
        occ[i] = 1 - occ[i]
        return Configuration(self.N, occ)

    def copy(self) -> Configuration:
        return Configuration(self.N, self.occupancy.copy())

    def __eq__(self, other):
        if not isinstance(other, Configuration):
            return NotImplemented
        return self.N == other.N and np.array_equal(self.occupancy, other.occupancy)


def _check_same_N(config: Configuration, table: KernelTable):
    if config.N != table.N:
        raise ValueError(f"configuration has N={config.N} but kernel table has N={table.N}")


def hamiltonian(config: Configuration, table: KernelTable) -> float:
    """``-1/2 sum_{x,y} J_N(x,y) eta(x) eta(y)``, diagonal included."""
    _check_same_N(config, table)
    eta = config.occupancy.astype(float)
    return -0.5 * float(eta @ table.values @ eta)


def delta_h_exchange(config: Configuration, x: int, y: int, table: KernelTable) -> float:
    """``H_N(eta^{x,y}) - H_N(eta)`` for a nearest-neighbour bond.

    Uses ``(a-b) [h(x) - h(y)] + (a-b)^2 [J(x,y) - (J(x,x)+J(y,y))/2]`` with
    ``a, b = eta(x), eta(y)`` and ``h = J_N eta``; one pass over the kernel rows.
    """
    _check_same_N(config, table)
    if abs(x - y) != 1:
        raise ValueError(f"sites {x} and {y} are not nearest neighbours")
    i, j = table.index(x), table.index(y)
    eta = config.occupancy
    d = int(eta[i]) - int(eta[j])
    if d == 0:
        return 0.0
    J = table.values
    occupied = eta.astype(bool)
    field_diff = J[i, occupied].sum() - J[j, occupied].sum()
    return d * field_diff + (J[i, j] - 0.5 * (J[i, i] + J[j, j]))
