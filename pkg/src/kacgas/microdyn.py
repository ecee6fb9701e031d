"""Boundary-driven Kawasaki dynamics in diffusive time.

Bulk particles hop to empty nearest neighbours at rate
``exp(-beta/2 * [H_N(eta^{x,x+1}) - H_N(eta)])``; the end sites exchange
particles with reservoirs of densities ``rho_minus`` and ``rho_plus``.  All rates
are multiplied by ``N^2`` so that clock values are macroscopic times.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .kernel import Configuration, KernelTable, delta_h_exchange
from .observables import CellField, empirical_density

log = logging.getLogger(__name__)

__all__ = [
    "KMCState",
    "SimParams",
    "TiltField",
    "Trajectory",
    "boundary_rate",
    "empirical_pairing",
    "exchange_rate",
    "rate_expansion_residual",
    "kmc_step",
    "rng_stream",
    "sample_bernoulli",
    "simulate",
    "stationary_sample",
    "tilt_factor",
]


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for replica ``stream``; independent of scheduling."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class SimParams:
    N: int
    beta: float
    rho_minus: float
    rho_plus: float
    seed: int = 0
    t_end: float = 1.0
    sample_times: tuple = (0.0,)

    def __post_init__(self):
        object.__setattr__(self, "sample_times", tuple(float(s) for s in self.sample_times))
        errors = []
        if self.N < 2:
            errors.append("N must be >= 2")
        if self.beta < 0:
            errors.append("beta must be >= 0")
        if not 0.0 < self.rho_minus <= self.rho_plus < 1.0:
            errors.append("reservoir densities must satisfy 0 < rho_minus <= rho_plus < 1")
        if self.t_end < 0:
            errors.append("t_end must be >= 0")
        s = np.asarray(self.sample_times)
        if s.size == 0:
            errors.append("at least one sample time is required")
        elif np.any(np.diff(s) <= 0) or s[0] < 0 or s[-1] > self.t_end:
            errors.append("sample_times must be strictly increasing within [0, t_end]")
        if errors:
            raise ValueError("; ".join(errors))


@dataclass
class Trajectory:
    N: int
    times: np.ndarray
    configs: np.ndarray = field(repr=False)
    event_count: int
    final_time: float

    def configuration(self, k: int) -> Configuration:
        return Configuration(self.N, self.configs[k].copy())

    def densities(self) -> list[CellField]:
        return [empirical_density(self.configuration(k)) for k in range(len(self.times))]

    def density_matrix(self) -> np.ndarray:
        """Interior occupancies, one row per sample time (the empirical cell values)."""
        return self.configs[:, 1:-1].astype(float)


@dataclass(frozen=True)
class TiltField:
    """Space-time weights ``F_t(x/N)`` on the lattice, vanishing at ``x = +-N``.

    Values between grid times are linearly interpolated.
    """

    N: int
    times: np.ndarray
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.shape != (times.size, 2 * self.N + 1):
            raise ValueError("tilt values must have shape (len(times), 2N+1)")
        if np.any(np.diff(times) <= 0):
            raise ValueError("tilt times must be strictly increasing")
        if np.any(values[:, 0] != 0.0) or np.any(values[:, -1] != 0.0):
            raise ValueError("tilt field must vanish at the boundary sites")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_function(cls, f, N: int, times) -> TiltField:
        """Sample ``f(t, u)`` on the lattice; the boundary trace is forced to exactly zero."""
        times = np.asarray(times, dtype=float)
        u = np.arange(-N, N + 1) / N
        values = np.array([f(t, u) for t in times], dtype=float)
        values[:, 0] = 0.0
        values[:, -1] = 0.0
        return cls(N, times, values)

    @classmethod
    def zero(cls, N: int, t_end: float = 1.0) -> TiltField:
        return cls(N, np.array([0.0, max(t_end, 1e-12)]), np.zeros((2, 2 * N + 1)))

    def at(self, t: float) -> np.ndarray:
        idx = np.arange(2 * self.N + 1)
        return np.array([_engine._tilt_at(self.times, self.values, float(t), i) for i in idx])

    def max_bond_jump(self) -> float:
        return float(np.max(np.abs(np.diff(self.values, axis=1))))


def boundary_rate(zeta: int, rho: float) -> float:
    """Reservoir flip rate ``rho (1 - zeta) + (1 - rho) zeta``."""
    if not 0.0 < rho < 1.0:
        raise ValueError("reservoir density must lie in (0, 1)")
    if zeta not in (0, 1):
        raise ValueError("occupancy must be 0 or 1")
    return rho * (1 - zeta) + (1 - rho) * zeta


def exchange_rate(config: Configuration, x: int, table: KernelTable, beta: float) -> float:
    if not -config.N <= x < config.N:
        raise ValueError(f"bond ({x}, {x + 1}) outside Lambda_N")
    return float(np.exp(-0.5 * beta * delta_h_exchange(config, x, x + 1, table)))


def rate_expansion_residual(config: Configuration, table: KernelTable, beta: float) -> np.ndarray:
    """Per bond, ``|C(x, x+1) - [1 - beta/2 (eta(x+1) - eta(x)) N^-1 grad^N (J_neum * pi)(x/N)]|``.

    ``pi`` is the empirical measure ``N^-1 sum_{|z| < N} eta(z) delta_{z/N}`` and
    ``grad^N g(x/N) = N [g((x+1)/N) - g(x/N)]``.  The residual is ``O(N^-2)``.
    """
    _check_table(config, table)
    N = config.N
    eta = config.occupancy.astype(float)
    inner = eta.copy()
    inner[0] = inner[-1] = 0.0
    conv = table.values @ inner  # (J_neum * pi)(x/N), since table entries carry the 1/N
    d = eta[1:] - eta[:-1]
    first_order = 1.0 - 0.5 * beta * d * (conv[1:] - conv[:-1])
    exact = np.array([exchange_rate(config, x, table, beta) for x in range(-N, N)])
    return np.abs(exact - first_order)


def _check_table(config: Configuration, table: KernelTable):
    if config.N != table.N:
        raise ValueError("configuration and kernel table disagree on N")


def empirical_pairing(config: Configuration, f_values: np.ndarray) -> float:
    """``N^-1 sum_{|x| < N} eta(x) F(x/N)`` with ``F`` given at every lattice site."""
    eta = config.occupancy[1:-1].astype(float)
    return float(eta @ np.asarray(f_values)[1:-1]) / config.N


def tilt_factor(config: Configuration, event: tuple, F: TiltField | None, t: float) -> float:
    """Multiplier of an event rate under the tilted dynamics.

    ``event`` is ``("bond", x)`` for the exchange across ``(x, x+1)`` or
    ``("flip", x)`` for a reservoir flip at ``x = +-N``.
    """
    kind, x = event
    if F is None:
        return 1.0
    if kind == "flip":
        if abs(x) != config.N:
            raise ValueError("reservoir flips only happen at x = +-N")
        return 1.0
    if kind != "bond":
        raise ValueError(f"unknown event kind {kind!r}")
    if not -config.N <= x < config.N:
        raise ValueError(f"bond ({x}, {x + 1}) outside Lambda_N")
    f = F.at(t)
    i = x + config.N
    occ = config.occupancy
    return float(np.exp((int(occ[i + 1]) - int(occ[i])) * (f[i] - f[i + 1])))


@dataclass
class KMCState:
    config: Configuration
    t: float
    rng: np.random.Generator = field(repr=False)


def _tilt_arrays(F: TiltField | None, N: int):
    if F is None:
        return np.zeros(0), np.zeros((0, 2 * N + 1))
    if F.N != N:
        raise ValueError("tilt field and lattice disagree on N")
    return F.times, F.values


def event_rates(state: KMCState, table: KernelTable, params: SimParams, F: TiltField | None = None):
    """Every event's ``N^2``-scaled rate (bonds ``x = -N..N-1``, then the left and right reservoirs)."""
    occ = state.config.occupancy
    h = table.values @ occ.astype(float)
    tt, tv = _tilt_arrays(F, params.N)
    return _engine.all_rates(
        occ, h, table.self_energy, params.beta, params.rho_minus, params.rho_plus,
        params.N, tt, tv, float(state.t),
    )


def kmc_step(state: KMCState, table: KernelTable, params: SimParams,
             F: TiltField | None = None) -> tuple[KMCState, tuple]:
    """One direct-method jump.  Returns the new state and the event that fired."""
    if state.config.N != table.N or params.N != table.N:
        raise ValueError("state, table and params must share N")
    rates = event_rates(state, table, params, F)
    total = rates.sum()
    assert total > 0.0, "total jump rate vanished; reservoir rates are always positive"
    rng = state.rng
    dt = rng.exponential(1.0 / total)
    e = int(np.searchsorted(np.cumsum(rates), rng.random() * total, side="right"))
    e = min(e, rates.size - 1)
    while rates[e] == 0.0:  # guard against landing on a null event at a cumsum tie
        e -= 1
    N = params.N
    if e < 2 * N:
        x = e - N
        config = state.config.exchanged(x, x + 1)
        event = ("bond", x)
    else:
        x = -N if e == 2 * N else N
        config = state.config.flipped(x)
        event = ("flip", x)
    return KMCState(config, state.t + dt, rng), event


def _thinning_bound(table: KernelTable, beta: float, F: TiltField | None) -> float:
    bound = np.exp(0.5 * beta * table.interaction_bound())
    if F is not None:
        bound *= np.exp(F.max_bond_jump())
    return float(bound) * (1.0 + 1e-12)


def simulate(params: SimParams, table: KernelTable, initial: Configuration,
             F: TiltField | None = None, stream: int = 0, method: str = "thinning",
             rng: np.random.Generator | None = None) -> Trajectory:
    """Run the chain from ``initial`` at time 0 and record it at ``params.sample_times``.

    ``method="thinning"`` (default) uses uniformization with a rigorous rate
    bound; ``method="direct"`` recomputes every rate per jump.  Both are exact.
    """
    if not (params.N == table.N == initial.N):
        raise ValueError("params, table and initial configuration must share N")
    rng = rng if rng is not None else rng_stream(params.seed, stream)
    occ = initial.occupancy.copy()
    samples = np.asarray(params.sample_times, dtype=float)
    tt, tv = _tilt_arrays(F, params.N)
    if method == "thinning":
        out, events, t_last = _engine.run_thinning(
            occ, table.bond_gradients, table.self_energy, table.bond_bounds, float(params.beta),
            params.rho_minus, params.rho_plus, params.N, samples, float(params.t_end),
            _thinning_bound(table, params.beta, F), tt, tv, rng,
        )
    elif method == "direct":
        out, events, t_last = _engine.run_direct(
            occ, table.values, table.self_energy, float(params.beta), params.rho_minus,
            params.rho_plus, params.N, 0.0, samples, float(params.t_end), tt, tv, rng,
        )
    else:
        raise ValueError(f"unknown method {method!r}")
    return Trajectory(params.N, samples, out, int(events), float(t_last))


def sample_bernoulli(profile, N: int, seed=0) -> Configuration:
    """Product measure with ``P(eta(x) = 1) = profile(x/N)``.

    ``profile`` is a ``DensityField``, a callable of ``u`` or a constant;
    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    u = np.arange(-N, N + 1) / N
    if hasattr(profile, "interpolate"):
        p = profile.interpolate(u)
    elif callable(profile):
        p = np.asarray(profile(u), dtype=float)
    else:
        p = np.full(u.shape, float(profile))
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("profile values must lie in [0, 1]")
    rng = seed if isinstance(seed, np.random.Generator) else rng_stream(int(seed), 0)
    return Configuration(N, (rng.random(u.size) < p).astype(np.int8))


def stationary_sample(params: SimParams, table: KernelTable, burn_in: float, n_samples: int,
                      thinning: float, initial: Configuration | None = None,
                      stream: int = 0) -> CellField:
    """Time average of the empirical density along one long chain after ``burn_in``.

    The chain starts from the product measure at the mean reservoir density
    unless ``initial`` is given.  The returned field carries the standard error
    of the sample mean (ignoring autocorrelation) in ``stderr``.
    """
    if burn_in <= 0 or thinning <= 0 or n_samples < 1:
        raise ValueError("burn_in and thinning must be positive and n_samples >= 1")
    rng = rng_stream(params.seed, stream)
    if initial is None:
        initial = sample_bernoulli(0.5 * (params.rho_minus + params.rho_plus), params.N, rng)
    times = burn_in + thinning * np.arange(n_samples)
    run = SimParams(params.N, params.beta, params.rho_minus, params.rho_plus, params.seed,
                    float(times[-1]), tuple(times))
    traj = simulate(run, table, initial, rng=rng)
    dens = traj.density_matrix()
    mean = dens.mean(axis=0)
    stderr = dens.std(axis=0, ddof=1) / np.sqrt(n_samples) if n_samples > 1 else None
    log.debug("stationary sample: %d events", traj.event_count)
    return CellField.lattice(params.N, mean, stderr=stderr)
