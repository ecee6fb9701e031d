"""Finite-volume solver for the nonlocal boundary value problem

    d_t rho = Lap rho - beta * div( chi(rho) grad(J_neum * rho) ),  rho(-+1) = rho_-+,

with ``chi(rho) = rho (1 - rho)``, its stationary version, and the contraction
constants that control uniqueness of the stationary profile.

Diffusion is backward Euler (tridiagonal solve); the nonlocal drift is explicit
and written as a difference of face fluxes, so the scheme conserves mass up to
boundary fluxes exactly.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .kernel import (
    BaseKernel,
    KernelTable,
    bump_kernel,
    get_kernel,
    neumann_kernel,
    neumann_kernel_du,
    simpson_weights,
    sup_grad,
)

__all__ = [
    "ContractionConstants",
    "ContractionReport",
    "ConvolutionOperator",
    "DensityField",
    "DensityPath",
    "FieldInvariantError",
    "StabilityError",
    "MultiplicityReport",
    "random_profile",
    "stationary_multiplicity",
    "StationaryNotConverged",
    "StationaryResult",
    "chi",
    "compute_constants",
    "contraction_check",
    "convolve",
    "evolve",
    "l1_distance",
    "l2_norm",
    "max_stable_dt",
    "operator_for",
    "step_mass_balance",
    "sigma",
    "stationary_profile",
    "stationary_residual",
    "uniform_grid",
]

BAND = 1e-6


class FieldInvariantError(ValueError):
    """A density left [-1e-6, 1 + 1e-6] or lost its Dirichlet data."""


class StabilityError(ValueError):
    """Time step too large for the explicit drift."""


class StationaryNotConverged(RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def chi(rho):
    return rho * (1.0 - rho)


def sigma(rho):
    return 2.0 * rho * (1.0 - rho)


def uniform_grid(n_cells: int) -> np.ndarray:
    if n_cells < 2:
        raise ValueError("need at least two cells")
    return np.linspace(-1.0, 1.0, n_cells + 1)


@dataclass
class DensityField:
    """Nodal density on a uniform grid of [-1, 1] with Dirichlet data at both ends."""

    u: np.ndarray
    values: np.ndarray
    rho_minus: float
    rho_plus: float

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.values = np.array(self.values, dtype=float)
        if self.u.shape != self.values.shape or self.u.ndim != 1:
            raise ValueError("grid and values must be 1-d arrays of equal length")
        if self.values[0] != self.rho_minus or self.values[-1] != self.rho_plus:
            raise FieldInvariantError("endpoint values must equal the Dirichlet data")
        check_band(self.values)

    @classmethod
    def from_function(cls, f, n_cells: int, rho_minus: float, rho_plus: float) -> DensityField:
        u = uniform_grid(n_cells)
        v = np.asarray(f(u), dtype=float) * np.ones_like(u)
        v[0], v[-1] = rho_minus, rho_plus
        return cls(u, v, rho_minus, rho_plus)

    @classmethod
    def linear(cls, n_cells: int, rho_minus: float, rho_plus: float) -> DensityField:
        return cls.from_function(
            lambda u: 0.5 * (rho_minus + rho_plus) + 0.5 * (rho_plus - rho_minus) * u,
            n_cells, rho_minus, rho_plus,
        )

    @property
    def h(self) -> float:
        return float(self.u[1] - self.u[0])

    @property
    def n_cells(self) -> int:
        return self.u.size - 1

    def interpolate(self, x) -> np.ndarray:
        return np.interp(x, self.u, self.values)

    def with_values(self, values) -> DensityField:
        return DensityField(self.u, values, self.rho_minus, self.rho_plus)


def check_band(values):
    lo, hi = float(np.min(values)), float(np.max(values))
    if lo < -BAND or hi > 1.0 + BAND:
        raise FieldInvariantError(f"density left [0, 1] band: min={lo:.3e}, max={hi:.3e}")


@dataclass
class DensityPath:
    """Density fields on a uniform time grid; row ``m`` of ``values`` is time ``times[m]``."""

    times: np.ndarray
    u: np.ndarray
    values: np.ndarray = field(repr=False)
    rho_minus: float
    rho_plus: float

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.times.size, self.u.size):
            raise ValueError("path values must have shape (n_times, n_nodes)")

    @property
    def T(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0]) if self.times.size > 1 else 0.0

    @property
    def h(self) -> float:
        return float(self.u[1] - self.u[0])

    def field(self, m: int) -> DensityField:
        return DensityField(self.u, self.values[m], self.rho_minus, self.rho_plus)

    def final(self) -> DensityField:
        return self.field(-1)

    def subsample(self, every: int) -> DensityPath:
        return DensityPath(self.times[::every], self.u, self.values[::every],
                           self.rho_minus, self.rho_plus)

    @classmethod
    def frozen(cls, field_: DensityField, T: float, n_steps: int) -> DensityPath:
        """Time-independent path equal to ``field_`` on ``[0, T]``."""
        times = np.linspace(0.0, T, n_steps + 1)
        return cls(times, field_.u, np.tile(field_.values, (times.size, 1)),
                   field_.rho_minus, field_.rho_plus)


class ConvolutionOperator:
    """``rho -> J_neum * rho`` (and its gradient) at the grid nodes.

    Node values are interpolated linearly onto a grid ``refine`` times finer and
    integrated against the kernel with composite Simpson, so the operator is a
    dense matrix applied to node values.
    """

    def __init__(self, u: np.ndarray, refine: int = 16, kernel: BaseKernel | None = None):
        if refine < 2 or refine % 2:
            raise ValueError("refine must be an even integer >= 2")
        self.kernel = kernel or bump_kernel()
        self.u = np.asarray(u, dtype=float)
        n = self.u.size - 1
        fine = np.linspace(-1.0, 1.0, n * refine + 1)
        w = simpson_weights(n * refine)
        # hat-function interpolation from nodes to the fine grid
        interp = np.zeros((fine.size, n + 1))
        cell = np.minimum((np.arange(fine.size) // refine), n - 1)
        frac = (fine - self.u[cell]) / (self.u[cell + 1] - self.u[cell])
        rows = np.arange(fine.size)
        interp[rows, cell] = 1.0 - frac
        interp[rows, cell + 1] += frac
        k_val = neumann_kernel(self.u[:, None], fine[None, :], self.kernel) * w
        k_du = neumann_kernel_du(self.u[:, None], fine[None, :], self.kernel) * w
        self.matrix = k_val @ interp
        self.grad_matrix = k_du @ interp

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return self.matrix @ values

    def grad(self, values: np.ndarray) -> np.ndarray:
        """``d/du (J_neum * rho)`` at the nodes, differentiating the kernel exactly."""
        return self.grad_matrix @ values


@functools.lru_cache(maxsize=16)
def _cached_operator(n_cells: int, refine: int, kernel_name: str) -> ConvolutionOperator:
    return ConvolutionOperator(uniform_grid(n_cells), refine, get_kernel(kernel_name))


def operator_for(u: np.ndarray, refine: int = 16, kernel: BaseKernel | None = None) -> ConvolutionOperator:
    kernel = kernel or bump_kernel()
    n = u.size - 1
    if np.allclose(u, uniform_grid(n), atol=1e-14, rtol=0):
        return _cached_operator(n, refine, kernel.name)
    return ConvolutionOperator(u, refine, kernel)


def convolve(field_: DensityField, refine: int = 16) -> np.ndarray:
    """``(J_neum * rho)(u_j)`` at every node of the field's grid."""
    return operator_for(field_.u, refine)(field_.values)


def _face_drift_flux(values, beta, conv, h, extra_grad=None):
    """Drift flux at the ``n`` cell faces ``j+1/2``.

    ``chi`` at a face is the average of its two neighbours; the face gradient of
    the convolution is a centred difference.  ``extra_grad`` adds ``2 * grad F``
    per face (the tilt of the perturbed equation, written with ``sigma = 2 chi``).
    """
    c = chi(values)
    chi_face = 0.5 * (c[1:] + c[:-1])
    grad = np.zeros(values.size - 1)
    if beta != 0.0:
        k = conv(values)
        grad = beta * (k[1:] - k[:-1]) / h
    if extra_grad is not None:
        grad = grad + 2.0 * extra_grad
    return chi_face * grad


def _laplacian_banded(n_interior: int, dt: float, h: float) -> np.ndarray:
    r = dt / (h * h)
    ab = np.empty((3, n_interior))
    ab[0, :] = -r
    ab[1, :] = 1.0 + 2.0 * r
    ab[2, :] = -r
    ab[0, 0] = 0.0
    ab[2, -1] = 0.0
    return ab


def max_stable_dt(beta: float, h: float, S: float) -> float:
    return math.inf if beta == 0 else h / (2.0 * beta * S)


def _march(gamma: DensityField, beta: float, T: float, dt: float, conv, extra_grad_at=None,
           check_stability=True, S=None, extra_speed=0.0):
    if T < 0 or dt <= 0:
        raise ValueError("T must be >= 0 and dt > 0")
    h = gamma.h
    S = sup_grad() if S is None else S
    # drift speed is bounded by beta*S plus the extra 2|grad F|
    speed = beta * S + 2.0 * extra_speed
    limit = math.inf if speed == 0 else h / (2.0 * speed)
    if check_stability and dt > limit * (1 + 1e-12):
        raise StabilityError(f"dt={dt} exceeds the explicit drift limit {limit:.4g}")
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * max(1.0, T):
        raise ValueError("T must be an integer multiple of dt")
    n = gamma.n_cells
    ab = _laplacian_banded(n - 1, dt, h)
    r = dt / (h * h)
    rm, rp = gamma.rho_minus, gamma.rho_plus
    out = np.empty((n_steps + 1, n + 1))
    out[0] = gamma.values
    cur = gamma.values.copy()
    for m in range(n_steps):
        extra = extra_grad_at(m * dt) if extra_grad_at is not None else None
        flux = _face_drift_flux(cur, beta, conv, h, extra)
        rhs = cur[1:-1] - dt * (flux[1:] - flux[:-1]) / h
        rhs[0] += r * rm
        rhs[-1] += r * rp
        nxt = np.empty_like(cur)
        nxt[0], nxt[-1] = rm, rp
        nxt[1:-1] = linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
        try:
            check_band(nxt)
        except FieldInvariantError as exc:
            raise FieldInvariantError(f"step {m + 1} (t={(m + 1) * dt:.4g}): {exc}") from None
        out[m + 1] = nxt
        cur = nxt
    times = dt * np.arange(n_steps + 1)
    return DensityPath(times, gamma.u, out, rm, rp)


def evolve(gamma: DensityField, beta: float, T: float, dt: float, refine: int = 16,
           conv: ConvolutionOperator | None = None) -> DensityPath:
    """Time-dependent solution from ``gamma`` on ``[0, T]`` with step ``dt``."""
    if beta < 0:
        raise ValueError("beta must be >= 0")
    conv = conv or operator_for(gamma.u, refine)
    return _march(gamma, beta, T, dt, conv)


def step_mass_balance(before: np.ndarray, after: np.ndarray, beta: float, dt: float,
                      h: float, conv) -> float:
    """Mismatch between the interior mass change of one step and its boundary fluxes."""
    mass_change = h * (after[1:-1].sum() - before[1:-1].sum())
    flux = _face_drift_flux(before, beta, conv, h)
    diffusive = (after[-1] - after[-2]) / h - (after[1] - after[0]) / h
    boundary = dt * (diffusive - (flux[-1] - flux[0]))
    return float(abs(mass_change - boundary))


def stationary_residual(values: np.ndarray, beta: float, h: float, conv) -> np.ndarray:
    """Discrete ``Lap rho - div(beta chi grad J*rho)`` at the interior nodes."""
    lap = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / (h * h)
    flux = _face_drift_flux(values, beta, conv, h)
    return lap - (flux[1:] - flux[:-1]) / h


@dataclass
class StationaryResult:
    field: DensityField
    residual: float
    steps: int
    picard: DensityField | None = None
    picard_iterations: int | None = None
    picard_gap: float | None = None


def _picard(initial: np.ndarray, beta: float, h: float, conv, rm: float, rp: float,
            tol: float, max_iter: int):
    n = initial.size - 1
    ab = np.empty((3, n - 1))
    ab[0, :] = 1.0
    ab[1, :] = -2.0
    ab[2, :] = 1.0
    ab[0, 0] = 0.0
    ab[2, -1] = 0.0
    cur = initial.copy()
    for it in range(1, max_iter + 1):
        flux = _face_drift_flux(cur, beta, conv, h)
        rhs = h * (flux[1:] - flux[:-1])
        rhs[0] -= rm
        rhs[-1] -= rp
        nxt = cur.copy()
        nxt[1:-1] = linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
        check_band(nxt)
        change = float(np.max(np.abs(nxt - cur)))
        cur = nxt
        if change <= tol:
            return cur, it
    raise StationaryNotConverged(f"Picard iteration did not converge in {max_iter} steps",
                                 residual=change, iterations=max_iter)


def stationary_profile(beta: float, rho_minus: float, rho_plus: float, n_cells: int = 200,
                       dt: float | None = None, tol: float = 1e-8, max_steps: int = 200_000,
                       refine: int = 16, initial: DensityField | None = None,
                       picard: bool = True, picard_tol: float = 1e-12,
                       picard_max_iter: int = 10_000) -> StationaryResult:
    """Stationary profile by time marching until the sup-norm residual is ``<= tol``.

    A Picard iteration (Laplace-Dirichlet solve with frozen drift) is run from
    the same seed as an independent check; its gap to the marched profile is
    reported.  Picard failure is recorded, not raised, since it may diverge where
    the stationary problem has several solutions.
    """
    if beta < 0:
        raise ValueError("beta must be >= 0")
    u = uniform_grid(n_cells)
    h = u[1] - u[0]
    conv = operator_for(u, refine)
    start = initial if initial is not None else DensityField.linear(n_cells, rho_minus, rho_plus)
    if dt is None:
        dt = min(0.05, 0.9 * max_stable_dt(beta, h, sup_grad()))
    ab = _laplacian_banded(n_cells - 1, dt, h)
    r = dt / (h * h)
    cur = start.values.copy()
    res = float(np.max(np.abs(stationary_residual(cur, beta, h, conv))))
    steps = 0
    while res > tol:
        if steps >= max_steps:
            raise StationaryNotConverged(
                f"time marching stalled at residual {res:.3e} after {steps} steps",
                residual=res, iterations=steps)
        flux = _face_drift_flux(cur, beta, conv, h)
        rhs = cur[1:-1] - dt * (flux[1:] - flux[:-1]) / h
        rhs[0] += r * rho_minus
        rhs[-1] += r * rho_plus
        cur[1:-1] = linalg.solve_banded((1, 1), ab, rhs, check_finite=False)
        check_band(cur)
        res = float(np.max(np.abs(stationary_residual(cur, beta, h, conv))))
        steps += 1
    result = StationaryResult(DensityField(u, cur, rho_minus, rho_plus), res, steps)
    if picard:
        try:
            pv, its = _picard(start.values, beta, h, conv, rho_minus, rho_plus,
                              picard_tol, picard_max_iter)
        except (StationaryNotConverged, FieldInvariantError):
            return result
        result.picard = DensityField(u, pv, rho_minus, rho_plus)
        result.picard_iterations = its
        result.picard_gap = float(np.max(np.abs(pv - cur)))
    return result


def random_profile(rng, u, rho_minus, rho_plus, n_modes: int = 6):
    """Random profile in (0, 1) with the given boundary values: linear part plus damped sines."""
    base = 0.5 * (rho_minus + rho_plus) + 0.5 * (rho_plus - rho_minus) * u
    k = np.arange(1, n_modes + 1)
    coeffs = rng.uniform(-1, 1, n_modes) / k
    bump = np.sin(np.multiply.outer(u + 1.0, k) * np.pi / 2.0) @ coeffs
    room = np.minimum(base, 1.0 - base)
    scale = 0.9 * np.min(np.where(np.abs(bump) > 1e-12, room / np.maximum(np.abs(bump), 1e-12), np.inf))
    vals = base + min(scale, 1.0) * bump
    vals[0], vals[-1] = rho_minus, rho_plus
    return vals


@dataclass
class MultiplicityReport:
    """Stationary profiles reached from several starting profiles; no interpretation attached."""

    beta: float
    profiles: list
    failures: int
    max_gap: float
    n_distinct: int

    def as_dict(self) -> dict:
        return {"beta": self.beta, "starts": len(self.profiles) + self.failures, "failures": self.failures,
                "max_gap": self.max_gap, "n_distinct": self.n_distinct}


def stationary_multiplicity(beta: float, rho_minus: float, rho_plus: float, n_starts: int = 5,
                            seed: int = 0, n_cells: int = 200, tol: float = 1e-8,
                            distinct_tol: float = 1e-6, max_steps: int = 200_000) -> MultiplicityReport:
    """March to stationarity from ``n_starts`` random profiles and count distinct limits.

    Profiles whose sup-norm gap exceeds ``distinct_tol`` count as distinct.
    Starts that do not converge are counted in ``failures``.
    """
    rng = np.random.default_rng(seed)
    u = uniform_grid(n_cells)
    found, failures = [], 0
    for _ in range(n_starts):
        start = DensityField(u, random_profile(rng, u, rho_minus, rho_plus), rho_minus, rho_plus)
        try:
            found.append(stationary_profile(beta, rho_minus, rho_plus, n_cells, tol=tol, initial=start,
                                            picard=False, max_steps=max_steps).field)
        except StationaryNotConverged:
            failures += 1
    reps = []
    max_gap = 0.0
    for f in found:
        gaps = [float(np.max(np.abs(f.values - r.values))) for r in reps]
        max_gap = max([max_gap] + gaps)
        if all(g > distinct_tol for g in gaps):
            reps.append(f)
    return MultiplicityReport(beta, found, failures, max_gap, len(reps))


@dataclass(frozen=True)
class ContractionConstants:
    S: float
    a: float
    C_lambda: float
    beta0: float

    def c_of_beta(self, beta: float) -> float:
        """Decay rate ``(1 - beta/3)/C_lambda - beta/(2a)``; positive iff ``beta < beta0``."""
        return (1.0 - beta / 3.0) / self.C_lambda - beta / (2.0 * self.a)

    def as_dict(self) -> dict:
        return {"S": self.S, "a": self.a, "C_lambda": self.C_lambda, "beta0": self.beta0,
                "c_of_0": self.c_of_beta(0.0)}


def compute_constants(table: KernelTable | None = None, S: float | None = None) -> ContractionConstants:
    """Constants of the L2 contraction estimate for the chosen kernel.

    ``a`` makes ``1/4 + a S^2 / 2 = 1/3``; ``C_lambda = 4/pi^2`` is the Poincare
    constant of (-1, 1); ``beta0`` is the root of ``c(beta)``.
    """
    if S is None:
        S = table.sup_grad if table is not None else sup_grad()
    a = 1.0 / (6.0 * S * S)
    C = 4.0 / math.pi ** 2
    beta0 = 1.0 / (1.0 / 3.0 + C / (2.0 * a))
    return ContractionConstants(S=S, a=a, C_lambda=C, beta0=beta0)


def l2_norm(values: np.ndarray, h: float) -> float:
    w = np.full(values.shape[-1], h)
    w[0] = w[-1] = 0.5 * h
    return float(np.sqrt(np.sum(w * values * values)))


def l1_distance(a: np.ndarray, b: np.ndarray, h: float) -> float:
    w = np.full(a.shape[-1], h)
    w[0] = w[-1] = 0.5 * h
    return float(np.sum(w * np.abs(a - b)))


@dataclass
class ContractionReport:
    beta: float
    c_beta: float
    times: np.ndarray
    distance: np.ndarray
    bound: np.ndarray | None
    tol: float
    holds: bool | None

    def as_dict(self) -> dict:
        return {
            "beta": self.beta, "c_beta": self.c_beta, "tol": self.tol, "holds": self.holds,
            "times": self.times.tolist(), "distance": self.distance.tolist(),
            "bound": None if self.bound is None else self.bound.tolist(),
        }


def contraction_check(rho_a: DensityField, rho_b: DensityField, beta: float, T: float,
                      dt: float = 1e-3, constants: ContractionConstants | None = None,
                      tol: float = 0.05, every: int = 1) -> ContractionReport:
    """Evolve two initial data and compare ``||rho_a(t) - rho_b(t)||_2`` with ``e^{-c t}``.

    The verdict ``holds`` is ``None`` when ``c(beta) <= 0`` (no bound to check).
    """
    constants = constants or compute_constants()
    conv = operator_for(rho_a.u)
    pa = evolve(rho_a, beta, T, dt, conv=conv)
    pb = evolve(rho_b, beta, T, dt, conv=conv)
    h = rho_a.h
    times = pa.times[::every]
    v = np.array([l2_norm(x - y, h) for x, y in zip(pa.values[::every], pb.values[::every])])
    c = constants.c_of_beta(beta)
    if c <= 0:
        return ContractionReport(beta, c, times, v, None, tol, None)
    bound = np.exp(-c * times) * v[0] * (1.0 + tol)
    holds = bool(np.all(v <= bound + 1e-15))
    return ContractionReport(beta, c, times, v, bound, tol, holds)
