"""Microscopic observables: empirical density, block averages, mollification, replica means."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernel import Configuration

__all__ = [
    "CellField",
    "ReplicaMean",
    "block_average",
    "empirical_density",
    "mollify",
    "replica_mean",
]


@dataclass
class CellField:
    """Piecewise-constant density on cells ``[c - w/2, c + w/2)`` inside [-1, 1].

    Outside the listed cells the density is zero, which is how the empirical
    measure treats the two reservoir sites.
    """

    centers: np.ndarray
    width: float
    values: np.ndarray
    stderr: np.ndarray | None = field(default=None, repr=False)

    @classmethod
    def lattice(cls, N: int, values, stderr=None) -> CellField:
        centers = np.arange(-N + 1, N) / N
        return cls(centers, 1.0 / N, np.asarray(values, dtype=float), stderr)

    @property
    def edges(self) -> np.ndarray:
        return np.append(self.centers - 0.5 * self.width, self.centers[-1] + 0.5 * self.width)

    def cumulative(self, x) -> np.ndarray:
        """``int_{-1}^{x} m(v) dv``, exact for the step function."""
        x = np.clip(np.asarray(x, dtype=float), -1.0, 1.0)
        lo = self.centers - 0.5 * self.width
        overlap = np.clip(x[..., None] - lo, 0.0, self.width)
        return overlap @ self.values

    def __call__(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        idx = np.floor((u - (self.centers[0] - 0.5 * self.width)) / self.width + 1e-12).astype(int)
        inside = (idx >= 0) & (idx < self.centers.size)
        out = np.zeros(u.shape)
        out[inside] = self.values[idx[inside]]
        return out

    def bin_average(self, edges, covered: bool = False) -> np.ndarray:
        """Mean over each bin; with ``covered`` only the part of the bin inside the cells counts."""
        edges = np.asarray(edges, dtype=float)
        c = self.cumulative(edges)
        if not covered:
            return np.diff(c) / np.diff(edges)
        e = self.edges
        length = np.diff(np.clip(edges, e[0], e[-1]))
        return np.diff(c) / length

    def to_nodes(self, nodes) -> np.ndarray:
        """Average over the dual cell of each node (half cells at the ends)."""
        nodes = np.asarray(nodes, dtype=float)
        mid = 0.5 * (nodes[1:] + nodes[:-1])
        edges = np.concatenate(([nodes[0]], mid, [nodes[-1]]))
        return self.bin_average(edges)


def empirical_density(config: Configuration, centers=None) -> CellField:
    """Empirical measure of ``config``: ``eta(x)`` on the cell of ``x/N`` for ``|x| < N``.

    ``centers`` may be passed to assert the grid; it must be ``x/N`` for
    ``x = -N+1..N-1`` (cell width ``1/N``).
    """
    N = config.N
    field_ = CellField.lattice(N, config.occupancy[1:-1].astype(float))
    if centers is not None:
        centers = np.asarray(centers, dtype=float)
        if centers.shape != field_.centers.shape or not np.allclose(centers, field_.centers, atol=1e-12):
            raise ValueError("grid is not the lattice grid with cell width 1/N")
    return field_


def block_average(config: Configuration, x: int, ell: int) -> float:
    """Mean occupation on ``{y : |y - x| <= ell}`` clipped to the lattice.

    At the reservoir sites the window is one-sided with ``ell + 1`` sites.
    """
    N = config.N
    if not -N <= x <= N:
        raise ValueError(f"site {x} outside Lambda_N")
    if ell < 0:
        raise ValueError("window half-width must be >= 0")
    lo = max(-N, x - ell)
    hi = min(N, x + ell)
    window = config.occupancy[lo + N: hi + N + 1]
    return float(window.mean())


def mollify(field_: CellField, epsilon: float, u=None) -> tuple[np.ndarray, np.ndarray] | np.ndarray:
    """``(2 eps)^-1 int_{[u-eps, u+eps] cap [-1,1]} m(v) dv``.

    The window is truncated at the boundary but the normalisation stays
    ``2 eps``.  Returns values at ``u`` if given, else ``(u, values)`` on the cell centres.
    """
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    return_grid = u is None
    u = field_.centers if u is None else np.asarray(u, dtype=float)
    vals = (field_.cumulative(u + epsilon) - field_.cumulative(u - epsilon)) / (2.0 * epsilon)
    return (u, vals) if return_grid else vals


@dataclass
class ReplicaMean:
    times: np.ndarray
    centers: np.ndarray
    width: float
    mean: np.ndarray
    stderr: np.ndarray
    n_replicas: int

    @property
    def stderr_defined(self) -> bool:
        return self.n_replicas > 1

    def field(self, k: int) -> CellField:
        return CellField(self.centers, self.width, self.mean[k], self.stderr[k])


def replica_mean(trajectories) -> ReplicaMean:
    """Pointwise mean and standard error of empirical densities across replicas.

    With a single replica the standard error is undefined and reported as NaN.
    """
    trajectories = list(trajectories)
    if not trajectories:
        raise ValueError("no trajectories given")
    first = trajectories[0]
    for tr in trajectories[1:]:
        if tr.N != first.N or not np.array_equal(tr.times, first.times):
            raise ValueError("replicas have mismatched lattices or sample schedules")
    stack = np.stack([tr.density_matrix() for tr in trajectories])
    n = stack.shape[0]
    mean = stack.mean(axis=0)
    if n > 1:
        stderr = stack.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        stderr = np.full(mean.shape, np.nan)
    N = first.N
    return ReplicaMean(first.times.copy(), np.arange(-N + 1, N) / N, 1.0 / N, mean, stderr, n)
