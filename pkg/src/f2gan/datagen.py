"""Analytic client distributions, class partitions and quadrature of p_max."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError

PARTITION_SCHEMES = ("non_overlapping", "moderately_overlapping", "fully_overlapping")


class GridAccuracyWarning(UserWarning):
    """The quadrature grid misses a noticeable part of some client's mass."""


@dataclass(frozen=True)
class Gaussian:
    """A 1-D or 2-D normal component."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = mean.shape[0]
        if d not in (1, 2) or cov.shape != (d, d):
            raise ConfigurationError(f"component mean {mean.shape} / cov {cov.shape} invalid")
        if not np.allclose(cov, cov.T):
            raise ConfigurationError("covariance must be symmetric")
        if np.any(np.linalg.eigvalsh(cov) <= 0):
            raise ConfigurationError("covariance must be positive definite (std > 0)")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def gaussian1d(cls, mean: float, std: float) -> "Gaussian":
        if not std > 0:
            raise ConfigurationError("std must be positive")
        return cls(np.array([mean]), np.array([[std * std]]))

    @classmethod
    def gaussian2d(cls, mean, cov) -> "Gaussian":
        return cls(np.asarray(mean, dtype=np.float64), np.asarray(cov, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def max_std(self) -> float:
        return float(np.sqrt(np.max(np.linalg.eigvalsh(self.cov))))

    def pdf(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, self.dim)
        diff = x - self.mean
        if self.dim == 1:
            var = self.cov[0, 0]
            return np.exp(-0.5 * diff[:, 0] ** 2 / var) / np.sqrt(2.0 * np.pi * var)
        inv = np.linalg.inv(self.cov)
        quad = np.einsum("ni,ij,nj->n", diff, inv, diff)
        return np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(np.linalg.det(self.cov)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.dim)) @ chol.T


@dataclass(frozen=True)
class ClientDistribution:
    """Class mixture ``sum_k w_k rho_k(x)`` held by one client."""

    components: tuple
    weights: tuple

    def __post_init__(self):
        comps = tuple(self.components)
        w = tuple(float(v) for v in self.weights)
        if not comps or len(comps) != len(w):
            raise ConfigurationError("components and weights must be non-empty and equally long")
        if any(v < 0 for v in w) or abs(sum(w) - 1.0) > 1e-12:
            raise ConfigurationError(f"mixture weights must be >= 0 and sum to 1, got {w}")
        if len({c.dim for c in comps}) != 1:
            raise ConfigurationError("all components must share one dimension")
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self) -> int:
        return self.components[0].dim

    def density(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 0 or x.shape[-1] != self.dim:
            if self.dim == 1 and x.ndim <= 1:
                x = x.reshape(-1, 1)
            else:
                raise ConfigurationError(f"point dimension {x.shape} does not match {self.dim}")
        out = np.zeros(x.reshape(-1, self.dim).shape[0])
        for c, w in zip(self.components, self.weights):
            if w > 0:
                out += w * c.pdf(x)
        return out

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if n < 1:
            raise ConfigurationError("sample size must be >= 1")
        which = rng.choice(len(self.components), size=n, p=np.asarray(self.weights))
        out = np.empty((n, self.dim))
        for k, c in enumerate(self.components):
            mask = which == k
            if mask.any():
                out[mask] = c.sample(int(mask.sum()), rng)
        return out


def density(p: ClientDistribution, x) -> np.ndarray:
    return p.density(x)


def sample(p: ClientDistribution, n: int, rng: np.random.Generator) -> np.ndarray:
    return p.sample(n, rng)


@dataclass(frozen=True)
class GridDomain:
    """Uniform tensor grid used for trapezoid quadrature and histograms."""

    dim: int
    lower: tuple
    upper: tuple
    points_per_dim: int

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if self.dim not in (1, 2) or len(lo) != self.dim or len(hi) != self.dim:
            raise ConfigurationError("grid bounds must match dim 1 or 2")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ConfigurationError("grid lower bound must be below upper bound")
        if self.points_per_dim < 16:
            raise ConfigurationError("grid needs at least 16 points per dimension")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def axes(self) -> list:
        return [np.linspace(a, b, self.points_per_dim) for a, b in zip(self.lower, self.upper)]

    def spacing(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / (self.points_per_dim - 1)

    def points(self) -> np.ndarray:
        axes = self.axes()
        if self.dim == 1:
            return axes[0].reshape(-1, 1)
        xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def weights(self) -> np.ndarray:
        """Trapezoid weights, flattened in the same order as :meth:`points`."""
        w1 = np.full(self.points_per_dim, 1.0)
        w1[0] = w1[-1] = 0.5
        h = self.spacing()
        if self.dim == 1:
            return w1 * h[0]
        return np.outer(w1 * h[0], w1 * h[1]).ravel()

    def integrate(self, values) -> float:
        return float(np.dot(self.weights(), np.asarray(values, dtype=np.float64)))

    @property
    def size(self) -> int:
        return self.points_per_dim ** self.dim


def default_grid(clients: Sequence[ClientDistribution], points_per_dim: Optional[int] = None,
                 width: float = 6.0) -> GridDomain:
    """Grid spanning every component mean +- ``width`` standard deviations."""
    comps = [c for p in clients for c in p.components]
    dim = comps[0].dim
    std = max(c.max_std for c in comps)
    means = np.array([c.mean for c in comps])
    lower = means.min(axis=0) - width * std
    upper = means.max(axis=0) + width * std
    if points_per_dim is None:
        points_per_dim = 4096 if dim == 1 else 256
    return GridDomain(dim, tuple(lower), tuple(upper), points_per_dim)


def max_density(clients: Sequence[ClientDistribution], x) -> np.ndarray:
    if not clients:
        raise ConfigurationError("need at least one client distribution")
    return np.max(np.stack([p.density(x) for p in clients]), axis=0)


def p_max_density(clients: Sequence[ClientDistribution], Z: float, x) -> np.ndarray:
    """``max_i p_i(x) / Z``."""
    if not Z > 0:
        raise ConfigurationError("normalising constant Z must be positive")
    return max_density(clients, x) / Z


def compute_Z(clients: Sequence[ClientDistribution], grid: GridDomain,
              mass_tolerance: float = 1e-6) -> float:
    """Trapezoid estimate of ``integral max_i p_i``.

    Warns with :class:`GridAccuracyWarning` when some client keeps less than
    ``1 - mass_tolerance`` of its mass on the grid.
    """
    if not clients:
        raise ConfigurationError("need at least one client distribution")
    pts = grid.points()
    dens = np.stack([p.density(pts) for p in clients])
    w = grid.weights()
    masses = dens @ w
    worst = float(masses.min())
    if abs(1.0 - worst) > mass_tolerance:
        warnings.warn(
            f"grid captures only {worst:.9f} of a client's mass; Z may be inaccurate",
            GridAccuracyWarning,
            stacklevel=2,
        )
    return float(np.max(dens, axis=0) @ w)


def partition_classes(K: int, N: int, scheme: str, class_densities: Sequence[Gaussian]) -> list:
    """Assign ``K`` classes to ``N`` clients with uniform within-client weights.

    ``non_overlapping`` splits the classes into contiguous blocks; when ``N`` is
    a multiple of ``K`` each class is instead shared by ``N // K`` clients.
    ``moderately_overlapping`` gives client ``i`` the ``2K/N`` classes starting
    at ``i*K/N`` (wrapping around). ``fully_overlapping`` gives everyone all
    classes.
    """
    if scheme not in PARTITION_SCHEMES:
        raise ConfigurationError(f"unknown partition scheme {scheme!r}")
    if len(class_densities) != K:
        raise ConfigurationError(f"expected {K} class densities, got {len(class_densities)}")
    if N < 1 or K < 1:
        raise ConfigurationError("K and N must be positive")

    if scheme == "fully_overlapping":
        groups = [list(range(K)) for _ in range(N)]
    elif scheme == "non_overlapping":
        if K % N == 0:
            per = K // N
            groups = [list(range(i * per, (i + 1) * per)) for i in range(N)]
        elif N % K == 0:
            share = N // K
            groups = [[i // share] for i in range(N)]
        else:
            raise ConfigurationError(f"non_overlapping needs K divisible by N (K={K}, N={N})")
    else:
        if K % N != 0 or 2 * K // N > K:
            raise ConfigurationError(f"moderately_overlapping needs K divisible by N (K={K}, N={N})")
        step = K // N
        groups = [[(i * step + j) % K for j in range(2 * step)] for i in range(N)]

    clients = []
    for g in groups:
        w = 1.0 / len(g)
        clients.append(ClientDistribution(tuple(class_densities[k] for k in g), tuple([w] * len(g))))
    return clients


def class_groups(clients: Sequence[ClientDistribution], classes: Sequence[Gaussian]) -> list:
    """Indices of ``classes`` held by each client, for reporting."""
    out = []
    for p in clients:
        out.append([k for k, c in enumerate(classes) if any(c is q for q in p.components)])
    return out
