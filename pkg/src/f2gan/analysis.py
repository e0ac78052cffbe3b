"""Grid-based checks of the optimality theory, and sample-quality metrics.

All densities here are :class:`DiscreteDensity` values: per-node masses on a
shared :class:`~f2gan.datagen.GridDomain` that sum to one. Because both sides
of every identity use the same masses, the identities hold to rounding error
no matter how coarse the grid is.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datagen import ClientDistribution, GridDomain, max_density
from .errors import ConfigurationError, NumericDomainError


class OutOfGridWarning(UserWarning):
    """Samples fell outside the reference grid and were clamped to its edge."""


@dataclass(frozen=True)
class DiscreteDensity:
    grid: GridDomain
    mass: np.ndarray

    def __post_init__(self):
        mass = np.asarray(self.mass, dtype=np.float64).reshape(-1)
        if mass.shape[0] != self.grid.size:
            raise ConfigurationError(f"mass has {mass.shape[0]} cells, grid has {self.grid.size}")
        if np.any(mass < 0):
            raise ConfigurationError("masses must be non-negative")
        if abs(mass.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"masses sum to {mass.sum()}, not 1")
        object.__setattr__(self, "mass", mass)

    @classmethod
    def from_values(cls, grid: GridDomain, values) -> "DiscreteDensity":
        """Normalise non-negative node values (density or raw weights) into masses."""
        m = np.asarray(values, dtype=np.float64).reshape(-1) * grid.weights()
        total = m.sum()
        if not total > 0:
            raise ConfigurationError("cannot normalise an all-zero density")
        return cls(grid, m / total)

    @classmethod
    def from_masses(cls, grid: GridDomain, masses) -> "DiscreteDensity":
        m = np.asarray(masses, dtype=np.float64).reshape(-1)
        return cls(grid, m / m.sum())

    @classmethod
    def from_distribution(cls, grid: GridDomain, p: ClientDistribution) -> "DiscreteDensity":
        return cls.from_values(grid, p.density(grid.points()))


def _check_pair(p: DiscreteDensity, q: DiscreteDensity):
    if p.grid != q.grid:
        raise ConfigurationError("densities live on different grids")


@dataclass
class DivergenceReport:
    value: float
    constant_C: float
    alpha: float
    integrand: np.ndarray = field(repr=False, default=None)
    limit_cells: np.ndarray = field(repr=False, default=None)


def optimal_discriminator(p_i, p_g) -> np.ndarray:
    """``p_i / (p_i + p_g)`` per cell, with 0/0 defined as 0."""
    if isinstance(p_i, DiscreteDensity):
        _check_pair(p_i, p_g)
        p_i, p_g = p_i.mass, p_g.mass
    p_i = np.asarray(p_i, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    den = p_i + p_g
    out = np.zeros(np.broadcast(p_i, p_g).shape)
    np.divide(p_i, den, out=out, where=den > 0)
    return out


def _check_alpha(alpha):
    if not 0 < alpha <= 1:
        raise NumericDomainError(f"alpha must lie in (0, 1], got {alpha}")


def _check_x(x):
    if np.any(np.asarray(x) < 0):
        raise NumericDomainError("f is only defined for x >= 0")


def lsgan_constant(alpha: float) -> float:
    return -2.0 * alpha ** 2 / (1.0 + alpha) ** 2


def f_lsgan(x, alpha: float):
    _check_alpha(alpha)
    _check_x(x)
    x = np.asarray(x, dtype=np.float64)
    ax = alpha * x
    return (x + 1.0) * ax * ax / (1.0 + ax) ** 2 + lsgan_constant(alpha)


def f_lsgan_second_derivative(x, alpha: float):
    _check_alpha(alpha)
    _check_x(x)
    x = np.asarray(x, dtype=np.float64)
    return 2.0 * alpha ** 2 * (1.0 + (3.0 - 2.0 * alpha) * x) / (1.0 + alpha * x) ** 4


def bce_constant(alpha: float) -> float:
    return 2.0 * np.log1p(alpha) - np.log(alpha)


def _xlogx(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    pos = x > 0
    out[pos] = x[pos] * np.log(x[pos])
    return out


def f_bce(x, alpha: float):
    _check_alpha(alpha)
    _check_x(x)
    x = np.asarray(x, dtype=np.float64)
    return -(1.0 + x) * np.log1p(alpha * x) + _xlogx(x) + 2.0 * np.log1p(alpha)


def f_bce_second_derivative(x, alpha: float):
    _check_alpha(alpha)
    _check_x(x)
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return (1.0 + alpha ** 2 * x) / (x * (1.0 + alpha * x) ** 2)


def _perspective(f, p, q, alpha, limit_slope):
    # q * f(p / q); where q == 0 the limit p * lim_{x->inf} f(x)/x is used
    integrand = np.zeros_like(q)
    pos = q > 0
    integrand[pos] = q[pos] * f(p[pos] / q[pos], alpha)
    limit = (~pos) & (p > 0)
    integrand[limit] = p[limit] * limit_slope
    return integrand, np.flatnonzero(limit)


def f_divergence_lsgan(p: DiscreteDensity, q: DiscreteDensity, alpha: float) -> DivergenceReport:
    """``sum q f(p/q)`` with the least-squares ``f``.

    Cells with ``q = 0 < p`` contribute ``p`` (the slope of ``f`` at infinity);
    their indices are kept in ``limit_cells``.
    """
    _check_pair(p, q)
    _check_alpha(alpha)
    integrand, lim = _perspective(f_lsgan, p.mass, q.mass, alpha, 1.0)
    return DivergenceReport(float(integrand.sum()), lsgan_constant(alpha), alpha, integrand, lim)


def f_divergence_bce(p: DiscreteDensity, q: DiscreteDensity, alpha: float) -> DivergenceReport:
    """``sum q f(p/q)`` with the cross-entropy ``f``.

    Cells with ``q = 0 < p`` contribute ``-p log(alpha)``.
    """
    _check_pair(p, q)
    _check_alpha(alpha)
    integrand, lim = _perspective(f_bce, p.mass, q.mass, alpha, -np.log(alpha))
    return DivergenceReport(float(integrand.sum()), bce_constant(alpha), alpha, integrand, lim)


def lsgan_generator_objective(p_max: DiscreteDensity, p_g: DiscreteDensity, alpha: float) -> float:
    """Least-squares generator loss against the max-discriminator, by quadrature."""
    _check_pair(p_max, p_g)
    pm, pg = p_max.mass, p_g.mass
    den = (pm + alpha * pg) ** 2
    num = (pm + pg) * alpha ** 2 * pg ** 2
    integrand = np.zeros_like(pm)
    np.divide(num, den, out=integrand, where=den > 0)
    return float(0.5 * integrand.sum())


def bce_generator_objective(p_max: DiscreteDensity, p_g: DiscreteDensity, alpha: float) -> float:
    """Cross-entropy value function against the max-discriminator, by quadrature."""
    _check_pair(p_max, p_g)
    _check_alpha(alpha)
    pm, pg = p_max.mass, p_g.mass
    den = pm + alpha * pg
    out = np.zeros_like(pm)
    a = pm > 0
    out[a] += pm[a] * np.log(pm[a] / den[a])
    b = pg > 0
    out[b] += pg[b] * np.log(alpha * pg[b] / den[b])
    return float(out.sum())


@dataclass
class ModeCoverageReport:
    modes: list
    covered_count: int
    threshold: float

    @property
    def num_modes(self) -> int:
        return len(self.modes)

    @property
    def mass_fractions(self) -> list:
        return [m[2] for m in self.modes]


def mode_coverage(samples, modes: Sequence, radius=1.0, threshold: float = 0.10,
                  allow_empty: bool = False) -> ModeCoverageReport:
    """Share of samples within ``radius`` of each mode centre.

    ``modes`` is a list of centres, or of ``(centre, radius)`` pairs. A mode is
    covered when its share reaches ``threshold``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    entries = []
    for m in modes:
        if isinstance(m, tuple) and len(m) == 2 and np.ndim(m[1]) == 0:
            centre, r = np.atleast_1d(np.asarray(m[0], dtype=np.float64)), float(m[1])
        else:
            centre, r = np.atleast_1d(np.asarray(m, dtype=np.float64)), float(radius)
        if not r > 0:
            raise ConfigurationError("mode radius must be positive")
        entries.append((centre, r))
    if x.shape[0] == 0:
        if not allow_empty:
            raise ConfigurationError("mode_coverage needs at least one sample")
        return ModeCoverageReport([(c.tolist(), r, 0.0) for c, r in entries], 0, threshold)
    out = []
    for centre, r in entries:
        dist = np.linalg.norm(x - centre, axis=1)
        out.append((centre.tolist(), r, float(np.mean(dist <= r))))
    covered = sum(1 for _, _, f in out if f >= threshold)
    return ModeCoverageReport(out, covered, threshold)


def histogram_on_grid(samples, grid: GridDomain) -> tuple:
    """Counts of samples at their nearest grid node; returns ``(counts, n_outside)``."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[1] != grid.dim:
        raise ConfigurationError("sample dimension does not match grid")
    lo = np.array(grid.lower)
    h = grid.spacing()
    idx = np.rint((x - lo) / h).astype(np.int64)
    outside = np.any((idx < 0) | (idx >= grid.points_per_dim), axis=1)
    idx = np.clip(idx, 0, grid.points_per_dim - 1)
    if grid.dim == 1:
        flat = idx[:, 0]
    else:
        flat = idx[:, 0] * grid.points_per_dim + idx[:, 1]
    counts = np.bincount(flat, minlength=grid.size).astype(np.float64)
    return counts, int(outside.sum())


def empirical_divergence(samples, reference: DiscreteDensity, smoothing: float = 1e-9,
                         min_samples: int = 1000) -> float:
    """``KL(histogram(samples) || reference)`` on the reference grid.

    Both sides get ``smoothing`` added to every cell before renormalising.
    Samples beyond the grid are counted in the nearest edge cell and an
    :class:`OutOfGridWarning` is emitted.
    """
    counts, outside = histogram_on_grid(samples, reference.grid)
    n = counts.sum()
    if n < min_samples:
        raise ConfigurationError(f"empirical_divergence needs >= {min_samples} samples, got {int(n)}")
    if outside:
        warnings.warn(f"{outside} samples fell outside the grid", OutOfGridWarning, stacklevel=2)
    p = counts / n + smoothing
    p /= p.sum()
    q = reference.mass + smoothing
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def p_max_reference(clients: Sequence[ClientDistribution], grid: GridDomain) -> DiscreteDensity:
    """``p_max`` discretised on ``grid``."""
    return DiscreteDensity.from_values(grid, max_density(clients, grid.points()))


def lemma_gap(client_masses: np.ndarray, p_g: np.ndarray, Z: Optional[float] = None) -> float:
    """Largest pointwise gap between ``max_i D*_i`` and the ``p_max`` form of it.

    ``client_masses`` is ``(N, cells)``; cells where every density vanishes are
    skipped.
    """
    client_masses = np.asarray(client_masses, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    mx = client_masses.max(axis=0)
    Z = float(mx.sum()) if Z is None else Z
    d_max = optimal_discriminator(client_masses, p_g[None, :]).max(axis=0)
    pm = mx / Z
    alpha = 1.0 / Z
    den = pm + alpha * p_g
    ok = den > 0
    return float(np.max(np.abs(d_max[ok] - pm[ok] / den[ok]), initial=0.0))
