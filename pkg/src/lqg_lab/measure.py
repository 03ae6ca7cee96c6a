"""Approximating Liouville measure ``M_N`` on the grid: masses, ball queries,
volume exponents and moment estimators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .field import FieldStack, Grid, OutOfDomainError
from .report import EstimateReport, FitError, InsufficientSamplesError, mean_and_se, ols
from .rng import as_generator

_SUB = 4  # boundary cells are weighted by a 4x4 sub-sample


class ResolutionError(ValueError):
    """Query radius below the resolvable scale of the grid."""


def alpha_band(gamma: float) -> tuple[float, float]:
    """Volume-decay exponents ``(alpha_1, alpha_2) = ((gamma+2)^2/2, (2-gamma)^2/2)``."""
    return 0.5 * (gamma + 2.0) ** 2, 0.5 * (2.0 - gamma) ** 2


def xi_tilde(q: float, gamma: float) -> float:
    """Negative-moment exponent ``(2 + gamma^2/2) q + (gamma^2/2) q^2``."""
    return (2.0 + gamma * gamma / 2.0) * q + gamma * gamma / 2.0 * q * q


@dataclass(frozen=True)
class LiouvilleGrid:
    grid: Grid
    gamma: float
    masses: np.ndarray
    band_count: int
    variance: float

    def __post_init__(self):
        m = np.asarray(self.masses, dtype=float)
        if m.shape != self.grid.shape:
            raise ValueError(f"mass plane has shape {m.shape}, grid is {self.grid.shape}")
        if not (np.all(np.isfinite(m)) and np.all(m > 0)):
            raise ValueError("cell masses must be strictly positive and finite")
        m.setflags(write=False)
        object.__setattr__(self, "masses", m)

    @property
    def total(self) -> float:
        return math.fsum(self.masses.ravel())

    @property
    def density(self) -> np.ndarray:
        """Cell-constant density of ``M_N`` with respect to Lebesgue measure."""
        return self.masses / self.grid.dx**2

    def box_mass(self, i0: int, i1: int, j0: int, j1: int) -> float:
        """Mass of the rectangle of cells ``[i0, i1) x [j0, j1)``."""
        return math.fsum(self.masses[i0:i1, j0:j1].ravel())


@dataclass(frozen=True)
class ExponentFit:
    slope: float
    intercept: float
    r2: float
    r_min: float
    r_max: float
    slope_se: float


def build_measure(stack: FieldStack, gamma: float | None = None) -> LiouvilleGrid:
    """Cell masses ``exp(gamma X_N(c) - gamma^2 v_N / 2) dx^2`` at the cell centers."""
    gamma = stack.params.gamma if gamma is None else float(gamma)
    if not 0.0 <= gamma < 2.0:
        raise ValueError(f"gamma must lie in [0, 2), got {gamma}")
    dx2 = stack.grid.dx**2
    if gamma == 0.0:
        masses = np.full(stack.grid.shape, dx2)
    else:
        masses = np.exp(gamma * stack.values - 0.5 * gamma * gamma * stack.variance) * dx2
    return LiouvilleGrid(stack.grid, gamma, masses, stack.band_count, stack.variance)


def _ball_weights(grid: Grid, x, r: float):
    """Cell index window and area fraction of each cell inside ``B(x, r)``."""
    dx = grid.dx
    x0, y0 = grid.origin
    i_lo = max(int(math.floor((x[0] - r - x0) / dx)), 0)
    i_hi = min(int(math.ceil((x[0] + r - x0) / dx)), grid.cells)
    j_lo = max(int(math.floor((x[1] - r - y0) / dx)), 0)
    j_hi = min(int(math.ceil((x[1] + r - y0) / dx)), grid.cells)
    # cell edges relative to the center
    ex = x0 + np.arange(i_lo, i_hi + 1) * dx - x[0]
    ey = y0 + np.arange(j_lo, j_hi + 1) * dx - x[1]
    lo_x, hi_x = ex[:-1], ex[1:]
    lo_y, hi_y = ey[:-1], ey[1:]
    near_x = np.where(lo_x > 0, lo_x, np.where(hi_x < 0, -hi_x, 0.0))
    near_y = np.where(lo_y > 0, lo_y, np.where(hi_y < 0, -hi_y, 0.0))
    far_x = np.maximum(np.abs(lo_x), np.abs(hi_x))
    far_y = np.maximum(np.abs(lo_y), np.abs(hi_y))
    near = near_x[:, None] ** 2 + near_y[None, :] ** 2
    far = far_x[:, None] ** 2 + far_y[None, :] ** 2
    r2 = r * r
    w = (far <= r2).astype(float)
    edge = (near < r2) & (far > r2)
    if np.any(edge):
        ii, jj = np.nonzero(edge)
        s = (np.arange(_SUB) + 0.5) / _SUB * dx
        px = lo_x[ii][:, None, None] + s[None, :, None]
        py = lo_y[jj][:, None, None] + s[None, None, :]
        w[ii, jj] = np.mean(px**2 + py**2 <= r2, axis=(1, 2))
    return (i_lo, i_hi, j_lo, j_hi), w


def _check_ball(grid: Grid, x, r: float) -> None:
    if r < 2.0 * grid.dx:
        raise ResolutionError(f"radius {r:.4g} below the minimum 2*dx = {2 * grid.dx:.4g}")
    x0, x1, y0, y1 = grid.bounds
    tol = 1e-12 * grid.side_length
    if x[0] - r < x0 - tol or x[0] + r > x1 + tol or x[1] - r < y0 - tol or x[1] + r > y1 + tol:
        raise OutOfDomainError(f"ball B({tuple(x)}, {r}) is not contained in the grid")


def ball_mass(lg: LiouvilleGrid, x, r: float) -> float:
    """``M_N(B(x, r))``: interior cells in full, boundary cells by 4x4 area fraction."""
    x = np.asarray(x, dtype=float)
    r = float(r)
    _check_ball(lg.grid, x, r)
    (i0, i1, j0, j1), w = _ball_weights(lg.grid, x, r)
    return float(np.sum(w * lg.masses[i0:i1, j0:j1]))


def ball_masses(lg: LiouvilleGrid, x, radii: Iterable[float]) -> np.ndarray:
    return np.array([ball_mass(lg, x, r) for r in radii])


def sample_from_measure(lg: LiouvilleGrid, rng, size: int | None = None) -> np.ndarray:
    """Points with law proportional to ``M_N``: a cell by mass, then uniform within it."""
    g = as_generator(rng)
    cdf = np.cumsum(lg.masses.ravel())
    k = 1 if size is None else int(size)
    u = g.random(k) * cdf[-1]
    idx = np.minimum(np.searchsorted(cdf, u, side="right"), cdf.size - 1)
    i, j = np.divmod(idx, lg.grid.cells)
    jitter = g.random((k, 2))
    pts = np.column_stack([lg.grid.origin[0] + (i + jitter[:, 0]) * lg.grid.dx,
                           lg.grid.origin[1] + (j + jitter[:, 1]) * lg.grid.dx])
    return pts[0] if size is None else pts


def volume_exponent_fit(lg: LiouvilleGrid, x, radii: Sequence[float]) -> ExponentFit:
    """OLS slope of ``log M(B(x, r))`` against ``log r``."""
    radii = np.asarray(sorted(radii), dtype=float)
    if radii.size < 4:
        raise FitError(f"need at least 4 radii, got {radii.size}")
    masses = ball_masses(lg, x, radii)
    fit = ols(np.log(radii), np.log(masses), min_points=4)
    return ExponentFit(fit.slope, fit.intercept, fit.r2, float(radii[0]), float(radii[-1]), fit.slope_se)


def negative_moment(ensemble: Iterable[LiouvilleGrid], q: float, radii, center=(0.0, 0.0),
                    min_replicates: int = 200) -> EstimateReport:
    """Monte Carlo ``E[M(B(center, r))^{-q}]`` over independent realizations.

    With two or more radii the report carries the slope of the log-estimate
    against ``log(1/r)`` under ``fits["slope"]``.
    """
    if q < 0:
        raise ValueError("q must be non-negative")
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    rows = []
    gamma = None
    for lg in ensemble:
        gamma = lg.gamma
        rows.append(ball_masses(lg, center, radii))
    if len(rows) < min_replicates:
        raise InsufficientSamplesError(f"need at least {min_replicates} realizations, got {len(rows)}")
    masses = np.array(rows)
    rep = EstimateReport("negative_moment", provenance={"q": q, "gamma": gamma})
    est = []
    for k, r in enumerate(radii):
        vals = masses[:, k] ** (-q)
        m, se = mean_and_se(vals)
        rep.add(f"r={r:.6g}", m, se, vals.size, m - 3 * se, m + 3 * se, r=r,
                reference=(math.pi * r * r) ** (-q), cap_exponent=xi_tilde(q, gamma))
        est.append(m)
    if radii.size >= 2:
        fit = ols(np.log(1.0 / radii), np.log(est))
        rep.add_fit("slope", fit, cap=xi_tilde(q, gamma))
    return rep


def doubling_check(lg: LiouvilleGrid, points, radii, kappa: float) -> EstimateReport:
    """Fraction of ``(x, r)`` with ``M(B(x, 2r)) > 8 log(1/r)^kappa M(B(x, r))``.

    Pairs whose doubled ball leaves the grid are skipped and counted.
    """
    if kappa <= 2:
        raise ValueError(f"kappa must exceed 2, got {kappa}")
    radii = np.asarray(radii, dtype=float)
    if np.any(radii >= 1.0):
        raise ValueError("radii must be below 1 so that log(1/r) > 0")
    checked = violated = skipped = 0
    worst = 0.0
    for x in np.atleast_2d(points):
        for r in radii:
            try:
                small = ball_mass(lg, x, r)
                big = ball_mass(lg, x, 2 * r)
            except OutOfDomainError:
                skipped += 1
                continue
            bound = 8.0 * math.log(1.0 / r) ** kappa
            ratio = big / small
            worst = max(worst, ratio / bound)
            checked += 1
            violated += ratio > bound
    if checked == 0:
        raise InsufficientSamplesError("no (point, radius) pair fits inside the grid")
    frac = violated / checked
    se = math.sqrt(frac * (1 - frac) / checked)
    rep = EstimateReport("doubling", provenance={"kappa": kappa, "gamma": lg.gamma})
    rep.add("violation_fraction", frac, se, checked, skipped=skipped, violations=violated,
            worst_ratio_over_bound=worst)
    return rep
