"""On-diagonal Liouville heat kernel from return probabilities of Liouville
Brownian motion, envelope checks and spectral-dimension fits."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .field import Grid, OutOfDomainError
from .measure import LiouvilleGrid, ResolutionError, ball_mass
from .report import EstimateReport, FitError, mean_and_se, ols
from .rng import as_streams, block_sizes, parallel_map
from .walker import BLOCK, Density, ExitBatch, _as_batch, density_for

ETA = 19.0


class RegimeWarning(UserWarning):
    """A bound is evaluated outside the regime where it is proved."""


@dataclass(frozen=True)
class Disc:
    center: tuple[float, float]
    radius: float

    def inside(self, p) -> np.ndarray:
        p = np.asarray(p)
        return np.hypot(p[..., 0] - self.center[0], p[..., 1] - self.center[1]) < self.radius


@dataclass
class ReturnEstimate:
    x: tuple[float, float]
    t: float
    rho: float
    p_hat: float
    se: float
    walkers: int
    hits: int
    ball_mass: float
    killed: bool = False
    escaped: int = 0
    unresolved: int = 0


@dataclass
class DimensionFit:
    slope: float
    intercept: float
    r2: float
    t_min: float
    t_max: float
    n_points: int
    dropped: int = 0
    estimates: list = field(default_factory=list)


def _killer_check(killer, grid: Grid | None):
    if killer is None or isinstance(killer, Disc):
        return killer
    inside = getattr(killer, "inside", None)
    if inside is None or not isinstance(inside, np.ndarray):
        raise TypeError("mask must be a Disc or carry a boolean 'inside' cell array")
    if grid is not None and killer.grid != grid:
        raise ValueError("mask grid differs from the measure grid")
    return killer


def _return_block(dens: Density, grid: Grid, x, n, rng, dt, ts, rhos, killer, max_steps):
    """Step ``n`` walkers until their clock passes ``ts[-1]``.

    Returns per-target hit counts (free and killed), escaped and unresolved
    counts.  The LBM position at a target is the linear interpolation of the
    path at the inverse clock inside the step that crosses it.
    """
    sq = math.sqrt(dt)
    nt = ts.size
    pos = np.tile(x, (n, 1))
    F = np.zeros(n)
    f_prev = dens(pos)
    alive = np.ones(n, dtype=bool)
    hits_free = np.zeros(nt, dtype=np.int64)
    hits_kill = np.zeros(nt, dtype=np.int64)
    escaped = 0
    is_disc = isinstance(killer, Disc)
    k = 0
    while pos.shape[0] and k < max_steps:
        m = pos.shape[0]
        inc = rng.standard_normal((m, 2)) * sq
        u = rng.random(m) if is_disc else None
        new = pos + inc
        inside_grid = grid.contains(new) if grid is not None else np.ones(m, dtype=bool)
        f_new = np.where(inside_grid, dens(np.where(inside_grid[:, None], new, pos)), f_prev)
        F_new = F + 0.5 * dt * (f_prev + f_new)
        # killing during this step
        if killer is None:
            alive_new = alive
        elif is_disc:
            c, R = killer.center, killer.radius
            d1 = R - np.hypot(pos[:, 0] - c[0], pos[:, 1] - c[1])
            d2 = R - np.hypot(new[:, 0] - c[0], new[:, 1] - c[1])
            with np.errstate(over="ignore", invalid="ignore"):
                cross = (d2 <= 0) | (u < np.exp(-2.0 * np.maximum(d1, 0) * np.maximum(d2, 0) / dt))
            alive_new = alive & ~cross
        else:
            i, j = killer.grid.cell_index(new)
            alive_new = alive & inside_grid & killer.inside[i, j]
        lo = np.searchsorted(ts, F, side="right")
        hi = np.searchsorted(ts, F_new, side="right")
        hi = np.where(inside_grid, hi, lo)
        for w in np.nonzero(hi > lo)[0]:
            for jt in range(lo[w], hi[w]):
                theta = (ts[jt] - F[w]) / (F_new[w] - F[w])
                p = pos[w] + theta * inc[w]
                if (p[0] - x[0]) ** 2 + (p[1] - x[1]) ** 2 < rhos[jt] ** 2:
                    hits_free[jt] += 1
                    hits_kill[jt] += alive_new[w]
        keep = inside_grid & (F_new < ts[-1])
        escaped += int((~inside_grid & (F_new < ts[-1])).sum())
        pos, F, f_prev, alive = new[keep], F_new[keep], f_new[keep], alive_new[keep]
        k += 1
    return hits_free, hits_kill, escaped, pos.shape[0]


def return_estimates(x, ts, rhos, walkers: int, lg: LiouvilleGrid, rng, mask=None, dt: float | None = None,
                     max_steps: int = 2_000_000, threads: int | None = None):
    """Free and (with ``mask``) killed on-diagonal estimates at several Liouville times in one pass.

    Returns ``(free, killed)`` lists of ``ReturnEstimate``; ``killed`` is None
    without a mask.
    """
    x = np.asarray(x, dtype=float)
    ts = np.asarray(ts, dtype=float)
    rhos = np.broadcast_to(np.asarray(rhos, dtype=float), ts.shape).copy()
    order = np.argsort(ts)
    ts, rhos = ts[order], rhos[order]
    if np.any(ts <= 0):
        raise ValueError("Liouville times must be positive")
    if np.any(rhos < 2 * lg.grid.dx):
        raise ResolutionError("probe radius below 2*dx")
    if mask is not None:
        mask = _killer_check(mask, lg.grid)
        if isinstance(mask, Disc):
            if not mask.inside(x):
                raise OutOfDomainError("x is not inside the killing domain")
        else:
            i, j = lg.grid.cell_index(x)
            if not mask.inside[i, j]:
                raise OutOfDomainError("x is not inside the killing domain")
    masses = np.array([ball_mass(lg, x, r) for r in rhos])
    dt = float(min(rhos.min() ** 2 / 16.0, ts.min() / 20.0)) if dt is None else float(dt)
    dens = density_for(lg)
    st = as_streams(rng).child("return")
    sizes = block_sizes(walkers, BLOCK)

    def run(b):
        return _return_block(dens, lg.grid, x, sizes[b], st.child("block", b).generator(), dt,
                             ts, rhos, mask, max_steps)

    parts = parallel_map(run, range(len(sizes)), threads)
    hf = sum(p[0] for p in parts)
    hk = sum(p[1] for p in parts)
    esc = sum(p[2] for p in parts)
    unres = sum(p[3] for p in parts)
    if unres:
        warnings.warn(f"{unres} walkers did not reach Liouville time {ts[-1]} within the step budget",
                      RuntimeWarning, stacklevel=2)

    def make(h, killed):
        out = []
        for k in np.argsort(order):
            p = h[k] / walkers
            out.append(ReturnEstimate(tuple(x), float(ts[k]), float(rhos[k]), p / masses[k],
                                      math.sqrt(p * (1 - p) / walkers) / masses[k], walkers, int(h[k]),
                                      float(masses[k]), killed, int(esc), int(unres)))
        return out

    return make(hf, False), (make(hk, True) if mask is not None else None)


def estimate_ondiag(x, t: float, rho: float, walkers: int, lg: LiouvilleGrid, rng, mask=None,
                    dt: float | None = None, threads: int | None = None) -> ReturnEstimate:
    """``P[B_t in B(x, rho) (and not killed)] / M(B(x, rho))`` at one Liouville time."""
    free, killed = return_estimates(x, [t], [rho], walkers, lg, rng, mask, dt, threads=threads)
    return killed[0] if mask is not None else free[0]


def mass_matched_radius(lg: LiouvilleGrid, x, mass: float, tol: float = 1e-3) -> float | None:
    """Radius with ``M(B(x, rho)) = mass`` (relative tolerance ``tol``), or None if
    that radius is below ``2 dx`` or the ball would leave the grid."""
    g = lg.grid
    x0, x1, y0, y1 = g.bounds
    r_hi = min(x[0] - x0, x1 - x[0], x[1] - y0, y1 - x[1])
    r_lo = 2.0 * g.dx
    if r_hi <= r_lo or ball_mass(lg, x, r_lo) > mass or ball_mass(lg, x, r_hi) < mass:
        return None
    for _ in range(80):
        mid = 0.5 * (r_lo + r_hi)
        mm = ball_mass(lg, x, mid)
        if abs(mm / mass - 1.0) < tol:
            return mid
        if mm < mass:
            r_lo = mid
        else:
            r_hi = mid
    return 0.5 * (r_lo + r_hi)


def dirichlet_lower_bound(x, r: float, t: float, exit_samples, lg: LiouvilleGrid) -> float:
    """``P[tau_{B(x,r)} > t]^2 / M(B(x, r))``, a lower bound for ``p^{B(x,r)}_{2t}(x, x)``."""
    value, _ = dirichlet_lower_bound_se(x, r, t, exit_samples, lg)
    return value


def dirichlet_lower_bound_se(x, r: float, t: float, exit_samples, lg: LiouvilleGrid) -> tuple[float, float]:
    b = _as_batch(exit_samples)
    tau = b.tau
    n = tau.size
    if n == 0:
        raise ValueError("no exit samples")
    # censored walkers have tau at least their recorded value
    surv = float(np.mean(tau > t))
    if t > 0.5 * float(np.mean(tau)):
        warnings.warn(f"t = {t:.4g} exceeds half the mean exit time", RegimeWarning, stacklevel=2)
    mass = ball_mass(lg, x, r)
    se = 2.0 * surv * math.sqrt(surv * (1 - surv) / n) / mass
    return surv * surv / mass, se


def pointwise_dimension(x, ts, lg: LiouvilleGrid, walkers: int, rng, mass_factor: float = 0.3,
                        dt: float | None = None, max_rel_se: float = 0.3, min_points: int = 5,
                        threads: int | None = None) -> DimensionFit:
    """OLS slope of ``2 log p_t(x, x)`` against ``-log t`` with a mass-matched probe
    ``M(B(x, rho(t))) = mass_factor * t``."""
    ts = np.asarray(sorted(ts), dtype=float)
    if ts.size < 2 or ts[-1] / ts[0] < 10.0 * (1 - 1e-9):
        raise FitError("t grid must span at least one decade")
    rhos = [mass_matched_radius(lg, x, mass_factor * t) for t in ts]
    valid = [k for k, r in enumerate(rhos) if r is not None]
    if len(valid) < min_points:
        raise FitError(f"only {len(valid)} times admit a mass-matched probe")
    est, _ = return_estimates(x, ts[valid], [rhos[k] for k in valid], walkers, lg, rng, dt=dt,
                              threads=threads)
    good = [e for e in est if e.p_hat > 0 and e.se / e.p_hat <= max_rel_se]
    dropped = len(ts) - len(good)
    if len(good) < min_points:
        raise FitError(f"only {len(good)} usable estimates (need {min_points})")
    t = np.array([e.t for e in good])
    p = np.array([e.p_hat for e in good])
    fit = ols(-np.log(t), 2.0 * np.log(p), min_points=min_points)
    return DimensionFit(fit.slope, fit.intercept, fit.r2, float(t.min()), float(t.max()),
                        len(good), dropped, est)


def envelope_check(estimates: Sequence[ReturnEstimate], eta: float = ETA) -> EstimateReport:
    """Smallest ``C1`` with ``p_t <= C1 t^{-1} log(1/t)`` and largest ``C3`` with
    ``p_t >= C3 t^{-1} log(1/t)^{-eta}`` over the supplied estimates."""
    estimates = list(estimates)
    if not estimates:
        raise ValueError("no estimates supplied")
    t = np.array([e.t for e in estimates])
    p = np.array([e.p_hat for e in estimates])
    rep = EstimateReport("envelope", provenance={"eta": eta})
    if np.any(t >= 1.0):
        rep.flags.append("log(1/t) is not positive for t >= 1")
    lg = np.log(1.0 / t)
    with np.errstate(divide="ignore", invalid="ignore"):
        c1 = np.max(p * t / lg)
        c3 = np.min(p * t * lg**eta)
    rep.add("C1_upper", float(c1), n_samples=t.size, t_min=float(t.min()), t_max=float(t.max()))
    rep.add("C3_lower", float(c3), n_samples=t.size, t_min=float(t.min()), t_max=float(t.max()))
    for name, c in (("C1", c1), ("C3", c3)):
        if not (np.isfinite(c) and c > 0):
            rep.flags.append(f"no finite positive {name}")
    return rep
