"""Planar Brownian motion, the Liouville clock along its paths, Liouville
Brownian motion by time change, and exit-time statistics.

Conventions: the generator is ``Laplacian / 2``, so increments have variance
``dt`` per coordinate and ``E|B_t - x|^2 = 2t``.

The clock integrand is the cell-constant density of the grid measure by
default (``integrand="cell"``), so the Revuz measure of the simulated clock
is exactly the cell-mass measure used by the quadratures.  ``"bilinear"``
evaluates ``exp(gamma X_N - gamma^2 v_N / 2)`` at the bilinearly interpolated
field instead; interpolation shrinks the variance between centers, which
biases that clock low.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import special, stats

from .field import FieldStack, Grid, OutOfDomainError, SingularityError, interpolate_bilinear
from .measure import LiouvilleGrid, ball_mass
from .report import EstimateReport, FitError, mean_and_se, ols
from .rng import as_generator, as_streams, block_sizes, parallel_map

BLOCK = 1024


class ClockRangeError(ValueError):
    """Requested Liouville time lies beyond the simulated clock."""


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

class Density:
    """Clock integrand ``rho(y)`` with ``dF = rho(B_s) ds``."""

    grid: Grid | None = None
    unit = False

    def __call__(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class UnitDensity(Density):
    unit = True

    def __init__(self, grid: Grid | None = None):
        self.grid = grid

    def __call__(self, p):
        return np.ones(np.shape(p)[:-1])


class CellDensity(Density):
    """Piecewise-constant density ``m_c / dx^2``."""

    def __init__(self, grid: Grid, density: np.ndarray):
        self.grid = grid
        self.values = np.asarray(density, dtype=float)
        self.unit = bool(np.all(self.values == 1.0))

    def __call__(self, p):
        i, j = self.grid.cell_index(p)
        return self.values[i, j]


class BilinearDensity(Density):
    def __init__(self, stack: FieldStack, gamma: float):
        self.grid = stack.grid
        self.stack = stack
        self.gamma = gamma

    def __call__(self, p):
        x = interpolate_bilinear(self.grid, self.stack.values, p)
        return np.exp(self.gamma * np.asarray(x) - 0.5 * self.gamma**2 * self.stack.variance)


def density_for(source, gamma: float | None = None, integrand: str = "cell") -> Density:
    """Clock integrand from a ``FieldStack``, a ``LiouvilleGrid`` or ``None`` (unit)."""
    if source is None:
        return UnitDensity()
    if isinstance(source, Density):
        return source
    if isinstance(source, LiouvilleGrid):
        if gamma is not None and gamma != source.gamma:
            raise ValueError("gamma differs from the measure's gamma")
        if integrand != "cell":
            raise ValueError("a LiouvilleGrid only supports the cell integrand")
        if source.gamma == 0.0:
            return UnitDensity(source.grid)
        return CellDensity(source.grid, source.density)
    if isinstance(source, FieldStack):
        gamma = source.gamma if gamma is None else float(gamma)
        if gamma == 0.0:
            return UnitDensity(source.grid)
        if integrand == "cell":
            return CellDensity(source.grid, np.exp(gamma * source.values - 0.5 * gamma**2 * source.variance))
        if integrand == "bilinear":
            return BilinearDensity(source, gamma)
        raise ValueError(f"unknown integrand {integrand!r}")
    raise TypeError(f"cannot build a clock density from {type(source).__name__}")


# ---------------------------------------------------------------------------
# paths and clocks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BrownianPath:
    start: np.ndarray
    dt: float
    positions: np.ndarray

    @property
    def steps(self) -> int:
        return self.positions.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def segment(self, i0: int, i1: int) -> "BrownianPath":
        pos = self.positions[i0:i1 + 1]
        return BrownianPath(pos[0].copy(), self.dt, pos)


@dataclass(frozen=True)
class LiouvilleClock:
    path: BrownianPath
    values: np.ndarray
    gamma: float
    band_count: int

    @property
    def final(self) -> float:
        return float(self.values[-1])

    def at(self, t):
        """Piecewise-linear clock value at Euclidean time ``t``."""
        return np.interp(t, self.path.times, self.values)


def simulate_bm(x0, dt: float, t_max: float, rng) -> BrownianPath:
    if not dt > 0 or not t_max >= dt:
        raise ValueError("need dt > 0 and t_max >= dt")
    x0 = np.asarray(x0, dtype=float)
    k = int(math.ceil(t_max / dt - 1e-9))
    inc = as_generator(rng).standard_normal((k, 2)) * math.sqrt(dt)
    pos = np.empty((k + 1, 2))
    pos[0] = x0
    np.cumsum(inc, axis=0, out=pos[1:])
    pos[1:] += x0
    return BrownianPath(x0.copy(), float(dt), pos)


def clock_along(path: BrownianPath, stack, gamma: float | None = None, integrand: str = "cell",
                depth: int | None = None) -> LiouvilleClock:
    """Trapezoidal ``F^N`` at the path sample times."""
    if isinstance(stack, FieldStack) and depth is not None and depth != stack.band_count:
        stack = _truncated(stack, depth)
    dens = density_for(stack, gamma, integrand)
    g = dens.grid
    if g is not None and not np.all(g.contains(path.positions)):
        raise OutOfDomainError("path leaves the grid")
    gamma = 0.0 if dens.unit else (stack.gamma if gamma is None else gamma)
    n_bands = getattr(stack, "band_count", 0) if stack is not None else 0
    if dens.unit:
        values = np.arange(path.steps + 1) * path.dt
    else:
        f = dens(path.positions)
        values = np.concatenate([[0.0], np.cumsum(0.5 * path.dt * (f[1:] + f[:-1]))])
        if np.any(np.diff(values) <= 0):
            raise FloatingPointError("clock failed to increase strictly")
    return LiouvilleClock(path, values, float(gamma), n_bands)


def _truncated(stack: FieldStack, depth: int) -> FieldStack:
    from .field import KernelParams
    p = KernelParams(stack.params.mass, stack.params.gamma, stack.params.cutoffs[:depth + 1])
    bands = stack.bands[:depth] if stack.bands is not None else None
    return FieldStack(p, stack.grid, np.array(stack.partial(depth)), stack.partial_variance(depth), bands)


def clock_convergence(path: BrownianPath, stack: FieldStack, gamma: float | None,
                      depths: Sequence[int], integrand: str = "cell") -> EstimateReport:
    """``sup_t |F^{N_k} - F^{N_{k+1}}|`` along one path for consecutive depths."""
    depths = list(depths)
    if any(b <= a for a, b in zip(depths, depths[1:])):
        raise ValueError("depths must be increasing")
    clocks = [clock_along(path, stack, gamma, integrand, depth=d).values for d in depths]
    rep = EstimateReport("clock_convergence")
    for (d0, c0), (d1, c1) in zip(zip(depths, clocks), zip(depths[1:], clocks[1:])):
        rep.add(f"sup|F{d0}-F{d1}|", float(np.max(np.abs(c1 - c0))), n_samples=c0.size,
                depth_from=d0, depth_to=d1)
    return rep


def invert_clock(clock: LiouvilleClock, s):
    """Euclidean time at which the clock reaches ``s`` (piecewise-linear inverse)."""
    F = clock.values
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0) or np.any(s_arr > F[-1]):
        raise ClockRangeError(f"Liouville time outside [0, {F[-1]}]")
    i = np.clip(np.searchsorted(F, s_arr, side="right") - 1, 0, F.size - 2)
    frac = (s_arr - F[i]) / (F[i + 1] - F[i])
    t = (i + frac) * clock.path.dt
    t = np.where(s_arr == F[i], i * clock.path.dt, t)
    return t if t.ndim else float(t)


def lbm_at(path: BrownianPath, clock: LiouvilleClock, s):
    """Position of Liouville Brownian motion at Liouville time ``s``."""
    t = np.asarray(invert_clock(clock, s))
    u = t / path.dt
    i = np.clip(np.floor(u).astype(np.int64), 0, path.steps - 1)
    f = (u - i)[..., None]
    out = (1 - f) * path.positions[i] + f * path.positions[i + 1]
    return out


def expected_clock(lg: LiouvilleGrid, x, t: float, sub: int = 4, near_sub: int = 32) -> float:
    """``int_0^t int q_s(x, y) M(dy) ds = sum_c rho_c int_cell E1(|x-y|^2/2t)/(2 pi) dy``."""
    x = np.asarray(x, dtype=float)
    g = lg.grid

    def kern(d2):
        return special.exp1(np.maximum(d2, 1e-300) / (2 * t)) / (2 * math.pi)

    return _cell_quadrature(g, lg.density, x, kern, None, sub, near_sub)


def _cell_quadrature(g: Grid, density: np.ndarray, x, kern, disc, sub: int, near_sub: int,
                     cutoff: float | None = None) -> float:
    """``sum_c rho_c int_{cell ∩ U} kern(|x - y|^2) dy`` with sub-sampled cells.

    ``disc=(center, R)`` restricts to a disc; cells within 1.5 dx of ``x``
    use a finer sub-sample to resolve the singularity.
    """
    dx = g.dx
    if disc is not None:
        (cx, cy), R = disc
        i0, j0 = g.cell_index(np.array([cx - R, cy - R]))
        i1, j1 = g.cell_index(np.array([cx + R, cy + R]))
    else:
        i0, j0, i1, j1 = 0, 0, g.cells - 1, g.cells - 1
    ii, jj = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    cxs = g.origin[0] + (ii + 0.5) * dx
    cys = g.origin[1] + (jj + 0.5) * dx
    near = np.maximum(np.abs(cxs - x[0]), np.abs(cys - x[1])) < 1.5 * dx
    total = 0.0
    for mask, s in ((~near, sub), (near, near_sub)):
        if not np.any(mask):
            continue
        off = ((np.arange(s) + 0.5) / s - 0.5) * dx
        px, py = np.broadcast_arrays(cxs[mask][:, None, None] + off[None, :, None],
                                     cys[mask][:, None, None] + off[None, None, :])
        d2 = (px - x[0]) ** 2 + (py - x[1]) ** 2
        if disc is not None:
            (cx, cy), R = disc
            inside = (px - cx) ** 2 + (py - cy) ** 2 < R * R
            val = np.where(inside & (d2 > 0), kern(d2, px, py), 0.0)
        else:
            val = np.where(d2 > 0, kern(d2), 0.0)
        cell_int = val.mean(axis=(1, 2)) * dx * dx
        total += math.fsum(cell_int * density[ii[mask], jj[mask]])
    return total


# ---------------------------------------------------------------------------
# exits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExitObservation:
    T: float
    tau: float
    position: np.ndarray
    bridge_corrected: bool
    censored: bool = False


@dataclass
class ExitBatch:
    """Exit data of many walkers started at ``start`` in the disc ``(center, radius)``."""

    start: np.ndarray
    center: np.ndarray
    radius: float
    dt: float
    T: np.ndarray
    tau: np.ndarray
    positions: np.ndarray
    bridged: np.ndarray
    censored: np.ndarray
    discounted: np.ndarray | None = None
    discount: float | None = None

    def __len__(self):
        return self.T.size

    @property
    def censored_fraction(self) -> float:
        return float(self.censored.mean()) if self.T.size else 0.0

    @property
    def flagged(self) -> bool:
        return self.censored_fraction > 1e-3

    def observations(self) -> list[ExitObservation]:
        return [ExitObservation(float(T), float(tau), p.copy(), bool(b), bool(c))
                for T, tau, p, b, c in zip(self.T, self.tau, self.positions, self.bridged, self.censored)]

    def angles(self) -> np.ndarray:
        d = self.positions - self.center
        return np.arctan2(d[:, 1], d[:, 0])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("walker_id,T,tau,exit_x,exit_y,censored\n")
            for k in range(self.T.size):
                fh.write(f"{k},{self.T[k]!r},{self.tau[k]!r},{self.positions[k, 0]!r},"
                         f"{self.positions[k, 1]!r},{int(self.censored[k])}\n")

    @classmethod
    def concat(cls, parts: Sequence["ExitBatch"]) -> "ExitBatch":
        p0 = parts[0]
        disc = None if p0.discounted is None else np.concatenate([p.discounted for p in parts])
        return cls(p0.start, p0.center, p0.radius, p0.dt,
                   np.concatenate([p.T for p in parts]), np.concatenate([p.tau for p in parts]),
                   np.concatenate([p.positions for p in parts]), np.concatenate([p.bridged for p in parts]),
                   np.concatenate([p.censored for p in parts]), disc, p0.discount)


def _exit_block(dens: Density, start, center, R, n, rng, dt, t_max, discount):
    sq = math.sqrt(dt)
    pos = np.tile(start, (n, 1))
    F = np.zeros(n)
    G = np.zeros(n) if discount is not None else None
    f_prev = dens(pos)
    idx = np.arange(n)
    T_out = np.full(n, t_max)
    tau_out = np.zeros(n)
    pos_out = np.zeros((n, 2))
    bridged = np.zeros(n, dtype=bool)
    censored = np.ones(n, dtype=bool)
    G_out = np.zeros(n) if discount is not None else None
    t = 0.0
    k = 0
    n_steps = int(math.ceil(t_max / dt - 1e-9))
    while idx.size and k < n_steps:
        m = idx.size
        inc = rng.standard_normal((m, 2)) * sq
        u = rng.random(m)
        new = pos + inc
        d1 = R - np.hypot(pos[:, 0] - center[0], pos[:, 1] - center[1])
        d2 = R - np.hypot(new[:, 0] - center[0], new[:, 1] - center[1])
        out = d2 <= 0
        with np.errstate(over="ignore"):
            cross = ~out & (u < np.exp(-2.0 * d1 * d2 / dt))
        done = out | cross
        if np.any(done):
            theta = np.where(out, d1 / np.where(out, d1 - d2, 1.0), 0.5)[done]
            xe = pos[done] + theta[:, None] * inc[done]
            v = xe - center
            nv = np.hypot(v[:, 0], v[:, 1])
            nv = np.where(nv > 0, nv, 1.0)
            xe = center + R * v / nv[:, None]
            fe = dens(xe)
            dF = theta * dt * 0.5 * (f_prev[done] + fe)
            w = idx[done]
            T_out[w] = t + theta * dt
            tau_out[w] = F[done] + dF
            pos_out[w] = xe
            bridged[w] = cross[done]
            censored[w] = False
            if G is not None:
                G_out[w] = G[done] + np.exp(-discount * (t + 0.5 * theta * dt)) * dF
        keep = ~done
        f_new = dens(new[keep])
        dF = 0.5 * dt * (f_prev[keep] + f_new)
        F = F[keep] + dF
        if G is not None:
            G = G[keep] + np.exp(-discount * (t + 0.5 * dt)) * dF
        pos = new[keep]
        f_prev = f_new
        idx = idx[keep]
        k += 1
        t = k * dt
    if idx.size:
        tau_out[idx] = F
        pos_out[idx] = pos
        if G is not None:
            G_out[idx] = G
    return T_out, tau_out, pos_out, bridged, censored, G_out


def exit_disc(source, start, center, radius: float, walkers: int, rng, dt: float | None = None,
              t_max: float | None = None, gamma: float | None = None, integrand: str = "cell",
              discount: float | None = None, threads: int | None = None) -> ExitBatch:
    """Exit of ``walkers`` Brownian paths from ``B(center, radius)`` started at ``start``.

    Exits are detected at sample times and, between samples, by the
    Brownian-bridge crossing probability ``exp(-2 d1 d2 / dt)`` against the
    tangent half-plane.  Walkers still inside at ``t_max`` are censored.
    ``discount`` additionally accumulates ``int_0^T exp(-discount t) dF_t``.
    """
    start = np.asarray(start, dtype=float)
    center = np.asarray(center, dtype=float)
    R = float(radius)
    if np.hypot(*(start - center)) >= R:
        raise OutOfDomainError("start point must lie inside the disc")
    dens = density_for(source, gamma, integrand)
    if dens.grid is not None:
        x0, x1, y0, y1 = dens.grid.bounds
        if center[0] - R < x0 or center[0] + R > x1 or center[1] - R < y0 or center[1] + R > y1:
            raise OutOfDomainError("disc is not contained in the grid")
    dt = R * R / 400.0 if dt is None else float(dt)
    t_max = 50.0 * R * R if t_max is None else float(t_max)
    st = as_streams(rng).child("exit")
    sizes = block_sizes(walkers, BLOCK)

    def run(b):
        return _exit_block(dens, start, center, R, sizes[b], st.child("block", b).generator(),
                           dt, t_max, discount)

    parts = parallel_map(run, range(len(sizes)), threads)
    batches = [ExitBatch(start, center, R, dt, *p[:5], p[5], discount) for p in parts]
    return ExitBatch.concat(batches)


def exit_ball(x, r: float, stack, gamma: float | None, dt: float | None, rng, **kw) -> ExitObservation:
    """Single exit of ``B(x, r)`` from its center."""
    b = exit_disc(stack, x, x, r, 1, rng, dt=dt, gamma=gamma, **kw)
    return b.observations()[0]


def _as_batch(samples) -> ExitBatch:
    if isinstance(samples, ExitBatch):
        return samples
    samples = list(samples)
    if samples and isinstance(samples[0], ExitBatch):
        return ExitBatch.concat(samples)
    obs = samples
    return ExitBatch(np.zeros(2), np.zeros(2), math.nan, math.nan,
                     np.array([o.T for o in obs]), np.array([o.tau for o in obs]),
                     np.array([o.position for o in obs]).reshape(-1, 2),
                     np.array([o.bridge_corrected for o in obs], dtype=bool),
                     np.array([o.censored for o in obs], dtype=bool))


def exit_negative_moment(samples, q: float) -> EstimateReport:
    """``E[tau^{-q}]`` from uncensored exits.

    ``samples`` is a batch (or observations), or a mapping ``r -> samples``;
    in the latter case the report also carries the slope of
    ``log E[tau^{-q}]`` against ``log(1/r)``.  A list of batches for one radius
    is treated as replicates (one field each): the estimate is the mean of the
    replicate means and the standard error is taken across replicates.
    """
    rep = EstimateReport("exit_negative_moment", provenance={"q": q})
    groups = samples.items() if isinstance(samples, Mapping) else [(None, samples)]
    rs, est = [], []
    for r, s in groups:
        reps = s if isinstance(s, (list, tuple)) and s and isinstance(s[0], ExitBatch) else [s]
        means, n_used, n_cens = [], 0, 0
        for b in reps:
            b = _as_batch(b)
            ok = ~b.censored
            n_cens += int(b.censored.sum())
            n_used += int(ok.sum())
            means.append(np.mean(b.tau[ok] ** (-q)) if ok.any() else math.nan)
        if len(means) > 1:
            m, se = mean_and_se(means)
        else:
            b = _as_batch(reps[0])
            m, se = mean_and_se(b.tau[~b.censored] ** (-q))
        label = "moment" if r is None else f"r={r:.6g}"
        rep.add(label, m, se, n_used, m - 3 * se, m + 3 * se, censored_excluded=n_cens, r=r)
        if n_cens:
            rep.flags.append(f"{label}: {n_cens} censored samples excluded")
        if r is not None:
            rs.append(r)
            est.append(m)
    if len(rs) >= 2:
        rep.add_fit("slope", ols(np.log(1.0 / np.asarray(rs)), np.log(est)))
    return rep


def exit_tail(samples, r: float, beta: float, lg: LiouvilleGrid | None = None, x=None,
              n_t: int = 8, min_count: int = 30, tail_constant: float = 0.1) -> EstimateReport:
    """Small-time tail of the Liouville exit time.

    Fits ``-log P[tau <= t]`` against ``(r^beta / t)^{1/(beta-1)}`` over the
    deepest decade of ``t`` that still has ``min_count`` exits below it.  With
    a measure and center, also evaluates the survival bound at ``t = E[tau]/2``
    against ``tail_constant * M(B(x, r/2)) / (M(B(x, 3r)) log(1/r))``.
    """
    if beta <= 1:
        raise ValueError("beta must exceed 1")
    b = _as_batch(samples)
    tau = np.sort(b.tau[~b.censored])
    n = tau.size
    rep = EstimateReport("exit_tail", provenance={"r": r, "beta": beta})
    if n < min_count:
        raise FitError(f"only {n} uncensored exits; need at least {min_count}")
    t_lo = tau[min_count - 1]
    ts = t_lo * np.logspace(0.0, 1.0, n_t)
    counts = np.searchsorted(tau, ts, side="right")
    keep = counts >= min_count
    dropped = int((~keep).sum())
    ts, counts = ts[keep], counts[keep]
    P = counts / n
    for t, c, p in zip(ts, counts, P):
        rep.add(f"P[tau<={t:.6g}]", p, math.sqrt(p * (1 - p) / n), n, t=t, count=int(c))
    if dropped:
        rep.flags.append(f"{dropped} tail bins dropped (fewer than {min_count} exits)")
    xs = (r**beta / ts) ** (1.0 / (beta - 1.0))
    fit = ols(xs, -np.log(P), min_points=3)
    rep.add_fit("subgaussian", fit, t_min=float(ts[0]), t_max=float(ts[-1]))
    mean_tau = float(tau.mean())
    t_half = 0.5 * mean_tau
    p_half = float(np.searchsorted(tau, t_half, side="right") / n)
    rep.add("P[tau<=mean/2]", p_half, math.sqrt(p_half * (1 - p_half) / n), n, t=t_half)
    if lg is not None and x is not None:
        small = ball_mass(lg, x, r / 2)
        big = ball_mass(lg, x, 3 * r)
        bound = tail_constant * small / (big * math.log(1.0 / r))
        rep.add("survival_bound", bound, extra_lhs=1 - p_half)
        rep.add("survival_margin", (1 - p_half) - bound)
    return rep


# ---------------------------------------------------------------------------
# Green kernel
# ---------------------------------------------------------------------------

def green_disc(R: float, x, y, center=(0.0, 0.0)):
    """Green kernel of ``Laplacian / 2`` killed outside ``B(center, R)``:
    ``(1/pi) log(|R^2 - x conj(y)| / (R |x - y|))`` in complex notation."""
    c = complex(center[0], center[1])
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    zx = x[..., 0] + 1j * x[..., 1] - c
    zy = y[..., 0] + 1j * y[..., 1] - c
    tol = 1e-12 * R
    if np.any(np.abs(zx) > R + tol) or np.any(np.abs(zy) > R + tol):
        raise OutOfDomainError("point outside the disc")
    d = np.abs(zx - zy)
    if np.any(d == 0):
        raise SingularityError("Green kernel is singular at x = y")
    out = np.log(np.abs(R * R - zx * np.conj(zy)) / (R * d)) / math.pi
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def green_quadrature(lg: LiouvilleGrid, x, center, R: float, sub: int = 4, near_sub: int = 32) -> float:
    """``sum_c g_U(x, y) m_c`` over cells of ``U = B(center, R)`` with sub-sampled cells."""
    x = np.asarray(x, dtype=float)
    c = complex(center[0], center[1])
    zx = complex(x[0], x[1]) - c

    def kern(d2, px, py):
        zy = px + 1j * py - c
        with np.errstate(divide="ignore", invalid="ignore"):
            v = np.log(np.abs(R * R - zx * np.conj(zy)) / (R * np.sqrt(d2))) / math.pi
        return np.maximum(v, 0.0)

    return _cell_quadrature(lg.grid, lg.density, x, kern, (tuple(center), R), sub, near_sub)


def resolvent_quadrature(lg: LiouvilleGrid, x, center, R: float, lam: float) -> float:
    """``u(x)`` for ``(lam - Laplacian_h / 2) u = rho`` on the cells of ``B(center, R)``
    with zero values outside (exclusion boundary)."""
    g = lg.grid
    xs, ys = g.centers()
    inside = (xs - center[0]) ** 2 + (ys - center[1]) ** 2 < R * R
    idx = -np.ones(g.shape, dtype=np.int64)
    idx[inside] = np.arange(int(inside.sum()))
    A = _laplacian(inside, idx, g.dx)
    n = A.shape[0]
    M = lam * sp.identity(n, format="csr") + A
    u = spla.spsolve(M.tocsc(), lg.density[inside])
    full = np.zeros(g.shape)
    full[inside] = u
    return float(interpolate_bilinear(g, full, x))


def _laplacian(inside: np.ndarray, idx: np.ndarray, dx: float) -> sp.csr_matrix:
    """``-Laplacian_h / 2`` on the masked cells, Dirichlet by exclusion."""
    n = int(inside.sum())
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.full(n, 2.0 / dx**2)]
    ii, jj = np.nonzero(inside)
    me = idx[ii, jj]
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = ii + di, jj + dj
        ok = (ni >= 0) & (ni < inside.shape[0]) & (nj >= 0) & (nj < inside.shape[1])
        nb = np.full(ii.shape, -1)
        nb[ok] = idx[ni[ok], nj[ok]]
        good = nb >= 0
        rows.append(me[good])
        cols.append(nb[good])
        vals.append(np.full(int(good.sum()), -0.5 / dx**2))
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def green_identity_check(lg: LiouvilleGrid, x, disc, walkers: int, rng, dt: float | None = None,
                         resolvent: float | None = None, rel_tol: float = 0.05,
                         threads: int | None = None) -> EstimateReport:
    """Monte Carlo ``E_x[tau_U]`` against ``sum_c g_U(x, c) m_c`` for ``U = B(center, R)``.

    With ``resolvent=lam`` also compares ``E_x[int_0^T exp(-lam t) dF_t]``
    against the grid resolvent solve.
    """
    center, R = disc
    center = np.asarray(center, dtype=float)
    x = np.asarray(x, dtype=float)
    batch = exit_disc(lg, x, center, R, walkers, rng, dt=dt, discount=resolvent, threads=threads)
    ok = ~batch.censored
    mc, se = mean_and_se(batch.tau[ok])
    quad = green_quadrature(lg, x, center, R)
    rep = EstimateReport("green_identity", provenance={"x": tuple(x), "center": tuple(center), "R": R})
    rep.add("mc_expected_exit", mc, se, int(ok.sum()), mc - 3 * se, mc + 3 * se)
    rep.add("quadrature", quad)
    rel = abs(mc - quad) / quad
    rep.add("relative_difference", rel, se / quad, tolerance=rel_tol + 3 * se / quad)
    if rel > rel_tol + 3 * se / quad:
        rep.flags.append(f"Green identity off by {rel:.3%}")
    if batch.flagged:
        rep.flags.append(f"censored fraction {batch.censored_fraction:.2e}")
    if resolvent is not None:
        m2, se2 = mean_and_se(batch.discounted[ok])
        q2 = resolvent_quadrature(lg, x, center, R, resolvent)
        rep.add("mc_discounted", m2, se2, int(ok.sum()))
        rep.add("resolvent_quadrature", q2)
        rep.add("resolvent_relative_difference", abs(m2 - q2) / q2, se2 / q2)
    return rep
