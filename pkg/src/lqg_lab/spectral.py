"""Measure-weighted Dirichlet pencil on masked domains and its spectrum.

The stiffness matrix is the Euclidean Dirichlet energy ``(1/2) int |grad f|^2``
on the 5-point stencil (edge weight 1/2, dimensionless in 2D); all
dependence on the Liouville measure sits in the diagonal mass matrix.
Outside cells are excluded, which imposes the Dirichlet condition.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import integrate, ndimage, optimize

from .field import Grid
from .heatkernel import DimensionFit
from .measure import LiouvilleGrid
from .report import EstimateReport, FitError, ols


class TruncationError(ValueError):
    """The truncated eigen-sum has an uncontrolled tail at this ``t``."""


class ConvergenceError(RuntimeError):
    """The eigensolver did not meet its residual tolerance."""


@dataclass(frozen=True)
class DomainMask:
    grid: Grid
    inside: np.ndarray
    components: int
    mass: float | None = None

    def __post_init__(self):
        m = np.asarray(self.inside, dtype=bool)
        if m.shape != self.grid.shape:
            raise ValueError("mask shape differs from the grid")
        m.setflags(write=False)
        object.__setattr__(self, "inside", m)

    @property
    def cell_count(self) -> int:
        return int(self.inside.sum())

    @classmethod
    def from_array(cls, grid: Grid, inside, lg: LiouvilleGrid | None = None) -> "DomainMask":
        inside = np.asarray(inside, dtype=bool)
        if not inside.any():
            raise ValueError("mask is empty")
        _, ncomp = ndimage.label(inside)
        mass = None if lg is None else math.fsum(lg.masses[inside])
        return cls(grid, inside, int(ncomp), mass)

    @classmethod
    def rectangle(cls, grid: Grid, x0, x1, y0, y1, lg: LiouvilleGrid | None = None) -> "DomainMask":
        """Cells whose centers lie in the open rectangle."""
        xs, ys = grid.centers()
        return cls.from_array(grid, (xs > x0) & (xs < x1) & (ys > y0) & (ys < y1), lg)

    @classmethod
    def disc(cls, grid: Grid, center, R, lg: LiouvilleGrid | None = None) -> "DomainMask":
        xs, ys = grid.centers()
        return cls.from_array(grid, (xs - center[0]) ** 2 + (ys - center[1]) ** 2 < R * R, lg)

    def with_measure(self, lg: LiouvilleGrid) -> "DomainMask":
        return DomainMask(self.grid, self.inside, self.components, math.fsum(lg.masses[self.inside]))

    def largest_component(self) -> "DomainMask":
        lab, n = ndimage.label(self.inside)
        if n <= 1:
            return self
        sizes = ndimage.sum(self.inside, lab, index=np.arange(1, n + 1))
        keep = lab == (1 + int(np.argmax(sizes)))
        return DomainMask(self.grid, keep, 1, None)


@dataclass(frozen=True)
class DirichletPencil:
    A: sp.csr_matrix
    D: np.ndarray
    mask: DomainMask
    index: np.ndarray  # grid cell -> unknown index, -1 outside
    boundary: str = "dirichlet"

    @property
    def size(self) -> int:
        return self.D.size


@dataclass(frozen=True)
class SpectralDecomposition:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    residuals: np.ndarray
    pencil: DirichletPencil
    tol: float

    @property
    def K(self) -> int:
        return self.eigenvalues.size

    def values_at(self, cell) -> np.ndarray:
        """``phi_k`` at a grid cell ``(i, j)``."""
        k = self.pencil.index[cell[0], cell[1]]
        if k < 0:
            raise ValueError(f"cell {tuple(cell)} is outside the mask")
        return self.eigenvectors[k]

    def to_dict(self) -> dict:
        return {"K": self.K, "tol": self.tol, "eigenvalues": self.eigenvalues.tolist(),
                "residuals": self.residuals.tolist(), "M_U": self.pencil.mask.mass}


def assemble(lg: LiouvilleGrid, mask: DomainMask, boundary: str = "dirichlet") -> DirichletPencil:
    """Stiffness ``A`` (5-point, edge weight 1/2) and masses ``D = diag(m_c)``.

    ``boundary="dirichlet"`` keeps the full diagonal ``2`` (outside neighbours
    are zero); ``"neumann"`` counts only inside neighbours, so ``A 1 = 0``.
    """
    if mask.cell_count == 0:
        raise ValueError("mask is empty")
    if mask.grid != lg.grid:
        raise ValueError("mask grid differs from the measure grid")
    if mask.components > 1:
        warnings.warn(f"mask has {mask.components} components; keeping the largest", stacklevel=2)
        mask = mask.largest_component()
    mask = mask.with_measure(lg)
    inside = mask.inside
    n = mask.cell_count
    index = -np.ones(inside.shape, dtype=np.int64)
    index[inside] = np.arange(n)
    ii, jj = np.nonzero(inside)
    me = index[ii, jj]
    rows, cols, vals = [], [], []
    degree = np.zeros(n)
    for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        ni, nj = ii + di, jj + dj
        ok = (ni >= 0) & (ni < inside.shape[0]) & (nj >= 0) & (nj < inside.shape[1])
        nb = np.full(ii.shape, -1)
        nb[ok] = index[ni[ok], nj[ok]]
        good = nb >= 0
        rows.append(me[good])
        cols.append(nb[good])
        vals.append(np.full(int(good.sum()), -0.5))
        degree[me[good]] += 1
    if boundary == "dirichlet":
        diag = np.full(n, 2.0)
    elif boundary == "neumann":
        diag = 0.5 * degree
    else:
        raise ValueError(f"unknown boundary {boundary!r}")
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    D = np.array(lg.masses[inside], dtype=float)
    return DirichletPencil(A, D, mask, index, boundary)


def eigensolve(pencil: DirichletPencil, K: int = 128, tol: float = 1e-8) -> SpectralDecomposition:
    """Smallest ``K`` eigenpairs of ``A phi = lambda D phi`` by shift-invert Lanczos,
    followed by a Rayleigh-Ritz pass that makes the vectors ``D``-orthonormal."""
    n = pencil.size
    if not 1 <= K <= n:
        raise ValueError(f"K must lie in 1..{n}")
    if not tol > 0:
        raise ValueError("tol must be positive")
    A = pencil.A
    D = pencil.D
    Dm = sp.diags(D)
    if K >= n - 1 or n <= 400:
        lam, V = scipy.linalg.eigh(A.toarray(), np.diag(D), subset_by_index=[0, K - 1])
    else:
        # shift slightly below zero so a Neumann pencil (singular A) stays invertible
        scale = float(np.median(A.diagonal() / D))
        sigma = -1e-6 * scale
        last = None
        for ncv in (max(2 * K + 1, 20), max(4 * K + 1, 40)):
            try:
                lam, V = spla.eigsh(A, k=K, M=Dm, sigma=sigma, which="LM", ncv=min(ncv, n - 1),
                                    tol=tol * 1e-2)
            except spla.ArpackNoConvergence as exc:
                last = exc
                continue
            break
        else:
            raise ConvergenceError(f"eigsh did not converge: {last}")
        # Rayleigh-Ritz in the computed subspace
        Q = V
        Ah = Q.T @ (A @ Q)
        Dh = Q.T @ (D[:, None] * Q)
        lam, W = scipy.linalg.eigh(0.5 * (Ah + Ah.T), 0.5 * (Dh + Dh.T))
        V = Q @ W
    order = np.argsort(lam)
    lam, V = lam[order], V[:, order]
    # D-normalize and fix signs for reproducibility
    V /= np.sqrt(np.einsum("ik,i,ik->k", V, D, V))[None, :]
    sign = np.sign(V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])])
    V *= sign[None, :]
    # backward-error residual: stays meaningful for a zero (Neumann) mode
    AV = A @ V
    a_norm = float(abs(A).sum(axis=1).max())
    scale = (a_norm + np.abs(lam) * D.max()) * np.linalg.norm(V, axis=0)
    res = np.linalg.norm(AV - (D[:, None] * V) * lam[None, :], axis=0) / scale
    if np.any(res > tol):
        raise ConvergenceError(f"max relative residual {res.max():.2e} exceeds tol {tol:.1e}")
    return SpectralDecomposition(lam, V, res, pencil, tol)


def _tail(dec: SpectralDecomposition, t: float) -> float:
    return math.exp(-dec.eigenvalues[-1] * t) * dec.K


def eigen_heatkernel(dec: SpectralDecomposition, x_cell, y_cell, t: float, tail_tol: float = 1e-6) -> float:
    """Truncated ``sum_k exp(-lambda_k t) phi_k(x) phi_k(y)``.

    The tail is bounded by ``exp(-lambda_K t) K max_k |phi_k(x) phi_k(y)|`` and
    must stay below ``tail_tol`` times the sum.
    """
    px = dec.values_at(x_cell)
    py = dec.values_at(y_cell)
    w = np.exp(-dec.eigenvalues * t)
    val = float(np.sum(w * px * py))
    tail = _tail(dec, t) * float(np.max(np.abs(px * py)))
    if not tail < tail_tol * abs(val):
        raise TruncationError(f"tail {tail:.2e} too large at t={t:.4g}; increase K or t")
    return val


def heat_trace(dec: SpectralDecomposition, t: float, tail_tol: float = 1e-6) -> float:
    """``Z(t) = sum_k exp(-lambda_k t)`` with tail ``exp(-lambda_K t) K < tail_tol Z``."""
    z = float(np.sum(np.exp(-dec.eigenvalues * t)))
    if not _tail(dec, t) < tail_tol * z:
        raise TruncationError(f"tail {_tail(dec, t):.2e} too large at t={t:.4g}; increase K or t")
    return z


def _min_time(evaluate) -> float:
    lo, hi = 0.0, 1.0
    while True:
        try:
            evaluate(hi)
            break
        except TruncationError:
            lo, hi = hi, 2 * hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        try:
            evaluate(mid)
            hi = mid
        except TruncationError:
            lo = mid
    return hi


def min_trace_time(dec: SpectralDecomposition, tail_tol: float = 1e-6) -> float:
    """Smallest ``t`` at which ``heat_trace`` accepts the truncation."""
    return _min_time(lambda t: heat_trace(dec, t, tail_tol))


def min_kernel_time(dec: SpectralDecomposition, x_cell, y_cell, tail_tol: float = 1e-6) -> float:
    """Smallest ``t`` at which ``eigen_heatkernel`` accepts the truncation."""
    return _min_time(lambda t: eigen_heatkernel(dec, x_cell, y_cell, t, tail_tol))


def faber_krahn_ratio(dec: SpectralDecomposition, mask: DomainMask | None = None) -> float:
    """``lambda_1(U) M(U) log(2 + 1/M(U))``."""
    mass = (mask if mask is not None else dec.pencil.mask).mass
    if mass is None:
        mass = float(np.sum(dec.pencil.D))
    return float(dec.eigenvalues[0] * mass * math.log(2.0 + 1.0 / mass))


# ---------------------------------------------------------------------------
# Nash profile
# ---------------------------------------------------------------------------

def nash_theta(C9: float, s):
    """``theta(s) = C9 s^2 / (32 log(2 + s/4))``."""
    s = np.asarray(s, dtype=float)
    return C9 * s * s / (32.0 * np.log(2.0 + s / 4.0))


def nash_phi(C9: float, s: float) -> float:
    """``Phi(s) = int_s^inf du / theta(u)`` via ``u = s / w``:
    ``int_0^1 32 log(2 + s/(4w)) / (C9 s) dw``."""
    if not (C9 > 0 and s > 0):
        raise ValueError("need C9 > 0 and s > 0")

    def f(w):
        return math.log(2.0 + s / (4.0 * w)) if w > 0 else 0.0

    # the integrand has a log singularity at w = 0; split it off
    a, _ = integrate.quad(f, 0.0, 1e-6, epsabs=0.0, epsrel=1e-13, limit=200)
    b, _ = integrate.quad(f, 1e-6, 1.0, epsabs=0.0, epsrel=1e-13, limit=200)
    return 32.0 * (a + b) / (C9 * s)


def nash_profile(C9: float, t: float) -> float:
    """``m(t) = Phi^{-1}(t)``, the solution of ``m' = -theta(m)`` with ``m(0+) = inf``."""
    if not (C9 > 0 and t > 0):
        raise ValueError("need C9 > 0 and t > 0")

    def g(logs):
        return math.log(nash_phi(C9, math.exp(logs))) - math.log(t)

    lo, hi = -1.0, 1.0
    while g(lo) < 0:
        lo -= 2.0 * (1 + abs(lo))
    while g(hi) > 0:
        hi += 2.0 * (1 + abs(hi))
    return math.exp(optimize.brentq(g, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500))


def nash_psi(C9: float, s):
    """Upper bound ``Psi(s) = 80 log(2 + s/4) / (C9 s) >= Phi(s)``."""
    s = np.asarray(s, dtype=float)
    return 80.0 * np.log(2.0 + s / 4.0) / (C9 * s)


def nash_constant(C9: float) -> float:
    """``C = sup_{0 < t <= 1/2} Psi(t^{-1} log t^{-1}) / t`` (finite; the ratio tends
    to ``80 / C9`` as ``t -> 0``)."""
    def ratio(u):  # u = log(1/t)
        t = math.exp(-u)
        return float(nash_psi(C9, u / t)) / t

    us = np.linspace(math.log(2.0), 700.0, 20001)
    vals = np.array([ratio(u) for u in us])
    k = int(np.argmax(vals))
    lo, hi = us[max(k - 1, 0)], us[min(k + 1, us.size - 1)]
    if hi > lo:
        res = optimize.minimize_scalar(lambda u: -ratio(u), bounds=(lo, hi), method="bounded",
                                       options={"xatol": 1e-12})
        return max(vals[k], -res.fun)
    return vals[k]


def nash_ode_residual(C9: float, t: float, h_rel: float = 1e-4) -> float:
    """``|m'(t) + theta(m(t))| / theta(m(t))`` with a central difference."""
    h = t * h_rel
    dm = (nash_profile(C9, t + h) - nash_profile(C9, t - h)) / (2 * h)
    th = float(nash_theta(C9, nash_profile(C9, t)))
    return abs(dm + th) / th


# ---------------------------------------------------------------------------
# dimension fits
# ---------------------------------------------------------------------------

def global_dimension(ts: Sequence[float], Z: Sequence[float], min_points: int = 5) -> DimensionFit:
    """OLS slope of ``2 log Z`` against ``-log t``."""
    ts = np.asarray(ts, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if ts.size < min_points:
        raise FitError(f"need at least {min_points} times, got {ts.size}")
    fit = ols(-np.log(ts), 2.0 * np.log(Z), min_points=min_points)
    return DimensionFit(fit.slope, fit.intercept, fit.r2, float(ts.min()), float(ts.max()), ts.size)


def trace_envelope(dec: SpectralDecomposition, ts: Sequence[float]) -> EstimateReport:
    """Fitted ``C`` with ``Z(t) <= C M(U) t^{-1} log(1/t)`` over ``ts`` (all ``< 1``)."""
    ts = np.asarray(ts, dtype=float)
    if np.any(ts >= 1.0):
        raise ValueError("envelope needs t < 1")
    mass = dec.pencil.mask.mass
    Z = np.array([heat_trace(dec, t) for t in ts])
    C = float(np.max(Z * ts / (mass * np.log(1.0 / ts))))
    rep = EstimateReport("trace_envelope")
    rep.add("C_upper", C, n_samples=ts.size, t_min=float(ts.min()), t_max=float(ts.max()))
    if not (math.isfinite(C) and C > 0):
        rep.flags.append("no finite positive envelope constant")
    return rep
