"""Massive GFF kernels and band-decomposed field sampling on a square grid.

The covariance of the massive free field is split along the scale variable
``u`` into bands ``[a_{n-1}, a_n]``; each band ``Y_n`` is an independent smooth
stationary Gaussian field, and ``X_N = Y_1 + ... + Y_N``.

Two independent routes to the same kernels are kept on purpose: adaptive
quadrature (``kernel_k``, ``green_massive``, ``band_covariance``) and Bessel
closed forms (``*_bessel``).  The sampler uses the closed forms because it
needs millions of lags; the tests check the samples against the quadrature.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np
import scipy.fft
import scipy.linalg
from scipy import integrate, special

from .report import EstimateReport, InsufficientSamplesError
from .rng import Streams, as_generator, as_streams, parallel_map

# integrands below are exp(-...) in a log variable; beyond these exponents they underflow
_EXP_CUT = 800.0
_QUAD = dict(epsabs=1e-14, epsrel=1e-12, limit=200)


class SingularityError(ValueError):
    """The massive Green function diverges on the diagonal."""


class OutOfDomainError(ValueError):
    """A query point lies outside the grid extent."""


class FactorizationError(RuntimeError):
    """Dense fallback factorization of a band covariance failed."""


class EmbeddingWarning(UserWarning):
    """Circulant embedding was not positive semidefinite and had to be repaired."""


@dataclass(frozen=True)
class KernelParams:
    """Mass, coupling and cutoff sequence ``a_0 = 1 < a_1 < ... < a_N``."""

    mass: float
    gamma: float
    cutoffs: tuple[float, ...]

    def __post_init__(self):
        a = tuple(float(v) for v in self.cutoffs)
        object.__setattr__(self, "cutoffs", a)
        if not self.mass > 0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if not 0.0 <= self.gamma < 2.0:
            raise ValueError(f"gamma must lie in [0, 2), got {self.gamma}")
        if not a or a[0] != 1.0:
            raise ValueError("cutoff sequence must start with a_0 = 1")
        if any(b <= c for c, b in zip(a, a[1:])):
            raise ValueError("cutoff sequence must be strictly increasing")

    @classmethod
    def dyadic(cls, mass: float, gamma: float, bands: int, base: float = 2.0) -> "KernelParams":
        if bands < 0:
            raise ValueError("band count must be non-negative")
        return cls(mass, gamma, tuple(base**k for k in range(bands + 1)))

    @property
    def band_count(self) -> int:
        return len(self.cutoffs) - 1

    def band_variance(self, n: int) -> float:
        self._check_band(n)
        return math.log(self.cutoffs[n] / self.cutoffs[n - 1])

    def total_variance(self, depth: int | None = None) -> float:
        """Variance ledger ``E[X_N^2] = log a_N`` (sum of band variances)."""
        depth = self.band_count if depth is None else depth
        return math.fsum(self.band_variance(k) for k in range(1, depth + 1))

    def with_gamma(self, gamma: float) -> "KernelParams":
        return KernelParams(self.mass, gamma, self.cutoffs)

    def _check_band(self, n: int) -> None:
        if not 1 <= n <= self.band_count:
            raise ValueError(f"band index {n} outside 1..{self.band_count}")


@dataclass(frozen=True)
class Grid:
    """Square grid of ``cells`` x ``cells`` cells; values are indexed ``[i, j]``
    with ``i`` along x and ``j`` along y, cell centers at
    ``origin + ((i + 1/2) dx, (j + 1/2) dx)``."""

    origin: tuple[float, float]
    side_length: float
    cells: int

    def __post_init__(self):
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        if not self.side_length > 0:
            raise ValueError("side length must be positive")
        if int(self.cells) < 1:
            raise ValueError("need at least one cell per side")
        object.__setattr__(self, "cells", int(self.cells))

    @classmethod
    def centered(cls, side_length: float, cells: int, center=(0.0, 0.0)) -> "Grid":
        h = side_length / 2.0
        return cls((center[0] - h, center[1] - h), side_length, cells)

    @property
    def dx(self) -> float:
        return self.side_length / self.cells

    @property
    def shape(self) -> tuple[int, int]:
        return (self.cells, self.cells)

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        x0, y0 = self.origin
        return (x0, x0 + self.side_length, y0, y0 + self.side_length)

    def axis(self) -> tuple[np.ndarray, np.ndarray]:
        c = (np.arange(self.cells) + 0.5) * self.dx
        return self.origin[0] + c, self.origin[1] + c

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = self.axis()
        return np.meshgrid(xs, ys, indexing="ij")

    def center(self, i: int, j: int) -> np.ndarray:
        return np.array([self.origin[0] + (i + 0.5) * self.dx, self.origin[1] + (j + 0.5) * self.dx])

    def contains(self, points, margin: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        x0, x1, y0, y1 = self.bounds
        return ((p[..., 0] >= x0 + margin) & (p[..., 0] <= x1 - margin)
                & (p[..., 1] >= y0 + margin) & (p[..., 1] <= y1 - margin))

    def cell_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Indices of the cells containing ``points`` (clipped at the far edge)."""
        p = np.asarray(points, dtype=float)
        i = np.floor((p[..., 0] - self.origin[0]) / self.dx).astype(np.int64)
        j = np.floor((p[..., 1] - self.origin[1]) / self.dx).astype(np.int64)
        return np.clip(i, 0, self.cells - 1), np.clip(j, 0, self.cells - 1)


def truncation_level(grid: Grid, base: float = 2.0) -> int:
    """Smallest ``n`` with ``1 / base**n < dx / 2``: finer bands are sub-grid."""
    n = 0
    while base ** (-n) >= grid.dx / 2.0:
        n += 1
    return n


# ---------------------------------------------------------------------------
# kernels by quadrature
# ---------------------------------------------------------------------------

def kernel_k(params: KernelParams, d: float) -> float:
    """``k(z) = 1/2 int_0^inf exp(-m^2 |z|^2 / (2v) - v/2) dv`` at ``|z| = d``.

    Integrated in ``s = log v`` and split at the peak ``v = m d``.
    """
    d = float(d)
    if d < 0:
        raise ValueError("distance must be non-negative")
    if d == 0.0:
        return 1.0
    s0 = math.log(params.mass) + math.log(d)

    # z^2 e^{-s} kept in log form so tiny d neither underflows nor overflows
    def f(s):
        return 0.5 * math.exp(s - 0.5 * math.exp(2 * s0 - s) - 0.5 * math.exp(s))

    lo = min(s0 - 1.0, 2 * s0 - math.log(2 * _EXP_CUT))
    hi = max(s0 + 1.0, math.log(2 * _EXP_CUT))
    left, _ = integrate.quad(f, lo, s0, **_QUAD)
    right, _ = integrate.quad(f, s0, hi, **_QUAD)
    return left + right


def green_massive(params: KernelParams, r: float, form: str = "heat") -> float:
    """Massive Green function ``g(x, y)`` of ``m^2 - Laplacian`` at ``|x - y| = r``.

    ``form="heat"`` integrates ``int_0^inf exp(-m^2 u/2 - r^2/(2u)) du/(2u)``;
    ``form="scale"`` integrates ``int_1^inf k(u r) du / u`` with ``kernel_k``
    evaluated by nested quadrature.
    """
    r = float(r)
    if r <= 0.0:
        raise SingularityError("massive Green function is singular at r = 0")
    m = params.mass
    if form == "heat":
        lr = math.log(r)

        def f(s):
            return 0.5 * math.exp(-0.5 * m * m * math.exp(s) - 0.5 * math.exp(2 * lr - s))

        s0 = lr - math.log(m)
        lo = min(s0 - 1.0, 2 * lr - math.log(2 * _EXP_CUT))
        hi = max(s0 + 1.0, math.log(2 * _EXP_CUT / (m * m)))
        a, _ = integrate.quad(f, lo, s0, **_QUAD)
        b, _ = integrate.quad(f, s0, hi, **_QUAD)
        return a + b
    if form == "scale":
        return _scale_integral(params, r, 0.0, math.log(_EXP_CUT / (m * r)) if m * r < _EXP_CUT else 0.0)
    raise ValueError(f"unknown form {form!r}")


def _scale_integral(params: KernelParams, r: float, s_lo: float, s_hi: float) -> float:
    """``int_{e^s_lo}^{e^s_hi} k(u r) du / u`` in the log variable."""
    if s_hi <= s_lo:
        return 0.0
    kp = params

    def f(s):
        return kernel_k(kp, math.exp(s) * r)

    pts = []
    if r > 0:
        knee = math.log(1.0 / (params.mass * r))
        if s_lo < knee < s_hi:
            pts.append(knee)
    edges = [s_lo] + pts + [s_hi]
    return math.fsum(integrate.quad(f, a, b, epsabs=1e-13, epsrel=1e-11, limit=200)[0]
                     for a, b in zip(edges, edges[1:]))


def band_covariance(params: KernelParams, n: int, r: float) -> float:
    """``g_n(r) = int_{a_{n-1}}^{a_n} k(u r) du / u`` by adaptive quadrature."""
    params._check_band(n)
    r = float(r)
    if r < 0:
        raise ValueError("distance must be non-negative")
    a0, a1 = params.cutoffs[n - 1], params.cutoffs[n]
    return _scale_integral(params, r, math.log(a0), math.log(a1))


def scale_covariance(params: KernelParams, upper: float, r: float) -> float:
    """``int_1^upper k(u r) du / u`` as a single quadrature (telescoping check)."""
    return _scale_integral(params, float(r), 0.0, math.log(upper))


# ---------------------------------------------------------------------------
# closed forms
# ---------------------------------------------------------------------------

def kernel_k_bessel(params: KernelParams, d):
    z = params.mass * np.asarray(d, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.where(z > 0, z * special.k1(np.where(z > 0, z, 1.0)), 1.0)
    return out if out.ndim else float(out)


def green_bessel(params: KernelParams, r):
    r = np.asarray(r, dtype=float)
    if np.any(r <= 0):
        raise SingularityError("massive Green function is singular at r = 0")
    out = special.k0(params.mass * r)
    return out if out.ndim else float(out)


def band_covariance_bessel(params: KernelParams, n: int, r):
    """``g_n(r) = K0(m r a_{n-1}) - K0(m r a_n)``, ``log(a_n / a_{n-1})`` at 0."""
    params._check_band(n)
    r = np.asarray(r, dtype=float)
    a0, a1 = params.cutoffs[n - 1], params.cutoffs[n]
    m = params.mass
    pos = r > 0
    rr = np.where(pos, r, 1.0)
    out = np.where(pos, special.k0(m * rr * a0) - special.k0(m * rr * a1), math.log(a1 / a0))
    return out if out.ndim else float(out)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

@dataclass
class BandField:
    band: int
    grid: Grid
    values: np.ndarray
    variance: float
    method: str = "circulant"
    embedding_defect: float = 0.0


@dataclass(frozen=True)
class SamplerOptions:
    """Limits for the band sampler.

    Circulant padding grows from 2x up to ``max_pad`` while the periodic side
    stays within ``max_side``.  Grids with at most ``dense_limit`` cells fall
    back to a dense Cholesky factor.  Otherwise a band that is smooth at the
    grid scale is sampled on a coarser grid (spacing ``h`` with
    ``h * a_n <= coarse_resolution``) and interpolated.
    """

    max_pad: int = 4
    max_side: int = 4096
    dense_limit: int = 4096
    psd_tol: float = 1e-10
    jitter: float = 1e-10
    coarse_resolution: float = 1.0 / 16.0
    coarse_side: int = 1024


DEFAULT_SAMPLER = SamplerOptions()


class _Factor:
    """Square-root factor of the band covariance on a ``cells`` x ``cells`` lattice."""

    def __init__(self, cells: int, method: str, pad: int | None = None, root=None, chol=None):
        self.cells = cells
        self.method = method
        self.pad = pad
        self.root = root
        self.chol = chol

    @classmethod
    def circulant(cls, params, n, cells, dx, max_pad, max_side, psd_tol):
        """First PSD embedding over growing padding, else ``(None, last spectrum)``."""
        pad, last = 2, None
        while pad <= max_pad and pad * cells <= max(max_side, 2 * cells):
            P = scipy.fft.next_fast_len(pad * cells)
            lag = np.minimum(np.arange(P), P - np.arange(P)) * dx
            cov = band_covariance_bessel(params, n, np.hypot(lag[:, None], lag[None, :]))
            lam = scipy.fft.fft2(cov).real
            del cov
            last = (P, lam)
            if lam.min() >= -psd_tol * lam.max():
                return cls.from_spectrum(cells, P, lam, "circulant"), last
            pad *= 2
        return None, last

    @classmethod
    def from_spectrum(cls, cells, P, lam, method):
        lam = np.where(lam > 0, lam, 0.0)
        return cls(cells, method, pad=P, root=np.sqrt(lam / (P * P)))

    @classmethod
    def dense(cls, params, n, cells, dx, jitter):
        c = (np.arange(cells) + 0.5) * dx
        xs, ys = np.meshgrid(c, c, indexing="ij")
        pts = np.column_stack([xs.ravel(), ys.ravel()])
        d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
        cov = band_covariance_bessel(params, n, d)
        cov[np.diag_indices_from(cov)] += jitter
        try:
            chol = scipy.linalg.cholesky(cov, lower=True)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"band {n}: dense factorization failed") from exc
        return cls(cells, "dense", chol=chol)

    def sample_pair(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        c = self.cells
        if self.chol is not None:
            z = rng.standard_normal((2, c * c))
            y = z @ self.chol.T
            return y[0].reshape(c, c), y[1].reshape(c, c)
        P = self.pad
        w = rng.standard_normal((P, P)) + 1j * rng.standard_normal((P, P))
        w *= self.root
        y = scipy.fft.fft2(w, overwrite_x=True)[:c, :c]
        return np.ascontiguousarray(y.real), np.ascontiguousarray(y.imag)


def _hat_weights(cells: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Linear interpolation matrix from a coarse lattice (one extra node per side)
    to the fine cell centers, and the fractional offset of each fine center."""
    nc = cells // stride + 2
    u = (np.arange(cells) + 0.5) / stride + 0.5
    k0 = np.floor(u).astype(np.int64)
    f = u - k0
    W = np.zeros((cells, nc))
    W[np.arange(cells), k0] = 1.0 - f
    W[np.arange(cells), k0 + 1] = f
    return W, f


class _BandSampler:
    """Sampling recipe for one (params, grid, band), chosen once and cached."""

    def __init__(self, params: KernelParams, grid: Grid, n: int, opts: SamplerOptions):
        self.n = n
        self.grid = grid
        self.variance = params.band_variance(n)
        self.defect = 0.0
        self.interp = None
        cells, dx = grid.cells, grid.dx

        fac, last = _Factor.circulant(params, n, cells, dx, opts.max_pad, opts.max_side, opts.psd_tol)
        if fac is not None:
            self._use(fac)
            return
        if cells * cells <= opts.dense_limit:
            warnings.warn(f"band {n}: circulant embedding not PSD after padding; "
                          f"using dense factorization", EmbeddingWarning, stacklevel=4)
            self._use(_Factor.dense(params, n, cells, dx, opts.jitter))
            return

        coarse = self._coarse(params, n, opts)
        if coarse is not None:
            return

        # last resort: clamp negative eigenvalues and rescale so the point variance stays exact
        P, lam = last
        total = lam.sum()
        self.defect = float(-lam[lam < 0].sum() / total)
        lam = np.clip(lam, 0.0, None)
        lam *= total / lam.sum()
        warnings.warn(f"band {n}: circulant embedding not PSD at {P}^2 "
                      f"(clamped spectral fraction {self.defect:.2e}); variance preserved",
                      EmbeddingWarning, stacklevel=4)
        self._use(_Factor.from_spectrum(cells, P, lam, "circulant-clamped"))

    def _use(self, fac: _Factor) -> None:
        self.factor = fac
        self.method = fac.method
        self.pad = fac.pad

    def _coarse(self, params: KernelParams, n: int, opts: SamplerOptions):
        cells, dx = self.grid.cells, self.grid.dx
        stride = 1
        while cells % (2 * stride) == 0 and 2 * stride * dx * params.cutoffs[n] <= opts.coarse_resolution:
            stride *= 2
        if stride == 1:
            return None
        h = stride * dx
        nc = cells // stride + 2
        fac, _ = _Factor.circulant(params, n, nc, h, 1 << 20, opts.coarse_side, opts.psd_tol)
        if fac is None:
            if nc * nc > opts.dense_limit:
                return None
            fac = _Factor.dense(params, n, nc, h, opts.jitter)
        self._use(fac)
        self.method = "coarse-" + fac.method
        W, f = _hat_weights(cells, stride)
        # variance of the interpolant at each fractional offset, for exact renormalization
        w = np.stack([1.0 - f, f], axis=1)
        g = band_covariance_bessel(params, n, h * np.hypot(*np.meshgrid([0, 1], [0, 1], indexing="ij")))
        # var(fx, fy) = sum_{a,b,c,d} wx_a wy_b wx_c wy_d g(|(a-c, b-d)|)
        cx = np.einsum("ia,ic->iac", w, w)
        var = np.zeros((cells, cells))
        for a in (0, 1):
            for c in (0, 1):
                for b in (0, 1):
                    for d in (0, 1):
                        var += np.outer(cx[:, a, c], cx[:, b, d]) * g[abs(a - c), abs(b - d)]
        self.interp = (W, np.sqrt(self.variance / var))
        return True

    def sample_pair(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Two independent realizations on the grid."""
        a, b = self.factor.sample_pair(rng)
        if self.interp is None:
            return a, b
        W, scale = self.interp
        return (W @ a @ W.T) * scale, (W @ b @ W.T) * scale

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.sample_pair(rng)[0]


_SAMPLER_CACHE: dict = {}
_CACHE_MAX_SIDE = 1024


def _sampler(params: KernelParams, grid: Grid, n: int, opts: SamplerOptions = DEFAULT_SAMPLER) -> _BandSampler:
    key = (params.mass, params.cutoffs[n - 1], params.cutoffs[n], grid.cells, grid.dx, opts)
    hit = _SAMPLER_CACHE.get(key)
    if hit is not None:
        return hit
    s = _BandSampler(params, grid, n, opts)
    if s.pad is None or s.pad <= _CACHE_MAX_SIDE:
        if len(_SAMPLER_CACHE) > 64:
            _SAMPLER_CACHE.clear()
        _SAMPLER_CACHE[key] = s
    return s


def sample_band(params: KernelParams, grid: Grid, n: int, rng) -> BandField:
    """One realization of band ``Y_n`` at the cell centers of ``grid``."""
    s = _sampler(params, grid, n)
    values = s.sample(as_generator(rng))
    return BandField(n, grid, values, s.variance, s.method, s.defect)


def sample_band_ensemble(params: KernelParams, grid: Grid, n: int, count: int, streams,
                         threads: int | None = None) -> list[BandField]:
    """``count`` independent realizations of band ``n``; replicate pairs ``(2k, 2k+1)``
    share one FFT and the stream ``streams.child("pair", k)``."""
    st = as_streams(streams).child("band", n)
    s = _sampler(params, grid, n)

    def pair(k):
        a, b = s.sample_pair(st.child("pair", k).generator())
        return [BandField(n, grid, a, s.variance, s.method, s.defect),
                BandField(n, grid, b, s.variance, s.method, s.defect)]

    out = [bf for pr in parallel_map(pair, range((count + 1) // 2), threads) for bf in pr]
    return out[:count]


@dataclass
class FieldStack:
    """Band fields ``Y_1..Y_N``, their running sum ``X_N`` and the variance ledger."""

    params: KernelParams
    grid: Grid
    values: np.ndarray
    variance: float
    bands: list[np.ndarray] | None = None
    defects: tuple[float, ...] = ()

    def __post_init__(self):
        self.values.setflags(write=False)
        if self.bands is not None:
            for b in self.bands:
                b.setflags(write=False)

    @property
    def band_count(self) -> int:
        return self.params.band_count

    @property
    def gamma(self) -> float:
        return self.params.gamma

    def partial(self, depth: int) -> np.ndarray:
        """``X_depth``; needs retained bands unless ``depth`` is the full count."""
        if depth == self.band_count:
            return self.values
        if depth == 0:
            return np.zeros(self.grid.shape)
        if self.bands is None:
            raise ValueError("bands were not retained; cannot form partial sums")
        return np.sum(self.bands[:depth], axis=0)

    def partial_variance(self, depth: int) -> float:
        return self.params.total_variance(depth)


def build_stack(params: KernelParams, grid: Grid, rng, retain_bands: bool = True,
                threads: int | None = None) -> FieldStack:
    """Sample every band from its own substream ``rng.child("band", n)`` and sum."""
    st = as_streams(rng)
    N = params.band_count
    if N == 0:
        return FieldStack(params, grid, np.zeros(grid.shape), 0.0, [] if retain_bands else None)

    def one(n):
        bf = sample_band(params, grid, n, st.child("band", n).generator())
        return bf.values, bf.embedding_defect

    if retain_bands:
        res = parallel_map(one, range(1, N + 1), threads)
        bands = [r[0] for r in res]
        total = np.zeros(grid.shape)
        for b in bands:
            total += b
        defects = tuple(r[1] for r in res)
    else:
        # accumulate band by band to keep memory flat on large grids
        total = np.zeros(grid.shape)
        defects = []
        for n in range(1, N + 1):
            v, d = one(n)
            total += v
            defects.append(d)
            del v
        bands, defects = None, tuple(defects)
    return FieldStack(params, grid, total, params.total_variance(), bands, defects)


def field_at(stack: FieldStack, p, depth: int | None = None):
    """Bilinear interpolation of ``X_N`` between the four surrounding cell centers.

    Points in the outer half-cell rim use the nearest edge values.
    """
    values = stack.values if depth is None else stack.partial(depth)
    return interpolate_bilinear(stack.grid, values, p)


def interpolate_bilinear(grid: Grid, values: np.ndarray, p):
    pts = np.asarray(p, dtype=float)
    if not np.all(grid.contains(pts)):
        raise OutOfDomainError("point outside grid extent")
    u = (pts[..., 0] - grid.origin[0]) / grid.dx - 0.5
    v = (pts[..., 1] - grid.origin[1]) / grid.dx - 0.5
    n = grid.cells
    i0 = np.clip(np.floor(u).astype(np.int64), 0, max(n - 2, 0))
    j0 = np.clip(np.floor(v).astype(np.int64), 0, max(n - 2, 0))
    i1 = np.minimum(i0 + 1, n - 1)
    j1 = np.minimum(j0 + 1, n - 1)
    fu = np.clip(u - i0, 0.0, 1.0)
    fv = np.clip(v - j0, 0.0, 1.0)
    out = ((1 - fu) * (1 - fv) * values[i0, j0] + fu * (1 - fv) * values[i1, j0]
           + (1 - fu) * fv * values[i0, j1] + fu * fv * values[i1, j1])
    return out if np.ndim(out) else float(out)


def validate_covariance(ensemble: Sequence[BandField], lags: Iterable[float], params: KernelParams,
                        reference: tuple[int, int] | None = None, shuffle=None,
                        min_samples: int = 1000, z_flag: float = 4.0) -> EstimateReport:
    """Empirical covariance of ``Y_n(c) Y_n(c + lag e_x)`` across realizations.

    Each lag is compared with ``band_covariance`` (quadrature); rows carry the
    z-score and the report is flagged if any ``|z| > z_flag``.  Passing a
    generator as ``shuffle`` pairs each realization with a permuted partner,
    which destroys all dependence (negative control).
    """
    ensemble = list(ensemble)
    if len(ensemble) < min_samples:
        raise InsufficientSamplesError(f"need at least {min_samples} realizations, got {len(ensemble)}")
    n = ensemble[0].band
    grid = ensemble[0].grid
    stack = np.stack([bf.values for bf in ensemble])
    ci, cj = reference if reference is not None else (grid.cells // 4, grid.cells // 2)
    perm = None
    if shuffle is not None:
        perm = as_generator(shuffle).permutation(len(ensemble))
    rep = EstimateReport(f"band{n}_covariance")
    for lag in lags:
        k = int(round(lag / grid.dx))
        if abs(k * grid.dx - lag) > 1e-9 * max(1.0, lag):
            raise ValueError(f"lag {lag} is not a multiple of dx = {grid.dx}")
        if ci + k >= grid.cells:
            raise ValueError(f"lag {lag} leaves the grid from reference cell {(ci, cj)}")
        a = stack[:, ci, cj]
        b = stack[:, ci + k, cj]
        if perm is not None:
            b = b[perm]
        prod = a * b
        est = float(prod.mean())
        se = float(prod.std(ddof=1) / math.sqrt(prod.size))
        expected = 0.0 if perm is not None else band_covariance(params, n, k * grid.dx)
        z = (est - expected) / se if se > 0 else (0.0 if est == expected else math.inf)
        rep.add(f"lag={k * grid.dx:.6g}", est, se, prod.size, est - 3 * se, est + 3 * se,
                expected=expected, z=z, lag=k * grid.dx)
        if abs(z) > z_flag:
            rep.flags.append(f"lag {k * grid.dx:.6g}: |z| = {abs(z):.2f} > {z_flag}")
    return rep
