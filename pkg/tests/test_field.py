import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from lqg_lab import field as fld
from lqg_lab.rng import Streams

P = fld.KernelParams.dyadic(1.0, 1.0, 6)


@pytest.mark.parametrize("m", [0.5, 1.0, 3.0])
@pytest.mark.parametrize("z", [0.01, 0.1, 0.7, 2.0, 10.0])
def test_kernel_k_matches_bessel(m, z):
    p = fld.KernelParams.dyadic(m, 1.0, 2)
    assert fld.kernel_k(p, z / m) == pytest.approx(z * special.k1(z), rel=1e-10)


@pytest.mark.parametrize("form", ["heat", "scale"])
@pytest.mark.parametrize("z", [0.01, 0.3, 1.0, 5.0])
def test_green_matches_k0(form, z):
    assert fld.green_massive(P, z, form) == pytest.approx(special.k0(z), rel=1e-10)


def test_kernel_at_origin_is_exactly_one():
    assert fld.kernel_k(P, 0.0) == 1.0


def test_green_singular_at_origin():
    with pytest.raises(fld.SingularityError):
        fld.green_massive(P, 0.0)


def test_negative_distance_rejected():
    with pytest.raises(ValueError):
        fld.kernel_k(P, -0.1)


@pytest.mark.parametrize("n", [0, 7])
def test_band_index_range(n):
    with pytest.raises(ValueError):
        fld.band_covariance(P, n, 0.1)


def test_band_variance_is_log_ratio():
    for n in range(1, 7):
        assert fld.band_covariance(P, n, 0.0) == pytest.approx(math.log(2.0), abs=1e-12)
    assert P.total_variance() == pytest.approx(6 * math.log(2.0))


@pytest.mark.parametrize("n", [1, 3, 6])
@pytest.mark.parametrize("r", [0.001, 0.02, 0.3, 2.0])
def test_band_covariance_two_routes(n, r):
    assert fld.band_covariance(P, n, r) == pytest.approx(fld.band_covariance_bessel(P, n, r), rel=1e-9, abs=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_kernel_k_decreasing(a, b):
    lo, hi = sorted((a, b))
    assert fld.kernel_k(P, lo) >= fld.kernel_k(P, hi) - 1e-14


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.floats(0.0, 3.0))
def test_band_covariance_bounded_by_variance(n, r):
    c = fld.band_covariance(P, n, r)
    assert 0.0 <= c <= math.log(2.0) + 1e-12


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.floats(0.001, 3.0))
def test_scale_covariance_telescopes(upper, r):
    a = P.cutoffs[upper]
    total = sum(fld.band_covariance(P, n, r) for n in range(1, upper + 1))
    assert fld.scale_covariance(P, a, r) == pytest.approx(total, rel=1e-9, abs=1e-13)


def test_truncation_level():
    # smallest n with 2^-n < dx / 2
    assert fld.truncation_level(fld.Grid.centered(1.0, 64)) == 8
    assert fld.truncation_level(fld.Grid.centered(2.0, 256)) == 9
    assert fld.truncation_level(fld.Grid((0, 0), 1.0, 2048)) == 13


def test_params_validation():
    with pytest.raises(ValueError):
        fld.KernelParams.dyadic(1.0, 2.0, 3)
    with pytest.raises(ValueError):
        fld.KernelParams(1.0, 1.0, (1.0, 0.5))
    with pytest.raises(ValueError):
        fld.Grid((0, 0), 1.0, 0)


def test_stack_is_sum_of_bands(small_stack):
    total = np.sum(small_stack.bands, axis=0)
    np.testing.assert_allclose(small_stack.values, total, atol=1e-12)
    np.testing.assert_allclose(small_stack.partial(2), small_stack.bands[0] + small_stack.bands[1], atol=1e-12)
    assert small_stack.partial_variance(2) == pytest.approx(2 * math.log(2.0))


def test_stack_is_read_only(small_stack):
    with pytest.raises(ValueError):
        small_stack.values[0, 0] = 1.0


def test_build_stack_deterministic_across_threads():
    g = fld.Grid.centered(1.0, 32)
    p = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(g))
    a = fld.build_stack(p, g, Streams(5), threads=1)
    b = fld.build_stack(p, g, Streams(5), threads=3)
    np.testing.assert_array_equal(a.values, b.values)
    c = fld.build_stack(p, g, Streams(6), threads=1)
    assert not np.array_equal(a.values, c.values)


def test_bands_are_independent():
    # bands come from distinct keyed streams; their empirical cross-correlation is white noise
    g = fld.Grid.centered(2.0, 64)
    p = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(g))
    ea = fld.sample_band_ensemble(p, g, 6, 400, Streams(2))
    eb = fld.sample_band_ensemble(p, g, 7, 400, Streams(2))
    a = np.array([e.values[20, 20] for e in ea])
    b = np.array([e.values[20, 20] for e in eb])
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) < 4 / math.sqrt(400)


def test_band_marginal_variance_exact():
    g = fld.Grid.centered(2.0, 128)
    p = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(g))
    for n in (1, 4, 8):
        s = fld._sampler(p, g, n)
        assert s.method.split("-")[0] in ("circulant", "dense", "coarse", "clamped")
        ens = fld.sample_band_ensemble(p, g, n, 200, Streams(1))
        v = np.mean([e.values.var() + e.values.mean() ** 2 for e in ens])
        assert v == pytest.approx(math.log(2.0), rel=0.15)


def test_empirical_covariance_band(small_stack):
    g = fld.Grid.centered(2.0, 128)
    p = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(g))
    ens = fld.sample_band_ensemble(p, g, 6, 1000, Streams(3))
    lags = np.arange(0, 10) * g.dx
    rep = fld.validate_covariance(ens, lags, p, reference=(30, 64))
    assert not rep.flagged
    shuffled = fld.validate_covariance(ens, lags, p, reference=(30, 64), shuffle=np.random.default_rng(0))
    assert not shuffled.flagged


def test_validate_covariance_needs_samples():
    g = fld.Grid.centered(1.0, 16)
    p = fld.KernelParams.dyadic(1.0, 1.0, 4)
    ens = fld.sample_band_ensemble(p, g, 4, 10, Streams(0))
    with pytest.raises(Exception):
        fld.validate_covariance(ens, [0.0], p)


def test_interpolation_and_domain(small_stack):
    g = small_stack.grid
    i, j = 10, 20
    c = g.center(i, j)
    assert fld.interpolate_bilinear(g, small_stack.values, c) == pytest.approx(small_stack.values[i, j])
    with pytest.raises(fld.OutOfDomainError):
        fld.interpolate_bilinear(g, small_stack.values, (5.0, 0.0))


def test_cell_index_roundtrip():
    g = fld.Grid.centered(2.0, 16)
    X, Y = g.centers()
    i, j = g.cell_index(np.stack([X, Y], axis=-1))
    I, J = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    np.testing.assert_array_equal(i, I)
    np.testing.assert_array_equal(j, J)
