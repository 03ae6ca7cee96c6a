import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lqg_lab import field as fld
from lqg_lab import measure as ms
from lqg_lab.report import FitError, InsufficientSamplesError

from conftest import lebesgue


def test_alpha_band_and_xi():
    a1, a2 = ms.alpha_band(1.0)
    assert (a1, a2) == (4.5, 0.5)
    assert ms.alpha_band(0.0) == (2.0, 2.0)
    assert ms.xi_tilde(1.0, 1.0) == pytest.approx(3.0)
    assert ms.xi_tilde(0.5, 1.0) == pytest.approx(1.375)
    assert ms.xi_tilde(1.0, 0.0) == pytest.approx(2.0)


def test_gamma_zero_is_lebesgue(small_stack):
    lg = ms.build_measure(small_stack, 0.0)
    assert np.all(lg.masses == small_stack.grid.dx**2)
    assert lg.total == pytest.approx(4.0, rel=1e-12)


def test_masses_positive_and_frozen(small_measure):
    assert np.all(small_measure.masses > 0)
    with pytest.raises(ValueError):
        small_measure.masses[0, 0] = 1.0


def test_mass_formula(small_stack):
    lg = ms.build_measure(small_stack, 0.7)
    v = small_stack.variance
    expect = np.exp(0.7 * small_stack.values - 0.245 * v) * small_stack.grid.dx**2
    np.testing.assert_allclose(lg.masses, expect, rtol=1e-14)


def test_invalid_gamma(small_stack):
    with pytest.raises(ValueError):
        ms.build_measure(small_stack, 2.0)


def test_box_mass_additive(small_measure):
    a = small_measure.box_mass(0, 32, 0, 64)
    b = small_measure.box_mass(32, 64, 0, 64)
    assert a + b == pytest.approx(small_measure.total, rel=1e-12)


@pytest.mark.parametrize("r, tol", [(0.05, 0.004), (0.25, 0.0005), (0.5, 0.0005)])
def test_lebesgue_ball_mass(r, tol):
    lg = lebesgue(fld.Grid.centered(2.0, 512))
    assert ms.ball_mass(lg, (0.013, -0.021), r) == pytest.approx(math.pi * r * r, rel=tol)


def test_ball_resolution_and_domain(small_measure):
    dx = small_measure.grid.dx
    with pytest.raises(ms.ResolutionError):
        ms.ball_mass(small_measure, (0, 0), 1.5 * dx)
    with pytest.raises(fld.OutOfDomainError):
        ms.ball_mass(small_measure, (0.9, 0), 0.2)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.07, 0.55), st.floats(0.07, 0.55), st.floats(-0.4, 0.4), st.floats(-0.4, 0.4))
def test_ball_mass_monotone(r1, r2, cx, cy):
    lg = _MEASURE
    lo, hi = sorted((r1, r2))
    assert ms.ball_mass(lg, (cx, cy), lo) <= ms.ball_mass(lg, (cx, cy), hi) + 1e-15


def test_sample_from_measure_follows_masses(small_measure):
    rng = np.random.default_rng(0)
    pts = ms.sample_from_measure(small_measure, rng, 20_000)
    assert pts.shape == (20_000, 2)
    assert np.all(small_measure.grid.contains(pts))
    i, j = small_measure.grid.cell_index(pts)
    left = np.mean(i < 32)
    expect = small_measure.box_mass(0, 32, 0, 64) / small_measure.total
    assert abs(left - expect) < 4 * math.sqrt(expect * (1 - expect) / 20_000)
    assert ms.sample_from_measure(small_measure, rng).shape == (2,)


def test_volume_fit_lebesgue():
    lg = lebesgue(fld.Grid.centered(2.0, 512))
    fit = ms.volume_exponent_fit(lg, (0.1, 0.1), [0.02, 0.05, 0.1, 0.2, 0.4])
    assert fit.slope == pytest.approx(2.0, abs=0.01)
    with pytest.raises(FitError):
        ms.volume_exponent_fit(lg, (0, 0), [0.1, 0.2, 0.3])


def test_negative_moment_gamma_zero():
    lg = lebesgue(fld.Grid.centered(1.0, 256))
    radii = [0.05, 0.1, 0.2]
    rep = ms.negative_moment([lg] * 200, 1.0, radii)
    exact = [ms.ball_mass(lg, (0, 0), r) ** -1 for r in radii]
    np.testing.assert_allclose(rep.values(), exact, rtol=1e-12)
    assert rep.fits["slope"]["slope"] == pytest.approx(2.0, abs=0.01)
    with pytest.raises(InsufficientSamplesError):
        ms.negative_moment([lg] * 10, 1.0, radii)


def test_doubling_lebesgue_has_no_violations():
    lg = lebesgue(fld.Grid.centered(2.0, 256))
    pts = ms.sample_from_measure(lg, np.random.default_rng(1), 50)
    rep = ms.doubling_check(lg, pts, [0.02, 0.05, 0.1], 2.5)
    row = rep.row("violation_fraction")
    assert row.value == 0.0
    assert row.n_samples + row.extra["skipped"] == 150
    assert row.extra["worst_ratio_over_bound"] == pytest.approx(
        4.0 / (8 * math.log(1 / 0.1) ** 2.5), rel=0.05)
    with pytest.raises(ValueError):
        ms.doubling_check(lg, pts, [0.1], 2.0)


def _build_measure():
    grid = fld.Grid.centered(2.0, 64)
    p = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(grid))
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ms.build_measure(fld.build_stack(p, grid, 11))


_MEASURE = _build_measure()
