import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from lqg_lab import field as fld
from lqg_lab import spectral as spc

from conftest import lebesgue


def _square(n, lg=None):
    g = fld.Grid((0.0, 0.0), 1.0, n)
    lg = lg or lebesgue(g)
    return lg, spc.DomainMask.from_array(g, np.ones(g.shape, bool), lg)


@pytest.fixture(scope="module")
def square128():
    lg, mask = _square(128)
    return spc.eigensolve(spc.assemble(lg, mask), 100), mask


def test_square_eigenvalues(square128):
    # exclusion boundary: the Dirichlet wall sits at the first outside cell center, so the
    # discrete square has side 1 + dx and eigenvalues low by about 2 dx
    dec, _ = square128
    ref = 0.5 * math.pi**2 * np.array([2, 5, 5, 8, 10, 10])
    np.testing.assert_allclose(dec.eigenvalues[:6], ref, rtol=0.02)
    np.testing.assert_allclose(dec.eigenvalues[:6], ref / (1 + 1 / 128) ** 2, rtol=2e-3)
    assert np.all(np.diff(dec.eigenvalues) >= 0)
    assert dec.residuals.max() < 1e-8


def test_eigenvectors_d_orthonormal(square128):
    dec, _ = square128
    V, D = dec.eigenvectors[:, :10], dec.pencil.D
    np.testing.assert_allclose(V.T @ (D[:, None] * V), np.eye(10), atol=1e-8)


def test_disc_first_eigenvalue():
    g = fld.Grid.centered(2.0, 128)
    dec = spc.eigensolve(spc.assemble(lebesgue(g), spc.DomainMask.disc(g, (0, 0), 1.0)), 1)
    assert dec.eigenvalues[0] == pytest.approx(special.jn_zeros(0, 1)[0] ** 2 / 2, rel=0.02)


def test_dense_and_sparse_agree():
    g = fld.Grid((0.0, 0.0), 1.0, 24)
    lg = lebesgue(g)
    small = spc.DomainMask.rectangle(g, 0.1, 0.9, 0.1, 0.9, lg)   # under the dense threshold
    dense = spc.eigensolve(spc.assemble(lg, small), 5)
    from lqg_lab.spectral import DirichletPencil
    pencil = spc.assemble(lg, small)
    import scipy.linalg as sla
    ref = sla.eigh(pencil.A.toarray(), np.diag(pencil.D), eigvals_only=True)[:5]
    np.testing.assert_allclose(dense.eigenvalues, ref, rtol=1e-10)


def test_heat_trace_two_term_weyl(square128):
    # Dirichlet unit square, generator Laplacian/2: Z(t) = (1/sqrt(2 pi t) - 1/2)^2 up to
    # exponentially small terms; the one-term 1/(2 pi t) misses the boundary correction
    dec, _ = square128
    t = 0.05
    series = sum(math.exp(-0.5 * math.pi**2 * k * k * t) for k in range(1, 60)) ** 2
    weyl2 = (1 / math.sqrt(2 * math.pi * t) - 0.5) ** 2
    assert series == pytest.approx(weyl2, rel=1e-6)
    side = 1 + 1 / 128  # effective side of the exclusion-boundary square
    shifted = sum(math.exp(-0.5 * math.pi**2 * k * k * t / side**2) for k in range(1, 60)) ** 2
    assert spc.heat_trace(dec, t) == pytest.approx(shifted, rel=3e-3)
    assert spc.heat_trace(dec, t) == pytest.approx(series, rel=0.03)
    assert spc.heat_trace(dec, t) < 0.6 / (2 * math.pi * t)


def test_heat_trace_known_value_at_t_001():
    # t = 0.01 with the boundary term: (1/sqrt(0.02 pi) - 1/2)^2 = 12.1761, not 1/(2 pi t) = 15.92
    t = 0.01
    series = sum(math.exp(-0.5 * math.pi**2 * k * k * t) for k in range(1, 200)) ** 2
    assert series == pytest.approx(12.1761, abs=1e-4)
    assert series == pytest.approx((1 / math.sqrt(2 * math.pi * t) - 0.5) ** 2, rel=1e-9)


def test_truncation_error_for_small_t(square128):
    dec, _ = square128
    t0 = spc.min_trace_time(dec)
    spc.heat_trace(dec, t0 * 1.01)
    with pytest.raises(spc.TruncationError):
        spc.heat_trace(dec, t0 * 0.5)
    tk = spc.min_kernel_time(dec, (64, 64), (64, 64))
    with pytest.raises(spc.TruncationError):
        spc.eigen_heatkernel(dec, (64, 64), (64, 64), tk * 0.5)


def test_heatkernel_symmetric_and_submarkov(square128):
    dec, _ = square128
    t = 0.05
    a = spc.eigen_heatkernel(dec, (40, 70), (60, 50), t)
    b = spc.eigen_heatkernel(dec, (60, 50), (40, 70), t)
    assert a == pytest.approx(b, rel=1e-12)
    phi_x = dec.values_at((64, 64))
    mass = np.sum(np.exp(-dec.eigenvalues * t) * phi_x * (dec.eigenvectors.T @ dec.pencil.D))
    assert 0 < mass <= 1.0 + 1e-9


def test_faber_krahn_square():
    lg, mask = _square(128)
    r = spc.faber_krahn_ratio(spc.eigensolve(spc.assemble(lg, mask), 1), mask)
    assert r == pytest.approx(math.pi**2 * math.log(3.0), rel=0.03)


def test_domain_monotonicity(small_measure):
    g = small_measure.grid
    big = spc.DomainMask.rectangle(g, -0.8, 0.8, -0.8, 0.8, small_measure)
    small = spc.DomainMask.rectangle(g, -0.5, 0.5, -0.5, 0.5, small_measure)
    lb = spc.eigensolve(spc.assemble(small_measure, big), 1).eigenvalues[0]
    ls = spc.eigensolve(spc.assemble(small_measure, small), 1).eigenvalues[0]
    assert ls >= lb


def test_mask_components():
    g = fld.Grid((0.0, 0.0), 1.0, 32)
    a = np.zeros(g.shape, bool)
    a[2:6, 2:6] = True
    a[10:20, 10:20] = True
    m = spc.DomainMask.from_array(g, a)
    assert m.components == 2
    lc = m.largest_component()
    assert lc.components == 1 and lc.cell_count == 100
    with pytest.raises(ValueError):
        spc.DomainMask.from_array(g, np.zeros(g.shape, bool))


def test_neumann_has_zero_mode():
    lg, mask = _square(24)
    dec = spc.eigensolve(spc.assemble(lg, mask, boundary="neumann"), 3)
    assert abs(dec.eigenvalues[0]) < 1e-8
    assert dec.eigenvalues[1] == pytest.approx(0.5 * math.pi**2, rel=0.01)


def test_global_dimension_exact_power():
    ts = np.geomspace(1e-3, 1e-2, 6)
    fit = spc.global_dimension(ts, 3.0 / ts)
    assert fit.slope == pytest.approx(2.0, abs=1e-12)


def _phi_closed(C9, s):
    a = s / 4.0
    return 16.0 / (C9 * s) * ((2 + a) * math.log(2 + a) - a * math.log(a))


@pytest.mark.parametrize("C9", [0.5, 1.0, 4.0])
@pytest.mark.parametrize("s", [1e-3, 0.1, 1.0, 30.0, 1e4])
def test_nash_phi_closed_form(C9, s):
    assert spc.nash_phi(C9, s) == pytest.approx(_phi_closed(C9, s), rel=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(-8.0, 3.0))
def test_nash_round_trip_and_ode(C9, log_t):
    t = 10.0**log_t
    m = spc.nash_profile(C9, t)
    assert spc.nash_phi(C9, m) == pytest.approx(t, rel=1e-9)
    assert spc.nash_ode_residual(C9, t) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_nash_phi_decreasing_and_dominated(a, b):
    lo, hi = sorted((a, b))
    assert spc.nash_phi(1.0, lo) >= spc.nash_phi(1.0, hi)
    assert spc.nash_phi(1.0, lo) <= float(spc.nash_psi(1.0, lo))


def test_nash_constant_value():
    # sup over t of Psi(t^-1 log t^-1)/t at C9 = 1, from the closed form on a fine grid
    u = np.linspace(math.log(2), 60, 200_001)
    t = np.exp(-u)
    s = u / t
    ratio = 80 * np.log(2 + s / 4) / s / t
    assert spc.nash_constant(1.0) == pytest.approx(ratio.max(), rel=1e-8)
    assert spc.nash_constant(1.0) == pytest.approx(98.44, abs=0.01)
    assert spc.nash_constant(2.0) == pytest.approx(spc.nash_constant(1.0) / 2, rel=1e-9)


def test_nash_comparison_bound():
    C = spc.nash_constant(1.0)
    for t in np.geomspace(1e-6, 0.5, 20):
        assert spc.nash_profile(1.0, C * t) <= math.log(1 / t) / t
