import math

import numpy as np
import pytest

from lqg_lab import field as fld
from lqg_lab import heatkernel as hk
from lqg_lab import measure as ms
from lqg_lab import spectral as spc
from lqg_lab import walker as wk
from lqg_lab.report import FitError
from lqg_lab.rng import Streams

from conftest import lebesgue


@pytest.fixture(scope="module")
def plane():
    return lebesgue(fld.Grid.centered(8.0, 256))


def test_free_return_gamma_zero(plane):
    ts = [0.1, 0.3]
    free, killed = hk.return_estimates((0.0, 0.0), ts, 0.15, 20_000, plane, Streams(0))
    assert killed is None
    for e in free:
        # exact ball average of the planar kernel: (1 - exp(-rho^2 / 2t)) / (pi rho^2)
        exact = (1 - math.exp(-e.rho**2 / (2 * e.t))) / e.ball_mass
        assert abs(e.p_hat - exact) < 4 * e.se + 0.01 * exact


def test_killed_below_free(plane):
    free, killed = hk.return_estimates((0.0, 0.0), [0.2], 0.15, 5000, plane, Streams(1),
                                       mask=hk.Disc((0.0, 0.0), 0.5))
    assert killed[0].hits <= free[0].hits
    assert killed[0].killed and not free[0].killed


def test_killed_disc_matches_series(plane):
    # Dirichlet kernel of Laplacian/2 on the unit disc at the center:
    # sum_k exp(-j_k^2 t / 2) / (pi J_1(j_k)^2)
    from scipy import special
    t = 0.25
    j = special.jn_zeros(0, 30)
    exact = np.sum(np.exp(-j**2 * t / 2) / (math.pi * special.j1(j) ** 2))
    _, kd = hk.return_estimates((0.0, 0.0), [t], 0.1, 40_000, plane, Streams(2), mask=hk.Disc((0, 0), 1.0))
    assert kd[0].p_hat == pytest.approx(exact, rel=0.1)


def test_mask_killing_equals_disc_killing(plane):
    mask = spc.DomainMask.disc(plane.grid, (0.0, 0.0), 0.5)
    _, a = hk.return_estimates((0.0, 0.0), [0.1], 0.1, 4000, plane, Streams(3), mask=mask)
    _, b = hk.return_estimates((0.0, 0.0), [0.1], 0.1, 4000, plane, Streams(3), mask=hk.Disc((0, 0), 0.5))
    assert abs(a[0].p_hat - b[0].p_hat) < 4 * math.hypot(a[0].se, b[0].se)


def test_resolution_and_domain_errors(plane):
    with pytest.raises(ms.ResolutionError):
        hk.return_estimates((0, 0), [0.1], plane.grid.dx, 10, plane, Streams(0))
    with pytest.raises(fld.OutOfDomainError):
        hk.return_estimates((0.9, 0), [0.1], 0.1, 10, plane, Streams(0), mask=hk.Disc((0, 0), 0.5))


def test_deterministic_across_threads(small_measure):
    a, _ = hk.return_estimates((0, 0), [0.05], 0.1, 2100, small_measure, Streams(4), threads=1)
    b, _ = hk.return_estimates((0, 0), [0.05], 0.1, 2100, small_measure, Streams(4), threads=2)
    assert a[0].hits == b[0].hits


def test_mass_matched_radius(small_measure):
    r = hk.mass_matched_radius(small_measure, (0.0, 0.0), 0.05)
    # ball mass is a step function of r (sub-sampled boundary cells): the target is bracketed
    eps = 1e-6
    assert ms.ball_mass(small_measure, (0.0, 0.0), r - eps) <= 0.05 * 1.001
    assert ms.ball_mass(small_measure, (0.0, 0.0), r + eps) >= 0.05 * 0.999
    assert hk.mass_matched_radius(small_measure, (0.0, 0.0), 1e-9) is None


def test_pointwise_dimension_gamma_zero(plane):
    fit = hk.pointwise_dimension((0.0, 0.0), np.geomspace(0.05, 0.5, 5), plane, 10_000, Streams(5))
    assert fit.slope == pytest.approx(2.0, abs=0.1)
    with pytest.raises(FitError):
        hk.pointwise_dimension((0.0, 0.0), [0.1, 0.2], plane, 100, Streams(5))


def test_lower_bound_gamma_zero():
    lg = lebesgue(fld.Grid.centered(2.0, 128))
    b = wk.exit_disc(lg, (0, 0), (0, 0), 1.0, 4000, Streams(6))
    lb, se = hk.dirichlet_lower_bound_se((0, 0), 1.0, 0.25, b, lg)
    surv = np.mean(b.tau > 0.25)
    assert lb == pytest.approx(surv**2 / ms.ball_mass(lg, (0, 0), 1.0))
    assert se > 0
    with pytest.warns(hk.RegimeWarning):
        hk.dirichlet_lower_bound((0, 0), 1.0, 0.4, b, lg)


def test_envelope_check():
    ests = [hk.ReturnEstimate((0, 0), t, 0.1, 1 / (2 * math.pi * t), 0.0, 1, 1, 1.0, False, 0, 0)
            for t in (0.01, 0.05, 0.1)]
    rep = hk.envelope_check(ests)
    assert rep.value("C1_upper") == pytest.approx(max(1 / (2 * math.pi * math.log(1 / t)) for t in (0.01, 0.05, 0.1)))
    assert not rep.flagged
    assert hk.envelope_check(ests + [hk.ReturnEstimate((0, 0), 2.0, 0.1, 0.1, 0, 1, 1, 1.0, False, 0, 0)]).flagged
