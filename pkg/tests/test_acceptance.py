"""Acceptance criteria AC1-AC15 at their stated tolerances.

Each test runs the matching check from ``lqg_lab.verify`` (standard profile,
seed 0) and records a one-line PASS/FAIL summary that is printed at the end
of the session.
"""

import pytest

from lqg_lab import verify

RESULTS: list = []


def _run(key):
    res = verify.CHECKS[key](profile="standard", seed=0)
    RESULTS.append(res)
    print(res.line())
    assert res.passed, f"{key} failed: {res.failures}; measured {res.measured}"


def test_ac01_kernel_quadrature_matches_bessel():
    _run("AC1")


def test_ac02_band_covariance_matches_quadrature():
    _run("AC2")


def test_ac03_measure_normalization():
    _run("AC3")


def test_ac04_volume_exponent_band():
    _run("AC4")


def test_ac05_negative_moments_of_ball_masses():
    _run("AC5")


def test_ac06_gamma_zero_is_brownian_motion():
    _run("AC6")


def test_ac07_green_identity():
    _run("AC7")


def test_ac08_exit_time_moments_and_tails():
    _run("AC8")


def test_ac09_dirichlet_eigenvalues_closed_forms():
    _run("AC9")


def test_ac10_eigen_expansion_vs_monte_carlo():
    _run("AC10")


def test_ac11_dirichlet_lower_bound_chain():
    _run("AC11")


def test_ac12_faber_krahn_ratio():
    _run("AC12")


def test_ac13_nash_profile():
    _run("AC13")


def test_ac14_spectral_dimensions():
    _run("AC14")


def test_ac15_doubling_property():
    _run("AC15")
