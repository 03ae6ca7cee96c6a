"""Acceptance checks.

Each ``check_*`` function runs one numbered criterion end to end and returns
a :class:`CheckResult` with the measured values and the tolerance it was held
to.  ``run_profile`` strings them together for the CLI.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import special, stats

from . import field as fld
from . import heatkernel as hk
from . import measure as ms
from . import spectral as spc
from . import walker as wk
from .rng import Streams

J01 = float(special.jn_zeros(0, 1)[0])


@dataclass
class CheckResult:
    key: str
    title: str
    passed: bool
    measured: dict = field(default_factory=dict)
    tolerance: str = ""
    reference: str = ""
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        shown = ", ".join(f"{k}={_short(v)}" for k, v in self.measured.items() if not isinstance(v, (list, dict)))
        return f"[{status}] {self.key} {self.title}: {shown} (tolerance: {self.tolerance}; {self.seconds:.1f}s)"


def _short(v):
    if isinstance(v, float):
        return f"{v:.5g}"
    return str(v)


class _Check:
    def __init__(self, key, title, tolerance, reference):
        self.res = CheckResult(key, title, True, tolerance=tolerance, reference=reference)
        self.t0 = time.perf_counter()

    def require(self, ok: bool, what: str) -> None:
        if not ok:
            self.res.passed = False
            self.res.failures.append(what)

    def done(self) -> CheckResult:
        self.res.seconds = time.perf_counter() - self.t0
        return self.res


def _quiet():
    ctx = warnings.catch_warnings()
    ctx.__enter__()
    warnings.simplefilter("ignore", fld.EmbeddingWarning)
    return ctx


def _stack(L, n, gamma, seed, center=(0.0, 0.0), mass=1.0, retain=False, origin=None):
    grid = fld.Grid(origin, L, n) if origin is not None else fld.Grid.centered(L, n, center)
    params = fld.KernelParams.dyadic(mass, gamma, fld.truncation_level(grid))
    ctx = _quiet()
    try:
        return fld.build_stack(params, grid, seed, retain_bands=retain)
    finally:
        ctx.__exit__(None, None, None)


def _lebesgue(grid: fld.Grid) -> ms.LiouvilleGrid:
    return ms.LiouvilleGrid(grid, 0.0, np.full(grid.shape, grid.dx**2), 0, 0.0)


@lru_cache(maxsize=2)
def _large_field(seed: int, n: int):
    """The unit-square field used by the volume and doubling checks."""
    return _stack(1.0, n, 1.0, Streams(seed).child("large"), origin=(0.0, 0.0))


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def check_kernels(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC1", "kernel quadrature vs Bessel closed forms", "1e-8 relative; k(0) = 1 exactly",
               "massive Green function and band kernel")
    worst_k = worst_heat = worst_scale = 0.0
    n_pts = 12 if profile == "quick" else 30
    for m in (1.0, 2.5):
        p = fld.KernelParams.dyadic(m, 1.0, 1)
        for z in np.geomspace(0.01, 10.0, n_pts):
            d = z / m
            kk = fld.kernel_k(p, d)
            worst_k = max(worst_k, abs(kk / (z * special.k1(z)) - 1))
            g0 = special.k0(z)
            worst_heat = max(worst_heat, abs(fld.green_massive(p, d, "heat") / g0 - 1))
            if profile != "quick" or z in (0.01, 1.0, 10.0):
                worst_scale = max(worst_scale, abs(fld.green_massive(p, d, "scale") / g0 - 1))
        c.require(fld.kernel_k(p, 0.0) == 1.0, f"k(0) != 1 at m={m}")
    c.res.measured = {"max_rel_err_k": worst_k, "max_rel_err_g_heat": worst_heat,
                      "max_rel_err_g_scale": worst_scale}
    c.require(max(worst_k, worst_heat, worst_scale) < 1e-8, "relative error above 1e-8")
    return c.done()


def check_field_covariance(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC2", "empirical band covariance vs quadrature", "|z| <= 4 at 10 lags, 1000 replicates",
               "band covariance definition")
    grid = fld.Grid.centered(2.0, 256)
    params = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(grid))
    reps = 1000
    worst = 0.0
    bands = (1, 3, 5) if profile != "quick" else (5,)
    ref = (32, 128)
    ctx = _quiet()
    try:
        for n in bands:
            ens = fld.sample_band_ensemble(params, grid, n, reps, Streams(seed).child("cov"))
            reach = min(4.0 / params.cutoffs[n - 1], (grid.cells - ref[0] - 1) * grid.dx)
            ks = np.unique(np.round(np.linspace(0, reach / grid.dx, 10)).astype(int))
            rep = fld.validate_covariance(ens, ks * grid.dx, params, reference=ref)
            z = np.array([r.extra["z"] for r in rep.rows])
            worst = max(worst, float(np.max(np.abs(z))))
            c.res.measured[f"band{n}_max|z|"] = float(np.max(np.abs(z)))
            c.res.measured[f"band{n}_method"] = ens[0].method
            c.require(not rep.flagged and len(z) == 10, f"band {n}: {rep.flags}")
            del ens
    finally:
        ctx.__exit__(None, None, None)
    c.res.measured["max|z|"] = worst
    return c.done()


def check_measure_normalization(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC3", "ensemble mean of M_N(box) equals |box|", "within 3 SE, 1000 replicates",
               "normalization of the approximating measure")
    reps = 1000 if profile != "quick" else 100
    gammas = (0.5, 1.0, 1.5)
    grid = fld.Grid((0.0, 0.0), 1.0, 128)
    params = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(grid))
    boxes = {"unit": (0, 128, 0, 128), "quarter": (16, 80, 40, 104)}
    totals = {(g, b): [] for g in gammas for b in boxes}
    ctx = _quiet()
    try:
        for r in range(reps):
            st = fld.build_stack(params, grid, Streams(seed).child("norm", r), retain_bands=False)
            for g in gammas:
                lg = ms.build_measure(st, g)
                for b, (i0, i1, j0, j1) in boxes.items():
                    totals[(g, b)].append(lg.box_mass(i0, i1, j0, j1))
    finally:
        ctx.__exit__(None, None, None)
    for (g, b), vals in totals.items():
        i0, i1, j0, j1 = boxes[b]
        area = (i1 - i0) * (j1 - j0) * grid.dx**2
        m, se = np.mean(vals), np.std(vals, ddof=1) / math.sqrt(len(vals))
        c.res.measured[f"g{g}_{b}_z"] = float((m - area) / se)
        c.require(abs(m - area) <= 3 * se, f"gamma={g} box={b}: mean {m:.4f} vs {area:.4f} (se {se:.4f})")
    return c.done()


def check_volume_exponent(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC4", "volume exponent band", "gamma=1: slopes in [0, 5] for >= 95% of 100 centers; "
               "gamma=0: slope 2.00 +/- 0.05", "volume-decay exponents alpha_1, alpha_2")
    n = 2048 if profile != "quick" else 256
    radii = 2.0 ** -np.arange(9, 2, -1) if n == 2048 else 2.0 ** -np.arange(6, 2, -1)
    lo, hi = ms.alpha_band(1.0)[1] - 0.5, ms.alpha_band(1.0)[0] + 0.5
    rng = Streams(seed).child("centers").generator()
    centers = rng.uniform(radii[-1], 1 - radii[-1], size=(100, 2))
    lg0 = _lebesgue(fld.Grid((0.0, 0.0), 1.0, n))
    s0 = [ms.volume_exponent_fit(lg0, x, radii).slope for x in centers]
    c.res.measured["gamma0_max|slope-2|"] = float(np.max(np.abs(np.array(s0) - 2)))
    c.require(np.all(np.abs(np.array(s0) - 2.0) <= 0.05), "gamma=0 slope outside 2.00 +/- 0.05")
    if profile != "quick":
        lg1 = ms.build_measure(_large_field(seed, n), 1.0)
        s1 = np.array([ms.volume_exponent_fit(lg1, x, radii).slope for x in centers])
        frac = float(np.mean((s1 >= lo) & (s1 <= hi)))
        c.res.measured.update({"gamma1_in_band": frac, "gamma1_mean_slope": float(s1.mean()),
                               "gamma1_min": float(s1.min()), "gamma1_max": float(s1.max())})
        c.require(frac >= 0.95, f"only {frac:.0%} of slopes in [{lo}, {hi}]")
    return c.done()


def check_negative_moments(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC5", "negative moments of ball masses", "slope <= xi~(q) + 0.5; gamma=0 equals (pi r^2)^-q",
               "negative-moment exponent xi~")
    grid = fld.Grid.centered(1.0, 256)
    radii = 2.0 ** -np.arange(2, 7)
    reps = 200
    lg0 = _lebesgue(grid)
    rep0 = ms.negative_moment([lg0] * reps, 1.0, radii)
    exact = np.array([ms.ball_mass(lg0, (0, 0), r) ** -1.0 for r in radii])
    disc = np.max(np.abs(rep0.values() / (math.pi * radii**2) ** -1.0 - 1))
    c.res.measured["gamma0_max_rel_dev_from_pi_r2"] = float(disc)
    c.require(np.allclose(rep0.values(), exact, rtol=1e-12), "gamma=0 estimate is not deterministic")
    c.require(disc < 0.03, "gamma=0 ball masses deviate from pi r^2 by more than the 4x4 weighting error")
    if profile != "quick":
        params = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(grid))
        ctx = _quiet()
        try:
            ens = [ms.build_measure(fld.build_stack(params, grid, Streams(seed).child("negmom", r),
                                                    retain_bands=False), 1.0) for r in range(reps)]
        finally:
            ctx.__exit__(None, None, None)
        for q in (0.5, 1.0):
            rep = ms.negative_moment(ens, q, radii)
            slope = rep.fits["slope"]["slope"]
            cap = ms.xi_tilde(q, 1.0) + 0.5
            c.res.measured[f"q{q}_slope"] = float(slope)
            c.res.measured[f"q{q}_cap"] = cap
            c.require(slope <= cap, f"q={q}: slope {slope:.3f} > {cap}")
    return c.done()


def check_gamma0_diffusion(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC6", "gamma=0 reduces to planar Brownian motion",
               "E[tau]=0.5 within 3 SE; KS p > 0.01; p_t within 10% of 1/(2 pi t)", "degenerate case")
    st = Streams(seed).child("gamma0")
    grid = fld.Grid.centered(2.0, 256)
    lg = _lebesgue(grid)
    big = _lebesgue(fld.Grid.centered(8.0, 512))
    path = wk.simulate_bm((0.0, 0.0), 1e-3, 0.5, st.child("path").generator())
    clock = wk.clock_along(path, big)
    c.require(np.array_equal(clock.values, path.times), "clock is not the identity")
    walkers = 10_000 if profile != "quick" else 4000
    b = wk.exit_disc(lg, (0, 0), (0, 0), 1.0, walkers, st.child("exit"))
    m, se = float(b.tau.mean()), float(b.tau.std(ddof=1) / math.sqrt(len(b)))
    ks = stats.kstest((b.angles() + math.pi) / (2 * math.pi), "uniform").pvalue
    c.res.measured.update({"E_tau": m, "se": se, "ks_p": float(ks), "censored": int(b.censored.sum())})
    c.require(abs(m - 0.5) <= 3 * se, f"E[tau] = {m:.4f} +/- {se:.4f}")
    c.require(ks > 0.01, f"exit angles fail KS (p={ks:.3g})")
    ts = np.array([0.05, 0.1, 0.2, 0.3, 0.5])
    rhos = np.sqrt(0.3 * ts / math.pi)
    free, _ = hk.return_estimates((0.0, 0.0), ts, rhos, 100_000 if profile != "quick" else 20_000, big,
                                  st.child("return"))
    dev = [e.p_hat * 2 * math.pi * e.t - 1 for e in free]
    c.res.measured["max|p/p_exact-1|"] = float(np.max(np.abs(dev)))
    c.require(np.all(np.abs(dev) <= 0.10), f"heat kernel deviations {np.round(dev, 3)}")
    return c.done()


def _green_cases(profile):
    if profile == "quick":
        return [((0.0, 0.0), 0.5)]
    return [((0.0, 0.0), 0.25), ((0.0, 0.0), 0.5), ((0.3, -0.2), 0.25), ((0.3, -0.2), 0.5),
            ((-0.35, 0.3), 0.25), ((-0.35, 0.3), 0.5)]


def check_green_identity(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC7", "Green/Revuz identity", "gamma=1: within 5% + 3 SE; gamma=0: both sides 0.5 within 2%",
               "expected exit time as Green potential of M")
    st = Streams(seed).child("green")
    grid = fld.Grid.centered(2.0, 256)
    lg0 = _lebesgue(grid)
    rep0 = wk.green_identity_check(lg0, (0, 0), ((0, 0), 1.0), 10_000, st.child("g0"))
    mc0, q0 = rep0.value("mc_expected_exit"), rep0.value("quadrature")
    c.res.measured.update({"gamma0_mc": mc0, "gamma0_quad": q0})
    c.require(abs(mc0 / 0.5 - 1) <= 0.02 and abs(q0 / 0.5 - 1) <= 0.02, "gamma=0 sides not within 2% of 0.5")
    if profile != "quick":
        lg1 = ms.build_measure(_stack(2.0, 256, 1.0, st.child("field")), 1.0)
        worst = 0.0
        for k, (x, R) in enumerate(_green_cases(profile)):
            rep = wk.green_identity_check(lg1, x, (x, R), 10_000, st.child("case", k))
            rel = rep.row("relative_difference")
            worst = max(worst, rel.value)
            c.require(rel.value <= rel.extra["tolerance"], f"x={x}, R={R}: rel diff {rel.value:.3%}")
        c.res.measured["gamma1_max_rel_diff"] = worst
    return c.done()


def check_exit_moments(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC8", "exit-time moments and tails",
               "gamma=0 slope 2q +/- 0.2; gamma=1 annealed slope <= xi~(q)+0.5; tail fit r^2 >= 0.9; "
               "survival bound non-vacuous", "exit-time negative moments and tails")
    st = Streams(seed).child("exitmom")
    grid = fld.Grid.centered(2.0, 256)
    radii = [0.0625, 0.125, 0.25, 0.5]
    lg0 = _lebesgue(grid)
    b0 = {r: wk.exit_disc(lg0, (0, 0), (0, 0), r, 4000, st.child("g0", k)) for k, r in enumerate(radii)}
    for q in (0.5, 1.0):
        s0 = wk.exit_negative_moment(b0, q).fits["slope"]["slope"]
        c.res.measured[f"gamma0_q{q}_slope"] = float(s0)
        c.require(abs(s0 - 2 * q) <= 0.2, f"gamma=0 q={q}: slope {s0:.3f}")
    if profile == "quick":
        return c.done()
    reps, walkers = 40, 250
    params = fld.KernelParams.dyadic(1.0, 1.0, fld.truncation_level(grid))
    by_r = {r: [] for r in radii}
    ctx = _quiet()
    try:
        for rep in range(reps):
            lg = ms.build_measure(fld.build_stack(params, grid, st.child("ann", rep), retain_bands=False), 1.0)
            for k, r in enumerate(radii):
                by_r[r].append(wk.exit_disc(lg, (0, 0), (0, 0), r, walkers, st.child("annw", rep, k)))
    finally:
        ctx.__exit__(None, None, None)
    for q in (0.5, 1.0):
        s1 = wk.exit_negative_moment(by_r, q).fits["slope"]["slope"]
        cap = ms.xi_tilde(q, 1.0) + 0.5
        c.res.measured[f"gamma1_q{q}_slope"] = float(s1)
        c.require(s1 <= cap, f"gamma=1 q={q}: annealed slope {s1:.3f} > {cap}")
    # tails on one realization
    lg1 = ms.build_measure(_stack(2.0, 256, 1.0, st.child("tailfield")), 1.0)
    r = 0.25
    bt = wk.exit_disc(lg1, (0, 0), (0, 0), r, 20_000, st.child("tail"))
    beta = ms.alpha_band(1.0)[0] + 0.5
    rep = wk.exit_tail(bt, r, beta, lg1, (0.0, 0.0))
    r2 = rep.fits["subgaussian"]["r2"]
    p_half = rep.value("P[tau<=mean/2]")
    margin = rep.value("survival_margin")
    c.res.measured.update({"tail_fit_r2": float(r2), "P[tau<=mean/2]": p_half, "survival_margin": margin})
    c.require(r2 >= 0.9, f"sub-Gaussian fit r^2 = {r2:.3f}")
    c.require(p_half < 1.0, "P[tau <= mean/2] is 1")
    c.require(margin >= 0, "survival bound violated")
    return c.done()


def check_spectral_closed_forms(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC9", "gamma=0 Dirichlet eigenvalues", "within 2% of closed forms at 256 cells across",
               "Dirichlet spectrum of Laplacian/2")
    g = fld.Grid((0.0, 0.0), 1.0, 256)
    dec = spc.eigensolve(spc.assemble(_lebesgue(g), spc.DomainMask.from_array(g, np.ones(g.shape, bool))), 4)
    ref = 0.5 * math.pi**2 * np.array([2, 5, 5, 8])
    dev = dec.eigenvalues / ref - 1
    g2 = fld.Grid.centered(2.0, 256)
    decd = spc.eigensolve(spc.assemble(_lebesgue(g2), spc.DomainMask.disc(g2, (0, 0), 1.0)), 1)
    dd = decd.eigenvalues[0] / (J01**2 / 2) - 1
    c.res.measured.update({"square_lambda1": float(dec.eigenvalues[0]), "disc_lambda1": float(decd.eigenvalues[0]),
                           "max_rel_dev_square": float(np.max(np.abs(dev))), "rel_dev_disc": float(dd)})
    c.require(np.all(np.abs(dev) <= 0.02), f"square deviations {dev}")
    c.require(abs(dd) <= 0.02, f"disc deviation {dd}")
    return c.done()


def _cross_setup(seed):
    grid = fld.Grid((0.0, 0.0), 1.0, 128)
    lg = ms.build_measure(_stack(1.0, 128, 1.0, Streams(seed).child("cross"), origin=(0.0, 0.0)), 1.0)
    mask = spc.DomainMask.rectangle(grid, 0.25, 0.75, 0.25, 0.75, lg)
    dec = spc.eigensolve(spc.assemble(lg, mask), 128)
    return grid, lg, mask, dec


def check_cross_estimator(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC10", "eigen-expansion vs Monte Carlo killed heat kernel", "ratio within [1/2, 2] at 5 times",
               "eigenfunction expansion of the Dirichlet heat kernel")
    grid, lg, mask, dec = _cross_setup(seed)
    cell = (64, 64)
    x = tuple(grid.center(*cell))
    t0 = spc.min_kernel_time(dec, cell, cell) * 1.2
    ts = t0 * np.geomspace(1.0, 10.0, 5)
    eig = np.array([spc.eigen_heatkernel(dec, cell, cell, t) for t in ts])
    rho = 3 * grid.dx
    _, killed = hk.return_estimates(x, ts, rho, 20_000, lg, Streams(seed).child("crossmc"), mask=mask)
    mc = np.array([e.p_hat for e in killed])
    ratio = mc / eig
    c.res.measured.update({"t_min": float(ts[0]), "t_max": float(ts[-1]), "min_ratio": float(ratio.min()),
                           "max_ratio": float(ratio.max())})
    c.require(np.all((ratio >= 0.5) & (ratio <= 2.0)), f"ratios {np.round(ratio, 3)}")
    return c.done()


def check_lower_bound(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC11", "Dirichlet lower-bound chain", "P[tau>t]^2/M(B) <= p_2t^B(x,x) + 3 combined SE",
               "on-diagonal lower bound via survival")
    st = Streams(seed).child("lower")
    cases = []
    big = _lebesgue(fld.Grid.centered(2.0, 256))
    cases.append((big, (0.0, 0.0), 1.0, 0.25))
    if profile != "quick":
        lg1 = ms.build_measure(_stack(2.0, 256, 1.0, st.child("field")), 1.0)
        for x in ((0.0, 0.0), (0.3, -0.2)):
            for r in (0.25, 0.5):
                cases.append((lg1, x, r, None))
    worst = -math.inf
    for k, (lg, x, r, t) in enumerate(cases):
        b = wk.exit_disc(lg, x, x, r, 10_000, st.child("exit", k))
        tts = [t] if t is not None else [0.25 * b.tau.mean(), 0.5 * b.tau.mean()]
        for j, tt in enumerate(tts):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", hk.RegimeWarning)
                lb, lb_se = hk.dirichlet_lower_bound_se(x, r, tt, b, lg)
            rho = max(2 * lg.grid.dx, 0.2 * r)
            _, kd = hk.return_estimates(x, [2 * tt], rho, 20_000, lg, st.child("ret", k, j),
                                        mask=hk.Disc(tuple(x), r))
            est = kd[0]
            gap = (lb - est.p_hat) / math.hypot(lb_se, est.se)
            worst = max(worst, gap)
            c.res.measured[f"case{k}.{j}"] = f"{lb:.4g}<={est.p_hat:.4g}"
            c.require(lb <= est.p_hat + 3 * math.hypot(lb_se, est.se), f"case {k}: bound {lb:.4g} > {est.p_hat:.4g}")
    c.res.measured["max_z_excess"] = worst
    return c.done()


def check_faber_krahn(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC12", "Faber-Krahn ratio", "positive on 20 subdomains; nested monotonicity; "
               "gamma=0 square within 3% of pi^2 log 3", "Faber-Krahn-type inequality")
    g = fld.Grid((0.0, 0.0), 1.0, 256)
    lg0 = _lebesgue(g)
    m0 = spc.DomainMask.from_array(g, np.ones(g.shape, bool), lg0)
    r0 = spc.faber_krahn_ratio(spc.eigensolve(spc.assemble(lg0, m0), 1), m0)
    ref = math.pi**2 * math.log(3.0)
    c.res.measured["gamma0_ratio"] = r0
    c.require(abs(r0 / ref - 1) <= 0.03, f"gamma=0 ratio {r0:.4f} vs {ref:.4f}")
    if profile == "quick":
        return c.done()
    grid = fld.Grid((0.0, 0.0), 1.0, 128)
    lg = ms.build_measure(_stack(1.0, 128, 1.0, Streams(seed).child("fk"), origin=(0.0, 0.0)), 1.0)
    rng = Streams(seed).child("fkrect").generator()
    ratios = []
    for _ in range(20):
        w, h = rng.uniform(0.1, 0.8, 2)
        x0, y0 = rng.uniform(0, 1 - w), rng.uniform(0, 1 - h)
        mask = spc.DomainMask.rectangle(grid, x0, x0 + w, y0, y0 + h, lg)
        ratios.append(spc.faber_krahn_ratio(spc.eigensolve(spc.assemble(lg, mask), 1), mask))
    ratios = np.array(ratios)
    c.res.measured.update({"min_ratio": float(ratios.min()), "max_over_min": float(ratios.max() / ratios.min())})
    c.require(np.all(ratios > 0), "non-positive Faber-Krahn ratio")
    nested = [(0.1, 0.9), (0.2, 0.8), (0.3, 0.7), (0.4, 0.6)]
    lams = []
    for a, b in nested:
        mask = spc.DomainMask.rectangle(grid, a, b, a, b, lg)
        lams.append(spc.eigensolve(spc.assemble(lg, mask), 1).eigenvalues[0])
    c.res.measured["nested_lambda1"] = [float(v) for v in lams]
    c.require(all(b >= a for a, b in zip(lams, lams[1:])), f"nested eigenvalues not monotone: {lams}")
    return c.done()


def check_nash(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC13", "Nash profile", "ODE residual < 1e-6; round trip 1e-9; m(Ct) <= t^-1 log(1/t)",
               "ultracontractivity profile")
    worst_ode = worst_rt = 0.0
    worst_cmp = -math.inf
    for C9 in (0.5, 1.0, 7.0):
        for t in np.geomspace(1e-4, 1e2, 13):
            m = spc.nash_profile(C9, t)
            worst_rt = max(worst_rt, abs(spc.nash_phi(C9, m) / t - 1))
            worst_ode = max(worst_ode, spc.nash_ode_residual(C9, t))
        C = spc.nash_constant(C9)
        for t in np.geomspace(1e-6, 0.5, 25):
            worst_cmp = max(worst_cmp, spc.nash_profile(C9, C * t) / (math.log(1 / t) / t))
    c.res.measured.update({"max_ode_residual": worst_ode, "max_round_trip": worst_rt,
                           "max m(Ct)/(t^-1 log 1/t)": worst_cmp})
    c.require(worst_ode < 1e-6, "ODE residual")
    c.require(worst_rt < 1e-9, "round trip")
    c.require(worst_cmp <= 1.0, "comparison bound")
    return c.done()


def _pointwise_points(lg, seed, count):
    rng = Streams(seed).child("ptw").generator()
    pts = []
    while len(pts) < count:
        p = ms.sample_from_measure(lg, rng)
        if np.all(np.abs(p) < 0.5):
            pts.append(p)
    return pts


def check_spectral_dimension(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC14", "spectral dimensions", "fits in [1.7, 2.3]; gamma=0 2.00 +/- 0.1 (pointwise), "
               "+/- 0.05 (global); finite trace envelope", "pointwise and global spectral dimension")
    st = Streams(seed).child("specdim")
    big = _lebesgue(fld.Grid.centered(8.0, 512))
    f0 = hk.pointwise_dimension((0.0, 0.0), np.geomspace(0.05, 0.5, 6), big, 20_000, st.child("p0"))
    c.res.measured["pointwise_gamma0"] = f0.slope
    c.require(abs(f0.slope - 2) <= 0.1, f"gamma=0 pointwise slope {f0.slope:.3f}")
    # gamma = 0 global control on the unit square
    g = fld.Grid((0.0, 0.0), 1.0, 128)
    lg0 = _lebesgue(g)
    dec0 = spc.eigensolve(spc.assemble(lg0, spc.DomainMask.from_array(g, np.ones(g.shape, bool))), 128)
    t_lo = spc.min_trace_time(dec0)
    ts0 = t_lo * np.geomspace(1.0, 10.0, 8)
    fit0 = spc.global_dimension(ts0, [spc.heat_trace(dec0, t) for t in ts0])
    # two-term Weyl law for the Dirichlet square with generator Laplacian/2, for comparison only
    weyl = spc.global_dimension(ts0, (1 / np.sqrt(2 * np.pi * ts0) - 0.5) ** 2).slope
    c.res.measured.update({"global_gamma0": fit0.slope, "global_gamma0_two_term_weyl": weyl,
                           "global_gamma0_t": f"[{ts0[0]:.3g}, {ts0[-1]:.3g}]"})
    c.require(abs(fit0.slope - 2) <= 0.05, f"gamma=0 global slope {fit0.slope:.3f}")
    if profile == "quick":
        return c.done()
    for gamma in (0.5, 1.0):
        lg = ms.build_measure(_stack(4.0, 512, gamma, st.child("field", int(gamma * 10))), gamma)
        slopes = []
        for k, x in enumerate(_pointwise_points(lg, seed + int(gamma * 10), 6)):
            ts = _pointwise_times(lg, x, POINTWISE_MASS)
            fit = hk.pointwise_dimension(x, ts, lg, 20_000, st.child("pw", int(gamma * 10), k),
                                         mass_factor=POINTWISE_MASS)
            slopes.append(fit.slope)
        med = float(np.median(slopes))
        c.res.measured[f"pointwise_g{gamma}_median"] = med
        c.res.measured[f"pointwise_g{gamma}_slopes"] = [round(v, 3) for v in slopes]
        c.require(1.7 <= med <= 2.3, f"gamma={gamma}: median pointwise slope {med:.3f} (points {np.round(slopes, 2)})")
    grid, lg1, mask, dec = _cross_setup(seed)
    t_lo = spc.min_trace_time(dec)
    ts = t_lo * np.geomspace(1.0, 10.0, 8)
    Z = [spc.heat_trace(dec, t) for t in ts]
    fit = spc.global_dimension(ts, Z)
    env = spc.trace_envelope(dec, ts[ts < 0.5])
    c.res.measured.update({"global_gamma1": fit.slope, "trace_envelope_C": env.value("C_upper")})
    c.require(1.7 <= fit.slope <= 2.3, f"gamma=1 global slope {fit.slope:.3f}")
    c.require(not env.flagged, "no finite trace envelope constant")
    return c.done()


POINTWISE_MASS = 1.0


def _pointwise_times(lg, x, mass_factor=POINTWISE_MASS):
    """A decade of Liouville times whose mass-matched probes are resolved by the grid."""
    m_min = ms.ball_mass(lg, x, 3 * lg.grid.dx)
    t0 = m_min / mass_factor
    return t0 * np.geomspace(1.0, 10.0, 6)


def check_doubling(profile: str = "standard", seed: int = 0) -> CheckResult:
    c = _Check("AC15", "doubling property", "violation fraction <= 5% at kappa=2.5; gamma=0 none",
               "volume doubling with log correction")
    n = 2048 if profile != "quick" else 256
    radii = 2.0 ** -np.arange(9, 3, -1) if n == 2048 else 2.0 ** -np.arange(6, 3, -1)
    g = fld.Grid((0.0, 0.0), 1.0, n)
    rng = Streams(seed).child("doubling").generator()
    lg0 = _lebesgue(g)
    pts0 = ms.sample_from_measure(lg0, rng, 100)
    rep0 = ms.doubling_check(lg0, pts0, radii, 2.5)
    c.res.measured["gamma0_violations"] = int(rep0.row("violation_fraction").extra["violations"])
    c.require(rep0.value("violation_fraction") == 0.0, "gamma=0 violations")
    if profile != "quick":
        lg1 = ms.build_measure(_large_field(seed, n), 1.0)
        pts = ms.sample_from_measure(lg1, rng, 200)
        rep = ms.doubling_check(lg1, pts, radii, 2.5)
        frac = rep.value("violation_fraction")
        c.res.measured.update({"gamma1_violation_fraction": frac,
                               "checked": rep.row("violation_fraction").n_samples,
                               "skipped": rep.row("violation_fraction").extra["skipped"]})
        c.require(frac <= 0.05, f"violation fraction {frac:.3f}")
    return c.done()


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "AC1": check_kernels,
    "AC2": check_field_covariance,
    "AC3": check_measure_normalization,
    "AC4": check_volume_exponent,
    "AC5": check_negative_moments,
    "AC6": check_gamma0_diffusion,
    "AC7": check_green_identity,
    "AC8": check_exit_moments,
    "AC9": check_spectral_closed_forms,
    "AC10": check_cross_estimator,
    "AC11": check_lower_bound,
    "AC12": check_faber_krahn,
    "AC13": check_nash,
    "AC14": check_spectral_dimension,
    "AC15": check_doubling,
}

# the quick profile runs only the gamma = 0 / closed-form parts
QUICK = ("AC1", "AC4", "AC5", "AC6", "AC7", "AC8", "AC9", "AC11", "AC12", "AC13", "AC15")


def run_profile(profile: str = "standard", seed: int = 0, only=None, log=print) -> list[CheckResult]:
    if profile not in ("quick", "standard", "extended"):
        raise ValueError(f"unknown profile {profile!r}")
    keys = QUICK if profile == "quick" else tuple(CHECKS)
    if only:
        keys = [k for k in keys if k in only]
    out = []
    for k in keys:
        res = CHECKS[k](profile="quick" if profile == "quick" else "standard", seed=seed)
        out.append(res)
        if log:
            log(res.line())
    if profile == "extended" and not only:
        for res in extended_checks(seed):
            out.append(res)
            if log:
                log(res.line())
    return out


def extended_checks(seed: int = 0) -> list[CheckResult]:
    """gamma = 1.5 variants of the volume, doubling and pointwise-dimension checks."""
    out = []
    c = _Check("EXT1", "gamma=1.5 volume exponent band", "slopes in [alpha_2 - 0.5, alpha_1 + 0.5] for >= 95%",
               "volume-decay exponents")
    stack = _stack(1.0, 1024, 1.5, Streams(seed).child("ext"), origin=(0.0, 0.0))
    lg = ms.build_measure(stack, 1.5)
    a1, a2 = ms.alpha_band(1.5)
    radii = 2.0 ** -np.arange(8, 2, -1)
    rng = Streams(seed).child("extc").generator()
    centers = rng.uniform(0.125, 0.875, size=(100, 2))
    s = np.array([ms.volume_exponent_fit(lg, x, radii).slope for x in centers])
    frac = float(np.mean((s >= a2 - 0.5) & (s <= a1 + 0.5)))
    c.res.measured = {"in_band": frac, "mean_slope": float(s.mean())}
    c.require(frac >= 0.95, f"{frac:.0%} in band")
    out.append(c.done())
    c = _Check("EXT2", "gamma=1.5 doubling", "violation fraction <= 5% at kappa=2.5", "volume doubling")
    pts = ms.sample_from_measure(lg, rng, 200)
    rep = ms.doubling_check(lg, pts, 2.0 ** -np.arange(8, 3, -1), 2.5)
    c.res.measured = {"violation_fraction": rep.value("violation_fraction")}
    c.require(rep.value("violation_fraction") <= 0.05, "too many violations")
    out.append(c.done())
    return out
