"""Command-line entry point: ``lqg-lab <command> [options]``.

Exit codes: 0 success, 1 a verification check or numerical routine failed,
2 bad configuration or usage, 3 a required input artifact is missing or
unreadable.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import field as fld
from . import heatkernel as hk
from . import measure as ms
from . import snapshot as snap
from . import spectral as spc
from . import verify
from . import walker as wk
from .config import ConfigError, RunConfig, load_config
from .report import EstimateReport, FitError
from .rng import Streams

log = logging.getLogger("lqg_lab")

OK, FAILED, USAGE, MISSING = 0, 1, 2, 3


class MissingInput(RuntimeError):
    pass


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--mass", type=float)
    p.add_argument("--grid-n", type=int, dest="grid_n")
    p.add_argument("--box", type=float)
    p.add_argument("--walkers", type=int)
    p.add_argument("--dt", help="'auto' or a positive step")
    p.add_argument("--t-grid", dest="t_grid", help="comma-separated Liouville times")
    p.add_argument("--radii", help="comma-separated radii")
    p.add_argument("-v", "--verbose", action="store_true")


def _snapshot_arg(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--snapshot", help=f"input snapshot (default: <out>/{default})")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lqg-lab", description="Liouville Brownian motion simulation lab")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("sample-field", help="sample the truncated log-correlated field")
    _common(p)
    p = sub.add_parser("build-measure", help="exponentiate a field snapshot into Liouville cell masses")
    _common(p)
    _snapshot_arg(p, "field.lqgf")
    p = sub.add_parser("simulate-lbm", help="one Brownian path and its Liouville clock")
    _common(p)
    _snapshot_arg(p, "measure.lqgf")
    p = sub.add_parser("exit-stats", help="exit times from discs around x")
    _common(p)
    _snapshot_arg(p, "measure.lqgf")
    p.add_argument("--q", type=float)
    p = sub.add_parser("heatkernel", help="on-diagonal heat kernel and pointwise dimension at x")
    _common(p)
    _snapshot_arg(p, "measure.lqgf")
    p = sub.add_parser("spectral", help="Dirichlet eigenpairs, heat trace and Faber-Krahn ratio")
    _common(p)
    _snapshot_arg(p, "measure.lqgf")
    p.add_argument("--mask", help="'disc:cx,cy,R' or 'rect:x0,x1,y0,y1'")
    p.add_argument("--eigen-k", type=int, dest="eigen_k")
    p = sub.add_parser("verify", help="run the acceptance checks")
    _common(p)
    p.add_argument("--profile", choices=("quick", "standard", "extended"), default="quick")
    p.add_argument("--only", nargs="*", help="subset of checks, e.g. AC1 AC9")
    return ap


def _floats(text):
    return tuple(float(v) for v in str(text).replace(",", " ").split())


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    kw = {k: getattr(args, k, None) for k in ("seed", "out", "threads", "gamma", "mass", "grid_n", "box",
                                              "walkers", "dt", "q", "mask", "eigen_k")}
    if getattr(args, "t_grid", None):
        kw["t_grid"] = _floats(args.t_grid)
    if getattr(args, "radii", None):
        kw["radii"] = _floats(args.radii)
    try:
        return cfg.override(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _params(cfg: RunConfig, grid: fld.Grid) -> fld.KernelParams:
    N = fld.truncation_level(grid, cfg.cutoff_base) if cfg.bands == "auto" else int(cfg.bands)
    return fld.KernelParams.dyadic(cfg.mass, cfg.gamma, N, cfg.cutoff_base)


def _grid(cfg: RunConfig) -> fld.Grid:
    return fld.Grid.centered(cfg.box, cfg.grid_n, cfg.center)


def _dt(cfg: RunConfig):
    return None if cfg.dt == "auto" else float(cfg.dt)


def _load(path: Path, need: int) -> snap.Snapshot:
    if not path.exists():
        raise MissingInput(f"snapshot {path} not found")
    try:
        s = snap.load(path)
    except (snap.SnapshotFormatError, snap.SnapshotCorruptError) as exc:
        raise MissingInput(f"cannot read {path}: {exc}") from None
    if s.flags & need != need:
        what = "measure" if need & snap.MEASURE else "field"
        hint = "build-measure" if need & snap.MEASURE else "sample-field"
        raise MissingInput(f"{path} has no {what} plane; run `lqg-lab {hint}` first")
    return s


def _provenance(cfg: RunConfig, command: str, snapshot_hash: str | None = None) -> dict:
    return {"command": command, "config_hash": cfg.hash(), "seed": cfg.seed,
            "snapshot_hash": snapshot_hash or ""}


def _write(rep: EstimateReport, out: Path, stem: str) -> None:
    rep.to_csv(out / f"{stem}.csv")
    rep.to_json(out / f"{stem}.json")
    log.info("wrote %s.csv and %s.json", stem, stem)


def cmd_sample_field(cfg: RunConfig, args, out: Path) -> int:
    grid = _grid(cfg)
    params = _params(cfg, grid)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", fld.EmbeddingWarning)
        stack = fld.build_stack(params, grid, Streams(cfg.seed).child("field"), retain_bands=cfg.retain_bands,
                                threads=cfg.threads)
    s = snap.Snapshot.from_stack(stack, bands=cfg.retain_bands)
    path = s.save(out / "field.lqgf")
    rep = EstimateReport("sample_field", provenance=_provenance(cfg, "sample-field", s.content_hash()))
    v = np.asarray(stack.values)
    rep.add("band_count", params.band_count)
    rep.add("target_variance", stack.variance)
    rep.add("empirical_mean", float(v.mean()), float(v.std() / math.sqrt(v.size)), v.size)
    rep.add("empirical_variance", float(v.var()), n_samples=v.size)
    for n, d in enumerate(stack.defects, start=1):
        if d:
            rep.add(f"embedding_defect_band{n}", d)
    rep.flags.extend(str(w.message) for w in caught)
    _write(rep, out, "field_report")
    print(f"field snapshot: {path} (N={params.band_count}, hash {s.content_hash()[:12]})")
    return OK


def cmd_build_measure(cfg: RunConfig, args, out: Path) -> int:
    src = Path(args.snapshot) if args.snapshot else out / "field.lqgf"
    s = _load(src, snap.FIELD)
    lg = ms.build_measure(s.stack(), cfg.gamma)
    s2 = s.with_measure(lg)
    dest = out / "measure.lqgf"
    if dest.resolve() == src.resolve():
        raise ConfigError("refusing to overwrite the input snapshot")
    s2.save(dest)
    rep = EstimateReport("build_measure", provenance=_provenance(cfg, "build-measure", s.content_hash()))
    rep.add("gamma", cfg.gamma)
    rep.add("total_mass", lg.total)
    rep.add("lebesgue_area", lg.grid.side_length**2)
    x = np.asarray(cfg.x)
    radii = [r for r in cfg.radii if r >= 2 * lg.grid.dx and lg.grid.contains(x, margin=r)]
    for r in radii:
        rep.add(f"ball_mass r={r:g}", ms.ball_mass(lg, x, r), r=r)
    if len(radii) >= 4:
        fit = ms.volume_exponent_fit(lg, x, radii)
        rep.add("volume_exponent", fit.slope, fit.slope_se, len(radii), r2=fit.r2)
    _write(rep, out, "measure_report")
    print(f"measure snapshot: {dest} (M(box) = {lg.total:.6g})")
    return OK


def cmd_simulate_lbm(cfg: RunConfig, args, out: Path) -> int:
    src = Path(args.snapshot) if args.snapshot else out / "measure.lqgf"
    s = _load(src, snap.MEASURE)
    lg = s.liouville()
    dt = _dt(cfg) or 1e-4
    t_max = max(cfg.t_grid)
    path = wk.simulate_bm(cfg.x, dt, t_max, Streams(cfg.seed).child("path").generator())
    inside = lg.grid.contains(path.positions)
    if not np.all(inside):
        stop = int(np.argmin(inside))
        path = path.segment(0, max(stop - 1, 1))
        log.warning("path left the grid at step %d; truncated", stop)
    clock = wk.clock_along(path, lg)
    rep = EstimateReport("simulate_lbm", provenance=_provenance(cfg, "simulate-lbm", s.content_hash()))
    rep.add("euclidean_time", float(path.times[-1]))
    rep.add("liouville_time", clock.final)
    for t in cfg.t_grid:
        if t <= clock.final:
            p = wk.lbm_at(path, clock, t)
            rep.add(f"Z_x s={t:g}", float(p[0]), s=t)
            rep.add(f"Z_y s={t:g}", float(p[1]), s=t)
    np.savetxt(out / "lbm_path.csv", np.column_stack([path.times, path.positions, clock.values]),
               delimiter=",", header="t,x,y,F", comments="")
    _write(rep, out, "lbm_report")
    print(f"path of {path.steps} steps; Liouville clock reached {clock.final:.6g}")
    return OK


def cmd_exit_stats(cfg: RunConfig, args, out: Path) -> int:
    src = Path(args.snapshot) if args.snapshot else out / "measure.lqgf"
    s = _load(src, snap.MEASURE)
    lg = s.liouville()
    x = np.asarray(cfg.x)
    st = Streams(cfg.seed).child("exit-stats")
    batches = {}
    rep = EstimateReport("exit_stats", provenance=_provenance(cfg, "exit-stats", s.content_hash()))
    for k, r in enumerate(cfg.radii):
        b = wk.exit_disc(lg, x, x, r, cfg.walkers, st.child("r", k), dt=_dt(cfg), threads=cfg.threads)
        batches[r] = b
        ok = ~b.censored
        m = float(b.tau[ok].mean())
        se = float(b.tau[ok].std(ddof=1) / math.sqrt(ok.sum()))
        rep.add(f"E[tau] r={r:g}", m, se, int(ok.sum()), r=r, censored=int(b.censored.sum()))
        if b.flagged:
            rep.flags.append(f"r={r:g}: censored fraction {b.censored_fraction:.2e}")
        b.to_csv(out / f"exits_r{r:g}.csv")
    if len(batches) >= 2:
        nm = wk.exit_negative_moment(batches, cfg.q)
        for row in nm.rows:
            rep.rows.append(row)
        rep.fits.update(nm.fits)
    _write(rep, out, "exit_report")
    print("\n".join(f"{r.quantity}: {r.value:.6g} +/- {r.stderr:.2g}" for r in rep.rows))
    return OK


def cmd_heatkernel(cfg: RunConfig, args, out: Path) -> int:
    src = Path(args.snapshot) if args.snapshot else out / "measure.lqgf"
    s = _load(src, snap.MEASURE)
    lg = s.liouville()
    x = np.asarray(cfg.x)
    st = Streams(cfg.seed).child("heatkernel")
    rep = EstimateReport("heatkernel", provenance=_provenance(cfg, "heatkernel", s.content_hash()))
    try:
        fit = hk.pointwise_dimension(x, cfg.t_grid, lg, cfg.walkers, st, dt=_dt(cfg), threads=cfg.threads)
        ests = fit.estimates
        rep.add("pointwise_dimension", fit.slope, n_samples=fit.n_points, r2=fit.r2, dropped=fit.dropped)
    except FitError as exc:
        rep.flags.append(f"no dimension fit: {exc}")
        rhos = [hk.mass_matched_radius(lg, x, 0.3 * t) or 2 * lg.grid.dx for t in cfg.t_grid]
        ests, _ = hk.return_estimates(x, cfg.t_grid, rhos, cfg.walkers, lg, st, dt=_dt(cfg),
                                      threads=cfg.threads)
    for e in ests:
        rep.add(f"p_t t={e.t:g}", e.p_hat, e.se, e.walkers, t=e.t, rho=e.rho, hits=e.hits)
    env = hk.envelope_check([e for e in ests if e.t < 1 and e.p_hat > 0]) if any(
        e.t < 1 and e.p_hat > 0 for e in ests) else None
    if env is not None:
        rep.rows.extend(env.rows)
        rep.flags.extend(env.flags)
    _write(rep, out, "heatkernel_report")
    print("\n".join(f"{r.quantity}: {r.value:.6g}" for r in rep.rows))
    return OK


def _mask(cfg: RunConfig, lg) -> spc.DomainMask:
    kind, vals = cfg.mask.split(":", 1)
    v = _floats(vals)
    if kind == "disc":
        return spc.DomainMask.disc(lg.grid, v[:2], v[2], lg)
    return spc.DomainMask.rectangle(lg.grid, *v, lg)


def cmd_spectral(cfg: RunConfig, args, out: Path) -> int:
    src = Path(args.snapshot) if args.snapshot else out / "measure.lqgf"
    s = _load(src, snap.MEASURE)
    lg = s.liouville()
    mask = _mask(cfg, lg)
    dec = spc.eigensolve(spc.assemble(lg, mask), cfg.eigen_k)
    rep = EstimateReport("spectral", provenance=_provenance(cfg, "spectral", s.content_hash()))
    for k, lam in enumerate(dec.eigenvalues, start=1):
        rep.add(f"lambda_{k}", float(lam), n_samples=1, residual=float(dec.residuals[k - 1]))
    rep.add("faber_krahn_ratio", spc.faber_krahn_ratio(dec, mask))
    t_lo = spc.min_trace_time(dec)
    ts = [t for t in cfg.t_grid if t >= t_lo]
    for t in ts:
        rep.add(f"Z t={t:g}", spc.heat_trace(dec, t), t=t)
    if len(ts) >= 5:
        fit = spc.global_dimension(ts, [spc.heat_trace(dec, t) for t in ts])
        rep.add("global_dimension", fit.slope, n_samples=fit.n_points, r2=fit.r2)
    else:
        rep.flags.append(f"fewer than 5 times above the truncation limit t = {t_lo:.3g}")
    np.save(out / "eigenvalues.npy", dec.eigenvalues)
    _write(rep, out, "spectral_report")
    print(f"K={dec.K}: lambda_1 = {dec.eigenvalues[0]:.6g}, lambda_K = {dec.eigenvalues[-1]:.6g}")
    return OK


def cmd_verify(cfg: RunConfig, args, out: Path) -> int:
    results = verify.run_profile(args.profile, seed=cfg.seed, only=args.only)
    rows = [{"key": r.key, "title": r.title, "passed": r.passed, "tolerance": r.tolerance,
             "reference": r.reference, "seconds": round(r.seconds, 2), "measured": r.measured,
             "failures": r.failures} for r in results]
    (out / "verify.json").write_text(json.dumps({"profile": args.profile, "seed": cfg.seed,
                                                 "config_hash": cfg.hash(), "checks": rows},
                                                indent=2, default=str))
    with open(out / "verify.csv", "w") as f:
        f.write("key,passed,seconds,tolerance\n")
        for r in results:
            f.write(f"{r.key},{int(r.passed)},{r.seconds:.2f},\"{r.tolerance}\"\n")
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return OK if n_fail == 0 else FAILED


COMMANDS = {
    "sample-field": cmd_sample_field,
    "build-measure": cmd_build_measure,
    "simulate-lbm": cmd_simulate_lbm,
    "exit-stats": cmd_exit_stats,
    "heatkernel": cmd_heatkernel,
    "spectral": cmd_spectral,
    "verify": cmd_verify,
}


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return USAGE
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.command}.config").write_text(cfg.serialize())
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](cfg, args, out)
    except MissingInput as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return MISSING
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return USAGE
    except (ValueError, RuntimeError, ArithmeticError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return FAILED
    log.info("%s finished in %.1fs", args.command, time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
