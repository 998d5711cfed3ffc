"""Command-line entry point: fraccahn COMMAND [--config PATH] [--seed U64] [--workers N] [--out DIR] ..."""
from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io
from . import malliavin as ml
from . import noise
from . import verify as vf
from .config import ModelConfig, VerifySettings, config_hash, effective_config_text, parse_config
from .plotting import plot_report
from .solver import BlowUpError, PicardDivergenceError, solve_trajectory
from .spectral import collocation_grid

log = logging.getLogger("fraccahn")

COMMANDS = ("noise-sample", "solve", "picard", "malliavin", "verify-isometry", "verify-exponents",
            "verify-lower-bound", "verify-positivity", "density", "verify-all")

GROUPS = {
    "picard": ("picard",),
    "malliavin": ("malliavin",),
    "verify-isometry": ("covariance", "isometry"),
    "verify-exponents": ("exponents", "restricted"),
    "verify-lower-bound": ("lower-bound",),
    "verify-positivity": ("positivity",),
    "density": ("density",),
    "verify-all": vf.VERIFY_GROUPS,
}

# ensemble sizes that --samples overrides, per verification group
_SAMPLE_KEYS = {
    "covariance": ("samples_covariance",), "isometry": ("samples_isometry",),
    "exponents": ("samples_first_estimate",), "restricted": ("traj_restricted",),
    "localization": ("traj_localization",), "positivity": ("traj_positivity",), "density": ("samples_density",),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fraccahn", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", type=Path, help="[model]/[verify] key-value file")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", type=Path, default=Path("runs"))
    p.add_argument("--H", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--n-modes", type=int)
    p.add_argument("--n-time", type=int)
    p.add_argument("--samples", type=int, help="ensemble size for the command's Monte-Carlo parts")
    p.add_argument("--quiet", action="store_true")
    return p


def resolve(args) -> tuple[ModelConfig, VerifySettings]:
    model, st = parse_config(args.config) if args.config else (ModelConfig(), VerifySettings())
    kw = {}
    if args.H is not None:
        kw["H"] = args.H
    if args.sigma is not None:
        kw["sigma"] = args.sigma
    if args.n_modes is not None:
        kw["n_modes"] = args.n_modes
        kw["n_grid"] = max(model.n_grid, 2 * args.n_modes)
    if args.n_time is not None:
        kw["n_time"] = args.n_time
    if kw:
        model = model.with_(**kw)
    vkw = {}
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ValueError("--seed must be an unsigned 64-bit integer")
        vkw["seed"] = args.seed
    if args.samples is not None:
        if args.samples < 1:
            raise ValueError("--samples must be positive")
        for g in GROUPS.get(args.command, ()):
            for key in _SAMPLE_KEYS.get(g, ()):
                vkw[key] = args.samples
    if vkw:
        st = replace(st, **vkw)
    return model, st


def _write_report(run_dir: Path, rep) -> None:
    header, rows = rep.table()
    io.write_csv(run_dir / f"{rep.name}.csv", header, rows,
                 summary={"pass": rep.passed, "slope": rep.slope if rep.slope is not None else float("nan")})
    plot_report(rep, run_dir / f"{rep.name}.svg")


def _status_line(rep) -> str:
    tag = ("PASS" if rep.passed else "FAIL") if rep.asserted else "INFO"
    failed = [k for k, v in rep.checks.items() if not v]
    tail = f" failed: {', '.join(failed)}" if failed else ""
    slope = f" slope={rep.slope:.4f}" if rep.slope is not None else ""
    return f"{tag} {rep.name}{slope}{tail}"


def cmd_noise_sample(model, st, run_dir, args) -> dict:
    n = args.samples or 1
    for i in range(n):
        b = noise.sample_bundle(model, st.seed, i)
        noise.dump_bundle(b, run_dir / f"bundle_{i:05d}.fcnb")
        if i == 0:
            rows = np.column_stack([b.time_grid, b.fbm_paths.T])
            io.write_csv(run_dir / "fbm_paths_00000.csv", ["t"] + [f"beta_{k}" for k in range(b.n_modes)], rows)
    return {"bundles": n, "pass": True}


def cmd_solve(model, st, run_dir, args) -> dict:
    bundle = noise.sample_bundle(model, st.seed, 0)
    try:
        rec = solve_trajectory(model, bundle)
    except (BlowUpError, PicardDivergenceError) as e:
        log.error("%s", e)
        return {"pass": False, "error": str(e)}
    x = collocation_grid(model.n_grid)
    ug = rec.grid_values(model.n_grid)
    io.write_csv(run_dir / "trajectory.csv", ["t"] + [f"u_x{j}" for j in range(x.size)],
                 np.column_stack([rec.times, ug]))
    io.write_csv(run_dir / "coefficients.csv", ["t"] + [f"c_{k}" for k in range(model.n_modes)],
                 np.column_stack([rec.times, rec.coeffs]))
    io.write_csv(run_dir / "grid.csv", ["j", "x"], np.column_stack([np.arange(x.size), x]))
    return {"pass": True, "sup_norm": rec.sup_norm, "omega_n": rec.omega_n_flag, "noise": rec.noise_ref,
            "provenance": rec.provenance}


def cmd_malliavin(model, st, run_dir, args) -> dict:
    cfg = vf.malliavin_config(model, st)
    bundle = noise.sample_bundle(cfg, vf.stream_seed(st.seed, "malliavin"), 0)
    rec = solve_trajectory(cfg, bundle)
    grid = ml.malliavin_norm_at(rec, st.x_star, st.t_star, cfg, eps_grid=tuple(e * st.t_star for e in st.eps_grid))
    grid.to_csv(run_dir / "malliavin_grid.csv")
    return {"squared_norm": grid.squared_norm, "restricted": {repr(k): v for k, v in grid.restricted.items()},
            "target": list(grid.target), "pass": True}


def run(args) -> int:
    model, st = resolve(args)
    chash = config_hash(model, st)
    run_dir = args.out / f"{chash}-{st.seed}" / args.command
    run_dir.mkdir(parents=True, exist_ok=True)
    eff = effective_config_text(model, st)
    (run_dir / "effective_config.ini").write_text(eff)
    started = io.now_iso()
    t0 = time.perf_counter()
    summary = {"command": args.command, "config_hash": chash, "seed": st.seed}
    ok = True
    if args.command == "noise-sample":
        summary.update(cmd_noise_sample(model, st, run_dir, args))
    elif args.command == "solve":
        summary.update(cmd_solve(model, st, run_dir, args))
    elif args.command == "malliavin":
        summary.update(cmd_malliavin(model, st, run_dir, args))
    groups = GROUPS.get(args.command, ())
    reports = []
    timings = {}
    for g in groups:
        tg = time.perf_counter()
        reps = vf.run_group(g, model, st, args.workers)
        timings[g] = time.perf_counter() - tg
        for rep in reps:
            _write_report(run_dir, rep)
            if not args.quiet:
                print(_status_line(rep), flush=True)
        reports.extend(reps)
    if reports:
        summary["reports"] = [r.summary() for r in reports]
        ok = all(r.passed for r in reports if r.asserted)
    ok = ok and bool(summary.get("pass", True))
    summary["pass"] = ok
    io.write_json(run_dir / "summary.json", summary)
    io.write_manifest(run_dir, config_hash=chash, seed=st.seed, command=args.command, version=__version__,
                      started=started, effective_config=eff, workers=args.workers,
                      extra={"elapsed_seconds": time.perf_counter() - t0, "group_seconds": timings})
    if not args.quiet:
        print(f"{'OK' if ok else 'FAILED'}: outputs in {run_dir}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
