"""Command-line entry point: ``qmap-adiabatic {models,check,sweep,identities}``.

Exit status: 0 when everything passes, 1 on a failed verdict or diagnostic,
2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import ast
import sys
from pathlib import Path

import numpy as np

from . import __version__, defaults
from .adiabatic import (
    PipelineConfig,
    abel_sum,
    build_trace,
    intertwining_defect,
    kato_propagator,
    series_from_trace,
    write_trace_csv,
)
from .bench import (
    default_config_path,
    load_config,
    run_sweep,
    summary_table,
    with_overrides,
    write_report,
)
from .errors import AdiabaticError, ConfigError
from .matcore import dagger, op_norms
from .models import MODELS, PathSchedule, build_model
from .spectral import find_crossing, gap_scan, track_branches, write_frames_csv

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _parse_value(text: str):
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _params(pairs: list[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--param expects key=value, got {item!r}")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _family(args):
    params = _params(args.param)
    if args.seed is not None and args.model in MODELS and "seed" in MODELS[args.model].params:
        params["seed"] = args.seed
    try:
        return build_model(args.model, **params)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _path(args, family) -> tuple[float, float]:
    if args.s_start is not None or args.s_end is not None:
        if args.s_start is None or args.s_end is None:
            raise ConfigError("give both --s-start and --s-end")
        return args.s_start, args.s_end
    if family.domain is not None:
        return family.domain
    return family.default_path


# ---------------------------------------------------------------------------
# subcommands


def cmd_models(args) -> int:
    for name, entry in MODELS.items():
        print(f"{name}: {entry.doc}")
        for p, (default, doc) in entry.params.items():
            print(f"    {p} = {default!r}  ({doc})")
    print("sampled: family interpolated from a sample file")
    print("    path  (file of s values and matrices, see docs/formats.md)")
    return EXIT_OK


def cmd_check(args) -> int:
    family = _family(args)
    s0, s1 = _path(args, family)
    sched = PathSchedule(s0, s1, args.n, args.warp)
    print(f"model {args.model} dim={family.dim} path=[{s0:g}, {s1:g}] N={args.n}")
    try:
        frames = track_branches(family, sched, args.cluster_tol)
    except AdiabaticError as exc:
        print(f"{exc.label}: {exc}")
        return EXIT_FAIL
    if args.dump_frames:
        write_frames_csv(frames, args.dump_frames)
    report = gap_scan(frames, args.gap_min)
    print(f"node scan: {report}")
    crossing = find_crossing(frames)
    gap_ok = report.passed and crossing is None
    if not report.passed:
        print(f"GapViolation: min |z_jk - 1| = {report.min_gap:.3e} below {args.gap_min:g}")
    if crossing is not None:
        print(f"GapViolation: branches {crossing[1]} and {crossing[2]} cross between nodes "
              f"near s = {crossing[0]:.6g}")
    print(f"gap check {'PASS' if gap_ok else 'FAIL'}")

    maps = family.evaluate_many(sched.nodes)
    eye = np.eye(family.dim)
    unit = float(np.max(op_norms(dagger(maps) @ maps - eye)))
    slope = float(np.max(op_norms(np.diff(maps, axis=0)) / sched.steps))
    theta = np.array([f.angles for f in frames])
    jump = float(np.max(np.abs(np.diff(theta, axis=0)))) if len(frames) > 1 else 0.0
    margin = min((float(np.min(f.margins)) for f in frames[1:]
                  if f.margins is not None and f.margins.size), default=float("nan"))
    unit_ok = unit <= defaults.TOL_UNITARY_PER_DIM * family.dim
    print(f"unitarity defect max {unit:.3e} ({'ok' if unit_ok else 'FAIL'})")
    print(f"max ||U(s_n) - U(s_n-1)|| / ds = {slope:.4g} (smoothness hint {family.smoothness_hint:.4g})")
    print(f"max eigenangle jump between nodes {jump:.4g} rad")
    print(f"min tracking margin {margin:.4g}")
    return EXIT_OK if gap_ok and unit_ok else EXIT_FAIL


def cmd_sweep(args) -> int:
    path = Path(args.config) if args.config else default_config_path()
    config = load_config(path)
    config = with_overrides(config, out=args.out, format=args.format, workers=args.workers,
                            seed=args.seed)
    report = run_sweep(config)
    out = config.out or f"sweep_report.{config.format}"
    written = write_report(report, out, config.format)
    print(summary_table(report))
    print(f"report written to {written}")
    return EXIT_OK if report.passed else EXIT_FAIL


def _abel_residuals(rng: np.random.Generator) -> float:
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 65))
        f = rng.normal(size=n + 1) + 1j * rng.normal(size=n + 1)
        g = rng.normal(size=n) + 1j * rng.normal(size=n)
        lhs, rhs = abel_sum(f, g)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    for _ in range(20):
        n = int(rng.integers(1, 65))
        f = rng.normal(size=(n + 1, 4, 4)) + 1j * rng.normal(size=(n + 1, 4, 4))
        g = rng.normal(size=(n, 4, 4)) + 1j * rng.normal(size=(n, 4, 4))
        lhs, rhs = abel_sum(f, g)
        scale = max(np.linalg.norm(lhs, 2), np.linalg.norm(rhs, 2), 1e-300)
        worst = max(worst, np.linalg.norm(lhs - rhs, 2) / scale)
    return float(worst)


def cmd_identities(args) -> int:
    family = _family(args)
    s0, s1 = _path(args, family)
    sched = PathSchedule(s0, s1, args.n, args.warp)
    cfg = PipelineConfig(gap_min=args.gap_min, cluster_tol=args.cluster_tol,
                         substeps=args.substeps)
    try:
        trace = build_trace(family, sched, cfg)
        series = series_from_trace(trace, cfg)
        raw = kato_propagator(family, sched, cfg.substeps, cfg.fd_step * abs(sched.length),
                              cfg.cluster_tol, frames=trace.frames)
    except AdiabaticError as exc:
        print(f"{exc.label}: {exc}")
        return EXIT_FAIL
    if args.trace_dump:
        write_trace_csv(trace, args.trace_dump, cfg)
    d = series.diagnostics
    N = sched.N
    seed = 0 if args.seed is None else args.seed
    checks = [
        ("abel_summation", _abel_residuals(np.random.default_rng(seed)), 1e-12),
        ("factorization", d["factorization_residual"], defaults.IDENTITY_TOL),
        ("parts_transform", d["parts_residual"], defaults.IDENTITY_TOL),
        ("W_recursion", d["recursion_residual"], 1e-10 * N),
        ("unitarity_U_N", d["unitarity_UN"], 1e-10 * N),
        ("intertwining_raw", intertwining_defect(trace.frames, raw), 1e-6),
        ("intertwining_projected", d["intertwining_defect"], defaults.IDENTITY_TOL),
        ("projector_block_form", d["eq3_norm_residual"], defaults.IDENTITY_TOL),
    ]
    ok = True
    print(f"model {args.model} N={N}")
    for name, value, tol in checks:
        good = value <= tol
        ok &= good
        print(f"{name:<24} {value:.3e}  (tol {tol:.1e})  {'PASS' if good else 'FAIL'}")
    return EXIT_OK if ok else EXIT_FAIL


# ---------------------------------------------------------------------------


def _model_args(p: argparse.ArgumentParser, default_n: int) -> None:
    p.add_argument("model", help="model id (see the models subcommand) or 'sampled'")
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="model parameter; repeatable, values parsed as Python literals")
    p.add_argument("--n", type=int, default=default_n, help=f"number of steps (default {default_n})")
    p.add_argument("--s-start", type=float)
    p.add_argument("--s-end", type=float)
    p.add_argument("--warp", default="identity")
    p.add_argument("--gap-min", type=float, default=defaults.GAP_MIN)
    p.add_argument("--cluster-tol", type=float, default=defaults.CLUSTER_TOL)
    p.add_argument("--seed", type=int, help="overrides the model's seed parameter")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qmap-adiabatic",
                                     description="Adiabatic-theorem toolkit for quantum maps.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("models", help="list the model zoo")
    p.set_defaults(func=cmd_models)

    p = sub.add_parser("check", help="gap and smoothness diagnostics for one model")
    _model_args(p, default_n=101)
    p.add_argument("--dump-frames", metavar="PATH", help="write the tracked frames as CSV")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", help="run an N-sweep and write a convergence report")
    p.add_argument("config", nargs="?", help="TOML config (default: the shipped default sweep)")
    p.add_argument("--out", help="report path")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--workers", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("identities", help="residuals of the exact identities at one N")
    _model_args(p, default_n=128)
    p.add_argument("--substeps", type=int, default=defaults.SUBSTEPS)
    p.add_argument("--trace-dump", metavar="PATH", help="write per-node deviations as CSV")
    p.set_defaults(func=cmd_identities)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AdiabaticError as exc:
        print(f"{exc.label}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
