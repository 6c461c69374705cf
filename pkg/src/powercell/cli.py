"""Command-line entry point: ``powercell {simulate, fit, check, render, bench}``.

Exit codes: 0 success, 1 check failure, 2 configuration or input error,
3 solver failure. Errors are also written to stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import audit, config as cfgmod, report
from .diagram import DiagramError
from .inverse import (Annotation, AnnotationError, EquilibriumFailure, FitConfig, SingularHessian, annotation_problem,
                      fit, synthetic_recovery)
from .render import FIELDS, FrameSchemaError, frame_svg, render_dir
from .scene import Simulation, SimulationFailure, build_state, convergence_study, frame_record
from .solve import SolverFailure

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3


class InputError(Exception):
    pass


def _versions() -> dict:
    import scipy
    from importlib import metadata

    try:
        pkg = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        pkg = "unknown"
    return {"powercell": pkg, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "platform": platform.platform()}


def _error(kind: str, exc, code: int, **extra) -> int:
    payload = {"error": kind, "message": str(exc), "exit_code": code}
    payload.update(extra)
    sys.stderr.write(report.dumps(payload, indent=None) + "\n")
    return code


def _out_dir(path) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise InputError(f"output path {out} exists and is not a directory")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scenario(args) -> dict:
    if args.scenario is not None and args.preset is not None:
        raise cfgmod.ConfigError("give a scenario path or --preset, not both")
    if args.scenario is None and args.preset is None:
        raise cfgmod.ConfigError("a scenario path or --preset is required")
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"scenario.seed={args.seed}")
    return cfgmod.load(args.scenario, args.preset, overrides)


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    cfg = _scenario(args)
    out = _out_dir(args.output)
    if cfg["scenario"]["kind"] == "convergence":
        return _convergence(cfg, out)
    svg = args.svg or cfg["output"]["svg"]
    dump = args.dump_diagram or cfg["output"]["diagram_dump"]
    frames = out / "frames"
    frames.mkdir(exist_ok=True)
    manifest = {"schema_version": 1, "command": "simulate", "config": cfg, "seed": cfg["scenario"]["seed"],
                "versions": _versions()}
    sim = None
    code = EXIT_OK
    t0 = time.perf_counter()
    try:
        sim = Simulation(cfg)

        def on_frame(rec):
            name = f"{rec['frame']:04d}"
            report.write_json(frames / f"{name}.json", rec)
            if svg:
                (frames / f"{name}.svg").write_text(frame_svg(rec, args.color_by))
            if dump:
                sim.state.diagram_at()[0].dump(frames / f"{name}.diagram.json")

        log = sim.run(on_frame)
    except (SimulationFailure, SolverFailure, DiagramError) as exc:
        log = None
        frame = getattr(exc, "frame", None)
        manifest["failure"] = {"frame": frame, "message": str(exc)}
        code = _error(type(exc).__name__, exc, EXIT_SOLVER, frame=frame)
    rows = []
    if sim is not None:
        partial = log or getattr(sim, "last_log", None)
        if partial is not None:
            rows = partial.frames
            manifest["events"] = partial.events
    manifest["frames"] = rows
    manifest["cell_counts"] = [r["cells"] for r in rows]
    manifest["cell_count_nonincreasing"] = bool(np.all(np.diff(manifest["cell_counts"]) <= 0)) if rows else True
    if rows:
        its = [r["iterations"] for r in rows[1:]] or [0]
        manifest["summary"] = {
            "frames": len(rows) - 1,
            "average_iterations": float(np.mean(its)),
            "max_iterations": int(np.max(its)),
            "seconds_per_frame": float(np.mean([r["frame_seconds"] for r in rows[1:]])) if len(rows) > 1 else 0.0,
            "max_tiling_error": float(max(r["tiling_error"] for r in rows)),
        }
        report.write_csv(out / "stats.csv", rows)
        report.plot_run(rows, out / "stats.png")
    manifest["total_seconds"] = time.perf_counter() - t0
    report.write_json(out / "run.json", manifest)
    if code == EXIT_OK and not args.quiet:
        s = manifest.get("summary", {})
        print(f"{cfg['scenario']['name']}: {s.get('frames', 0)} frames, {manifest['cell_counts'][-1]} cells, "
              f"avg {s.get('average_iterations', 0):.2f} / max {s.get('max_iterations', 0)} Newton iterations, "
              f"{manifest['total_seconds']:.2f} s -> {out}")
    return code


def _convergence(cfg, out: Path) -> int:
    manifest = {"schema_version": 1, "command": "simulate", "config": cfg, "seed": cfg["scenario"]["seed"],
                "versions": _versions()}
    t0 = time.perf_counter()
    try:
        res = convergence_study(cfg)
    except (SimulationFailure, SolverFailure, DiagramError) as exc:
        manifest["failure"] = {"frame": getattr(exc, "frame", None), "message": str(exc)}
        manifest["total_seconds"] = time.perf_counter() - t0
        report.write_json(out / "run.json", manifest)
        return _error(type(exc).__name__, exc, EXIT_SOLVER)
    manifest.update(convergence={"time_steps": res.time_steps, "errors": res.errors, "slope": res.slope,
                                 "reference_step": res.reference_step, "topology_changes": res.topology_changes},
                    total_seconds=time.perf_counter() - t0)
    report.write_json(out / "run.json", manifest)
    report.write_csv(out / "convergence.csv", res.rows, ["time_step", "error"])
    report.plot_convergence(res.time_steps, res.errors, res.slope, out / "convergence.png", cfg["solver"]["scheme"])
    print(f"{cfg['scenario']['name']}: slope {res.slope:.3f} over {len(res.time_steps)} steps, "
          f"{res.topology_changes} topology change(s), {manifest['total_seconds']:.1f} s -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------- fit


def cmd_fit(args) -> int:
    cfg = _scenario(args)
    ann = None
    if args.annotation is not None:
        path = Path(args.annotation)
        if not path.is_file():
            raise InputError(f"annotation file not found: {path}")
        ann = Annotation.load(path)
    out = _out_dir(args.output)
    rng = np.random.default_rng(cfg["scenario"]["seed"])
    state, _ = build_state(cfg, rng)
    fc = FitConfig(max_iters=args.max_iters, mode=args.mode)
    t0 = time.perf_counter()
    try:
        if ann is None:
            rec = synthetic_recovery(state, rng, args.perturb, args.spread, fc, audit=not args.no_audit)
            result = rec.result
            payload = rec.to_json()
        else:
            if args.cells_as_sites and ann.cells:
                cfg = cfgmod.apply_overrides(cfg, [f"sites.count={len(ann.cells)}"])
                state, _ = build_state(cfg, rng)
            problem = annotation_problem(state, ann)
            result = fit(problem, problem.u, fc)
            payload = result.report()
    except (EquilibriumFailure, SingularHessian, SolverFailure, DiagramError) as exc:
        report.write_json(out / "fit.json", {"schema_version": 1, "failure": str(exc), "config": cfg})
        return _error(type(exc).__name__, exc, EXIT_SOLVER)
    payload["seconds"] = time.perf_counter() - t0
    payload["config"] = cfg
    payload["versions"] = _versions()
    report.write_json(out / "fit.json", payload)
    state.set_y(result.y)
    frame = frame_record(state, 0, 0.0)
    report.write_json(out / "fitted.json", frame)
    (out / "fitted.svg").write_text(frame_svg(frame, args.color_by))
    rows = [{"iteration": h["iteration"], "objective": h["objective"], "grad_norm": h["grad_norm"]}
            for h in result.history]
    report.write_csv(out / "fit_history.csv", rows)
    _plot_fit(rows, out / "fit_history.png")
    line = (f"fit: {result.iterations} iterations ({result.reason}), objective "
            f"{result.initial_value:.4g} -> {result.value:.4g}")
    if ann is None:
        line += (f", vertex error {payload['vertex_error']:.3g}, topology match {payload['topology_match']}, "
                 f"adjoint/direct {payload['adjoint_vs_direct']:.2g}, FD {payload['fd_through_resolve']:.2g}")
    print(line + f" -> {out}")
    return EXIT_OK


def _plot_fit(rows, path):
    fig, (ax,) = report._figure(1, 5.0, 3.6)
    ax.semilogy([r["iteration"] for r in rows], [max(r["objective"], 1e-300) for r in rows], ".-")
    ax.set_xlabel("L-BFGS iteration")
    ax.set_ylabel("objective")
    report._save(fig, path)


# ------------------------------------------------------------------- check


def cmd_check(args) -> int:
    modules = args.module or list(audit.AUDITS)
    for m in modules:
        if m not in audit.AUDITS:
            raise cfgmod.ConfigError(f"unknown audit module {m!r}; choose from {', '.join(audit.AUDITS)}")
    if args.term is not None and args.term not in audit.TERM_KINDS:
        raise cfgmod.ConfigError(f"unknown energy term {args.term!r}")
    if args.at_kink and args.term is None:
        raise cfgmod.ConfigError("--at-kink needs --term")
    out = _out_dir(args.output) if args.output else None
    seed = 0 if args.seed is None else args.seed
    reports = []
    for m in modules:
        kw = {}
        if m == "energy" and args.at_kink:
            rep = audit.continuity_audit(seed, terms=[args.term])
            rep.name = f"energy[{args.term}] at kink"
            reports.append(rep)
            continue
        if m == "energy" and args.term:
            kw["kinds"] = (args.term,)
        if args.cases is not None:
            key = {"energy": "n_configs", "tiling": "n_diagrams", "vertex": "n_diagrams", "measures": "n_cells",
                   "cvt": "n_states"}.get(m)
            if key:
                kw[key] = args.cases
        if m == "inverse":
            kw["seed"] = 11 if args.seed is None else args.seed
        else:
            kw["seed"] = seed
        reports.append(audit.AUDITS[m](**kw))
    failed = [r for r in reports if not r.passed]
    for r in reports:
        print(f"{r.name:<24} {'PASS' if r.passed else 'FAIL'}  cases={r.cases:<6} {r.seconds:7.2f}s  "
              + _metric_text(r.metrics))
    if out is not None:
        report.write_json(out / "check.json", {"schema_version": 1, "seed": seed,
                                               "reports": [r.to_json() for r in reports]})
    if failed:
        replay = {"schema_version": 1, "seed": seed, "failures": {r.name: r.failures for r in failed}}
        if out is not None:
            report.write_json(out / "check_failures.json", replay)
        sys.stderr.write(report.dumps(replay) + "\n")
        return EXIT_CHECK
    return EXIT_OK


def _metric_text(metrics: dict) -> str:
    parts = []
    for k, v in metrics.items():
        if isinstance(v, dict):
            inner = v.get("gradient_jump")
            parts.append(f"{k}: jump={inner:.3g} ({v.get('expect')})")
        elif isinstance(v, float):
            parts.append(f"{k}={v:.3g}")
        else:
            parts.append(f"{k}={v}")
    return ", ".join(parts)


# ------------------------------------------------------------------ render


def cmd_render(args) -> int:
    src = Path(args.frames)
    if not src.is_dir():
        raise InputError(f"frames directory not found: {src}")
    written = render_dir(src, args.output, args.color_by, args.size, args.area_coefficient)
    print(f"rendered {len(written)} frame(s)")
    return EXIT_OK


# ------------------------------------------------------------------- bench


def _bench_one(n, seed, repeats):
    from .bench import run_bench

    r = run_bench([n], seed, repeats)
    return r.seconds[0], r.build_seconds[0]


def cmd_bench(args) -> int:
    from .bench import GROWTH_LIMIT, BenchResult, run_bench

    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise cfgmod.ConfigError(f"bad --sizes {args.sizes!r}") from None
    if len(sizes) < 2 or any(n < 2 for n in sizes):
        raise cfgmod.ConfigError("--sizes needs at least two sizes of two or more sites")
    out = _out_dir(args.output)
    seed = 0 if args.seed is None else args.seed
    if args.jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(args.jobs) as ex:
            got = list(ex.map(_bench_one, sizes, [seed] * len(sizes), [args.repeats] * len(sizes)))
        res = BenchResult(sizes, [g[0] for g in got], [g[1] for g in got])
    else:
        res = run_bench(sizes, seed, args.repeats)
    allowed = GROWTH_LIMIT * (res.size_ratio / 10.0)
    ok = res.growth <= allowed
    report.write_csv(out / "bench.csv", res.rows())
    report.plot_bench(res.sizes, res.seconds, out / "bench.png")
    report.write_json(out / "bench.json", {"schema_version": 1, "rows": res.rows(), "growth": res.growth,
                                           "size_ratio": res.size_ratio, "limit": allowed, "passed": ok,
                                           "versions": _versions()})
    for r in res.rows():
        print(f"{r['sites']:>7d} sites  {r['seconds']:.4f} s  (diagram {r['diagram_seconds']:.4f} s)")
    print(f"growth {res.growth:.2f}x for {res.size_ratio:.0f}x sites (limit {allowed:.1f}x): {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CHECK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="powercell", description="Restricted power-diagram cell mechanics.")
    sub = p.add_subparsers(dest="command", required=True)

    def scenario_args(sp):
        sp.add_argument("scenario", nargs="?", help="scenario file (.ini or .json)")
        sp.add_argument("--preset", help=f"shipped preset: {', '.join(cfgmod.preset_names())}")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
        sp.add_argument("-o", "--output", default="out")
        sp.add_argument("--color-by", choices=FIELDS, default="id")

    s = sub.add_parser("simulate", help="run a scenario")
    scenario_args(s)
    s.add_argument("--svg", action="store_true", help="write an SVG next to every frame")
    s.add_argument("--dump-diagram", action="store_true", help="write vertex generator records per frame")
    s.add_argument("-q", "--quiet", action="store_true")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit area targets to vertex positions")
    scenario_args(f)
    f.add_argument("--annotation", help="annotation JSON; omitted runs the synthetic recovery")
    f.add_argument("--cells-as-sites", action="store_true", help="one site per annotated cell")
    f.add_argument("--perturb", type=float, default=0.2)
    f.add_argument("--spread", type=float, default=0.3)
    f.add_argument("--max-iters", type=int, default=200)
    f.add_argument("--mode", choices=("adjoint", "direct"), default="adjoint")
    f.add_argument("--no-audit", action="store_true", help="skip the sensitivity cross-checks")
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("check", help="run derivative and invariant audits")
    c.add_argument("--module", action="append", help=f"one of {', '.join(audit.AUDITS)}; repeatable")
    c.add_argument("--term", help="restrict the energy audit to one term kind")
    c.add_argument("--at-kink", action="store_true", help="test the term across a neighbor swap")
    c.add_argument("--cases", type=int, help="override the number of random instances")
    c.add_argument("--seed", type=int)
    c.add_argument("-o", "--output")
    c.set_defaults(func=cmd_check)

    r = sub.add_parser("render", help="render frame JSON files to SVG")
    r.add_argument("frames")
    r.add_argument("-o", "--output", help="directory for the SVG files (default: next to the frames)")
    r.add_argument("--color-by", choices=FIELDS, default="id")
    r.add_argument("--size", type=int, default=512)
    r.add_argument("--area-coefficient", type=float, default=1.0, help="area-term coefficient for --color-by pressure")
    r.set_defaults(func=cmd_render)

    b = sub.add_parser("bench", help="time diagram build plus Hessian assembly against site count")
    b.add_argument("--sizes", default="1000,2000,5000,10000")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--jobs", type=int, default=1, help="sizes timed in parallel processes")
    b.add_argument("--seed", type=int)
    b.add_argument("-o", "--output", default="bench_out")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse already printed usage
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except (cfgmod.ConfigError, InputError, AnnotationError, FrameSchemaError) as exc:
        extra = {"frame": exc.index} if isinstance(exc, FrameSchemaError) else {}
        return _error(type(exc).__name__, exc, EXIT_CONFIG, **extra)
    except (SimulationFailure, SolverFailure, EquilibriumFailure, SingularHessian, DiagramError) as exc:
        return _error(type(exc).__name__, exc, EXIT_SOLVER)


if __name__ == "__main__":
    sys.exit(main())
