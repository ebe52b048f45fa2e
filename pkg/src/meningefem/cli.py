"""Command-line front end: ``meningefem <mesh|simulate|synth|calibrate>``.

Exit codes: 0 success, 1 usage or validation error, 2 solver failure,
3 calibration finished without converging.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from importlib import resources
from pathlib import Path
from typing import Any, Sequence
from xml.sax.saxutils import escape

import numpy as np

from . import __version__
from .calibrate import (CalibrationInfeasibleError, calibrate_interface, calibrate_tissue, resample,
                        synthesize_target)
from .cohesive import CohesiveLaw, CohesiveLawError
from .material import Material, MaterialError
from .mesh import Layer, MeshError, generate_sample_mesh, load_mesh, mesh_quality_report, save_mesh
from .solver import (ConfigError, ForceDisplacementCurve, SimulationConfig, SolverError, energy_report, run,
                     stable_dt)

log = logging.getLogger("meningefem")

EXIT_OK, EXIT_USAGE, EXIT_SOLVER, EXIT_NOT_CONVERGED = 0, 1, 2, 3
PRESETS = ("B1", "B2", "B3", "S1", "S2", "S3")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -------------------------------------------------------------------------- helpers


def load_preset(name: str) -> dict:
    """Bundled parameter record for tissue samples B1-B3 or interface samples S1-S3."""
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("meningefem").joinpath("presets", f"{name}.json").read_text(encoding="utf-8")
    return json.loads(text)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _read_json(path: str | None, what: str) -> dict:
    if path is None:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    try:
        return json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{what} {path} is not valid JSON: {exc}") from exc


class Outputs:
    """Output directory guard: refuses to overwrite existing artifacts without ``--force``."""

    def __init__(self, out: str | None, force: bool):
        if out is None:
            raise UsageError("--out is required")
        self.dir = Path(out)
        self.force = force
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        p = self.dir / name
        if p.exists() and not self.force:
            raise UsageError(f"{p} exists; pass --force to overwrite")
        return p

    def write(self, name: str, text: str) -> Path:
        p = self.path(name)
        self.dir.mkdir(parents=True, exist_ok=True)
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.written.append(str(p))
        return p


def write_manifest(outputs: Outputs, command: str, config: Any, inputs: dict[str, str | None],
                   seed: int | None, started: float, extra: dict | None = None) -> Path:
    digests = {k: _sha256(Path(v)) for k, v in inputs.items() if v is not None}
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "inputs": {k: v for k, v in inputs.items() if v is not None},
        "input_sha256": digests,
        "seed": seed,
        "artifacts": list(outputs.written) + [str(outputs.dir / "manifest.json")],
        "duration_s": round(time.perf_counter() - started, 3),
    }
    if extra:
        manifest.update(extra)
    return outputs.write("manifest.json", json.dumps(manifest, indent=2, default=float) + "\n")


def svg_line_chart(series: Sequence[tuple[str, np.ndarray, np.ndarray]], x_label: str = "displacement (mm)",
                   y_label: str = "force (N)", title: str = "", width: int = 640, height: int = 420) -> str:
    """Self-contained SVG line chart; one polyline per ``(label, x, y)`` series."""
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
    left, right, top, bottom = 70, 20, 30, 55
    xs = np.concatenate([np.asarray(s[1], float) for s in series]) if series else np.zeros(1)
    ys = np.concatenate([np.asarray(s[2], float) for s in series]) if series else np.zeros(1)
    x0, x1 = float(np.min(xs, initial=0.0)), float(np.max(xs, initial=1.0))
    y0, y1 = float(np.min(ys, initial=0.0)), float(np.max(ys, initial=0.0))
    if x1 <= x0:
        x1 = x0 + 1.0
    if y1 <= y0:
        y1 = y0 + 1.0
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for k in range(6):
        xv = x0 + k * (x1 - x0) / 5
        yv = y0 + k * (y1 - y0) / 5
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:.3g}</text>')
        out.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 12}" text-anchor="middle">{escape(x_label)}</text>')
    out.append(f'<text x="16" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {top + ph / 2})">{escape(y_label)}</text>')
    if title:
        out.append(f'<text x="{left + pw / 2}" y="18" text-anchor="middle">{escape(title)}</text>')
    for i, (label, x, y) in enumerate(series):
        color = colors[i % len(colors)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(np.asarray(x, float), np.asarray(y, float)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                   f'<title>{escape(label)}</title></polyline>')
        out.append(f'<text x="{left + pw - 8}" y="{top + 16 + 16 * i}" text-anchor="end" fill="{color}">'
                   f'{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _curve_svg(series: Sequence[tuple[str, ForceDisplacementCurve]], title: str = "") -> str:
    return svg_line_chart([(label, c.displacement * 1e3, c.force) for label, c in series], title=title)


def energy_csv(history: dict) -> str:
    rep = energy_report(history)
    cols = ["time", "kinetic", "internal_elastic", "cohesive_dissipated", "hourglass_work", "damping_work",
            "external_work"]
    lines = ["time_s,kinetic_J,internal_elastic_J,cohesive_dissipated_J,hourglass_work_J,damping_work_J,"
             "external_work_J,ke_ratio,imbalance"]
    for i, row in enumerate(rep["rows"]):
        vals = [history[c][i] for c in cols] + [row["ke_ratio"], row["imbalance"]]
        lines.append(",".join(f"{v:.9e}" for v in vals))
    return "\n".join(lines) + "\n"


def _simulation_inputs(args) -> tuple[Any, SimulationConfig, dict]:
    """Mesh, config (with presets and overrides applied) and the raw config document."""
    mesh = load_mesh(Path(args.mesh)) if args.mesh else None
    if mesh is None:
        raise UsageError("--mesh is required")
    doc = _read_json(args.config, "simulation config (--config)")
    config = SimulationConfig.from_dict(doc)
    for name in args.preset or []:
        rec = load_preset(name)
        if "mu" in rec:
            config = config.with_material(Material.from_record(rec))
        else:
            config = config.with_law(rec["name"], CohesiveLaw.from_record(rec))
    if getattr(args, "pull", None) is not None:
        config = replace(config, total_pull=args.pull)
    return mesh, config, config.to_dict()


# ------------------------------------------------------------------------- commands


def cmd_mesh(args) -> int:
    started = time.perf_counter()
    if args.mesh_command == "gen":
        layers = None
        if args.layers:
            layers = []
            for item in args.layers:
                name, _, thick = item.partition(":")
                if not name or not thick:
                    raise UsageError(f"layer {item!r} must look like name:thickness")
                try:
                    layers.append(Layer(name, float(thick)))
                except ValueError as exc:
                    raise UsageError(f"layer {item!r}: thickness is not a number") from exc
        mesh = generate_sample_mesh(args.dims, args.size, layers, args.cohesive_at, args.law_name)
        outputs = Outputs(args.out, args.force)
        outputs.write("mesh.json", save_mesh(mesh))
        report = mesh_quality_report(mesh)
        print(f"{len(mesh.nodes)} nodes, {len(mesh.hexes)} hexes, {len(mesh.cohesives)} cohesive elements; "
              f"scaled Jacobian min {report['min']:.4f} mean {report['mean']:.4f}")
        cfg = {"dims_m": list(args.dims), "size_m": args.size, "layers": args.layers,
               "cohesive_at_m": args.cohesive_at, "law_name": args.law_name}
        write_manifest(outputs, "mesh gen", cfg, {}, None, started)
        return EXIT_OK
    mesh = load_mesh(Path(args.input))
    report = mesh_quality_report(mesh, bins=args.bins)
    print(f"scaled Jacobian: min = {report['min']:.6f}, mean = {report['mean']:.6f} over {report['count']} hexes")
    if not report["mean_ok"]:
        print(f"warning: mean below {report['thresholds']['mean']}")
    if not report["min_ok"]:
        print(f"warning: {len(report['below_min_threshold'])} hexes below {report['thresholds']['min']}")
    if args.out:
        outputs = Outputs(args.out, args.force)
        outputs.write("quality.json", json.dumps(report, indent=2) + "\n")
        write_manifest(outputs, "mesh quality", {"bins": args.bins}, {"mesh": args.input}, None, started)
    return EXIT_OK


def cmd_simulate(args) -> int:
    started = time.perf_counter()
    mesh, config, snapshot = _simulation_inputs(args)
    outputs = Outputs(args.out, args.force)
    inputs = {"mesh": args.mesh, "config": args.config}
    if args.dry_run:
        from .solver import _resolve_laws, _resolve_materials
        mats = _resolve_materials(mesh, config)
        dt = stable_dt(mesh, mats, _resolve_laws(mesh, config), dt_safety=config.dt_safety)
        steps = int(np.ceil(config.load_time / dt))
        print(f"stable dt = {dt:.6e} s; load time = {config.load_time:.6g} s; about {steps} steps "
              f"(the step shrinks as the tissue stiffens)")
        write_manifest(outputs, "simulate --dry-run", snapshot, inputs, None, started,
                       {"stable_dt_s": dt, "estimated_steps": steps})
        return EXIT_OK
    try:
        result = run(mesh, config, threads=args.threads)
        status = EXIT_OK
        failure = None
    except SolverError as exc:
        if exc.partial is None:
            raise
        print(f"solver failure: {exc}", file=sys.stderr)
        result, status, failure = exc.partial, EXIT_SOLVER, str(exc)
    outputs.write("curve.csv", result.curve.to_csv())
    outputs.write("energy.csv", energy_csv(result.history))
    outputs.write("curve.svg", _curve_svg([("simulated", result.curve)], "force-displacement"))
    rep = energy_report(result.history)
    print(f"{result.steps} steps; peak force {result.curve.peak_force:.6g} N; "
          f"max kinetic/internal {rep['max_ke_ratio']:.3g}; max imbalance {rep['max_imbalance']:.3g}")
    write_manifest(outputs, "simulate", snapshot, inputs, None, started,
                   {"threads": args.threads, "failure": failure, "steps": result.steps})
    return status


def cmd_synth(args) -> int:
    started = time.perf_counter()
    mesh, config, snapshot = _simulation_inputs(args)
    outputs = Outputs(args.out, args.force)
    curve = synthesize_target(mesh, config, noise=args.noise, seed=args.seed, threads=args.threads)
    outputs.write("target.csv", curve.to_csv())
    write_manifest(outputs, "synth", snapshot, {"mesh": args.mesh, "config": args.config}, args.seed, started,
                   {"noise": args.noise})
    return EXIT_OK


def cmd_calibrate(args) -> int:
    started = time.perf_counter()
    if args.stage == "interface" and args.tissue is None:
        raise UsageError("interface stage needs the tissue-parameters file (--tissue)")
    mesh, config, snapshot = _simulation_inputs(args)
    target = ForceDisplacementCurve.from_csv(_require_file(args.target, "target curve (--target)"))
    spec = _read_json(args.spec, "calibration spec (--spec)") if args.spec else {}
    options = {k: spec.pop(k) for k in ("method", "max_iter", "ftol", "gtol", "fd_step", "fallback") if k in spec}
    options["workers"] = args.workers
    inputs = {"mesh": args.mesh, "config": args.config, "target": args.target, "spec": args.spec,
              "tissue": args.tissue}
    outputs = Outputs(args.out, args.force)
    if args.stage == "tissue":
        params, result = calibrate_tissue(target, mesh, config, threads=args.threads, **spec, **options)
        name = spec.get("material_name", "brain")
        base = config.materials.get(name)
        record = Material(name, "ogden2", params, base.density if base else 1000.0).to_record()
        summary = {"material": record, "mu0_Pa": params.mu0}
    else:
        tissue_doc = _read_json(args.tissue, "tissue-parameters file (--tissue)")
        tissue_rec = tissue_doc.get("material", tissue_doc)
        tissue = Material.from_record(tissue_rec, "brain")
        config = config.with_material(tissue)
        law, result = calibrate_interface(target, mesh, config, threads=args.threads, **spec, **options)
        summary = {"law": law.to_record(spec.get("law_name", "interface"))}
    report = {**summary, **result.to_dict()}
    outputs.write("result.json", json.dumps(report, indent=2, default=float) + "\n")
    lines = ["iteration,stage,objective,best_objective,evaluations," + ",".join(result.parameters)]
    for row in result.trace:
        vals = [row["parameters"][k] for k in result.parameters]
        lines.append(f"{row['iteration']},{row['stage']},{row['objective']:.9e},{row['best_objective']:.9e},"
                     f"{row['evaluations']}," + ",".join(f"{v:.9e}" for v in vals))
    outputs.write("trace.csv", "\n".join(lines) + "\n")
    series = [("target", target)]
    if result.fitted_curve is not None:
        series.append(("fitted", result.fitted_curve))
    outputs.write("overlay.svg", _curve_svg(series, f"{args.stage} calibration"))
    print(f"objective {result.objective_value:.6g} N; peak-force error {result.peak_force_error_pct:.2f}%; "
          f"converged: {result.converged}")
    for k, v in result.parameters.items():
        print(f"  {k} = {v:.6g}")
    write_manifest(outputs, f"calibrate {args.stage}", snapshot, inputs, args.seed, started,
                   {"converged": result.converged})
    return EXIT_OK if result.converged else EXIT_NOT_CONVERGED


def _require_file(path: str | None, what: str) -> str:
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="meningefem", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, sim=True):
        p.add_argument("--out", help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if sim:
            p.add_argument("--mesh", help="mesh JSON file")
            p.add_argument("--config", help="simulation config JSON file")
            p.add_argument("--preset", action="append", choices=PRESETS,
                           help="inject a bundled material or law record (repeatable)")
            p.add_argument("--pull", type=float, help="override total_pull_m")
            p.add_argument("--threads", type=int, default=1, help="element threads; never changes results")
        p.add_argument("--seed", type=int, default=None)

    mesh = sub.add_parser("mesh", help="generate or inspect meshes")
    msub = mesh.add_subparsers(dest="mesh_command", required=True, parser_class=_Parser)
    gen = msub.add_parser("gen", help="structured layered cuboid")
    gen.add_argument("--dims", type=float, nargs=3, required=True, metavar=("X", "Y", "Z"))
    gen.add_argument("--size", type=float, required=True, help="element edge length (m)")
    gen.add_argument("--layers", nargs="+", metavar="NAME:THICKNESS", help="bottom-up layers along z")
    gen.add_argument("--cohesive-at", type=float, default=None, help="z of the cohesive plane (m)")
    gen.add_argument("--law-name", default="interface")
    common(gen, sim=False)
    qual = msub.add_parser("quality", help="scaled-Jacobian report")
    qual.add_argument("--in", dest="input", required=True)
    qual.add_argument("--bins", type=int, default=10)
    common(qual, sim=False)

    sim = sub.add_parser("simulate", help="forward shear simulation")
    common(sim)
    sim.add_argument("--dry-run", action="store_true", help="validate and estimate only")

    syn = sub.add_parser("synth", help="synthetic target curve at 100 Hz equivalent")
    common(syn)
    syn.add_argument("--noise", type=float, default=0.0, help="uniform multiplicative noise amplitude")

    cal = sub.add_parser("calibrate", help="inverse identification")
    cal.add_argument("stage", choices=("tissue", "interface"))
    common(cal)
    cal.add_argument("--target", help="target curve CSV")
    cal.add_argument("--spec", help="calibration spec JSON (bounds, start, mode, optimiser options)")
    cal.add_argument("--tissue", help="tissue-parameters JSON (interface stage)")
    cal.add_argument("--workers", type=int, default=1, help="processes for finite-difference evaluations")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    handlers = {"mesh": cmd_mesh, "simulate": cmd_simulate, "synth": cmd_synth, "calibrate": cmd_calibrate}
    try:
        return handlers[args.command](args)
    except (UsageError, MeshError, MaterialError, CohesiveLawError, ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"meningefem: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SolverError, CalibrationInfeasibleError) as exc:
        print(f"meningefem: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
