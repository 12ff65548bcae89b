"""Command-line front end: solve, trace, characterize, coincidence.

Every run writes ``manifest.json`` next to its outputs. Failures print a
single JSON object to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

from . import __version__
from .coincidence import (
    ELECTRON_MODE,
    SwitchPlan,
    estimate_efficiency,
    event_log_csv,
    run_many,
)
from .fieldsolve import DEFAULT_TOL, BasisFileError, SolverError, load_basis, save_basis, solve_basis
from .geometry import GeometryError, GeometrySpec, build_domain, default_geometry
from .imaging import (
    Bench,
    WorkingPoint,
    align_image,
    bfield_scan,
    deflection_scan,
    depth_of_field,
    extraction_region,
    field_of_view_map,
    magnification_scan,
    quadrupole_scan,
    stray_compensation,
)
from .tracer import (
    ELECTRON,
    RB87_ION,
    FieldSource,
    InitialConditions,
    TraceError,
    TraceOptions,
    batch_trace,
    sample_initial,
)

log = logging.getLogger("ionlens")

CACHE_ENV = "ION_OPTICS_CACHE_DIR"
SCANS = ("magnification", "fov", "deflection", "extraction", "quadrupole", "align", "dof", "bfield", "straycomp")

EXIT_CONFIG = 2
EXIT_CACHE = 3
EXIT_SOLVER = 4
EXIT_RUNTIME = 5


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int, **extra):
        super().__init__(message)
        self.kind = kind
        self.code = code
        self.extra = extra


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def load_schema(name: str) -> dict:
    return json.loads(resources.files("ionlens").joinpath("schemas", name).read_text())


def _validate(doc: Any, schema: str, what: str) -> None:
    try:
        jsonschema.validate(doc, load_schema(schema))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path)
        raise CliError("invalid_config", f"{what}: {exc.message}", EXIT_CONFIG, path=path) from None


def read_config(path: str | None) -> dict:
    if path is None:
        return {"schema_version": 1}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("missing_file", f"config file not found: {path}", EXIT_CONFIG) from None
    except json.JSONDecodeError as exc:
        raise CliError("invalid_config", f"config is not valid JSON: {exc}", EXIT_CONFIG) from None
    _validate(doc, "run_config.schema.json", "config")
    return doc


def resolve_geometry(cfg: dict, base_dir: Path) -> GeometrySpec:
    g = cfg.get("geometry")
    if g is None:
        return default_geometry()
    if isinstance(g, str):
        p = Path(g)
        if not p.is_absolute():
            p = base_dir / p
        try:
            g = json.loads(p.read_text())
        except FileNotFoundError:
            raise CliError("missing_file", f"geometry file not found: {p}", EXIT_CONFIG) from None
    _validate(g, "geometry.schema.json", "geometry")
    try:
        return GeometrySpec.from_dict(g)
    except (GeometryError, TypeError) as exc:
        raise CliError("invalid_geometry", str(exc), EXIT_CONFIG) from None


def cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path.home() / ".cache" / "ionlens"


def basis_path(cfg: dict, spec: GeometrySpec) -> Path:
    if cfg.get("basis_cache"):
        return Path(cfg["basis_cache"])
    return cache_dir() / f"{spec.hash()[:16]}.ionb"


def resolve_voltages(v: Any) -> WorkingPoint:
    if v is None or v == "ion":
        return WorkingPoint()
    if v == "electron":
        return WorkingPoint.from_dict(ELECTRON_MODE)
    return WorkingPoint.from_dict(v)


def load_cached_basis(cfg: dict, spec: GeometrySpec):
    path = basis_path(cfg, spec)
    if not path.exists():
        raise CliError("missing_cache", f"no basis cache at {path}; run `ionlens solve` first", EXIT_CACHE, path=str(path))
    try:
        return load_basis(path, build_domain(spec)), path
    except BasisFileError as exc:
        raise CliError("stale_cache", str(exc), EXIT_CACHE, path=str(path)) from None


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, spec: GeometrySpec, outputs: list[str], extra: dict | None = None) -> None:
    files = {name: _sha256(out / name) for name in sorted(outputs)}
    doc = {
        "command": command,
        "code_version": __version__,
        "geometry_hash": spec.hash(),
        "config": cfg,
        "outputs": files,
    }
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, float) and math.isinf(v):
        return None
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _write(out: Path, name: str, text: str, outputs: list[str]) -> None:
    (out / name).write_text(text)
    outputs.append(name)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_solve(args, cfg: dict, spec: GeometrySpec, out: Path) -> dict:
    path = basis_path(cfg, spec)
    tol = float(cfg.get("tolerance", DEFAULT_TOL))
    if path.exists() and not args.force:
        try:
            b = load_basis(path, build_domain(spec))
            if b.tolerance <= tol:
                log.info("basis cache %s is current", path)
                return {"basis": str(path), "reused": True}
        except BasisFileError as exc:
            log.warning("replacing unusable cache %s: %s", path, exc)
    domain = build_domain(spec)
    basis = solve_basis(domain, tol=tol, threads=args.threads)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_basis(basis, path)
    return {"basis": str(path), "reused": False, "max_residual": basis.max_residual()}


def cmd_trace(args, cfg: dict, spec: GeometrySpec, out: Path) -> dict:
    basis, path = load_cached_basis(cfg, spec)
    tcfg = cfg.get("trace", {})
    species = ELECTRON if tcfg.get("species") == "e-" else RB87_ION
    wp = resolve_voltages(cfg.get("voltages"))
    positions = np.asarray(tcfg.get("positions", [[0.0, 0.0, -100e-6]]), dtype=float)
    n = int(tcfg.get("n", len(positions)))
    ic = InitialConditions(
        positions=positions,
        temperature=float(tcfg.get("temperature_K", 0.0)),
        seed=int(cfg.get("seed", 0)),
        dof_convention=tcfg.get("dof_convention", "3dof"),
    )
    pos, vel = sample_initial(ic, n, species)
    opts = TraceOptions(
        record=True,
        integrator=tcfg.get("integrator", "auto"),
        t_max=float(tcfg.get("t_max_s", TraceOptions.t_max)),
        rtol=float(tcfg.get("rtol", TraceOptions.rtol)),
    )
    src = FieldSource.build(basis, wp.voltages())
    trs = batch_trace(species, pos, vel, src, tcfg.get("B_T", (0.0, 0.0, 0.0)), opts, args.threads)
    outputs: list[str] = []
    summary = []
    for k, tr in enumerate(trs):
        _write(out, f"trajectory_{k:04d}.csv", tr.to_csv(), outputs)
        summary.append({"index": k, **tr.summary()})
    _write(out, "impacts.json", json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n", outputs)
    return {"outputs": outputs, "basis": str(path), "voltages": wp.to_dict()}


def _scan_kwargs(cfg: dict, scan: str) -> dict:
    return dict(cfg.get("scans", {}).get(scan, {}))


def run_scan(bench: Bench, scan: str, base: WorkingPoint, kw: dict):
    kw = dict(kw)
    if scan == "magnification":
        return magnification_scan(bench, kw.pop("ext_values", [-50, -100, -150, -200]), kw.pop("con_values", [-600, -800, -1000]), base, **kw)
    if scan == "fov":
        return field_of_view_map(bench, kw.pop("u_ext", base.ext.u), base=base, **kw)
    if scan == "deflection":
        return deflection_scan(bench, kw.pop("ux_values", list(range(-150, 151, 25))), kw.pop("uy_values", [0]), base, **kw)
    if scan == "extraction":
        return extraction_region(bench, base, **kw)
    if scan == "quadrupole":
        return quadrupole_scan(bench, kw.pop("ratios", [round(0.025 * k, 3) for k in range(15)]), base, **kw)
    if scan == "align":
        alpha = float(kw.pop("alpha_deg", 45.0))
        target = kw.pop("target", "y")
        return align_image(bench, alpha, target, base=base, **kw).report(alpha, target)
    if scan == "dof":
        return depth_of_field(bench, kw.pop("distances", [1e-4, 5e-4, 1e-3, 1.5e-3, 2e-3]), base, **kw)
    if scan == "bfield":
        return bfield_scan(bench, kw.pop("bz_gauss", [0, 1000, 2000, 3000]), kw.pop("bx_gauss", [0, 250, 500, 750, 1000]), base, **kw)
    if scan == "straycomp":
        return stray_compensation(bench, **kw)
    raise CliError("invalid_config", f"unknown scan {scan!r}", EXIT_CONFIG)


def cmd_characterize(args, cfg: dict, spec: GeometrySpec, out: Path) -> dict:
    basis, path = load_cached_basis(cfg, spec)
    bench = Bench(basis, threads=args.threads)
    base = resolve_voltages(cfg.get("voltages"))
    try:
        rep = run_scan(bench, args.scan, base, _scan_kwargs(cfg, args.scan))
    except TypeError as exc:
        raise CliError("invalid_config", f"scan parameters: {exc}", EXIT_CONFIG) from None
    outputs: list[str] = []
    _write(out, f"{args.scan}.csv", rep.to_csv(), outputs)
    _write(out, f"{args.scan}.json", rep.summary_json() + "\n", outputs)
    if rep.svg:
        _write(out, f"{args.scan}.svg", rep.svg + "\n", outputs)
    return {"outputs": outputs, "basis": str(path), "voltages": base.to_dict()}


def cmd_coincidence(args, cfg: dict, spec: GeometrySpec, out: Path) -> dict:
    basis, path = load_cached_basis(cfg, spec)
    ccfg = cfg.get("coincidence", {})
    plan = SwitchPlan.from_dict(ccfg["plan"]) if "plan" in ccfg else SwitchPlan()
    births = np.asarray(ccfg.get("births", [[0.0, 0.0, -2e-3]]), dtype=float)
    events = run_many(basis, spec, births, plan, threads=args.threads)
    eta = ccfg.get("eta", 0.6)
    if isinstance(eta, dict):
        eta = {int(k): float(v) for k, v in eta.items()}
    outputs: list[str] = []
    _write(out, "events.csv", event_log_csv(events), outputs)
    result: dict[str, Any] = {"outputs": outputs, "basis": str(path), "plan": plan.to_dict()}
    try:
        est = estimate_efficiency(
            events,
            eta,
            float(ccfg.get("electron_eta", 1.0)),
            n_pairs=int(ccfg.get("n_pairs", 10_000)),
            seed=int(cfg.get("seed", 0)),
        )
        _write(out, "efficiency.json", est.to_json() + "\n", outputs)
    except ValueError as exc:
        result["efficiency_error"] = str(exc)
    return result


COMMANDS = {"solve": cmd_solve, "trace": cmd_trace, "characterize": cmd_characterize, "coincidence": cmd_coincidence}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="run configuration JSON")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (default: 1)")
    common.add_argument("--tolerance", type=float, help="solver tolerance (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ionlens", description="Electrostatic ion-imaging column: solve, trace and characterize.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("solve", parents=[common], help="solve and cache the unit-voltage basis")
    s.add_argument("--force", action="store_true", help="re-solve even if a valid cache exists")
    sub.add_parser("trace", parents=[common], help="trace particles and write trajectory CSVs")
    c = sub.add_parser("characterize", parents=[common], help="run one characterization scan")
    c.add_argument("scan", choices=SCANS)
    sub.add_parser("coincidence", parents=[common], help="electron-ion coincidence run and efficiency estimate")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise CliError("invalid_config", "--threads must be at least 1", EXIT_CONFIG)
        cfg = read_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.tolerance is not None:
            if not args.tolerance > 0:
                raise CliError("invalid_config", "--tolerance must be positive", EXIT_CONFIG)
            cfg["tolerance"] = args.tolerance
        base_dir = Path(args.config).resolve().parent if args.config else Path.cwd()
        spec = resolve_geometry(cfg, base_dir)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg, spec, out)
        outputs = result.pop("outputs", [])
        command = args.command + (f" {args.scan}" if args.command == "characterize" else "")
        write_manifest(out, command, cfg, spec, outputs, result)
        return 0
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc), **exc.extra}
        code = exc.code
    except SolverError as exc:
        err = {"error": "solver_nonconvergence", "message": str(exc), "residual_history": list(exc.residual_history)[-20:]}
        code = EXIT_SOLVER
    except GeometryError as exc:
        err = {"error": "invalid_geometry", "message": str(exc)}
        code = EXIT_CONFIG
    except (TraceError, KeyError, ValueError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        code = EXIT_RUNTIME
    print(json.dumps(err, default=_json_default), file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
