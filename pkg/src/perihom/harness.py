"""Run orchestration: config files, mode dispatch, output files, CLI.

A run is described by a single TOML file with nested sections (geometry,
coefficients, kinetics, solver, initial, output).  Unknown keys are rejected
with the dotted path of the offender -- silent typos in physics constants
are the dominant failure mode -- and every physical constant is checked for
the positivity the well-posedness theory assumes.

Modes
-----
cell      solve the corrector problems, write the effective tensors
micro     resolved pore-scale run at geometry.epsilon
macro     cell solve followed by an upscaled run with the resulting tensors
converge  cell solve + one macro run + one micro run per epsilon in
          solver.epsilons; tabulates e(eps) = ||theta^eps - theta0||_L2 +
          sum_i ||u_i^eps - u_i0||_L2 over the pore cells at t_end, with the
          macro fields interpolated to the micro cell centers.

Artifacts (all CSV, full double precision via repr, written atomically by
temp-file rename): tensors.csv, diag.csv, snap_<t>.csv (nodal/cell fields
x, y, theta, u_i; the face-bound deposit appears in the diag totals),
converge.csv, plus a manifest.json listing every output with its sha256,
the config hash, library versions, and the invariant-audit summary.  The
same config file reproduces byte-identical CSVs.  Per-epsilon micro runs of
a convergence study are independent and can run in separate processes
(--parallel); results are reduced in epsilon order either way.

Exit codes: 0 success, 2 configuration error, 3 solver failure,
4 invariant violation under --strict.
"""

import argparse
import hashlib
import json
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .cell_solver import (CellCoefficients, assemble_tensors,
                          solve_cell_problems, tensors_csv_rows)
from .errors import ConfigError, GeometryError, InvariantViolation, SolverError
from .geometry import Disc, Rectangle, build_unit_cell, tile_domain
from .kinetics import DepositionParams, kernel_from_preset
from .macro_solver import MacroRunConfig, simulate_macro
from .micro_solver import MicroRunConfig, simulate_micro
from .mollifier import build_kernel

MODES = ("cell", "micro", "macro", "converge")
DEFAULT_EPSILONS = (0.25, 0.125, 0.0625)


# ---------------------------------------------------------------------------
# configuration schema


@dataclass
class GeometrySpec:
    resolution: int
    shape: object          # None, Disc, or Rectangle
    robin_fraction: float
    reference_angle: float
    epsilon: float         # micro mode tiling period (None elsewhere)


@dataclass
class CoefficientSpec:
    kappa: float
    kappa_field: str       # "constant" | "layered_sine"
    kappa_amplitude: float
    tau: object            # scalar or per-species list
    d: list
    dufour: object


@dataclass
class KineticsSpec:
    preset: str            # "none" | "constant" | "sum_thirds" | "brownian"
    c: float
    threshold: float
    a: list                # attach rates, or None
    b: list                # detach rates, or None
    g0: float


@dataclass
class SolverSpec:
    dt: float
    t_end: float
    fp_tol: float
    fp_max: int
    macro_n: int
    delta: float           # mollifier radius; 0 disables
    epsilons: list
    theta_max: float       # optional audit-bound overrides
    u_max: float
    v_max: float


@dataclass
class InitialSpec:
    theta: dict
    u: list


@dataclass
class OutputSpec:
    directory: str
    snap_every: int
    strict: bool


@dataclass
class RunConfig:
    mode: str
    geometry: GeometrySpec
    coefficients: CoefficientSpec
    kinetics: KineticsSpec
    solver: SolverSpec
    initial: InitialSpec
    output: OutputSpec
    config_sha256: str
    out_dir: object = None  # CLI --out override


_MISSING = object()


def _take(block, section, key, default=_MISSING, kind=None):
    """Pop a typed key from a section dict, with dotted-path errors."""
    path = f"{section}.{key}"
    if key not in block:
        if default is _MISSING:
            raise ConfigError(f"missing required key '{path}'")
        return default
    val = block.pop(key)
    if kind == "float":
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"'{path}' must be a number, got {val!r}")
        return float(val)
    if kind == "int":
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"'{path}' must be an integer, got {val!r}")
        return int(val)
    if kind == "bool":
        if not isinstance(val, bool):
            raise ConfigError(f"'{path}' must be a boolean, got {val!r}")
        return val
    if kind == "str":
        if not isinstance(val, str):
            raise ConfigError(f"'{path}' must be a string, got {val!r}")
        return val
    if kind == "floatlist":
        if not isinstance(val, list) or any(
                isinstance(v, bool) or not isinstance(v, (int, float))
                for v in val):
            raise ConfigError(f"'{path}' must be a list of numbers, got {val!r}")
        return [float(v) for v in val]
    if kind == "float_or_list":
        if isinstance(val, list):
            return _retake(val, path, "floatlist")
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(
                f"'{path}' must be a number or list of numbers, got {val!r}")
        return float(val)
    if kind == "table":
        if not isinstance(val, dict):
            raise ConfigError(f"'{path}' must be a table, got {val!r}")
        return dict(val)
    if kind == "tablelist":
        if not isinstance(val, list) or any(not isinstance(v, dict)
                                            for v in val):
            raise ConfigError(f"'{path}' must be a list of tables, got {val!r}")
        return [dict(v) for v in val]
    return val


def _retake(val, path, kind):
    if kind == "floatlist":
        if any(isinstance(v, bool) or not isinstance(v, (int, float))
               for v in val):
            raise ConfigError(f"'{path}' must be a list of numbers, got {val!r}")
        return [float(v) for v in val]
    raise AssertionError(kind)


def _finish(block, section):
    if block:
        raise ConfigError(f"unknown key '{section}.{next(iter(block))}'")


def _section(raw, name):
    val = raw.pop(name, {})
    if not isinstance(val, dict):
        raise ConfigError(f"section [{name}] must be a table")
    return dict(val)


def _parse_geometry(raw, mode):
    g = _section(raw, "geometry")
    resolution = _take(g, "geometry", "resolution", kind="int")
    shape_name = _take(g, "geometry", "shape", default="none", kind="str")
    if shape_name == "none":
        shape = None
    elif shape_name == "disc":
        radius = _take(g, "geometry", "radius", default=0.25, kind="float")
        center = _take(g, "geometry", "center", default=[0.5, 0.5],
                       kind="floatlist")
        if len(center) != 2:
            raise ConfigError("'geometry.center' must have two entries")
        shape = Disc(center=tuple(center), radius=radius)
    elif shape_name == "rectangle":
        coords = [_take(g, "geometry", k, kind="float")
                  for k in ("x0", "x1", "y0", "y1")]
        shape = Rectangle(*coords)
    else:
        raise ConfigError(
            f"'geometry.shape' must be none, disc, or rectangle, "
            f"got {shape_name!r}")
    robin_fraction = _take(g, "geometry", "robin_fraction", default=1.0,
                           kind="float")
    reference_angle = _take(g, "geometry", "reference_angle", default=0.0,
                            kind="float")
    epsilon = _take(g, "geometry", "epsilon", default=None, kind="float")
    if mode == "micro" and epsilon is None:
        raise ConfigError("'geometry.epsilon' is required for micro mode")
    _finish(g, "geometry")
    return GeometrySpec(resolution, shape, robin_fraction, reference_angle,
                        epsilon)


def _parse_coefficients(raw):
    c = _section(raw, "coefficients")
    d = _take(c, "coefficients", "d", kind="floatlist")
    if not d:
        raise ConfigError("'coefficients.d' must list at least one species")
    if min(d) <= 0.0:
        raise ConfigError(
            f"'coefficients.d' entries must be positive, got {min(d)}")
    n = len(d)
    kappa = _take(c, "coefficients", "kappa", default=1.0, kind="float")
    if kappa <= 0.0:
        raise ConfigError(f"'coefficients.kappa' must be positive, got {kappa}")
    kappa_field = _take(c, "coefficients", "kappa_field", default="constant",
                        kind="str")
    if kappa_field not in ("constant", "layered_sine"):
        raise ConfigError(
            f"'coefficients.kappa_field' must be constant or layered_sine, "
            f"got {kappa_field!r}")
    kappa_amplitude = _take(c, "coefficients", "kappa_amplitude", default=0.0,
                            kind="float")
    if kappa_field == "layered_sine" and not abs(kappa_amplitude) < 1.0:
        raise ConfigError(
            "'coefficients.kappa_amplitude' must satisfy |amplitude| < 1 "
            "to keep kappa positive")
    tau = _take(c, "coefficients", "tau", default=0.0, kind="float_or_list")
    dufour = _take(c, "coefficients", "dufour", default=0.0,
                   kind="float_or_list")
    for name, val in (("tau", tau), ("dufour", dufour)):
        if isinstance(val, list) and len(val) != n:
            raise ConfigError(
                f"'coefficients.{name}' must have one entry per species "
                f"({n}), got {len(val)}")
    _finish(c, "coefficients")
    return CoefficientSpec(kappa, kappa_field, kappa_amplitude, tau, d, dufour)


def _parse_kinetics(raw, n_species):
    k = _section(raw, "kinetics")
    preset = _take(k, "kinetics", "preset", default="none", kind="str")
    if preset not in ("none", "constant", "sum_thirds", "brownian"):
        raise ConfigError(
            f"'kinetics.preset' must be none, constant, sum_thirds, or "
            f"brownian, got {preset!r}")
    c = _take(k, "kinetics", "c", default=0.0, kind="float")
    if c < 0.0:
        raise ConfigError(f"'kinetics.c' must be nonnegative, got {c}")
    threshold = _take(k, "kinetics", "threshold", default=1.0, kind="float")
    if threshold <= 0.0:
        raise ConfigError(
            f"'kinetics.threshold' must be positive, got {threshold}")
    a = _take(k, "kinetics", "a", default=None, kind="floatlist")
    b = _take(k, "kinetics", "b", default=None, kind="floatlist")
    if (a is None) != (b is None):
        raise ConfigError("'kinetics.a' and 'kinetics.b' must be given together")
    if a is not None:
        if len(a) != n_species or len(b) != n_species:
            raise ConfigError(
                f"'kinetics.a' and 'kinetics.b' must have one entry per "
                f"species ({n_species})")
        if min(a) < 0.0:
            raise ConfigError(f"'kinetics.a' must be nonnegative, got {min(a)}")
        if min(b) <= 0.0:
            raise ConfigError(f"'kinetics.b' must be positive, got {min(b)}")
    g0 = _take(k, "kinetics", "g0", default=0.0, kind="float")
    if g0 < 0.0:
        raise ConfigError(f"'kinetics.g0' must be nonnegative, got {g0}")
    _finish(k, "kinetics")
    return KineticsSpec(preset, c, threshold, a, b, g0)


def _parse_solver(raw):
    s = _section(raw, "solver")
    dt = _take(s, "solver", "dt", default=1e-3, kind="float")
    t_end = _take(s, "solver", "t_end", default=1e-2, kind="float")
    fp_tol = _take(s, "solver", "fp_tol", default=1e-8, kind="float")
    fp_max = _take(s, "solver", "fp_max", default=50, kind="int")
    macro_n = _take(s, "solver", "macro_n", default=32, kind="int")
    delta = _take(s, "solver", "delta", default=0.0, kind="float")
    if delta < 0.0:
        raise ConfigError(f"'solver.delta' must be nonnegative, got {delta}")
    epsilons = _take(s, "solver", "epsilons", default=list(DEFAULT_EPSILONS),
                     kind="floatlist")
    if not epsilons or min(epsilons) <= 0.0:
        raise ConfigError("'solver.epsilons' must be a list of positive values")
    theta_max = _take(s, "solver", "theta_max", default=None, kind="float")
    u_max = _take(s, "solver", "u_max", default=None, kind="float")
    v_max = _take(s, "solver", "v_max", default=None, kind="float")
    _finish(s, "solver")
    return SolverSpec(dt, t_end, fp_tol, fp_max, macro_n, delta, epsilons,
                      theta_max, u_max, v_max)


_PROFILE_KEYS = {
    "zero": {},
    "constant": {"value": 0.0},
    "bump": {"amp": 1.0, "x0": 0.5, "y0": 0.5, "width": 0.02},
    "cosine": {"amp": 1.0},
}


def _parse_profile(table, path):
    spec = dict(table)
    profile = _take(spec, path, "profile", default="zero", kind="str")
    if profile not in _PROFILE_KEYS:
        raise ConfigError(
            f"'{path}.profile' must be one of {sorted(_PROFILE_KEYS)}, "
            f"got {profile!r}")
    out = {"profile": profile}
    for key, default in _PROFILE_KEYS[profile].items():
        out[key] = _take(spec, path, key, default=default, kind="float")
    _finish(spec, path)
    if profile == "bump" and out["width"] <= 0.0:
        raise ConfigError(f"'{path}.width' must be positive")
    for key in ("amp", "value"):
        if key in out and out[key] < 0.0:
            raise ConfigError(f"'{path}.{key}' must be nonnegative "
                              "(initial data enters positivity arguments)")
    return out


def _parse_initial(raw, n_species):
    block = _section(raw, "initial")
    theta_table = _take(block, "initial", "theta", default={"profile": "zero"},
                        kind="table")
    theta = _parse_profile(theta_table, "initial.theta")
    u_tables = _take(block, "initial", "u", default=None, kind="tablelist")
    if u_tables is None:
        u = [{"profile": "zero"}] * n_species
    else:
        if len(u_tables) != n_species:
            raise ConfigError(
                f"'initial.u' must list one profile per species "
                f"({n_species}), got {len(u_tables)}")
        u = [_parse_profile(tbl, f"initial.u[{i}]")
             for i, tbl in enumerate(u_tables)]
    _finish(block, "initial")
    return InitialSpec(theta, u)


def _parse_output(raw):
    block = _section(raw, "output")
    directory = _take(block, "output", "directory", default="out", kind="str")
    snap_every = _take(block, "output", "snap_every", default=0, kind="int")
    if snap_every < 0:
        raise ConfigError(
            f"'output.snap_every' must be nonnegative, got {snap_every}")
    strict = _take(block, "output", "strict", default=False, kind="bool")
    _finish(block, "output")
    return OutputSpec(directory, snap_every, strict)


def parse_config(raw, mode, config_sha256, out_dir=None, strict=None):
    """Validate a parsed TOML tree against the schema for the given mode."""
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    raw = dict(raw)
    stated = raw.pop("mode", None)
    if stated is not None and stated != mode:
        raise ConfigError(
            f"config mode {stated!r} does not match requested mode {mode!r}")
    geometry = _parse_geometry(raw, mode)
    coefficients = _parse_coefficients(raw)
    kinetics = _parse_kinetics(raw, len(coefficients.d))
    solver = _parse_solver(raw)
    initial = _parse_initial(raw, len(coefficients.d))
    output = _parse_output(raw)
    if raw:
        raise ConfigError(f"unknown key '{next(iter(raw))}'")
    if strict:
        output.strict = True
    return RunConfig(mode=mode, geometry=geometry, coefficients=coefficients,
                     kinetics=kinetics, solver=solver, initial=initial,
                     output=output, config_sha256=config_sha256,
                     out_dir=out_dir)


def load_config(path, mode, out_dir=None, strict=None):
    """Read, parse, and validate a TOML run configuration."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        raw = tomllib.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    sha = hashlib.sha256(data).hexdigest()
    return parse_config(raw, mode, sha, out_dir=out_dir, strict=strict)


# ---------------------------------------------------------------------------
# builders: config -> solver objects


def build_cell(config):
    g = config.geometry
    return build_unit_cell(g.shape, g.resolution,
                           robin_fraction=g.robin_fraction,
                           reference_angle=g.reference_angle)


def build_coefficients(config):
    c = config.coefficients
    res = config.geometry.resolution
    n = len(c.d)
    shape = (res, res)
    if c.kappa_field == "layered_sine":
        x = (np.arange(res) + 0.5) / res
        layered = c.kappa * (1.0 + c.kappa_amplitude
                             * np.sin(2.0 * np.pi * x))
        kappa = np.broadcast_to(layered[:, None], shape).copy()
    else:
        kappa = np.full(shape, c.kappa)

    def per_species(val):
        vals = val if isinstance(val, list) else [val] * n
        return np.stack([np.full(shape, float(v)) for v in vals])

    tau = np.full(shape, float(c.tau)) if not isinstance(c.tau, list) \
        else per_species(c.tau)
    return CellCoefficients(kappa=kappa, tau=tau, d=per_species(c.d),
                            dufour=per_species(c.dufour))


def build_kinetics(config):
    k = config.kinetics
    n = len(config.coefficients.d)
    kernel = None
    if k.preset != "none":
        kernel = kernel_from_preset(k.preset, n, c=k.c, M=k.threshold)
    deposition = None
    if k.a is not None:
        deposition = DepositionParams(a=np.asarray(k.a), b=np.asarray(k.b))
    return kernel, deposition


def sample_profile(spec, x, y):
    """Evaluate a named initial-data profile on coordinate arrays."""
    p = spec["profile"]
    if p == "zero":
        return np.zeros_like(x)
    if p == "constant":
        return np.full_like(x, spec["value"])
    if p == "bump":
        return spec["amp"] * np.exp(-((x - spec["x0"]) ** 2
                                      + (y - spec["y0"]) ** 2) / spec["width"])
    if p == "cosine":
        return spec["amp"] * (0.5 + 0.5 * np.cos(np.pi * x)
                              * np.cos(np.pi * y))
    raise AssertionError(p)


def build_micro_config(config, cell, coeffs, epsilon):
    domain = tile_domain(cell, epsilon)
    kernel, deposition = build_kinetics(config)
    s = config.solver
    centers = (np.arange(domain.n) + 0.5) * domain.h
    x, y = np.meshgrid(centers, centers, indexing="ij")
    theta0 = sample_profile(config.initial.theta, x, y)
    u0 = np.stack([sample_profile(spec, x, y) for spec in config.initial.u])
    mol = build_kernel(s.delta, domain.h) if s.delta > 0.0 else None
    return MicroRunConfig(
        domain=domain, coefficients=coeffs, kernel=kernel,
        deposition=deposition, g0=config.kinetics.g0, mollifier=mol,
        dt=s.dt, t_end=s.t_end, fp_tol=s.fp_tol, fp_max=s.fp_max,
        theta0=theta0, u0=u0, snap_every=config.output.snap_every,
        strict=config.output.strict, theta_max_bound=s.theta_max,
        u_max_bound=s.u_max, v_max_bound=s.v_max)


def build_macro_config(config, tensors):
    kernel, deposition = build_kinetics(config)
    s = config.solver
    n = s.macro_n
    nodes = np.linspace(0.0, 1.0, n + 1)
    x, y = np.meshgrid(nodes, nodes, indexing="ij")
    theta0 = sample_profile(config.initial.theta, x, y)
    u0 = np.stack([sample_profile(spec, x, y) for spec in config.initial.u])
    mol = build_kernel(s.delta, 1.0 / n) if s.delta > 0.0 else None
    return MacroRunConfig(
        tensors=tensors, n=n, kernel=kernel, deposition=deposition,
        mollifier=mol, dt=s.dt, t_end=s.t_end, fp_tol=s.fp_tol,
        fp_max=s.fp_max, theta0=theta0, u0=u0,
        snap_every=config.output.snap_every, strict=config.output.strict,
        theta_max_bound=s.theta_max, u_max_bound=s.u_max, v_max_bound=s.v_max)


def solve_tensors(config, cell, coeffs):
    correctors = solve_cell_problems(cell, coeffs)
    _, deposition = build_kinetics(config)
    return assemble_tensors(correctors, coeffs, cell, deposition=deposition,
                            g0=config.kinetics.g0)


# ---------------------------------------------------------------------------
# output writing


def _atomic_write(path, text):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    tmp.replace(path)


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def write_tensors_csv(path, tensors):
    lines = ["name,species,row,col,value"]
    for name, species, row, col, value in tensors_csv_rows(tensors):
        lines.append(f"{name},{species},{row},{col},{repr(float(value))}")
    _atomic_write(path, "\n".join(lines) + "\n")


def write_diag_csv(path, diagnostics):
    keys = list(diagnostics[0].keys())
    lines = [",".join(keys)]
    for row in diagnostics:
        lines.append(",".join(_fmt(row[k]) for k in keys))
    _atomic_write(path, "\n".join(lines) + "\n")


def _snapshot_name(t):
    return f"snap_{t:.9g}.csv"


def write_snapshot_csv(path, x, y, theta, u, select):
    n_sp = u.shape[0]
    header = "x,y,theta," + ",".join(f"u_{i + 1}" for i in range(n_sp))
    cols = [x.ravel()[select], y.ravel()[select], theta.ravel()[select]]
    cols += [u[i].ravel()[select] for i in range(n_sp)]
    lines = [header]
    for vals in zip(*cols):
        lines.append(",".join(repr(float(v)) for v in vals))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_converge_csv(path, rows):
    lines = ["epsilon,ell,grid,error,ratio"]
    for eps, ell, grid, err, ratio in rows:
        rtxt = "" if ratio is None else repr(float(ratio))
        lines.append(f"{repr(float(eps))},{ell},{grid},{repr(float(err))},{rtxt}")
    _atomic_write(path, "\n".join(lines) + "\n")


def _write_manifest(out_dir, config, summary, violations, files):
    outputs = {}
    for f in sorted(files):
        path = out_dir / f
        outputs[f] = hashlib.sha256(path.read_bytes()).hexdigest()
    manifest = {
        "mode": config.mode,
        "config_sha256": config.config_sha256,
        "versions": {
            "package": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
        },
        "outputs": outputs,
        "violations": {"count": len(violations), "sample": violations[:3]},
        "summary": summary,
    }
    _atomic_write(out_dir / "manifest.json",
                  json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# mode runners


def _run_cell(config, out_dir, parallel):
    cell = build_cell(config)
    coeffs = build_coefficients(config)
    tensors = solve_tensors(config, cell, coeffs)
    write_tensors_csv(out_dir / "tensors.csv", tensors)
    summary = {"K": tensors.K.tolist(), "K0": tensors.K0,
               "K_asymmetry": tensors.K_asymmetry,
               "pore_area": tensors.pore_area,
               "perimeter": tensors.perimeter}
    return _write_manifest(out_dir, config, summary, [], ["tensors.csv"])


def _run_micro(config, out_dir, parallel):
    cell = build_cell(config)
    coeffs = build_coefficients(config)
    micro_cfg = build_micro_config(config, cell, coeffs,
                                   config.geometry.epsilon)
    result = simulate_micro(micro_cfg)
    files = ["diag.csv"]
    write_diag_csv(out_dir / "diag.csv", result.diagnostics)
    dom = micro_cfg.domain
    centers = (np.arange(dom.n) + 0.5) * dom.h
    x, y = np.meshgrid(centers, centers, indexing="ij")
    select = dom.mask.ravel()
    states = result.snapshots or [result.final_state]
    for state in states:
        name = _snapshot_name(state.t)
        write_snapshot_csv(out_dir / name, x, y, state.theta, state.u, select)
        files.append(name)
    summary = {"epsilon": config.geometry.epsilon, "grid": dom.n,
               "n_steps": micro_cfg.n_steps, "final_t": result.final_state.t}
    return _write_manifest(out_dir, config, summary, result.violations, files)


def _run_macro(config, out_dir, parallel):
    cell = build_cell(config)
    coeffs = build_coefficients(config)
    tensors = solve_tensors(config, cell, coeffs)
    write_tensors_csv(out_dir / "tensors.csv", tensors)
    files = ["tensors.csv", "diag.csv"]
    macro_cfg = build_macro_config(config, tensors)
    result = simulate_macro(macro_cfg)
    write_diag_csv(out_dir / "diag.csv", result.diagnostics)
    nodes = np.linspace(0.0, 1.0, macro_cfg.n + 1)
    x, y = np.meshgrid(nodes, nodes, indexing="ij")
    select = np.ones(x.size, dtype=bool)
    states = result.snapshots or [result.final_state]
    for state in states:
        name = _snapshot_name(state.t)
        write_snapshot_csv(out_dir / name, x, y, state.theta, state.u, select)
        files.append(name)
    summary = {"macro_n": macro_cfg.n, "n_steps": macro_cfg.n_steps,
               "final_t": result.final_state.t}
    return _write_manifest(out_dir, config, summary, result.violations, files)


def _interp_nodal(field, x, y, n):
    """Bilinear interpolation of a nodal field on the uniform n-cell grid."""
    fx = np.clip(x, 0.0, 1.0) * n
    fy = np.clip(y, 0.0, 1.0) * n
    ix = np.minimum(fx.astype(np.int64), n - 1)
    iy = np.minimum(fy.astype(np.int64), n - 1)
    tx = fx - ix
    ty = fy - iy
    return ((1 - tx) * (1 - ty) * field[ix, iy]
            + tx * (1 - ty) * field[ix + 1, iy]
            + (1 - tx) * ty * field[ix, iy + 1]
            + tx * ty * field[ix + 1, iy + 1])


def _converge_point(args):
    """One epsilon of the study: micro run + pore-masked L2 distance to the
    macro fields (module-level so process pools can pickle it)."""
    micro_cfg, macro_theta, macro_u, macro_n = args
    result = simulate_micro(micro_cfg)
    dom = micro_cfg.domain
    centers = (np.arange(dom.n) + 0.5) * dom.h
    x, y = np.meshgrid(centers, centers, indexing="ij")
    mask = dom.mask

    def l2(diff):
        return float(np.sqrt((diff[mask] ** 2).sum()) * dom.h)

    err = l2(result.final_state.theta - _interp_nodal(macro_theta, x, y,
                                                      macro_n))
    for i in range(macro_u.shape[0]):
        err += l2(result.final_state.u[i]
                  - _interp_nodal(macro_u[i], x, y, macro_n))
    return err


def _run_converge(config, out_dir, parallel):
    cell = build_cell(config)
    coeffs = build_coefficients(config)
    tensors = solve_tensors(config, cell, coeffs)
    write_tensors_csv(out_dir / "tensors.csv", tensors)

    macro_cfg = build_macro_config(config, tensors)
    macro_res = simulate_macro(macro_cfg)
    macro_theta = macro_res.final_state.theta
    macro_u = macro_res.final_state.u

    epsilons = sorted(config.solver.epsilons, reverse=True)
    tasks = [(build_micro_config(config, cell, coeffs, eps),
              macro_theta, macro_u, macro_cfg.n) for eps in epsilons]

    rows = []
    try:
        if parallel > 1:
            with ProcessPoolExecutor(max_workers=min(parallel,
                                                     len(tasks))) as pool:
                errors = pool.map(_converge_point, tasks)
                for eps, task, err in zip(epsilons, tasks, errors):
                    rows.append(_converge_row(eps, task[0], err, rows))
        else:
            for eps, task in zip(epsilons, tasks):
                rows.append(_converge_row(eps, task[0],
                                          _converge_point(task), rows))
    except (SolverError, InvariantViolation):
        # keep the partial table for the epsilons that did finish
        write_converge_csv(out_dir / "converge.csv", rows)
        raise
    write_converge_csv(out_dir / "converge.csv", rows)
    summary = {"macro_n": macro_cfg.n,
               "epsilons": [float(e) for e in epsilons],
               "errors": [r[3] for r in rows]}
    return _write_manifest(out_dir, config, summary, macro_res.violations,
                           ["tensors.csv", "converge.csv"])


def _converge_row(eps, micro_cfg, err, rows):
    ratio = rows[-1][3] / err if rows else None
    return (eps, micro_cfg.domain.ell, micro_cfg.domain.n, err, ratio)


_RUNNERS = {"cell": _run_cell, "micro": _run_micro, "macro": _run_macro,
            "converge": _run_converge}


def run(config, parallel=1):
    """Dispatch one validated configuration; returns the manifest dict.

    Raises ConfigError / GeometryError on bad inputs, SolverError on
    iteration failures, InvariantViolation in strict mode; the CLI maps
    these to exit codes 2 / 3 / 4.
    """
    out_dir = Path(config.out_dir) if config.out_dir is not None \
        else Path(config.output.directory)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _RUNNERS[config.mode](config, out_dir, parallel)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="perihom",
        description="Periodic-homogenization toolkit: cell problems, "
                    "pore-scale and upscaled runs, epsilon-convergence study.")
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True,
                        help="TOML run configuration")
    parser.add_argument("--out", default=None,
                        help="output directory (default: output.directory)")
    parser.add_argument("--strict", action="store_true",
                        help="abort on invariant violations (exit 4)")
    parser.add_argument("--parallel", type=int, default=1, metavar="N",
                        help="worker processes for converge mode")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, args.mode, out_dir=args.out,
                             strict=args.strict or None)
        manifest = run(config, parallel=max(1, args.parallel))
    except (ConfigError, GeometryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SolverError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 3
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 4
    n_out = len(manifest["outputs"]) + 1  # + manifest.json itself
    print(f"{args.mode}: wrote {n_out} files")
    return 0


if __name__ == "__main__":
    sys.exit(main())
