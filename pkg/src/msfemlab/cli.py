"""Command-line front end.

    msfemlab <command> [--config FILE] [--key value]... [--full-scale]

Configuration files hold one ``key = value`` pair per line; ``#`` starts a
comment. Flags override file values. Exit codes: 0 success, 1 numerical
failure (or an identity above its threshold), 2 usage error.
"""

from __future__ import annotations

import argparse
import ast
import csv
import logging
import math
import operator
import os
import sys
import warnings
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from msfemlab.analysis import (
    CSV_COLUMNS,
    compare_configuration,
    gap_sweep,
    homogenization_check,
    identity_failures,
    identity_report,
)
from msfemlab.errors import InvalidArgumentError, NumericError, ResolutionWarning, SolverFailure
from msfemlab.fem import QUADRATURE_RULES, CoefficientField, SolverSettings, SourceField
from msfemlab.mesh import build_global_fine, build_structured_coarse
from msfemlab.offline import run_offline
from msfemlab.solvers import (
    solve_msfem_galerkin,
    solve_msfem_pg,
    solve_nonintrusive,
    solve_reference,
)

logger = logging.getLogger("msfemlab")

COMMANDS = ("solve", "compare", "converge", "homog-check", "identities")
COEFFICIENTS = ("paper-periodic", "layered", "constant-scalar", "constant-matrix")
SOURCES = ("paper-source", "constant", "manufactured")
SOLVE_VARIANTS = ("nonintrusive", "galerkin", "petrov-galerkin", "reference", "all")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    command: str = "solve"
    coefficient: str = "paper-periodic"
    epsilon: float = math.pi / 50
    amplitude: float = 100.0
    a_minus: float = 1.0
    a_plus: float = 4.0
    c: float = 1.0
    matrix: tuple = (1.0, 0.0, 0.0, 1.0)
    source: str = "paper-source"
    source_c: float = 1.0
    source_k: int = 1
    n: int = 8
    r: int | None = None
    n_ref: int = 256
    n_list: tuple = (4, 8, 16, 32)
    eps_ratios: tuple = (8, 16, 32)
    variant: str = "nonintrusive"
    solver: str = "direct"
    tol: float = 1e-12
    maxit: int | None = None
    quad: str = "edge-midpoint"
    output_dir: str = "out"
    seed: int = 0
    workers: int = 1
    full_scale: bool = False

    def coefficient_field(self):
        if self.coefficient == "paper-periodic":
            return CoefficientField.paper_periodic(self.epsilon, self.amplitude)
        if self.coefficient == "layered":
            return CoefficientField.layered(self.epsilon, self.a_minus, self.a_plus)
        if self.coefficient == "constant-scalar":
            return CoefficientField.constant_scalar(self.c)
        return CoefficientField.constant_matrix(np.reshape(self.matrix, (2, 2)))

    def source_field(self):
        if self.source == "paper-source":
            return SourceField.paper_source()
        if self.source == "constant":
            return SourceField.constant(self.source_c)
        return SourceField.manufactured(self.source_k)

    @property
    def settings(self):
        return SolverSettings(self.solver, self.tol, self.maxit)

    @property
    def quadrature(self):
        return QUADRATURE_RULES[self.quad]

    def level(self, n=None):
        """Local refinement level; by default the one reaching the reference spacing."""
        n = self.n if n is None else n
        if self.r is not None:
            return self.r
        q = self.n_ref // n
        if self.n_ref % n or q & (q - 1):
            raise UsageError(f"r: n={n} does not divide n_ref={self.n_ref} by a power of two; set r explicitly")
        return q.bit_length() - 1


_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv}


def _arith(node):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return float(node.value)
    if isinstance(node, ast.Name) and node.id == "pi":
        return math.pi
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        v = _arith(node.operand)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return _BINOPS[type(node.op)](_arith(node.left), _arith(node.right))
    raise ValueError("unsupported expression")


def _number(text):
    """Float, optionally written as arithmetic on numbers and ``pi`` (e.g. ``pi/50``)."""
    return _arith(ast.parse(text.strip(), mode="eval").body)


def _int(text):
    v = _number(text)
    if v != int(v):
        raise ValueError(text)
    return int(v)


def _opt_int(text):
    return None if text.strip().lower() in ("", "none", "auto") else _int(text)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _choice(options):
    def conv(text):
        if text.strip() not in options:
            raise ValueError(text)
        return text.strip()

    conv.options = options
    return conv


def _list(conv):
    return lambda text: tuple(conv(t) for t in text.split(",") if t.strip())


CONVERTERS = {
    "coefficient": _choice(COEFFICIENTS),
    "epsilon": _number,
    "amplitude": _number,
    "a_minus": _number,
    "a_plus": _number,
    "c": _number,
    "matrix": _list(_number),
    "source": _choice(SOURCES),
    "source_c": _number,
    "source_k": _int,
    "n": _int,
    "r": _opt_int,
    "n_ref": _int,
    "n_list": _list(_int),
    "eps_ratios": _list(_number),
    "variant": _choice(SOLVE_VARIANTS),
    "solver": _choice(("direct", "cg", "auto")),
    "tol": _number,
    "maxit": _opt_int,
    "quad": _choice(tuple(QUADRATURE_RULES)),
    "output_dir": str,
    "seed": _int,
    "workers": _int,
    "full_scale": _bool,
}

HELP = {
    "coefficient": "coefficient catalog entry",
    "epsilon": "oscillation period; accepts arithmetic with pi, e.g. pi/50",
    "amplitude": "paper-periodic contrast amplitude",
    "a_minus": "layered: value on [0, eps/2)",
    "a_plus": "layered: value on [eps/2, eps)",
    "c": "constant-scalar value",
    "matrix": "constant-matrix entries a11,a12,a21,a22",
    "source": "right-hand side catalog entry",
    "source_c": "constant source value",
    "source_k": "manufactured source wave number",
    "n": "coarse divisions per side (H = 1/n)",
    "r": "local red-refinement level; 'auto' refines down to 1/n_ref",
    "n_ref": "reference mesh divisions per side",
    "n_list": "converge: coarse divisions to sweep",
    "eps_ratios": "homog-check: H/eps values",
    "variant": "solve: which solution path(s) to write",
    "solver": "linear solver",
    "tol": "cg relative residual tolerance",
    "maxit": "cg iteration cap",
    "quad": "quadrature rule on triangles",
    "output_dir": "directory for output files",
    "seed": "seed for randomized bound probes",
    "workers": "threads for the offline phase (env MSFEMLAB_WORKERS)",
    "full_scale": "use eps = pi/150 and reference divisions 1024",
}

COMMAND_DEFAULTS = {"homog-check": {"n": 4, "coefficient": "layered"}}
FULL_SCALE = {"epsilon": math.pi / 150, "n_ref": 1024}


def _convert(key, text):
    try:
        return CONVERTERS[key](text)
    except (ValueError, SyntaxError, ZeroDivisionError, TypeError) as exc:
        raise UsageError(f"{key}: invalid value {text!r}") from exc


def read_config_file(path):
    """Parse a key=value file into raw strings, rejecting unknown keys."""
    values = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"config: cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config: line {lineno} is not key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in CONVERTERS:
            raise UsageError(f"{key}: unknown configuration key")
        values[key] = value
    return values


def build_parser():
    defaults = RunConfig()
    p = argparse.ArgumentParser(
        prog="msfemlab",
        description="Multiscale finite element laboratory (intrusive and non-intrusive MsFEM).",
        epilog="Flags override values read from --config. Exit codes: 0 ok, 1 numerical failure, 2 usage error.",
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", metavar="FILE", help="key=value configuration file")
    p.add_argument("--full-scale", action="store_true", default=None, dest="full_scale", help=HELP["full_scale"])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    for key in CONVERTERS:
        if key == "full_scale":
            continue
        default = getattr(defaults, key)
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        names = {f"--{key}", f"--{key.replace('_', '-')}"}
        p.add_argument(*sorted(names), dest=key, default=None, metavar="VALUE", help=f"{HELP[key]} (default: {default})")
    return p


def _validate(cfg):
    if not cfg.epsilon > 0:
        raise UsageError("epsilon: must be positive")
    if cfg.n < 2:
        raise UsageError("n: must be at least 2")
    if cfg.r is not None and cfg.r < 0:
        raise UsageError("r: must be non-negative")
    if cfg.n_ref < 2:
        raise UsageError("n_ref: must be at least 2")
    if any(k < 2 for k in cfg.n_list):
        raise UsageError("n_list: entries must be at least 2")
    if not cfg.eps_ratios or any(q <= 0 for q in cfg.eps_ratios):
        raise UsageError("eps_ratios: must be positive")
    if not cfg.tol > 0:
        raise UsageError("tol: must be positive")
    if cfg.workers < 1:
        raise UsageError("workers: must be at least 1")
    if len(cfg.matrix) != 4:
        raise UsageError("matrix: needs four entries")
    try:
        coeff = cfg.coefficient_field()
    except InvalidArgumentError as exc:
        raise UsageError(f"{_coeff_key(cfg)}: {exc}") from exc
    m, M = coeff.bounds
    if not 0 < m <= M:
        raise UsageError(f"{_coeff_key(cfg)}: bounds m={m}, M={M} violate 0 < m <= M")
    if cfg.command in ("solve", "compare", "identities") and coeff.epsilon:
        h = 1.0 / (cfg.n * 2 ** cfg.level())
        if h > coeff.epsilon / 4:
            warnings.warn(f"h={h:.4g} > eps/4={coeff.epsilon / 4:.4g}", ResolutionWarning, stacklevel=2)


def _coeff_key(cfg):
    return {"paper-periodic": "amplitude", "layered": "a_minus", "constant-scalar": "c"}.get(cfg.coefficient, "matrix")


def parse_config(argv=None, env=None):
    """Build a RunConfig from command-line arguments, a config file and the environment."""
    env = os.environ if env is None else env
    args = build_parser().parse_args(argv)
    raw = {}
    if args.config:
        raw.update(read_config_file(args.config))
    for key in CONVERTERS:
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value if isinstance(value, str) else str(value)
    if "workers" not in raw and env.get("MSFEMLAB_WORKERS"):
        raw["workers"] = env["MSFEMLAB_WORKERS"]
    values = {k: _convert(k, v) for k, v in raw.items()}
    base = dict(COMMAND_DEFAULTS.get(args.command, {}))
    if values.get("full_scale"):
        base.update(FULL_SCALE)
    base.update(values)
    cfg = replace(RunConfig(), command=args.command, **base)
    _validate(cfg)
    return cfg


def fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.17g}"


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def write_tensors(path, tensors):
    rows = ([K, *T.ravel()] for K, T in enumerate(tensors.values))
    write_csv(path, ("element_id", "a11", "a12", "a21", "a22"), rows)


def write_solution(path, u):
    v = u.mesh.vertices
    write_csv(path, ("vertex_id", "x", "y", "value"), ([i, *v[i], u.values[i]] for i in range(len(v))))


def write_errors(path, rows):
    write_csv(path, CSV_COLUMNS, ([getattr(r, f.name) for f in fields(r)] for r in rows))


def write_report(path, report):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, v in report.items():
            fh.write(f"{k} = {fmt(v)}\n")


def _run_solve(cfg, out):
    coeff, f, r = cfg.coefficient_field(), cfg.source_field(), cfg.level()
    mesh = build_structured_coarse(cfg.n)
    variants = SOLVE_VARIANTS[:-1] if cfg.variant == "all" else (cfg.variant,)
    need_basis = any(v in ("galerkin", "petrov-galerkin") for v in variants)
    off = run_offline(mesh, coeff, r, cfg.quadrature, with_basis=need_basis, workers=cfg.workers, settings=cfg.settings)
    write_tensors(out / "tensors.csv", off.tensors)
    paths = {
        "nonintrusive": solve_nonintrusive,
        "galerkin": solve_msfem_galerkin,
        "petrov-galerkin": solve_msfem_pg,
    }
    for v in variants:
        if v == "reference":
            u = solve_reference(off.global_fine, coeff, f, cfg.quadrature, cfg.settings)
        else:
            u = paths[v](mesh, coeff, f, r, offline=off, quad=cfg.quadrature, settings=cfg.settings).fine
        write_solution(out / f"solution_{v}.csv", u)
        print(f"{v}: {u.mesh.n_vertices} fine vertices written")
    return 0


def _run_compare(cfg, out):
    coeff, f = cfg.coefficient_field(), cfg.source_field()
    try:
        row, sols = compare_configuration(
            coeff, f, cfg.n, cfg.level(), cfg.n_ref, quad=cfg.quadrature, settings=cfg.settings, workers=cfg.workers
        )
    except InvalidArgumentError as exc:
        raise UsageError(f"n_ref: {exc}") from exc
    write_errors(out / "errors.csv", [row])
    write_tensors(out / "tensors.csv", sols["offline"].tensors)
    for name, value in zip(CSV_COLUMNS, (getattr(row, f.name) for f in fields(row))):
        print(f"{name} = {fmt(value)}")
    return 0


def _run_converge(cfg, out):
    coeff, f = cfg.coefficient_field(), cfg.source_field()
    r_rule = None if cfg.r is None else (lambda n: cfg.r)
    try:
        report = gap_sweep(
            coeff, f, [1.0 / n for n in cfg.n_list], cfg.n_ref, r_rule,
            quad=cfg.quadrature, settings=cfg.settings, workers=cfg.workers,
        )
    except InvalidArgumentError as exc:
        raise UsageError(f"n_list: {exc}") from exc
    write_errors(out / "errors.csv", report.rows)
    for name, slope in report.fitted_slopes.items():
        print(f"slope_{name} = {fmt(slope)}")
    return 0


def _run_homog(cfg, out):
    H = 1.0 / cfg.n
    rows = homogenization_check(
        cfg.a_minus, cfg.a_plus, [H / q for q in cfg.eps_ratios], n=cfg.n,
        quad=QUADRATURE_RULES["gauss3"] if cfg.quad == "edge-midpoint" else cfg.quadrature,
        workers=cfg.workers,
    )
    header = list(rows[0])
    write_csv(out / "homogenization.csv", header, ([row[k] for k in header] for row in rows))
    print(",".join(header))
    for row in rows:
        print(",".join(fmt(row[k]) for k in header))
    return 0


def _run_identities(cfg, out):
    mesh = build_structured_coarse(cfg.n)
    report = identity_report(
        mesh, cfg.coefficient_field(), cfg.level(), cfg.source_field(), cfg.quadrature, cfg.workers, cfg.seed
    )
    write_report(out / "identities.txt", report)
    bad = identity_failures(report)
    for k, v in report.items():
        print(f"{k} = {fmt(v)}")
    if bad:
        print("identity thresholds exceeded: " + ", ".join(bad), file=sys.stderr)
        return 1
    return 0


RUNNERS = {
    "solve": _run_solve,
    "compare": _run_compare,
    "converge": _run_converge,
    "homog-check": _run_homog,
    "identities": _run_identities,
}


def run(cfg):
    """Execute a validated configuration; returns the process exit code."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with warnings.catch_warnings():
            # already reported once by parse_config
            warnings.simplefilter("ignore", ResolutionWarning)
            return RUNNERS[cfg.command](cfg, out)
    except UsageError as exc:
        print(f"msfemlab: error: {exc}", file=sys.stderr)
        return 2
    except (SolverFailure, NumericError) as exc:
        print(f"msfemlab: numerical failure: {exc}", file=sys.stderr)
        return 1


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = parse_config(argv)
    except UsageError as exc:
        print(f"msfemlab: error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
