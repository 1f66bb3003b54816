"""Command-line entry point.

Configuration files are plain ``key = value`` lines grouped under
``[geometry]``, ``[pml]``, ``[problem]``, ``[study]`` and ``[output]``
headers, with ``#`` starting a comment.  Every key has a type and a default;
unknown keys, duplicates and out-of-range values are rejected at parse time.

Exit codes: 0 success, 2 invalid input (syntax, validation, missing file),
3 numerical failure.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import experiments as ex
from .forms import ProblemError, ProblemSpec, SolutionField, assemble, error_norms, make_space, mie_reference
from .mesh import GeometryError, GeometrySpec, build_mesh, write_vtk
from .pml import PmlProfileError, make_profile
from .solver import ConvergenceError, NotPositiveDefiniteError, SingularMatrixError

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
SUBCOMMANDS = ("solve", "convergence", "pollution", "threshold", "pml-width", "verify-abstract", "dump")


class ConfigError(ValueError):
    """Syntax or validation error in a configuration file."""


# ---------------------------------------------------------------------------
# schema

def _opt_float(s):
    return None if s.lower() == "none" else float(s)


def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _ints(s):
    return tuple(int(x) for x in s.split(",") if x.strip())


def _angle(s):
    """Float, also accepting ``pi``, ``pi/4``, ``0.25*pi`` style values."""
    t = s.replace(" ", "").lower()
    if "pi" not in t:
        return float(t)
    num, _, den = t.partition("/")
    num = num.replace("*pi", "").replace("pi", "")
    value = (float(num) if num else 1.0) * math.pi
    return value / float(den) if den else value


def _angles(s):
    return tuple(_angle(x) for x in s.split(",") if x.strip())


def _str(s):
    return s


LIST_PARSERS = (_floats, _ints, _angles)

# section -> key -> (parser, default); list keys may be left empty
SCHEMA = {
    "geometry": {
        "obstacle_kind": (_str, "disk-dirichlet"),
        "a": (float, 1.0),
        "r_in_outer": (_opt_float, None),
        "R_scat": (float, 1.25),
        "R_pml_minus": (float, 1.5),
        "R_pml_plus": (float, 3.5),
        "R_tr": (float, 2.0),
        "truncation_shape": (_str, "disk"),
    },
    "pml": {
        "theta": (_angle, math.pi / 4),
        "r_minus": (_opt_float, None),  # optional aliases of the [geometry] layer radii
        "r_plus": (_opt_float, None),
        "ell": (int, 2),
    },
    "problem": {
        "k": (float, 10.0),
        "p": (int, 1),
        "h": (float, 0.1),
        "truncation": (_str, "pml"),
        "obstacle_bc": (_str, "dirichlet"),
        "beta_jump": (float, 1.0),
        "a_in": (float, 1.0),
        "c_inv2_in": (float, 1.0),
        "data": (_str, "plane-wave"),
        "direction": (_floats, (1.0, 0.0)),
    },
    "study": {
        "kind": (_str, "pollution"),
        "k": (_floats, ()),
        "p": (_ints, ()),
        "h_rule": (_str, "hk"),
        "h": (_floats, ()),
        "c": (float, 0.4),
        "levels": (int, 4),
        "region": (_str, "physical"),
        "widths": (_floats, (0.1, 0.2, 0.4, 0.8)),
        "thetas": (_angles, (0.0, math.pi / 4)),
        "threshold": (float, 0.25),
        "solver": (_str, "auto"),
    },
    "output": {
        "csv": (_str, "results.csv"),
        "field": (_str, "field.vtk"),
    },
}


@dataclass
class Config:
    """Parsed and validated configuration (raw values plus the objects built from them)."""

    values: dict
    geometry: GeometrySpec = field(repr=False, default=None)

    def __getitem__(self, section):
        return self.values[section]

    def study_config(self, kind: str | None = None, seed: int = 0, jobs: int = 1) -> ex.StudyConfig:
        g, pm, pr, st = self["geometry"], self["pml"], self["problem"], self["study"]
        return ex.StudyConfig(
            kind=kind or st["kind"], geometry=self.geometry,
            k=st["k"] or (pr["k"],), p=st["p"] or (pr["p"],),
            h_rule=st["h_rule"], h=st["h"] or ((pr["h"],) if st["h_rule"] == "list" else ()), c=st["c"],
            levels=st["levels"], truncation=pr["truncation"], theta=pm["theta"], ell=pm["ell"],
            data=pr["data"], direction=tuple(pr["direction"]), obstacle_bc=pr["obstacle_bc"],
            beta_jump=pr["beta_jump"], a_in=pr["a_in"], c_inv2_in=pr["c_inv2_in"], region=st["region"],
            widths=st["widths"], thetas=st["thetas"], threshold=st["threshold"], solver=st["solver"],
            seed=seed, jobs=jobs,
        )


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: Config) -> str:
    """Canonical text of a configuration: every key, schema order, no comments."""
    lines = []
    for section, keys in SCHEMA.items():
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        lines += [f"{key} = {_format(cfg.values[section][key])}" for key in keys]
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> Config:
    """Parse and validate configuration text (see module docstring for the format)."""
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    seen = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        col = raw.index(line[0]) + 1
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"line {lineno}, column {col}: unterminated section header")
            name = line[1:-1].strip()
            if name not in SCHEMA:
                raise ConfigError(f"line {lineno}, column {col + 1}: unknown section [{name}]")
            section = name
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}, column {col}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"line {lineno}, column {col}: key outside of any [section]")
        key, _, value = (part.strip() for part in line.partition("="))
        if not key:
            raise ConfigError(f"line {lineno}, column {col}: missing key before '='")
        if key not in SCHEMA[section]:
            raise ConfigError(f"line {lineno}, column {col}: unknown key {key!r} in [{section}]")
        if (section, key) in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} in [{section}] "
                              f"(first set on line {seen[section, key]})")
        seen[section, key] = lineno
        parser = SCHEMA[section][key][0]
        after = raw[raw.index("=") + 1:]
        vcol = raw.index("=") + 2 + len(after) - len(after.lstrip())
        if not value and parser not in LIST_PARSERS:
            raise ConfigError(f"line {lineno}, column {vcol}: missing value for {key!r}")
        try:
            values[section][key] = parser(value)
        except ValueError:
            raise ConfigError(f"line {lineno}, column {vcol}: invalid value {value!r} for {key!r}") from None
    return validate(values, set(seen))


LAYER_ALIASES = (("r_minus", "R_pml_minus"), ("r_plus", "R_pml_plus"))


def validate(values: dict, explicit=frozenset()) -> Config:
    """Re-check every invariant of the objects the configuration describes.

    ``explicit`` holds the ``(section, key)`` pairs set in the text; it is
    used to detect a ``[pml]`` layer radius contradicting ``[geometry]``.
    """
    g = values["geometry"]
    for alias, key in LAYER_ALIASES:
        r = values["pml"][alias]
        if r is None:
            continue
        if ("geometry", key) in explicit and g[key] != r:
            raise ConfigError(f"[pml] {alias} = {r!r} contradicts [geometry] {key} = {g[key]!r}")
        g[key] = r
    try:
        geom = GeometrySpec(**g)
    except GeometryError as exc:
        raise ConfigError(f"[geometry] GeometrySpec invariant violated: {exc}") from None
    pm, pr, st = values["pml"], values["problem"], values["study"]
    if pr["truncation"] == "pml":
        try:
            make_profile(pm["theta"], geom.R_pml_minus, geom.R_pml_plus, pm["ell"])
        except PmlProfileError as exc:
            raise ConfigError(f"[pml] PmlProfile invariant violated: {exc}") from None
    if pr["data"] not in ("plane-wave", "manufactured"):
        raise ConfigError("[problem] data must be 'plane-wave' or 'manufactured'")
    if len(pr["direction"]) != 2 or not np.hypot(*pr["direction"]) > 0:
        raise ConfigError("[problem] direction must be a nonzero 2-vector")
    if not pr["h"] > 0:
        raise ConfigError("[problem] h must be positive")
    try:
        ProblemSpec(k=pr["k"], p=pr["p"], truncation=pr["truncation"], obstacle_bc=pr["obstacle_bc"],
                    beta_jump=pr["beta_jump"])
    except ProblemError as exc:
        raise ConfigError(f"[problem] ProblemSpec invariant violated: {exc}") from None
    cfg = Config(values, geom)
    try:
        cfg.study_config()
        ex.make_problem(cfg.study_config(), pr["k"], pr["p"])
    except ex.StudyError as exc:
        raise ConfigError(f"[study] StudyConfig invariant violated: {exc}") from None
    except (ProblemError, PmlProfileError) as exc:
        raise ConfigError(f"[problem] ProblemSpec invariant violated: {exc}") from None
    if st["kind"] not in ex.STUDY_KINDS:
        raise ConfigError(f"[study] unknown kind {st['kind']!r}")
    return cfg


def load_config(path) -> Config:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {p}: {exc.strerror or exc}") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config file {p} is not valid UTF-8") from None
    return parse_config(text)


# ---------------------------------------------------------------------------
# commands

def cmd_solve(cfg: Config, args) -> int:
    pr = cfg["problem"]
    scfg = cfg.study_config(seed=args.seed)
    problem = ex.make_problem(scfg, pr["k"], pr["p"])
    mesh = build_mesh(cfg.geometry, pr["h"])
    space = make_space(problem, mesh)
    bundle = assemble(problem, space)
    sol = SolutionField(space, problem, space.expand(bundle.solve(), bundle.u_dirichlet))
    kind = ex.reference_kind(scfg)
    ref = {"mie": lambda: mie_reference(problem, mesh), "manufactured": lambda: problem.data.field}.get(kind)
    e = error_norms(sol, ref() if ref else None, scfg.region)
    print(f"k = {pr['k']!r}  p = {pr['p']}  h_max = {mesh.h_max!r}  dofs = {space.n}")
    if ref:
        print(f"reference = {kind}")
        print(f"err_L2 = {e[0]!r}\nerr_H1k = {e[1]!r}\nrel_H1k = {e[1] / e[3]!r}")
    else:
        print(f"norm_L2 = {e[0]!r}\nnorm_H1k = {e[1]!r}")
    path = args.field or cfg["output"]["field"]
    u = sol.coeffs[: mesh.n_vertices]
    write_vtk(mesh, path, {"u_re": u.real, "u_im": u.imag, "u_abs": np.abs(u)})
    print(f"field written to {path}")
    return EXIT_OK


def cmd_study(cfg: Config, args, kind: str) -> int:
    scfg = cfg.study_config(kind=kind, seed=args.seed, jobs=args.jobs)
    result = ex.run_study(scfg)
    path = args.out or cfg["output"]["csv"]
    ex.write_csv(result.records, path)
    for key, summ in result.summary.items():
        items = ", ".join(f"{k} = {_short(v)}" for k, v in summ.items())
        print(f"{kind} {key}: {items}")
    print(f"{len(result.records)} records written to {path}")
    return EXIT_OK


def _short(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_short(x) for x in v) + "]"
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hplab", description="Helmholtz FEM with PML: solves and scaling studies")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="configuration file")
        sp.add_argument("--seed", type=int, default=0, help="seed for power-iteration start vectors")
        sp.add_argument("--jobs", type=int, default=None, help="worker processes (default: $HPL_JOBS or 1)")
        sp.add_argument("--out", default=None, help="CSV path (overrides [output] csv)")
        if name == "solve":
            sp.add_argument("--field", default=None, help="VTK path (overrides [output] field)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INVALID if exc.code else EXIT_OK
    if args.jobs is None:
        args.jobs = ex.default_jobs()
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args.config)
        if args.command == "dump":
            sys.stdout.write(dump_config(cfg))
            return EXIT_OK
        if args.command == "solve":
            return cmd_solve(cfg, args)
        kind = "abstract-verify" if args.command == "verify-abstract" else args.command
        return cmd_study(cfg, args, kind)
    except (ConfigError, ex.StudyError, ProblemError, GeometryError, PmlProfileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ex.CellError, ArithmeticError, np.linalg.LinAlgError, ConvergenceError, NotPositiveDefiniteError,
            SingularMatrixError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
