"""Scripted studies: convergence ladders, pollution curves, threshold maps,
PML-width sweeps and measured constants.

Every study returns a ``StudyResult`` holding one ``StudyRecord`` per solved
(k, h, p) cell, in deterministic sweep order, plus fitted summary numbers.
Plane-wave scattering by a sound-soft disk inside a disk-truncated domain is
solved with the exact rotational (Fourier-in-angle) decomposition, which
makes large wavenumbers affordable; everything else uses the sparse direct
solver on the full mesh.
"""

from __future__ import annotations

import csv
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .forms import (Manufactured, PlaneWaveScattering, ProblemSpec, SolutionField, assemble, error_norms,
                    gram_matrices, make_space, mie_reference)
from .mesh import GeometrySpec, Mesh, build_mesh, build_sector, hierarchy
from .pml import make_profile
from .reference import sine_plane_wave
from .rotational import build_sector_system, rotational_error_norms, solve_rotational

CSV_HEADER = "study,k,h,p,dofs,truncation,ref_kind,err_L2,err_H1k,rel_H1k,csol,eta,c_tilde,wall_ms"
STUDY_KINDS = ("convergence", "pollution", "threshold", "pml-width", "abstract-verify")
H_RULES = ("list", "hk", "hk2pk")
NAN = float("nan")


class StudyError(ValueError):
    """Invalid study configuration."""


class CellError(RuntimeError):
    """A (k, h, p) cell failed; the message identifies the cell."""


# ---------------------------------------------------------------------------
# configuration and records


@dataclass(frozen=True)
class StudyConfig:
    """Everything a study needs.

    ``h_rule`` selects the mesh sizes: ``'list'`` uses ``h`` verbatim (the
    first entry starts the ladder for convergence studies), ``'hk'`` keeps
    ``h k = c`` and ``'hk2pk'`` keeps ``(h k)^(2p) k = c``.
    """

    kind: str = "pollution"
    geometry: GeometrySpec = field(default_factory=GeometrySpec)
    k: tuple = (10.0,)
    p: tuple = (1,)
    h_rule: str = "hk"
    h: tuple = ()
    c: float = 0.4
    levels: int = 4
    truncation: str = "pml"
    theta: float = math.pi / 4
    ell: int = 2
    data: str = "plane-wave"
    direction: tuple = (1.0, 0.0)
    obstacle_bc: str = "dirichlet"
    beta_jump: float = 1.0
    a_in: float = 1.0
    c_inv2_in: float = 1.0
    region: str = "physical"
    widths: tuple = (0.1, 0.2, 0.4, 0.8)
    thetas: tuple = (0.0, math.pi / 4)
    threshold: float = 0.25
    solver: str = "auto"
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.kind not in STUDY_KINDS:
            raise StudyError(f"unknown study kind {self.kind!r}; expected one of {', '.join(STUDY_KINDS)}")
        if self.h_rule not in H_RULES:
            raise StudyError(f"unknown h rule {self.h_rule!r}; expected one of {', '.join(H_RULES)}")
        if not self.k or not self.p:
            raise StudyError("k and p sweeps must be nonempty")
        if any(not kk > 0 for kk in self.k):
            raise StudyError("wavenumbers must be positive")
        if self.h_rule == "list" and not self.h:
            raise StudyError("h rule 'list' needs explicit h values")
        if self.h_rule != "list" and not self.c > 0:
            raise StudyError("h rule constant c must be positive")
        if self.kind == "convergence" and self.levels < 3 and not (self.h_rule == "list" and len(self.h) >= 3):
            raise StudyError("a convergence ladder needs at least 3 levels")
        if self.data not in ("plane-wave", "manufactured"):
            raise StudyError("data must be 'plane-wave' or 'manufactured'")
        if self.solver not in ("auto", "sparse", "rotational"):
            raise StudyError("solver must be 'auto', 'sparse' or 'rotational'")
        if not 0 < self.threshold < 1:
            raise StudyError("threshold must lie in (0, 1)")

    def h_for(self, k: float, p: int) -> float:
        if self.h_rule == "list":
            return float(self.h[0])
        if self.h_rule == "hk":
            return self.c / k
        return (self.c / k) ** (1.0 / (2 * p)) / k


@dataclass
class StudyRecord:
    study: str
    k: float
    h: float
    p: int
    dofs: int
    truncation: str
    ref_kind: str
    err_L2: float = NAN
    err_H1k: float = NAN
    rel_H1k: float = NAN
    csol: float = NAN
    eta: float = NAN
    c_tilde: float = NAN
    wall_ms: float = NAN
    rel_L2: float = field(default=NAN, repr=False)  # not a CSV column

    def row(self) -> list:
        return [self.study, _fmt(self.k), _fmt(self.h), str(self.p), str(self.dofs), self.truncation,
                self.ref_kind, _fmt(self.err_L2), _fmt(self.err_H1k), _fmt(self.rel_H1k), _fmt(self.csol),
                _fmt(self.eta), _fmt(self.c_tilde), f"{self.wall_ms:.0f}" if math.isfinite(self.wall_ms) else "nan"]


@dataclass
class StudyResult:
    records: list
    summary: dict = field(default_factory=dict)


def _fmt(x) -> str:
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def write_csv(records, path) -> None:
    """Write records under the fixed header (deterministic apart from ``wall_ms``)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER.split(","))
        for r in records:
            w.writerow(r.row())


def fit_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) < 2:
        raise StudyError("need at least two points for a slope")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


# ---------------------------------------------------------------------------
# single cells


def make_problem(cfg: StudyConfig, k: float, p: int, geom: GeometrySpec | None = None,
                 theta: float | None = None, outer_trace: bool = False) -> ProblemSpec:
    geom = geom or cfg.geometry
    theta = cfg.theta if theta is None else theta
    pml = None
    if cfg.truncation == "pml":
        pml = make_profile(theta, geom.R_pml_minus, geom.R_pml_plus, cfg.ell)
    if cfg.data == "plane-wave":
        data = PlaneWaveScattering(tuple(cfg.direction), outer_trace=outer_trace)
    else:
        data = Manufactured(sine_plane_wave(k, geom.R_tr, tuple(cfg.direction)))
    return ProblemSpec(k=float(k), p=int(p), truncation=cfg.truncation, pml=pml, obstacle_bc=cfg.obstacle_bc,
                       beta_jump=cfg.beta_jump, a_in=cfg.a_in, c_inv2_in=cfg.c_inv2_in, data=data)


def reference_kind(cfg: StudyConfig, geom: GeometrySpec | None = None) -> str:
    geom = geom or cfg.geometry
    if cfg.data == "manufactured":
        return "manufactured"
    if geom.obstacle_kind == "disk-dirichlet" and cfg.beta_jump == 1.0:
        return "mie"
    return "self"


def _use_rotational(cfg: StudyConfig, geom: GeometrySpec) -> bool:
    ok = (cfg.data == "plane-wave" and geom.obstacle_kind == "disk-dirichlet" and geom.truncation_shape == "disk"
          and cfg.obstacle_bc == "dirichlet")
    if cfg.solver == "rotational" and not ok:
        raise StudyError("the rotational solver needs plane-wave scattering by a sound-soft disk with disk truncation")
    return ok and cfg.solver != "sparse"


def run_cell(cfg: StudyConfig, study: str, k: float, p: int, h: float, geom: GeometrySpec | None = None,
             theta: float | None = None, n_theta: int | None = None, outer_trace: bool = False) -> StudyRecord:
    """Solve one cell and measure its error against the study's reference."""
    geom = geom or cfg.geometry
    t0 = time.perf_counter()
    try:
        problem = make_problem(cfg, k, p, geom, theta, outer_trace)
        ref_kind = reference_kind(cfg, geom)
        region = cfg.region
        if ref_kind == "manufactured" and region == "physical" and not geom.has_obstacle:
            region = "all"
        if _use_rotational(cfg, geom):
            mesh = build_sector(geom, h, n_theta)
            system = build_sector_system(problem, mesh)
            sol = solve_rotational(problem, mesh, system)
            e = rotational_error_norms(sol, region)
            dofs = system.n
        elif ref_kind == "self":
            mesh, e, dofs = _self_referenced(cfg, problem, geom, h, n_theta, region)
        else:
            mesh = build_mesh(geom, h, n_theta)
            space = make_space(problem, mesh)
            bundle = assemble(problem, space)
            sol = SolutionField(space, problem, space.expand(bundle.solve(), bundle.u_dirichlet))
            ref = mie_reference(problem, mesh) if ref_kind == "mie" else problem.data.field
            e = error_norms(sol, ref, region)
            dofs = space.n
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        raise CellError(f"cell (study={study}, k={k}, h={h}, p={p}) failed: {exc}") from exc
    wall = (time.perf_counter() - t0) * 1e3
    err_l2, err_h1k, ref_l2, ref_h1k = e
    return StudyRecord(study, float(k), float(mesh.h_max), int(p), int(dofs), cfg.truncation, ref_kind,
                       err_l2, err_h1k, err_h1k / ref_h1k if ref_h1k > 0 else NAN, wall_ms=wall,
                       rel_L2=err_l2 / ref_l2 if ref_l2 > 0 else NAN)


def _self_referenced(cfg, problem, geom, h, n_theta, region):
    """Compare with the solution on two further (straight) uniform refinements."""
    from .verify import prolongation  # local import: verify depends on forms only

    meshes = hierarchy(build_mesh(geom, h, n_theta), 2)
    coarse = make_space(problem, meshes[0])
    fine = make_space(problem, meshes[-1])
    uc = _solve_all(problem, coarse)
    uf = _solve_all(problem, fine)
    P = prolongation(coarse, fine, free=False)
    M, K = gram_matrices(fine, region, problem.beta_jump)
    d = uf - P @ uc
    k = problem.k

    def norms(v):
        m = float(np.real(np.vdot(v, M @ v)))
        s = float(np.real(np.vdot(v, K @ v)))
        return math.sqrt(max(m, 0.0)), math.sqrt(max(s / k**2 + m, 0.0))

    e0, e1 = norms(d)
    r0, r1 = norms(uf)
    return meshes[0], (e0, e1, r0, r1), coarse.n


def _solve_all(problem, space):
    bundle = assemble(problem, space)
    return space.expand(bundle.solve(), bundle.u_dirichlet)


def _map(fn, items, jobs: int):
    """``[fn(*it) for it in items]``, optionally in worker processes (order preserved)."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futs = [ex.submit(fn, *it) for it in items]
        return [f.result() for f in futs]


# ---------------------------------------------------------------------------
# studies


def run_convergence(cfg: StudyConfig) -> StudyResult:
    """Refinement ladders per (k, p) with fitted log-log slopes of both error norms."""
    cells = []
    for p in cfg.p:
        for k in cfg.k:
            if cfg.h_rule == "list" and len(cfg.h) >= 3:
                hs = [float(x) for x in cfg.h]
            else:
                h0 = cfg.h_for(k, p)
                hs = [h0 / 2**j for j in range(cfg.levels)]
            cells += [(cfg, "convergence", k, p, h) for h in hs]
    records = _map(run_cell, cells, cfg.jobs)
    summary = {}
    for p in cfg.p:
        for k in cfg.k:
            rs = [r for r in records if r.p == p and r.k == k]
            hs = [r.h for r in rs]
            summary[(k, p)] = {
                "slope_H1k": fit_slope(hs, [r.err_H1k for r in rs]),
                "slope_L2": fit_slope(hs, [r.err_L2 for r in rs]),
            }
    return StudyResult(records, summary)


def run_pollution(cfg: StudyConfig) -> StudyResult:
    """Relative ``H^1_k`` error against ``k`` under an ``hk`` or ``(hk)^(2p) k`` rule."""
    if cfg.h_rule == "list":
        raise StudyError("pollution studies need the h rule 'hk' or 'hk2pk'")
    cells = [(cfg, "pollution", k, p, cfg.h_for(k, p)) for p in cfg.p for k in cfg.k]
    records = _map(run_cell, cells, cfg.jobs)
    summary = {}
    for p in cfg.p:
        rs = [r for r in records if r.p == p]
        errs = [r.rel_H1k for r in rs]
        summary[p] = {
            "slope": fit_slope([r.k for r in rs], errs) if len(rs) > 1 else NAN,
            "max_over_min": max(errs) / min(errs),
        }
    return StudyResult(records, summary)


def run_pml_width(cfg: StudyConfig) -> StudyResult:
    """Error inside ``|x| < R_pml_minus`` as the layer ``R_tr - R_pml_minus`` widens.

    For each width ``W`` the truncation radius is ``R_pml_minus + W`` and the
    ramp ends there (``R_pml_plus = R_tr``).  The angular resolution is held
    fixed so the mesh inside the layer onset is the same for every width.
    A reference run with the exact scattered field imposed on the outer
    boundary (no layer) gives the discretization floor.
    """
    g = cfg.geometry
    widths = sorted(float(w) for w in cfg.widths)
    if len(widths) < 2:
        raise StudyError("need at least two widths")
    records, summary = [], {}
    for p in cfg.p:
        for k in cfg.k:
            h = cfg.h_for(k, p)
            wide = replace(g, R_tr=g.R_pml_minus + widths[-1], R_pml_plus=g.R_pml_minus + widths[-1])
            n_theta = _angular_divisions(wide, h, cfg)
            floor_cell = (cfg, "pml-width", k, p, h, wide, 0.0, n_theta, True)
            cells = [floor_cell]
            for theta in cfg.thetas:
                for w in widths:
                    gw = replace(g, R_tr=g.R_pml_minus + w, R_pml_plus=g.R_pml_minus + w)
                    cells.append((cfg, "pml-width", k, p, h, gw, theta, n_theta, False))
            out = _map(run_cell, cells, cfg.jobs)
            floor = out[0].rel_H1k
            records += out
            for i, theta in enumerate(cfg.thetas):
                errs = [r.rel_H1k for r in out[1 + i * len(widths): 1 + (i + 1) * len(widths)]]
                summary[(k, p, theta)] = {"widths": widths, "errors": errs, "floor": floor,
                                          "ratios": [b / a for a, b in zip(errs, errs[1:])]}
    return StudyResult(records, summary)


def _angular_divisions(geom: GeometrySpec, h: float, cfg: StudyConfig) -> int:
    """Number of angular cells the widest configuration would use at this ``h``."""
    mesh = build_sector(geom, h) if _use_rotational(cfg, geom) else build_mesh(geom, h)
    return 2 * mesh.symmetry if mesh.symmetry else None


def threshold_h(cfg: StudyConfig, k: float, p: int, steps: int = 6, ladder_ratio: float = 2**0.5):
    """Largest mesh size whose relative ``H^1_k`` error stays below ``cfg.threshold``.

    Walks down the geometric ladder ``h_0, h_0 / r, h_0 / r^2, ...`` from a
    coarse start (``h k = 4``, capped by the geometry) until the error drops
    below the threshold, then bisects in ``log h`` between the last failing
    and the first passing ladder rung.  Returns ``(h_max, record, records)``.
    """
    geom = cfg.geometry
    widths = np.diff(geom.band_radii())
    h_hi = min(4.0 / k, 1.9 * float(widths.min()))
    recs = []

    def err(h):
        r = run_cell(cfg, "threshold", k, p, h)
        recs.append(r)
        return r

    r = err(h_hi)
    if r.rel_H1k <= cfg.threshold:
        return r.h, r, recs
    lo_fail = math.log(h_hi)
    h = h_hi
    for _ in range(60):
        h /= ladder_ratio
        r = err(h)
        if r.rel_H1k <= cfg.threshold:
            break
        lo_fail = math.log(h)
    else:
        raise CellError(f"threshold not reached for k={k}, p={p} down to h={h:.3g}")
    good, hi = r, math.log(h)
    for _ in range(steps):
        mid = 0.5 * (hi + lo_fail)
        r = err(math.exp(mid))
        if r.rel_H1k <= cfg.threshold:
            good, hi = r, mid
        else:
            lo_fail = mid
    return good.h, good, recs


def run_threshold_map(cfg: StudyConfig) -> StudyResult:
    """Threshold locus ``h*(k)`` per degree and its fitted exponent ``h* ~ k^e``."""
    if len(cfg.k) < 3:
        raise StudyError("need >= 3 k values")
    records, summary = [], {}
    for p in cfg.p:
        items = [(cfg, float(k), p) for k in cfg.k]
        out = _map(threshold_h, items, cfg.jobs)
        hs = [o[0] for o in out]
        records += [o[1] for o in out]
        summary[p] = {"k": [float(k) for k in cfg.k], "h": hs, "exponent": fit_slope(cfg.k, hs),
                      "theory": -1.0 - 1.0 / (2 * p), "evaluations": sum(len(o[2]) for o in out)}
    return StudyResult(records, summary)


def run_abstract_verify(cfg: StudyConfig) -> StudyResult:
    """Measured constants (``C_sol``, ``eta``, ``c~``) on a three-level straight hierarchy per (k, p)."""
    from .verify import MAX_DENSE, build_smoothing, estimate_csol, estimate_eta

    records, summary = [], {}
    for p in cfg.p:
        for k in cfg.k:
            t0 = time.perf_counter()
            h = cfg.h_for(k, p)
            problem = make_problem(cfg, k, p)
            meshes = hierarchy(build_mesh(cfg.geometry, 2 * h), 1)
            coarse, fine = (make_space(problem, m) for m in meshes)
            bundle = assemble(problem, fine)
            csol = estimate_csol(problem, fine, bundle, seed=cfg.seed)
            eta = estimate_eta(problem, coarse, fine, bundle, seed=cfg.seed)
            c_tilde = build_smoothing(bundle).c_tilde if bundle.n <= MAX_DENSE else NAN
            uf = fine.expand(bundle.solve(), bundle.u_dirichlet)
            wall = (time.perf_counter() - t0) * 1e3
            records.append(StudyRecord("abstract-verify", float(k), meshes[-1].h_max, int(p), bundle.n,
                                       cfg.truncation, reference_kind(cfg), csol=csol, eta=eta, c_tilde=c_tilde,
                                       wall_ms=wall))
            summary[(k, p)] = {"csol": csol, "eta": eta, "c_tilde": c_tilde,
                               "norm_u": float(np.linalg.norm(uf))}
            if cfg.beta_jump != 1.0:
                summary[(k, p)]["csol_unweighted"] = estimate_csol(problem, fine, bundle, seed=cfg.seed,
                                                                   weighted=False)
    return StudyResult(records, summary)


STUDIES = {
    "convergence": run_convergence,
    "pollution": run_pollution,
    "threshold": run_threshold_map,
    "pml-width": run_pml_width,
    "abstract-verify": run_abstract_verify,
}


def run_study(cfg: StudyConfig) -> StudyResult:
    return STUDIES[cfg.kind](cfg)


def default_jobs() -> int:
    """Worker count from ``HPL_JOBS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("HPL_JOBS", "1")))
    except ValueError:
        return 1
