"""End-to-end acceptance criteria 1-10.

Each test prints one ``criterion N: PASS/FAIL`` line (also collected in the
terminal summary) and then asserts both the property and its runtime limit.
Deselect with ``-m "not acceptance"`` for a quick run.
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from hplab.experiments import (StudyConfig, fit_slope, run_convergence, run_pml_width, run_pollution,
                               run_threshold_map)
from hplab.forms import PlaneWaveScattering, ProblemSpec, assemble, gram_matrices, make_space
from hplab.mesh import GeometrySpec, build_mesh, hierarchy
from hplab.pml import make_profile
from hplab.verify import (build_smoothing, coercivity_slack, continuity_constant, estimate_csol, estimate_eta,
                          prolongation, stp_ratio)

pytestmark = pytest.mark.acceptance

# manufactured solutions: square, no obstacle, layer switched off
BOX = GeometrySpec(obstacle_kind="none", R_scat=0.25, R_pml_minus=0.375, R_tr=0.5, truncation_shape="square")
# scattering studies: several wavelengths between the obstacle and the layer
WIDE = GeometrySpec(a=0.5, R_scat=2.25, R_pml_minus=4.0, R_pml_plus=5.5, R_tr=5.0)
# operator constants and nested hierarchies
DISK = GeometrySpec(a=0.5, R_scat=0.75, R_pml_minus=1.0, R_pml_plus=1.6, R_tr=1.3)
# layer-width study: the layer ends at the truncation circle
LAYER = GeometrySpec(a=1.0, R_scat=1.25, R_pml_minus=1.5, R_pml_plus=2.3, R_tr=2.3)


def disk_problem(k, p, truncation="pml", data=None):
    pml = make_profile(math.pi / 4, DISK.R_pml_minus, DISK.R_pml_plus) if truncation == "pml" else None
    return ProblemSpec(k=k, p=p, truncation=truncation, pml=pml, data=data)


def test_criterion_1_asymptotic_orders(criterion):
    t0 = time.perf_counter()
    ok, parts = True, []
    for p, h0 in ((1, 0.05), (2, 0.1), (3, 0.2)):
        cfg = StudyConfig(kind="convergence", geometry=BOX, k=(5.0,), p=(p,), h_rule="list",
                          h=tuple(h0 / 2**j for j in range(4)), data="manufactured", theta=0.0,
                          direction=(0.6, 0.8), region="all")
        s = run_convergence(cfg).summary[(5.0, p)]
        ok &= abs(s["slope_H1k"] - p) <= 0.15 and abs(s["slope_L2"] - (p + 1)) <= 0.15
        parts.append(f"p={p}: H1k {s['slope_H1k']:.3f}, L2 {s['slope_L2']:.3f}")
    dt = time.perf_counter() - t0
    assert criterion(1, ok, "; ".join(parts), dt, 120)


def test_criterion_2_pollution_growth(criterion):
    t0 = time.perf_counter()
    cfg = StudyConfig(kind="pollution", geometry=WIDE, k=(10.0, 20.0, 40.0, 80.0), p=(1,), h_rule="hk", c=0.4)
    res = run_pollution(cfg)
    slope = res.summary[1]["slope"]
    errs = ", ".join(f"{r.rel_H1k:.3g}" for r in res.records)
    dt = time.perf_counter() - t0
    assert criterion(2, 0.75 <= slope <= 1.25, f"slope {slope:.3f} (errors {errs})", dt, 600)


def test_criterion_3_preasymptotic_boundedness(criterion):
    t0 = time.perf_counter()
    ok, parts = True, []
    for p, c in ((1, 0.8**2 * 10), (2, 2.0**4 * 10)):
        cfg = StudyConfig(kind="pollution", geometry=WIDE, k=(10.0, 20.0, 40.0), p=(p,), h_rule="hk2pk", c=c)
        res = run_pollution(cfg)
        ratio = res.summary[p]["max_over_min"]
        ok &= ratio <= 2.0
        errs = ", ".join(f"{r.rel_H1k:.3g}" for r in res.records)
        parts.append(f"p={p}: max/min {ratio:.3f} (errors {errs})")
    dt = time.perf_counter() - t0
    assert criterion(3, ok, "; ".join(parts), dt, 600)


def test_criterion_4_threshold_exponent(criterion):
    t0 = time.perf_counter()
    cfg = StudyConfig(kind="threshold", geometry=WIDE, k=(10.0, 20.0, 40.0), p=(1, 2), threshold=0.25)
    res = run_threshold_map(cfg)
    e1, e2 = res.summary[1]["exponent"], res.summary[2]["exponent"]
    ok = -1.65 <= e1 <= -1.35 and -1.45 <= e2 <= -1.1
    dt = time.perf_counter() - t0
    assert criterion(4, ok, f"p=1 exponent {e1:.3f}, p=2 exponent {e2:.3f}", dt, 900)


def test_criterion_5_csol_growth(criterion):
    t0 = time.perf_counter()
    ks = (5.0, 10.0, 20.0, 40.0)
    ok, parts = True, []
    for trunc in ("pml", "impedance"):
        vals = []
        for k in ks:
            problem = disk_problem(k, 2, trunc)
            vals.append(estimate_csol(problem, make_space(problem, build_mesh(DISK, min(1 / k, 0.15)))))
        slope = fit_slope(ks, vals)
        ok &= 0.7 <= slope <= 1.3
        parts.append(f"{trunc}: slope {slope:.3f} (C_sol {', '.join(f'{v:.3g}' for v in vals)})")
    dt = time.perf_counter() - t0
    assert criterion(5, ok, "; ".join(parts), dt, 300)


def test_criterion_6_coercive_modification(criterion):
    t0 = time.perf_counter()
    levels = hierarchy(build_mesh(DISK, 0.3), 2)
    c_tilde, slack, dofs = [], [], []
    for k, level in ((5.0, 0), (10.0, 1), (20.0, 2)):
        problem = disk_problem(k, 1)
        bundle = assemble(problem, make_space(problem, levels[level], curved=False), with_load=False)
        sb = build_smoothing(bundle)
        c_tilde.append(sb.c_tilde)
        slack.append(coercivity_slack(sb, n_samples=100, seed=int(k)))
        dofs.append(bundle.n)
    variation = max(c_tilde) / min(c_tilde)
    ok = min(c_tilde) > 0 and variation <= 3 and max(slack) <= 1e-10 and max(dofs) <= 6000
    detail = (f"c_tilde {', '.join(f'{c:.3f}' for c in c_tilde)} (variation {variation:.2f}), "
              f"max slack {max(slack):.1e}, dofs {dofs}")
    dt = time.perf_counter() - t0
    assert criterion(6, ok, detail, dt, 180)


def test_criterion_7_eta_scaling(criterion):
    t0 = time.perf_counter()
    k = 5.0
    levels = hierarchy(build_mesh(DISK, 0.3), 2)
    problem = disk_problem(k, 1, data=PlaneWaveScattering((1.0, 0.0)))
    spaces = [make_space(problem, m, curved=False) for m in levels]
    fine = assemble(problem, spaces[2])
    eta = [estimate_eta(problem, spaces[j], spaces[2], fine) for j in (0, 1)]
    ratio = eta[1] / eta[0]
    c_cont = continuity_constant(fine)
    u_fine = spaces[2].expand(fine.solve(), fine.u_dirichlet)
    M, K = gram_matrices(spaces[2], "all")
    galerkin = []
    for j in (0, 1):
        b = assemble(problem, spaces[j])
        e = u_fine - prolongation(spaces[j], spaces[2], free=False) @ spaces[j].expand(b.solve(), b.u_dirichlet)
        m = np.real(np.vdot(e, M @ e))
        galerkin.append(math.sqrt(m / (np.real(np.vdot(e, K @ e)) / k**2 + m)))
    bounded = all(g <= c_cont * et for g, et in zip(galerkin, eta))
    ok = 0.4 <= ratio <= 0.6 and bounded
    detail = (f"eta {eta[0]:.4g} -> {eta[1]:.4g} (ratio {ratio:.3f}); L2/H1k ratios "
              f"{', '.join(f'{g:.3g}' for g in galerkin)} <= C_cont*eta "
              f"{', '.join(f'{c_cont * et:.3g}' for et in eta)} (C_cont {c_cont:.3f})")
    dt = time.perf_counter() - t0
    assert criterion(7, ok, detail, dt, 300)


def test_criterion_8_layer_accuracy(criterion):
    t0 = time.perf_counter()
    cfg = StudyConfig(kind="pml-width", geometry=LAYER, k=(10.0,), p=(3,), h_rule="list", h=(0.05,),
                      widths=(0.1, 0.2, 0.4, 0.8), thetas=(0.0, math.pi / 4))
    res = run_pml_width(cfg)
    s = res.summary[(10.0, 3, math.pi / 4)]
    errs, floor = s["errors"], s["floor"]
    ok = True
    for a, b in zip(errs, errs[1:]):
        if b > 2 * floor:  # not yet at the discretization floor: must drop by 5x
            ok &= b <= a / 5
    control = res.summary[(10.0, 3, 0.0)]["errors"]
    ok &= min(control) >= 0.5
    detail = (f"theta=pi/4 errors {', '.join(f'{e:.3g}' for e in errs)} (floor {floor:.3g}, ratios "
              f"{', '.join(f'{r:.3g}' for r in s['ratios'])}); theta=0 errors "
              f"{', '.join(f'{e:.3g}' for e in control)}")
    dt = time.perf_counter() - t0
    assert criterion(8, ok, detail, dt, 300)


def test_criterion_9_stp_ratio_decay(criterion):
    t0 = time.perf_counter()
    k = 5.0
    levels = hierarchy(build_mesh(DISK, 0.3, n_theta=12), 2)
    ok, parts = True, []
    for p, bound in ((1, 0.75), (2, 0.45)):
        problem = disk_problem(k, p)
        spaces = [make_space(problem, m, curved=False) for m in levels]
        sb = build_smoothing(assemble(problem, spaces[2], with_load=False))
        v = spaces[2].interpolate(lambda x: np.exp(0.7j * k * x[:, 0]) * np.exp(-np.sum(x**2, axis=1)))
        r = stp_ratio(sb, spaces[:2], v[spaces[2].free])
        decay = r[1] / r[0]
        ok &= decay <= bound
        parts.append(f"p={p}: ratios {r[0]:.3g} -> {r[1]:.3g} (decay {decay:.3f} <= {bound})")
    dt = time.perf_counter() - t0
    assert criterion(9, ok, "; ".join(parts), dt, 180)


def test_criterion_10_unit_suites(criterion):
    here = Path(__file__).parent
    files = ["test_elements.py", "test_reference.py", "test_solver.py", "test_mesh.py", "test_pml.py"]
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                           *(str(here / f) for f in files)], capture_output=True, text=True, cwd=here.parent)
    dt = time.perf_counter() - t0
    tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr.strip()[-200:]
    assert criterion(10, proc.returncode == 0, f"{', '.join(files)}: {tail}", dt, 60)
