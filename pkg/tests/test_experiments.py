import csv
import math

import numpy as np
import pytest

from hplab.experiments import (CSV_HEADER, CellError, StudyConfig, StudyError, _map, fit_slope, run_abstract_verify,
                               run_cell, run_convergence, run_pml_width, run_pollution, run_threshold_map,
                               threshold_h, write_csv)
from hplab.mesh import GeometrySpec

SMALL = GeometrySpec(a=0.5, R_scat=0.75, R_pml_minus=1.0, R_pml_plus=1.6, R_tr=1.3)
BOX = GeometrySpec(obstacle_kind="none", R_scat=0.25, R_pml_minus=0.375, R_tr=0.5, truncation_shape="square")


def _square(x, y=0):
    return x * x + y


def test_csv_header_is_fixed():
    assert CSV_HEADER == "study,k,h,p,dofs,truncation,ref_kind,err_L2,err_H1k,rel_H1k,csol,eta,c_tilde,wall_ms"


def test_pollution_csv_is_deterministic_apart_from_timing(tmp_path):
    cfg = StudyConfig(kind="pollution", geometry=SMALL, k=(3.0, 6.0), p=(1, 2), c=1.0)
    rows = []
    for i in range(2):
        path = tmp_path / f"run{i}.csv"
        write_csv(run_pollution(cfg).records, path)
        with open(path, newline="") as fh:
            rows.append([r[:-1] for r in csv.reader(fh)])
    assert rows[0] == rows[1]
    assert ",".join(rows[0][0]) + ",wall_ms" == CSV_HEADER
    assert len(rows[0]) == 5


def test_record_norms_are_ordered():
    cfg = StudyConfig(kind="pollution", geometry=SMALL, k=(2.0, 4.0, 8.0), p=(1,), c=1.0)
    for r in run_pollution(cfg).records:
        # the H^1_k norm dominates the L^2 norm
        assert r.err_L2 <= r.err_H1k * (1 + 1e-12)
        assert r.ref_kind == "mie" and r.dofs > 0 and r.wall_ms > 0
        assert 0 < r.rel_H1k < 1


def test_threshold_map_needs_three_wavenumbers():
    with pytest.raises(StudyError, match="need >= 3 k values"):
        run_threshold_map(StudyConfig(kind="threshold", geometry=SMALL, k=(5.0, 10.0)))


def test_parallel_map_preserves_order():
    items = [(i, 1) for i in range(8)]
    assert _map(_square, items, jobs=2) == [i * i + 1 for i in range(8)]
    assert _map(_square, items, jobs=1) == [i * i + 1 for i in range(8)]


def test_mesh_size_rules():
    cfg = StudyConfig(geometry=SMALL, h_rule="hk", c=0.5)
    assert cfg.h_for(10.0, 1) == pytest.approx(0.05)
    cfg = StudyConfig(geometry=SMALL, h_rule="hk2pk", c=0.1)
    for p in (1, 2, 3):
        h = cfg.h_for(10.0, p)
        assert (h * 10.0) ** (2 * p) * 10.0 == pytest.approx(0.1)
    cfg = StudyConfig(geometry=SMALL, h_rule="list", h=(0.2, 0.1))
    assert cfg.h_for(99.0, 3) == 0.2


@pytest.mark.parametrize("kw,match", [
    (dict(kind="bogus"), "unknown study kind"),
    (dict(h_rule="bogus"), "unknown h rule"),
    (dict(h_rule="list"), "explicit h"),
    (dict(k=()), "nonempty"),
    (dict(k=(-1.0,)), "positive"),
    (dict(kind="convergence", levels=2), "3 levels"),
    (dict(threshold=1.5), "threshold"),
    (dict(solver="direct"), "solver"),
])
def test_invalid_configs_rejected(kw, match):
    with pytest.raises(StudyError, match=match):
        StudyConfig(geometry=SMALL, **kw)


def test_fit_slope_recovers_power_law():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert fit_slope(x, 3 * x**-1.5) == pytest.approx(-1.5)
    with pytest.raises(StudyError):
        fit_slope([1.0], [1.0])


def test_rotational_and_sparse_cells_agree():
    base = dict(kind="pollution", geometry=SMALL, k=(6.0,), p=(2,))
    r_rot = run_cell(StudyConfig(solver="rotational", **base), "pollution", 6.0, 2, 0.2)
    r_sp = run_cell(StudyConfig(solver="sparse", **base), "pollution", 6.0, 2, 0.2)
    assert r_rot.h == pytest.approx(r_sp.h, rel=1e-12)
    assert r_rot.rel_H1k == pytest.approx(r_sp.rel_H1k, rel=1e-8)
    assert r_rot.err_L2 == pytest.approx(r_sp.err_L2, rel=1e-8)


def test_rotational_solver_refused_for_unsupported_setups():
    cfg = StudyConfig(kind="pollution", geometry=BOX, data="manufactured", theta=0.0, solver="rotational")
    with pytest.raises(CellError):
        run_cell(cfg, "pollution", 5.0, 1, 0.1)


def test_failed_cell_is_identified():
    cfg = StudyConfig(kind="pollution", geometry=SMALL, k=(5.0,))
    with pytest.raises(CellError, match=r"k=5\.0, h=2\.0, p=1"):
        run_cell(cfg, "pollution", 5.0, 1, 2.0)


def test_manufactured_convergence_slopes():
    cfg = StudyConfig(kind="convergence", geometry=BOX, k=(5.0,), p=(1,), h_rule="list", h=(0.1, 0.05, 0.025),
                      data="manufactured", theta=0.0, direction=(0.6, 0.8), region="all")
    res = run_convergence(cfg)
    s = res.summary[(5.0, 1)]
    assert s["slope_H1k"] == pytest.approx(1.0, abs=0.1)
    assert s["slope_L2"] == pytest.approx(2.0, abs=0.1)
    assert all(r.ref_kind == "manufactured" for r in res.records)


def test_self_referenced_error_for_penetrable_obstacle():
    g = GeometrySpec(obstacle_kind="penetrable-annulus", a=0.5, r_in_outer=0.8, R_scat=1.0, R_pml_minus=1.2,
                     R_pml_plus=1.8, R_tr=1.5)
    cfg = StudyConfig(kind="pollution", geometry=g, beta_jump=2.0, c_inv2_in=2.0)
    coarse = run_cell(cfg, "pollution", 3.0, 1, 0.3)
    fine = run_cell(cfg, "pollution", 3.0, 1, 0.15)
    assert coarse.ref_kind == "self"
    assert 0 < fine.rel_H1k < coarse.rel_H1k < 1


def test_threshold_search_brackets_the_locus():
    cfg = StudyConfig(kind="threshold", geometry=SMALL, k=(4.0, 6.0, 8.0), p=(1,), threshold=0.05)
    h, rec, recs = threshold_h(cfg, 6.0, 1, steps=3)
    assert rec.rel_H1k <= 0.05 and rec.h == h
    failing = [r.h for r in recs if r.rel_H1k > 0.05]
    assert failing and min(failing) > h


def test_pml_width_study_summary():
    cfg = StudyConfig(kind="pml-width", geometry=GeometrySpec(a=1.0, R_scat=1.25, R_pml_minus=1.5, R_pml_plus=2.3,
                                                                R_tr=2.3),
                      k=(4.0,), p=(2,), h_rule="list", h=(0.15,), widths=(0.2, 0.4), thetas=(0.0, math.pi / 4))
    res = run_pml_width(cfg)
    assert len(res.records) == 1 + 2 * 2
    s = res.summary[(4.0, 2, math.pi / 4)]
    assert s["widths"] == [0.2, 0.4] and len(s["ratios"]) == 1
    assert s["floor"] <= min(s["errors"]) * (1 + 1e-6)
    # without stretching the layer does not absorb: errors stay large
    assert min(res.summary[(4.0, 2, 0.0)]["errors"]) > 10 * s["errors"][-1]


def test_abstract_verify_constants():
    cfg = StudyConfig(kind="abstract-verify", geometry=SMALL, k=(3.0,), p=(1,), h_rule="list", h=(0.15,))
    res = run_abstract_verify(cfg)
    s = res.summary[(3.0, 1)]
    assert s["csol"] > 0 and 0 < s["eta"] and s["c_tilde"] > 0
    assert res.records[0].study == "abstract-verify"
