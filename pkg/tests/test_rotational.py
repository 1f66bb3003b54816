import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from hplab.forms import PlaneWaveScattering, ProblemError, ProblemSpec, error_norms, make_space, mie_reference, solve
from hplab.mesh import GeometrySpec, build_mesh, build_sector
from hplab.pml import make_profile
from hplab.rotational import build_sector_system, rotational_error_norms, solve_rotational

GEOM = GeometrySpec(a=0.5, R_scat=0.75, R_pml_minus=1.0, R_pml_plus=1.6, R_tr=1.3)


def plane_wave_problem(k, p, truncation="pml", direction=(0.6, 0.8)):
    pml = make_profile(math.pi / 4, GEOM.R_pml_minus, GEOM.R_pml_plus) if truncation == "pml" else None
    return ProblemSpec(k=k, p=p, truncation=truncation, pml=pml, data=PlaneWaveScattering(direction))


@pytest.mark.parametrize("p,truncation", [(1, "pml"), (2, "pml"), (3, "impedance")])
def test_fourier_solution_equals_full_mesh_solution(p, truncation):
    problem = plane_wave_problem(6.0, p, truncation)
    full = build_mesh(GEOM, 0.25)
    sector = build_sector(GEOM, 0.25)
    ref = solve(problem, make_space(problem, full))
    rot = solve_rotational(problem, sector)
    L = rot.system.L
    coeffs = rot.sector_coeffs()
    tree = cKDTree(ref.space.coords)
    worst = 0.0
    for j in range(L):
        a = 2 * math.pi * j / L
        Q = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
        dist, idx = tree.query(rot.system.space.coords @ Q.T)
        assert dist.max() < 1e-9
        worst = max(worst, np.max(np.abs(coeffs[j] - ref.coeffs[idx])))
    assert worst < 1e-9 * np.max(np.abs(ref.coeffs))
    full_norms = error_norms(ref, mie_reference(problem, full))
    np.testing.assert_allclose(rotational_error_norms(rot), full_norms, rtol=1e-8)


def test_sector_system_requires_plane_wave_data():
    problem = ProblemSpec(k=3.0, p=1, pml=make_profile(math.pi / 4, GEOM.R_pml_minus, GEOM.R_pml_plus))
    with pytest.raises(ProblemError):
        solve_rotational(problem, build_sector(GEOM, 0.3))


def test_sector_system_orbits_cover_the_full_mesh():
    problem = plane_wave_problem(4.0, 2)
    sector = build_sector(GEOM, 0.3)
    system = build_sector_system(problem, sector)
    full_space = make_space(problem, build_mesh(GEOM, 0.3))
    assert system.n_reps * system.L == full_space.n_all
