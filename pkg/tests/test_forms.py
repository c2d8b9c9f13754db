import numpy as np
import pytest

import vempb as vp
import vempb.forms as forms
from vempb.mesh import build_polymesh
from vempb.mesh import _oriented_tet_faces
from vempb.polybasis import cell_quadrature

from _oracles import p1_tet_stiffness


def random_tet_mesh(rng):
    while True:
        verts = rng.random((4, 3))
        vol = np.linalg.det(verts[1:] - verts[0]) / 6.0
        if abs(vol) > 5e-3:
            break
    loops = _oriented_tet_faces(list(range(4)), verts)
    return build_polymesh(verts, [loops])


def solvent_physics():
    """Uniform solvent: the screening coefficient is active everywhere."""
    ls = vp.LevelSet(fn=lambda p: np.ones(len(p)), convex=True)
    return vp.PhysicsConfig(eps_m=2.0, eps_s=80.0, kappa=1 / (20 * np.sqrt(2)), charges=[], levelset=ls)


# ---------------------------------------------------------------------------
# physics evaluation


def test_coulomb_point_values():
    phys = vp.PhysicsConfig(charges=[(1.0, (0.0, 0.0, 0.0))])
    assert forms.eval_G(phys, np.array([1.0, 1.0, 1.0])) == pytest.approx(
        1.0 / (2.0 * np.sqrt(3.0)), rel=1e-14
    )
    g = forms.eval_grad_G(phys, np.array([1.0, 0.0, 0.0]))
    assert np.allclose(g, [-0.5, 0.0, 0.0], atol=1e-15)


def test_coulomb_superposition():
    ls = vp.box_levelset()
    one = vp.PhysicsConfig(charges=[(1.0, (0.0, 0.0, 0.0))], levelset=ls)
    two = vp.PhysicsConfig(charges=[(0.7, (0.0, 0.0, 0.0))], levelset=ls)
    both = vp.PhysicsConfig(charges=[(1.0, (0.0, 0.0, 0.0)), (0.7, (0.0, 0.0, 0.0))], levelset=ls)
    pts = np.random.default_rng(0).random((6, 3)) + 1.0
    assert np.allclose(
        both.coulomb_potential(pts),
        one.coulomb_potential(pts) + two.coulomb_potential(pts),
        rtol=1e-14,
    )


def test_coulomb_singularity_guard():
    phys = vp.PhysicsConfig()
    with pytest.raises(forms.SingularityError):
        phys.coulomb_potential(np.array([[0.0, 0.0, 0.0]]))


def test_dielectric_branches():
    phys = vp.PhysicsConfig()
    inside = np.array([[0.25, 0.25, 0.25]])
    outside = np.array([[0.75, 0.75, 0.75]])
    on_surface = np.array([[0.5, 0.25, 0.25]])
    assert phys.epsilon(inside)[0] == 2.0
    assert phys.kappa_bar_sq(inside)[0] == 0.0
    assert phys.epsilon(outside)[0] == 80.0
    assert phys.kappa_bar_sq(outside)[0] == pytest.approx(0.1, rel=1e-14)
    # points on the surface belong to the molecular branch
    assert phys.epsilon(on_surface)[0] == 2.0
    assert phys.kappa_bar_sq(on_surface)[0] == 0.0


def test_charge_outside_molecular_region_rejected():
    with pytest.raises(ValueError, match="molecular"):
        vp.PhysicsConfig(charges=[(1.0, (0.9, 0.9, 0.9))])


def test_positive_constants_required():
    with pytest.raises(ValueError):
        vp.PhysicsConfig(eps_m=0.0)


# ---------------------------------------------------------------------------
# stiffness


def test_single_tet_matches_linear_fem():
    rng = np.random.default_rng(42)
    ls = vp.LevelSet(fn=lambda p: -np.ones(len(p)), convex=True)
    phys = vp.PhysicsConfig(eps_m=1.0, eps_s=1.0, kappa=0.0, charges=[], levelset=ls)
    for _ in range(20):
        m = random_tet_mesh(rng)
        proj = vp.cell_projectors(m, 0)
        quad = cell_quadrature(m, 0)
        K = forms.local_stiffness(m, 0, proj, phys, quad)
        order = np.argsort(proj.vertex_ids)  # local DoFs are sorted ids = 0..3 here
        K_ref = p1_tet_stiffness(m.vertices)
        assert np.abs(K - K_ref).max() <= 1e-12


def test_stiffness_row_sums_vanish(random_cells):
    phys = vp.PhysicsConfig()
    for m, ci in random_cells[::9]:
        proj = vp.cell_projectors(m, ci)
        K = forms.local_stiffness(m, ci, proj, phys, cell_quadrature(m, ci))
        assert np.abs(K.sum(axis=1)).max() <= 1e-12 * max(1.0, np.abs(K).max())


def test_consistency_rank_three_on_cube():
    ls = vp.LevelSet(fn=lambda p: -np.ones(len(p)), convex=True)
    phys = vp.PhysicsConfig(eps_m=1.0, eps_s=1.0, kappa=0.0, charges=[], levelset=ls)
    m = vp.generate_cube_mesh(1)
    proj = vp.cell_projectors(m, 0)
    consistency = m.cell_volume[0] * proj.pi0_grad.T @ proj.pi0_grad
    rank = np.linalg.matrix_rank(consistency, tol=1e-12)
    assert rank == 3


def test_k_consistency_identities(random_cells):
    """Stabilization vanishes on linear DoFs; consistency term integrates eps exactly."""
    rng = np.random.default_rng(1)
    phys = vp.PhysicsConfig()
    for m, ci in random_cells[::7]:
        proj = vp.cell_projectors(m, ci)
        quad = cell_quadrature(m, ci)
        K = forms.local_stiffness(m, ci, proj, phys, quad)
        p_dofs = rng.normal() + m.vertices[proj.vertex_ids] @ rng.normal(size=3)
        q_dofs = rng.normal() + m.vertices[proj.vertex_ids] @ (q_grad := rng.normal(size=3))
        # the stabilized part contributes nothing between two linears
        eps_int = float(quad.weights @ phys.epsilon(quad.points))
        p_grad = proj.pi0_grad @ p_dofs
        expect = eps_int * (p_grad @ q_grad)
        assert K @ q_dofs @ p_dofs == pytest.approx(expect, rel=1e-12, abs=1e-13)
        # and the remainder annihilates the linear DoF vector
        assert np.abs(proj.stab_q @ p_dofs).max() <= 1e-12


def test_stiffness_psd_with_constant_kernel(random_cells):
    phys = vp.PhysicsConfig()
    for m, ci in random_cells[::15]:
        proj = vp.cell_projectors(m, ci)
        K = forms.local_stiffness(m, ci, proj, phys, cell_quadrature(m, ci))
        vals = np.linalg.eigvalsh(K)
        scale = np.abs(vals).max()
        assert vals[0] >= -1e-12 * scale
        # kernel is exactly the constants
        assert vals[0] <= 1e-12 * scale
        assert vals[1] > 1e-8 * scale


# ---------------------------------------------------------------------------
# nonlinear term


def test_molecular_cell_contributes_nothing():
    phys = vp.PhysicsConfig()
    m = vp.generate_cube_mesh(4)
    ci = 0  # cell inside the molecular box
    proj = vp.cell_projectors(m, ci)
    u = np.random.default_rng(0).normal(size=proj.n_dofs)
    r, J = forms.local_nonlinear(m, ci, proj, phys, u, cell_quadrature(m, ci))
    assert np.all(r == 0.0)
    assert np.all(J == 0.0)


def test_zero_state_no_charges_gives_projected_mass_jacobian():
    phys = solvent_physics()
    m = vp.generate_voronoi_mesh(8, 3)
    ci = 2
    proj = vp.cell_projectors(m, ci)
    quad = cell_quadrature(m, ci)
    r, J = forms.local_nonlinear(m, ci, proj, phys, np.zeros(proj.n_dofs), quad)
    assert np.abs(r).max() == 0.0
    N = quad.weights[:, None] * (proj.basis.eval_all(quad.points) @ proj.pi_nabla)
    mass = (proj.basis.eval_all(quad.points) @ proj.pi_nabla).T @ N
    assert np.allclose(J, phys.kappa_bar_sq_solvent * mass, rtol=1e-13, atol=1e-16)


def test_jacobian_matches_finite_differences(random_cells):
    rng = np.random.default_rng(5)
    phys = vp.PhysicsConfig()
    step = 1e-6
    for m, ci in random_cells[::23]:
        proj = vp.cell_projectors(m, ci)
        quad = cell_quadrature(m, ci)
        u = rng.normal(size=proj.n_dofs) * 0.5
        _, J = forms.local_nonlinear(m, ci, proj, phys, u, quad)
        if np.abs(J).max() == 0.0:
            continue
        J_fd = np.zeros_like(J)
        for k in range(proj.n_dofs):
            up = u.copy(); up[k] += step
            dn = u.copy(); dn[k] -= step
            rp, _ = forms.local_nonlinear(m, ci, proj, phys, up, quad, with_jacobian=False)
            rm, _ = forms.local_nonlinear(m, ci, proj, phys, dn, quad, with_jacobian=False)
            J_fd[:, k] = (rp - rm) / (2 * step)
        assert np.abs(J - J_fd).max() <= 1e-6 * np.abs(J).max()


def test_jacobian_symmetry(random_cells):
    rng = np.random.default_rng(6)
    phys = vp.PhysicsConfig()
    for m, ci in random_cells[::19]:
        proj = vp.cell_projectors(m, ci)
        u = rng.normal(size=proj.n_dofs)
        _, J = forms.local_nonlinear(m, ci, proj, phys, u, cell_quadrature(m, ci))
        assert np.abs(J - J.T).max() <= 1e-13 * max(1.0, np.abs(J).max())


def test_overflow_guard():
    phys = solvent_physics()
    m = vp.generate_cube_mesh(1)
    proj = vp.cell_projectors(m, 0)
    u = np.full(proj.n_dofs, 800.0)
    with pytest.raises(forms.NonlinearOverflow):
        forms.local_nonlinear(m, 0, proj, phys, u, cell_quadrature(m, 0))


def test_monotonicity_sample():
    phys = solvent_physics()
    m = vp.generate_voronoi_mesh(20, 5)
    rng = np.random.default_rng(7)
    k2 = phys.kappa_bar_sq_solvent
    for _ in range(20):
        ci = int(rng.integers(m.n_cells))
        au, bu = rng.normal(size=4), rng.normal(size=4)
        u = lambda p: au[0] + p @ au[1:]
        v = lambda p: bu[0] + p @ bu[1:]
        quad = cell_quadrature(m, ci)
        G = phys.coulomb_potential(quad.points) if phys.charges else 0.0
        Bu = k2 * np.sinh(u(quad.points) + G)
        Bv = k2 * np.sinh(v(quad.points) + G)
        duv = u(quad.points) - v(quad.points)
        lhs = quad.weights @ ((Bu - Bv) * duv)
        rhs = k2 * (quad.weights @ duv**2)
        assert lhs - rhs >= -1e-12


# ---------------------------------------------------------------------------
# loads


def test_regularized_load_zero_in_molecular_region():
    phys = vp.PhysicsConfig()
    m = vp.generate_cube_mesh(4)
    proj = vp.cell_projectors(m, 0)
    load = vp.regularized_load()
    out = forms.local_load(m, 0, proj, phys, load, cell_quadrature(m, 0))
    assert np.all(out == 0.0)


def test_manufactured_zero_solution_no_charges():
    ls = vp.box_levelset()
    phys = vp.PhysicsConfig(charges=[], levelset=ls)
    spec = vp.manufactured_linear((0.0, 0.0, 0.0, 0.0))
    m = vp.generate_voronoi_mesh(6, 9)
    for ci in range(m.n_cells):
        proj = vp.cell_projectors(m, ci)
        out = forms.local_load(m, ci, proj, phys, spec, cell_quadrature(m, ci))
        assert np.abs(out).max() <= 1e-15


def test_manufactured_linear_load_consistency_identity():
    """With eps = 1 and no screening, the load of u=x equals K applied to x DoFs."""
    ls = vp.LevelSet(fn=lambda p: -np.ones(len(p)), convex=True)
    phys = vp.PhysicsConfig(eps_m=1.0, eps_s=1.0, kappa=0.0, charges=[], levelset=ls)
    spec = vp.manufactured_linear((0.0, 1.0, 0.0, 0.0))
    m = vp.generate_voronoi_mesh(10, 14)
    for ci in range(m.n_cells):
        proj = vp.cell_projectors(m, ci)
        quad = cell_quadrature(m, ci)
        out = forms.local_load(m, ci, proj, phys, spec, quad)
        expect = m.cell_volume[ci] * proj.pi0_grad.T @ np.array([1.0, 0.0, 0.0])
        assert np.allclose(out, expect, atol=1e-13)
        K = forms.local_stiffness(m, ci, proj, phys, quad)
        dofs = m.vertices[proj.vertex_ids][:, 0]
        assert np.allclose(out, K @ dofs, atol=1e-12)


def test_load_spec_validation():
    with pytest.raises(ValueError):
        vp.LoadSpec(mode="bogus")
    with pytest.raises(ValueError):
        vp.LoadSpec(mode="manufactured")
    with pytest.raises(ValueError):
        vp.LoadSpec(mode="regularized", pointwise_rhs=True)


def test_pointwise_mode_converges_on_smooth_problem():
    """Constant dielectric: the strong-form load also drives convergence to u_ex."""
    ls = vp.LevelSet(fn=lambda p: np.ones(len(p)), convex=True)  # all solvent
    phys = vp.PhysicsConfig(eps_m=3.0, eps_s=3.0, kappa=0.1, charges=[], levelset=ls)
    weak = vp.manufactured_sine()
    pw = vp.LoadSpec(
        mode="manufactured",
        u_exact=weak.u_exact,
        grad_u_exact=weak.grad_u_exact,
        lap_u_exact=weak.lap_u_exact,
        pointwise_rhs=True,
    )
    errors = []
    for n in (4, 8):
        m = vp.generate_cube_mesh(n)
        u, _ = vp.newton_solve(m, phys, pw)
        errors.append(vp.error_l2(m, u, weak.u_exact))
    # near-second-order decay between the two levels
    assert errors[1] <= 0.35 * errors[0]
