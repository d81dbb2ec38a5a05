"""Residual-field identities, local reconstructions, and the estimate."""

import numpy as np
import pytest

from adg import euler
from adg.adjoint import AdjointSolution, AdjointResidualForm, solve_adjoint
from adg.estimator import (ReconstructedPair, dual_residual_fields,
                           enriched_space, estimate, primal_residual_fields,
                           projection_remainder, reconstruct,
                           weak_residual_sum)
from adg.forms import (FlowConditions, TargetFunctional, assemble_residual,
                       assemble_system)
from adg.mesh import FARFIELD, WALL, Mesh, square_mesh
from adg.meshgen import naca_omesh
from adg.solver import solve_steady
from adg.space import (DGSolution, Space, constant_solution, project,
                       prolong)

GAS = euler.GasParams()


def channel_mesh(n, degree=1):
    """Unit square with wall top and bottom, far field left and right."""
    base = square_mesh(n)
    tags = {}
    for (a, b) in base.boundary_edge_map():
        ya, yb = base.vertices[a, 1], base.vertices[b, 1]
        on_wall = ya == yb and ya in (0.0, 1.0)
        tags[(a, b)] = WALL if on_wall else FARFIELD
    mesh = Mesh(base.vertices, base.triangles, tags)
    return mesh.with_degrees(np.full(mesh.n_elements, degree))


def perturbed_state(space, rng, scale=0.03, constant_density=False):
    """Admissible state near free stream with random polynomial content.

    With constant_density the density keeps only its mean per element, which
    makes every flux component an elementwise polynomial.
    """
    sol = constant_solution(space, euler.free_stream_state(GAS, 0.5, 0.03))
    coeffs = sol.coeffs.copy()
    for cls in space.classes:
        amp = np.abs(coeffs[cls.dof[:, 0, 0]])
        pert = rng.standard_normal(cls.dof.shape)
        if constant_density:
            pert[:, 0, 1:] = 0.0
        coeffs[cls.dof] += scale * amp[:, None, None] * pert
    return DGSolution(space, coeffs)


@pytest.fixture(scope='module')
def naca_state():
    cond = FlowConditions(GAS, 0.5, np.deg2rad(1.0))
    space = Space(naca_omesh(24, 6, 10.0, 0.05))
    sol, hist = solve_steady(space, cond)
    assert hist.converged
    adj = solve_adjoint(sol, TargetFunctional('drag', cond))
    return sol, adj


@pytest.fixture(scope='module')
def naca_recon(naca_state):
    sol, adj = naca_state
    return reconstruct(sol, adj)


@pytest.mark.parametrize('wall_kind', [1, 2])
def test_primal_weak_identity_matches_assembled_residual(wall_kind):
    cond = FlowConditions(GAS, 0.5, np.deg2rad(2.0), wall_kind)
    space = Space(naca_omesh(24, 6, 10.0, 0.05, degree=2))
    rng = np.random.default_rng(17)
    sol = perturbed_state(space, rng, constant_density=True)
    rich = enriched_space(space)
    fields = primal_residual_fields(sol, cond, space=rich)
    b = assemble_residual(prolong(sol, rich), cond)
    for _ in range(20):
        v = rng.standard_normal(rich.n_dofs)
        v = DGSolution(rich, v / np.linalg.norm(v))
        lhs = weak_residual_sum(fields, v)
        rhs = -float(b @ v.coeffs)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


@pytest.mark.parametrize('inconsistent', [False, True])
def test_dual_weak_identity_matches_adjoint_form(inconsistent):
    cond = FlowConditions(GAS, 0.5, np.deg2rad(2.0))
    space = Space(naca_omesh(24, 6, 10.0, 0.05))
    rng = np.random.default_rng(23)
    sol = perturbed_state(space, rng)
    target = TargetFunctional('drag', cond)
    z = DGSolution(space, rng.standard_normal(space.n_dofs))
    adj = AdjointSolution(z, target, 0.0, inconsistent)
    rich = enriched_space(space)
    fields = dual_residual_fields(sol, adj, space=rich)
    form = AdjointResidualForm(sol, adj, rich)
    for _ in range(20):
        v = rng.standard_normal(rich.n_dofs)
        v = DGSolution(rich, v / np.linalg.norm(v))
        lhs = weak_residual_sum(fields, v)
        rhs = form(v)
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(rhs))


def test_free_stream_fields_vanish():
    cond = FlowConditions(GAS, 0.5, np.deg2rad(3.0))
    mesh = square_mesh(3, skew=0.2)
    degrees = np.ones(mesh.n_elements, dtype=np.int64)
    degrees[::3] = 2
    degrees[1::5] = 3
    space = Space(mesh.with_degrees(degrees))
    sol = constant_solution(space, cond.free_stream)
    fields = primal_residual_fields(sol, cond)
    for arr in (*fields.volume, *fields.interior_l, *fields.interior_r,
                *fields.boundary):
        assert np.max(np.abs(arr)) <= 1e-12


@pytest.mark.parametrize('wall_kind', [1, 2])
def test_tangential_state_zero_wall_residual(wall_kind):
    cond = FlowConditions(GAS, 0.5, 0.0, wall_kind)
    space = Space(channel_mesh(3, degree=2))
    sol = constant_solution(space, cond.free_stream)
    fields = primal_residual_fields(sol, cond)
    seen = 0
    for g, arr in zip(space.boundary_groups, fields.boundary):
        if g.tag == WALL:
            seen += len(g.faces)
            assert np.max(np.abs(arr)) <= 1e-11
    assert seen > 0


def test_continuous_dual_zero_interior_field():
    cond = FlowConditions(GAS, 0.5, np.deg2rad(2.0))
    mesh = square_mesh(3, skew=0.2)
    space = Space(mesh.with_degrees(np.full(mesh.n_elements, 2)))
    rng = np.random.default_rng(29)
    sol = perturbed_state(space, rng)

    def zfn(pts):
        x, y = pts[:, 0], pts[:, 1]
        return np.stack([1.0 + x * y, x ** 2 - y, 0.5 * y ** 2 + x,
                         x ** 2 + y ** 2], axis=1)

    adj = AdjointSolution(project(space, zfn),
                          TargetFunctional('drag', cond), 0.0)
    fields = dual_residual_fields(sol, adj)
    for arr in (*fields.interior_l, *fields.interior_r):
        assert np.max(np.abs(arr)) <= 1e-11


def test_dual_wall_field_vanishes_when_trace_matches_weight():
    cond = FlowConditions(GAS, 0.5, 0.0)
    space = Space(channel_mesh(3, degree=2))
    sol = constant_solution(space, cond.free_stream)
    target = TargetFunctional('drag', cond)
    tth = target.theta_tilde(np.zeros((1, 2)))[0]
    adj = AdjointSolution(constant_solution(space, tth), target, 0.0)
    fields = dual_residual_fields(sol, adj)
    for g, arr in zip(space.boundary_groups, fields.boundary):
        if g.tag == WALL:
            assert np.max(np.abs(arr)) <= 1e-11


def test_dual_fields_orthogonal_to_solution_space(naca_state):
    sol, adj = naca_state
    fields = dual_residual_fields(sol, adj)
    g = adj.target.gradient(sol)
    rng = np.random.default_rng(31)
    for _ in range(10):
        v = DGSolution(sol.space, rng.standard_normal(sol.space.n_dofs))
        bound = 1e-9 * np.linalg.norm(g) * np.linalg.norm(v.coeffs)
        assert abs(weak_residual_sum(fields, v)) <= bound


@pytest.mark.parametrize('wall_kind', [1, 2])
def test_reconstruction_fixed_point_on_zero_residual_state(wall_kind):
    cond = FlowConditions(GAS, 0.5, 0.0, wall_kind)
    space = Space(channel_mesh(2))
    sol, hist = solve_steady(space, cond)
    assert hist.converged
    adj = solve_adjoint(sol, TargetFunctional('drag', cond))
    recon = reconstruct(sol, adj)
    emb = prolong(sol, recon.w_plus.space)
    assert np.array_equal(recon.w_plus.coeffs, emb.coeffs)
    assert recon.iterations.max() == 0
    assert len(recon.fallback_elems) == 0


def test_dual_reconstruction_matches_dense_block_solve():
    cond = FlowConditions(GAS, 0.5, 0.0)
    space = Space(channel_mesh(1))
    assert space.mesh.n_elements == 2
    sol, hist = solve_steady(space, cond)
    assert hist.converged
    target = TargetFunctional('drag', cond)
    adj = solve_adjoint(sol, target)
    recon = reconstruct(sol, adj)

    rich = recon.z_plus.space
    frozen = prolong(sol, rich)
    amat = assemble_system(frozen, cond)[0].tocsr().toarray()
    g = target.gradient(frozen)
    z0 = prolong(adj.z, rich).coeffs
    defect = g - amat.T @ z0
    expect = z0.copy()
    for e in range(rich.mesh.n_elements):
        i0, i1 = int(rich.elem_offset[e]), int(rich.elem_offset[e + 1])
        expect[i0:i1] += np.linalg.solve(amat[i0:i1, i0:i1].T, defect[i0:i1])
    scale = max(1.0, np.abs(expect).max())
    assert np.max(np.abs(recon.z_plus.coeffs - expect)) <= 1e-12 * scale


def test_local_solves_converge_quickly_on_naca(naca_recon):
    assert len(naca_recon.fallback_elems) == 0
    assert naca_recon.iterations.max() <= 10
    assert np.median(naca_recon.iterations) <= 4


def test_reconstruction_solves_frozen_neighbour_problems(naca_state,
                                                         naca_recon):
    sol, adj = naca_state
    cond = adj.target.conditions
    rich = naca_recon.w_plus.space
    frozen = prolong(sol, rich)
    base_norms = np.zeros(rich.mesh.n_elements)
    r0 = assemble_residual(frozen, cond)
    for e in range(rich.mesh.n_elements):
        i0, i1 = int(rich.elem_offset[e]), int(rich.elem_offset[e + 1])
        base_norms[e] = np.linalg.norm(r0[i0:i1])
    sample = [int(np.argmax(base_norms)), 0, 7, 40, 151, 287]
    for e in sample:
        i0, i1 = int(rich.elem_offset[e]), int(rich.elem_offset[e + 1])
        mixed = frozen.coeffs.copy()
        mixed[i0:i1] = naca_recon.w_plus.coeffs[i0:i1]
        r = assemble_residual(DGSolution(rich, mixed), cond, check=False)
        thresh = max(1e-12, 1e-10 * base_norms[e])
        assert np.linalg.norm(r[i0:i1]) <= 1.5 * thresh


def test_estimate_bounds_and_additivity(naca_state, naca_recon):
    sol, adj = naca_state
    report = estimate(sol, adj, naca_recon, j_ref=0.0)

    rich = naca_recon.w_plus.space
    pf = primal_residual_fields(sol, adj.target.conditions, space=rich)
    df = dual_residual_fields(sol, adj, space=rich)
    zw = projection_remainder(naca_recon.z_plus)
    ww = projection_remainder(naca_recon.w_plus)
    direct = 0.5 * (weak_residual_sum(pf, zw) + weak_residual_sum(df, ww))
    assert abs(report.eta_I - direct) <= 1e-12 * max(1.0, abs(direct))

    assert np.all(report.eta_IIK >= 0.0)
    assert np.all(np.abs(report.eta_IK) <= report.eta_IIK + 1e-15)
    assert abs(report.eta_I) <= report.eta_II
    assert report.j_value == adj.target.pressure_integral(sol)
    assert np.isfinite(report.effectivity)


def test_projection_reconstruction_zero_estimate(naca_state):
    sol, adj = naca_state
    rich = enriched_space(sol.space)
    recon = ReconstructedPair(
        prolong(sol, rich), prolong(adj.z, rich),
        np.zeros(sol.space.mesh.n_elements, dtype=np.int64),
        np.empty(0, dtype=np.int64))
    report = estimate(sol, adj, recon)
    assert report.eta_I == 0.0 and report.eta_II == 0.0
    assert np.all(report.eta_IK == 0.0)
    assert np.all(report.eta_IIK == 0.0)
    assert np.isnan(report.effectivity)
