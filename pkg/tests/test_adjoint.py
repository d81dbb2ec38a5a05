"""Transpose-system duality, dual residual identities, wall diagnostics."""

import numpy as np
import pytest

from adg import euler
from adg.adjoint import (AdjointResidualForm, AdjointSolution,
                         adjoint_residual, adjoint_wall_bc_check,
                         solve_adjoint, wall_adjacent_jumps)
from adg.forms import FlowConditions, TargetFunctional, assemble_system
from adg.mesh import WALL, square_mesh
from adg.meshgen import naca_omesh
from adg.solver import free_stream_guess, solve_steady
from adg.space import DGSolution, Space, project

GAS = euler.GasParams()


@pytest.fixture(scope='module')
def primal_state():
    cond = FlowConditions(GAS, 0.5, np.deg2rad(1.0))
    space = Space(naca_omesh(24, 6, 10.0, 0.05))
    sol, hist = solve_steady(space, cond)
    assert hist.converged
    return sol, cond


def test_duality_identity(primal_state):
    sol, cond = primal_state
    target = TargetFunctional('drag', cond)
    adj = solve_adjoint(sol, target)
    assert adj.rel_residual <= 1e-10
    system, _ = assemble_system(sol, cond)
    g = target.gradient(sol)
    z = adj.z.coeffs
    rng = np.random.default_rng(3)
    for _ in range(100):
        u = rng.standard_normal(sol.space.n_dofs)
        mu = system.matvec(u)
        lhs = float(mu @ z)
        rhs = float(g @ u)
        bound = 1e-9 * (np.linalg.norm(mu) * np.linalg.norm(z) + abs(rhs))
        assert abs(lhs - rhs) <= bound


def test_zero_gradient_gives_zero_adjoint():
    cond = FlowConditions(GAS, 0.5, 0.0)
    space = Space(square_mesh(3, skew=0.2))
    sol, hist = solve_steady(space, cond)
    assert hist.converged and hist.iterations == 0
    adj = solve_adjoint(sol, TargetFunctional('lift', cond))
    assert adj.rel_residual == 0.0
    assert np.all(adj.z.coeffs == 0.0)


def test_galerkin_orthogonality(primal_state):
    sol, cond = primal_state
    target = TargetFunctional('lift', cond)
    adj = solve_adjoint(sol, target)
    form = AdjointResidualForm(sol, adj)
    g = target.gradient(sol)
    rng = np.random.default_rng(11)
    for _ in range(20):
        v = DGSolution(sol.space, rng.standard_normal(sol.space.n_dofs))
        bound = 1e-9 * np.linalg.norm(g) * np.linalg.norm(v.coeffs)
        assert abs(form(v)) <= bound


def test_residual_linear_in_test_and_nonzero_when_enriched(primal_state):
    sol, cond = primal_state
    adj = solve_adjoint(sol, TargetFunctional('drag', cond))
    mesh = sol.space.mesh
    rich = Space(mesh.with_degrees(mesh.degrees + 1))
    form = AdjointResidualForm(sol, adj, rich)
    rng = np.random.default_rng(5)
    seen = []
    for _ in range(10):
        v = DGSolution(rich, rng.standard_normal(rich.n_dofs))
        rv = form(v)
        scaled = form(DGSolution(rich, 2.5 * v.coeffs))
        assert abs(scaled - 2.5 * rv) <= 1e-12 * max(1.0, abs(rv))
        seen.append(abs(rv))
    assert max(seen) > 1e-8


def test_adjoint_residual_matches_form(primal_state):
    sol, cond = primal_state
    adj = solve_adjoint(sol, TargetFunctional('drag', cond))
    mesh = sol.space.mesh
    rich = Space(mesh.with_degrees(mesh.degrees + 1))
    rng = np.random.default_rng(17)
    v = DGSolution(rich, rng.standard_normal(rich.n_dofs))
    form = AdjointResidualForm(sol, adj, rich)
    assert adjoint_residual(sol, adj, v) == pytest.approx(form(v), rel=1e-12)


def wall_defect_oracle(z, target, npts=8):
    """Independent wall-defect norm from raw mesh edges and Gauss nodes."""
    mesh = z.space.mesh
    t, wt = np.polynomial.legendre.leggauss(npts)
    t = 0.5 * (t + 1.0)
    wt = 0.5 * wt
    total = 0.0
    for f, (va, vb, e) in enumerate(mesh.boundary_faces):
        if mesh.boundary_tags[f] != WALL:
            continue
        pa, pb = mesh.vertices[va], mesh.vertices[vb]
        seg = pb - pa
        length = np.linalg.norm(seg)
        n = np.array([seg[1], -seg[0]]) / length
        pts = pa[None, :] + t[:, None] * seg[None, :]
        zv = z.values_at(int(e), pts)
        th = target.theta(pts)
        defect = n[0] * zv[:, 1] + n[1] * zv[:, 2] - th @ n
        total += length * float(wt @ defect ** 2)
    return np.sqrt(total)


def test_wall_bc_check_matches_independent_quadrature(primal_state):
    sol, cond = primal_state
    target = TargetFunctional('moment', cond)
    rng = np.random.default_rng(23)
    z = DGSolution(sol.space, rng.standard_normal(sol.space.n_dofs))
    adj = solve_adjoint(sol, target)
    zero = DGSolution(sol.space, np.zeros(sol.space.n_dofs))
    for state in (z, adj.z, zero):
        got = adjoint_wall_bc_check(AdjointSolution(state, target, 0.0),
                                    target)
        want = wall_defect_oracle(state, target)
        assert got == pytest.approx(want, rel=1e-11, abs=1e-13)


def test_inconsistent_gradient_changes_dual(primal_state):
    sol, cond = primal_state
    target = TargetFunctional('drag', cond)
    smooth = solve_adjoint(sol, target)
    rough = solve_adjoint(sol, target, inconsistent=True)
    assert rough.inconsistent
    diff = np.linalg.norm(rough.z.coeffs - smooth.z.coeffs)
    assert diff > 1e-6 * np.linalg.norm(smooth.z.coeffs)
    jumps = wall_adjacent_jumps(smooth.z)
    assert len(jumps) > 0 and np.all(jumps >= 0.0)
