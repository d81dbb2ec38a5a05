"""Transfer between meshes: projection identities and admissibility rescue."""

import numpy as np
import pytest

from adg import euler
from adg.forms import FlowConditions
from adg.mesh import Mesh, refine_uniform, square_mesh
from adg.space import Space, constant_solution, project
from adg.transfer import enforce_admissible, transfer_solution

COND = FlowConditions(euler.GasParams(1.4), 0.5, 0.0)


def smooth_state(pts):
    """Admissible non-polynomial field with all components varying."""
    x, y = pts[:, 0], pts[:, 1]
    rho = 1.0 + 0.2 * np.sin(2.3 * x) * np.cos(1.7 * y)
    u = 0.3 + 0.1 * x * y
    v = 0.05 * np.cos(3.0 * x)
    p = 1.0 + 0.15 * np.tanh(x - y)
    E = p / 0.4 + 0.5 * rho * (u * u + v * v)
    return np.stack([rho, rho * u, rho * v, E], axis=1)


def poly_state(pts):
    """Degree-2 polynomial in every component, admissible on the unit square."""
    x, y = pts[:, 0], pts[:, 1]
    rho = 2.0 + 0.3 * x - 0.2 * y + 0.1 * x * y
    m1 = 0.2 + 0.05 * x * x
    m2 = -0.1 + 0.04 * y * y
    E = 5.0 + 0.5 * x + 0.3 * y * y
    return np.stack([rho, m1, m2, E], axis=1)


def test_same_mesh_transfer_is_identity():
    mesh = square_mesh(4, skew=0.2).with_degrees(
        np.array([2] * 16 + [3] * 16, dtype=np.int64))
    space = Space(mesh)
    old = project(space, smooth_state)
    moved = transfer_solution(old, Space(mesh), COND)
    assert np.max(np.abs(moved.coeffs - old.coeffs)) < 1e-11 * (
        1.0 + np.max(np.abs(old.coeffs)))


def test_refinement_reproduces_polynomials():
    mesh = square_mesh(3).with_degrees(np.full(18, 2, dtype=np.int64))
    space = Space(mesh)
    old = project(space, poly_state)
    fine = Space(refine_uniform(mesh))
    moved = transfer_solution(old, fine, COND)
    rng = np.random.default_rng(7)
    pts = rng.random((40, 2))
    exact = poly_state(pts)
    for i, pt in enumerate(pts):
        e = _containing_element(fine.mesh, pt)
        got = moved.values_at(e, pt[None, :])[0]
        assert np.max(np.abs(got - exact[i])) < 1e-9


def _containing_element(mesh, pt):
    v = mesh.vertices
    for e, tri in enumerate(mesh.triangles):
        a, b, c = v[tri[0]], v[tri[1]], v[tri[2]]
        s = []
        for p, q in ((a, b), (b, c), (c, a)):
            d = q - p
            s.append(d[0] * (pt[1] - p[1]) - d[1] * (pt[0] - p[0]))
        if min(s) >= -1e-12:
            return e
    raise AssertionError("point outside mesh")


def test_disjoint_meshes_use_nearest_centroid_state():
    mesh = square_mesh(3)
    space = Space(mesh.with_degrees(np.full(18, 2, dtype=np.int64)))
    old = project(space, smooth_state)
    shifted = Mesh(mesh.vertices + np.array([10.0, 0.0]), mesh.triangles,
                   mesh.boundary_edge_map(), mesh.degrees)
    moved = transfer_solution(old, Space(shifted), COND)
    cents = shifted.vertices[shifted.triangles].mean(axis=1)
    old_cents = mesh.vertices[mesh.triangles].mean(axis=1)
    for e in range(shifted.n_elements):
        k = int(np.argmin(np.linalg.norm(old_cents - cents[e], axis=1)))
        want = old.values_at(k, old_cents[k][None, :])[0]
        got = moved.values_at(e, cents[e][None, :])[0]
        assert np.max(np.abs(got - want)) < 1e-11


def test_transfer_output_is_admissible_after_coarsening():
    fine = square_mesh(8).with_degrees(np.full(128, 2, dtype=np.int64))
    space = Space(fine)

    def steep(pts):
        x = pts[:, 0]
        rho = np.where(x < 0.5, 0.05, 2.0) + 0.0 * x
        p = np.where(x < 0.5, 0.05, 2.0)
        E = p / 0.4 + 0.5 * rho * 0.09
        return np.stack([rho, rho * 0.3, 0.0 * x, E], axis=1)

    old = project(space, steep)
    coarse = Space(square_mesh(2).with_degrees(np.full(8, 3, dtype=np.int64)))
    moved = transfer_solution(old, coarse, COND)
    for e in range(coarse.mesh.n_elements):
        cls = coarse.class_of[3]
        pos = coarse.elem_class_pos[e]
        vals = moved.values_at(e, cls.vol_pts[pos])
        assert np.all(euler.admissible_mask(vals, COND.gas))


def test_enforce_admissible_blends_toward_mean():
    mesh = square_mesh(2).with_degrees(np.full(8, 1, dtype=np.int64))
    space = Space(mesh)
    sol = constant_solution(space, np.array([1.0, 0.1, 0.0, 2.0]))
    # Slam a huge linear density mode onto one element: negative density
    # somewhere in the closure.
    off = space.elem_offset[3]
    sol.coeffs[off + 1] = 50.0
    fixed = enforce_admissible(sol, COND)
    cls = space.class_of[1]
    for e in range(mesh.n_elements):
        vals = fixed.values_at(e, cls.vol_pts[space.elem_class_pos[e]])
        assert np.all(euler.admissible_mask(vals, COND.gas))
    # The constant mode survives: means are untouched by the blend.
    assert abs(fixed.coeffs[off] - sol.coeffs[off]) < 1e-14


def test_enforce_admissible_free_stream_last_resort():
    mesh = square_mesh(2).with_degrees(np.full(8, 1, dtype=np.int64))
    space = Space(mesh)
    sol = constant_solution(space, np.array([1.0, 0.1, 0.0, 2.0]))
    off = space.elem_offset[5]
    nm = space.elem_nm[5]
    sol.coeffs[off] = -sol.coeffs[off]          # negative mean density
    fixed = enforce_admissible(sol, COND)
    block = space.elem_coeffs(fixed.coeffs, 5)
    cent = mesh.vertices[mesh.triangles[5]].mean(axis=0)
    got = fixed.values_at(5, cent[None, :])[0]
    assert np.max(np.abs(got - COND.free_stream)) < 1e-12
    assert np.max(np.abs(block[:, 1:])) == 0.0


def test_transfer_conserves_totals_on_refinement():
    mesh = square_mesh(4).with_degrees(np.full(32, 2, dtype=np.int64))
    space = Space(mesh)
    old = project(space, smooth_state)
    fine = Space(refine_uniform(mesh))
    moved = transfer_solution(old, fine, COND)

    def total(sol):
        tot = np.zeros(4)
        for cls in sol.space.classes:
            vals = np.einsum('eqm,ecm->eqc', cls.basis[:, :, :cls.nm],
                             _blocks(sol, cls))
            tot += np.einsum('eq,eqc->c', cls.vol_w, vals)
        return tot

    def _blocks(sol, cls):
        return sol.coeffs[cls.dof.transpose(0, 1, 2)]

    assert np.max(np.abs(total(moved) - total(old))) < 1e-10
