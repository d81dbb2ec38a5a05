"""Broken polynomial spaces with per-element orthonormal modal bases.

Each element maps affinely onto a unit-area equilateral frame; monomials in
that frame are orthonormalized by QR against the element's volume quadrature.
Because the quadrature integrates the relevant products exactly, the resulting
basis is the L2-orthonormal hierarchy: truncating trailing modes is the same
as projecting onto the lower-degree space.  Tables of basis values and
gradients at volume and face quadrature points are precomputed, grouped by
polynomial degree so assembly can run batched.
"""

from dataclasses import dataclass

import numpy as np

from .mesh import REF_EQUILATERAL
from .quadrature import edge_rule, monomial_exponents, n_modes, triangle_rule

N_COMP = 4

_REF_E = np.stack([REF_EQUILATERAL[1] - REF_EQUILATERAL[0],
                   REF_EQUILATERAL[2] - REF_EQUILATERAL[0]], axis=1)
_REF_CENTER = REF_EQUILATERAL.mean(axis=0)


def _monomial_tables(xi, exponents):
    """Values and gradients of frame monomials at points xi (..., 2)."""
    ex = exponents[:, 0]
    ey = exponents[:, 1]
    px = xi[..., 0, None] ** ex
    py = xi[..., 1, None] ** ey
    vals = px * py
    # d/dxi of xi^e, with the e = 0 column forced to zero
    dx = np.where(ex > 0, ex * xi[..., 0, None] ** np.maximum(ex - 1, 0), 0.0) * py
    dy = px * np.where(ey > 0, ey * xi[..., 1, None] ** np.maximum(ey - 1, 0), 0.0)
    return vals, np.stack([dx, dy], axis=-1)


@dataclass
class ElementClass:
    """All elements sharing one polynomial degree, with batched tables."""

    degree: int
    elems: np.ndarray          # (ne,) element indices
    nm: int                    # active modes per component
    nm_rich: int               # modes including the degree + 1 enrichment
    vol_pts: np.ndarray        # (ne, nq, 2) physical quadrature points
    vol_w: np.ndarray          # (ne, nq) physical weights
    basis: np.ndarray          # (ne, nq, nm_rich)
    grad: np.ndarray           # (ne, nq, nm_rich, 2) physical gradients
    dof: np.ndarray            # (ne, 4, nm) global dof indices


@dataclass
class InteriorFaceGroup:
    deg_l: int
    deg_r: int
    faces: np.ndarray          # (nf,) indices into mesh.interior_faces
    elems_l: np.ndarray
    elems_r: np.ndarray
    pts: np.ndarray            # (nf, nq, 2)
    w: np.ndarray              # (nf, nq) physical weights
    normals: np.ndarray        # (nf, 2) out of the left element
    trace_l: np.ndarray        # (nf, nq, nm_l_rich)
    trace_r: np.ndarray
    dof_l: np.ndarray          # (nf, 4, nm_l)
    dof_r: np.ndarray


@dataclass
class BoundaryFaceGroup:
    degree: int
    tag: int
    faces: np.ndarray          # (nf,) indices into mesh.boundary_faces
    elems: np.ndarray
    pts: np.ndarray
    w: np.ndarray
    normals: np.ndarray        # outward
    trace: np.ndarray          # (nf, nq, nm_rich)
    dof: np.ndarray


class Space:
    """Discretization tables for one mesh with per-element degrees."""

    def __init__(self, mesh, quad_bump=0):
        self.mesh = mesh
        self.quad_bump = int(quad_bump)
        degrees = mesh.degrees
        nel = mesh.n_elements

        v = mesh.vertices
        tri = mesh.triangles
        amat = np.stack([v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]]],
                        axis=2)
        # frame map xi = jac (x - v0) + shift sends the element onto the
        # centered unit-area equilateral, keeping monomials well conditioned
        # on anisotropic elements
        self.frame_jac = np.einsum('ij,ejk->eik', _REF_E, np.linalg.inv(amat))
        self.frame_shift = REF_EQUILATERAL[0] - _REF_CENTER

        self.elem_nm = np.array([n_modes(p) for p in degrees], dtype=np.int64)
        self.elem_offset = np.zeros(nel + 1, dtype=np.int64)
        np.cumsum(N_COMP * self.elem_nm, out=self.elem_offset[1:])
        self.n_dofs = int(self.elem_offset[-1])

        self.classes = []
        self.class_of = {}
        self.elem_class_pos = np.zeros(nel, dtype=np.int64)
        self._rinv = {}
        for p in sorted(set(int(d) for d in degrees)):
            cls = self._build_class(p, np.where(degrees == p)[0])
            self.class_of[p] = cls
            self.classes.append(cls)
            self.elem_class_pos[cls.elems] = np.arange(len(cls.elems))

        self.interior_groups = self._build_interior_groups()
        self.boundary_groups = self._build_boundary_groups()
        self._cache = {}

    # -- construction ------------------------------------------------------

    def _frame_coords(self, elems, pts):
        rel = pts - self.mesh.vertices[self.mesh.triangles[elems, 0]][:, None, :]
        return np.einsum('eij,eqj->eqi', self.frame_jac[elems], rel) + self.frame_shift

    def _build_class(self, p, elems):
        nm = n_modes(p)
        nm_rich = n_modes(p + 1)
        ref_pts, ref_w = triangle_rule(2 * p + 5 + self.quad_bump)
        nq = len(ref_w)

        tri = self.mesh.triangles[elems]
        v0 = self.mesh.vertices[tri[:, 0]]
        e1 = self.mesh.vertices[tri[:, 1]] - v0
        e2 = self.mesh.vertices[tri[:, 2]] - v0
        pts = (v0[:, None, :] + ref_pts[None, :, 0, None] * e1[:, None, :]
               + ref_pts[None, :, 1, None] * e2[:, None, :])
        w = 2.0 * self.mesh.areas[elems][:, None] * ref_w[None, :]

        exps = monomial_exponents(p + 1)
        xi = self._frame_coords(elems, pts)
        vals, dxi = _monomial_tables(xi, exps)

        a = np.sqrt(w)[:, :, None] * vals
        _, r = np.linalg.qr(a)
        sign = np.where(np.diagonal(r, axis1=1, axis2=2) < 0, -1.0, 1.0)
        r = r * sign[:, :, None]
        rinv = np.linalg.inv(r)

        basis = vals @ rinv
        # physical gradients: d/dx = jac^T d/dxi
        gphys = np.einsum('eqms,esi->eqmi', dxi, self.frame_jac[elems])
        grad = np.einsum('eqms,emj->eqjs', gphys, rinv)

        self._rinv[p] = rinv
        return ElementClass(p, elems, nm, nm_rich, pts, w, basis, grad,
                            self._elem_dof(elems, nm))

    def _elem_dof(self, elems, nm):
        return (self.elem_offset[elems][:, None, None]
                + np.arange(N_COMP)[None, :, None] * nm
                + np.arange(nm)[None, None, :]).astype(np.int64)

    def _face_points(self, va, vb, npts):
        t, wt = edge_rule(npts)
        pa = self.mesh.vertices[va]
        pb = self.mesh.vertices[vb]
        seg = pb - pa
        length = np.linalg.norm(seg, axis=1)
        pts = pa[:, None, :] + t[None, :, None] * seg[:, None, :]
        w = length[:, None] * wt[None, :]
        normals = np.stack([seg[:, 1], -seg[:, 0]], axis=1) / length[:, None]
        return pts, w, normals

    def _trace_table(self, elems, pts, p):
        xi = self._frame_coords(elems, pts)
        vals, _ = _monomial_tables(xi, monomial_exponents(p + 1))
        pos = self.elem_class_pos[elems]
        return vals @ self._rinv[p][pos]

    def _build_interior_groups(self):
        faces = self.mesh.interior_faces
        if len(faces) == 0:
            return []
        degrees = self.mesh.degrees
        pl = degrees[faces[:, 2]]
        pr = degrees[faces[:, 3]]
        groups = []
        for key in sorted(set(zip(pl.tolist(), pr.tolist()))):
            mask = (pl == key[0]) & (pr == key[1])
            idx = np.where(mask)[0]
            tl = faces[idx, 2]
            tr = faces[idx, 3]
            npts = max(key) + 4 + self.quad_bump
            pts, w, normals = self._face_points(faces[idx, 0], faces[idx, 1], npts)
            groups.append(InteriorFaceGroup(
                key[0], key[1], idx, tl, tr, pts, w, normals,
                self._trace_table(tl, pts, key[0]),
                self._trace_table(tr, pts, key[1]),
                self._elem_dof(tl, n_modes(key[0])),
                self._elem_dof(tr, n_modes(key[1]))))
        return groups

    def _build_boundary_groups(self):
        faces = self.mesh.boundary_faces
        if len(faces) == 0:
            return []
        degrees = self.mesh.degrees
        pe = degrees[faces[:, 2]]
        groups = []
        for key in sorted(set(zip(pe.tolist(), self.mesh.boundary_tags.tolist()))):
            mask = (pe == key[0]) & (self.mesh.boundary_tags == key[1])
            idx = np.where(mask)[0]
            elems = faces[idx, 2]
            npts = key[0] + 4 + self.quad_bump
            pts, w, normals = self._face_points(faces[idx, 0], faces[idx, 1], npts)
            groups.append(BoundaryFaceGroup(
                key[0], key[1], idx, elems, pts, w, normals,
                self._trace_table(elems, pts, key[0]),
                self._elem_dof(elems, n_modes(key[0]))))
        return groups

    # -- pointwise evaluation ---------------------------------------------

    def basis_at(self, e, pts, rich=False):
        """Basis values of element e at physical points (m, 2)."""
        p = int(self.mesh.degrees[e])
        xi = self._frame_coords(np.array([e]), pts[None, :, :])[0]
        vals, _ = _monomial_tables(xi, monomial_exponents(p + 1))
        tab = vals @ self._rinv[p][self.elem_class_pos[e]]
        return tab if rich else tab[:, :n_modes(p)]

    def grad_basis_at(self, e, pts, rich=False):
        p = int(self.mesh.degrees[e])
        xi = self._frame_coords(np.array([e]), pts[None, :, :])[0]
        _, dxi = _monomial_tables(xi, monomial_exponents(p + 1))
        gphys = np.einsum('qms,si->qmi', dxi, self.frame_jac[e])
        tab = np.einsum('qms,mj->qjs', gphys, self._rinv[p][self.elem_class_pos[e]])
        return tab if rich else tab[:, :n_modes(p), :]

    def elem_coeffs(self, coeffs, e):
        nm = self.elem_nm[e]
        off = self.elem_offset[e]
        return coeffs[off:off + N_COMP * nm].reshape(N_COMP, nm)


@dataclass
class DGSolution:
    """Coefficient vector over a Space, element-major, component blocks."""

    space: Space
    coeffs: np.ndarray

    def copy(self):
        return DGSolution(self.space, self.coeffs.copy())

    def elem(self, e):
        return self.space.elem_coeffs(self.coeffs, e)

    def values_at(self, e, pts):
        """State values of element e at physical points (m, 2) -> (m, 4)."""
        return self.space.basis_at(e, pts) @ self.elem(e).T


def zero_solution(space):
    return DGSolution(space, np.zeros(space.n_dofs))


def project(space, fn):
    """L2 projection of fn(points (m, 2)) -> (m, 4) onto the space."""
    out = np.zeros(space.n_dofs)
    for cls in space.classes:
        ne, nq, _ = cls.vol_pts.shape
        f = np.asarray(fn(cls.vol_pts.reshape(-1, 2)), dtype=float)
        f = f.reshape(ne, nq, N_COMP)
        coef = np.einsum('eq,eqa,eqj->eaj', cls.vol_w, f, cls.basis[:, :, :cls.nm])
        out[cls.dof] = coef
    return DGSolution(space, out)


def constant_solution(space, w):
    """Exact constant state: only the degree-zero mode of each component."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(space.n_dofs)
    for cls in space.classes:
        v0 = cls.basis[:, 0, 0]
        out[cls.dof[:, :, 0]] = w[None, :] / v0[:, None]
    return DGSolution(space, out)


def class_coeffs(sol, cls):
    """(ne, 4, nm) coefficient block for one element class."""
    return sol.coeffs[cls.dof]


def volume_values(sol):
    """State at volume quadrature nodes, one (ne, nq, 4) block per class."""
    out = []
    for cls in sol.space.classes:
        c = sol.coeffs[cls.dof]
        out.append(np.einsum('eaj,eqj->eqa', c, cls.basis[:, :, :cls.nm]))
    return out

def trace_values(sol, group, side='l'):
    if isinstance(group, BoundaryFaceGroup):
        c = sol.coeffs[group.dof]
        return np.einsum('faj,fqj->fqa', c, group.trace[:, :, :c.shape[2]])
    if side == 'l':
        c = sol.coeffs[group.dof_l]
        return np.einsum('faj,fqj->fqa', c, group.trace_l[:, :, :c.shape[2]])
    c = sol.coeffs[group.dof_r]
    return np.einsum('faj,fqj->fqa', c, group.trace_r[:, :, :c.shape[2]])


def prolong(sol, target):
    """Carry a solution to another space on the same mesh.

    Shared modes copy over; because the basis is the L2-orthonormal
    hierarchy this is exact injection upward and L2 projection downward.
    """
    same_mesh = (np.array_equal(target.mesh.triangles, sol.space.mesh.triangles)
                 and np.array_equal(target.mesh.vertices, sol.space.mesh.vertices))
    if not same_mesh:
        raise ValueError("prolong requires spaces on one mesh")
    out = np.zeros(target.n_dofs)
    src = sol.space
    for e in range(src.mesh.n_elements):
        nm = min(src.elem_nm[e], target.elem_nm[e])
        sc = src.elem_coeffs(sol.coeffs, e)
        tc = target.elem_coeffs(out, e)
        tc[:, :nm] = sc[:, :nm]
    return DGSolution(target, out)


def cell_means(sol):
    """Mean state per element, (n_elem, 4)."""
    out = np.zeros((sol.space.mesh.n_elements, N_COMP))
    for cls in sol.space.classes:
        c = sol.coeffs[cls.dof]
        vals = np.einsum('eaj,eqj->eqa', c, cls.basis[:, :, :cls.nm])
        out[cls.elems] = (np.einsum('eq,eqa->ea', cls.vol_w, vals)
                         / cls.vol_w.sum(axis=1)[:, None])
    return out
