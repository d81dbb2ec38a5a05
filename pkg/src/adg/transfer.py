"""Solution transfer between meshes by elementwise least squares.

Each target element is projected against the source solution on the
geometric intersection with the source elements: clipped polygons are
fan-triangulated, mapped quadrature integrates basis-basis and
basis-solution products, and the covered-area normal equations are solved
per element.  Uncovered elements fall back to the nearest source centroid
state, and transferred states are rescaled toward the element mean until
admissible so the result is always a usable initial guess.
"""

import numpy as np
from shapely import STRtree
from shapely.geometry import Polygon

from . import euler
from .quadrature import edge_rule, triangle_rule
from .space import DGSolution, N_COMP

# Clip areas below this fraction of the target element are slivers whose
# quadrature contributes only noise.
_AREA_CUT = 1e-12


def _fan_quadrature(poly, degree):
    """Map a triangle rule of the given degree onto a convex polygon."""
    ring = np.asarray(poly.exterior.coords)[:-1]
    if len(ring) < 3:
        return np.zeros((0, 2)), np.zeros(0)
    ref_pts, ref_w = triangle_rule(degree)
    c = ring.mean(axis=0)
    pts = []
    wts = []
    for i in range(len(ring)):
        a, b = ring[i], ring[(i + 1) % len(ring)]
        e1, e2 = a - c, b - c
        area = 0.5 * (e1[0] * e2[1] - e1[1] * e2[0])
        if abs(area) < _AREA_CUT:
            continue
        pts.append(c + ref_pts[:, 0, None] * e1 + ref_pts[:, 1, None] * e2)
        wts.append(2.0 * area * ref_w)
    if not pts:
        return np.zeros((0, 2)), np.zeros(0)
    return np.vstack(pts), np.concatenate(wts)


def _clip_polygons(geom):
    """Polygon pieces of an intersection result, ignoring lower-dimensional parts."""
    if geom.is_empty:
        return []
    if isinstance(geom, Polygon):
        return [geom]
    return [g for g in getattr(geom, 'geoms', []) if isinstance(g, Polygon)]


def _check_points(space, e):
    """Volume plus edge quadrature points, where assemblies see the state."""
    cls = space.class_of[int(space.mesh.degrees[e])]
    pos = space.elem_class_pos[e]
    pts = [cls.vol_pts[pos]]
    tri = space.mesh.triangles[e]
    s, _ = edge_rule(cls.degree + 3)
    for i in range(3):
        a = space.mesh.vertices[tri[i]]
        b = space.mesh.vertices[tri[(i + 1) % 3]]
        pts.append(a[None, :] + s[:, None] * (b - a)[None, :])
    return np.vstack(pts)


def enforce_admissible(sol, cond):
    """Rescale higher modes toward the element mean until states admit.

    The admissible set is convex, so shrinking the deviation from an
    admissible mean always succeeds; an element whose mean itself is outside
    the set is replaced by the free stream.
    """
    space = sol.space
    out = sol.copy()
    w_inf = cond.free_stream
    for e in range(space.mesh.n_elements):
        pts = _check_points(space, e)
        phi = space.basis_at(e, pts)
        coef = space.elem_coeffs(out.coeffs, e)
        if np.all(euler.admissible_mask(phi @ coef.T, cond.gas)):
            continue
        mean_ok = euler.admissible_mask(phi[:1, :1] @ coef[:, :1].T,
                                        cond.gas)[0]
        done = False
        if mean_ok:
            for theta in 0.5 ** np.arange(1, 9):
                cand = coef.copy()
                cand[:, 1:] *= theta
                if np.all(euler.admissible_mask(phi @ cand.T, cond.gas)):
                    coef[:] = cand
                    done = True
                    break
        if not done:
            coef[:] = 0.0
            coef[:, 0] = w_inf / phi[0, 0]
        off = space.elem_offset[e]
        nm = space.elem_nm[e]
        out.coeffs[off:off + N_COMP * nm] = coef.reshape(-1)
    return out


def transfer_solution(old, new_space, cond):
    """Least-squares transfer of a solution onto a space over another mesh."""
    old_space = old.space
    old_mesh = old_space.mesh
    new_mesh = new_space.mesh

    old_polys = [Polygon(old_mesh.vertices[tri])
                 for tri in old_mesh.triangles]
    tree = STRtree(old_polys)
    old_centroids = old_mesh.vertices[old_mesh.triangles].mean(axis=1)

    coeffs = np.zeros(new_space.n_dofs)
    for e in range(new_mesh.n_elements):
        p_new = int(new_mesh.degrees[e])
        nm = int(new_space.elem_nm[e])
        target = Polygon(new_mesh.vertices[new_mesh.triangles[e]])
        area = target.area

        gram = np.zeros((nm, nm))
        rhs = np.zeros((nm, N_COMP))
        covered = 0.0
        for k in tree.query(target):
            k = int(k)
            clip = target.intersection(old_polys[k])
            degree = 2 * max(p_new, int(old_mesh.degrees[k]))
            for poly in _clip_polygons(clip):
                pts, w = _fan_quadrature(poly, degree)
                if len(w) == 0:
                    continue
                phi = new_space.basis_at(e, pts)
                u = old.values_at(k, pts)
                gram += np.einsum('q,qi,qj->ij', w, phi, phi)
                rhs += np.einsum('q,qi,qa->ia', w, phi, u)
                covered += poly.area

        off = new_space.elem_offset[e]
        if covered <= _AREA_CUT * area:
            # No overlap at all: copy the nearest source centroid state into
            # the constant mode.
            c = target.centroid
            k = int(np.argmin(np.hypot(old_centroids[:, 0] - c.x,
                                       old_centroids[:, 1] - c.y)))
            state = old.values_at(k, old_centroids[k][None, :])[0]
            v0 = new_space.basis_at(e, np.array([[c.x, c.y]]))[0, 0]
            block = np.zeros((N_COMP, nm))
            block[:, 0] = state / v0
            coeffs[off:off + N_COMP * nm] = block.reshape(-1)
            continue

        # lstsq tolerates the rank deficiency of sliver coverage; the
        # unconstrained modes get the minimum-norm value zero.
        sol, _, _, _ = np.linalg.lstsq(gram, rhs, rcond=None)
        coeffs[off:off + N_COMP * nm] = sol.T.reshape(-1)

    return enforce_admissible(DGSolution(new_space, coeffs), cond)
