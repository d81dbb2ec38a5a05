"""Metric-driven remeshing by local edge operations.

Per-element (nu, sigma, phi) targets induce a piecewise-constant Riemannian
metric (nearest source centroid); under it a conforming element has all three
edge lengths equal to one.  Each pass splits metric-long edges, collapses
short ones, flips toward the metric Delaunay configuration, and relaxes
interior vertices; the loop stops once no split or collapse fires.  Boundary
vertices created by splits are projected onto the geometry, and polynomial
degrees are carried over from the metric-nearest source element.
"""

import numpy as np
from scipy.spatial import cKDTree

from .errors import NegativeArea, NonConforming, RemeshFailure
from .geometry import PolylineGeometry
from .mesh import FARFIELD, TAG_NAMES, WALL, Mesh

METRIC_C = 4.0 / np.sqrt(3.0)
IDEAL_AREA = np.sqrt(3.0) / 4.0  # metric area of a target-conforming element

EDGE_SPLIT = 1.45
EDGE_COLLAPSE = 0.68
AREA_SPLIT = 1.5
NEW_EDGE_MAX = 1.45
FLIP_MARGIN = 0.02
MAX_PASSES = 30
GROWTH_CAP = 50
CORNER_COS = np.cos(np.deg2rad(25.0))


class MetricField:
    """Anisotropic metric and degree map sampled by nearest source centroid."""

    def __init__(self, centroids, tensors, degrees):
        self.centroids = np.asarray(centroids, dtype=float)
        self.tensors = np.asarray(tensors, dtype=float)
        self.degrees = np.asarray(degrees, dtype=np.int64)
        self._tree = cKDTree(self.centroids)

    def at(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        _, idx = self._tree.query(pts)
        return self.tensors[idx]

    def lengths(self, pa, pb):
        """Metric lengths of segments, metric frozen at each midpoint."""
        pa = np.atleast_2d(np.asarray(pa, dtype=float))
        pb = np.atleast_2d(np.asarray(pb, dtype=float))
        m = self.at(0.5 * (pa + pb))
        d = pb - pa
        return np.sqrt(np.einsum('ei,eij,ej->e', d, m, d))

    def areas(self, verts, tris):
        """Metric areas of triangles, metric frozen at each centroid."""
        v = verts[tris]
        d1 = v[:, 1] - v[:, 0]
        d2 = v[:, 2] - v[:, 0]
        phys = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        m = self.at(v.mean(axis=1))
        det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
        return phys * np.sqrt(np.maximum(det, 0.0))

    def degree_at(self, pts):
        """Degree of the metric-nearest source element for each point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        k = min(8, len(self.centroids))
        _, cand = self._tree.query(pts, k=k)
        cand = np.atleast_2d(cand)
        d = pts[:, None, :] - self.centroids[cand]
        dist = np.einsum('eki,ekij,ekj->ek', d, self.tensors[cand], d)
        pick = cand[np.arange(len(pts)), np.argmin(dist, axis=1)]
        return self.degrees[pick]


def metric_from_targets(mesh, targets):
    """Metric field realizing per-element targets with attributes nu/sigma/phi/p."""
    n = mesh.n_elements
    nu = np.empty(n)
    sigma = np.empty(n)
    phi = np.empty(n)
    deg = np.empty(n, dtype=np.int64)
    seen = np.zeros(n, dtype=bool)
    items = targets.items() if isinstance(targets, dict) else enumerate(targets)
    for e, t in items:
        nu[e], sigma[e], phi[e], deg[e] = t.nu, t.sigma, t.phi, t.p
        seen[e] = True
    if not seen.all():
        raise ValueError(f"targets missing for {int((~seen).sum())} elements")
    if np.any(nu <= 0.0) or np.any(sigma < 1.0) or np.any(deg < 1):
        raise ValueError("targets require nu > 0, sigma >= 1, p >= 1")
    c, s = np.cos(phi), np.sin(phi)
    u = np.stack([c, s], axis=1)           # elongation axis, size sqrt(c nu sigma)
    v = np.stack([-s, c], axis=1)
    lam1 = 1.0 / (METRIC_C * nu * sigma)
    lam2 = sigma / (METRIC_C * nu)
    tensors = (lam1[:, None, None] * u[:, :, None] * u[:, None, :]
               + lam2[:, None, None] * v[:, :, None] * v[:, None, :])
    return MetricField(mesh.centroids, tensors, deg)


def band_fraction(mesh, field):
    """Fraction of edges whose metric length lies in [1/sqrt2, sqrt2]."""
    a, b = _unique_edges(mesh.triangles)
    ell = field.lengths(mesh.vertices[a], mesh.vertices[b])
    # Closed interval with roundoff slack: exact halving or doubling puts
    # edges precisely on the endpoints.
    lo, hi = 1.0 / np.sqrt(2.0), np.sqrt(2.0)
    slack = 1e-9
    return float(np.mean((ell >= lo * (1 - slack)) & (ell <= hi * (1 + slack))))


def remesh(mesh, targets, geometry=None):
    """Rebuild a mesh so its elements approximate the target metric.

    targets maps every element to an object with nu, sigma, phi, p; degrees
    of the output come from the metric-nearest source element.  Wall and
    far-field vertices created by refinement are projected onto the geometry
    (a polyline copy of the current boundary when none is given).
    """
    field = metric_from_targets(mesh, targets)
    if geometry is None:
        geometry = _polyline_geometry(mesh)
    verts = mesh.vertices.copy()
    tris = mesh.triangles.copy()
    bmap = dict(mesh.boundary_edge_map())
    corners = _corner_vertices(verts, bmap, geometry)
    cap = max(2000, GROWTH_CAP * len(tris))
    area_floor = 1e-13 * float(np.median(mesh.areas))

    for _ in range(MAX_PASSES):
        verts, tris, bmap, nsplit = _split_pass(verts, tris, bmap, field, geometry)
        if len(tris) > cap:
            raise RemeshFailure(
                f"triangle count {len(tris)} exceeded {cap}; targets demand "
                "more refinement than the growth cap allows")
        verts, tris, bmap, ncoll = _collapse_pass(
            verts, tris, bmap, field, corners, area_floor)
        tris = _flip_pass(verts, tris, bmap, field, area_floor)
        verts = _smooth_pass(verts, tris, bmap, field, area_floor)
        if nsplit == 0 and ncoll == 0:
            break
    tris = _flip_pass(verts, tris, bmap, field, area_floor)
    verts = _smooth_pass(verts, tris, bmap, field, area_floor)

    verts, tris, bmap = _compact(verts, tris, bmap)
    cen = verts[tris].mean(axis=1)
    degrees = field.degree_at(cen)
    try:
        return Mesh(verts, tris, bmap, degrees)
    except (NonConforming, NegativeArea) as err:
        raise RemeshFailure(f"local operations corrupted the mesh: {err}") from err


# -- helpers ---------------------------------------------------------------

def _polyline_geometry(mesh):
    segments = {}
    for (a, b, _t), tag in zip(mesh.boundary_faces, mesh.boundary_tags):
        seg = np.stack([mesh.vertices[a], mesh.vertices[b]])
        segments.setdefault(TAG_NAMES[int(tag)], []).append(seg)
    return PolylineGeometry({k: np.array(v) for k, v in segments.items()})


def _unique_edges(tris):
    e = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    e = np.sort(e, axis=1)
    e = np.unique(e, axis=0)
    return e[:, 0], e[:, 1]


def _corner_vertices(verts, bmap, geometry):
    """Boundary vertices the collapse pass must never remove.

    A vertex is a corner when its two boundary edges turn by more than the
    threshold angle, or when it sits on a geometry-declared corner (the
    trailing edge).  The far-field circle and smooth wall stay collapsible.
    """
    incident = {}
    for (a, b), tag in bmap.items():
        incident.setdefault(a, []).append((b, tag))
        incident.setdefault(b, []).append((a, tag))
    corners = set()
    for v, edges in incident.items():
        if len(edges) != 2:
            corners.add(v)
            continue
        (o1, t1), (o2, t2) = edges
        if t1 != t2:
            corners.add(v)
            continue
        d1 = verts[o1] - verts[v]
        d2 = verts[o2] - verts[v]
        cosang = abs(np.dot(d1, d2)) / max(np.linalg.norm(d1) * np.linalg.norm(d2),
                                           1e-300)
        if cosang < CORNER_COS:
            corners.add(v)
    params = geometry.wall_corner_params()
    if len(params) and incident:
        pts = geometry.wall_point(params) if hasattr(geometry, 'wall_point') else None
        if pts is not None:
            ids = np.array(sorted(incident))
            d2 = ((verts[ids][:, None, :] - np.atleast_2d(pts)[None]) ** 2).sum(axis=2)
            corners.update(int(i) for i in ids[np.min(d2, axis=1) < 1e-12])
    return corners


def _metric_cuts(pa, pb, n, field):
    """n-1 interior points splitting segment pa-pb into equal metric arcs."""
    ts = np.linspace(0.0, 1.0, 4 * n + 1)
    pts = pa[None, :] + ts[:, None] * (pb - pa)[None, :]
    seg = field.lengths(pts[:-1], pts[1:])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0.0:
        frac = np.linspace(0.0, 1.0, n + 1)[1:-1]
    else:
        frac = np.interp(np.arange(1, n) / n * cum[-1], cum, ts)
    return pa[None, :] + frac[:, None] * (pb - pa)[None, :]


def _split_pass(verts, tris, bmap, field, geometry):
    a, b = _unique_edges(tris)
    ell = field.lengths(verts[a], verts[b])
    phys = np.linalg.norm(verts[b] - verts[a], axis=1)
    nseg = np.ones(len(a), dtype=np.int64)
    long_mask = ell > EDGE_SPLIT
    nseg[long_mask] = np.maximum(2, np.round(ell[long_mask]).astype(np.int64))

    edge_row = {(int(p), int(q)): i for i, (p, q) in enumerate(zip(a, b))}
    big = field.areas(verts, tris) > AREA_SPLIT * IDEAL_AREA
    # physical length breaks metric-length ties so both owners mark one edge
    rank = ell + 1e-9 * phys / max(phys.max(), 1e-300)
    for t in np.where(big)[0]:
        i, j, k = (int(x) for x in tris[t])
        rows = [edge_row[tuple(sorted(e))] for e in ((i, j), (j, k), (k, i))]
        longest = rows[int(np.argmax(rank[rows]))]
        nseg[longest] = max(nseg[longest], 2)

    marked = np.where(nseg > 1)[0]
    if len(marked) == 0:
        return verts, tris, bmap, 0

    # midpoint chains per split edge, ordered from the smaller vertex id
    new_pts = []
    chains = {}
    next_id = len(verts)
    for row in marked:
        u, v = int(a[row]), int(b[row])
        pts = _metric_cuts(verts[u], verts[v], int(nseg[row]), field)
        tag = bmap.get((u, v))
        if tag == WALL:
            pts, _ = geometry.project_wall(pts)
        elif tag == FARFIELD:
            pts = geometry.project_farfield(pts)
        ids = list(range(next_id, next_id + len(pts)))
        next_id += len(pts)
        new_pts.append(pts)
        chains[(u, v)] = ids
        if tag is not None:
            del bmap[(u, v)]
            path = [u] + ids + [v]
            for p, q in zip(path[:-1], path[1:]):
                bmap[(min(p, q), max(p, q))] = tag

    verts = np.vstack([verts] + new_pts)

    def chain(u, v):
        ids = chains.get((min(u, v), max(u, v)), [])
        return ids if u < v else ids[::-1]

    out = []
    extra_pts = []
    for t in range(len(tris)):
        i, j, k = (int(x) for x in tris[t])
        c1, c2, c3 = chain(i, j), chain(j, k), chain(k, i)
        counts = sorted(map(len, (c1, c2, c3)))
        if counts == [0, 0, 0]:
            out.append((i, j, k))
            continue
        if counts[:2] == [0, 0]:
            # one subdivided edge: fan from the opposite vertex
            for (p, q, opp, ch) in (((i, j, k, c1)), ((j, k, i, c2)), ((k, i, j, c3))):
                if ch:
                    path = [p] + ch + [q]
                    out.extend((opp, path[m], path[m + 1]) for m in range(len(path) - 1))
                    break
            continue
        if counts == [1, 1, 1]:
            m1, m2, m3 = c1[0], c2[0], c3[0]
            out.extend(((i, m1, m3), (m1, j, m2), (m3, m2, k), (m1, m2, m3)))
            continue
        # general pattern: fan from a Steiner point at the centroid
        cen = verts[[i, j, k]].mean(axis=0)
        cid = next_id
        next_id += 1
        extra_pts.append(cen[None, :])
        cycle = [i] + c1 + [j] + c2 + [k] + c3
        out.extend((cid, cycle[m], cycle[(m + 1) % len(cycle)])
                   for m in range(len(cycle)))
    if extra_pts:
        verts = np.vstack([verts] + extra_pts)
    return verts, np.array(out, dtype=np.int64), bmap, len(marked)


def _signed_area(verts, i, j, k):
    d1 = verts[j] - verts[i]
    d2 = verts[k] - verts[i]
    return 0.5 * (d1[0] * d2[1] - d1[1] * d2[0])


def _collapse_pass(verts, tris, bmap, field, corners, area_floor):
    a, b = _unique_edges(tris)
    ell = field.lengths(verts[a], verts[b])
    order = np.argsort(ell)
    order = order[ell[order] < EDGE_COLLAPSE]
    if len(order) == 0:
        return verts, tris, bmap, 0

    tlist = [tuple(int(x) for x in row) for row in tris]
    alive = [True] * len(tlist)
    v2t = {}
    for t, tri in enumerate(tlist):
        for v in tri:
            v2t.setdefault(v, set()).add(t)
    boundary_verts = set()
    for (p, q) in bmap:
        boundary_verts.update((p, q))
    touched = set()
    applied = 0

    for row in order:
        u, v = int(a[row]), int(b[row])
        if u in touched or v in touched:
            continue
        shared = v2t.get(u, set()) & v2t.get(v, set())
        if not shared:
            continue
        key = (min(u, v), max(u, v))
        for surv, vict in ((u, v), (v, u)):
            if vict in corners:
                continue
            if vict in boundary_verts:
                if key not in bmap or surv not in boundary_verts:
                    continue
            # link condition: shared neighbours must be the opposite vertices
            opposite = {w for t in shared for w in tlist[t]} - {u, v}
            nb_u = {w for t in v2t[u] for w in tlist[t]} - {u}
            nb_v = {w for t in v2t[v] for w in tlist[t]} - {v}
            if (nb_u & nb_v) != opposite:
                continue
            retarget = [t for t in v2t[vict] if t not in shared]
            new_tris = [tuple(surv if w == vict else w for w in tlist[t])
                        for t in retarget]
            if any(_signed_area(verts, *tt) <= area_floor for tt in new_tris):
                continue
            ring = {w for tt in new_tris for w in tt} - {surv}
            if len(ring):
                ring_ids = np.array(sorted(ring))
                new_ell = field.lengths(
                    np.repeat(verts[surv][None, :], len(ring_ids), axis=0),
                    verts[ring_ids])
                if np.any(new_ell > NEW_EDGE_MAX):
                    continue
            # apply
            for t in shared:
                alive[t] = False
                for w in tlist[t]:
                    v2t[w].discard(t)
            for t, tt in zip(retarget, new_tris):
                tlist[t] = tt
                v2t[vict].discard(t)
                v2t[surv].add(t)
            if vict in boundary_verts:
                for (p, q) in [k for k in bmap if vict in k]:
                    tag = bmap.pop((p, q))
                    o = q if p == vict else p
                    if o != surv:
                        bmap[(min(surv, o), max(surv, o))] = tag
                boundary_verts.discard(vict)
            touched.add(surv)
            touched.update(nb_u | nb_v)
            applied += 1
            break
    tris = np.array([tlist[t] for t in range(len(tlist)) if alive[t]],
                    dtype=np.int64)
    return verts, tris, bmap, applied


def _sqrt_spd(m):
    """Batched 2x2 SPD square roots."""
    tr = m[:, 0, 0] + m[:, 1, 1]
    det = m[:, 0, 0] * m[:, 1, 1] - m[:, 0, 1] * m[:, 1, 0]
    s = np.sqrt(np.maximum(det, 0.0))
    t = np.sqrt(np.maximum(tr + 2.0 * s, 1e-300))
    out = m.copy()
    out[:, 0, 0] += s
    out[:, 1, 1] += s
    return out / t[:, None, None]


def _min_angles(q0, q1, q2):
    """Smallest interior angle of each mapped triangle (rows of points)."""
    out = np.full(len(q0), np.pi)
    for pa, pb, pc in ((q0, q1, q2), (q1, q2, q0), (q2, q0, q1)):
        d1 = pb - pa
        d2 = pc - pa
        num = np.einsum('ei,ei->e', d1, d2)
        den = np.linalg.norm(d1, axis=1) * np.linalg.norm(d2, axis=1)
        ang = np.arccos(np.clip(num / np.maximum(den, 1e-300), -1.0, 1.0))
        out = np.minimum(out, ang)
    return out


def _flip_pass(verts, tris, bmap, field, area_floor, sweeps=2):
    for _ in range(sweeps):
        edge_tris = {}
        for t, row in enumerate(tris):
            i, j, k = (int(x) for x in row)
            for p, q in ((i, j), (j, k), (k, i)):
                edge_tris.setdefault((min(p, q), max(p, q)), []).append((t, p, q))
        cands = []
        for key, owners in edge_tris.items():
            if len(owners) != 2 or key in bmap:
                continue
            (t1, p, q), (t2, _, _) = owners
            a1 = next(w for w in tris[t1] if w not in key)
            a2 = next(w for w in tris[t2] if w not in key)
            cands.append((t1, t2, p, q, int(a1), int(a2)))
        if not cands:
            return tris
        arr = np.array(cands, dtype=np.int64)
        pu, pv, pa, pb = (verts[arr[:, 2]], verts[arr[:, 3]],
                          verts[arr[:, 4]], verts[arr[:, 5]])
        mid = 0.25 * (pu + pv + pa + pb)
        smap = _sqrt_spd(field.at(mid))
        qu, qv, qa, qb = (np.einsum('eij,ej->ei', smap, p - mid)
                          for p in (pu, pv, pa, pb))
        cur = np.minimum(_min_angles(qu, qv, qa), _min_angles(qv, qu, qb))
        new = np.minimum(_min_angles(qa, qb, qv), _min_angles(qb, qa, qu))
        gain = new - cur

        used = set()
        existing = set(edge_tris)
        tlist = [tuple(int(x) for x in row) for row in tris]
        changed = 0
        for i in np.argsort(-gain):
            if gain[i] <= FLIP_MARGIN:
                break
            t1, t2, p, q, oa, ob = (int(x) for x in arr[i])
            if t1 in used or t2 in used:
                continue
            dkey = (min(oa, ob), max(oa, ob))
            if dkey in existing:
                continue
            # Fixed orientation: t1 ran p->q with oa on its left, t2 the
            # reverse, so this pair is the only conforming flip.  A
            # non-positive area means the quad is non-convex; reject.
            n1 = (oa, ob, q)
            n2 = (ob, oa, p)
            if (_signed_area(verts, *n1) <= area_floor
                    or _signed_area(verts, *n2) <= area_floor):
                continue
            tlist[t1], tlist[t2] = n1, n2
            used.update((t1, t2))
            existing.add(dkey)
            changed += 1
        tris = np.array(tlist, dtype=np.int64)
        if changed == 0:
            return tris
    return tris


def _smooth_pass(verts, tris, bmap, field, area_floor, rounds=2):
    boundary_verts = set()
    for (p, q) in bmap:
        boundary_verts.update((p, q))
    nbr = {}
    v2t = {}
    for t, row in enumerate(tris):
        i, j, k = (int(x) for x in row)
        for p, q in ((i, j), (j, k), (k, i)):
            nbr.setdefault(p, set()).add(q)
            nbr.setdefault(q, set()).add(p)
        for v in (i, j, k):
            v2t.setdefault(v, set()).add(t)
    movable = [v for v in nbr if v not in boundary_verts]

    verts = verts.copy()
    for _ in range(rounds):
        taken = set()
        batch = []
        for v in movable:
            if v in taken:
                continue
            batch.append(v)
            taken.add(v)
            taken.update(nbr[v])
        for v in batch:
            ring = np.array(sorted(nbr[v]))
            cand = 0.5 * verts[v] + 0.5 * verts[ring].mean(axis=0)
            old = verts[v]
            dev_old = np.sum((field.lengths(
                np.repeat(old[None, :], len(ring), axis=0), verts[ring]) - 1.0) ** 2)
            dev_new = np.sum((field.lengths(
                np.repeat(cand[None, :], len(ring), axis=0), verts[ring]) - 1.0) ** 2)
            if dev_new >= dev_old:
                continue
            verts[v] = cand
            if any(_signed_area(verts, *tris[t]) <= area_floor for t in v2t[v]):
                verts[v] = old
    return verts


def _compact(verts, tris, bmap):
    used = np.unique(tris)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    new_bmap = {}
    for (p, q), tag in bmap.items():
        np_, nq = int(remap[p]), int(remap[q])
        if np_ >= 0 and nq >= 0:
            new_bmap[(np_, nq)] = tag
    return verts[used], remap[tris], new_bmap
