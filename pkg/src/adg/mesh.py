"""Conforming triangulations: construction, MSH 2.2 file round trip, face tables,
anisotropy descriptors, and uniform refinement."""

import re
from dataclasses import dataclass

import numpy as np

from .errors import NegativeArea, NonConforming, ParseError

WALL = 1
FARFIELD = 2
TAG_NAMES = {WALL: "wall", FARFIELD: "farfield"}
NAME_TAGS = {v: k for k, v in TAG_NAMES.items()}

AREA_TOL = 1e-14

# reference equilateral triangle with unit area, used by the descriptors
_EDGE = np.sqrt(4.0 / np.sqrt(3.0))
REF_EQUILATERAL = np.array([
    [0.0, 0.0],
    [_EDGE, 0.0],
    [0.5 * _EDGE, 0.5 * _EDGE * np.sqrt(3.0)],
])
_REF_BASIS_INV = np.linalg.inv(
    np.stack([REF_EQUILATERAL[1] - REF_EQUILATERAL[0],
              REF_EQUILATERAL[2] - REF_EQUILATERAL[0]], axis=1))


class Mesh:
    """Triangle mesh with tagged boundary and per-element polynomial degrees.

    Triangles are stored counterclockwise; conformity (each interior edge
    shared by exactly two triangles, boundary edges tagged exactly once) is
    checked on construction.
    """

    def __init__(self, vertices, triangles, boundary_edges, degrees=None):
        self.vertices = np.asarray(vertices, dtype=float).copy()
        triangles = np.asarray(triangles, dtype=np.int64).copy()
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2:
            raise ParseError("vertices must be an (n, 2) array")
        if triangles.ndim != 2 or triangles.shape[1] != 3:
            raise ParseError("triangles must be an (n, 3) array")

        v = self.vertices
        d1 = v[triangles[:, 1]] - v[triangles[:, 0]]
        d2 = v[triangles[:, 2]] - v[triangles[:, 0]]
        signed = 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.any(np.abs(signed) <= AREA_TOL):
            bad = int(np.argmin(np.abs(signed)))
            raise NegativeArea(f"triangle {bad} is degenerate (area {signed[bad]:.3e})")
        flip = signed < 0.0
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
        self.triangles = triangles
        self.areas = np.abs(signed)

        if degrees is None:
            degrees = np.ones(len(triangles), dtype=np.int64)
        self.degrees = np.asarray(degrees, dtype=np.int64).copy()
        if len(self.degrees) != len(triangles) or np.any(self.degrees < 1):
            raise ParseError("degrees must assign p >= 1 to every triangle")

        self._build_faces(boundary_edges)
        self.centroids = v[triangles].mean(axis=1)

    def _build_faces(self, boundary_edges):
        edge_owner = {}
        for t, tri in enumerate(self.triangles):
            for k in range(3):
                a, b = int(tri[k]), int(tri[(k + 1) % 3])
                key = (min(a, b), max(a, b))
                edge_owner.setdefault(key, []).append((t, a, b))

        tagged = {}
        for (a, b), tag in boundary_edges.items():
            key = (min(int(a), int(b)), max(int(a), int(b)))
            if key in tagged and tagged[key] != tag:
                raise NonConforming(f"boundary edge {key} tagged twice with different tags")
            tagged[key] = tag

        interior, bdry, bdry_tags = [], [], []
        for key, owners in edge_owner.items():
            if len(owners) > 2:
                raise NonConforming(f"edge {key} shared by {len(owners)} triangles")
            if len(owners) == 2:
                if key in tagged:
                    raise NonConforming(f"interior edge {key} carries a boundary tag")
                (t0, a0, b0), (t1, a1, b1) = owners
                if a0 == a1:
                    raise NonConforming(f"edge {key} traversed twice in the same direction")
                interior.append((a0, b0, t0, t1))
            else:
                if key not in tagged:
                    raise NonConforming(f"boundary edge {key} has no wall/farfield tag")
                t0, a0, b0 = owners[0]
                bdry.append((a0, b0, t0))
                bdry_tags.append(tagged.pop(key))
        if tagged:
            raise NonConforming(f"tagged edges not present in the mesh: {sorted(tagged)}")

        self.interior_faces = np.array(interior, dtype=np.int64).reshape(-1, 4)
        self.boundary_faces = np.array(bdry, dtype=np.int64).reshape(-1, 3)
        self.boundary_tags = np.array(bdry_tags, dtype=np.int64)

        self.neighbors = [[] for _ in range(len(self.triangles))]
        for a, b, tl, tr in self.interior_faces:
            self.neighbors[tl].append(int(tr))
            self.neighbors[tr].append(int(tl))

    @property
    def n_elements(self):
        return len(self.triangles)

    def boundary_edge_map(self):
        """Tag lookup keyed by sorted vertex pair, as used by the constructor."""
        out = {}
        for (a, b, _t), tag in zip(self.boundary_faces, self.boundary_tags):
            out[(min(int(a), int(b)), max(int(a), int(b)))] = int(tag)
        return out

    def with_degrees(self, degrees):
        return Mesh(self.vertices, self.triangles, self.boundary_edge_map(), degrees)

    def face_normal_length(self, va, vb):
        """Unit normal (left of a->b is inside) and length of an edge."""
        d = self.vertices[vb] - self.vertices[va]
        length = float(np.hypot(d[0], d[1]))
        return np.array([d[1], -d[0]]) / length, length


def face_geometry(mesh, face_index, boundary=False, npts=3):
    """Outward normal, length, midpoint, and Gauss nodes for one face.

    The normal points out of the left (owning) element.
    """
    if boundary:
        va, vb, _ = mesh.boundary_faces[face_index]
    else:
        va, vb, _, _ = mesh.interior_faces[face_index]
    normal, length = mesh.face_normal_length(va, vb)
    p0, p1 = mesh.vertices[va], mesh.vertices[vb]
    x, _ = np.polynomial.legendre.leggauss(npts)
    nodes = 0.5 * (p0 + p1) + 0.5 * np.outer(x, p1 - p0)
    return normal, length, 0.5 * (p0 + p1), nodes


@dataclass
class AnisoDescriptor:
    """Per-element size, aspect ratio, and stretch orientation.

    nu is the element area, sigma the singular-value ratio (>= 1) of the
    affine map from a unit-area equilateral reference triangle, and phi the
    direction of the dominant stretch, folded into [0, pi).
    """

    nu: np.ndarray
    sigma: np.ndarray
    phi: np.ndarray


def element_descriptors(mesh):
    """Measure every element against the equilateral reference."""
    v = mesh.vertices
    tri = mesh.triangles
    basis = np.stack([v[tri[:, 1]] - v[tri[:, 0]], v[tri[:, 2]] - v[tri[:, 0]]], axis=2)
    jac = basis @ _REF_BASIS_INV
    u_mat, svals, _ = np.linalg.svd(jac)
    nu = svals[:, 0] * svals[:, 1]
    sigma = svals[:, 0] / svals[:, 1]
    phi = np.mod(np.arctan2(u_mat[:, 1, 0], u_mat[:, 0, 0]), np.pi)
    return AnisoDescriptor(nu=nu, sigma=sigma, phi=phi)


def triangle_from_descriptor(nu, sigma, phi):
    """Vertices of the element realizing a descriptor triple exactly."""
    stretch = np.diag([np.sqrt(nu * sigma), np.sqrt(nu / sigma)])
    c, s = np.cos(phi), np.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    return REF_EQUILATERAL @ (rot @ stretch).T


def refine_uniform(mesh, geometry=None):
    """Red refinement: each triangle splits into four.

    Midpoints of boundary edges are projected onto the curved boundary when a
    geometry is supplied, so refinement improves the geometry approximation.
    """
    v = mesh.vertices
    midpoint_index = {}
    new_vertices = [v]
    next_id = len(v)
    boundary_tag_of = mesh.boundary_edge_map()

    wall_mids, wall_keys = [], []
    far_mids, far_keys = [], []

    def midpoint(a, b):
        nonlocal next_id
        key = (min(a, b), max(a, b))
        if key in midpoint_index:
            return midpoint_index[key]
        mid = 0.5 * (v[a] + v[b])
        midpoint_index[key] = next_id
        new_vertices.append(mid[None, :])
        tag = boundary_tag_of.get(key)
        if geometry is not None and tag == WALL:
            wall_mids.append(next_id)
            wall_keys.append(key)
        elif geometry is not None and tag == FARFIELD:
            far_mids.append(next_id)
        next_id += 1
        return midpoint_index[key]

    new_tris = []
    new_degrees = []
    for t, (i, j, k) in enumerate(mesh.triangles):
        a, b, c = midpoint(int(i), int(j)), midpoint(int(j), int(k)), midpoint(int(k), int(i))
        new_tris.extend([[i, a, c], [a, j, b], [c, b, k], [a, b, c]])
        new_degrees.extend([mesh.degrees[t]] * 4)

    verts = np.concatenate(new_vertices, axis=0)
    if geometry is not None and wall_mids:
        projected, _ = geometry.project_wall(verts[wall_mids])
        verts[wall_mids] = projected
    if geometry is not None and far_mids:
        verts[far_mids] = geometry.project_farfield(verts[far_mids])

    new_boundary = {}
    for (a, b), tag in boundary_tag_of.items():
        m = midpoint_index[(min(a, b), max(a, b))]
        new_boundary[(a, m)] = tag
        new_boundary[(m, b)] = tag
    return Mesh(verts, np.array(new_tris), new_boundary, np.array(new_degrees))


def load_mesh(path):
    """Read a Gmsh MSH 2.2 ASCII file with wall/farfield physical line groups."""
    try:
        with open(path) as handle:
            lines = handle.read().splitlines()
    except OSError as exc:
        raise ParseError(f"cannot read mesh file {path}: {exc}") from exc

    sections = {}
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        if line.startswith("$") and not line.startswith("$End"):
            name = line[1:]
            j = i + 1
            while j < len(lines) and lines[j].strip() != f"$End{name}":
                j += 1
            if j == len(lines):
                raise ParseError(f"unterminated section {name}")
            sections[name] = lines[i + 1:j]
            i = j + 1
        else:
            i += 1

    if "MeshFormat" not in sections or not sections["MeshFormat"]:
        raise ParseError("missing MeshFormat section")
    version = sections["MeshFormat"][0].split()
    if not version or not version[0].startswith("2.2"):
        raise ParseError(f"unsupported mesh format {version!r}; need 2.2 ASCII")

    phys_names = {}
    for line in sections.get("PhysicalNames", [])[1:]:
        m = re.match(r"\s*(\d+)\s+(\d+)\s+\"(.*)\"", line)
        if not m:
            raise ParseError(f"malformed physical name line: {line!r}")
        dim, tag, name = int(m.group(1)), int(m.group(2)), m.group(3).lower()
        if dim == 1:
            if name not in NAME_TAGS:
                raise ParseError(f"unknown boundary group {name!r}; need wall/farfield")
            phys_names[tag] = NAME_TAGS[name]

    if "Nodes" not in sections:
        raise ParseError("missing Nodes section")
    node_lines = sections["Nodes"]
    try:
        n_nodes = int(node_lines[0])
    except (IndexError, ValueError) as exc:
        raise ParseError("bad node count") from exc
    if len(node_lines) - 1 != n_nodes:
        raise ParseError(f"expected {n_nodes} nodes, found {len(node_lines) - 1}")
    ids = np.empty(n_nodes, dtype=np.int64)
    coords = np.empty((n_nodes, 2))
    for k, line in enumerate(node_lines[1:]):
        parts = line.split()
        if len(parts) < 4:
            raise ParseError(f"malformed node line: {line!r}")
        ids[k] = int(parts[0])
        coords[k] = float(parts[1]), float(parts[2])
    remap = {int(i): k for k, i in enumerate(ids)}

    if "Elements" not in sections:
        raise ParseError("missing Elements section")
    elem_lines = sections["Elements"]
    try:
        n_elems = int(elem_lines[0])
    except (IndexError, ValueError) as exc:
        raise ParseError("bad element count") from exc
    if len(elem_lines) - 1 != n_elems:
        raise ParseError(f"expected {n_elems} elements, found {len(elem_lines) - 1}")

    triangles = []
    boundary = {}
    for line in elem_lines[1:]:
        parts = [int(x) for x in line.split()]
        if len(parts) < 3:
            raise ParseError(f"malformed element line: {line!r}")
        etype, ntags = parts[1], parts[2]
        tags = parts[3:3 + ntags]
        nodes = parts[3 + ntags:]
        if etype == 1:
            if len(nodes) != 2:
                raise ParseError(f"line element with {len(nodes)} nodes: {line!r}")
            if not tags or tags[0] not in phys_names:
                raise ParseError(f"boundary line without wall/farfield tag: {line!r}")
            a, b = remap[nodes[0]], remap[nodes[1]]
            boundary[(min(a, b), max(a, b))] = phys_names[tags[0]]
        elif etype == 2:
            if len(nodes) != 3:
                raise ParseError(f"triangle with {len(nodes)} nodes: {line!r}")
            triangles.append([remap[n] for n in nodes])
        elif etype == 15:
            continue
        else:
            raise ParseError(f"unsupported element type {etype}")

    if not triangles:
        raise ParseError("mesh contains no triangles")
    return Mesh(coords, np.array(triangles), boundary)


def write_msh(mesh, path):
    """Write the mesh and its boundary tagging as Gmsh MSH 2.2 ASCII."""
    lines = ["$MeshFormat", "2.2 0 8", "$EndMeshFormat"]
    used = sorted(set(int(t) for t in mesh.boundary_tags))
    lines.append("$PhysicalNames")
    lines.append(str(len(used) + 1))
    for tag in used:
        lines.append(f'1 {tag} "{TAG_NAMES[tag]}"')
    lines.append('2 3 "domain"')
    lines.append("$EndPhysicalNames")
    lines.append("$Nodes")
    lines.append(str(len(mesh.vertices)))
    for k, (x, y) in enumerate(mesh.vertices):
        lines.append(f"{k + 1} {x:.16g} {y:.16g} 0")
    lines.append("$EndNodes")
    lines.append("$Elements")
    lines.append(str(len(mesh.boundary_faces) + len(mesh.triangles)))
    eid = 1
    for (a, b, _t), tag in zip(mesh.boundary_faces, mesh.boundary_tags):
        lines.append(f"{eid} 1 2 {tag} {tag} {a + 1} {b + 1}")
        eid += 1
    for i, j, k in mesh.triangles:
        lines.append(f"{eid} 2 2 3 3 {i + 1} {j + 1} {k + 1}")
        eid += 1
    lines.append("$EndElements")
    with open(path, "w") as handle:
        handle.write("\n".join(lines) + "\n")


def square_mesh(n, tag=FARFIELD, skew=0.0):
    """Structured n x n unit-square mesh with every boundary edge given one tag.

    A nonzero skew shifts interior vertices to break symmetry in tests.
    """
    xs = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(xs, xs, indexing="ij")
    if skew:
        interior = (xx > 0) & (xx < 1) & (yy > 0) & (yy < 1)
        xx = xx + skew * interior * np.sin(2 * np.pi * yy) / n
        yy = yy + skew * interior * np.sin(2 * np.pi * xx) / n
    verts = np.stack([xx.ravel(), yy.ravel()], axis=1)

    def vid(i, j):
        return i * (n + 1) + j

    tris = []
    for i in range(n):
        for j in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            tris.extend([[a, b, c], [a, c, d]])

    boundary = {}
    for i in range(n):
        boundary[(vid(i, 0), vid(i + 1, 0))] = tag
        boundary[(vid(i, n), vid(i + 1, n))] = tag
        boundary[(vid(0, i), vid(0, i + 1))] = tag
        boundary[(vid(n, i), vid(n, i + 1))] = tag
    return Mesh(verts, np.array(tris), boundary)
