"""Structured O-mesh generator around the airfoil, used for starter fixtures.

Rings of points blend from the wall curve to the far-field circle with
geometric radial growth; each quad is split into two triangles.  Run as a
module to write a fixture file:

    python -m adg.meshgen --out naca0012.msh --n-around 72 --n-rings 22
"""

import argparse

import numpy as np

from . import mesh as meshmod
from .geometry import AirfoilInCircle


def _growth_factor(n_rings, first_fraction):
    """Geometric growth g with (g - 1) / (g^K - 1) equal to the first step."""
    lo, hi = 1.0 + 1e-9, 8.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        frac = (mid - 1.0) / (mid**n_rings - 1.0)
        if frac > first_fraction:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def naca_omesh(n_around=72, n_rings=22, radius=100.0, first_height=0.012,
               thickness=0.12, degree=1):
    """Triangulated O-grid between the airfoil and a circular far field."""
    if n_around % 2 or n_around < 8:
        raise ValueError("n_around must be even and at least 8")
    geo = AirfoilInCircle(thickness=thickness, farfield_radius=radius)
    m = n_around // 2

    # cosine-clustered chord stations, trailing edge first, over the top
    k = np.arange(n_around)
    x_upper = 0.5 * (1.0 + np.cos(np.pi * np.arange(m + 1) / m))
    airfoil = np.empty((n_around, 2))
    u = np.sqrt(np.clip(x_upper, 0.0, 1.0))
    from .geometry import _half_thickness
    y_upper = _half_thickness(u, thickness)
    airfoil[:m + 1, 0] = x_upper
    airfoil[:m + 1, 1] = y_upper
    airfoil[m + 1:, 0] = x_upper[m - 1:0:-1]
    airfoil[m + 1:, 1] = -y_upper[m - 1:0:-1]

    center = np.asarray(geo.farfield_center)
    angles = 2.0 * np.pi * k / n_around
    circle = center + radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    span = np.linalg.norm(circle - airfoil, axis=1).mean()
    g = _growth_factor(n_rings, first_height / span)
    t = (g ** np.arange(n_rings + 1) - 1.0) / (g**n_rings - 1.0)

    points = airfoil[None, :, :] + t[:, None, None] * (circle - airfoil)[None, :, :]
    verts = points.reshape(-1, 2)

    def vid(ring, j):
        return ring * n_around + (j % n_around)

    tris = []
    for ring in range(n_rings):
        for j in range(n_around):
            a = vid(ring, j)
            b = vid(ring, j + 1)
            c = vid(ring + 1, j + 1)
            d = vid(ring + 1, j)
            if (ring + j) % 2:
                tris.extend([[a, b, d], [b, c, d]])
            else:
                tris.extend([[a, b, c], [a, c, d]])

    boundary = {}
    for j in range(n_around):
        boundary[(vid(0, j), vid(0, j + 1))] = meshmod.WALL
        boundary[(vid(n_rings, j), vid(n_rings, j + 1))] = meshmod.FARFIELD

    degrees = np.full(len(tris), degree, dtype=np.int64)
    return meshmod.Mesh(verts, np.array(tris), boundary, degrees)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True)
    parser.add_argument("--n-around", type=int, default=72)
    parser.add_argument("--n-rings", type=int, default=22)
    parser.add_argument("--radius", type=float, default=100.0)
    parser.add_argument("--first-height", type=float, default=0.012)
    args = parser.parse_args(argv)
    grid = naca_omesh(args.n_around, args.n_rings, args.radius, args.first_height)
    meshmod.write_msh(grid, args.out)
    print(f"wrote {grid.n_elements} triangles to {args.out}")


if __name__ == "__main__":
    main()
