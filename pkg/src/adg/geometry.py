"""Curved boundary description: symmetric four-digit airfoil inside a circular far field.

The wall curve is parametrized by s in [0, 1): s = 0 at the trailing edge,
the upper surface for s < 1/2, the lower surface after.  Using u = sqrt(x)
as the underlying variable keeps the leading edge smooth.
"""

from dataclasses import dataclass

import numpy as np

# closed-trailing-edge thickness coefficients for y(u) with x = u^2
_THICKNESS_COEFFS = np.array([0.2969, -0.1260, -0.3516, 0.2843, -0.1036])
_THICKNESS_POWERS = np.array([1, 2, 4, 6, 8])


def _half_thickness(u, thickness):
    u = np.asarray(u, dtype=float)
    return 5.0 * thickness * np.sum(
        _THICKNESS_COEFFS * u[..., None] ** _THICKNESS_POWERS, axis=-1)


@dataclass(frozen=True)
class AirfoilInCircle:
    """Unit-chord symmetric airfoil centered on [0, 1] x {0} in a circular far field."""

    thickness: float = 0.12
    farfield_radius: float = 100.0
    farfield_center: tuple = (0.5, 0.0)

    def wall_point(self, s):
        """Point on the wall curve at parameter s in [0, 1); batched."""
        s = np.mod(np.asarray(s, dtype=float), 1.0)
        upper = s < 0.5
        u = np.where(upper, 1.0 - 2.0 * s, 2.0 * s - 1.0)
        y = _half_thickness(u, self.thickness)
        return np.stack([u**2, np.where(upper, y, -y)], axis=-1)

    def project_wall(self, points):
        """Closest wall-curve point and parameter for each query point."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        grid = np.linspace(0.0, 1.0, 2049, endpoint=False)
        curve = self.wall_point(grid)
        d2 = ((points[:, None, :] - curve[None, :, :]) ** 2).sum(axis=2)
        best = np.argmin(d2, axis=1)
        params = np.empty(len(points))
        for i, (q, k) in enumerate(zip(points, best)):
            lo = grid[k] - 1.5 / 2049.0
            hi = grid[k] + 1.5 / 2049.0
            params[i] = _golden_min(lambda s: ((self.wall_point(s) - q) ** 2).sum(), lo, hi)
        return self.wall_point(params), np.mod(params, 1.0)

    def project_farfield(self, points):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        center = np.asarray(self.farfield_center)
        d = points - center
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        return center + self.farfield_radius * d / np.maximum(norm, 1e-300)

    def wall_corner_params(self):
        """Parameters of slope discontinuities that remeshing must preserve."""
        return np.array([0.0])


@dataclass(frozen=True)
class PolylineGeometry:
    """Piecewise-linear boundary description extracted from an existing mesh.

    Used for polygonal domains so adapted meshes keep their original outline.
    segments maps each boundary tag to an (n, 2, 2) array of edge endpoints.
    """

    segments: dict

    def _project(self, points, tag):
        points = np.atleast_2d(np.asarray(points, dtype=float))
        segs = self.segments[tag]
        a, b = segs[:, 0, :], segs[:, 1, :]
        ab = b - a
        denom = np.maximum((ab**2).sum(axis=1), 1e-300)
        t = ((points[:, None, :] - a[None]) * ab[None]).sum(axis=2) / denom[None]
        t = np.clip(t, 0.0, 1.0)
        candidates = a[None] + t[..., None] * ab[None]
        d2 = ((candidates - points[:, None, :]) ** 2).sum(axis=2)
        best = np.argmin(d2, axis=1)
        return candidates[np.arange(len(points)), best]

    def project_wall(self, points):
        projected = self._project(points, "wall")
        return projected, np.zeros(len(projected))

    def project_farfield(self, points):
        return self._project(points, "farfield")

    def wall_corner_params(self):
        return np.array([])


def _golden_min(f, lo, hi, tol=1e-12, max_iter=80):
    """Golden-section minimizer on [lo, hi]."""
    inv_phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if b - a < tol:
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)
