"""Quadrature rules: conical Gauss-Jacobi products on triangles, Gauss on edges.

Triangle rules live on the reference right triangle {x, y >= 0, x + y <= 1}
with weights summing to its area 1/2; all weights are positive, which the
error estimator relies on for its discrete Cauchy-Schwarz bound.
"""

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@lru_cache(maxsize=None)
def triangle_rule(degree):
    """Nodes (n, 2) and weights (n,) exact for total degree <= max(degree, 1)."""
    n = max(1, (max(degree, 1) + 2) // 2)
    ga, wa = np.polynomial.legendre.leggauss(n)
    gb, wb = roots_jacobi(n, 1.0, 0.0)
    a = 0.5 * (ga + 1.0)
    b = 0.5 * (gb + 1.0)
    # x = a (1 - b), y = b maps the unit square onto the triangle
    x = np.outer(1.0 - b, a)
    y = np.broadcast_to(b[:, None], x.shape)
    # the (1 - b) Jacobian is absorbed by the Jacobi weight
    w = np.outer(wb, wa) / 8.0
    pts = np.stack([x.ravel(), y.ravel()], axis=1)
    return pts, w.ravel()


@lru_cache(maxsize=None)
def edge_rule(npts):
    """Gauss nodes and weights on [0, 1], exact for degree 2 npts - 1."""
    x, w = np.polynomial.legendre.leggauss(npts)
    return 0.5 * (x + 1.0), 0.5 * w


def monomial_exponents(degree):
    """Graded ordering of 2D exponents: all of total degree d before d + 1."""
    out = []
    for d in range(degree + 1):
        for i in range(d, -1, -1):
            out.append((i, d - i))
    return np.array(out, dtype=np.int64)


def n_modes(degree):
    return (degree + 1) * (degree + 2) // 2
