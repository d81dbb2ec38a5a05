"""Numerical fluxes between states and the wall / far-field boundary treatments.

All functions broadcast over leading axes.  Normals point out of the element
whose trace is passed first.
"""

import numpy as np

from . import euler
from .errors import NonAdmissible

WALL_KINDS = (1, 2)


def tangential_projector(n):
    """Matrix of the map removing the normal velocity component, shape (..., 4, 4)."""
    n = np.asarray(n, dtype=float)
    out = np.zeros(n.shape[:-1] + (4, 4))
    out[..., 0, 0] = 1.0
    out[..., 3, 3] = 1.0
    out[..., 1, 1] = 1.0 - n[..., 0] * n[..., 0]
    out[..., 1, 2] = -n[..., 0] * n[..., 1]
    out[..., 2, 1] = -n[..., 0] * n[..., 1]
    out[..., 2, 2] = 1.0 - n[..., 1] * n[..., 1]
    return out


def mirror_matrix(n):
    """Matrix of the mirror map: twice the tangential projector minus identity."""
    return 2.0 * tangential_projector(n) - np.eye(4)


def strip_normal_velocity(w, n):
    """Remove the wall-normal momentum component from the state."""
    w = np.asarray(w, dtype=float)
    n = np.asarray(n, dtype=float)
    mn = w[..., 1] * n[..., 0] + w[..., 2] * n[..., 1]
    shape = np.broadcast_shapes(w.shape[:-1], n.shape[:-1])
    out = np.empty(shape + (4,))
    out[...] = w
    out[..., 1] = w[..., 1] - mn * n[..., 0]
    out[..., 2] = w[..., 2] - mn * n[..., 1]
    return out


def mirror_state(w, n):
    """Reflect the momentum about the tangent plane."""
    w = np.asarray(w, dtype=float)
    n = np.asarray(n, dtype=float)
    mn = w[..., 1] * n[..., 0] + w[..., 2] * n[..., 1]
    shape = np.broadcast_shapes(w.shape[:-1], n.shape[:-1])
    out = np.empty(shape + (4,))
    out[...] = w
    out[..., 1] = w[..., 1] - 2.0 * mn * n[..., 0]
    out[..., 2] = w[..., 2] - 2.0 * mn * n[..., 1]
    return out


def lax_friedrichs(wl, wr, n, gas, check=True):
    """Local Lax-Friedrichs flux; the dissipation speed is the fastest wave."""
    wl = np.asarray(wl, dtype=float)
    wr = np.asarray(wr, dtype=float)
    fl = euler.directional_flux(wl, n, gas, check=check)
    fr = euler.directional_flux(wr, n, gas, check=check)
    n = np.asarray(n, dtype=float)

    def speed(w):
        v = euler.velocity(w)
        un = v[..., 0] * n[..., 0] + v[..., 1] * n[..., 1]
        return np.abs(un) + euler.sound_speed(w, gas, check=False)

    alpha = np.maximum(speed(wl), speed(wr))
    return 0.5 * (fl + fr) - 0.5 * alpha[..., None] * (wr - wl)


def vijayasundaram(wl, wr, n, gas, check=True):
    """Upwind flux split at the arithmetic-mean state.

    The admissible set is convex, so the mean of two admissible traces is
    admissible; a local Lax-Friedrichs value is substituted defensively for
    any node where roundoff still lands the mean outside the set.
    """
    wl = np.asarray(wl, dtype=float)
    wr = np.asarray(wr, dtype=float)
    if check:
        euler.require_admissible(wl, gas)
        euler.require_admissible(wr, gas)
    mean = 0.5 * (wl + wr)
    ok = euler.admissible_mask(mean, gas)
    if np.all(ok):
        es = euler.eigen_split(mean, n, gas, check=False)
        return np.einsum("...ab,...b->...a", es.plus, wl) + np.einsum(
            "...ab,...b->...a", es.minus, wr)
    safe = np.where(ok[..., None], mean, np.array([1.0, 0.0, 0.0, 2.5]))
    es = euler.eigen_split(safe, n, gas, check=False)
    vs = np.einsum("...ab,...b->...a", es.plus, wl) + np.einsum("...ab,...b->...a", es.minus, wr)
    lf = lax_friedrichs(wl, wr, n, gas, check=False)
    return np.where(ok[..., None], vs, lf)


def wall_flux_pressure(w, n, gas, check=True):
    """Wall flux from the tangential-projected boundary state: pure pressure load."""
    wall_state = strip_normal_velocity(w, n)
    return euler.directional_flux(wall_state, n, gas, check=check)


def wall_flux_mirror(w, n, gas, check=True):
    """Wall flux from the upwind flux against the mirrored ghost state."""
    w = np.asarray(w, dtype=float)
    if check:
        euler.require_admissible(w, gas)
    # the mean of the trace and its mirror is exactly the projected state
    mean = strip_normal_velocity(w, n)
    es = euler.eigen_split(mean, n, gas, check=False)
    ghost = mirror_state(w, n)
    return np.einsum("...ab,...b->...a", es.plus, w) + np.einsum(
        "...ab,...b->...a", es.minus, ghost)


def wall_flux(w, n, gas, kind, check=True):
    if kind == 1:
        return wall_flux_pressure(w, n, gas, check=check)
    if kind == 2:
        return wall_flux_mirror(w, n, gas, check=check)
    raise ValueError(f"wall treatment must be one of {WALL_KINDS}, got {kind}")


def wall_lin_matrix(w, n, gas, kind, check=True):
    """Linearization matrix of the wall flux at the frozen trace state.

    Multiplying the trace by this matrix reproduces the wall flux exactly,
    which is what makes the target-functional linearization match the form.
    """
    projected = strip_normal_velocity(w, n)
    if kind == 1:
        return euler.wall_jacobian(projected, n, gas) @ tangential_projector(n)
    if kind == 2:
        es = euler.eigen_split(projected, n, gas, check=check)
        return es.plus + es.minus @ mirror_matrix(n)
    raise ValueError(f"wall treatment must be one of {WALL_KINDS}, got {kind}")


def riemann_boundary_state(w, w_bc, n, gas, check=True):
    """Boundary state keeping outgoing characteristics from inside.

    Spectral sign projectors pick the characteristic content: incoming waves
    (negative speeds) come from the prescribed far-field data, the rest from
    the interior trace.  Zero-speed waves count as outgoing.
    """
    es = euler.eigen_split(w, n, gas, check=check)
    return np.einsum("...ab,...b->...a", es.proj_plus, w) + np.einsum(
        "...ab,...b->...a", es.proj_minus, np.asarray(w_bc, dtype=float))


def io_flux(w, w_bc, n, gas, check=True):
    """Far-field flux: upwind split at the interior trace against the Riemann state."""
    es = euler.eigen_split(w, n, gas, check=check)
    ghost = np.einsum("...ab,...b->...a", es.proj_plus, w) + np.einsum(
        "...ab,...b->...a", es.proj_minus, np.asarray(w_bc, dtype=float))
    return np.einsum("...ab,...b->...a", es.plus, w) + np.einsum(
        "...ab,...b->...a", es.minus, ghost)


def io_lin_parts(w, w_bc, n, gas, check=True):
    """Far-field pieces of the linearized form.

    Returns (Aplus, rhs): the matrix applied to the unknown trace and the
    vector moved to the right-hand side, so Aplus @ w - rhs is the flux.
    """
    es = euler.eigen_split(w, n, gas, check=check)
    ghost = np.einsum("...ab,...b->...a", es.proj_plus, w) + np.einsum(
        "...ab,...b->...a", es.proj_minus, np.asarray(w_bc, dtype=float))
    rhs = -np.einsum("...ab,...b->...a", es.minus, ghost)
    return es.plus, rhs
