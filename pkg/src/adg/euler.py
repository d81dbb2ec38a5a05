"""Closed-form state algebra for the 2D compressible Euler equations.

Conservative state vectors w = (rho, rho*v1, rho*v2, E).  Every function
broadcasts over leading axes, so a single state (4,) and a batch of
quadrature states (n, 4) go through the same code path.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NonAdmissible

ADMISSIBILITY_TOL = 1e-12


@dataclass(frozen=True)
class GasParams:
    """Perfect-gas constants."""

    gamma: float = 1.4


def density(w):
    return np.asarray(w)[..., 0]


def velocity(w):
    """Velocity components, shape (..., 2)."""
    w = np.asarray(w)
    return w[..., 1:3] / w[..., 0:1]


def pressure(w, gas, check=True):
    """Static pressure (gamma - 1) * (E - rho |v|^2 / 2)."""
    w = np.asarray(w, dtype=float)
    if check:
        require_admissible(w, gas)
    kinetic = 0.5 * (w[..., 1] ** 2 + w[..., 2] ** 2) / w[..., 0]
    return (gas.gamma - 1.0) * (w[..., 3] - kinetic)


def sound_speed(w, gas, check=True):
    """Speed of sound sqrt(gamma p / rho)."""
    w = np.asarray(w, dtype=float)
    if check:
        require_admissible(w, gas)
    return np.sqrt(gas.gamma * pressure(w, gas, check=False) / w[..., 0])


def mach_number(w, gas, check=True):
    speed = np.linalg.norm(velocity(w), axis=-1)
    return speed / sound_speed(w, gas, check=check)


def admissible_mask(w, gas):
    """Boolean mask of states with density and pressure above tolerance."""
    w = np.asarray(w, dtype=float)
    rho_ok = w[..., 0] >= ADMISSIBILITY_TOL
    # Evaluate internal energy without dividing by a possibly-zero density.
    safe_rho = np.where(rho_ok, w[..., 0], 1.0)
    kinetic = 0.5 * (w[..., 1] ** 2 + w[..., 2] ** 2) / safe_rho
    p = (gas.gamma - 1.0) * (w[..., 3] - kinetic)
    return rho_ok & (p >= ADMISSIBILITY_TOL)


def require_admissible(w, gas):
    ok = admissible_mask(w, gas)
    if not np.all(ok):
        idx = np.argwhere(~np.atleast_1d(ok))
        raise NonAdmissible(f"state outside admissible set at batch index {idx[0]}")


def free_stream_state(gas, mach, alpha):
    """Far-field state nondimensionalized to rho = 1, |v| = 1.

    alpha is the flow angle in radians; the pressure follows from the
    prescribed Mach number, p = 1 / (gamma M^2).
    """
    if mach <= 0.0:
        raise NonAdmissible("free-stream Mach number must be positive")
    p = 1.0 / (gas.gamma * mach**2)
    e_total = p / (gas.gamma - 1.0) + 0.5
    return np.array([1.0, np.cos(alpha), np.sin(alpha), e_total])


def flux(w, gas, check=True):
    """Both flux vectors, shape (..., 4, 2); component a, direction s."""
    w = np.asarray(w, dtype=float)
    p = pressure(w, gas, check=check)
    v = velocity(w)
    out = np.empty(w.shape[:-1] + (4, 2))
    out[..., 0, :] = w[..., 1:3]
    out[..., 1, 0] = w[..., 1] * v[..., 0] + p
    out[..., 1, 1] = w[..., 1] * v[..., 1]
    out[..., 2, 0] = w[..., 2] * v[..., 0]
    out[..., 2, 1] = w[..., 2] * v[..., 1] + p
    out[..., 3, :] = (w[..., 3:4] + p[..., None]) * v
    return out


def flux_jacobian(w, gas, check=True):
    """Jacobians of both fluxes, shape (..., 2, 4, 4)."""
    w = np.asarray(w, dtype=float)
    if check:
        require_admissible(w, gas)
    g1 = gas.gamma - 1.0
    v = velocity(w)
    v1, v2 = v[..., 0], v[..., 1]
    q2 = v1**2 + v2**2
    phi2 = 0.5 * g1 * q2
    p = pressure(w, gas, check=False)
    enthalpy = (w[..., 3] + p) / w[..., 0]

    A = np.zeros(w.shape[:-1] + (2, 4, 4))
    a1 = A[..., 0, :, :]
    a1[..., 0, 1] = 1.0
    a1[..., 1, 0] = phi2 - v1**2
    a1[..., 1, 1] = (3.0 - gas.gamma) * v1
    a1[..., 1, 2] = -g1 * v2
    a1[..., 1, 3] = g1
    a1[..., 2, 0] = -v1 * v2
    a1[..., 2, 1] = v2
    a1[..., 2, 2] = v1
    a1[..., 3, 0] = (phi2 - enthalpy) * v1
    a1[..., 3, 1] = enthalpy - g1 * v1**2
    a1[..., 3, 2] = -g1 * v1 * v2
    a1[..., 3, 3] = gas.gamma * v1

    a2 = A[..., 1, :, :]
    a2[..., 0, 2] = 1.0
    a2[..., 1, 0] = -v1 * v2
    a2[..., 1, 1] = v2
    a2[..., 1, 2] = v1
    a2[..., 2, 0] = phi2 - v2**2
    a2[..., 2, 1] = -g1 * v1
    a2[..., 2, 2] = (3.0 - gas.gamma) * v2
    a2[..., 2, 3] = g1
    a2[..., 3, 0] = (phi2 - enthalpy) * v2
    a2[..., 3, 1] = -g1 * v1 * v2
    a2[..., 3, 2] = enthalpy - g1 * v2**2
    a2[..., 3, 3] = gas.gamma * v2
    return A


def directional_flux(w, n, gas, check=True):
    """Flux through a unit normal, f1 n1 + f2 n2; shape (..., 4)."""
    w = np.asarray(w, dtype=float)
    n = np.asarray(n, dtype=float)
    p = pressure(w, gas, check=check)
    v = velocity(w)
    un = v[..., 0] * n[..., 0] + v[..., 1] * n[..., 1]
    out = np.empty(np.broadcast_shapes(w.shape[:-1], n.shape[:-1]) + (4,))
    out[..., 0] = w[..., 0] * un
    out[..., 1] = w[..., 1] * un + p * n[..., 0]
    out[..., 2] = w[..., 2] * un + p * n[..., 1]
    out[..., 3] = (w[..., 3] + p) * un
    return out


def directional_jacobian(w, n, gas, check=True):
    """Jacobian of the directional flux, n1 A1 + n2 A2."""
    A = flux_jacobian(w, gas, check=check)
    n = np.asarray(n, dtype=float)
    return n[..., 0, None, None] * A[..., 0, :, :] + n[..., 1, None, None] * A[..., 1, :, :]


def pressure_gradient(w, gas):
    """Gradient of pressure with respect to the conservative state."""
    w = np.asarray(w, dtype=float)
    g1 = gas.gamma - 1.0
    v = velocity(w)
    out = np.empty(w.shape)
    out[..., 0] = 0.5 * g1 * (v[..., 0] ** 2 + v[..., 1] ** 2)
    out[..., 1] = -g1 * v[..., 0]
    out[..., 2] = -g1 * v[..., 1]
    out[..., 3] = g1
    return out


def wall_jacobian(w, n, gas):
    """Rank-one wall-flux Jacobian: rows 1 and 2 carry n * dp/dw."""
    w = np.asarray(w, dtype=float)
    n = np.asarray(n, dtype=float)
    dp = pressure_gradient(w, gas)
    shape = np.broadcast_shapes(w.shape[:-1], n.shape[:-1])
    out = np.zeros(shape + (4, 4))
    out[..., 1, :] = n[..., 0, None] * dp
    out[..., 2, :] = n[..., 1, None] * dp
    return out


@dataclass(frozen=True)
class EigenSplit:
    """Characteristic decomposition of the directional Jacobian.

    T maps conservative perturbations to characteristic variables (rows are
    left eigenvectors), Tinv maps back (columns are right eigenvectors), and
    lam holds the wave speeds (v.n - a, v.n, v.n, v.n + a).  plus/minus are
    the standard positive/negative Jacobian parts; proj_plus/proj_minus are
    the sign-indicator projectors, with zero eigenvalues assigned to the
    plus set so the pair always sums to the identity.
    """

    lam: np.ndarray
    T: np.ndarray
    Tinv: np.ndarray
    plus: np.ndarray
    minus: np.ndarray
    proj_plus: np.ndarray
    proj_minus: np.ndarray


def eigen_split(w, n, gas, check=True):
    """Closed-form characteristic splitting of n1 A1 + n2 A2.

    Uses the analytic acoustic/entropy/shear eigenvector basis, so repeated
    eigenvalues and sonic states are handled deterministically.
    """
    w = np.asarray(w, dtype=float)
    n = np.asarray(n, dtype=float)
    if check:
        require_admissible(w, gas)
    g1 = gas.gamma - 1.0
    rho = w[..., 0]
    v1 = w[..., 1] / rho
    v2 = w[..., 2] / rho
    q2 = v1**2 + v2**2
    p = pressure(w, gas, check=False)
    a = np.sqrt(gas.gamma * p / rho)
    enthalpy = (w[..., 3] + p) / rho
    n1, n2 = n[..., 0], n[..., 1]
    un = v1 * n1 + v2 * n2
    ut = -v1 * n2 + v2 * n1
    phi2 = 0.5 * g1 * q2

    shape = np.broadcast_shapes(w.shape[:-1], n.shape[:-1])
    lam = np.empty(shape + (4,))
    lam[..., 0] = un - a
    lam[..., 1] = un
    lam[..., 2] = un
    lam[..., 3] = un + a

    Tinv = np.empty(shape + (4, 4))
    Tinv[..., 0, 0] = 1.0
    Tinv[..., 1, 0] = v1 - a * n1
    Tinv[..., 2, 0] = v2 - a * n2
    Tinv[..., 3, 0] = enthalpy - a * un
    Tinv[..., 0, 1] = 1.0
    Tinv[..., 1, 1] = v1
    Tinv[..., 2, 1] = v2
    Tinv[..., 3, 1] = 0.5 * q2
    Tinv[..., 0, 2] = 0.0
    Tinv[..., 1, 2] = -n2
    Tinv[..., 2, 2] = n1
    Tinv[..., 3, 2] = ut
    Tinv[..., 0, 3] = 1.0
    Tinv[..., 1, 3] = v1 + a * n1
    Tinv[..., 2, 3] = v2 + a * n2
    Tinv[..., 3, 3] = enthalpy + a * un

    T = np.empty(shape + (4, 4))
    half_ia2 = 0.5 / a**2
    T[..., 0, 0] = (phi2 + a * un) * half_ia2
    T[..., 0, 1] = (-g1 * v1 - a * n1) * half_ia2
    T[..., 0, 2] = (-g1 * v2 - a * n2) * half_ia2
    T[..., 0, 3] = g1 * half_ia2
    ia2 = 1.0 / a**2
    T[..., 1, 0] = (a**2 - phi2) * ia2
    T[..., 1, 1] = g1 * v1 * ia2
    T[..., 1, 2] = g1 * v2 * ia2
    T[..., 1, 3] = -g1 * ia2
    T[..., 2, 0] = -ut
    T[..., 2, 1] = -n2
    T[..., 2, 2] = n1
    T[..., 2, 3] = 0.0
    T[..., 3, 0] = (phi2 - a * un) * half_ia2
    T[..., 3, 1] = (-g1 * v1 + a * n1) * half_ia2
    T[..., 3, 2] = (-g1 * v2 + a * n2) * half_ia2
    T[..., 3, 3] = g1 * half_ia2

    lam_plus = np.maximum(lam, 0.0)
    lam_minus = np.minimum(lam, 0.0)
    scaled = Tinv[..., :, :] * lam_plus[..., None, :]
    plus = scaled @ T
    minus = (Tinv * lam_minus[..., None, :]) @ T
    ind_plus = (lam >= 0.0).astype(float)
    proj_plus = (Tinv * ind_plus[..., None, :]) @ T
    proj_minus = (Tinv * (1.0 - ind_plus)[..., None, :]) @ T
    return EigenSplit(lam=lam, T=T, Tinv=Tinv, plus=plus, minus=minus,
                      proj_plus=proj_plus, proj_minus=proj_minus)
