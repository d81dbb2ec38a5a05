"""Goal-oriented anisotropic hp-adaptation loop.

Each level solves flow and dual problems, reconstructs degree-raised
states, splits the error estimate into element indicators, and converts
them into per-element size, aspect, orientation, and degree targets for
the remesher.  Sizes come from error equidistribution at the modeled local
order; shape and degree come from minimizing a directional derivative
model of the local error against the residual weights.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import factorial

from .adjoint import solve_adjoint
from .errors import ConfigError, Diverged, DegenerateDerivatives, \
    MaxLevelsReached
from .estimator import estimate, reconstruct
from .forms import TargetFunctional
from .mesh import element_descriptors
from .quadrature import monomial_exponents
from .remesh import METRIC_C, remesh
from .solver import solve_steady
from .space import Space
from .transfer import transfer_solution

# Coefficients below this fraction of the field amplitude carry no
# directional information.
_DEGENERACY_RTOL = 1e-10
# A degree switch must beat the current degree's model by this factor.
_SWITCH_MARGIN = 0.7
_N_SCAN = 48


@dataclass(frozen=True)
class AnisoTarget:
    """Proposed area, aspect, elongation direction, and degree of one element."""

    nu: float
    sigma: float
    phi: float
    p: int

    def __post_init__(self):
        if not self.nu > 0:
            raise ConfigError("target area nu must be positive")
        if not self.sigma >= 1.0:
            raise ConfigError("target aspect sigma must be at least one")
        if self.p < 1:
            raise ConfigError("target degree must be at least one")


@dataclass(frozen=True)
class AdaptConfig:
    tol: float
    max_levels: int = 10
    p_max: int = 4
    refine_fraction: float = 0.2
    equi_exponent: float = 1.0
    sigma_max: float = 100.0
    mode: str = 'hp'
    max_dof: int = 0            # 0 disables the safeguard

    def __post_init__(self):
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.mode not in ('h', 'hp'):
            raise ConfigError("mode must be 'h' or 'hp'")
        if not 0.0 <= self.refine_fraction <= 1.0:
            raise ConfigError("refine_fraction must lie in [0, 1]")


def dofs_per_element(p):
    """Four components times the scalar mode count."""
    return 2 * (p + 1) * (p + 2)


def propose_sizes(report, mesh, config):
    """Per-element area targets from error equidistribution.

    The local model error ~ nu^((p+1)/2) inverts to the size change that
    brings each indicator to its equal share of the tolerance; changes are
    clamped to one halving or doubling of edge length per level, and the
    refine_fraction worst elements are never allowed to grow.
    """
    nel = mesh.n_elements
    eta = np.abs(np.asarray(report.eta_IK, dtype=float))
    share = config.tol / nel
    ratio = share / np.maximum(eta, 1e-300)
    expo = config.equi_exponent * 2.0 / (mesh.degrees + 1.0)
    factor = np.clip(ratio ** expo, 0.25, 4.0)
    worst = np.argsort(-eta)[:int(np.ceil(config.refine_fraction * nel))]
    factor[worst] = np.minimum(factor[worst], 1.0)
    return element_descriptors(mesh).nu * factor


# -- directional derivative model ------------------------------------------


class _DerivativeFits:
    """Monomial fits of the 8 reconstructed fields on every rich element.

    Coefficients live in centroid-centered coordinates scaled by
    sqrt(area), so a slice of total degree q turns into the physical
    directional derivative via the factor q!/s^q.
    """

    def __init__(self, recon):
        rich = recon.w_plus.space
        mesh = rich.mesh
        nel = mesh.n_elements
        self.mesh = mesh
        self.degree_rich = mesh.degrees.copy()
        self.centers = mesh.vertices[mesh.triangles].mean(axis=1)
        self.scales = np.sqrt(mesh.areas)
        self.exps = {}
        self.coeffs = [None] * nel
        for cls in rich.classes:
            exps = monomial_exponents(cls.degree)
            self.exps[cls.degree] = exps
            pts = cls.vol_pts
            rel = ((pts - self.centers[cls.elems][:, None, :])
                   / self.scales[cls.elems][:, None, None])
            v = np.prod(rel[:, :, None, :] ** exps[None, None, :, :], axis=3)
            wb = recon.w_plus.coeffs[cls.dof]
            zb = recon.z_plus.coeffs[cls.dof]
            fvals = np.concatenate([
                np.einsum('eqm,ecm->eqc', cls.basis[:, :, :cls.nm], wb),
                np.einsum('eqm,ecm->eqc', cls.basis[:, :, :cls.nm], zb)],
                axis=2)
            sw = np.sqrt(cls.vol_w)[:, :, None]
            a = sw * v
            gram = np.einsum('eqi,eqj->eij', a, a)
            rhs = np.einsum('eqi,eqc->eic', a, sw * fvals)
            sol = np.linalg.solve(gram, rhs)
            for pos, e in enumerate(cls.elems):
                self.coeffs[int(e)] = sol[pos]
        self._tensors = None
        self._patches = None

    def amplitude(self, e):
        """Largest scaled coefficient of every field: the degeneracy scale."""
        return np.max(np.abs(self.coeffs[e]), axis=0)

    def slice_poly(self, e, q):
        """Directional polynomial rows (terms, 8) for cos^j sin^k of j+k=q."""
        exps = self.exps[int(self.degree_rich[e])]
        rows = np.where(exps.sum(axis=1) == q)[0]
        fac = factorial(q) / self.scales[e] ** q
        return exps[rows], fac * self.coeffs[e][rows]

    def _vertex_patches(self):
        if self._patches is None:
            tri = self.mesh.triangles
            v2e = {}
            for e, row in enumerate(tri):
                for vtx in row:
                    v2e.setdefault(int(vtx), []).append(e)
            self._patches = [
                sorted(set(k for vtx in row for k in v2e[int(vtx)]))
                for row in tri]
        return self._patches

    def top_tensors(self):
        """Physical top-degree derivative components, (nel, P + 1, 8)."""
        if self._tensors is None:
            nel = self.mesh.n_elements
            pmax = int(self.degree_rich.max())
            out = np.full((nel, pmax + 2, 8), np.nan)
            for e in range(nel):
                deg = int(self.degree_rich[e])
                exps, rows = self.slice_poly(e, deg)
                # slice_poly scales by q!; tensor components want j! k!
                for (j, k), vals in zip(exps, rows):
                    comp = vals * factorial(j) * factorial(k) / factorial(deg)
                    out[e, k, :] = comp
            self._tensors = out
        return self._tensors

    def grown_slice(self, e):
        """One order past the fit: patch gradients of the top tensor field.

        Returns cos/sin exponent rows and coefficients for q = P + 1, in
        physical units, or None when the patch is too small to fit.
        """
        deg = int(self.degree_rich[e])
        patch = self._vertex_patches()[e]
        same = [k for k in patch if int(self.degree_rich[k]) == deg]
        if len(same) < 3:
            return None
        tensors = self.top_tensors()
        pts = self.centers[same] - self.centers[e]
        a = np.column_stack([np.ones(len(same)), pts[:, 0], pts[:, 1]])
        coef, _, _, _ = np.linalg.lstsq(
            a, tensors[same][:, :deg + 1, :].reshape(len(same), -1),
            rcond=None)
        grad = coef[1:].reshape(2, deg + 1, 8)
        q = deg + 1
        tp = np.zeros((q + 1, 8))
        for m in range(q + 1):
            est = []
            if m <= deg:
                est.append(grad[0, m])
            if m >= 1:
                est.append(grad[1, m - 1])
            tp[m] = np.mean(est, axis=0)
        exps = np.array([[q - m, m] for m in range(q + 1)], dtype=np.int64)
        comb = np.array([math.comb(q, m) for m in range(q + 1)], dtype=float)
        return exps, comb[:, None] * tp


def _directional_values(exps, rows, weights, angles):
    """Weighted absolute directional derivative A(psi) on a set of angles."""
    c, s = np.cos(angles), np.sin(angles)
    basis = (c[:, None] ** exps[None, :, 0]) * (s[:, None] ** exps[None, :, 1])
    return np.abs(basis @ rows) @ weights


def _model_at(nu, q, a_val, b_val, sigma_max):
    """Model error for refinement-direction content a and cross content b."""
    if a_val <= 0.0 and b_val <= 0.0:
        return 0.0, 1.0
    sigma = (a_val / max(b_val, 1e-300)) ** (1.0 / q)
    sigma = min(max(sigma, 1.0), sigma_max)
    scale = math.sqrt(nu) * (METRIC_C * nu) ** (0.5 * q)
    return scale * (a_val * sigma ** (-0.5 * q)
                    + b_val * sigma ** (0.5 * q)), sigma


def _optimize_angle(nu, q, exps, rows, weights, sigma_max):
    """Best refinement direction by coarse scan plus golden-section refine."""
    angles = np.linspace(0.0, np.pi, _N_SCAN, endpoint=False)
    a_scan = _directional_values(exps, rows, weights, angles)
    b_scan = np.roll(a_scan, -_N_SCAN // 2)
    g_scan = np.array([_model_at(nu, q, a, b, sigma_max)[0]
                       for a, b in zip(a_scan, b_scan)])
    k = int(np.argmin(g_scan))

    def g_of(psi):
        pair = _directional_values(exps, rows, weights,
                                   np.array([psi, psi + 0.5 * np.pi]))
        return _model_at(nu, q, pair[0], pair[1], sigma_max)

    lo = angles[k] - np.pi / _N_SCAN
    hi = angles[k] + np.pi / _N_SCAN
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = hi - inv * (hi - lo)
    x2 = lo + inv * (hi - lo)
    f1, f2 = g_of(x1)[0], g_of(x2)[0]
    for _ in range(40):
        if f1 <= f2:
            hi, x2, f2 = x2, x1, f1
            x1 = hi - inv * (hi - lo)
            f1 = g_of(x1)[0]
        else:
            lo, x1, f1 = x1, x2, f2
            x2 = lo + inv * (hi - lo)
            f2 = g_of(x2)[0]
    psi = 0.5 * (lo + hi)
    g_val, sigma = g_of(psi)
    return g_val, sigma, psi % np.pi


def optimize_shape_and_degree(recon, report, element, config, nu=None,
                              fits=None):
    """Aspect, orientation, and degree minimizing the local error model.

    The model contracts weighted directional derivatives of the eight
    reconstructed fields (dual weights carry the flow residual norms, flow
    weights the dual residual norms) with the element size along and
    across a candidate refinement direction.  Degenerate derivative
    content falls back to an isotropic element at the current degree.
    """
    e = int(element)
    fits = fits or _DerivativeFits(recon)
    p = int(fits.degree_rich[e]) - 1
    if nu is None:
        nu = float(element_descriptors(recon.w_plus.space.mesh).nu[e])

    weights = np.concatenate([
        report.dual_res_vol_norms[e] + report.dual_res_face_norms[e],
        report.res_vol_norms[e] + report.res_face_norms[e]])
    ref = float(weights @ fits.amplitude(e))

    def candidate(r):
        q = r + 1
        if q <= p + 1:
            exps, rows = fits.slice_poly(e, q)
        else:
            grown = fits.grown_slice(e)
            if grown is None:
                return None
            exps, rows = grown
        floor = _DEGENERACY_RTOL * factorial(q) / fits.scales[e] ** q * ref
        nu_r = nu * dofs_per_element(r) / dofs_per_element(p)
        probe = _directional_values(exps, rows, weights,
                                    np.linspace(0, np.pi, 8, endpoint=False))
        if probe.max(initial=0.0) <= floor:
            raise DegenerateDerivatives(
                f"element {e}: no degree-{q} directional content")
        g_val, sigma, psi = _optimize_angle(nu_r, q, exps, rows, weights,
                                            config.sigma_max)
        pair = _directional_values(exps, rows, weights,
                                   np.array([psi, psi + 0.5 * np.pi]))
        scale = math.sqrt(nu_r) * (METRIC_C * nu_r) ** (0.5 * q)
        g_iso = scale * (pair[0] + pair[1])
        assert g_val <= g_iso * (1.0 + 1e-9), \
            "shape optimum worse than isotropic candidate"
        return g_val, sigma, psi, nu_r

    try:
        best = candidate(p)
    except DegenerateDerivatives:
        return AnisoTarget(nu=float(nu), sigma=1.0, phi=0.0, p=p)

    g_p, sigma, psi, nu_sel = best
    p_sel = p
    if config.mode == 'hp':
        for r in (p - 1, p + 1):
            if not 1 <= r <= config.p_max:
                continue
            try:
                cand = candidate(r)
            except DegenerateDerivatives:
                continue
            if cand is not None and cand[0] < _SWITCH_MARGIN * g_p \
                    and cand[0] < _SWITCH_MARGIN * best[0]:
                best = cand
                _, sigma, psi, nu_sel = cand
                p_sel = r
    return AnisoTarget(nu=float(nu_sel), sigma=float(sigma),
                       phi=float((psi + 0.5 * np.pi) % np.pi), p=p_sel)


# -- the level loop --------------------------------------------------------


@dataclass
class AdaptLevel:
    """Everything one adaptation level produced."""

    level: int
    mesh: object
    space: Space
    solution: object
    adjoint: object
    report: object

    @property
    def dof(self):
        return int(np.sum(dofs_per_element(self.mesh.degrees)))


@dataclass
class AdaptResult:
    levels: list

    @property
    def final(self):
        return self.levels[-1]


def adapt_loop(mesh, cond, kind, config, solver_config=None, geometry=None,
               j_ref=None, callback=None, x_ref=(0.25, 0.0), l_ref=1.0):
    """Drive solve, estimate, and remesh until the estimate meets tol.

    Levels stop as soon as |eta_I| <= tol; hitting max_levels first raises
    MaxLevelsReached carrying the best-so-far AdaptResult.  The callback,
    when given, sees each AdaptLevel right after its estimate.
    """
    levels = []
    space = Space(mesh)
    initial = None
    level = 0
    while True:
        solution, history = solve_steady(space, cond, solver_config,
                                         initial=initial)
        if not history.converged:
            raise Diverged(f"flow solve stalled on level {level}")
        target = TargetFunctional(kind, cond, x_ref=x_ref, l_ref=l_ref)
        adjoint = solve_adjoint(solution, target, solver_config)
        recon = reconstruct(solution, adjoint)
        report = estimate(solution, adjoint, recon, j_ref=j_ref)
        lvl = AdaptLevel(level, mesh, space, solution, adjoint, report)
        levels.append(lvl)
        if callback is not None:
            callback(lvl)
        if abs(report.eta_I) <= config.tol:
            return AdaptResult(levels)
        if level >= config.max_levels:
            raise MaxLevelsReached(
                f"estimate {report.eta_I:.3e} above tol after "
                f"{config.max_levels} adaptations", AdaptResult(levels))
        if config.max_dof and lvl.dof >= config.max_dof:
            raise MaxLevelsReached(
                f"degree-of-freedom budget {config.max_dof} exhausted",
                AdaptResult(levels))

        nu = propose_sizes(report, mesh, config)
        fits = _DerivativeFits(recon)
        targets = [optimize_shape_and_degree(recon, report, e, config,
                                             nu=nu[e], fits=fits)
                   for e in range(mesh.n_elements)]
        mesh = remesh(mesh, targets, geometry=geometry)
        space = Space(mesh)
        initial = transfer_solution(solution, space, cond)
        level += 1
