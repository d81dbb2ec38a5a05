"""Goal-oriented error estimation from primal and dual residual fields.

The estimator evaluates the strong residuals of the flow state and of the
dual state at quadrature nodes, weights them with the high-order remainder
of locally reconstructed solutions, and sums the products into the signed
estimate eta_I and its Cauchy-Schwarz bound eta_II.  The reconstructions
solve, per element, the degree-raised problem with all neighbours frozen:
a damped Newton iteration for the flow, a single transposed block solve
for the dual.
"""

from dataclasses import dataclass

import numpy as np

from . import boundary, euler
from .errors import LocalSolveFailure
from .forms import (_bilinear_blocks, _require_states, assemble_system,
                    boundary_flux)
from .mesh import FARFIELD, WALL
from .quadrature import n_modes
from .space import (N_COMP, DGSolution, Space, class_coeffs, prolong,
                    trace_values, volume_values)


def enriched_space(space):
    """Companion space with every element degree raised by one."""
    mesh = space.mesh.with_degrees(space.mesh.degrees + 1)
    return Space(mesh, quad_bump=space.quad_bump)


@dataclass(frozen=True)
class ResidualFields:
    """Strong residuals sampled at the quadrature nodes of one space.

    Volume entries follow space.classes, face entries follow the interior
    and boundary groups; interior faces carry one field per side, each with
    that side's outward normal.
    """

    space: Space
    volume: list
    interior_l: list
    interior_r: list
    boundary: list


def _solution_on(sol, space):
    if space is None or space is sol.space:
        return sol
    return prolong(sol, space)


def _class_gradients(sol, cls):
    """d/dx_s of the solution at the class volume nodes, (ne, nq, 2, 4)."""
    cf = class_coeffs(sol, cls)
    return np.einsum('eaj,eqjs->eqsa', cf, cls.grad[:, :, :cls.nm, :])


def primal_residual_fields(sol, cond, space=None, check=True):
    """Strong flow residuals: volume divergence defect and flux mismatches.

    Faces carry the difference between the one-sided normal flux and the
    numerical flux actually used by the scheme; at far-field faces this
    reduces to the incoming-wave projector applied to the trace minus the
    Riemann boundary state.
    """
    sol = _solution_on(sol, space)
    space = sol.space
    gas = cond.gas

    volume = []
    for cls, vals in zip(space.classes, volume_values(sol)):
        if check:
            _require_states(vals, cls.elems, gas)
        amat = euler.flux_jacobian(vals, gas, check=False)
        grads = _class_gradients(sol, cls)
        volume.append(-np.einsum('eqsab,eqsb->eqa', amat, grads))

    interior_l, interior_r = [], []
    for g in space.interior_groups:
        wl = trace_values(sol, g, 'l')
        wr = trace_values(sol, g, 'r')
        if check:
            _require_states(wl, g.elems_l, gas)
            _require_states(wr, g.elems_r, gas)
        n = g.normals[:, None, :]
        interior_l.append(euler.directional_flux(wl, n, gas, check=False)
                          - boundary.vijayasundaram(wl, wr, n, gas,
                                                    check=False))
        interior_r.append(euler.directional_flux(wr, -n, gas, check=False)
                          - boundary.vijayasundaram(wr, wl, -n, gas,
                                                    check=False))

    bnd = []
    for g in space.boundary_groups:
        tr = trace_values(sol, g)
        if check:
            _require_states(tr, g.elems, gas)
        n = g.normals[:, None, :]
        if g.tag == FARFIELD:
            es = euler.eigen_split(tr, n, gas, check=False)
            ghost = boundary.riemann_boundary_state(tr, cond.free_stream, n,
                                                    gas, check=False)
            bnd.append(np.einsum('fqab,fqb->fqa', es.minus, tr - ghost))
        else:
            h = boundary_flux(g, tr, cond, check=False)
            bnd.append(euler.directional_flux(tr, n, gas, check=False) - h)

    return ResidualFields(space, volume, interior_l, interior_r, bnd)


def dual_residual_fields(primal, adjoint, space=None, check=True):
    """Strong residuals of the dual state against the frozen linearization.

    Interior faces see the transposed upwind matrices applied to the dual
    jump; the wall face pairs the target weight against the dual trace
    through the wall linearization, so it vanishes when the two agree.
    """
    target = adjoint.target
    cond = target.conditions
    gas = cond.gas
    w = _solution_on(primal, space)
    space = w.space
    z = _solution_on(adjoint.z, space)

    volume = []
    for cls, vals in zip(space.classes, volume_values(w)):
        if check:
            _require_states(vals, cls.elems, gas)
        amat = euler.flux_jacobian(vals, gas, check=False)
        zgrads = _class_gradients(z, cls)
        volume.append(np.einsum('eqsab,eqsa->eqb', amat, zgrads))

    interior_l, interior_r = [], []
    for g in space.interior_groups:
        wl = trace_values(w, g, 'l')
        wr = trace_values(w, g, 'r')
        if check:
            _require_states(wl, g.elems_l, gas)
            _require_states(wr, g.elems_r, gas)
        mean = 0.5 * (wl + wr)
        es = euler.eigen_split(mean, g.normals[:, None, :], gas, check=False)
        jump = trace_values(z, g, 'l') - trace_values(z, g, 'r')
        interior_l.append(-np.einsum('fqba,fqb->fqa', es.plus, jump))
        interior_r.append(-np.einsum('fqba,fqb->fqa', es.minus, jump))

    bnd = []
    for g in space.boundary_groups:
        tr = trace_values(w, g)
        if check:
            _require_states(tr, g.elems, gas)
        ztr = trace_values(z, g)
        n = g.normals[:, None, :]
        if g.tag == FARFIELD:
            es = euler.eigen_split(tr, n, gas, check=False)
            bnd.append(-np.einsum('fqba,fqb->fqa', es.plus, ztr))
            continue
        wmat = boundary.wall_lin_matrix(tr, n, gas, cond.wall_kind,
                                        check=False)
        if adjoint.inconsistent:
            th = target.theta(g.pts.reshape(-1, 2)).reshape(g.pts.shape)
            ndth = np.einsum('fs,fqs->fq', g.normals, th)
            act = euler.pressure_gradient(tr, gas) * ndth[:, :, None]
        else:
            tth = target.theta_tilde(g.pts.reshape(-1, 2)).reshape(tr.shape)
            act = np.einsum('fqba,fqb->fqa', wmat, tth)
        mmat = wmat
        if cond.wall_relax < 1.0:
            w_inf = np.broadcast_to(cond.free_stream, tr.shape)
            aplus, _ = boundary.io_lin_parts(tr, w_inf, n, gas, check=False)
            mmat = cond.wall_relax * wmat + (1.0 - cond.wall_relax) * aplus
        bnd.append(act - np.einsum('fqba,fqb->fqa', mmat, ztr))

    return ResidualFields(space, volume, interior_l, interior_r, bnd)


def weak_residual_sum(fields, test):
    """Quadrature sum of all fields against one test state on their space."""
    if test.space is not fields.space:
        raise ValueError("test state lives on a different space")
    space = fields.space
    total = 0.0
    for cls, rf, tv in zip(space.classes, fields.volume, volume_values(test)):
        total += float(np.einsum('eq,eqa,eqa->', cls.vol_w, rf, tv))
    for g, rl, rr in zip(space.interior_groups, fields.interior_l,
                         fields.interior_r):
        total += float(np.einsum('fq,fqa,fqa->', g.w, rl,
                                 trace_values(test, g, 'l')))
        total += float(np.einsum('fq,fqa,fqa->', g.w, rr,
                                 trace_values(test, g, 'r')))
    for g, rb in zip(space.boundary_groups, fields.boundary):
        total += float(np.einsum('fq,fqa,fqa->', g.w, rb,
                                 trace_values(test, g)))
    return total


def projection_remainder(sol):
    """sol minus its elementwise L2 projection one degree down.

    The basis is an orthogonal hierarchy, so the projection is plain
    coefficient truncation and the remainder keeps only the top-degree
    modes.
    """
    out = sol.coeffs.copy()
    for cls in sol.space.classes:
        out[cls.dof[:, :, :n_modes(cls.degree - 1)]] = 0.0
    return DGSolution(sol.space, out)


# -- local reconstructions -------------------------------------------------


@dataclass(frozen=True)
class ReconstructConfig:
    max_iter: int = 12
    rtol: float = 1e-10
    atol: float = 1e-12
    max_backtracks: int = 10


@dataclass(frozen=True)
class ReconstructedPair:
    """Degree-raised local solutions with their solve diagnostics.

    iterations counts damped Newton steps until each element's local
    problem met its tolerance; fallback_elems lists elements that ended in
    the patchwise least-squares recovery instead.
    """

    w_plus: DGSolution
    z_plus: DGSolution
    iterations: np.ndarray
    fallback_elems: np.ndarray


def _elem_norms(space, vec):
    out = np.zeros(space.mesh.n_elements)
    for cls in space.classes:
        rows = vec[cls.dof]
        out[cls.elems] = np.sqrt(np.einsum('eai,eai->e', rows, rows))
    return out


def _mixed_residual(coeffs, frozen, cond):
    """Residual rows where each element sees itself updated, neighbours not.

    Rows of one element depend only on that element's own coefficients, so
    all local problems evaluate in lockstep; inadmissible trial states
    surface as NaN rows and fail the acceptance comparison downstream.
    """
    space = frozen.space
    gas = cond.gas
    cand = DGSolution(space, coeffs)
    out = np.zeros(space.n_dofs)
    with np.errstate(all='ignore'):
        for cls, vals in zip(space.classes, volume_values(cand)):
            f = euler.flux(vals, gas, check=False)
            out[cls.dof] -= np.einsum('eq,eqas,eqis->eai', cls.vol_w, f,
                                      cls.grad[:, :, :cls.nm, :])
        for g in space.interior_groups:
            n = g.normals[:, None, :]
            trl = g.trace_l[:, :, :g.dof_l.shape[2]]
            trr = g.trace_r[:, :, :g.dof_r.shape[2]]
            hl = boundary.vijayasundaram(trace_values(cand, g, 'l'),
                                         trace_values(frozen, g, 'r'),
                                         n, gas, check=False)
            np.add.at(out, g.dof_l,
                      np.einsum('fq,fqa,fqi->fai', g.w, hl, trl))
            hr = boundary.vijayasundaram(trace_values(frozen, g, 'l'),
                                         trace_values(cand, g, 'r'),
                                         n, gas, check=False)
            np.add.at(out, g.dof_r,
                      -np.einsum('fq,fqa,fqi->fai', g.w, hr, trr))
        for g in space.boundary_groups:
            h = boundary_flux(g, trace_values(cand, g), cond, check=False)
            np.add.at(out, g.dof,
                      np.einsum('fq,fqa,fqi->fai', g.w, h,
                                g.trace[:, :, :g.dof.shape[2]]))
    return out


def _mixed_blocks(coeffs, frozen, cond):
    """Per-element Jacobian blocks of the frozen-neighbour local problems."""
    space = frozen.space
    gas = cond.gas
    cand = DGSolution(space, coeffs)
    pos = space.elem_class_pos
    diag = {}
    with np.errstate(all='ignore'):
        for cls, vals in zip(space.classes, volume_values(cand)):
            amat = euler.flux_jacobian(vals, gas, check=False)
            nm = cls.nm
            ne = len(cls.elems)
            basis = cls.basis[:, :, :nm]
            out = np.zeros((ne, N_COMP, nm, N_COMP, nm))
            for s in range(2):
                grad_s = cls.grad[:, :, :nm, s]
                for a in range(N_COMP):
                    for b in range(N_COMP):
                        wt = grad_s * (cls.vol_w * amat[:, :, s, a, b])[:, :, None]
                        out[:, a, :, b, :] -= np.matmul(wt.transpose(0, 2, 1),
                                                        basis)
            diag[cls.degree] = out.reshape(ne, N_COMP * nm, N_COMP * nm)

        for g in space.interior_groups:
            n = g.normals[:, None, :]
            trl = g.trace_l[:, :, :g.dof_l.shape[2]]
            trr = g.trace_r[:, :, :g.dof_r.shape[2]]
            mean_l = 0.5 * (trace_values(cand, g, 'l')
                            + trace_values(frozen, g, 'r'))
            es = euler.eigen_split(mean_l, n, gas, check=False)
            np.add.at(diag[g.deg_l], pos[g.elems_l],
                      _bilinear_blocks(g.w[:, :, None, None] * es.plus,
                                       trl, trl))
            mean_r = 0.5 * (trace_values(frozen, g, 'l')
                            + trace_values(cand, g, 'r'))
            es = euler.eigen_split(mean_r, n, gas, check=False)
            np.add.at(diag[g.deg_r], pos[g.elems_r],
                      -_bilinear_blocks(g.w[:, :, None, None] * es.minus,
                                        trr, trr))

        for g in space.boundary_groups:
            tr = trace_values(cand, g)
            n = g.normals[:, None, :]
            trc = g.trace[:, :, :g.dof.shape[2]]
            if g.tag == WALL:
                wmat = boundary.wall_lin_matrix(tr, n, gas, cond.wall_kind,
                                                check=False)
                if cond.wall_relax < 1.0:
                    w_inf = np.broadcast_to(cond.free_stream, tr.shape)
                    aplus, _ = boundary.io_lin_parts(tr, w_inf, n, gas,
                                                     check=False)
                    wmat = (cond.wall_relax * wmat
                            + (1.0 - cond.wall_relax) * aplus)
            else:
                w_inf = np.broadcast_to(cond.free_stream, tr.shape)
                wmat, _ = boundary.io_lin_parts(tr, w_inf, n, gas,
                                                check=False)
            np.add.at(diag[g.degree], pos[g.elems],
                      _bilinear_blocks(g.w[:, :, None, None] * wmat,
                                       trc, trc))
    return diag


def _batched_solve(blocks, rhs):
    try:
        return np.linalg.solve(blocks, rhs[:, :, None])[:, :, 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(rhs)
        for k in range(len(rhs)):
            try:
                out[k] = np.linalg.solve(blocks[k], rhs[k])
            except np.linalg.LinAlgError:
                out[k] = np.linalg.lstsq(blocks[k], rhs[k], rcond=None)[0]
        return out


def _patch_recovery(coeffs, frozen, elems):
    """Least-squares fit of the frozen state on each element's face patch.

    Keeps the element's own degree-raised basis but fits it against the
    neighbourhood values, which always produces finite coefficients even
    where the local Newton iteration stalled.
    """
    space = frozen.space
    pos = space.elem_class_pos
    degrees = space.mesh.degrees
    for e in elems:
        e = int(e)
        patch = [e] + [int(k) for k in space.mesh.neighbors[e]]
        pts, wts, vals = [], [], []
        for k in patch:
            cls = space.class_of[int(degrees[k])]
            p = pos[k]
            pts.append(cls.vol_pts[p])
            wts.append(cls.vol_w[p])
            vals.append(frozen.values_at(k, cls.vol_pts[p]))
        pts = np.concatenate(pts)
        root_w = np.sqrt(np.concatenate(wts))[:, None]
        amat = root_w * space.basis_at(e, pts)
        rhs = root_w * np.concatenate(vals)
        fit, *_ = np.linalg.lstsq(amat, rhs, rcond=None)
        if not np.all(np.isfinite(fit)):
            raise LocalSolveFailure(f"patch recovery on element {e} "
                                    "produced non-finite coefficients")
        cls = space.class_of[int(degrees[e])]
        coeffs[cls.dof[pos[e]]] = fit.T


def _reconstruct_dual(frozen, adjoint):
    """One transposed block solve per element with neighbours frozen.

    The dual local problems are linear in the unknown block, so each is
    solved exactly in a single step from the embedded dual state.
    """
    space = frozen.space
    target = adjoint.target
    system, _ = assemble_system(frozen, target.conditions, check=False)
    if adjoint.inconsistent:
        g = target.gradient_inconsistent(frozen)
    else:
        g = target.gradient(frozen)
    z0 = prolong(adjoint.z, space).coeffs
    defect = g - system.tocsr().T @ z0
    out = z0.copy()
    for p, blocks in system.diag.items():
        cls = space.class_of[p]
        flat = cls.dof.reshape(len(cls.elems), -1)
        out[flat] += _batched_solve(blocks.transpose(0, 2, 1), defect[flat])
    if not np.all(np.isfinite(out)):
        bad = _elem_norms(space, np.where(np.isfinite(out), 0.0, 1.0))
        raise LocalSolveFailure("dual reconstruction produced non-finite "
                                f"coefficients on element {int(bad.argmax())}")
    return DGSolution(space, out)


def reconstruct(primal, adjoint, config=None):
    """Degree-raised flow and dual states from frozen-neighbour local solves."""
    config = config or ReconstructConfig()
    cond = adjoint.target.conditions
    rich = enriched_space(primal.space)
    frozen = prolong(primal, rich)
    nel = rich.mesh.n_elements
    flat_dof = {cls.degree: cls.dof.reshape(len(cls.elems), -1)
                for cls in rich.classes}

    coeffs = frozen.coeffs.copy()
    res = _mixed_residual(coeffs, frozen, cond)
    rnorm = _elem_norms(rich, res)
    thresh = np.maximum(config.atol, config.rtol * rnorm)
    done = rnorm <= thresh
    iters = np.zeros(nel, dtype=np.int64)

    for it in range(1, config.max_iter + 1):
        if done.all():
            break
        blocks = _mixed_blocks(coeffs, frozen, cond)
        step = {p: _batched_solve(blk, -res[flat_dof[p]])
                for p, blk in blocks.items()}
        delta = np.ones(nel)
        pending = ~done
        for _ in range(config.max_backtracks + 1):
            trial = coeffs.copy()
            for cls in rich.classes:
                sel = pending[cls.elems]
                if not sel.any():
                    continue
                flat = flat_dof[cls.degree][sel]
                trial[flat] += (delta[cls.elems][sel, None]
                                * step[cls.degree][sel])
            tres = _mixed_residual(trial, frozen, cond)
            tnorm = _elem_norms(rich, tres)
            accept = pending & (tnorm <= (1.0 - 1e-4 * delta) * rnorm)
            if accept.any():
                for cls in rich.classes:
                    sel = accept[cls.elems]
                    if sel.any():
                        flat = flat_dof[cls.degree][sel]
                        coeffs[flat] = trial[flat]
                        res[flat] = tres[flat]
                rnorm = np.where(accept, tnorm, rnorm)
            pending &= ~accept
            if not pending.any():
                break
            delta[pending] *= 0.5
        newly = ~done & (rnorm <= thresh)
        iters[newly] = it
        done |= newly

    fallback = np.where(~done)[0]
    iters[fallback] = config.max_iter
    if len(fallback):
        _patch_recovery(coeffs, frozen, fallback)

    z_plus = _reconstruct_dual(frozen, adjoint)
    return ReconstructedPair(DGSolution(rich, coeffs), z_plus, iters,
                             fallback)


# -- the estimate ----------------------------------------------------------


@dataclass(frozen=True)
class ErrorReport:
    """Signed estimate, its bound, and the per-element pieces behind them."""

    eta_I: float
    eta_II: float
    eta_IK: np.ndarray
    eta_IIK: np.ndarray
    res_vol_norms: np.ndarray       # (nel, 4) componentwise volume residual
    res_face_norms: np.ndarray      # (nel, 4) componentwise face residual
    dual_res_vol_norms: np.ndarray
    dual_res_face_norms: np.ndarray
    j_value: float
    jtilde_value: float
    effectivity: float
    fallback_elems: np.ndarray


def _volume_terms(space, fields, weight, dot, res2, wgt2):
    for cls, rf, tv in zip(space.classes, fields.volume,
                           volume_values(weight)):
        dot[cls.elems] += np.einsum('eq,eqa,eqa->e', cls.vol_w, rf, tv)
        res2[cls.elems] += np.einsum('eq,eqa->ea', cls.vol_w, rf ** 2)
        wgt2[cls.elems] += np.einsum('eq,eqa->ea', cls.vol_w, tv ** 2)


def _face_terms(space, fields, weight, dot, res2, wgt2):
    for g, rl, rr in zip(space.interior_groups, fields.interior_l,
                         fields.interior_r):
        for elems, rf, side in ((g.elems_l, rl, 'l'), (g.elems_r, rr, 'r')):
            tv = trace_values(weight, g, side)
            np.add.at(dot, elems, np.einsum('fq,fqa,fqa->f', g.w, rf, tv))
            np.add.at(res2, elems, np.einsum('fq,fqa->fa', g.w, rf ** 2))
            np.add.at(wgt2, elems, np.einsum('fq,fqa->fa', g.w, tv ** 2))
    for g, rf in zip(space.boundary_groups, fields.boundary):
        tv = trace_values(weight, g)
        np.add.at(dot, g.elems, np.einsum('fq,fqa,fqa->f', g.w, rf, tv))
        np.add.at(res2, g.elems, np.einsum('fq,fqa->fa', g.w, rf ** 2))
        np.add.at(wgt2, g.elems, np.einsum('fq,fqa->fa', g.w, tv ** 2))


def estimate(primal, adjoint, recon, j_ref=None, check=True):
    """Error report pairing residual fields with reconstruction remainders.

    eta_IK collects each element's own volume and face terms of the signed
    sum; eta_IIK bounds it by componentwise Cauchy-Schwarz, so
    |eta_I| <= sum |eta_IK| <= eta_II holds by construction.  effectivity
    divides eta_I by the error against j_ref when a reference is given.
    """
    rich = recon.w_plus.space
    base = primal.space
    if not np.array_equal(rich.mesh.degrees, base.mesh.degrees + 1):
        raise ValueError("reconstruction degrees do not sit one above the "
                         "solution space")
    target = adjoint.target
    cond = target.conditions

    pf = primal_residual_fields(primal, cond, space=rich, check=check)
    df = dual_residual_fields(primal, adjoint, space=rich, check=False)
    zw = projection_remainder(recon.z_plus)
    ww = projection_remainder(recon.w_plus)

    nel = rich.mesh.n_elements
    prim_dot = np.zeros(nel)
    dual_dot = np.zeros(nel)
    rv2 = np.zeros((nel, N_COMP))
    rb2 = np.zeros((nel, N_COMP))
    dv2 = np.zeros((nel, N_COMP))
    db2 = np.zeros((nel, N_COMP))
    zv2 = np.zeros((nel, N_COMP))
    zb2 = np.zeros((nel, N_COMP))
    wv2 = np.zeros((nel, N_COMP))
    wb2 = np.zeros((nel, N_COMP))

    _volume_terms(rich, pf, zw, prim_dot, rv2, zv2)
    _face_terms(rich, pf, zw, prim_dot, rb2, zb2)
    _volume_terms(rich, df, ww, dual_dot, dv2, wv2)
    _face_terms(rich, df, ww, dual_dot, db2, wb2)

    eta_ik = 0.5 * (prim_dot + dual_dot)
    rv, rb, dv, db = (np.sqrt(a) for a in (rv2, rb2, dv2, db2))
    zv, zb, wv, wb = (np.sqrt(a) for a in (zv2, zb2, wv2, wb2))
    eta_iik = 0.5 * np.sum(rv * zv + rb * zb + dv * wv + db * wb, axis=1)

    j_value = target.pressure_integral(primal)
    effectivity = float('nan')
    if j_ref is not None and j_ref != j_value:
        effectivity = float(np.sum(eta_ik)) / (j_ref - j_value)
    return ErrorReport(
        eta_I=float(np.sum(eta_ik)),
        eta_II=float(np.sum(eta_iik)),
        eta_IK=eta_ik,
        eta_IIK=eta_iik,
        res_vol_norms=rv,
        res_face_norms=rb,
        dual_res_vol_norms=dv,
        dual_res_face_norms=db,
        j_value=j_value,
        jtilde_value=target.flux_integral(primal),
        effectivity=effectivity,
        fallback_elems=recon.fallback_elems,
    )
