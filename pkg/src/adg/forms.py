"""Residual and linearized-operator assembly for the steady Euler DG scheme.

The nonlinear residual pairs the weak volume term with Vijayasundaram
interior fluxes, a pressure-based or mirror-based wall flux, and a
characteristic inflow/outflow flux fed by free-stream data.  The linearized
operator freezes the flux matrices at the current state; by flux homogeneity
that operator applied to the state itself reproduces the residual up to the
boundary data term, which assemble_system returns alongside the matrix.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import boundary, euler
from .errors import ConfigError, NonAdmissibleAtQuadrature
from .mesh import FARFIELD, WALL
from .space import N_COMP, trace_values, volume_values


@dataclass(frozen=True)
class FlowConditions:
    """Free-stream data and wall treatment shared by all assemblies.

    wall_relax blends the wall flux with the transparent far-field flux;
    values below one exist only to continue cold starts, the physical
    problem always uses 1.
    """

    gas: euler.GasParams
    mach: float
    alpha: float
    wall_kind: int = 1
    wall_relax: float = 1.0

    def __post_init__(self):
        if self.wall_kind not in boundary.WALL_KINDS:
            raise ConfigError(f"wall_kind must be one of {boundary.WALL_KINDS}")
        if not 0.0 <= self.wall_relax <= 1.0:
            raise ConfigError("wall_relax must lie in [0, 1]")

    @property
    def free_stream(self):
        return euler.free_stream_state(self.gas, self.mach, self.alpha)


def _require_states(vals, elems, gas):
    """Raise with the offending element and node if any state leaves D."""
    ok = euler.admissible_mask(vals, gas)
    if ok.all():
        return
    flat = np.argwhere(~ok)[0]
    raise NonAdmissibleAtQuadrature(int(elems[flat[0]]), int(flat[1]))


def boundary_flux(group, tr, cond, check=True):
    n = group.normals[:, None, :]
    if group.tag == WALL:
        h = boundary.wall_flux(tr, n, cond.gas, cond.wall_kind, check=check)
        tau = cond.wall_relax
        if tau < 1.0:
            w_inf = np.broadcast_to(cond.free_stream, tr.shape)
            h = tau * h + (1.0 - tau) * boundary.io_flux(tr, w_inf, n,
                                                         cond.gas, check=False)
        return h
    if group.tag == FARFIELD:
        w_inf = np.broadcast_to(cond.free_stream, tr.shape)
        return boundary.io_flux(tr, w_inf, n, cond.gas, check=check)
    raise ConfigError(f"no boundary treatment for tag {group.tag}")


def assemble_residual(sol, cond, check=True):
    """Residual vector of the discrete steady problem at the given state."""
    space = sol.space
    gas = cond.gas
    r = np.zeros(space.n_dofs)

    for cls, vals in zip(space.classes, volume_values(sol)):
        if check:
            _require_states(vals, cls.elems, gas)
        f = euler.flux(vals, gas, check=False)
        r[cls.dof] -= np.einsum('eq,eqas,eqis->eai', cls.vol_w, f,
                                cls.grad[:, :, :cls.nm, :])

    for g in space.interior_groups:
        wl = trace_values(sol, g, 'l')
        wr = trace_values(sol, g, 'r')
        if check:
            _require_states(wl, g.elems_l, gas)
            _require_states(wr, g.elems_r, gas)
        h = boundary.vijayasundaram(wl, wr, g.normals[:, None, :], gas,
                                    check=False)
        hw = g.w[:, :, None] * h
        np.add.at(r, g.dof_l,
                  np.einsum('fqa,fqi->fai', hw, g.trace_l[:, :, :g.dof_l.shape[2]]))
        np.add.at(r, g.dof_r,
                  -np.einsum('fqa,fqi->fai', hw, g.trace_r[:, :, :g.dof_r.shape[2]]))

    for g in space.boundary_groups:
        tr = trace_values(sol, g)
        if check:
            _require_states(tr, g.elems, gas)
        h = boundary_flux(g, tr, cond, check=False)
        hw = g.w[:, :, None] * h
        np.add.at(r, g.dof,
                  np.einsum('fqa,fqi->fai', hw, g.trace[:, :, :g.dof.shape[2]]))
    return r


def _bilinear_blocks(wmat, rows_tab, cols_tab):
    """Blocks sum_q wmat[f,q,a,b] rows[f,q,i] cols[f,q,j] -> (nf, 4 nr, 4 nc)."""
    nf, _, nr = rows_tab.shape
    nc = cols_tab.shape[2]
    out = np.empty((nf, N_COMP, nr, N_COMP, nc))
    for a in range(N_COMP):
        for b in range(N_COMP):
            wt = rows_tab * wmat[:, :, a, b, None]
            out[:, a, :, b, :] = np.matmul(wt.transpose(0, 2, 1), cols_tab)
    return out.reshape(nf, N_COMP * nr, N_COMP * nc)


@dataclass
class Coupling:
    """Off-diagonal blocks tying row elements to neighbouring column elements."""

    dof_rows: np.ndarray   # (nf, Kr) flattened row dofs
    dof_cols: np.ndarray   # (nf, Kc)
    blocks: np.ndarray     # (nf, Kr, Kc)


class FluxMatrixSystem:
    """Linearized operator stored as element blocks plus face couplings."""

    def __init__(self, space, diag, couplings):
        self.space = space
        self.n_dofs = space.n_dofs
        self.diag = diag           # degree -> (ne, K, K)
        self.couplings = couplings
        self._csr = None

    def transpose(self):
        diag_t = {p: d.transpose(0, 2, 1).copy() for p, d in self.diag.items()}
        coup_t = [Coupling(c.dof_cols, c.dof_rows,
                           c.blocks.transpose(0, 2, 1).copy())
                  for c in self.couplings]
        return FluxMatrixSystem(self.space, diag_t, coup_t)

    def shifted(self, sigma):
        """Copy with sigma times each block's scale added to its diagonal.

        Used as a Levenberg-style fallback when the exact linearization is
        singular (degenerate states such as uniform flow hugging a wall).
        """
        diag_s = {}
        for p, d in self.diag.items():
            k = d.shape[1]
            scale = np.linalg.norm(d, axis=(1, 2)) / np.sqrt(k)
            diag_s[p] = d + (sigma * scale)[:, None, None] * np.eye(k)
        return FluxMatrixSystem(self.space, diag_s, self.couplings)

    def tocsr(self):
        if self._csr is not None:
            return self._csr
        rows, cols, data = [], [], []
        for p in sorted(self.diag):
            cls = self.space.class_of[p]
            dflat = cls.dof.reshape(len(cls.elems), -1)
            k = dflat.shape[1]
            rows.append(np.repeat(dflat, k, axis=1).ravel())
            cols.append(np.tile(dflat, (1, k)).ravel())
            data.append(self.diag[p].ravel())
        for c in self.couplings:
            kr = c.dof_rows.shape[1]
            kc = c.dof_cols.shape[1]
            rows.append(np.repeat(c.dof_rows, kc, axis=1).ravel())
            cols.append(np.tile(c.dof_cols, (1, kr)).ravel())
            data.append(c.blocks.ravel())
        mat = sp.coo_matrix(
            (np.concatenate(data),
             (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_dofs, self.n_dofs))
        self._csr = mat.tocsr()
        return self._csr

    def matvec(self, x):
        return self.tocsr() @ x


def assemble_system(sol, cond, check=True):
    """Linearized operator at sol and the boundary data vector btilde.

    The returned pair satisfies residual = matrix @ coeffs - btilde exactly
    at the shared quadrature nodes.
    """
    space = sol.space
    gas = cond.gas
    diag = {}
    pos = space.elem_class_pos
    btilde = np.zeros(space.n_dofs)

    for cls, vals in zip(space.classes, volume_values(sol)):
        if check:
            _require_states(vals, cls.elems, gas)
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
                    out[:, a, :, b, :] -= np.matmul(wt.transpose(0, 2, 1), basis)
        diag[cls.degree] = out.reshape(ne, N_COMP * nm, N_COMP * nm)

    couplings = []
    for g in space.interior_groups:
        wl = trace_values(sol, g, 'l')
        wr = trace_values(sol, g, 'r')
        if check:
            _require_states(wl, g.elems_l, gas)
            _require_states(wr, g.elems_r, gas)
        mean = 0.5 * (wl + wr)
        es = euler.eigen_split(mean, g.normals[:, None, :], gas, check=False)
        wplus = g.w[:, :, None, None] * es.plus
        wminus = g.w[:, :, None, None] * es.minus
        trl = g.trace_l[:, :, :g.dof_l.shape[2]]
        trr = g.trace_r[:, :, :g.dof_r.shape[2]]
        np.add.at(diag[g.deg_l], pos[g.elems_l],
                  _bilinear_blocks(wplus, trl, trl))
        np.add.at(diag[g.deg_r], pos[g.elems_r],
                  -_bilinear_blocks(wminus, trr, trr))
        dl = g.dof_l.reshape(len(g.faces), -1)
        dr = g.dof_r.reshape(len(g.faces), -1)
        couplings.append(Coupling(dl, dr, _bilinear_blocks(wminus, trl, trr)))
        couplings.append(Coupling(dr, dl, -_bilinear_blocks(wplus, trr, trl)))

    for g in space.boundary_groups:
        tr = trace_values(sol, g)
        if check:
            _require_states(tr, g.elems, gas)
        n = g.normals[:, None, :]
        trc = g.trace[:, :, :g.dof.shape[2]]
        if g.tag == WALL:
            wmat = boundary.wall_lin_matrix(tr, n, gas, cond.wall_kind,
                                            check=False)
            tau = cond.wall_relax
            if tau < 1.0:
                w_inf = np.broadcast_to(cond.free_stream, tr.shape)
                aplus, rhs = boundary.io_lin_parts(tr, w_inf, n, gas,
                                                   check=False)
                wmat = tau * wmat + (1.0 - tau) * aplus
                np.add.at(btilde, g.dof,
                          (1.0 - tau) * np.einsum('fq,fqa,fqi->fai',
                                                  g.w, rhs, trc))
        else:
            w_inf = np.broadcast_to(cond.free_stream, tr.shape)
            aplus, rhs = boundary.io_lin_parts(tr, w_inf, n, gas, check=False)
            wmat = aplus
            np.add.at(btilde, g.dof,
                      np.einsum('fq,fqa,fqi->fai', g.w, rhs, trc))
        np.add.at(diag[g.degree], pos[g.elems],
                  _bilinear_blocks(g.w[:, :, None, None] * wmat, trc, trc))

    return FluxMatrixSystem(space, diag, couplings), btilde


TARGET_KINDS = ('drag', 'lift', 'moment')


@dataclass(frozen=True)
class TargetFunctional:
    """Wall-pressure force coefficient and its adjoint building blocks.

    The weight vector absorbs the dynamic-pressure normalization, so the
    integrals below evaluate directly to c_D, c_L or c_M.
    """

    kind: str
    conditions: FlowConditions
    x_ref: tuple = (0.25, 0.0)
    l_ref: float = 1.0

    def __post_init__(self):
        if self.kind not in TARGET_KINDS:
            raise ConfigError(f"target must be one of {TARGET_KINDS}")

    def _c_inf(self):
        w_inf = self.conditions.free_stream
        speed2 = np.sum(euler.velocity(w_inf) ** 2)
        return 0.5 * float(w_inf[0]) * speed2 * self.l_ref

    def theta(self, pts):
        """Force direction weight at wall points (m, 2)."""
        alpha = self.conditions.alpha
        c, s = np.cos(alpha), np.sin(alpha)
        cinf = self._c_inf()
        m = len(pts)
        if self.kind == 'drag':
            return np.broadcast_to(np.array([c, s]) / cinf, (m, 2)).copy()
        if self.kind == 'lift':
            return np.broadcast_to(np.array([-s, c]) / cinf, (m, 2)).copy()
        g = np.array([[0.0, 1.0], [-1.0, 0.0]])
        q = np.array([[c, -s], [s, c]])
        d = pts - np.asarray(self.x_ref)
        return (d @ g @ q) / (cinf * self.l_ref)

    def theta_tilde(self, pts):
        th = self.theta(pts)
        out = np.zeros((len(pts), N_COMP))
        out[:, 1:3] = th
        return out

    def _wall_groups(self, space):
        return [g for g in space.boundary_groups if g.tag == WALL]

    def pressure_integral(self, sol):
        """Plain wall-pressure form of the coefficient."""
        gas = self.conditions.gas
        total = 0.0
        for g in self._wall_groups(sol.space):
            tr = trace_values(sol, g)
            p = euler.pressure(tr, gas)
            th = self.theta(g.pts.reshape(-1, 2)).reshape(g.pts.shape)
            ndth = np.einsum('fs,fqs->fq', g.normals, th)
            total += float(np.sum(g.w * p * ndth))
        return total

    def flux_integral(self, sol):
        """Coefficient evaluated through the wall numerical flux."""
        cond = self.conditions
        total = 0.0
        for g in self._wall_groups(sol.space):
            tr = trace_values(sol, g)
            h = boundary.wall_flux(tr, g.normals[:, None, :], cond.gas,
                                   cond.wall_kind)
            tth = self.theta_tilde(g.pts.reshape(-1, 2)).reshape(h.shape)
            total += float(np.sum(g.w * np.einsum('fqa,fqa->fq', h, tth)))
        return total

    def gradient(self, sol):
        """Adjoint source: linearized flux form with frozen wall matrices."""
        cond = self.conditions
        out = np.zeros(sol.space.n_dofs)
        for g in self._wall_groups(sol.space):
            tr = trace_values(sol, g)
            wmat = boundary.wall_lin_matrix(tr, g.normals[:, None, :],
                                            cond.gas, cond.wall_kind)
            tth = self.theta_tilde(g.pts.reshape(-1, 2)).reshape(tr.shape)
            act = np.einsum('fqba,fqb->fqa', wmat, tth)
            np.add.at(out, g.dof,
                      np.einsum('fq,fqa,fqi->fai', g.w, act,
                                g.trace[:, :, :g.dof.shape[2]]))
        return out

    def gradient_inconsistent(self, sol):
        """Adjoint source from differentiating the pressure form directly."""
        cond = self.conditions
        out = np.zeros(sol.space.n_dofs)
        for g in self._wall_groups(sol.space):
            tr = trace_values(sol, g)
            th = self.theta(g.pts.reshape(-1, 2)).reshape(g.pts.shape)
            ndth = np.einsum('fs,fqs->fq', g.normals, th)
            act = euler.pressure_gradient(tr, cond.gas) * ndth[:, :, None]
            np.add.at(out, g.dof,
                      np.einsum('fq,fqa,fqi->fai', g.w, act,
                                g.trace[:, :, :g.dof.shape[2]]))
        return out
