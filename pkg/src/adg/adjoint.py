"""Discrete adjoint solves and adjoint-consistency diagnostics.

The adjoint problem is the transpose of the linearized flux system sourced
by the target-coefficient gradient.  Solving it with the flux-form gradient
(the wall numerical flux differentiated with frozen matrices) gives smooth
dual fields; the plain pressure-form gradient is kept behind a flag as the
control experiment whose dual fields oscillate at the wall.
"""

from dataclasses import dataclass

import numpy as np

from .errors import LinearSolveFailure
from .forms import TargetFunctional, assemble_system
from .mesh import WALL
from .solver import BlockILU0, SolverConfig, krylov_solve
from .space import DGSolution, prolong, trace_values


@dataclass(frozen=True)
class AdjointSolution:
    """Dual state z on the primal space with its solve diagnostics."""

    z: DGSolution
    target: TargetFunctional
    rel_residual: float
    inconsistent: bool = False


class _TransposePrecond:
    def __init__(self, ilu):
        self._ilu = ilu

    def apply(self, v):
        return self._ilu.apply_t(v)


def _gradient(primal, target, inconsistent):
    if inconsistent:
        return target.gradient_inconsistent(primal)
    return target.gradient(primal)


def solve_adjoint(primal, target, config=None, inconsistent=False):
    """Solve the transposed linearized system for the dual coefficients."""
    config = config or SolverConfig()
    g = _gradient(primal, target, inconsistent)
    space = primal.space
    if not np.any(g):
        return AdjointSolution(DGSolution(space, np.zeros(space.n_dofs)),
                               target, 0.0, inconsistent)
    system, _ = assemble_system(primal, target.conditions)
    tsys = system.transpose()
    precond = _TransposePrecond(BlockILU0(system))
    x, _ = krylov_solve(tsys, g, precond, rtol=1e-11,
                        restart=config.krylov_restart,
                        maxiter=config.krylov_maxiter)
    rel = np.linalg.norm(tsys.matvec(x) - g) / np.linalg.norm(g)
    if not rel <= 1e-10:
        raise LinearSolveFailure(f"adjoint residual {rel:.3e} above 1e-10")
    return AdjointSolution(DGSolution(space, x), target, float(rel),
                           inconsistent)


class AdjointResidualForm:
    """Evaluator of J-linearized minus flux-linearized action for many tests.

    Built once per (primal, adjoint, test-space) triple: the state and dual
    are embedded into the test space (exact for the hierarchical basis) and
    the linearized operator is assembled there, so each evaluation is two
    dot products.
    """

    def __init__(self, primal, adjoint, space_v=None):
        space_v = primal.space if space_v is None else space_v
        target = adjoint.target
        w = prolong(primal, space_v)
        z = prolong(adjoint.z, space_v)
        system, _ = assemble_system(w, target.conditions)
        self.space = space_v
        self._g = _gradient(w, target, adjoint.inconsistent)
        self._z = z.coeffs
        self._system = system

    def __call__(self, test):
        if test.space is not self.space:
            raise ValueError("test lives on a different space")
        return float(self._g @ test.coeffs
                     - self._z @ self._system.matvec(test.coeffs))


def adjoint_residual(primal, adjoint, test):
    """Dual residual of a test state, zero on the solve space."""
    return AdjointResidualForm(primal, adjoint, test.space)(test)


def adjoint_wall_bc_check(adjoint, target):
    """Wall defect norm of the dual momentum trace against the force weight.

    The exact dual satisfies n1*z2 + n2*z3 = n . theta on the wall, so the
    L2 norm of the mismatch there measures how far the discrete dual is
    from the consistent boundary behaviour.
    """
    z = adjoint.z
    total = 0.0
    for g in z.space.boundary_groups:
        if g.tag != WALL:
            continue
        tr = trace_values(z, g)
        th = target.theta(g.pts.reshape(-1, 2)).reshape(g.pts.shape)
        ndth = np.einsum('fs,fqs->fq', g.normals, th)
        defect = (g.normals[:, None, 0] * tr[:, :, 1]
                  + g.normals[:, None, 1] * tr[:, :, 2] - ndth)
        total += float(np.sum(g.w * defect ** 2))
    return np.sqrt(total)


def wall_adjacent_jumps(sol):
    """L2 jump norms of a state on faces touching a wall-adjacent element."""
    space = sol.space
    wall_elems = set()
    for g in space.boundary_groups:
        if g.tag == WALL:
            wall_elems.update(int(e) for e in g.elems)
    norms = []
    for g in space.interior_groups:
        jump = trace_values(sol, g, 'l') - trace_values(sol, g, 'r')
        jump2 = np.sum(g.w * np.sum(jump ** 2, axis=2), axis=1)
        for k in range(len(g.faces)):
            if int(g.elems_l[k]) in wall_elems or int(g.elems_r[k]) in wall_elems:
                norms.append(np.sqrt(jump2[k]))
    return np.asarray(norms)
