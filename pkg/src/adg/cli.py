"""Command line entry: <binary> <mode> --config <file>."""

import os

# Thread workers for the numerical backends; must be set before the first
# numpy import in this process to take effect everywhere.
_threads = os.environ.get('ADG_THREADS')
if _threads:
    for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS',
                 'MKL_NUM_THREADS', 'NUMEXPR_NUM_THREADS'):
        os.environ.setdefault(_var, _threads)

import argparse
import math
import sys

import numpy as np

from . import euler
from .adapt import AdaptConfig, adapt_loop
from .adjoint import solve_adjoint
from .boundary import vijayasundaram
from .config import MODES, parse_config
from .errors import AdgError, MaxLevelsReached, VerificationFailure
from .estimator import estimate, reconstruct
from .forms import FlowConditions, TargetFunctional, assemble_residual, \
    assemble_system
from .geometry import AirfoilInCircle
from .mesh import load_mesh
from .mesh import write_msh as save_msh
from .reporting import (convergence_figure, convergence_row, level_dir,
                        mesh_figure, residual_figure, solution_fields,
                        write_convergence, write_vtk)
from .solver import SolverConfig, solve_steady
from .space import Space


def _conditions(config):
    return FlowConditions(euler.GasParams(config.gamma), config.mach_inf,
                          math.radians(config.alpha_deg),
                          wall_kind=config.wall_kind)


def _solver_config(config):
    return SolverConfig(max_iters=config.solver_max_iters,
                        residual_tol=config.solver_tol)


def _geometry(config, mesh):
    if config.geometry == 'naca':
        from .mesh import FARFIELD
        far = np.array([v for (a, b, _t), tag
                        in zip(mesh.boundary_faces, mesh.boundary_tags)
                        if tag == FARFIELD
                        for v in (mesh.vertices[a], mesh.vertices[b])])
        radius = float(np.hypot(far[:, 0], far[:, 1]).max()) if len(far) \
            else 100.0
        return AirfoilInCircle(config.thickness, radius)
    return None


def _target(config, cond):
    return TargetFunctional(config.target, cond,
                            x_ref=(config.x_ref, config.y_ref),
                            l_ref=config.l_ref)


def _j_ref(config):
    return None if math.isnan(config.j_ref) else config.j_ref


def _emit_level(config, lvl):
    out = level_dir(config.output, lvl.level)
    cond = lvl.adjoint.target.conditions if lvl.adjoint else None
    gas = cond.gas if cond else euler.GasParams(config.gamma)
    fields = solution_fields(lvl.solution, gas, adjoint=lvl.adjoint,
                             report=lvl.report)
    write_vtk(os.path.join(out, 'solution.vtk'), lvl.mesh, fields)
    save_msh(lvl.mesh, os.path.join(out, 'mesh.msh'))


def _finish(config, rows, dofs, eta_i, eta_ii, j_vals, final_mesh):
    write_convergence(os.path.join(config.output, 'convergence.csv'), rows)
    mesh_figure(os.path.join(config.output, 'mesh.png'), final_mesh,
                title=f'final mesh ({final_mesh.n_elements} elements)')
    ref = _j_ref(config)
    j_err = None if ref is None else np.asarray(j_vals) - ref
    convergence_figure(os.path.join(config.output, 'convergence.png'),
                       dofs, eta_i, eta_ii, j_err)


def _run_single(config, with_adjoint, with_estimate):
    cond = _conditions(config)
    mesh = load_mesh(config.mesh_path)
    mesh = mesh.with_degrees(np.full(mesh.n_elements, config.p_init,
                                     dtype=np.int64))
    space = Space(mesh)
    solution, history = solve_steady(space, cond, _solver_config(config))
    target = _target(config, cond)
    adjoint = None
    report = None
    if with_adjoint:
        adjoint = solve_adjoint(solution, target, _solver_config(config),
                                inconsistent=config.inconsistent_adjoint)
    if with_estimate:
        recon = reconstruct(solution, adjoint)
        report = estimate(solution, adjoint, recon, j_ref=_j_ref(config))

    out = level_dir(config.output, 0)
    fields = solution_fields(solution, cond.gas, adjoint=adjoint,
                             report=report)
    write_vtk(os.path.join(out, 'solution.vtk'), mesh, fields)
    save_msh(mesh, os.path.join(out, 'mesh.msh'))
    residual_figure(os.path.join(config.output, 'residuals.png'), history)

    j_value = target.pressure_integral(solution)
    if report is not None:
        rows = [convergence_row(0, space.n_dofs, report)]
        dofs, eta_i, eta_ii = [space.n_dofs], [report.eta_I], [report.eta_II]
        j_vals = [report.j_value]
    else:
        jtilde = target.flux_integral(solution)
        nan = float('nan')
        rows = [','.join(['0', str(space.n_dofs), f'{j_value:.17g}',
                          f'{jtilde:.17g}', f'{nan:.17g}', f'{nan:.17g}',
                          f'{nan:.17g}'])]
        dofs, eta_i, eta_ii, j_vals = [space.n_dofs], [np.nan], [np.nan], \
            [j_value]
    _finish(config, rows, dofs, eta_i, eta_ii, j_vals, mesh)
    print(f'J = {j_value:.12e}')
    return 0


def _run_adapt(config):
    cond = _conditions(config)
    mesh = load_mesh(config.mesh_path)
    mesh = mesh.with_degrees(np.full(mesh.n_elements, config.p_init,
                                     dtype=np.int64))
    adapt_config = AdaptConfig(
        tol=config.tol, max_levels=config.max_levels, p_max=config.p_max,
        refine_fraction=config.refine_fraction,
        equi_exponent=config.equi_exponent, sigma_max=config.sigma_max,
        mode=config.adapt_mode, max_dof=config.max_dof)

    rows, dofs, eta_i, eta_ii, j_vals = [], [], [], [], []
    last_mesh = [mesh]

    def emit(lvl):
        _emit_level(config, lvl)
        rows.append(convergence_row(lvl.level, lvl.dof, lvl.report))
        dofs.append(lvl.dof)
        eta_i.append(lvl.report.eta_I)
        eta_ii.append(lvl.report.eta_II)
        j_vals.append(lvl.report.j_value)
        last_mesh[0] = lvl.mesh
        print(f'level {lvl.level}: dof {lvl.dof} '
              f'J {lvl.report.j_value:.8e} eta_I {lvl.report.eta_I:.3e}')

    code = 0
    try:
        adapt_loop(mesh, cond, config.target, adapt_config,
                   solver_config=_solver_config(config),
                   geometry=_geometry(config, mesh), j_ref=_j_ref(config),
                   callback=emit, x_ref=(config.x_ref, config.y_ref),
                   l_ref=config.l_ref)
    except MaxLevelsReached as err:
        print(f'warning: {err}', file=sys.stderr)
        code = err.exit_code
    _finish(config, rows, dofs, eta_i, eta_ii, j_vals, last_mesh[0])
    return code


def _verify_battery(config):
    """Identity checks on random states and the configured fixture."""
    cond = _conditions(config)
    gas = cond.gas
    rng = np.random.default_rng(1234)
    results = []

    rho = rng.uniform(0.2, 3.0, size=400)
    vel = rng.uniform(-2.0, 2.0, size=(400, 2))
    p = rng.uniform(0.2, 3.0, size=400)
    energy = p / (gas.gamma - 1.0) + 0.5 * rho * np.sum(vel ** 2, axis=1)
    w = np.stack([rho, rho * vel[:, 0], rho * vel[:, 1], energy], axis=1)
    n = rng.normal(size=(400, 2))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    flux_err = 0.0
    es = euler.eigen_split(w, n, gas)
    amat = euler.directional_jacobian(w, n, gas)
    flux_err = max(flux_err, float(np.abs(es.plus + es.minus - amat).max()
                                   / np.abs(amat).max()))
    hom = np.einsum('qab,qb->qa', amat, w) - euler.directional_flux(w, n, gas)
    flux_err = max(flux_err, float(np.abs(hom).max()
                                   / np.abs(euler.directional_flux(
                                       w, n, gas)).max()))
    vs_cons = vijayasundaram(w, w, n, gas) - euler.directional_flux(w, n, gas)
    flux_err = max(flux_err, float(np.abs(vs_cons).max()))
    results.append(('flux-algebra', flux_err, 1e-11))

    mesh = load_mesh(config.mesh_path)
    mesh = mesh.with_degrees(np.full(mesh.n_elements, config.p_init,
                                     dtype=np.int64))
    space = Space(mesh)
    solution, _ = solve_steady(space, cond, _solver_config(config))
    res = assemble_residual(solution, cond)
    system, btilde = assemble_system(solution, cond)
    cons = system.matvec(solution.coeffs) - btilde - res
    scale = max(float(np.abs(res).max()), float(np.abs(btilde).max()), 1e-30)
    results.append(('consistency-relation', float(np.abs(cons).max()) / scale,
                    1e-11))

    target = _target(config, cond)
    adjoint = solve_adjoint(solution, target, _solver_config(config))
    u = rng.normal(size=space.n_dofs)
    mu = system.matvec(u)
    g = target.gradient(solution)
    lhs = float(mu @ adjoint.z.coeffs)
    rhs = float(g @ u)
    dual_err = abs(lhs - rhs) / (np.linalg.norm(mu)
                                 * np.linalg.norm(adjoint.z.coeffs)
                                 + abs(rhs) + 1e-30)
    results.append(('transpose-duality', dual_err, 1e-9))

    width = max(len(name) for name, _, _ in results)
    failed = []
    for name, err, tol in results:
        ok = err <= tol
        status = 'PASS' if ok else 'FAIL'
        print(f'{name:<{width}}  {status}  error {err:.3e}  tol {tol:.0e}')
        if not ok:
            failed.append(name)
    if failed:
        raise VerificationFailure(f"checks failed: {', '.join(failed)}")
    print('all checks passed')
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog='adg',
        description='goal-oriented hp-adaptive DG solver for 2D Euler flow')
    parser.add_argument('mode', choices=MODES)
    parser.add_argument('--config', required=True)
    args = parser.parse_args(argv)

    try:
        config = parse_config(args.config, mode=args.mode)
        os.makedirs(config.output, exist_ok=True)
        if args.mode == 'solve':
            return _run_single(config, with_adjoint=False,
                               with_estimate=False)
        if args.mode == 'adjoint':
            return _run_single(config, with_adjoint=True,
                               with_estimate=False)
        if args.mode == 'estimate':
            return _run_single(config, with_adjoint=True, with_estimate=True)
        if args.mode == 'adapt':
            return _run_adapt(config)
        return _verify_battery(config)
    except AdgError as err:
        print(f'error: {err}', file=sys.stderr)
        return err.exit_code


if __name__ == '__main__':
    sys.exit(main())
