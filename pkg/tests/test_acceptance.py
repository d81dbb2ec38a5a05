"""End-to-end acceptance battery, one printed pass/fail line per criterion.

Cheap algebra checks run first; the adaptive drag and lift studies sit in
module fixtures so the expensive runs happen once and are shared.  Every
line reports the measured quantity and the elapsed time against the
criterion's own runtime budget.
"""

import time

import numpy as np
import pytest

from adg import boundary, euler
from adg.adapt import AdaptConfig, adapt_loop
from adg.adjoint import (AdjointResidualForm, adjoint_wall_bc_check,
                         solve_adjoint, wall_adjacent_jumps)
from adg.errors import MaxLevelsReached
from adg.estimator import (dual_residual_fields, enriched_space,
                           primal_residual_fields, weak_residual_sum)
from adg.forms import (FlowConditions, TargetFunctional, assemble_residual,
                       assemble_system)
from adg.geometry import AirfoilInCircle
from adg.mesh import refine_uniform, square_mesh
from adg.meshgen import naca_omesh
from adg.solver import SolverConfig, solve_steady
from adg.space import DGSolution, Space, constant_solution, project, prolong
from adg.transfer import transfer_solution

GAS = euler.GasParams()


def verdict(capsys, num, label, ok, detail):
    line = f"criterion {num:>2} {label}: {'PASS' if ok else 'FAIL'} [{detail}]"
    with capsys.disabled():
        print(line)
    assert ok, line


def random_states(rng, n):
    rho = rng.uniform(0.1, 10.0, n)
    p = rng.uniform(0.1, 10.0, n)
    speed = rng.uniform(0.0, 3.0, n)
    angle = rng.uniform(0.0, 2.0 * np.pi, n)
    v = speed[:, None] * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    w = np.empty((n, 4))
    w[:, 0] = rho
    w[:, 1:3] = rho[:, None] * v
    w[:, 3] = p / (GAS.gamma - 1.0) + 0.5 * rho * speed**2
    return w


def random_normals(rng, n):
    angle = rng.uniform(0.0, 2.0 * np.pi, n)
    return np.stack([np.cos(angle), np.sin(angle)], axis=1)


def tangential_states(rng, n):
    nrm = random_normals(rng, n)
    tang = np.stack([-nrm[:, 1], nrm[:, 0]], axis=1)
    rho = rng.uniform(0.1, 10.0, n)
    p = rng.uniform(0.1, 10.0, n)
    speed = rng.uniform(0.0, 3.0, n)
    w = np.empty((n, 4))
    w[:, 0] = rho
    w[:, 1:3] = rho[:, None] * speed[:, None] * tang
    w[:, 3] = p / (GAS.gamma - 1.0) + 0.5 * rho * speed**2
    return w, nrm


def random_perturbation(cond, rng, amp=0.06):
    """Smooth random bump around free stream, small enough to stay admissible."""
    w_inf = cond.free_stream
    a = rng.uniform(0.3, 1.0, 4) * amp
    k = rng.uniform(0.3, 1.4, (4, 2))
    ph = rng.uniform(0.0, 2.0 * np.pi, 4)

    def fn(pts):
        x, y = pts[:, 0], pts[:, 1]
        out = np.tile(w_inf, (len(pts), 1))
        for c in range(4):
            scale = 4.0 if c == 3 else 1.0
            out[:, c] += scale * a[c] * np.sin(k[c, 0] * x + k[c, 1] * y + ph[c])
        return out

    return fn


def mixed_airfoil_space(wall_kind=1):
    mesh = naca_omesh(24, 6, 10.0, 0.05)
    degrees = 1 + (np.arange(mesh.n_elements) % 2)
    return Space(mesh.with_degrees(degrees))


def rel_err(got, want):
    scale = max(1.0, float(np.abs(want).max()))
    return float(np.abs(got - want).max()) / scale


# -- criterion 1 -----------------------------------------------------------

def test_01_flux_algebra(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    n = 1200
    w = random_states(rng, n)
    nrm = random_normals(rng, n)
    worst = 0.0

    # directed flux is the Jacobian acting on the state
    A = euler.directional_jacobian(w, nrm, GAS)
    worst = max(worst, rel_err(np.einsum('nab,nb->na', A, w),
                               euler.directional_flux(w, nrm, GAS)))

    # characteristic split reassembles the Jacobian and the projectors close
    es = euler.eigen_split(w, nrm, GAS)
    worst = max(worst, rel_err(es.plus + es.minus, A))
    worst = max(worst, rel_err(es.proj_plus + es.proj_minus,
                               np.broadcast_to(np.eye(4), A.shape)))

    # wall numerical flux is linear in the state for both treatments
    for kind in boundary.WALL_KINDS:
        H = boundary.wall_lin_matrix(w, nrm, GAS, kind)
        worst = max(worst, rel_err(np.einsum('nab,nb->na', H, w),
                                   boundary.wall_flux(w, nrm, GAS, kind)))

    # rank-one wall Jacobian: action on the state gives p*n_tilde, the
    # transpose action gives the pressure gradient times the normal part
    PW = euler.wall_jacobian(w, nrm, GAS)
    p = euler.pressure(w, GAS)
    expect = np.zeros((n, 4))
    expect[:, 1] = p * nrm[:, 0]
    expect[:, 2] = p * nrm[:, 1]
    worst = max(worst, rel_err(np.einsum('nab,nb->na', PW, w), expect))
    phi = rng.standard_normal((n, 4))
    ndot = nrm[:, 0] * phi[:, 1] + nrm[:, 1] * phi[:, 2]
    worst = max(worst, rel_err(np.einsum('nba,nb->na', PW, phi),
                               euler.pressure_gradient(w, GAS) * ndot[:, None]))

    # on tangential states the full directed flux collapses to the wall one
    wt, nt = tangential_states(rng, n)
    full = np.einsum('nab,nb->na',
                     euler.directional_jacobian(wt, nt, GAS), wt)
    wall = np.einsum('nab,nb->na', euler.wall_jacobian(wt, nt, GAS), wt)
    worst = max(worst, rel_err(full, wall))
    theta = rng.standard_normal((n, 2))
    lhs = full[:, 1] * theta[:, 0] + full[:, 2] * theta[:, 1]
    rhs = euler.pressure(wt, GAS) * (nt[:, 0] * theta[:, 0]
                                     + nt[:, 1] * theta[:, 1])
    worst = max(worst, rel_err(lhs, rhs))

    # the flux-form force functional obeys the same Euler identity
    for kind in boundary.WALL_KINDS:
        cond = FlowConditions(GAS, 0.5, 0.02, kind)
        space = mixed_airfoil_space()
        sol = project(space, random_perturbation(cond, rng))
        target = TargetFunctional('drag', cond)
        jt = target.flux_integral(sol)
        worst = max(worst, abs(float(target.gradient(sol) @ sol.coeffs) - jt)
                    / max(1.0, abs(jt)))

    dt = time.perf_counter() - t0
    verdict(capsys, 1, 'flux algebra', worst <= 1e-11 and dt < 5.0,
            f'worst rel {worst:.2e}, {n} states, {dt:.1f}s')


# -- criterion 2 -----------------------------------------------------------

def test_02_linearization_consistency(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    worst = 0.0
    for kind, relax in ((1, 1.0), (2, 1.0), (1, 0.7)):
        cond = FlowConditions(GAS, 0.5, 0.02, kind, wall_relax=relax)
        space = mixed_airfoil_space(kind)
        for _ in range(2):
            sol = project(space, random_perturbation(cond, rng))
            r = assemble_residual(sol, cond)
            system, btilde = assemble_system(sol, cond)
            err = system.matvec(sol.coeffs) - btilde - r
            scale = max(np.abs(r).max(), np.abs(btilde).max(), 1e-30)
            worst = max(worst, float(np.abs(err).max() / scale))
    dt = time.perf_counter() - t0
    verdict(capsys, 2, 'linearization consistency',
            worst <= 1e-11 and dt < 30.0,
            f'worst rel {worst:.2e}, {dt:.1f}s')


# -- criterion 3 -----------------------------------------------------------

def test_03_free_stream_preservation(capsys):
    t0 = time.perf_counter()
    cond = FlowConditions(GAS, 0.5, 0.02)
    worst = 0.0
    iters = 0
    for mesh in (square_mesh(3),
                 square_mesh(5, skew=0.3),
                 square_mesh(4, skew=0.15)):
        degrees = 1 + (np.arange(mesh.n_elements) % 3)
        space = Space(mesh.with_degrees(degrees))
        sol = constant_solution(space, cond.free_stream)
        worst = max(worst, float(np.abs(assemble_residual(sol, cond)).max()))
        _, history = solve_steady(space, cond, initial=sol)
        iters = max(iters, history.iterations)
        assert history.converged
    dt = time.perf_counter() - t0
    verdict(capsys, 3, 'free-stream preservation',
            worst <= 1e-12 and iters == 0,
            f'residual inf-norm {worst:.2e}, iterations {iters}, {dt:.1f}s')


# -- criterion 4 -----------------------------------------------------------

def test_04_adjoint_duality(capsys):
    t0 = time.perf_counter()
    cond = FlowConditions(GAS, 0.5, 0.0)
    space = Space(naca_omesh(16, 4, 10.0, 0.08))
    sol, history = solve_steady(space, cond)
    assert history.converged
    target = TargetFunctional('drag', cond)
    adj = solve_adjoint(sol, target)
    system, _ = assemble_system(sol, cond)
    g = target.gradient(sol)
    z = adj.z.coeffs
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(100):
        u = rng.standard_normal(space.n_dofs)
        mu = system.matvec(u)
        gap = abs(float(mu @ z) - float(g @ u))
        bound = np.linalg.norm(mu) * np.linalg.norm(z) + abs(float(g @ u))
        worst = max(worst, gap / bound)
    dt = time.perf_counter() - t0
    verdict(capsys, 4, 'adjoint duality', worst <= 1e-9 and dt < 10.0,
            f'worst scaled gap {worst:.2e}, 100 vectors, {dt:.1f}s')


# -- criterion 5 -----------------------------------------------------------

def test_05_adjoint_consistency_wall(capsys):
    t0 = time.perf_counter()
    solver = SolverConfig()
    defect_runs = {}
    finest = None
    for kind in (1, 2):
        cond = FlowConditions(GAS, 0.5, 0.0, kind)
        target = TargetFunctional('drag', cond)
        geometry = AirfoilInCircle(0.12, 10.0)
        mesh = naca_omesh(12, 3, 10.0, 0.1, degree=2)
        defects = []
        sol = adj = None
        for _ in range(4):
            space = Space(mesh)
            initial = None if sol is None else transfer_solution(
                sol, space, cond)
            sol, history = solve_steady(space, cond, solver, initial=initial)
            assert history.converged
            adj = solve_adjoint(sol, target)
            defects.append(adjoint_wall_bc_check(adj, target))
            mesh = refine_uniform(mesh, geometry)
        defect_runs[kind] = defects
        if kind == 2:
            finest = (sol, adj, target)

    monotone = all(a > b for run in defect_runs.values()
                   for a, b in zip(run, run[1:]))

    # forcing the pressure-only force linearization onto the mirror-flux
    # wall leaves the dual boundary data mismatched: the dual jumps next to
    # the wall stagnate at O(1) instead of converging with the mesh
    sol, cons, target = finest
    inc = solve_adjoint(sol, target, inconsistent=True)
    jump_cons = float(np.linalg.norm(wall_adjacent_jumps(cons.z)))
    jump_inc = float(np.linalg.norm(wall_adjacent_jumps(inc.z)))
    ratio = jump_inc / jump_cons

    dt = time.perf_counter() - t0
    runs = '; '.join(
        f'kind {k}: ' + ' > '.join(f'{d:.3e}' for d in v)
        for k, v in defect_runs.items())
    verdict(capsys, 5, 'adjoint consistency at the wall',
            monotone and ratio >= 5.0 and dt < 600.0,
            f'{runs}; jump ratio {ratio:.1f}x, {dt:.0f}s')


# -- criteria 6 and 7 share one h-adaptive drag study ----------------------

@pytest.fixture(scope='module')
def drag_study():
    t0 = time.perf_counter()
    cond = FlowConditions(GAS, 0.5, 0.0, 1)
    mesh = naca_omesh(50, 30, 100.0, 0.012, degree=2)
    config = AdaptConfig(tol=1e-5, max_levels=5, mode='h', p_max=2)
    try:
        result = adapt_loop(mesh, cond, 'drag', config,
                            geometry=AirfoilInCircle(0.12, 100.0), j_ref=0.0)
    except MaxLevelsReached as err:
        result = err.result
    return result, time.perf_counter() - t0


def test_06_symmetric_drag(capsys, drag_study):
    result, dt = drag_study
    rows = [(lv.level, lv.dof, lv.report.j_value) for lv in result.levels]
    hit = [r for r in rows if abs(r[2]) <= 5e-4 and r[1] <= 50000]
    trace = ' | '.join(f'L{lv} {dof}dof cD={j:+.2e}' for lv, dof, j in rows)
    verdict(capsys, 6, 'symmetric drag to 5e-4 under 50k dof',
            bool(hit) and dt < 1200.0, f'{trace}; {dt:.0f}s')


def test_07_estimator_ordering(capsys, drag_study):
    result, _ = drag_study
    ordered = all(abs(lv.report.eta_I) <= lv.report.eta_II * (1.0 + 1e-12)
                  for lv in result.levels)
    effs = [lv.report.effectivity for lv in result.levels]
    in_band = all(0.1 <= e <= 10.0 for e in effs)
    detail = ', '.join(f'{e:.2f}' for e in effs)
    verdict(capsys, 7, 'estimator ordering and effectivity',
            ordered and in_band, f'|eta_I|<=eta_II all levels; eff {detail}')


# -- criterion 8 -----------------------------------------------------------

@pytest.fixture(scope='module')
def hp_versus_h():
    t0 = time.perf_counter()
    cond = FlowConditions(GAS, 0.5, 0.0, 1)
    geometry = AirfoilInCircle(0.12, 100.0)
    runs = {}
    for mode, p_max in (('h', 2), ('hp', 4)):
        mesh = naca_omesh(28, 10, 100.0, 0.03, degree=2)
        config = AdaptConfig(tol=2e-5, max_levels=6, mode=mode, p_max=p_max)
        try:
            result = adapt_loop(mesh, cond, 'drag', config,
                                geometry=geometry, j_ref=0.0)
        except MaxLevelsReached as err:
            result = err.result
        runs[mode] = result
    return runs, time.perf_counter() - t0


def test_08_hp_superiority(capsys, hp_versus_h):
    runs, dt = hp_versus_h
    start_j = runs['h'].levels[0].report.j_value
    best = {}
    for mode, result in runs.items():
        dofs = [lv.dof for lv in result.levels
                if abs(lv.report.j_value) <= 1e-3]
        best[mode] = min(dofs) if dofs else None
    ok = (abs(start_j) > 1e-3 and best['hp'] is not None
          and best['h'] is not None and best['hp'] < best['h']
          and dt < 1800.0)
    verdict(capsys, 8, 'hp reaches 1e-3 drag with fewer dof',
            ok, f"start cD {start_j:+.2e}; h {best['h']} dof, "
                f"hp {best['hp']} dof, {dt:.0f}s")


# -- criterion 9 -----------------------------------------------------------

def test_09_residual_form_identities(capsys):
    t0 = time.perf_counter()
    cond = FlowConditions(GAS, 0.5, 0.02)
    space = Space(naca_omesh(24, 6, 10.0, 0.05, degree=2))
    rng = np.random.default_rng(909)
    # constant density per element keeps the flux polynomial, so the
    # divergence-theorem regrouping behind the field identity is exact
    sol = constant_solution(space, cond.free_stream)
    coeffs = sol.coeffs.copy()
    for cls in space.classes:
        amp = np.abs(coeffs[cls.dof[:, 0, 0]])
        pert = rng.standard_normal(cls.dof.shape)
        pert[:, 0, 1:] = 0.0
        coeffs[cls.dof] += 0.03 * amp[:, None, None] * pert
    sol = DGSolution(space, coeffs)
    target = TargetFunctional('drag', cond)
    adj = solve_adjoint(sol, target)
    rich = enriched_space(space)
    pf = primal_residual_fields(sol, cond, space=rich)
    df = dual_residual_fields(sol, adj, space=rich)
    b = assemble_residual(prolong(sol, rich), cond)
    form = AdjointResidualForm(sol, adj, rich)
    worst = 0.0
    for _ in range(100):
        v = rng.standard_normal(rich.n_dofs)
        v = DGSolution(rich, v / np.linalg.norm(v))
        lhs = weak_residual_sum(pf, v)
        rhs = -float(b @ v.coeffs)
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
        lhs = weak_residual_sum(df, v)
        rhs = form(v)
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(rhs)))
    dt = time.perf_counter() - t0
    verdict(capsys, 9, 'residual-form identities',
            worst <= 1e-10 and dt < 60.0,
            f'worst rel {worst:.2e}, 100 test functions, {dt:.1f}s')


# -- criterion 10 ----------------------------------------------------------

@pytest.fixture(scope='module')
def lift_study():
    t0 = time.perf_counter()
    cond = FlowConditions(GAS, 0.5, float(np.deg2rad(1.25)), 1)
    mesh = naca_omesh(50, 30, 100.0, 0.012, degree=2)
    config = AdaptConfig(tol=1e-7, max_levels=8, mode='hp', p_max=4,
                         max_dof=80000)
    try:
        result = adapt_loop(mesh, cond, 'lift', config,
                            geometry=AirfoilInCircle(0.12, 100.0))
    except MaxLevelsReached as err:
        result = err.result
    return result, cond, time.perf_counter() - t0


def test_10_lifted_case(capsys, lift_study):
    result, cond, dt = lift_study
    final = result.final
    c_l = final.report.j_value
    c_d = TargetFunctional('drag', cond).pressure_integral(final.solution)
    ok = abs(c_l - 1.757e-1) <= 5e-3 and dt < 2700.0
    verdict(capsys, 10, 'lifted subsonic benchmark', ok,
            f'cL {c_l:+.5e} vs 1.757e-1, {final.dof} dof; '
            f'cD {c_d:+.2e} (reported, not asserted); {dt:.0f}s')
