"""Size proposal, shape/degree optimization, and the adaptation loop."""

import math

import numpy as np
import pytest

from adg import euler
from adg.adapt import (AdaptConfig, AnisoTarget, adapt_loop, dofs_per_element,
                       optimize_shape_and_degree, propose_sizes)
from adg.errors import MaxLevelsReached
from adg.estimator import ErrorReport, ReconstructedPair
from adg.forms import FlowConditions
from adg.mesh import element_descriptors, square_mesh
from adg.meshgen import naca_omesh
from adg.geometry import AirfoilInCircle
from adg.space import Space, project


def fake_report(nel, eta_ik=None):
    """Report with uniform unit residual weights for optimizer tests."""
    eta = np.zeros(nel) if eta_ik is None else np.asarray(eta_ik, dtype=float)
    ones = np.ones((nel, 4))
    return ErrorReport(eta_I=float(eta.sum()), eta_II=float(np.abs(eta).sum()),
                       eta_IK=eta, eta_IIK=np.abs(eta),
                       res_vol_norms=ones, res_face_norms=ones,
                       dual_res_vol_norms=ones, dual_res_face_norms=ones,
                       j_value=0.0, jtilde_value=0.0, effectivity=float('nan'),
                       fallback_elems=np.array([], dtype=np.int64))


def synthetic_pair(mesh_p, fn):
    """Reconstruction-shaped pair from projecting fn onto degree p + 1."""
    rich = Space(mesh_p.with_degrees(mesh_p.degrees + 1))
    sol = project(rich, fn)
    nel = mesh_p.n_elements
    return ReconstructedPair(sol, sol.copy(), np.zeros(nel, dtype=np.int64),
                             np.array([], dtype=np.int64))


def four_components(g):
    def fn(pts):
        v = g(pts)
        return np.stack([1.0 + 0.1 * v, 0.2 * v, -0.1 * v, 2.0 + 0.3 * v],
                        axis=1)
    return fn


# -- size proposal ---------------------------------------------------------


def test_equidistributed_errors_are_a_fixed_point():
    mesh = square_mesh(4).with_degrees(np.full(32, 2, dtype=np.int64))
    tol = 1e-4
    report = fake_report(32, np.full(32, tol / 32))
    nu = propose_sizes(report, mesh, AdaptConfig(tol=tol))
    assert np.allclose(nu, element_descriptors(mesh).nu, rtol=1e-12)


def test_concentrated_error_shrinks_only_the_carrier():
    mesh = square_mesh(4).with_degrees(np.full(32, 2, dtype=np.int64))
    eta = np.full(32, 1e-30)
    eta[7] = 1.0
    report = fake_report(32, eta)
    nu = propose_sizes(report, mesh, AdaptConfig(tol=1e-3))
    cur = element_descriptors(mesh).nu
    assert nu[7] < cur[7]
    others = np.delete(np.arange(32), 7)
    assert np.all(nu[others] >= cur[others])
    assert np.all(nu <= 4.0 * cur + 1e-15)
    assert np.all(nu >= 0.25 * cur - 1e-15)


def test_doubling_tol_never_shrinks_proposals():
    mesh = square_mesh(4).with_degrees(
        np.array([1, 2, 3, 4] * 8, dtype=np.int64))
    rng = np.random.default_rng(11)
    for _ in range(20):
        eta = rng.lognormal(sigma=3.0, size=32) * 10.0 ** rng.integers(-9, 0)
        tol = float(rng.lognormal(sigma=2.0) * 1e-5)
        lo = propose_sizes(fake_report(32, eta), mesh, AdaptConfig(tol=tol))
        hi = propose_sizes(fake_report(32, eta), mesh,
                           AdaptConfig(tol=2.0 * tol))
        assert np.all(hi >= lo - 1e-18)


# -- shape and degree optimization -----------------------------------------


def test_fields_varying_along_x_refine_along_x():
    mesh = square_mesh(6).with_degrees(np.full(72, 2, dtype=np.int64))
    recon = synthetic_pair(mesh, four_components(
        lambda pts: np.exp(pts[:, 0])))
    report = fake_report(72)
    config = AdaptConfig(tol=1.0)
    for e in range(mesh.n_elements):
        t = optimize_shape_and_degree(recon, report, e, config)
        assert t.sigma > 1.0
        # Elongation is across the gradient: phi near pi/2.
        dist = abs((t.phi - 0.5 * np.pi + 0.5 * np.pi) % np.pi
                   - 0.5 * np.pi)
        assert dist < 0.05


def test_fields_varying_along_y_align_elements_with_x():
    mesh = square_mesh(6).with_degrees(np.full(72, 2, dtype=np.int64))
    recon = synthetic_pair(mesh, four_components(
        lambda pts: np.exp(pts[:, 1])))
    report = fake_report(72)
    config = AdaptConfig(tol=1.0)
    for e in range(mesh.n_elements):
        t = optimize_shape_and_degree(recon, report, e, config)
        assert t.sigma > 1.0
        dist = min(t.phi, np.pi - t.phi)
        assert dist < 0.05


def test_equal_curvature_gives_isotropic_elements():
    mesh = square_mesh(4).with_degrees(np.full(32, 1, dtype=np.int64))
    recon = synthetic_pair(mesh, four_components(
        lambda pts: pts[:, 0] ** 2 + pts[:, 1] ** 2))
    report = fake_report(32)
    config = AdaptConfig(tol=1.0)
    for e in range(mesh.n_elements):
        t = optimize_shape_and_degree(recon, report, e, config)
        assert abs(t.sigma - 1.0) < 1e-6
        assert t.p == 1


def test_exact_degree_p_field_never_promotes():
    mesh = square_mesh(4).with_degrees(np.full(32, 2, dtype=np.int64))

    def quadratic(pts):
        x, y = pts[:, 0], pts[:, 1]
        v = 0.3 * x * x - 0.2 * x * y + 0.15 * y * y + x - y
        return np.stack([v, 2 * v, -v, 0.5 * v], axis=1)

    recon = synthetic_pair(mesh, quadratic)
    report = fake_report(32)
    config = AdaptConfig(tol=1.0)
    for e in range(mesh.n_elements):
        t = optimize_shape_and_degree(recon, report, e, config)
        assert t.p == 2
        assert t.sigma == 1.0


def test_optimizer_output_stays_in_bounds():
    mesh = square_mesh(4).with_degrees(np.full(32, 2, dtype=np.int64))
    config = AdaptConfig(tol=1.0, p_max=4, sigma_max=50.0)
    rng = np.random.default_rng(3)
    for _ in range(5):
        a, b = rng.uniform(1.0, 4.0, size=2)
        c, d = rng.uniform(0.0, 2 * np.pi, size=2)

        def wavy(pts):
            x, y = pts[:, 0], pts[:, 1]
            v = np.sin(a * x + c) * np.cos(b * y + d) + np.exp(0.3 * x * y)
            return np.stack([v, 0.5 * v, -0.3 * v, 2.0 * v], axis=1)

        recon = synthetic_pair(mesh, wavy)
        report = fake_report(32)
        for e in range(mesh.n_elements):
            t = optimize_shape_and_degree(recon, report, e, config)
            assert 1.0 <= t.sigma <= config.sigma_max
            assert 1 <= t.p <= config.p_max
            assert t.nu > 0
            assert 0.0 <= t.phi < np.pi


def test_degree_switch_scales_size_by_dof_ratio():
    assert dofs_per_element(2) == 24
    assert dofs_per_element(1) == 12
    assert dofs_per_element(3) == 40


# -- the loop --------------------------------------------------------------

COND = FlowConditions(euler.GasParams(1.4), 0.5, 0.0)


def test_infinite_tolerance_stops_after_one_level():
    mesh = naca_omesh(24, 6, 10.0, 0.05)
    result = adapt_loop(mesh, COND, 'drag', AdaptConfig(tol=math.inf),
                        geometry=AirfoilInCircle(0.12, 10.0))
    assert len(result.levels) == 1
    lvl = result.final
    assert lvl.dof == lvl.space.n_dofs
    assert lvl.dof == int(np.sum(4 * (mesh.degrees + 1) * (mesh.degrees + 2)
                                 // 2))
    assert np.isfinite(lvl.report.eta_I)


def test_level_cap_raises_with_best_so_far():
    mesh = naca_omesh(24, 6, 10.0, 0.05)
    with pytest.raises(MaxLevelsReached) as err:
        adapt_loop(mesh, COND, 'drag', AdaptConfig(tol=1e-30, max_levels=1),
                   geometry=AirfoilInCircle(0.12, 10.0))
    result = err.value.result
    assert result is not None
    assert len(result.levels) == 2
    assert result.levels[1].mesh.n_elements != 0
    for lvl in result.levels:
        assert lvl.dof == lvl.space.n_dofs
