import math

import numpy as np
import pytest

from thermfem.coeff import preset
from thermfem.mesh import make_interval_mesh, make_rect_mesh
from thermfem.schemes import SchemeConfig, run
from thermfem.verify import (BoundaryViolationError, ErrorReport, ErrorRow,
                             build_mms, error_split, measure_errors,
                             projection_gradient_levels, spatial_eoc_study,
                             temporal_eoc_study)


def test_heat_forcing_closed_form():
    # k = 1, f = 1, lam = 0: the forcing is (pi^2/4 - 1) u_exact
    cs = preset("unit", lam=0.0)
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    factor = math.pi ** 2 / 4 - 1.0
    assert np.isclose(factor, 1.4674011002723395, rtol=1e-16)
    x = np.linspace(-0.9, 0.9, 13)
    for t in (0.0, 0.3, 1.0):
        got = mms.forcing({"x": x}, t)
        want = factor * np.exp(-t) * np.sin(math.pi * (x + 1) / 2)
        assert np.allclose(got, want, rtol=1e-12)


def test_zero_profile_forcing_is_constant():
    # all derivative terms vanish; only the nonlocal source remains
    cs = preset("unit", lam=1.0)       # f = 1, integral over (-1,1) is 2
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    mms = build_mms("0", cs, mesh)
    got = mms.forcing({"x": np.linspace(-1, 1, 5)}, 0.7)
    assert np.allclose(got, -0.25, rtol=1e-13)


def test_boundary_violation_rejected():
    cs = preset("unit")
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    with pytest.raises(BoundaryViolationError):
        build_mms("1 + x", cs, mesh)


def test_residual_check_passes_for_smooth_preset():
    cs = preset("smooth")
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    # spot-check the assembled equation residual independently
    rng = np.random.default_rng(5)
    xs = rng.uniform(-1, 1, 20)
    for t in (0.05, 0.4):
        u = np.exp(-t) * np.sin(math.pi * (xs + 1) / 2)
        u_t = -u
        u_x = np.exp(-t) * (math.pi / 2) * np.cos(math.pi * (xs + 1) / 2)
        u_xx = -(math.pi / 2) ** 2 * u
        k = 1 + 1 / (1 + u ** 2)
        k_p = -2 * u / (1 + u ** 2) ** 2
        f = 1 + np.exp(-u ** 2)
        lhs = u_t - (k_p * u_x ** 2 + k * u_xx)
        rhs = cs.lam / mms.forcing.nonlocal_value(t) ** 2 * f \
            + mms.forcing({"x": xs}, t)
        assert np.allclose(lhs, rhs, atol=1e-8)


def test_forcing_nonlocal_tabulation_accuracy():
    # refining the fixed quadrature must not move the tabulated integral
    cs = preset("smooth")
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    from thermfem.verify import _DomainQuadrature

    class Finer(_DomainQuadrature):
        def __init__(self):
            nodes, weights = np.polynomial.legendre.leggauss(12)
            a, b = -1.0, 1.0
            edges = np.linspace(a, b, 257)
            half = 0.5 * np.diff(edges)
            mid = 0.5 * (edges[:-1] + edges[1:])
            self.coords = {"x": (mid[:, None] + half[:, None] * nodes).ravel()}
            self.weights = (half[:, None] * weights).ravel()

    fine = Finer()
    for t in (0.0, 0.25, 0.5):
        coarse_val = mms.forcing.nonlocal_value(t)
        fine_val = fine.integrate(mms.forcing.f_of_u, t)
        assert abs(coarse_val - fine_val) <= 1e-12 * abs(fine_val)


def test_mms_caches_nonlocal_integrals():
    cs = preset("smooth")
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    v1 = mms.forcing.nonlocal_value(0.125)
    v2 = mms.forcing.nonlocal_value(0.125)
    assert v1 == v2
    assert 0.125 in mms.forcing._integral_cache


# ------------------------------------------------------------------ studies

def test_spatial_study_rows_and_eoc():
    cs = preset("smooth")
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    cfg = SchemeConfig(scheme="crank_nicolson", tau=0.01, t_end=0.1)
    report = spatial_eoc_study(mms, cfg, mesh, levels=3, tau=0.0025)
    assert [r.level for r in report.rows] == [0, 1, 2]
    assert report.rows[1].h == report.rows[0].h / 2
    eoc = report.eoc("l2")
    assert len(eoc) == 2
    assert 1.7 <= eoc[-1] <= 2.3
    # asymptotic monotonicity on the last pairs
    errs = [r.l2 for r in report.rows]
    assert errs[-1] <= errs[-2] <= errs[-3]


def test_degenerate_exact_solution_flags_exact():
    # zero profile: the discrete solution stays zero, errors sit at
    # solver precision and the EOC column degenerates
    cs = preset("unit", lam=1.0)
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    mms = build_mms("0", cs, mesh)
    cfg = SchemeConfig(scheme="backward_euler", tau=0.05, t_end=0.1)
    report = spatial_eoc_study(mms, cfg, mesh, levels=3, tau=0.05)
    assert all(r.l2 < 1e-10 for r in report.rows)
    assert report.eoc("l2") == ["exact", "exact"]


def test_temporal_study_first_order_smoke():
    cs = preset("smooth")
    mesh = make_interval_mesh(-1.0, 1.0, 128)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    cfg = SchemeConfig(scheme="backward_euler", tau=0.1, t_end=0.5)
    report = temporal_eoc_study(mms, cfg, mesh, levels=3)
    assert report.rows[-1].tau == 0.025
    eoc = report.eoc("l2")
    assert 0.7 <= eoc[-1] <= 1.3


def test_study_workers_do_not_change_results():
    cs = preset("smooth")
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    cfg = SchemeConfig(scheme="crank_nicolson", tau=0.01, t_end=0.1)
    seq = spatial_eoc_study(mms, cfg, mesh, levels=3, tau=0.0025, workers=1)
    par = spatial_eoc_study(mms, cfg, mesh, levels=3, tau=0.0025, workers=4)
    for a, b in zip(seq.rows, par.rows):
        assert a.l2 == b.l2 and a.rho == b.rho


def test_levels_precondition():
    cs = preset("smooth")
    mesh = make_interval_mesh(-1.0, 1.0, 8)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    cfg = SchemeConfig(scheme="crank_nicolson", tau=0.01, t_end=0.1)
    with pytest.raises(ValueError):
        spatial_eoc_study(mms, cfg, mesh, levels=2)
    with pytest.raises(ValueError):
        temporal_eoc_study(mms, cfg, mesh, levels=2)


# -------------------------------------------------------------- error split

def test_error_split_triangle_consistency():
    cs = preset("smooth")
    mesh = make_interval_mesh(-1.0, 1.0, 32)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    cfg = SchemeConfig(scheme="crank_nicolson", tau=0.025, t_end=0.5)
    records = run(mms.u0, cfg, cs, mesh, mms)
    cols = error_split(records, mms, t=0.5)
    assert cols["l2"] <= cols["theta"] + cols["rho"] + 1e-12
    assert all(v >= 0 for v in cols.values())


def test_eoc_requires_exact_halving():
    rows = [ErrorRow(0, 0.4, 0.1, 1.0, 1.0, 0, 0, 0),
            ErrorRow(1, 0.3, 0.1, 0.5, 0.5, 0, 0, 0)]
    report = ErrorReport(rows=rows, refined="h")
    assert report.eoc("l2") == [None]
    with pytest.raises(KeyError):
        report.eoc("nope")


def test_projection_gradient_bounded_across_levels():
    cs = preset("smooth")
    mesh = make_interval_mesh(-1.0, 1.0, 16)
    mms = build_mms("exp(-t) * sin(pi*(x+1)/2)", cs, mesh)
    grads = projection_gradient_levels(mms, mesh, levels=4, t=0.5)
    last, prev = grads[-1], grads[-2]
    assert abs(last - prev) / prev < 0.10


def test_2d_mms_and_split():
    cs = preset("smooth")
    mesh = make_rect_mesh(0.0, 0.0, 1.0, 1.0, 4, 4)
    mms = build_mms("exp(-t) * sin(pi*x) * sin(pi*y)", cs, mesh)
    cfg = SchemeConfig(scheme="crank_nicolson", tau=0.05, t_end=0.1)
    records = run(mms.u0, cfg, cs, mesh, mms)
    cols = measure_errors(records[-1].state, mms, 0.1)
    assert cols["l2"] > 0 and cols["rho"] > 0
