"""収束検証ハーネスのテスト"""

import numpy as np
import pandas as pd
import pytest

from services import geometry
from services.convergence_harness import (
    DESK_H, ConvergenceHarness, SweepCase, compatibility_case, constant_case,
    fit_order, named_cases, shape_cases, admittivity_cases,
)
from services.data_manager import DataManager
from services.forward_solver import sin_xy


@pytest.fixture
def harness():
    return ConvergenceHarness(workers=2)


def test_fit_order_of_linear_errors():
    h = np.array([0.1, 0.05, 0.025, 0.0125])
    fit = fit_order(h, 3.0 * h)
    assert fit.order == pytest.approx(1.0)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.label() == "1.000"


def test_fit_order_of_quadratic_errors_with_nan():
    h = np.array([0.1, 0.05, 0.025, 0.0125])
    errors = h ** 2
    errors[1] = np.nan
    assert fit_order(h, errors).order == pytest.approx(2.0)


def test_fit_order_exact_and_invalid():
    fit = fit_order([0.1, 0.05, 0.025], [1e-14, 0.0, 3e-13])
    assert fit.exact and fit.order is None
    assert fit.label() == "exact"
    with pytest.raises(ValueError):
        fit_order([0.1, 0.05], [0.1, 0.05])
    with pytest.raises(ValueError):
        fit_order([0.1, 0.05, 0.025], [0.1, 0.0, 0.02])


def test_sweep_case_validation():
    shape = geometry.OMEGA1
    layout = geometry.default_layout(shape)
    with pytest.raises(ValueError):
        SweepCase("bad", shape, layout, (-2.0, 2.0), [0.05, 0.1], exact=sin_xy())
    with pytest.raises(ValueError):
        SweepCase("bad", shape, layout, (-2.0, 2.0), [0.1, 0.05])
    with pytest.raises(ValueError):
        SweepCase("bad", shape, layout, (-2.0, 2.0), [0.1, 0.05], exact=sin_xy(), currents=np.zeros(16))
    case = SweepCase("ok", shape, layout, (-2.0, 2.0), [0.1, 0.05], exact=sin_xy())
    assert case.U_exact == pytest.approx(np.zeros(16))
    assert not case.is_compatibility


def test_named_cases():
    assert [c.name for c in named_cases("shapes")] == ["omega1_sin_xy", "omega2_sin_xy", "omega3_sin_xy"]
    assert len(named_cases("admittivity")) == 2
    assert named_cases("compatibility")[0].is_compatibility
    assert len(named_cases("constant")) == 1
    assert shape_cases(full_scale=True)[0].h_list[-1] == pytest.approx(1 / 225)
    with pytest.raises(KeyError):
        named_cases("unknown")


def test_constant_solution_is_exact(harness):
    report = harness.run_sweep(constant_case())
    assert all(row.ok for row in report.rows)
    assert max(row.err_u_inf for row in report.rows) <= 1e-12
    assert report.fits["err_u_inf"].exact
    assert report.fits["err_grad_inf"].exact


def test_failure_at_one_h_is_recorded(harness):
    case = constant_case()
    row = harness.run_case(case, 1.0)
    assert not row.ok
    assert "余白" in row.error


def test_coarse_sin_xy_sweep(harness):
    case = shape_cases()[0]
    case.h_list = (1 / 10, 1 / 20, 1 / 40)
    report = harness.run_sweep(case)
    assert not report.errors
    assert [row.h for row in report.rows] == pytest.approx([0.1, 0.05, 0.025])
    assert report.fits["err_u_inf"].order > 0.5
    assert set(report.fits) == {"err_u_inf", "err_u_l2", "err_grad_inf", "err_grad_inf_all"}


def test_write_report(harness, tmp_path):
    report = harness.run_sweep(constant_case())
    files = harness.write_report(report, DataManager(tmp_path))
    assert [p.name for p in files] == [
        "sweep_omega1_constant.csv", "sweep_omega1_constant.gp", "sweep_omega1_constant_summary.txt",
    ]
    df = pd.read_csv(files[0])
    assert list(df.columns[:5]) == ["h", "err_u_inf", "err_u_l2", "err_grad_inf", "seconds"]
    assert len(df) == 3
    summary = files[2].read_text(encoding="utf-8")
    assert "omega1_constant" in summary
    assert "exact" in summary
    assert "sweep_omega1_constant.csv" in files[1].read_text(encoding="utf-8")


@pytest.mark.slow
@pytest.mark.parametrize("index", [0, 1, 2])
def test_shape_sweeps_converge_linearly(harness, index):
    report = harness.run_sweep(shape_cases()[index])
    assert not report.errors
    assert report.fits["err_u_inf"].order >= 0.8
    assert report.fits["err_grad_inf"].order >= 0.8


@pytest.mark.slow
@pytest.mark.parametrize("index", [0, 1])
def test_admittivity_sweeps_converge(harness, index):
    report = harness.run_sweep(admittivity_cases()[index])
    assert not report.errors
    assert report.fits["err_u_inf"].order >= 0.8


@pytest.mark.slow
def test_incompatible_currents_are_absorbed_by_ground(harness):
    report = harness.run_sweep(compatibility_case(currents=np.eye(16)[4], h_list=DESK_H))
    assert not report.errors
    errors = [row.err_u_inf for row in report.rows]
    assert max(errors) <= 0.1
    assert errors[-1] <= errors[0] + 1e-9
