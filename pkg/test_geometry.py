"""境界形状と電極配置のテスト"""

import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.integrate import trapezoid

from models.eit_model import AdmittivityKind, BoundaryShape
from models.errors import GeometryError
from services import geometry


OMEGA2_ALPHA = (1.51, 0.01, 0.05, 0.2, 0.035, 0.01, 0.1)


def test_radius_of_disk_is_constant():
    assert geometry.radius(geometry.OMEGA1, 0.7) == pytest.approx(1.5)
    assert geometry.radius_deriv(geometry.OMEGA1, np.linspace(0, 6, 7)) == pytest.approx(np.zeros(7))


def test_radius_at_zero_sums_cosine_coefficients():
    shape = BoundaryShape(alpha=OMEGA2_ALPHA)
    assert geometry.radius(shape, 0.0) == pytest.approx(1.77, abs=1e-14)


def test_radius_derivatives_match_finite_differences():
    shape = geometry.OMEGA3
    theta = np.linspace(-3.0, 3.0, 13)
    step = 1e-5
    fd1 = (geometry.radius(shape, theta + step) - geometry.radius(shape, theta - step)) / (2 * step)
    fd2 = (geometry.radius_deriv(shape, theta + step) - geometry.radius_deriv(shape, theta - step)) / (2 * step)
    assert geometry.radius_deriv(shape, theta) == pytest.approx(fd1, abs=1e-8)
    assert geometry.radius_second_deriv(shape, theta) == pytest.approx(fd2, abs=1e-8)


def test_shape_rejects_radius_outside_range():
    with pytest.raises(ValidationError):
        BoundaryShape(alpha=(2.5,))
    with pytest.raises(ValidationError):
        BoundaryShape(alpha=(0.1, 0.5, 0.0))
    with pytest.raises(ValidationError):
        BoundaryShape(alpha=(1.0, 0.1))


def test_frame_on_disk():
    fr = geometry.frame(geometry.OMEGA1, 0.0)
    assert fr.point == pytest.approx([1.5, 0.0])
    assert fr.normal == pytest.approx([1.0, 0.0])
    assert fr.tangent == pytest.approx([0.0, 1.0])
    assert float(fr.rho) == pytest.approx(1.5)
    assert geometry.frame(geometry.OMEGA1, math.pi / 2).normal == pytest.approx([0.0, 1.0], abs=1e-15)


def test_normal_matches_curve_finite_difference():
    shape = geometry.OMEGA2
    theta, step = 0.3, 1e-6
    tangent = (geometry.frame(shape, theta + step).point - geometry.frame(shape, theta - step).point) / (2 * step)
    tangent /= np.linalg.norm(tangent)
    normal = np.array([tangent[1], -tangent[0]])
    assert geometry.frame(shape, theta).normal == pytest.approx(normal, abs=1e-6)


@pytest.mark.parametrize("name", ["omega1", "omega2", "omega3", "fixed_length"])
def test_frame_is_orthonormal_and_outward(name):
    shape = geometry.NAMED_SHAPES[name]
    theta = np.linspace(-math.pi, math.pi, 4096, endpoint=False)
    fr = geometry.frame(shape, theta)
    assert np.abs((fr.normal * fr.tangent).sum(axis=1)).max() < 1e-12
    assert np.abs(np.linalg.norm(fr.normal, axis=1) - 1).max() < 1e-12
    assert np.abs(np.linalg.norm(fr.tangent, axis=1) - 1).max() < 1e-12
    assert not geometry.is_inside(shape, fr.point + 1e-6 * fr.normal).any()
    assert geometry.is_inside(shape, fr.point - 1e-6 * fr.normal).all()


def test_is_inside():
    assert geometry.is_inside(geometry.OMEGA1, np.array([0.0, 0.0]))
    assert not geometry.is_inside(geometry.OMEGA1, np.array([2.0, 0.0]))
    assert geometry.is_inside(geometry.OMEGA3, np.array([0.5, 0.5]))


def test_arc_length_on_disk():
    layout = geometry.make_layout([0.0], [0.2])
    arcs = geometry.electrode_arcs(geometry.OMEGA1, layout)
    assert arcs[0].length == pytest.approx(0.3, rel=1e-12)


def test_arc_length_matches_dense_trapezoid():
    shape = geometry.OMEGA2
    theta = np.linspace(0.0, 0.25, 1_000_001)
    oracle = trapezoid(geometry.speed(shape, theta), theta)
    assert geometry.arc_length(shape, 0.0, 0.25) == pytest.approx(oracle, abs=1e-8)


def test_default_layout_on_disk_has_closed_form_end_angles():
    layout = geometry.default_layout(geometry.OMEGA1)
    theta1 = np.array([-math.pi + k * math.pi / 8 for k in range(16)])
    assert np.asarray(layout.theta1) == pytest.approx(theta1)
    assert np.asarray(layout.theta2) == pytest.approx(theta1 + 0.35 / 1.5, abs=1e-12)


@pytest.mark.parametrize("name", ["omega1", "omega2", "omega3"])
def test_default_layout_arcs_are_disjoint(name):
    layout = geometry.default_layout(geometry.NAMED_SHAPES[name])
    chain = np.ravel(np.column_stack([layout.theta1, layout.theta2]))
    assert np.all(np.diff(chain) > 0)
    assert chain[-1] < layout.theta1[0] + 2 * math.pi


def test_solve_end_angle():
    assert geometry.solve_end_angle(geometry.OMEGA1, -math.pi, 0.35) == pytest.approx(-math.pi + 7 / 30, abs=1e-13)
    assert geometry.solve_end_angle(geometry.OMEGA1, 0.4, 0.0) == 0.4
    theta2 = geometry.solve_end_angle(geometry.OMEGA3, 0.2, 0.35)
    assert geometry.arc_length(geometry.OMEGA3, 0.2, theta2) == pytest.approx(0.35, rel=1e-10)


def test_solve_end_angle_without_room_raises():
    with pytest.raises(GeometryError):
        geometry.solve_end_angle(geometry.OMEGA1, 0.0, 1.0, max_span=0.5)
    with pytest.raises(GeometryError):
        geometry.solve_end_angle(geometry.OMEGA1, 0.0, -0.1)


def test_overlapping_electrodes_are_rejected():
    with pytest.raises(ValidationError):
        geometry.make_layout([0.0, 0.1], [0.2, 0.3])
    with pytest.raises(ValidationError):
        geometry.make_layout([0.0, 3.0], [1.0, 6.5])
    with pytest.raises(ValidationError):
        geometry.make_layout([0.0], [0.1], z=0.0)


def test_constant_admittivity():
    layout = geometry.make_layout([0.0], [0.5], z=0.1)
    assert geometry.admittivity_at(layout, 0, 0.25) == pytest.approx(10.0)


def test_smooth_bump_admittivity():
    layout = geometry.make_layout([0.0], [0.5], z=0.5, kind=AdmittivityKind.SMOOTH_BUMP)
    assert geometry.admittivity_at(layout, 0, 0.25) == pytest.approx(2.0)
    # 台は弧の中央 80%
    assert geometry.admittivity_at(layout, 0, 0.05 + 1e-12) == pytest.approx(0.0, abs=1e-12)
    assert geometry.admittivity_at(layout, 0, 0.0) == 0.0
    theta = np.linspace(0.0, 0.5, 1001)
    values = geometry.admittivity_values(layout, np.zeros(len(theta), dtype=int), theta)
    assert values.min() >= 0.0
    assert values.max() > 0.0


def test_admittivity_outside_arc_raises():
    layout = geometry.make_layout([0.0], [0.5])
    with pytest.raises(GeometryError):
        geometry.admittivity_at(layout, 0, 1.0)


def test_layout_from_length_reproduces_lengths():
    shape = geometry.FIXED_LENGTH_SHAPE
    layout = geometry.layout_from_length(shape, [-3.0, -1.5, 0.0, 1.5], [0.3, 0.25, 0.2, 0.35])
    lengths = [arc.length for arc in geometry.electrode_arcs(shape, layout)]
    assert lengths == pytest.approx([0.3, 0.25, 0.2, 0.35], rel=1e-10)
