"""電極位置の再構成のテスト"""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from models.eit_model import ElectrodeMode, EndpointSide, StopReason
from services import geometry
from services.cartesian_mesh import build_mesh
from services.conductivity_field import ConstantConductivity
from services.electrode_inversion import (
    ENDPOINT_SIGNS, FIXTURES, ElectrodeInversion, ElectrodeInversionSettings, calibrate_endpoint_signs,
    disk_end_fixture, disk_layout, disk_start_fixture, endpoint_jumps, endpoint_potential,
    finite_difference_gradient, fixed_length_fixture, fixed_length_jacobian, fixture_measurements,
)
from services.forward_solver import ForwardSolution
from services.system_assembly import electrode_arc_positions

H = 0.02


def make_inversion(fixture, measurements, prior=None, h=H, **settings):
    settings.setdefault("mode", fixture.mode)
    return ElectrodeInversion(
        fixture.shape, fixture.extent, ConstantConductivity(1.0), fixture.patterns, measurements,
        fixture.start if prior is None else prior, h=h, settings=ElectrodeInversionSettings(**settings), lengths=fixture.lengths,
    )


@pytest.fixture(scope="module")
def start_fixture():
    return disk_start_fixture()


@pytest.fixture(scope="module")
def start_data(start_fixture):
    return fixture_measurements(start_fixture, h=H)


@pytest.fixture(scope="module")
def disk_mesh():
    layout = disk_layout()
    return build_mesh(geometry.SMALL_DISK, layout, (-1.0, 1.0), h=H)


def test_fixtures():
    assert set(FIXTURES) == {"disk_theta1", "disk_theta2", "fixed_length_1", "fixed_length_2"}
    fx = disk_start_fixture()
    assert fx.truth.theta1[0] == pytest.approx(-3 * math.pi / 4)
    assert fx.start.theta1[0] == pytest.approx(-3.141592)
    assert disk_end_fixture().truth.theta2[0] == pytest.approx(-2.64)
    fixed = fixed_length_fixture(1)
    assert fixed.mode == ElectrodeMode.FIXED_LENGTH
    start_lengths = [arc.length for arc in geometry.electrode_arcs(fixed.shape, fixed.start)]
    assert start_lengths == pytest.approx(fixed.lengths, rel=1e-9)


def test_endpoint_potential_of_constant_and_affine(disk_mesh):
    mesh = disk_mesh
    values = np.zeros(mesh.n_unknowns)
    values[mesh.boundary_offset:mesh.electrode_offset] = 0.7
    solution = ForwardSolution(mesh=mesh, values=values)
    assert endpoint_potential(solution, 1, EndpointSide.START) == pytest.approx(0.7)
    assert endpoint_potential(solution, 1, EndpointSide.END) == pytest.approx(0.7)

    points, positions, length = electrode_arc_positions(mesh, 2)
    values[mesh.boundary_offset + points] = 2.0 + 3.0 * positions
    solution = ForwardSolution(mesh=mesh, values=values)
    assert endpoint_potential(solution, 2, EndpointSide.START) == pytest.approx(2.0)
    assert endpoint_potential(solution, 2, EndpointSide.END) == pytest.approx(2.0 + 3.0 * length)


def test_endpoint_jumps_shape(disk_mesh):
    values = np.zeros(disk_mesh.n_unknowns)
    values[disk_mesh.electrode_offset:] = [1.0, 2.0, 3.0, 4.0]
    jumps = endpoint_jumps(ForwardSolution(mesh=disk_mesh, values=values))
    assert jumps.shape == (2, 4)
    assert jumps[0] == pytest.approx([1.0, 2.0, 3.0, 4.0])


def test_fixed_length_jacobian():
    assert fixed_length_jacobian(geometry.SMALL_DISK, disk_layout()) == pytest.approx(np.ones(4))
    fixed = fixed_length_fixture(1)
    factors = fixed_length_jacobian(fixed.shape, fixed.truth)
    expected = geometry.frame(fixed.shape, fixed.truth.theta1[0]).rho / geometry.frame(fixed.shape, fixed.truth.theta2[0]).rho
    assert factors[0] == pytest.approx(float(expected))
    assert np.all(factors > 0)


def test_finite_difference_gradient_of_quadratic():
    grad = finite_difference_gradient(lambda a: float(a @ a + 3 * a[0]), [1.0, -2.0], step=1e-3)
    assert grad == pytest.approx([5.0, -4.0], rel=1e-8)


def test_layout_ordering_is_enforced(start_fixture, start_data):
    inversion = make_inversion(start_fixture, start_data)
    angles = inversion.angles_of(start_fixture.start)
    assert len(angles) == 8
    broken = angles.copy()
    broken[0] = angles[4] + 0.1
    with pytest.raises(ValidationError):
        inversion.layout_of(broken)


def test_fixed_length_layout_keeps_lengths():
    fixed = fixed_length_fixture(2)
    inversion = make_inversion(fixed, np.zeros((4, 3)), prior=fixed.start, h=0.02)
    angles = inversion.angles_of(fixed.start)
    assert len(angles) == 4
    layout = inversion.layout_of(angles + 0.05)
    lengths = [arc.length for arc in geometry.electrode_arcs(fixed.shape, layout)]
    assert lengths == pytest.approx(fixed.lengths, rel=1e-9)


def test_truth_is_a_fixed_point(start_fixture, start_data):
    inversion = make_inversion(start_fixture, start_data, prior=start_fixture.truth)
    ev = inversion.evaluate_layout(start_fixture.truth)
    assert ev.F == pytest.approx(0.0, abs=1e-24)
    assert np.abs(inversion.sampling_gradient(ev)).max() <= 1e-12
    state = inversion.reconstruct(start_fixture.truth)
    assert state.n == 0
    assert state.stop_reason == StopReason.SMALL_GRADIENT
    assert np.asarray(state.layout.theta1) == pytest.approx(np.asarray(start_fixture.truth.theta1), abs=1e-6)


def test_endpoint_signs_are_calibrated(start_fixture, start_data):
    inversion = make_inversion(start_fixture, start_data)
    result = calibrate_endpoint_signs(inversion, start_fixture.start)
    assert result["signs"] == ENDPOINT_SIGNS
    assert result["electrode"] == 1
    assert len(result["finite_difference"]) == 2


def test_sampling_gradient_sign_matches_finite_differences(start_fixture, start_data):
    inversion = make_inversion(start_fixture, start_data)
    ev = inversion.evaluate_layout(start_fixture.start)
    grad = inversion.sampling_gradient(ev)
    angles = inversion.angles_of(start_fixture.start)
    e = np.zeros_like(angles)
    e[0] = 1e-4
    fd = (inversion.objective(angles + e) - inversion.objective(angles - e)) / 2e-4
    assert np.sign(grad[0]) == np.sign(fd)
    # Θ¹₁ は真値より小さいので F を下げる向きは正
    assert grad[0] < 0


def test_reconstruct_moves_toward_truth(start_fixture, start_data):
    inversion = make_inversion(start_fixture, start_data, max_iter=3)
    state = inversion.reconstruct(start_fixture.start)
    assert state.n >= 1
    assert state.F < state.history[0].F
    values = [row.F for row in state.history]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert state.layout.theta1[0] > start_fixture.start.theta1[0]
    assert state.history[0].theta1[0] == pytest.approx(start_fixture.start.theta1[0])


@pytest.mark.slow
def test_sampling_gradient_matches_finite_differences(start_fixture, start_data):
    inversion = make_inversion(start_fixture, start_data)
    ev = inversion.evaluate_layout(start_fixture.start)
    grad = inversion.sampling_gradient(ev)
    fd = finite_difference_gradient(inversion.objective, inversion.angles_of(start_fixture.start), step=1e-4)
    large = np.abs(fd) > 1e-8
    assert grad[large] == pytest.approx(fd[large], rel=0.1)


@pytest.mark.slow
@pytest.mark.parametrize("make_fixture, index", [(disk_start_fixture, 0), (disk_end_fixture, 4)])
def test_disk_electrode_is_recovered(make_fixture, index):
    fx = make_fixture()
    data = fixture_measurements(fx, h=0.01)
    inversion = make_inversion(fx, data, h=0.01)
    state = inversion.reconstruct(fx.start)
    found = inversion.angles_of(state.layout)
    truth = inversion.angles_of(fx.truth)
    assert found[index] == pytest.approx(truth[index], abs=5e-3)
    others = np.delete(np.arange(8), index)
    assert np.abs(found[others] - truth[others]).max() < 1e-3 + np.abs(inversion.angles_of(fx.start) - truth)[others].max()


@pytest.mark.slow
@pytest.mark.parametrize("case", [1, 2])
def test_fixed_length_electrodes_are_recovered(case):
    fx = fixed_length_fixture(case)
    data = fixture_measurements(fx, resolution=200)
    inversion = ElectrodeInversion(
        fx.shape, fx.extent, ConstantConductivity(1.0), fx.patterns, data, fx.start, resolution=200,
        settings=ElectrodeInversionSettings(mode=ElectrodeMode.FIXED_LENGTH), lengths=fx.lengths,
    )
    state = inversion.reconstruct(fx.start)
    assert np.abs(np.asarray(state.layout.theta1) - np.asarray(fx.truth.theta1)).max() <= 0.12
    lengths = [arc.length for arc in geometry.electrode_arcs(fx.shape, state.layout)]
    assert lengths == pytest.approx(fx.lengths, rel=1e-9)
