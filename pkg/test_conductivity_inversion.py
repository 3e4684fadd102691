"""導電率の再構成と導電率場のテスト"""

import numpy as np
import pandas as pd
import pytest

from models.eit_model import GroundMode, Inclusion, StopReason
from models.errors import DataFormatError
from services.cartesian_mesh import build_mesh
from services.conductivity_field import (
    ConstantConductivity, InclusionConductivity, PerturbedConductivity, load_raster, perturbation_weights,
    sample_field, smooth_bump,
)
from services.conductivity_inversion import (
    ConductivityInversion, InversionSettings, add_noise, adjoint_currents, center_inclusion,
    golden_section, immersed_laplacian, inclusion_centroid, local_maxima, synthetic_measurements,
    two_inclusions,
)

COARSE = 40


@pytest.fixture(scope="module")
def fixture():
    return center_inclusion()


@pytest.fixture(scope="module")
def coarse_mesh(fixture):
    return build_mesh(fixture.shape, fixture.layout, fixture.extent, resolution=COARSE)


@pytest.fixture(scope="module")
def measured(fixture):
    return synthetic_measurements(fixture.shape, fixture.layout, fixture.extent, fixture.truth,
                                  fixture.patterns, resolution=50)


def make_inversion(fixture, mesh, measurements, **settings):
    return ConductivityInversion(mesh, fixture.patterns, measurements, fixture.background,
                                 InversionSettings(**settings))


def test_smooth_bump():
    assert smooth_bump(np.array([0.0]))[0] == pytest.approx(1.0)
    assert np.all(smooth_bump(np.array([-1.0, 1.0, 1.5])) == 0.0)
    assert 0.0 < smooth_bump(np.array([0.9]))[0] < 1.0


def test_inclusion_conductivity_and_gradient():
    sigma = InclusionConductivity(1.0, (Inclusion(center=(0.2, -0.1), radius=0.5, amplitude=2.0),))
    assert sigma(np.array([[0.2, -0.1]]))[0] == pytest.approx(3.0)
    assert sigma(np.array([[1.5, 1.5]]))[0] == 1.0
    p = np.array([[0.35, 0.05]])
    step = 1e-6
    fd = [(sigma(p + step * e) - sigma(p - step * e))[0] / (2 * step) for e in np.eye(2)]
    assert sigma.gradient(p)[0] == pytest.approx(fd, rel=1e-6)


def test_perturbed_conductivity_vanishes_outside(coarse_mesh):
    delta = np.ones(coarse_mesh.n_interior)
    sigma = PerturbedConductivity(ConstantConductivity(1.0), coarse_mesh, delta)
    assert sigma(np.array([[0.0, 0.0]]))[0] == pytest.approx(2.0)
    assert sigma(np.array([[1.8, 0.0]]))[0] == 1.0
    assert sigma.node_values() == pytest.approx(np.full(coarse_mesh.n_interior, 2.0))
    with pytest.raises(ValueError):
        PerturbedConductivity(ConstantConductivity(1.0), coarse_mesh, np.ones(3))


def test_perturbation_weights_reproduce_affine_fields(coarse_mesh):
    I, J = coarse_mesh.interior_nodes()
    xy = coarse_mesh.node_xy(I, J)
    delta = 0.3 + 0.5 * xy[:, 0] - 0.2 * xy[:, 1]
    points = np.random.default_rng(5).uniform(-0.8, 0.8, size=(50, 2))
    expected = 0.3 + 0.5 * points[:, 0] - 0.2 * points[:, 1]
    assert perturbation_weights(coarse_mesh, points) @ delta == pytest.approx(expected, abs=1e-12)

    sigma = PerturbedConductivity(ConstantConductivity(2.0), coarse_mesh, delta)
    values = sigma(points.reshape(5, 10, 2))
    assert values.shape == (5, 10)
    assert values.ravel() == pytest.approx(2.0 + expected, abs=1e-12)
    assert perturbation_weights(coarse_mesh, np.array([[1.8, 0.0], [5.0, 5.0]])).nnz == 0


def test_load_raster(tmp_path):
    coords = np.linspace(-2.0, 2.0, 5)
    X, Y = np.meshgrid(coords, coords, indexing="ij")
    df = pd.DataFrame({"x": X.ravel(), "y": Y.ravel(), "sigma": 1.0 + X.ravel()})
    path = tmp_path / "sigma.csv"
    df.to_csv(path, index=False)
    sigma = load_raster(str(path))
    assert sigma(np.array([[0.5, 0.3]]))[0] == pytest.approx(1.5)
    assert sigma.gradient(np.array([[0.5, 0.3]]))[0] == pytest.approx([1.0, 0.0])

    df.drop(columns="sigma").to_csv(path, index=False)
    with pytest.raises(DataFormatError):
        load_raster(str(path))


def test_golden_section_on_quadratic():
    t, f, evals = golden_section(lambda t: (t - 0.3) ** 2, 0.0, 1.0, rtol=1e-3, max_evals=40)
    assert t == pytest.approx(0.3, abs=1e-3)
    assert f == pytest.approx(0.0, abs=1e-6)
    assert evals <= 40


def test_golden_section_on_increasing_function_stays_near_zero():
    t, _, _ = golden_section(lambda t: t, 0.0, 2.0)
    assert t < 0.01


def test_add_noise_scaling():
    clean = np.arange(1.0, 31.0).reshape(6, 5)
    clean[0] = 0.0
    noisy = add_noise(clean, 0.02, np.random.default_rng(7))
    assert np.linalg.norm(noisy - clean) == pytest.approx(0.02 * np.linalg.norm(clean))
    assert np.all(noisy[0] == 0.0)
    again = add_noise(clean, 0.02, np.random.default_rng(7))
    assert np.array_equal(noisy, again)
    assert np.array_equal(add_noise(clean, 0.0, np.random.default_rng(0)), clean)


def test_adjoint_currents_are_mean_free():
    residual = np.arange(12.0).reshape(4, 3)
    first = adjoint_currents(residual)
    assert first.sum(axis=0) == pytest.approx(np.zeros(3))
    assert first[1:] == pytest.approx(residual[1:])
    mean_free = adjoint_currents(residual, GroundMode.MEAN_FREE)
    assert mean_free.mean(axis=0) == pytest.approx(np.zeros(3))


def test_immersed_laplacian_is_symmetric(coarse_mesh):
    K = immersed_laplacian(coarse_mesh)
    assert abs(K - K.T).max() < 1e-9
    assert np.all(K.diagonal() > 0)
    assert K.shape == (coarse_mesh.n_interior, coarse_mesh.n_interior)


def test_measurement_shape_is_checked(fixture, coarse_mesh):
    with pytest.raises(ValueError):
        make_inversion(fixture, coarse_mesh, np.zeros((16, 3)))


def test_truth_is_a_fixed_point(fixture, coarse_mesh):
    reference = make_inversion(fixture, coarse_mesh, np.zeros((16, 15)), reg_weight=0.0)
    delta_true = sample_field(fixture.truth, coarse_mesh) - 1.0
    data = reference.evaluate(delta_true).measurements
    inversion = make_inversion(fixture, coarse_mesh, data, reg_weight=0.0)
    ev = inversion.evaluate(delta_true)
    assert ev.F == pytest.approx(0.0, abs=1e-20)
    v, rhs = inversion.descent_direction(ev)
    assert inversion.l2_norm(v) <= 1e-8
    state = inversion.reconstruct(initial=delta_true)
    assert state.n == 0
    assert state.stop_reason in (StopReason.SMALL_GRADIENT, StopReason.NO_STEP)


def test_background_misfit_is_positive(fixture, coarse_mesh, measured):
    inversion = make_inversion(fixture, coarse_mesh, measured)
    ev = inversion.evaluate(np.zeros(coarse_mesh.n_interior))
    assert ev.F > 0
    assert ev.F == pytest.approx(ev.misfit)


def test_descent_direction_is_a_descent(fixture, coarse_mesh, measured):
    inversion = make_inversion(fixture, coarse_mesh, measured)
    predicted, fd = inversion.directional_derivative_check(np.zeros(coarse_mesh.n_interior))
    assert predicted < 0
    assert fd < 0
    assert fd == pytest.approx(predicted, rel=0.05)


@pytest.mark.parametrize("center", [(0.0, 0.0), (1.0, 0.5), (0.0, -0.8)])
def test_predicted_slope_matches_central_difference(fixture, coarse_mesh, measured, center):
    inversion = make_inversion(fixture, coarse_mesh, measured)
    I, J = coarse_mesh.interior_nodes()
    xy = coarse_mesh.node_xy(I, J)
    direction = np.exp(-((xy - np.asarray(center)) ** 2).sum(axis=1) / 0.1)
    delta = np.zeros(coarse_mesh.n_interior)
    predicted, fd = inversion.directional_derivative_check(delta, direction, t=1e-3)
    assert fd == pytest.approx(predicted, rel=1e-2)

    ev = inversion.evaluate(delta)
    rhs = inversion.gradient_rhs(ev)
    assert inversion.predicted_slope(rhs, direction) == pytest.approx(predicted)


def test_misfit_density_vanishes_without_residual(fixture, coarse_mesh):
    reference = make_inversion(fixture, coarse_mesh, np.zeros((16, 15)))
    data = reference.evaluate(np.zeros(coarse_mesh.n_interior)).measurements
    inversion = make_inversion(fixture, coarse_mesh, data)
    ev = inversion.evaluate(np.zeros(coarse_mesh.n_interior))
    assert not inversion.misfit_density(ev).any()
    assert all(not lam.any() for lam in inversion.adjoint_states(ev))


def test_step_cap_keeps_sigma_positive(fixture, coarse_mesh, measured):
    inversion = make_inversion(fixture, coarse_mesh, measured, sigma_min=0.1, t_max=10.0)
    direction = np.zeros(coarse_mesh.n_interior)
    direction[0] = -3.0
    assert inversion.step_cap(np.zeros(coarse_mesh.n_interior), direction) == pytest.approx(0.3)
    assert inversion.step_cap(np.zeros(coarse_mesh.n_interior), -direction) == pytest.approx(10.0)


def test_reconstruct_decreases_objective(fixture, coarse_mesh, measured):
    inversion = make_inversion(fixture, coarse_mesh, measured, max_iter=2, line_search_evals=12)
    F0 = inversion.objective(np.zeros(coarse_mesh.n_interior))
    state = inversion.reconstruct()
    assert state.F < F0
    values = [row.F for row in state.history] + [state.F]
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert state.history[0].t_n > 0
    assert (inversion.background_nodes + state.delta).min() >= inversion.settings.sigma_min
    grid = inversion.field_grid(state.delta)
    assert np.isnan(grid[0, 0])


def test_centroid_and_local_maxima(coarse_mesh):
    sigma = InclusionConductivity(0.0, (
        Inclusion(center=(-0.6, 0.4), radius=0.4, amplitude=1.0),
        Inclusion(center=(0.6, -0.4), radius=0.4, amplitude=0.5),
    ))
    delta = sample_field(sigma, coarse_mesh)
    peaks = local_maxima(coarse_mesh, delta)
    assert len(peaks) == 2
    assert peaks[0][:2] == pytest.approx((-0.6, 0.4), abs=0.11)
    assert peaks[1][:2] == pytest.approx((0.6, -0.4), abs=0.11)

    single = sample_field(InclusionConductivity(0.0, (Inclusion(center=(0.3, -0.2), radius=0.5, amplitude=1.0),)),
                          coarse_mesh)
    assert inclusion_centroid(coarse_mesh, single) == pytest.approx([0.3, -0.2], abs=0.06)
    assert inclusion_centroid(coarse_mesh, -single) is None
    assert local_maxima(coarse_mesh, -single) == []


@pytest.mark.slow
def test_center_inclusion_is_localized(fixture):
    mesh = build_mesh(fixture.shape, fixture.layout, fixture.extent, resolution=100)
    data = synthetic_measurements(fixture.shape, fixture.layout, fixture.extent, fixture.truth,
                                  fixture.patterns, resolution=151)
    inversion = make_inversion(fixture, mesh, data, max_iter=10)
    state = inversion.reconstruct()
    centroid = inclusion_centroid(mesh, state.delta)
    assert centroid is not None
    assert np.linalg.norm(centroid) <= 0.2


@pytest.mark.slow
def test_center_inclusion_with_noise(fixture):
    mesh = build_mesh(fixture.shape, fixture.layout, fixture.extent, resolution=100)
    clean = synthetic_measurements(fixture.shape, fixture.layout, fixture.extent, fixture.truth,
                                   fixture.patterns, resolution=151)
    data = add_noise(clean, 0.02, np.random.default_rng(0))
    state = make_inversion(fixture, mesh, data, max_iter=10).reconstruct()
    centroid = inclusion_centroid(mesh, state.delta)
    assert centroid is not None
    assert np.linalg.norm(centroid) <= 0.3


@pytest.mark.slow
def test_gradient_matches_finite_differences_along_random_fields(fixture, measured):
    mesh = build_mesh(fixture.shape, fixture.layout, fixture.extent, resolution=60)
    inversion = make_inversion(fixture, mesh, measured)
    rng = np.random.default_rng(11)
    I, J = mesh.interior_nodes()
    xy = mesh.node_xy(I, J)
    for _ in range(5):
        center = rng.uniform(-0.6, 0.6, 2)
        direction = np.exp(-((xy - center) ** 2).sum(axis=1) / 0.1)
        predicted, fd = inversion.directional_derivative_check(np.zeros(mesh.n_interior), direction)
        assert fd == pytest.approx(predicted, rel=0.1)


@pytest.mark.slow
def test_two_inclusions_give_two_maxima():
    fx = two_inclusions()
    mesh = build_mesh(fx.shape, fx.layout, fx.extent, resolution=100)
    data = synthetic_measurements(fx.shape, fx.layout, fx.extent, fx.truth, fx.patterns, resolution=151)
    state = make_inversion(fx, mesh, data, max_iter=15).reconstruct()
    assert len(local_maxima(mesh, state.delta)) >= 2
