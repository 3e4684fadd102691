"""格子の分類・境界点・番号付けのテスト"""

import math

import numpy as np
import pytest

from models.eit_model import BoundaryShape
from models.errors import GeometryError, MeshResolutionError
from services import geometry
from services.cartesian_mesh import (
    BOUNDARY, CLAMP_FRACTION, EXTERIOR, GRID, RIM,
    build_mesh, mesh_summary, neighbors, relabel_electrodes,
)


@pytest.fixture(scope="module")
def unit_disk_mesh():
    """半径 1.5 の円、h = 1、[−4, 4]²"""
    shape = geometry.OMEGA1
    return build_mesh(shape, geometry.default_layout(shape), (-4.0, 4.0), h=1.0)


def test_interior_points_of_coarse_disk(unit_disk_mesh):
    mesh = unit_disk_mesh
    I, J = mesh.interior_nodes()
    xy = {tuple(p) for p in np.round(mesh.node_xy(I, J)).astype(int).tolist()}
    expected = {(x, y) for x in range(-4, 5) for y in range(-4, 5) if x * x + y * y < 2.25}
    assert xy == expected
    assert mesh.n_interior == 9


def test_boundary_point_on_horizontal_segment(unit_disk_mesh):
    mesh = unit_disk_mesh
    i, j = mesh.grid_index(1.0, 1.0)
    k = mesh.hbp[i, j]
    assert k >= 0
    assert mesh.bp_xy[k] == pytest.approx([math.sqrt(1.25), 1.0], abs=1e-12)


def test_neighbors_across_boundary(unit_disk_mesh):
    mesh = unit_disk_mesh
    i, j = mesh.grid_index(1.0, 1.0)
    east = {n.direction: n for n in neighbors(mesh, i, j)}["E"]
    assert east.kind == BOUNDARY
    assert east.distance == pytest.approx(math.sqrt(1.25) - 1.0, abs=1e-12)

    i, j = mesh.grid_index(2.0, 1.0)
    assert mesh.region[i, j] == EXTERIOR
    west = {n.direction: n for n in neighbors(mesh, i, j)}["W"]
    assert west.kind == BOUNDARY
    assert west.index == east.index
    assert west.distance == pytest.approx(2.0 - math.sqrt(1.25), abs=1e-12)


def test_regular_node_has_grid_neighbors(unit_disk_mesh):
    mesh = unit_disk_mesh
    i, j = mesh.grid_index(0.0, 0.0)
    found = neighbors(mesh, i, j)
    assert all(n.kind == GRID and n.distance == pytest.approx(1.0) for n in found)
    assert not mesh.irregular[i, j]


def test_irregular_flags_match_neighbor_kinds(unit_disk_mesh):
    mesh = unit_disk_mesh
    N = mesh.resolution
    for i in range(1, N):
        for j in range(1, N):
            has_bp = any(n.kind == BOUNDARY for n in neighbors(mesh, i, j))
            assert bool(mesh.irregular[i, j]) == has_bp


def test_rim_is_not_an_unknown(unit_disk_mesh):
    mesh = unit_disk_mesh
    assert np.all(mesh.region[0, :] == RIM)
    assert np.all(mesh.node_index[mesh.region == RIM] == -1)


@pytest.mark.parametrize("name", ["omega1", "omega2", "omega3"])
def test_index_map_is_bijection(name):
    shape = geometry.NAMED_SHAPES[name]
    mesh = build_mesh(shape, geometry.default_layout(shape), (-2.0, 2.0), h=1 / 10)
    indices = mesh.node_index[mesh.node_index >= 0]
    assert np.array_equal(np.sort(indices), np.arange(mesh.n_interior + mesh.n_exterior))
    assert mesh.n_unknowns == mesh.n_interior + mesh.n_exterior + mesh.n_boundary + 16
    assert np.all(mesh.region[mesh.node_index >= 0] != RIM)


@pytest.mark.parametrize("name", ["omega1", "omega2", "omega3"])
def test_boundary_points_lie_on_boundary(name):
    shape = geometry.NAMED_SHAPES[name]
    mesh = build_mesh(shape, geometry.default_layout(shape), (-2.0, 2.0), h=1 / 25)
    free = ~mesh.bp_clamped
    level = geometry.boundary_level(shape, mesh.bp_xy[free])
    assert np.abs(level).max() <= 1e-10


@pytest.mark.parametrize("name", ["omega1", "omega2", "omega3"])
def test_every_electrode_is_resolved_and_refines(name):
    shape = geometry.NAMED_SHAPES[name]
    layout = geometry.default_layout(shape)
    coarse = build_mesh(shape, layout, (-2.0, 2.0), h=1 / 25)
    fine = build_mesh(shape, layout, (-2.0, 2.0), h=1 / 50)
    counts_coarse = np.array([len(coarse.electrode_points(m)) for m in range(16)])
    counts_fine = np.array([len(fine.electrode_points(m)) for m in range(16)])
    assert counts_coarse.min() >= 2
    assert np.all(counts_fine >= 2 * counts_coarse - 2)
    assert counts_coarse.sum() <= coarse.n_boundary


def test_margin_violation_raises():
    shape = geometry.OMEGA1
    with pytest.raises(GeometryError):
        build_mesh(shape, geometry.default_layout(shape), (-1.6, 1.6), h=0.1)


def test_h_must_divide_extent():
    shape = geometry.OMEGA1
    with pytest.raises(GeometryError):
        build_mesh(shape, geometry.default_layout(shape), (-2.0, 2.0), h=0.3)


def test_wiggly_boundary_is_under_resolved():
    shape = BoundaryShape(alpha=(1.0,) + (0.0,) * 19 + (0.1,) + (0.0,) * 20)
    with pytest.raises(MeshResolutionError):
        build_mesh(shape, geometry.make_layout([0.0], [0.1]), (-2.0, 2.0), h=0.25)


def test_clamp_moves_near_coincident_points():
    shape = BoundaryShape(alpha=(1.00001,))
    layout = geometry.default_layout(shape, count=4, length=0.3)
    raw = build_mesh(shape, layout, (-3.0, 3.0), h=0.5, clamp=False)
    mesh = build_mesh(shape, layout, (-3.0, 3.0), h=0.5)
    assert raw.bp_inner_distance().min() < 1e-4 * raw.h
    assert mesh.clamped_count > 0
    assert mesh.bp_inner_distance().min() >= CLAMP_FRACTION * mesh.h * (1 - 1e-9)
    i, j = mesh.grid_index(1.0, 0.0)
    k = mesh.hbp[i, j]
    assert mesh.bp_xy[k] == pytest.approx([1.0 + CLAMP_FRACTION * 0.5, 0.0], abs=1e-12)


def test_clamp_leaves_generic_mesh_unchanged():
    shape = geometry.OMEGA1
    mesh = build_mesh(shape, geometry.default_layout(shape), (-2.0, 2.0), h=1 / 20)
    raw = build_mesh(shape, geometry.default_layout(shape), (-2.0, 2.0), h=1 / 20, clamp=False)
    if raw.bp_inner_distance().min() >= CLAMP_FRACTION * raw.h:
        assert mesh.clamped_count == 0
        assert np.array_equal(mesh.bp_xy, raw.bp_xy)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_clamp_on_random_shapes(seed):
    rng = np.random.default_rng(seed)
    alpha = (1.0,) + tuple(0.05 * rng.uniform(-1, 1, 6))
    shape = BoundaryShape(alpha=alpha)
    layout = geometry.default_layout(shape, count=8, length=0.2)
    mesh = build_mesh(shape, layout, (-2.0, 2.0), h=0.05)
    d = mesh.bp_inner_distance()
    floor = CLAMP_FRACTION * mesh.h * (1 - 1e-9)
    assert d.min() >= floor
    assert (mesh.h - d).min() >= floor


def test_relabel_keeps_classification():
    shape = geometry.SMALL_DISK
    layout = geometry.equally_spaced_layout(4, -3 * math.pi / 4, 0.5)
    mesh = build_mesh(shape, layout, (-1.0, 1.0), h=0.02)
    moved = geometry.equally_spaced_layout(4, -3 * math.pi / 4 + 0.1, 0.5)
    relabeled = relabel_electrodes(mesh, moved)
    assert relabeled.bp_xy is mesh.bp_xy
    assert np.array_equal(relabeled.region, mesh.region)
    assert relabeled.layout == moved
    assert not np.array_equal(relabeled.bp_electrode, mesh.bp_electrode)


def test_mesh_summary_counts(unit_disk_mesh):
    summary = mesh_summary(unit_disk_mesh)
    assert summary.interior_nodes == 9
    assert summary.unknowns == unit_disk_mesh.n_unknowns
    assert summary.rim_nodes == 4 * 8
    assert len(summary.electrode_points) == 16
    assert summary.interior_nodes + summary.exterior_nodes + summary.rim_nodes == 81
