"""
Ω_e 上の一様直交格子と境界点

格子点 (i, j) は x_i = a + i·h, y_j = a + j·h。配列は [i, j] の順で
x 方向を第1軸に持つ。格子線分と ∂Ω の交点を境界点とし、それぞれに
未知数を1つ割り当てる。∂Ω_e 上の格子点（外周）はディリクレ条件 u_e = 0
で消去するので未知数を持たない。
"""

from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Tuple
import logging
import math

import numpy as np

from models.eit_model import SHAPE_SAMPLES, BoundaryShape, ElectrodeLayout, MeshSummary
from models.errors import GeometryError, MeshResolutionError
from services import geometry

logger = logging.getLogger(__name__)

# 格子点の区分コード
RIM = -1
EXTERIOR = 0
INTERIOR = 1

# 近傍の種類
GRID = 0
BOUNDARY = 1
DIRICHLET = 2

HORIZONTAL = 0
VERTICAL = 1

CLAMP_FRACTION = 1e-3
SCAN_SUBDIVISIONS = 64
BISECTION_STEPS = 60
DIRECTIONS = ("E", "W", "N", "S")


class Neighbor(NamedTuple):
    """ある方向の最近接未知数"""
    direction: str
    kind: int
    index: int
    distance: float


@dataclass
class CartesianMesh:
    """分類済みの格子と境界点、未知数の番号付け"""
    shape: BoundaryShape
    layout: ElectrodeLayout
    lower: float
    upper: float
    resolution: int
    region: np.ndarray
    node_index: np.ndarray
    hbp: np.ndarray
    vbp: np.ndarray
    bp_xy: np.ndarray
    bp_theta: np.ndarray
    bp_orientation: np.ndarray
    bp_inner: np.ndarray
    bp_outer: np.ndarray
    bp_normal: np.ndarray
    bp_electrode: np.ndarray
    bp_clamped: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))

    @property
    def h(self) -> float:
        return (self.upper - self.lower) / self.resolution

    @property
    def coords(self) -> np.ndarray:
        return self.lower + self.h * np.arange(self.resolution + 1)

    @property
    def n_interior(self) -> int:
        return int(np.count_nonzero(self.region == INTERIOR))

    @property
    def n_exterior(self) -> int:
        return int(np.count_nonzero(self.region == EXTERIOR))

    @property
    def n_boundary(self) -> int:
        return len(self.bp_theta)

    @property
    def n_electrodes(self) -> int:
        return self.layout.count

    @property
    def boundary_offset(self) -> int:
        return self.n_interior + self.n_exterior

    @property
    def electrode_offset(self) -> int:
        return self.boundary_offset + self.n_boundary

    @property
    def n_unknowns(self) -> int:
        return self.electrode_offset + self.n_electrodes

    @property
    def irregular(self) -> np.ndarray:
        """境界点を直接の近傍に持つ格子点"""
        flags = np.zeros_like(self.region, dtype=bool)
        has_h = self.hbp >= 0
        has_v = self.vbp >= 0
        flags[:-1, :] |= has_h
        flags[1:, :] |= has_h
        flags[:, :-1] |= has_v
        flags[:, 1:] |= has_v
        return flags & (self.region != RIM)

    @property
    def clamped_count(self) -> int:
        return int(np.count_nonzero(self.bp_clamped))

    def interior_nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        """未知数番号順の内部格子点 (I, J)"""
        return self._nodes_of(INTERIOR)

    def exterior_nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._nodes_of(EXTERIOR)

    def _nodes_of(self, code: int) -> Tuple[np.ndarray, np.ndarray]:
        I, J = np.nonzero(self.region == code)
        order = np.argsort(self.node_index[I, J], kind="stable")
        return I[order], J[order]

    def node_xy(self, I: np.ndarray, J: np.ndarray) -> np.ndarray:
        x = self.coords
        return np.stack([x[I], x[J]], axis=-1)

    def grid_index(self, x: float, y: float) -> Tuple[int, int]:
        """座標に一致する格子点の添字"""
        i = int(round((x - self.lower) / self.h))
        j = int(round((y - self.lower) / self.h))
        if not (0 <= i <= self.resolution and 0 <= j <= self.resolution):
            raise GeometryError(f"点 ({x}, {y}) は格子の外です")
        return i, j

    def boundary_slot(self, k) -> np.ndarray:
        return self.boundary_offset + np.asarray(k)

    def electrode_slot(self, m: int) -> int:
        return self.electrode_offset + m

    def electrode_points(self, m: int) -> np.ndarray:
        """電極 m に属する境界点の番号"""
        return np.flatnonzero(self.bp_electrode == m)

    def bp_inner_distance(self) -> np.ndarray:
        """境界点と内側の格子点との距離"""
        inner_xy = self.node_xy(self.bp_inner[:, 0], self.bp_inner[:, 1])
        return np.abs(self.bp_xy - inner_xy).sum(axis=1)


def _segment_data(inside: np.ndarray, orientation: int):
    if orientation == HORIZONTAL:
        crossing = inside[:-1, :] != inside[1:, :]
        step = np.array([1, 0])
    else:
        crossing = inside[:, :-1] != inside[:, 1:]
        step = np.array([0, 1])
    I, J = np.nonzero(crossing)
    return crossing, np.stack([I, J], axis=1), step


def _check_margin(shape: BoundaryShape, lower: float, upper: float, h: float) -> None:
    theta = np.linspace(0.0, 2.0 * math.pi, SHAPE_SAMPLES, endpoint=False)
    pts = geometry.frame(shape, theta).point
    margin = 2.0 * h
    if pts.min() < lower + margin or pts.max() > upper - margin:
        raise GeometryError(
            f"Ω が Ω_e=[{lower}, {upper}]² の内側に余白 2h={margin:.4g} を持って収まっていません"
        )


def _resolve_resolution(lower: float, upper: float, h: Optional[float], resolution: Optional[int]) -> int:
    if resolution is not None:
        if resolution < 2:
            raise GeometryError(f"分割数が小さすぎます: {resolution}")
        return int(resolution)
    if h is None or h <= 0:
        raise GeometryError("h または resolution を指定してください")
    n = int(round((upper - lower) / h))
    if n < 2 or abs(n * h - (upper - lower)) > 1e-9 * (upper - lower):
        raise GeometryError(f"h={h} は領域幅 {upper - lower} を割り切りません")
    return n


def _scan_band(shape: BoundaryShape, coords: np.ndarray, level: np.ndarray, h: float) -> None:
    """帯状領域の線分を h/64 刻みで走査し、2回以上の符号変化を検出する"""
    theta = np.linspace(0.0, 2.0 * math.pi, SHAPE_SAMPLES, endpoint=False)
    r = geometry.radius(shape, theta)
    slope = 1.0 + np.abs(geometry.radius_deriv(shape, theta)).max() / r.min()
    band = 1.5 * slope * h
    t = np.linspace(0.0, 1.0, SCAN_SUBDIVISIONS + 1)
    for orientation in (HORIZONTAL, VERTICAL):
        if orientation == HORIZONTAL:
            near = (np.abs(level[:-1, :]) <= band) | (np.abs(level[1:, :]) <= band)
        else:
            near = (np.abs(level[:, :-1]) <= band) | (np.abs(level[:, 1:]) <= band)
        I, J = np.nonzero(near)
        if len(I) == 0:
            continue
        x0 = coords[I]
        y0 = coords[J]
        if orientation == HORIZONTAL:
            pts = np.stack([x0[:, None] + t * h, np.broadcast_to(y0[:, None], (len(I), len(t)))], axis=-1)
        else:
            pts = np.stack([np.broadcast_to(x0[:, None], (len(I), len(t))), y0[:, None] + t * h], axis=-1)
        inside = geometry.is_inside(shape, pts)
        changes = np.count_nonzero(inside[:, 1:] != inside[:, :-1], axis=1)
        bad = np.flatnonzero(changes > 1)
        if len(bad):
            k = bad[0]
            raise MeshResolutionError(
                f"under-resolved geometry: 線分 ({x0[k]:.4f}, {y0[k]:.4f}) が ∂Ω と {changes[k]} 回交差します。"
                f"h={h:.4g} より小さい h を指定してください"
            )


def _bisect(shape: BoundaryShape, p0: np.ndarray, p1: np.ndarray, start_inside: np.ndarray) -> np.ndarray:
    """線分 p0→p1 上の φ の根をベクトル化した二分法で求め、パラメータ t を返す"""
    lo = np.zeros(len(p0))
    hi = np.ones(len(p0))
    direction = p1 - p0
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        inside = geometry.boundary_level(shape, p0 + mid[:, None] * direction) <= 0.0
        same = inside == start_inside
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def label_electrodes(layout: ElectrodeLayout, theta: np.ndarray) -> np.ndarray:
    """境界点の角度から電極番号（電極外は -1）を付ける"""
    labels = np.full(len(theta), -1, dtype=int)
    for m in range(layout.count):
        span = layout.theta2[m] - layout.theta1[m]
        mask = geometry.arc_offset(layout, m, theta) <= span
        labels[mask & (labels < 0)] = m
    return labels


def build_mesh(shape: BoundaryShape, layout: ElectrodeLayout, extent: Tuple[float, float],
               h: Optional[float] = None, resolution: Optional[int] = None,
               clamp: bool = True) -> CartesianMesh:
    """
    格子を作り、点を分類し、境界点を求める

    Args:
        shape: 境界形状
        layout: 電極配置
        extent: Ω_e = [a, b]² の (a, b)
        h: 格子幅（resolution と排他的）
        resolution: 1辺の分割数

    Returns:
        CartesianMesh（clamp=True なら退化した境界点を補正済み）
    """
    lower, upper = float(extent[0]), float(extent[1])
    if not upper > lower:
        raise GeometryError(f"不正な領域: [{lower}, {upper}]")
    n = _resolve_resolution(lower, upper, h, resolution)
    step = (upper - lower) / n
    _check_margin(shape, lower, upper, step)

    coords = lower + step * np.arange(n + 1)
    X, Y = np.meshgrid(coords, coords, indexing="ij")
    nodes = np.stack([X, Y], axis=-1)
    level = geometry.boundary_level(shape, nodes)
    inside = geometry.is_inside(shape, nodes)
    _scan_band(shape, coords, level, step)

    region = np.where(inside, INTERIOR, EXTERIOR).astype(np.int8)
    region[0, :] = region[-1, :] = region[:, 0] = region[:, -1] = RIM

    hbp = np.full((n, n + 1), -1, dtype=int)
    vbp = np.full((n + 1, n), -1, dtype=int)
    xy_parts, orient_parts, inner_parts, outer_parts = [], [], [], []
    count = 0
    for orientation, table in ((HORIZONTAL, hbp), (VERTICAL, vbp)):
        _, starts, offset = _segment_data(inside, orientation)
        if len(starts) == 0:
            continue
        ends = starts + offset
        start_inside = inside[starts[:, 0], starts[:, 1]]
        p0 = nodes[starts[:, 0], starts[:, 1]]
        p1 = nodes[ends[:, 0], ends[:, 1]]
        t = _bisect(shape, p0, p1, start_inside)
        xy_parts.append(p0 + t[:, None] * (p1 - p0))
        orient_parts.append(np.full(len(t), orientation, dtype=np.int8))
        inner_parts.append(np.where(start_inside[:, None], starts, ends))
        outer_parts.append(np.where(start_inside[:, None], ends, starts))
        table[starts[:, 0], starts[:, 1]] = count + np.arange(len(t))
        count += len(t)

    if count == 0:
        raise MeshResolutionError("境界点が見つかりません。h を小さくしてください")
    bp_xy = np.concatenate(xy_parts)
    bp_theta = geometry.polar_angle(bp_xy)

    node_index = np.full(region.shape, -1, dtype=int)
    interior = np.flatnonzero(region.ravel() == INTERIOR)
    exterior = np.flatnonzero(region.ravel() == EXTERIOR)
    flat = node_index.ravel()
    flat[interior] = np.arange(len(interior))
    flat[exterior] = len(interior) + np.arange(len(exterior))

    mesh = CartesianMesh(
        shape=shape,
        layout=layout,
        lower=lower,
        upper=upper,
        resolution=n,
        region=region,
        node_index=flat.reshape(region.shape),
        hbp=hbp,
        vbp=vbp,
        bp_xy=bp_xy,
        bp_theta=bp_theta,
        bp_orientation=np.concatenate(orient_parts),
        bp_inner=np.concatenate(inner_parts),
        bp_outer=np.concatenate(outer_parts),
        bp_normal=geometry.frame(shape, bp_theta).normal,
        bp_electrode=label_electrodes(layout, bp_theta),
        bp_clamped=np.zeros(count, dtype=bool),
    )
    if clamp:
        mesh = clamp_degenerate(mesh)
    logger.info(
        f"格子を作成: h={mesh.h:.5g}, 内部 {mesh.n_interior}, 外部 {mesh.n_exterior}, "
        f"境界点 {mesh.n_boundary}, 未知数 {mesh.n_unknowns}, 補正 {mesh.clamped_count}"
    )
    return mesh


def clamp_degenerate(mesh: CartesianMesh) -> CartesianMesh:
    """
    格子点から 1e-3·h 未満の境界点を線分に沿って 1e-3·h の位置へ移す
    """
    h = mesh.h
    floor = CLAMP_FRACTION * h
    inner_xy = mesh.node_xy(mesh.bp_inner[:, 0], mesh.bp_inner[:, 1])
    outer_xy = mesh.node_xy(mesh.bp_outer[:, 0], mesh.bp_outer[:, 1])
    d_inner = np.abs(mesh.bp_xy - inner_xy).sum(axis=1)
    too_close_in = d_inner < floor
    too_close_out = (h - d_inner) < floor
    moved = too_close_in | too_close_out
    if not moved.any():
        return mesh
    unit = (outer_xy - inner_xy) / h
    target = np.where(too_close_in, floor, h - floor)
    bp_xy = mesh.bp_xy.copy()
    bp_xy[moved] = inner_xy[moved] + target[moved, None] * unit[moved]
    bp_theta = geometry.polar_angle(bp_xy)
    logger.info(f"格子点に近すぎる境界点を {int(moved.sum())} 個補正しました")
    return replace(
        mesh,
        bp_xy=bp_xy,
        bp_theta=bp_theta,
        bp_normal=geometry.frame(mesh.shape, bp_theta).normal,
        bp_electrode=label_electrodes(mesh.layout, bp_theta),
        bp_clamped=mesh.bp_clamped | moved,
    )


def relabel_electrodes(mesh: CartesianMesh, layout: ElectrodeLayout) -> CartesianMesh:
    """格子の分類を流用し、電極の所属だけ付け直す"""
    return replace(mesh, layout=layout, bp_electrode=label_electrodes(layout, mesh.bp_theta))


def direction_neighbors(mesh: CartesianMesh, I: np.ndarray, J: np.ndarray, direction: str):
    """
    格子点群の指定方向の近傍をまとめて返す

    Returns:
        (kind, index, distance)。kind は GRID / BOUNDARY / DIRICHLET、
        index は未知数番号（DIRICHLET では -1）
    """
    I = np.asarray(I)
    J = np.asarray(J)
    h = mesh.h
    coords = mesh.coords
    if direction == "E":
        seg = mesh.hbp[I, J]
        ni, nj, axis, sign = I + 1, J, 0, 1.0
    elif direction == "W":
        seg = mesh.hbp[I - 1, J]
        ni, nj, axis, sign = I - 1, J, 0, -1.0
    elif direction == "N":
        seg = mesh.vbp[I, J]
        ni, nj, axis, sign = I, J + 1, 1, 1.0
    elif direction == "S":
        seg = mesh.vbp[I, J - 1]
        ni, nj, axis, sign = I, J - 1, 1, -1.0
    else:
        raise ValueError(f"不明な方向: {direction}")

    own = coords[I] if axis == 0 else coords[J]
    has_bp = seg >= 0
    neighbor_region = mesh.region[ni, nj]
    kind = np.where(has_bp, BOUNDARY, np.where(neighbor_region == RIM, DIRICHLET, GRID))
    index = np.where(has_bp, mesh.boundary_offset + seg, mesh.node_index[ni, nj])
    index = np.where(kind == DIRICHLET, -1, index)
    bp_coord = mesh.bp_xy[np.maximum(seg, 0), axis]
    distance = np.where(has_bp, sign * (bp_coord - own), h)
    return kind, index, distance


def neighbors(mesh: CartesianMesh, i: int, j: int) -> List[Neighbor]:
    """格子点 (i, j) の E, W, N, S 方向の最近接未知数"""
    if mesh.region[i, j] == RIM:
        raise GeometryError(f"外周の格子点 ({i}, {j}) は未知数ではありません")
    result = []
    for direction in DIRECTIONS:
        kind, index, distance = direction_neighbors(mesh, np.array([i]), np.array([j]), direction)
        result.append(Neighbor(direction, int(kind[0]), int(index[0]), float(distance[0])))
    return result


def mesh_summary(mesh: CartesianMesh) -> MeshSummary:
    """格子の分類統計"""
    return MeshSummary(
        h=mesh.h,
        resolution=mesh.resolution,
        interior_nodes=mesh.n_interior,
        exterior_nodes=mesh.n_exterior,
        rim_nodes=int(np.count_nonzero(mesh.region == RIM)),
        irregular_nodes=int(np.count_nonzero(mesh.irregular)),
        boundary_points=mesh.n_boundary,
        electrode_points=[int(len(mesh.electrode_points(m))) for m in range(mesh.n_electrodes)],
        clamped_points=mesh.clamped_count,
        unknowns=mesh.n_unknowns,
    )
