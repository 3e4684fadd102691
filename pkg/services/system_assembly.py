"""
連成問題（内部の CEM + 外部ラプラス問題）の疎行列組み立て

未知数の並びは格子の番号付けに従う：
内部格子点、外部格子点、境界点、電極電位の順。
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple
import logging
import time

import numpy as np
from scipy import integrate, sparse

from models.eit_model import GroundMode
from models.errors import AssemblyError, FluxStencilError, QuadratureError
from services import geometry
from services.cartesian_mesh import (
    BOUNDARY, DIRECTIONS, DIRICHLET, EXTERIOR, HORIZONTAL, INTERIOR,
    CartesianMesh, direction_neighbors,
)

logger = logging.getLogger(__name__)

Conductivity = Callable[[np.ndarray], np.ndarray]

DEFAULT_EPSILON = 1e-10
DEGENERATE_AREA = 1e-12
ARC_SAMPLES = 2049


@dataclass
class SourceData:
    """体積源 f（内部格子点）、境界源 g（境界点）、電極電流 I"""
    f: np.ndarray
    g: np.ndarray
    I: np.ndarray

    def __post_init__(self):
        self.f = np.asarray(self.f, dtype=float)
        self.g = np.asarray(self.g, dtype=float)
        self.I = np.asarray(self.I, dtype=float)
        for name in ("f", "g", "I"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise AssemblyError(f"ソース {name} に有限でない値があります")

    @classmethod
    def zeros(cls, mesh: CartesianMesh) -> "SourceData":
        return cls(np.zeros(mesh.n_interior), np.zeros(mesh.n_boundary), np.zeros(mesh.n_electrodes))

    @classmethod
    def currents(cls, mesh: CartesianMesh, I: np.ndarray) -> "SourceData":
        """f = g = 0 で電流だけ与える"""
        I = np.asarray(I, dtype=float)
        if I.shape != (mesh.n_electrodes,):
            raise AssemblyError(f"電流ベクトルの長さが電極数 {mesh.n_electrodes} と一致しません: {I.shape}")
        return cls(np.zeros(mesh.n_interior), np.zeros(mesh.n_boundary), I)


class FluxStencil(NamedTuple):
    """境界点ごとの三角形と線形補間の勾配係数"""
    vertices: np.ndarray
    unknowns: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray


@dataclass(frozen=True)
class ElectrodeQuadrature:
    """電極上の求積点（境界点）と重み"""
    electrode: int
    points: np.ndarray
    positions: np.ndarray
    weights: np.ndarray
    length: float


@dataclass
class AssembledSystem:
    """A_h と右辺の組み立てに必要な情報"""
    matrix: sparse.csr_matrix
    mesh: CartesianMesh
    ground_mode: GroundMode
    epsilon: float
    quadrature: List[ElectrodeQuadrature]
    assembly_seconds: float = 0.0

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    def rhs(self, sources: SourceData) -> np.ndarray:
        """SourceData から右辺ベクトルを作る"""
        mesh = self.mesh
        if sources.f.shape != (mesh.n_interior,) or sources.g.shape != (mesh.n_boundary,) \
                or sources.I.shape != (mesh.n_electrodes,):
            raise AssemblyError(
                f"ソースの形状が格子と一致しません: f{sources.f.shape}, g{sources.g.shape}, I{sources.I.shape}"
            )
        b = np.zeros(self.size)
        b[:mesh.n_interior] = sources.f
        b[mesh.boundary_offset:mesh.electrode_offset] = sources.g
        for quad in self.quadrature:
            b[mesh.electrode_slot(quad.electrode)] = sources.I[quad.electrode] - quad.weights @ sources.g[quad.points]
        return b


def assemble_rhs(system: AssembledSystem, sources: SourceData) -> np.ndarray:
    return system.rhs(sources)


def _check_sigma(values: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise AssemblyError(f"導電率が正でない点があります（{where}）: min={np.nanmin(values):.4g}")
    return values


def edge_midpoints(mesh: CartesianMesh, I: np.ndarray, J: np.ndarray, direction: str,
                   distance: np.ndarray) -> np.ndarray:
    """格子点から direction 方向の近傍（格子点または境界点）までの辺の中点"""
    axis = 0 if direction in ("E", "W") else 1
    sign = 1.0 if direction in ("E", "N") else -1.0
    mid = mesh.node_xy(I, J)
    mid[:, axis] += sign * 0.5 * distance
    return mid


def elliptic_triplets(mesh: CartesianMesh, I: np.ndarray, J: np.ndarray, sigma: Optional[Conductivity]):
    """5点ステンシルの係数を (row, col, value) で返す。sigma=None は σ≡1"""
    rows = mesh.node_index[I, J]
    h = mesh.h
    diag = np.zeros(len(I))
    parts_r, parts_c, parts_v = [], [], []
    for direction in DIRECTIONS:
        kind, index, distance = direction_neighbors(mesh, I, J, direction)
        if sigma is None:
            s = np.ones(len(I))
        else:
            mid = edge_midpoints(mesh, I, J, direction, distance)
            s = _check_sigma(sigma(mid), f"方向 {direction} の中点")
        coeff = s / (distance * h)
        diag += coeff
        keep = kind != DIRICHLET
        parts_r.append(rows[keep])
        parts_c.append(index[keep])
        parts_v.append(-coeff[keep])
    parts_r.append(rows)
    parts_c.append(rows)
    parts_v.append(diag)
    return np.concatenate(parts_r), np.concatenate(parts_c), np.concatenate(parts_v)


def _row_dict(rows: np.ndarray, cols: np.ndarray, vals: np.ndarray) -> Dict[int, float]:
    out: Dict[int, float] = {}
    for c, v in zip(cols, vals):
        out[int(c)] = out.get(int(c), 0.0) + float(v)
    return out


def assemble_elliptic_row(mesh: CartesianMesh, sigma: Optional[Conductivity], i: int, j: int) -> Dict[int, float]:
    """
    格子点 (i, j) の楕円型行を {列: 係数} で返す

    外部の点では σ≡1（ラプラス方程式）。外周のディリクレ近傍は右辺 0 として落とす。
    """
    region = mesh.region[i, j]
    if region not in (INTERIOR, EXTERIOR):
        raise AssemblyError(f"格子点 ({i}, {j}) は未知数を持ちません")
    use = sigma if region == INTERIOR else None
    return _row_dict(*elliptic_triplets(mesh, np.array([i]), np.array([j]), use))


def _cell_edges(mesh: CartesianMesh, ks: np.ndarray):
    """境界点を含む線分に接する2セルの、その線分以外の6辺（格子添字の組）"""
    inner = mesh.bp_inner[ks]
    outer = mesh.bp_outer[ks]
    start = np.minimum(inner, outer)
    horizontal = mesh.bp_orientation[ks] == HORIZONTAL
    e = np.where(horizontal[:, None], [1, 0], [0, 1])
    p = np.where(horizontal[:, None], [0, 1], [1, 0])
    a0 = start
    a1 = start + e
    edges = [
        (a0, a0 + p), (a0 + p, a1 + p), (a1, a1 + p),
        (a0, a0 - p), (a0 - p, a1 - p), (a1, a1 - p),
    ]
    return edges


def _edge_bp(mesh: CartesianMesh, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """格子辺 a–b 上の境界点番号（なければ -1）"""
    lo = np.minimum(a, b)
    horizontal = a[:, 1] == b[:, 1]
    hi_h = np.minimum(lo[:, 0], mesh.hbp.shape[0] - 1)
    hi_v = np.minimum(lo[:, 1], mesh.vbp.shape[1] - 1)
    from_h = mesh.hbp[hi_h, lo[:, 1]]
    from_v = mesh.vbp[lo[:, 0], hi_v]
    return np.where(horizontal, from_h, from_v)


def flux_stencils(mesh: CartesianMesh, ks: Optional[np.ndarray] = None) -> FluxStencil:
    """
    境界点から −ν 方向に半直線を伸ばし、最初に当たる格子辺で三角形を決める

    辺の端点が外部の点なら、その辺上の境界点で置き換える。
    三角形上の線形補間の勾配を (∇u)^h = Σ_j u_j (α_j, β_j) として返す。
    """
    if ks is None:
        ks = np.arange(mesh.n_boundary)
    ks = np.asarray(ks, dtype=int)
    count = len(ks)
    h = mesh.h
    P = mesh.bp_xy[ks]
    d = -mesh.bp_normal[ks]
    coords = mesh.coords

    best_s = np.full(count, np.inf)
    best_v = np.zeros((count, 2, 2))
    best_u = np.full((count, 2), -1, dtype=int)

    for a, b in _cell_edges(mesh, ks):
        ra = mesh.region[a[:, 0], a[:, 1]]
        rb = mesh.region[b[:, 0], b[:, 1]]
        valid = (ra == INTERIOR) | (rb == INTERIOR)
        A = np.stack([coords[a[:, 0]], coords[a[:, 1]]], axis=1)
        B = np.stack([coords[b[:, 0]], coords[b[:, 1]]], axis=1)
        e = B - A
        det = e[:, 0] * d[:, 1] - e[:, 1] * d[:, 0]
        rhs = A - P
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (e[:, 0] * rhs[:, 1] - e[:, 1] * rhs[:, 0]) / det
            tau = (d[:, 0] * rhs[:, 1] - d[:, 1] * rhs[:, 0]) / det
        tol = 1e-12
        hit = valid & (np.abs(det) > tol * h) & (s > tol * h) & (tau >= -tol) & (tau <= 1.0 + tol)
        better = hit & (s < best_s)
        if not better.any():
            continue
        edge_bp = _edge_bp(mesh, a, b)
        va, ua = A.copy(), mesh.node_index[a[:, 0], a[:, 1]].copy()
        vb, ub = B.copy(), mesh.node_index[b[:, 0], b[:, 1]].copy()
        a_out = ra != INTERIOR
        b_out = rb != INTERIOR
        slot = mesh.boundary_offset + edge_bp
        va[a_out] = mesh.bp_xy[edge_bp[a_out]]
        ua[a_out] = slot[a_out]
        vb[b_out] = mesh.bp_xy[edge_bp[b_out]]
        ub[b_out] = slot[b_out]
        best_s[better] = s[better]
        best_v[better, 0] = va[better]
        best_v[better, 1] = vb[better]
        best_u[better, 0] = ua[better]
        best_u[better, 1] = ub[better]

    missing = ~np.isfinite(best_s)
    if missing.any():
        k = ks[np.flatnonzero(missing)[0]]
        raise FluxStencilError(
            f"flux stencil degenerate; refine h（境界点 {k} {tuple(np.round(mesh.bp_xy[k], 6))} で内側の辺が見つかりません）"
        )

    x1, y1 = P[:, 0], P[:, 1]
    x2, y2 = best_v[:, 0, 0], best_v[:, 0, 1]
    x3, y3 = best_v[:, 1, 0], best_v[:, 1, 1]
    D = (x2 - x1) * (y3 - y1) - (x3 - x1) * (y2 - y1)
    degenerate = np.abs(D) < DEGENERATE_AREA * h * h
    if degenerate.any():
        k = ks[np.flatnonzero(degenerate)[0]]
        raise FluxStencilError(
            f"flux stencil degenerate; refine h（境界点 {k} {tuple(np.round(mesh.bp_xy[k], 6))}）"
        )
    alpha = np.stack([(y2 - y3) / D, (y3 - y1) / D, (y1 - y2) / D], axis=1)
    beta = np.stack([(x3 - x2) / D, (x1 - x3) / D, (x2 - x1) / D], axis=1)
    vertices = np.concatenate([P[:, None, :], best_v], axis=1)
    unknowns = np.concatenate([(mesh.boundary_offset + ks)[:, None], best_u], axis=1)
    return FluxStencil(vertices=vertices, unknowns=unknowns, alpha=alpha, beta=beta)


def flux_stencil(mesh: CartesianMesh, k: int) -> FluxStencil:
    """境界点 k 1つ分のフラックスステンシル"""
    stencil = flux_stencils(mesh, np.array([k]))
    return FluxStencil(*(part[0] for part in stencil))


def _flux_triplets(mesh: CartesianMesh, sigma: Conductivity, ks: np.ndarray, stencil: FluxStencil,
                   xi: np.ndarray):
    rows = mesh.boundary_offset + ks
    s = _check_sigma(sigma(mesh.bp_xy[ks]), "境界点")
    nu = mesh.bp_normal[ks]
    coeff = s[:, None] * (stencil.alpha * nu[:, :1] + stencil.beta * nu[:, 1:])
    parts_r = [np.repeat(rows, 3)]
    parts_c = [stencil.unknowns.ravel()]
    parts_v = [coeff.ravel()]
    electrode = mesh.bp_electrode[ks]
    on = electrode >= 0
    if on.any():
        parts_r += [rows[on], rows[on]]
        parts_c += [rows[on], mesh.electrode_offset + electrode[on]]
        parts_v += [xi[on], -xi[on]]
    return np.concatenate(parts_r), np.concatenate(parts_c), np.concatenate(parts_v)


def boundary_admittivity(mesh: CartesianMesh) -> np.ndarray:
    """各境界点の ξ（電極外は 0）"""
    return geometry.admittivity_values(mesh.layout, mesh.bp_electrode, mesh.bp_theta)


def assemble_flux_row(mesh: CartesianMesh, sigma: Conductivity, k: int) -> Dict[int, float]:
    """
    境界点 k のフラックス行 σ(∇u·ν)^h + ξ(u_k − U_m) を {列: 係数} で返す
    """
    ks = np.array([k])
    xi = boundary_admittivity(mesh)[ks]
    return _row_dict(*_flux_triplets(mesh, sigma, ks, flux_stencils(mesh, ks), xi))


def electrode_arc_positions(mesh: CartesianMesh, m: int) -> Tuple[np.ndarray, np.ndarray, float]:
    """
    電極 m の境界点を θ 順に並べ、Θ¹ からの弧長位置を返す

    Returns:
        (境界点番号, 弧長位置, 電極長)
    """
    layout = mesh.layout
    points = mesh.electrode_points(m)
    t1, t2 = layout.theta1[m], layout.theta2[m]
    offsets = geometry.arc_offset(layout, m, mesh.bp_theta[points])
    order = np.argsort(offsets, kind="stable")
    points = points[order]
    theta = np.linspace(t1, t2, ARC_SAMPLES)
    cumulative = integrate.cumulative_simpson(geometry.speed(mesh.shape, theta), x=theta, initial=0.0)
    positions = np.interp(t1 + offsets[order], theta, cumulative)
    return points, positions, float(cumulative[-1])


def electrode_quadrature(mesh: CartesianMesh, m: int) -> ElectrodeQuadrature:
    """
    電極 m 上の1次の求積：ω_P = (s_{P+1} − s_{P−1})/2（s_0 = 0, s_{n+1} = L）

    両端の点は [0, s_1] と [s_n, L] を丸ごと受け持つので Σ ω_P = L。
    """
    points, positions, length = electrode_arc_positions(mesh, m)
    if len(points) < 2:
        raise QuadratureError(
            f"electrode unresolved: 電極 {m + 1} の境界点が {len(points)} 個しかありません。h を小さくしてください"
        )
    gaps = np.diff(np.concatenate([[0.0], positions, [length]]))
    weights = 0.5 * (gaps[:-1] + gaps[1:])
    weights[0] += 0.5 * gaps[0]
    weights[-1] += 0.5 * gaps[-1]
    return ElectrodeQuadrature(electrode=m, points=points, positions=positions, weights=weights, length=length)


def _electrode_triplets(mesh: CartesianMesh, quad: ElectrodeQuadrature, xi: np.ndarray,
                        ground_mode: GroundMode, epsilon: float):
    m = quad.electrode
    row = mesh.electrode_slot(m)
    wx = quad.weights * xi[quad.points]
    if wx.sum() <= 0.0:
        raise QuadratureError(f"electrode unresolved: 電極 {m + 1} の求積点で ξ がすべて 0 です")
    rows = [np.full(len(quad.points), row), np.array([row])]
    cols = [mesh.boundary_offset + quad.points, np.array([row])]
    vals = [-wx, np.array([wx.sum()])]
    if ground_mode == GroundMode.FIRST_ELECTRODE:
        if m == 0:
            rows.append(np.array([row]))
            cols.append(np.array([row]))
            vals.append(np.array([epsilon]))
    else:
        slots = mesh.electrode_offset + np.arange(mesh.n_electrodes)
        rows.append(np.full(len(slots), row))
        cols.append(slots)
        vals.append(np.full(len(slots), epsilon))
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def assemble_electrode_row(mesh: CartesianMesh, m: int, ground_mode: GroundMode = GroundMode.FIRST_ELECTRODE,
                           epsilon: float = DEFAULT_EPSILON) -> Dict[int, float]:
    """
    電極 m の積分条件 Σ ω_P ξ(P)(U_m − u_P) + 接地項 を {列: 係数} で返す
    """
    quad = electrode_quadrature(mesh, m)
    return _row_dict(*_electrode_triplets(mesh, quad, boundary_admittivity(mesh), GroundMode(ground_mode), epsilon))


def assemble(mesh: CartesianMesh, sigma: Conductivity,
             ground_mode: GroundMode = GroundMode.FIRST_ELECTRODE,
             epsilon: float = DEFAULT_EPSILON) -> AssembledSystem:
    """
    A_h 全体を組み立てる

    Args:
        mesh: 格子
        sigma: Ω 内の導電率（外部は σ≡1 のラプラス方程式）
        ground_mode: 接地の方式
        epsilon: 接地パラメータ ε > 0
    """
    if epsilon <= 0:
        raise AssemblyError(f"ε は正である必要があります: {epsilon}")
    ground_mode = GroundMode(ground_mode)
    started = time.perf_counter()

    parts = []
    I, J = mesh.interior_nodes()
    if len(I):
        parts.append(elliptic_triplets(mesh, I, J, sigma))
    I, J = mesh.exterior_nodes()
    if len(I):
        parts.append(elliptic_triplets(mesh, I, J, None))

    ks = np.arange(mesh.n_boundary)
    xi = boundary_admittivity(mesh)
    parts.append(_flux_triplets(mesh, sigma, ks, flux_stencils(mesh, ks), xi))

    quadrature = [electrode_quadrature(mesh, m) for m in range(mesh.n_electrodes)]
    for quad in quadrature:
        parts.append(_electrode_triplets(mesh, quad, xi, ground_mode, epsilon))

    rows = np.concatenate([p[0] for p in parts])
    cols = np.concatenate([p[1] for p in parts])
    vals = np.concatenate([p[2] for p in parts])
    n = mesh.n_unknowns
    matrix = sparse.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    matrix.sum_duplicates()
    elapsed = time.perf_counter() - started
    logger.info(f"A_h を組み立て: n={n}, nnz={matrix.nnz}, 接地={ground_mode.value}, ε={epsilon:.1e} ({elapsed:.2f}s)")
    return AssembledSystem(
        matrix=matrix,
        mesh=mesh,
        ground_mode=ground_mode,
        epsilon=epsilon,
        quadrature=quadrature,
        assembly_seconds=elapsed,
    )


def cem_mask(mesh: CartesianMesh) -> np.ndarray:
    """CEM 側の未知数（内部格子点・境界点・電極）を示すマスク"""
    mask = np.ones(mesh.n_unknowns, dtype=bool)
    mask[mesh.n_interior:mesh.boundary_offset] = False
    return mask


def ground_vector(system: AssembledSystem) -> np.ndarray:
    """定数ベクトル 𝟙 に対する接地項 A_h·𝟙 の期待値"""
    mesh = system.mesh
    expected = np.zeros(system.size)
    if system.ground_mode == GroundMode.FIRST_ELECTRODE:
        expected[mesh.electrode_slot(0)] = system.epsilon
    else:
        expected[mesh.electrode_offset:] = system.epsilon * mesh.n_electrodes
    return expected


def constant_kernel_residual(system: AssembledSystem) -> np.ndarray:
    """
    CEM 側の行における A_h·𝟙 − (接地項)

    外周に接する外部の行は消去したディリクレ係数を持つので対象外。
    """
    residual = system.matrix @ np.ones(system.size) - ground_vector(system)
    return residual[cem_mask(system.mesh)]
