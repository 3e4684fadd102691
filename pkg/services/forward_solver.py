"""
順問題ソルバー

格子・A_h・分解を1度だけ作り、ソース（f, g, I）を変えて何度でも解く。
製造解からのソース生成、適合条件の残差、数値勾配もここで扱う。
"""

from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math
import time

import numpy as np
import pandas as pd
from scipy import integrate

from models.eit_model import (
    BoundaryShape, CurrentPatterns, ElectrodeLayout, GroundMode, PointRegion,
)
from models.errors import AssemblyError
from services import geometry
from services.cartesian_mesh import (
    BOUNDARY, DIRICHLET, EXTERIOR, INTERIOR, CartesianMesh, build_mesh, direction_neighbors,
)
from services.sparse_solve import Factorization, SolverSettings, factorize, solve_many
from services.system_assembly import (
    DEFAULT_EPSILON, AssembledSystem, Conductivity, SourceData, assemble, boundary_admittivity, ground_vector,
)

logger = logging.getLogger(__name__)

Field = Callable[[np.ndarray], np.ndarray]


@dataclass
class ForwardSolution:
    """離散解（全未知数のベクトル）と格子"""
    mesh: CartesianMesh
    values: np.ndarray
    grad: Optional[np.ndarray] = None

    @property
    def u_interior(self) -> np.ndarray:
        return self.values[:self.mesh.n_interior]

    @property
    def u_exterior(self) -> np.ndarray:
        return self.values[self.mesh.n_interior:self.mesh.boundary_offset]

    @property
    def u_boundary(self) -> np.ndarray:
        return self.values[self.mesh.boundary_offset:self.mesh.electrode_offset]

    @property
    def U(self) -> np.ndarray:
        return self.values[self.mesh.electrode_offset:]

    def grid_values(self) -> np.ndarray:
        """格子上の u（外周はディリクレ値 0）"""
        mesh = self.mesh
        grid = np.zeros(mesh.region.shape)
        mask = mesh.node_index >= 0
        grid[mask] = self.values[mesh.node_index[mask]]
        return grid

    def regrounded(self, mode: GroundMode = GroundMode.FIRST_ELECTRODE) -> "ForwardSolution":
        """U₁ = 0（または ⟨U⟩ = 0）となるよう定数をずらした解"""
        return replace(self, values=self.values - ground_offset(self.U, mode), grad=self.grad)


def ground_offset(U: np.ndarray, mode: GroundMode = GroundMode.FIRST_ELECTRODE) -> float:
    U = np.asarray(U, dtype=float)
    if GroundMode(mode) == GroundMode.FIRST_ELECTRODE:
        return float(U[0])
    return float(U.mean())


def ground_measurements(Umat: np.ndarray, mode: GroundMode = GroundMode.FIRST_ELECTRODE) -> np.ndarray:
    """測定行列の各列を接地する（既定では第1行を 0 に）"""
    Umat = np.asarray(Umat, dtype=float)
    if GroundMode(mode) == GroundMode.FIRST_ELECTRODE:
        return Umat - Umat[:1, :]
    return Umat - Umat.mean(axis=0, keepdims=True)


@dataclass(frozen=True)
class ManufacturedSolution:
    """解析的な u とその勾配・ラプラシアン"""
    name: str
    value: Field
    gradient: Field
    laplacian: Field


def _xy(points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    points = np.asarray(points, dtype=float)
    return points[..., 0], points[..., 1]


def sin_xy() -> ManufacturedSolution:
    """u = sin(xy)"""
    def value(p):
        x, y = _xy(p)
        return np.sin(x * y)

    def gradient(p):
        x, y = _xy(p)
        c = np.cos(x * y)
        return np.stack([y * c, x * c], axis=-1)

    def laplacian(p):
        x, y = _xy(p)
        return -(x * x + y * y) * np.sin(x * y)

    return ManufacturedSolution("sin_xy", value, gradient, laplacian)


def exp_r2() -> ManufacturedSolution:
    """u = exp(x² + y²)"""
    def value(p):
        x, y = _xy(p)
        return np.exp(x * x + y * y)

    def gradient(p):
        x, y = _xy(p)
        e = np.exp(x * x + y * y)
        return np.stack([2 * x * e, 2 * y * e], axis=-1)

    def laplacian(p):
        x, y = _xy(p)
        r2 = x * x + y * y
        return (4.0 + 4.0 * r2) * np.exp(r2)

    return ManufacturedSolution("exp_r2", value, gradient, laplacian)


def constant(c: float = 1.0) -> ManufacturedSolution:
    def value(p):
        return np.full(np.shape(p)[:-1], c, dtype=float)

    def gradient(p):
        return np.zeros(np.shape(p), dtype=float)

    def laplacian(p):
        return np.zeros(np.shape(p)[:-1], dtype=float)

    return ManufacturedSolution("constant", value, gradient, laplacian)


def affine(a: float, b: float, c: float) -> ManufacturedSolution:
    """u = a + bx + cy"""
    def value(p):
        x, y = _xy(p)
        return a + b * x + c * y

    def gradient(p):
        grad = np.zeros(np.shape(p), dtype=float)
        grad[..., 0] = b
        grad[..., 1] = c
        return grad

    def laplacian(p):
        return np.zeros(np.shape(p)[:-1], dtype=float)

    return ManufacturedSolution("affine", value, gradient, laplacian)


MANUFACTURED = {
    "sin_xy": sin_xy,
    "exp_r2": exp_r2,
    "constant": constant,
}


def manufactured_from_name(name: str, constant_value: float = 1.0) -> ManufacturedSolution:
    if name == "constant":
        return constant(constant_value)
    if name not in MANUFACTURED:
        raise KeyError(f"不明な製造解: {name}（{sorted(MANUFACTURED)}）")
    return MANUFACTURED[name]()


def _sigma_gradient(sigma: Conductivity, points: np.ndarray) -> np.ndarray:
    grad = getattr(sigma, "gradient", None)
    if grad is None:
        raise AssemblyError("製造解には勾配を持つ導電率が必要です")
    return grad(points)


def manufacture_sources(mesh: CartesianMesh, sigma: Conductivity, exact: ManufacturedSolution,
                        U_exact: Sequence[float]) -> SourceData:
    """
    製造解 (u, U) から f, g, I を作る

    f = −∇·(σ∇u)、g = σ∇u·ν + ξ(u − U_m)（電極外は σ∇u·ν）、
    I_m は電極の弧上で σ∇u·ν を適応求積して得る。
    """
    U_exact = np.asarray(U_exact, dtype=float)
    if U_exact.shape != (mesh.n_electrodes,):
        raise AssemblyError(f"U_exact の長さが電極数と一致しません: {U_exact.shape}")
    I, J = mesh.interior_nodes()
    nodes = mesh.node_xy(I, J)
    f = -(sigma(nodes) * exact.laplacian(nodes)
          + (_sigma_gradient(sigma, nodes) * exact.gradient(nodes)).sum(axis=-1))

    bp = mesh.bp_xy
    flux = sigma(bp) * (exact.gradient(bp) * mesh.bp_normal).sum(axis=-1)
    xi = boundary_admittivity(mesh)
    on = mesh.bp_electrode >= 0
    g = flux.copy()
    g[on] += xi[on] * (exact.value(bp[on]) - U_exact[mesh.bp_electrode[on]])

    shape = mesh.shape

    def density(theta: float) -> float:
        fr = geometry.frame(shape, theta)
        p = fr.point[None, :]
        return float(sigma(p)[0] * (exact.gradient(p)[0] @ fr.normal) * fr.rho)

    currents = np.array([
        integrate.quad(density, t1, t2, epsabs=1e-12, epsrel=1e-12, limit=200)[0]
        for t1, t2 in zip(mesh.layout.theta1, mesh.layout.theta2)
    ])
    return SourceData(f=f, g=g, I=currents)


def boundary_weights(mesh: CartesianMesh) -> np.ndarray:
    """∂Ω 全体の境界点に対する周期的な台形則の重み"""
    order = np.argsort(mesh.bp_theta, kind="stable")
    theta = np.linspace(-math.pi, math.pi, 8193)
    cumulative = integrate.cumulative_simpson(geometry.speed(mesh.shape, theta), x=theta, initial=0.0)
    perimeter = cumulative[-1]
    s = np.interp(mesh.bp_theta[order], theta, cumulative)
    ext = np.concatenate([[s[-1] - perimeter], s, [s[0] + perimeter]])
    weights = np.empty(len(s))
    weights[order] = 0.5 * (ext[2:] - ext[:-2])
    return weights


@dataclass(frozen=True)
class CompatibilityReport:
    """適合条件の残差 s と補正後の電流"""
    residual: float
    corrected_I: np.ndarray


def compatibility_residual(mesh: CartesianMesh, sources: SourceData) -> CompatibilityReport:
    """
    s = Σ I_m + ∫_Ω f + ∫_{E_c} g を格子和と境界の台形則で評価する
    """
    interior_integral = mesh.h ** 2 * float(sources.f.sum())
    gap = mesh.bp_electrode < 0
    gap_integral = float(boundary_weights(mesh)[gap] @ sources.g[gap])
    s = float(sources.I.sum()) + interior_integral + gap_integral
    corrected = sources.I.copy()
    corrected[0] -= s
    return CompatibilityReport(residual=s, corrected_I=corrected)


def ground_functional(mesh: CartesianMesh, mode: GroundMode) -> np.ndarray:
    """接地オフセット φ(x)（U₁ または ⟨U⟩）を表すベクトル"""
    phi = np.zeros(mesh.n_unknowns)
    if GroundMode(mode) == GroundMode.FIRST_ELECTRODE:
        phi[mesh.electrode_slot(0)] = 1.0
    else:
        phi[mesh.electrode_offset:] = 1.0 / mesh.n_electrodes
    return phi


def compatible_rhs(system: AssembledSystem, fact: Factorization, rhs_list: Sequence[np.ndarray]) -> List[np.ndarray]:
    """
    離散的な適合条件を満たすよう電極行を補正した右辺

    A_h·𝟙 = (接地項) なので、b − φ(A_h⁻¹b)·(接地項) の解は CEM 側で
    元の解から定数 φ(A_h⁻¹b) を引いたものになり、1/ε 規模の定数を経由しない。
    """
    y = fact.solve_transpose(ground_functional(system.mesh, system.ground_mode))
    gv = ground_vector(system)
    return [b - float(y @ b) * gv for b in rhs_list]


def solve_forward(system: AssembledSystem, fact: Factorization, sources: SourceData) -> ForwardSolution:
    """内部の CEM と外部ラプラス問題の連成系を解く"""
    values = fact.solve(system.rhs(sources))
    return ForwardSolution(mesh=system.mesh, values=values)


def _axis_derivative(mesh: CartesianMesh, values: np.ndarray, I: np.ndarray, J: np.ndarray,
                     plus: str, minus: str):
    own = values[mesh.node_index[I, J]]
    kp, ip, dp = direction_neighbors(mesh, I, J, plus)
    km, im, dm = direction_neighbors(mesh, I, J, minus)
    up = np.where(kp == DIRICHLET, 0.0, values[np.maximum(ip, 0)])
    um = np.where(km == DIRICHLET, 0.0, values[np.maximum(im, 0)])
    bp_p = kp == BOUNDARY
    bp_m = km == BOUNDARY
    h = mesh.h
    deriv = (up - um) / (2.0 * h)
    only_p = bp_p & ~bp_m
    only_m = bp_m & ~bp_p
    both = bp_p & bp_m
    deriv = np.where(only_p, (up - own) / dp, deriv)
    deriv = np.where(only_m, (own - um) / dm, deriv)
    deriv = np.where(both, (up - um) / (dp + dm), deriv)
    return deriv, ~(bp_p | bp_m)


def numerical_gradient(mesh: CartesianMesh, solution: ForwardSolution,
                       interior_only: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """
    格子点ごとの (∂x u, ∂y u)

    同じ側の格子点に挟まれていれば中心差分、境界点が隣にあれば
    その境界点と実際の距離を使う片側差分。∂Ω をまたいだ差分はしない。

    Returns:
        (grad, regular)：grad は (N+1, N+1, 2)（外周は NaN）、
        regular は中心差分だけで求まった点のマスク
    """
    values = solution.values
    shape = mesh.region.shape
    grad = np.full(shape + (2,), np.nan)
    regular = np.zeros(shape, dtype=bool)
    for code in ((INTERIOR,) if interior_only else (INTERIOR, EXTERIOR)):
        I, J = np.nonzero(mesh.region == code)
        if not len(I):
            continue
        gx, rx = _axis_derivative(mesh, values, I, J, "E", "W")
        gy, ry = _axis_derivative(mesh, values, I, J, "N", "S")
        grad[I, J, 0] = gx
        grad[I, J, 1] = gy
        regular[I, J] = rx & ry
    return grad, regular


def solve_patterns(system: AssembledSystem, fact: Factorization, patterns: CurrentPatterns,
                   compatible: bool = False) -> Tuple[np.ndarray, List[ForwardSolution]]:
    """
    電流パターンごとに f = g = 0 の順問題を解く

    compatible=True では右辺を compatible_rhs で補正する（接地後の U は同じ）。

    Returns:
        (M×P の電極電位行列, パターンごとの解)
    """
    mesh = system.mesh
    if patterns.electrode_count != mesh.n_electrodes:
        raise AssemblyError(
            f"電流パターンの電極数 {patterns.electrode_count} が配置の電極数 {mesh.n_electrodes} と一致しません"
        )
    matrix = patterns.matrix
    rhs = [system.rhs(SourceData.currents(mesh, matrix[:, p])) for p in range(patterns.pattern_count)]
    if compatible:
        rhs = compatible_rhs(system, fact, rhs)
    values = solve_many(fact, rhs)
    solutions = [ForwardSolution(mesh=mesh, values=v) for v in values]
    Umat = np.column_stack([s.U for s in solutions])
    return Umat, solutions


def adjacent_patterns(count: int) -> CurrentPatterns:
    """隣接ペア I^p = e_p − e_{p+1}（p = 1..M−1）"""
    matrix = np.zeros((count, count - 1))
    for p in range(count - 1):
        matrix[p, p] = 1.0
        matrix[p + 1, p] = -1.0
    return CurrentPatterns.from_matrix(matrix, [f"adjacent_{p + 1}" for p in range(count - 1)])


def alternating_pattern(count: int) -> CurrentPatterns:
    """I_m = (−1)^m（m は 1 始まり）"""
    column = np.array([(-1.0) ** m for m in range(1, count + 1)])
    return CurrentPatterns.from_matrix(column[:, None], ["alternating"])


def pair_pattern(count: int, source: int, sink: int) -> CurrentPatterns:
    """I_m = δ_{m,source} − δ_{m,sink}（1 始まり）"""
    if not (1 <= source <= count and 1 <= sink <= count) or source == sink:
        raise ValueError(f"不正な電極番号: source={source}, sink={sink}, M={count}")
    column = np.zeros(count)
    column[source - 1] = 1.0
    column[sink - 1] = -1.0
    return CurrentPatterns.from_matrix(column[:, None], [f"pair_{source}_{sink}"])


class ForwardSolver:
    """形状・電極・導電率・格子を固定した順問題サービス"""

    def __init__(self, mesh: CartesianMesh, sigma: Conductivity,
                 ground_mode: GroundMode = GroundMode.FIRST_ELECTRODE,
                 epsilon: float = DEFAULT_EPSILON,
                 settings: Optional[SolverSettings] = None):
        self.logger = logging.getLogger(__name__)
        self.mesh = mesh
        self.sigma = sigma
        started = time.perf_counter()
        self.system = assemble(mesh, sigma, ground_mode=ground_mode, epsilon=epsilon)
        self.fact = factorize(self.system, settings)
        self.setup_seconds = time.perf_counter() - started
        self.logger.info(f"順問題の準備完了: n={self.system.size}, {self.setup_seconds:.2f}s")

    @classmethod
    def build(cls, shape: BoundaryShape, layout: ElectrodeLayout, extent: Tuple[float, float],
              sigma: Conductivity, h: Optional[float] = None, resolution: Optional[int] = None,
              ground_mode: GroundMode = GroundMode.FIRST_ELECTRODE, epsilon: float = DEFAULT_EPSILON,
              settings: Optional[SolverSettings] = None) -> "ForwardSolver":
        mesh = build_mesh(shape, layout, extent, h=h, resolution=resolution)
        return cls(mesh, sigma, ground_mode=ground_mode, epsilon=epsilon, settings=settings)

    @property
    def ground_mode(self) -> GroundMode:
        return self.system.ground_mode

    def solve(self, sources: SourceData) -> ForwardSolution:
        return solve_forward(self.system, self.fact, sources)

    def solve_currents(self, currents: Sequence[float]) -> ForwardSolution:
        return self.solve(SourceData.currents(self.mesh, np.asarray(currents, dtype=float)))

    def solve_patterns(self, patterns: CurrentPatterns,
                       compatible: bool = False) -> Tuple[np.ndarray, List[ForwardSolution]]:
        return solve_patterns(self.system, self.fact, patterns, compatible=compatible)

    def measurements(self, patterns: CurrentPatterns) -> np.ndarray:
        """接地済みの測定行列（M×P）"""
        Umat, _ = self.solve_patterns(patterns, compatible=True)
        return ground_measurements(Umat, self.ground_mode)


def epsilon_invariance(shape: BoundaryShape, layout: ElectrodeLayout, extent: Tuple[float, float],
                       sigma: Conductivity, exact: ManufacturedSolution, U_exact: Sequence[float],
                       h: float, epsilons: Tuple[float, float] = (1e-10, 1e-6)) -> Dict[str, float]:
    """
    ε を変えた2回の求解で、接地後の U の差と U₁ を比べる
    """
    mesh = build_mesh(shape, layout, extent, h=h)
    sources = manufacture_sources(mesh, sigma, exact, U_exact)
    grounded = []
    report: Dict[str, float] = {}
    for eps in epsilons:
        solver = ForwardSolver(mesh, sigma, epsilon=eps)
        solution = solver.solve(sources)
        report[f"eps_u1_{eps:.0e}"] = eps * float(solution.U[0])
        grounded.append(solution.U - solution.U[0])
    report["max_grounded_difference"] = float(np.abs(grounded[0] - grounded[1]).max())
    return report


def field_frame(solution: ForwardSolution) -> pd.DataFrame:
    """x,y,region,u の表（内部・外部の格子点と境界点）"""
    mesh = solution.mesh
    frames = []
    for code, label in ((INTERIOR, PointRegion.INTERIOR), (EXTERIOR, PointRegion.EXTERIOR)):
        I, J = mesh.interior_nodes() if code == INTERIOR else mesh.exterior_nodes()
        xy = mesh.node_xy(I, J)
        frames.append(pd.DataFrame({
            "x": xy[:, 0], "y": xy[:, 1], "region": label.value,
            "u": solution.values[mesh.node_index[I, J]],
        }))
    frames.append(pd.DataFrame({
        "x": mesh.bp_xy[:, 0], "y": mesh.bp_xy[:, 1], "region": PointRegion.BOUNDARY.value,
        "u": solution.u_boundary,
    }))
    return pd.concat(frames, ignore_index=True)
