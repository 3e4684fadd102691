"""
導電率の再構成

F(σ) = ½‖𝓤(σ, 𝓘) − 𝓤_meas‖²_F + (ϵ/2)‖σ − σ★‖²_{H¹} を、
随伴型の降下方向と黄金分割の直線探索で最小化する。
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple
import logging
import math
import time

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse import linalg as spla

from models.eit_model import (
    BoundaryShape, CurrentPatterns, ElectrodeLayout, GroundMode, Inclusion, InversionHistoryRow, StopReason,
)
from models.errors import EITError
from services import geometry
from services.cartesian_mesh import DIRECTIONS, DIRICHLET, CartesianMesh, build_mesh, direction_neighbors
from services.conductivity_field import (
    ConstantConductivity, InclusionConductivity, PerturbedConductivity, perturbation_weights, sample_field,
)
from services.forward_solver import (
    ForwardSolution, adjacent_patterns, ground_measurements, solve_patterns,
)
from services.sparse_solve import Factorization, SolverSettings, factorize
from services.system_assembly import (
    DEFAULT_EPSILON, AssembledSystem, Conductivity, assemble, edge_midpoints, elliptic_triplets,
)

logger = logging.getLogger(__name__)

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
# これ以下の ‖δσ‖ は降下方向なしとみなす
DIRECTION_FLOOR = 1e-14


@dataclass(frozen=True)
class InversionSettings:
    """再構成の設定"""
    reg_weight: float = 1e-4
    tau_stop: float = 1e-8
    max_iter: int = 50
    t_max: float = 10.0
    sigma_min: float = 1e-3
    line_search_rtol: float = 1e-3
    line_search_evals: int = 40
    epsilon: float = DEFAULT_EPSILON
    solver: Optional[SolverSettings] = None


@dataclass
class Evaluation:
    """σ での順問題の結果と F"""
    delta: np.ndarray
    F: float
    misfit: float
    system: AssembledSystem
    fact: Factorization
    measurements: np.ndarray
    solutions: List[ForwardSolution]


@dataclass(frozen=True)
class EdgeSensitivity:
    """内部格子点の行の各辺：行・近傍の未知数番号、1/(d·h)、中点の補間行列"""
    rows: np.ndarray
    neighbors: np.ndarray
    scale: np.ndarray
    weights: sparse.csr_matrix


def edge_sensitivity(mesh: CartesianMesh) -> EdgeSensitivity:
    """σ が A_h に入る辺の中点と、δ からその中点の値への補間行列"""
    I, J = mesh.interior_nodes()
    rows = mesh.node_index[I, J]
    parts = []
    for direction in DIRECTIONS:
        kind, index, distance = direction_neighbors(mesh, I, J, direction)
        mid = edge_midpoints(mesh, I, J, direction, distance)
        parts.append((rows, np.where(kind == DIRICHLET, -1, index), 1.0 / (distance * mesh.h), mid))
    return EdgeSensitivity(
        rows=np.concatenate([p[0] for p in parts]),
        neighbors=np.concatenate([p[1] for p in parts]),
        scale=np.concatenate([p[2] for p in parts]),
        weights=perturbation_weights(mesh, np.concatenate([p[3] for p in parts])),
    )


@dataclass
class InversionState:
    n: int
    delta: np.ndarray
    F: float
    history: List[InversionHistoryRow] = field(default_factory=list)
    stop_reason: Optional[StopReason] = None

    @property
    def converged(self) -> bool:
        return self.stop_reason not in (None, StopReason.MAX_ITER)


def immersed_laplacian(mesh: CartesianMesh) -> sparse.csr_matrix:
    """
    内部格子点上の −Δ（σ≡1 の楕円型行から境界点の列を落とした行列）

    境界点では値 0（ディリクレ）として扱う。格子点同士の係数は対称。
    """
    I, J = mesh.interior_nodes()
    rows, cols, vals = elliptic_triplets(mesh, I, J, None)
    keep = cols < mesh.n_interior
    n = mesh.n_interior
    return sparse.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()


def adjoint_currents(residual: np.ndarray, ground_mode: GroundMode = GroundMode.FIRST_ELECTRODE) -> np.ndarray:
    """
    残差を R^M_⋄ へ射影した随伴問題の電流

    U₁ = 0 の接地では r − (Σr)e₁、⟨U⟩ = 0 の接地では r − mean(r)𝟙。
    """
    residual = np.array(residual, dtype=float)
    if GroundMode(ground_mode) == GroundMode.FIRST_ELECTRODE:
        residual[0] -= residual.sum(axis=0)
        return residual
    return residual - residual.mean(axis=0, keepdims=True)


def add_noise(clean: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    """
    𝓤 + δ(‖𝓤‖_F/‖G‖_F)G（G は標準正規、第1行は 0 にして接地を保つ）
    """
    clean = np.asarray(clean, dtype=float)
    if level == 0:
        return clean.copy()
    G = rng.standard_normal(clean.shape)
    G[0, :] = 0.0
    return clean + level * (np.linalg.norm(clean) / np.linalg.norm(G)) * G


def golden_section(func: Callable[[float], float], lower: float, upper: float,
                   rtol: float = 1e-3, max_evals: int = 40) -> Tuple[float, float, int]:
    """
    (lower, upper) 上の黄金分割探索

    Returns:
        (評価した中で最良の t, その値, 評価回数)
    """
    a, b = lower, upper
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = func(c), func(d)
    evals = 2
    best_t, best_f = (c, fc) if fc <= fd else (d, fd)
    width = rtol * (upper - lower)
    while (b - a) > width and evals < max_evals:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = func(c)
            t, f = c, fc
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = func(d)
            t, f = d, fd
        evals += 1
        if f < best_f:
            best_t, best_f = t, f
    return best_t, best_f, evals


class ConductivityInversion:
    """固定格子上での σ の再構成"""

    def __init__(self, mesh: CartesianMesh, patterns: CurrentPatterns, measurements: np.ndarray,
                 background: Conductivity, settings: Optional[InversionSettings] = None):
        self.logger = logging.getLogger(__name__)
        self.mesh = mesh
        self.patterns = patterns
        self.measurements = np.asarray(measurements, dtype=float)
        self.background = background
        self.settings = settings or InversionSettings()
        expected = (mesh.n_electrodes, patterns.pattern_count)
        if self.measurements.shape != expected:
            raise ValueError(f"測定行列の形状 {self.measurements.shape} が {expected} と一致しません")
        if np.abs(self.measurements[0]).max(initial=0.0) > 0:
            self.logger.warning("測定行列の第1行が 0 ではありません。接地し直して使います")
            self.measurements = ground_measurements(self.measurements)
        self.K = immersed_laplacian(mesh)
        self.H = (sparse.identity(mesh.n_interior, format="csr") + self.K).tocsc()
        self._h_solve = spla.factorized(self.H)
        self.background_nodes = sample_field(background, mesh)
        self.edges = edge_sensitivity(mesh)

    def conductivity(self, delta: np.ndarray) -> PerturbedConductivity:
        return PerturbedConductivity(self.background, self.mesh, delta)

    def h1_norm_sq(self, d: np.ndarray) -> float:
        """離散 H¹₀ ノルムの2乗 h²(dᵀd + dᵀKd)"""
        return self.mesh.h ** 2 * float(d @ d + d @ (self.K @ d))

    def l2_norm(self, d: np.ndarray) -> float:
        return self.mesh.h * float(np.linalg.norm(d))

    def evaluate(self, delta: np.ndarray) -> Evaluation:
        """σ★ + δ で P 本の順問題を解き F を求める"""
        delta = np.asarray(delta, dtype=float)
        system = assemble(self.mesh, self.conductivity(delta), epsilon=self.settings.epsilon)
        fact = factorize(system, self.settings.solver)
        Umat, solutions = solve_patterns(system, fact, self.patterns, compatible=True)
        Umat = ground_measurements(Umat)
        misfit = 0.5 * float(np.sum((Umat - self.measurements) ** 2))
        F = misfit + 0.5 * self.settings.reg_weight * self.h1_norm_sq(delta)
        return Evaluation(delta, F, misfit, system, fact, Umat, solutions)

    def objective(self, delta: np.ndarray) -> float:
        return self.evaluate(delta).F

    def adjoint_states(self, ev: Evaluation) -> List[np.ndarray]:
        """
        A_hᵀλ^p = (電極行に射影した残差) を同じ分解で解く

        A_h·𝟙 が接地項だけなので ε·λ^p_{U₁} = 𝟙ᵀ(射影した残差) = 0 となり、1/ε 規模の成分は現れない。
        """
        mesh = self.mesh
        currents = adjoint_currents(ev.measurements - self.measurements)
        states = []
        for p in range(currents.shape[1]):
            rhs = np.zeros(mesh.n_unknowns)
            rhs[mesh.electrode_offset:] = currents[:, p]
            states.append(ev.fact.solve_transpose(rhs) if rhs.any() else rhs)
        return states

    def misfit_density(self, ev: Evaluation) -> np.ndarray:
        """
        q = −∇_δ(½‖𝓤 − 𝓤_meas‖²)/h²（内部格子点）

        ∂F/∂δ_k = −Σ_p λ^pᵀ(∂A_h/∂δ_k)x^p。δ は楕円型行の辺の中点の σ にしか現れないので、
        辺ごとの λ_row(x_row − x_nb)/(d·h) を補間行列の転置で格子点へ戻す。
        """
        edges = self.edges
        flux = np.zeros(len(edges.rows))
        for u, lam in zip(ev.solutions, self.adjoint_states(ev)):
            x = u.values
            neighbor = np.where(edges.neighbors >= 0, x[np.maximum(edges.neighbors, 0)], 0.0)
            flux += lam[edges.rows] * (x[edges.rows] - neighbor)
        return edges.weights.T @ (flux * edges.scale) / self.mesh.h ** 2

    def gradient_rhs(self, ev: Evaluation) -> np.ndarray:
        """q − ϵ(I + K)d：H¹₀ 勾配の右辺"""
        q = self.misfit_density(ev)
        return q - self.settings.reg_weight * (self.H @ ev.delta)

    def descent_direction(self, ev: Evaluation) -> Tuple[np.ndarray, np.ndarray]:
        """
        (I + K)v = q − ϵ(I + K)d を解いた降下方向 v（境界点で 0）

        Returns:
            (v, 右辺)
        """
        rhs = self.gradient_rhs(ev)
        if not rhs.any():
            return np.zeros_like(rhs), rhs
        return self._h_solve(rhs), rhs

    def predicted_slope(self, rhs: np.ndarray, direction: np.ndarray) -> float:
        """方向 e に沿った F の微分 −h² eᵀ(q − ϵ(I+K)d)"""
        return -self.mesh.h ** 2 * float(np.asarray(direction) @ rhs)

    def step_cap(self, delta: np.ndarray, direction: np.ndarray) -> float:
        """T = min(t_max, σ + tδσ ≥ σ_min を保つ最大の t)"""
        sigma = self.background_nodes + delta
        falling = direction < 0
        T = self.settings.t_max
        if falling.any():
            room = (sigma[falling] - self.settings.sigma_min) / (-direction[falling])
            T = min(T, float(room.min()))
        return max(T, 0.0)

    def line_search(self, delta: np.ndarray, direction: np.ndarray, T: float,
                    F0: float) -> Tuple[float, Optional[Evaluation]]:
        """
        (0, T) 上で F(σ + tδσ) を黄金分割で最小化する

        どの t でも F が下がらなければ t = 0 を返す。
        """
        if T <= 0 or not direction.any():
            return 0.0, None
        best: List = [0.0, None]

        def trial(t: float) -> float:
            try:
                ev = self.evaluate(delta + t * direction)
            except EITError as e:
                self.logger.debug(f"t={t:.4g} の評価に失敗: {str(e)}")
                return math.inf
            if best[1] is None or ev.F < best[1].F:
                best[0], best[1] = t, ev
            return ev.F

        t, F, evals = golden_section(trial, 0.0, T, rtol=self.settings.line_search_rtol,
                                     max_evals=self.settings.line_search_evals)
        self.logger.debug(f"直線探索: t={t:.4g}, F={F:.6e}, 評価 {evals} 回")
        if best[1] is None or not best[1].F < F0:
            return 0.0, None
        return float(best[0]), best[1]

    def _check_positive(self, delta: np.ndarray) -> None:
        low = float((self.background_nodes + delta).min())
        if low < self.settings.sigma_min * (1.0 - 1e-12):
            raise EITError(f"σ が下限 {self.settings.sigma_min} を下回りました: {low:.4g}")

    def reconstruct(self, initial: Optional[np.ndarray] = None) -> InversionState:
        """降下と直線探索を停止条件まで繰り返す"""
        settings = self.settings
        delta = np.zeros(self.mesh.n_interior) if initial is None else np.asarray(initial, dtype=float).copy()
        self._check_positive(delta)
        ev = self.evaluate(delta)
        state = InversionState(n=0, delta=delta, F=ev.F)
        self.logger.info(f"再構成開始: F₀={ev.F:.6e}, 未知数={self.mesh.n_interior}, P={self.patterns.pattern_count}")

        for n in range(settings.max_iter):
            started = time.perf_counter()
            v, _ = self.descent_direction(ev)
            norm = self.l2_norm(v)
            if norm <= DIRECTION_FLOOR:
                state.history.append(InversionHistoryRow(n=n, F=state.F, t_n=0.0, norm_dsigma=norm))
                state.stop_reason = StopReason.SMALL_GRADIENT
                break
            T = self.step_cap(state.delta, v)
            t, new_ev = self.line_search(state.delta, v, T, state.F)
            state.history.append(InversionHistoryRow(n=n, F=state.F, t_n=t, norm_dsigma=norm))
            self.logger.info(
                f"反復 {n}: F={state.F:.6e}, t={t:.4g} (T={T:.4g}), ‖δσ‖={norm:.3e} "
                f"({time.perf_counter() - started:.1f}s)"
            )
            if t == 0.0 or new_ev is None:
                state.stop_reason = StopReason.NO_STEP
                break
            change = abs(new_ev.F - state.F)
            state.delta = new_ev.delta
            self._check_positive(state.delta)
            state.F = new_ev.F
            state.n = n + 1
            ev = new_ev
            if change < settings.tau_stop * norm:
                state.stop_reason = StopReason.CONVERGED
                break
        else:
            state.stop_reason = StopReason.MAX_ITER
            self.logger.warning(f"反復上限 {settings.max_iter} に達しました")

        self.logger.info(f"再構成終了: n={state.n}, F={state.F:.6e}, 理由={state.stop_reason.value}")
        return state

    def directional_derivative_check(self, delta: np.ndarray, direction: Optional[np.ndarray] = None,
                                     t: float = 1e-4) -> Tuple[float, float]:
        """
        予測される方向微分と F の中心差分商を比べる

        direction を省略すると降下方向 v を使い、予測値は −‖v‖²_{H¹}。
        """
        delta = np.asarray(delta, dtype=float)
        ev = self.evaluate(delta)
        v, rhs = self.descent_direction(ev)
        if direction is None:
            direction = v
        direction = np.asarray(direction, dtype=float)
        predicted = self.predicted_slope(rhs, direction)
        finite_difference = (self.objective(delta + t * direction) - self.objective(delta - t * direction)) / (2 * t)
        return predicted, finite_difference

    def field_grid(self, delta: np.ndarray) -> np.ndarray:
        """σ の格子表示（外部・外周は NaN）"""
        mesh = self.mesh
        grid = np.full(mesh.region.shape, np.nan)
        I, J = mesh.interior_nodes()
        grid[I, J] = self.background_nodes + delta
        return grid


@dataclass(frozen=True)
class InclusionFixture:
    """既知の介在物をもつ再構成の試験問題"""
    name: str
    shape: BoundaryShape
    layout: ElectrodeLayout
    extent: Tuple[float, float]
    truth: InclusionConductivity

    @property
    def background(self) -> ConstantConductivity:
        return ConstantConductivity(self.truth.background)

    @property
    def patterns(self) -> CurrentPatterns:
        return adjacent_patterns(self.layout.count)


def _fixture(name: str, shape: BoundaryShape, inclusions: Sequence[Inclusion]) -> InclusionFixture:
    return InclusionFixture(
        name=name,
        shape=shape,
        layout=geometry.default_layout(shape),
        extent=(-2.0, 2.0),
        truth=InclusionConductivity(background=1.0, inclusions=tuple(inclusions)),
    )


def center_inclusion() -> InclusionFixture:
    """Ω₁ の中心に円形介在物1つ"""
    return _fixture("center", geometry.OMEGA1, [Inclusion(center=(0.0, 0.0), radius=0.5, amplitude=1.0)])


def boundary_inclusion() -> InclusionFixture:
    """境界寄りの介在物1つ"""
    return _fixture("near_boundary", geometry.OMEGA1, [Inclusion(center=(0.8, 0.3), radius=0.4, amplitude=1.0)])


def two_inclusions() -> InclusionFixture:
    """Ω₃ に振幅の異なる介在物2つ"""
    return _fixture("two_inclusions", geometry.OMEGA3, [
        Inclusion(center=(-0.6, 0.4), radius=0.45, amplitude=1.0),
        Inclusion(center=(0.6, -0.4), radius=0.45, amplitude=0.5),
    ])


FIXTURES = {
    "center": center_inclusion,
    "near_boundary": boundary_inclusion,
    "two_inclusions": two_inclusions,
}


def synthetic_measurements(shape: BoundaryShape, layout: ElectrodeLayout, extent: Tuple[float, float],
                           sigma: Conductivity, patterns: CurrentPatterns, resolution: int,
                           epsilon: float = DEFAULT_EPSILON,
                           settings: Optional[SolverSettings] = None) -> np.ndarray:
    """格子 resolution で 𝓤 を計算し、各列を接地して返す"""
    mesh = build_mesh(shape, layout, extent, resolution=resolution)
    system = assemble(mesh, sigma, epsilon=epsilon)
    Umat, _ = solve_patterns(system, factorize(system, settings), patterns, compatible=True)
    return ground_measurements(Umat)


def inclusion_centroid(mesh: CartesianMesh, delta: np.ndarray) -> Optional[np.ndarray]:
    """δ をその最大値の半分でしきい値処理した領域の重心"""
    delta = np.asarray(delta, dtype=float)
    peak = delta.max(initial=0.0)
    if peak <= 0:
        return None
    I, J = mesh.interior_nodes()
    mask = delta >= 0.5 * peak
    return mesh.node_xy(I[mask], J[mask]).mean(axis=0)


def local_maxima(mesh: CartesianMesh, delta: np.ndarray, radius: float = 0.3,
                 min_fraction: float = 0.3) -> List[Tuple[float, float, float]]:
    """
    δ の局所最大 (x, y, 値) を値の降順で返す

    最大値の min_fraction 倍未満のピークは捨てる。
    """
    grid = np.full(mesh.region.shape, -np.inf)
    I, J = mesh.interior_nodes()
    grid[I, J] = delta
    size = 2 * max(1, int(round(radius / mesh.h))) + 1
    filtered = ndimage.maximum_filter(grid, size=size, mode="constant", cval=-np.inf)
    peak = float(np.max(delta, initial=0.0))
    if peak <= 0:
        return []
    pi, pj = np.nonzero((grid == filtered) & (grid >= min_fraction * peak))
    coords = mesh.coords
    found = sorted(((float(coords[i]), float(coords[j]), float(grid[i, j])) for i, j in zip(pi, pj)),
                   key=lambda item: -item[2])
    return found
