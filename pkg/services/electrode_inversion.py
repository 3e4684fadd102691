"""
電極位置（角度 Θ¹, Θ²）の再構成

F(Θ) = ½‖𝓤(Θ, 𝓘) − 𝓤_meas‖²_F + (ϵ/2)(‖Θ¹ − Θ¹★‖² + ‖Θ² − Θ²★‖²) を
サンプリング公式の勾配とバックトラッキング付き最急降下で最小化する。
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import math

import numpy as np
from pydantic import ValidationError

from models.eit_model import (
    BoundaryShape, CurrentPatterns, ElectrodeHistoryRow, ElectrodeLayout, ElectrodeMode, EndpointSide, StopReason,
)
from models.errors import EITError, QuadratureError
from services import geometry
from services.cartesian_mesh import CartesianMesh, build_mesh, relabel_electrodes
from services.conductivity_field import ConstantConductivity
from services.conductivity_inversion import adjoint_currents
from services.forward_solver import (
    ForwardSolution, adjacent_patterns, compatible_rhs, ground_measurements, solve_patterns,
)
from services.sparse_solve import Factorization, SolverSettings, factorize, solve_many
from services.system_assembly import (
    DEFAULT_EPSILON, AssembledSystem, Conductivity, SourceData, assemble, electrode_arc_positions,
)

logger = logging.getLogger(__name__)

# 有限差分で確かめた端点の符号（Θ¹ は電極を縮め、Θ² は広げる向き）
ENDPOINT_SIGNS = (1.0, -1.0)


def endpoint_potential(solution: ForwardSolution, m: int, side: EndpointSide) -> float:
    """
    電極 m の端点での u を、端に最も近い電極内の境界点2つから弧長で線形外挿する
    """
    mesh = solution.mesh
    points, positions, length = electrode_arc_positions(mesh, m)
    if len(points) < 2:
        raise QuadratureError(
            f"electrode unresolved: 電極 {m + 1} の境界点が {len(points)} 個しかなく端点値を外挿できません"
        )
    values = solution.u_boundary[points]
    if EndpointSide(side) == EndpointSide.START:
        s1, s2, u1, u2, target = positions[0], positions[1], values[0], values[1], 0.0
    else:
        s1, s2, u1, u2, target = positions[-1], positions[-2], values[-1], values[-2], length
    if s2 == s1:
        return float(0.5 * (u1 + u2))
    return float(u1 + (u2 - u1) * (target - s1) / (s2 - s1))


def endpoint_jumps(solution: ForwardSolution) -> np.ndarray:
    """(2, M) の U_m − u(x^k_m)"""
    mesh = solution.mesh
    jumps = np.zeros((2, mesh.n_electrodes))
    for m in range(mesh.n_electrodes):
        for k, side in enumerate((EndpointSide.START, EndpointSide.END)):
            jumps[k, m] = solution.U[m] - endpoint_potential(solution, m, side)
    return jumps


def endpoint_speeds(shape: BoundaryShape, layout: ElectrodeLayout) -> np.ndarray:
    """(2, M) の ρ(Θ^k_m)"""
    return np.vstack([geometry.speed(shape, np.asarray(layout.theta1)),
                      geometry.speed(shape, np.asarray(layout.theta2))])


def fixed_length_jacobian(shape: BoundaryShape, layout: ElectrodeLayout) -> np.ndarray:
    """∂Θ²_k/∂Θ¹_k = ρ(Θ¹_k)/ρ(Θ²_k)（非対角は 0）"""
    rho = endpoint_speeds(shape, layout)
    return rho[0] / rho[1]


def finite_difference_gradient(objective: Callable[[np.ndarray], float], angles: Sequence[float],
                               step: float = 1e-4) -> np.ndarray:
    """中心差分による勾配"""
    angles = np.asarray(angles, dtype=float)
    grad = np.zeros_like(angles)
    for i in range(len(angles)):
        e = np.zeros_like(angles)
        e[i] = step
        grad[i] = (objective(angles + e) - objective(angles - e)) / (2.0 * step)
    return grad


@dataclass(frozen=True)
class ElectrodeInversionSettings:
    """電極再構成の設定"""
    mode: ElectrodeMode = ElectrodeMode.FREE
    reg_weight: float = 1e-6
    max_iter: int = 100
    grad_tol: float = 1e-6
    step_tol: float = 1e-8
    initial_step: float = 0.1
    signs: Tuple[float, float] = ENDPOINT_SIGNS
    epsilon: float = DEFAULT_EPSILON
    solver: Optional[SolverSettings] = None


@dataclass
class ElectrodeEvaluation:
    angles: np.ndarray
    layout: ElectrodeLayout
    mesh: CartesianMesh
    system: AssembledSystem
    fact: Factorization
    measurements: np.ndarray
    solutions: List[ForwardSolution]
    F: float


@dataclass
class ElectrodeInversionState:
    n: int
    layout: ElectrodeLayout
    F: float
    gradient: np.ndarray
    history: List[ElectrodeHistoryRow] = field(default_factory=list)
    stop_reason: Optional[StopReason] = None


class ElectrodeInversion:
    """
    既知の σ と形状のもとで電極角を推定する

    ∂Ω の格子分類は1度だけ計算し、反復ごとに電極の所属だけ付け直す。
    """

    def __init__(self, shape: BoundaryShape, extent: Tuple[float, float], sigma: Conductivity,
                 patterns: CurrentPatterns, measurements: np.ndarray, prior: ElectrodeLayout,
                 h: Optional[float] = None, resolution: Optional[int] = None,
                 settings: Optional[ElectrodeInversionSettings] = None,
                 lengths: Optional[Sequence[float]] = None):
        self.logger = logging.getLogger(__name__)
        self.shape = shape
        self.sigma = sigma
        self.patterns = patterns
        self.measurements = ground_measurements(np.asarray(measurements, dtype=float))
        self.prior = prior
        self.settings = settings or ElectrodeInversionSettings()
        self.base_mesh = build_mesh(shape, prior, extent, h=h, resolution=resolution)
        self.count = prior.count
        if lengths is None:
            lengths = [arc.length for arc in geometry.electrode_arcs(shape, prior)]
        self.lengths = np.asarray(lengths, dtype=float)
        self.prior_vector = np.concatenate([prior.theta1, prior.theta2])

    @property
    def fixed_length(self) -> bool:
        return self.settings.mode == ElectrodeMode.FIXED_LENGTH

    def angles_of(self, layout: ElectrodeLayout) -> np.ndarray:
        """探索変数（自由なら [Θ¹, Θ²]、長さ固定なら Θ¹）"""
        if self.fixed_length:
            return np.asarray(layout.theta1, dtype=float)
        return np.concatenate([layout.theta1, layout.theta2])

    def layout_of(self, angles: np.ndarray) -> ElectrodeLayout:
        """探索変数から配置を作る（順序が崩れると ValidationError / GeometryError）"""
        angles = np.asarray(angles, dtype=float)
        prior = self.prior
        if self.fixed_length:
            return geometry.layout_from_length(self.shape, angles, self.lengths, z=prior.z,
                                               kind=prior.kind, support_fraction=prior.support_fraction)
        M = self.count
        return geometry.make_layout(angles[:M], angles[M:], z=prior.z, kind=prior.kind,
                                    support_fraction=prior.support_fraction)

    def evaluate_layout(self, layout: ElectrodeLayout) -> ElectrodeEvaluation:
        mesh = relabel_electrodes(self.base_mesh, layout)
        system = assemble(mesh, self.sigma, epsilon=self.settings.epsilon)
        fact = factorize(system, self.settings.solver)
        Umat, solutions = solve_patterns(system, fact, self.patterns, compatible=True)
        Umat = ground_measurements(Umat)
        theta = np.concatenate([layout.theta1, layout.theta2])
        F = 0.5 * float(np.sum((Umat - self.measurements) ** 2)) \
            + 0.5 * self.settings.reg_weight * float(np.sum((theta - self.prior_vector) ** 2))
        return ElectrodeEvaluation(self.angles_of(layout), layout, mesh, system, fact, Umat, solutions, F)

    def evaluate(self, angles: np.ndarray) -> ElectrodeEvaluation:
        return self.evaluate_layout(self.layout_of(angles))

    def objective(self, angles: np.ndarray) -> float:
        return self.evaluate(angles).F

    def sampling_terms(self, ev: ElectrodeEvaluation) -> np.ndarray:
        """
        Σ_p ρ(Θ^k_m)(U_m − u(x^k_m))(Ũ_m − ũ(x^k_m))（符号・正則化なし、(2, M)）

        Ũ は残差を R^M_⋄ に射影した電流での解で、同じ分解を使う。
        """
        mesh = ev.mesh
        residual = ev.measurements - self.measurements
        currents = adjoint_currents(residual)
        rhs = [ev.system.rhs(SourceData.currents(mesh, currents[:, p])) for p in range(currents.shape[1])]
        rhs = compatible_rhs(ev.system, ev.fact, rhs)
        adjoints = [ForwardSolution(mesh=mesh, values=v) for v in solve_many(ev.fact, rhs)]
        terms = np.zeros((2, self.count))
        for u, w in zip(ev.solutions, adjoints):
            terms += endpoint_jumps(u) * endpoint_jumps(w)
        return endpoint_speeds(self.shape, ev.layout) * terms

    def partial_gradient(self, ev: ElectrodeEvaluation, signs: Optional[Tuple[float, float]] = None) -> np.ndarray:
        """∂F/∂Θ¹ と ∂F/∂Θ² を並べた長さ 2M のベクトル"""
        signs = signs or self.settings.signs
        terms = self.sampling_terms(ev)
        theta = np.concatenate([ev.layout.theta1, ev.layout.theta2])
        reg = self.settings.reg_weight * (theta - self.prior_vector)
        return np.concatenate([signs[0] * terms[0], signs[1] * terms[1]]) + reg

    def sampling_gradient(self, ev: ElectrodeEvaluation) -> np.ndarray:
        """探索変数に対する勾配（長さ固定では連鎖律で Θ¹ にまとめる）"""
        partial = self.partial_gradient(ev)
        if not self.fixed_length:
            return partial
        M = self.count
        return partial[:M] + fixed_length_jacobian(self.shape, ev.layout) * partial[M:]

    def _history_row(self, n: int, ev: ElectrodeEvaluation, grad: np.ndarray, step: float) -> ElectrodeHistoryRow:
        return ElectrodeHistoryRow(
            n=n, F=ev.F, grad_norm=float(np.linalg.norm(grad)), step=step,
            theta1=list(ev.layout.theta1), theta2=list(ev.layout.theta2),
        )

    def reconstruct(self, start: ElectrodeLayout) -> ElectrodeInversionState:
        """
        バックトラッキング付き最急降下

        試行ステップは 0.1/‖∇F‖ から始め、F が下がるまで半分にする。
        電極の順序が崩れる試行は棄却する。
        """
        settings = self.settings
        ev = self.evaluate_layout(start)
        grad = self.sampling_gradient(ev)
        state = ElectrodeInversionState(n=0, layout=start, F=ev.F, gradient=grad)
        self.logger.info(f"電極再構成開始: F₀={ev.F:.6e}, モード={settings.mode.value}")
        alpha_prev = math.inf

        for n in range(settings.max_iter):
            gnorm = float(np.linalg.norm(grad))
            if gnorm < settings.grad_tol:
                state.history.append(self._history_row(n, ev, grad, 0.0))
                state.stop_reason = StopReason.SMALL_GRADIENT
                break
            alpha = min(settings.initial_step / gnorm, 2.0 * alpha_prev)
            accepted = None
            violations = trials = 0
            while alpha * gnorm >= settings.step_tol:
                trials += 1
                candidate = ev.angles - alpha * grad
                try:
                    trial = self.evaluate(candidate)
                except (ValidationError, EITError) as e:
                    violations += 1
                    self.logger.debug(f"試行ステップを棄却: {str(e).splitlines()[0]}")
                    alpha *= 0.5
                    continue
                if trial.F < ev.F:
                    accepted = trial
                    break
                alpha *= 0.5

            if accepted is None:
                state.history.append(self._history_row(n, ev, grad, 0.0))
                state.stop_reason = StopReason.ORDERING_VIOLATION if trials and violations == trials \
                    else StopReason.SMALL_STEP
                if state.stop_reason == StopReason.ORDERING_VIOLATION:
                    self.logger.warning("すべての試行ステップで電極の順序が崩れました")
                break

            step = alpha * gnorm
            state.history.append(self._history_row(n, ev, grad, step))
            self.logger.info(f"反復 {n}: F={ev.F:.6e} → {accepted.F:.6e}, ‖∇F‖={gnorm:.3e}, 移動={step:.3e}")
            ev = accepted
            grad = self.sampling_gradient(ev)
            alpha_prev = alpha
            state.n = n + 1
            state.layout = ev.layout
            state.F = ev.F
            state.gradient = grad
        else:
            state.stop_reason = StopReason.MAX_ITER
            state.history.append(self._history_row(settings.max_iter, ev, grad, 0.0))
            self.logger.warning(f"反復上限 {settings.max_iter} に達しました")

        self.logger.info(
            f"電極再構成終了: n={state.n}, F={state.F:.6e}, 理由={state.stop_reason.value}, "
            f"Θ¹={np.round(state.layout.theta1, 6).tolist()}, Θ²={np.round(state.layout.theta2, 6).tolist()}"
        )
        return state


def calibrate_endpoint_signs(inversion: ElectrodeInversion, layout: ElectrodeLayout,
                             electrode: int = 0, step: float = 1e-4) -> Dict[str, object]:
    """
    サンプリング公式の各端点の項と F の中心差分を比べて符号を決める

    正則化の寄与を除いた上で、Θ¹ と Θ² の成分それぞれの符号比を返す。
    """
    M = inversion.count
    ev = inversion.evaluate_layout(layout)
    terms = inversion.sampling_terms(ev)
    theta = np.concatenate([layout.theta1, layout.theta2])
    reg = inversion.settings.reg_weight * (theta - inversion.prior_vector)

    def objective(values: np.ndarray) -> float:
        moved = theta.copy()
        moved[[electrode, M + electrode]] = values
        return inversion.evaluate_layout(
            geometry.make_layout(moved[:M], moved[M:], z=layout.z, kind=layout.kind,
                                 support_fraction=layout.support_fraction)
        ).F

    fd = finite_difference_gradient(objective, theta[[electrode, M + electrode]], step)
    fd -= reg[[electrode, M + electrode]]
    raw = np.array([terms[0, electrode], terms[1, electrode]])
    signs = tuple(float(np.sign(f * r)) if f * r != 0 else 1.0 for f, r in zip(fd, raw))
    result = {
        "electrode": electrode + 1,
        "step": step,
        "signs": signs,
        "sampling": raw.tolist(),
        "finite_difference": fd.tolist(),
        "relative_error": [float(abs(s * r - f) / max(abs(f), 1e-300)) for s, r, f in zip(signs, raw, fd)],
    }
    logger.info(f"端点の符号を較正: {signs}（サンプリング {raw.tolist()}, 差分 {fd.tolist()}）")
    return result


@dataclass(frozen=True)
class ElectrodeFixture:
    """既知の配置と初期値からなる電極再構成の試験問題"""
    name: str
    shape: BoundaryShape
    extent: Tuple[float, float]
    truth: ElectrodeLayout
    start: ElectrodeLayout
    mode: ElectrodeMode = ElectrodeMode.FREE

    @property
    def patterns(self) -> CurrentPatterns:
        return adjacent_patterns(self.truth.count)

    @property
    def lengths(self) -> List[float]:
        return [arc.length for arc in geometry.electrode_arcs(self.shape, self.truth)]


def disk_layout(theta1_first: Optional[float] = None, theta2_first: Optional[float] = None) -> ElectrodeLayout:
    """半径 0.5 の円の4電極（Θ¹_k = −3π/4 + (k−1)π/2、幅 0.5 rad）"""
    theta1 = [-3 * math.pi / 4 + k * math.pi / 2 for k in range(4)]
    theta2 = [t + 0.5 for t in theta1]
    if theta1_first is not None:
        theta1[0] = theta1_first
    if theta2_first is not None:
        theta2[0] = theta2_first
    return geometry.make_layout(theta1, theta2, z=1.0)


def disk_start_fixture() -> ElectrodeFixture:
    """Θ¹₁ をずらした初期値から Θ¹₁ = −2.35619 を探す"""
    return ElectrodeFixture(
        name="disk_theta1",
        shape=geometry.SMALL_DISK,
        extent=(-1.0, 1.0),
        truth=disk_layout(),
        start=disk_layout(theta1_first=-3.141592),
    )


def disk_end_fixture() -> ElectrodeFixture:
    """電極1 = [−3.141592, −2.64] を初期値 Θ²₁ = −1.85619 から探す"""
    return ElectrodeFixture(
        name="disk_theta2",
        shape=geometry.SMALL_DISK,
        extent=(-1.0, 1.0),
        truth=disk_layout(theta1_first=-3.141592, theta2_first=-2.64),
        start=disk_layout(theta1_first=-3.141592),
    )


FIXED_LENGTH_STARTS = (-3.14159, -1.57079, 0.0, 1.57079)


def fixed_length_fixture(case: int = 1) -> ElectrodeFixture:
    """長さ固定モードの4電極（case 1 / 2 で探す位置が異なる）"""
    if case == 1:
        theta1 = (-2.51327, -0.94247, 0.62831, 2.19911)
        theta2 = (-1.93817, -0.30516, 1.24343, 2.84837)
    else:
        theta1 = (-2.35619, -0.78539, 0.78539, 2.19911)
        theta2 = (-1.78157, -0.17053, 1.41055, 2.84837)
    shape = geometry.FIXED_LENGTH_SHAPE
    truth = geometry.make_layout(theta1, theta2, z=1.0)
    lengths = [arc.length for arc in geometry.electrode_arcs(shape, truth)]
    return ElectrodeFixture(
        name=f"fixed_length_{case}",
        shape=shape,
        extent=(-1.0, 1.0),
        truth=truth,
        start=geometry.layout_from_length(shape, FIXED_LENGTH_STARTS, lengths, z=1.0),
        mode=ElectrodeMode.FIXED_LENGTH,
    )


FIXTURES = {
    "disk_theta1": disk_start_fixture,
    "disk_theta2": disk_end_fixture,
    "fixed_length_1": lambda: fixed_length_fixture(1),
    "fixed_length_2": lambda: fixed_length_fixture(2),
}


def fixture_measurements(fixture: ElectrodeFixture, h: Optional[float] = None, resolution: Optional[int] = None,
                         sigma: Optional[Conductivity] = None, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """真の配置で接地済みの 𝓤 を計算する"""
    sigma = sigma or ConstantConductivity(1.0)
    mesh = build_mesh(fixture.shape, fixture.truth, fixture.extent, h=h, resolution=resolution)
    system = assemble(mesh, sigma, epsilon=epsilon)
    Umat, _ = solve_patterns(system, factorize(system), fixture.patterns, compatible=True)
    return ground_measurements(Umat)
