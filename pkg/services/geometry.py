"""
境界形状と電極配置の幾何計算

境界は r(θ) = α0 + Σ(αk cos kθ + αk+N sin kθ) の極座標表示、
電極は角度区間 [Θ¹_m, Θ²_m] で表す。すべての関数は純粋関数で、
スカラーと numpy 配列のどちらも受け付ける。
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Sequence, Union
import logging
import math

import numpy as np
from scipy import integrate, optimize

from models.eit_model import AdmittivityKind, BoundaryShape, ElectrodeLayout
from models.errors import GeometryError

logger = logging.getLogger(__name__)

ArrayLike = Union[float, np.ndarray]

TWO_PI = 2.0 * math.pi
# 境界上とみなす相対距離
BOUNDARY_COINCIDENCE = 1e-14
ARC_RTOL = 1e-10

OMEGA1 = BoundaryShape(alpha=(1.5,))
OMEGA2 = BoundaryShape(alpha=(1.51, 0.01, 0.05, 0.2, 0.035, 0.01, 0.1))
OMEGA3 = BoundaryShape(alpha=(1.6, 0.002, 0.01, 0.003, 0.035, 0.2, 0.15))
SMALL_DISK = BoundaryShape(alpha=(0.5,))
FIXED_LENGTH_SHAPE = BoundaryShape(alpha=(0.8, 0.02, 0.001, 0.05, 0.001, 0.04, 0.001))

NAMED_SHAPES = {
    "omega1": OMEGA1,
    "omega2": OMEGA2,
    "omega3": OMEGA3,
    "small_disk": SMALL_DISK,
    "fixed_length": FIXED_LENGTH_SHAPE,
}


class Frame(NamedTuple):
    """境界上の点と局所座標系"""
    point: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    rho: np.ndarray


@dataclass(frozen=True)
class ElectrodeArc:
    """電極1つ分の弧"""
    index: int
    theta1: float
    theta2: float
    length: float

    @property
    def span(self) -> float:
        return self.theta2 - self.theta1

    def contains(self, theta: ArrayLike) -> ArrayLike:
        """θ がこの弧に含まれるか（2π 周期）"""
        return np.mod(np.asarray(theta) - self.theta1, TWO_PI) <= self.span


def _split(shape: BoundaryShape):
    alpha = np.asarray(shape.alpha, dtype=float)
    order = shape.order
    return alpha[0], alpha[1:order + 1], alpha[order + 1:], np.arange(1, order + 1, dtype=float)


def radius(shape: BoundaryShape, theta: ArrayLike) -> ArrayLike:
    """r(θ)"""
    a0, a_cos, a_sin, k = _split(shape)
    kt = np.multiply.outer(np.asarray(theta, dtype=float), k)
    return a0 + np.cos(kt) @ a_cos + np.sin(kt) @ a_sin


def radius_deriv(shape: BoundaryShape, theta: ArrayLike) -> ArrayLike:
    """r'(θ)"""
    _, a_cos, a_sin, k = _split(shape)
    kt = np.multiply.outer(np.asarray(theta, dtype=float), k)
    return np.sin(kt) @ (-k * a_cos) + np.cos(kt) @ (k * a_sin)


def radius_second_deriv(shape: BoundaryShape, theta: ArrayLike) -> ArrayLike:
    """r''(θ)"""
    _, a_cos, a_sin, k = _split(shape)
    kt = np.multiply.outer(np.asarray(theta, dtype=float), k)
    return -(np.cos(kt) @ (k * k * a_cos) + np.sin(kt) @ (k * k * a_sin))


def speed(shape: BoundaryShape, theta: ArrayLike) -> ArrayLike:
    """ρ(θ) = √(r² + r'²)"""
    return np.hypot(radius(shape, theta), radius_deriv(shape, theta))


def frame(shape: BoundaryShape, theta: ArrayLike) -> Frame:
    """境界点 r(θ)u(θ)、外向き単位法線 ν、接線 τ、ρ を返す"""
    theta = np.asarray(theta, dtype=float)
    r = radius(shape, theta)
    dr = radius_deriv(shape, theta)
    rho = np.hypot(r, dr)
    u = np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    v = np.stack([-np.sin(theta), np.cos(theta)], axis=-1)
    r_ = np.asarray(r)[..., None]
    dr_ = np.asarray(dr)[..., None]
    rho_ = np.asarray(rho)[..., None]
    normal = (r_ * u - dr_ * v) / rho_
    tangent = (dr_ * u + r_ * v) / rho_
    return Frame(point=r_ * u, normal=normal, tangent=tangent, rho=rho)


def polar_angle(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.arctan2(points[..., 1], points[..., 0])


def boundary_level(shape: BoundaryShape, points: np.ndarray) -> np.ndarray:
    """‖p‖ − r(θ_p)：内部で負、外部で正"""
    points = np.asarray(points, dtype=float)
    return np.hypot(points[..., 0], points[..., 1]) - radius(shape, polar_angle(points))


def is_inside(shape: BoundaryShape, points: np.ndarray) -> Union[bool, np.ndarray]:
    """
    点が Ω の内部にあるか判定する

    境界から相対 1e-14 以内の点は内側へ寄せた扱いにする。
    """
    points = np.asarray(points, dtype=float)
    r = radius(shape, polar_angle(points))
    norm = np.hypot(points[..., 0], points[..., 1])
    inside = norm - r <= BOUNDARY_COINCIDENCE * r
    if inside.ndim == 0:
        return bool(inside)
    return inside


def arc_length(shape: BoundaryShape, theta_a: float, theta_b: float) -> float:
    """∫ρ(θ)dθ を適応求積で計算"""
    if theta_b == theta_a:
        return 0.0
    value, _ = integrate.quad(
        lambda t: float(speed(shape, t)), theta_a, theta_b,
        epsabs=1e-14, epsrel=ARC_RTOL, limit=200,
    )
    return value


def electrode_arcs(shape: BoundaryShape, layout: ElectrodeLayout) -> List[ElectrodeArc]:
    """各電極の角度区間と弧長"""
    return [
        ElectrodeArc(index=m, theta1=t1, theta2=t2, length=arc_length(shape, t1, t2))
        for m, (t1, t2) in enumerate(zip(layout.theta1, layout.theta2))
    ]


def solve_end_angle(shape: BoundaryShape, theta1: float, length: float,
                    max_span: float = TWO_PI) -> float:
    """
    弧長 L = ∫_{Θ¹}^{Θ²} ρ dθ を満たす Θ² を求める

    Args:
        theta1: 開始角
        length: 電極長 L ≥ 0
        max_span: 探索する角度幅（次の電極までの隙間）

    Returns:
        終了角 Θ²
    """
    if length < 0:
        raise GeometryError(f"電極長は非負である必要があります: {length}")
    if length == 0:
        return float(theta1)

    def residual(theta2: float) -> float:
        return arc_length(shape, theta1, theta2) - length

    upper = theta1 + max_span
    if residual(upper) < 0:
        raise GeometryError(
            f"Θ¹={theta1:.6f} から長さ {length} の電極が許容区間に収まりません"
        )
    theta2 = optimize.brentq(residual, theta1, upper, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=200)
    if abs(residual(theta2)) >= 1e-12 * length:
        raise GeometryError(f"終了角の解が収束しませんでした (Θ¹={theta1:.6f}, L={length})")
    return float(theta2)


def arc_offset(layout: ElectrodeLayout, m: int, theta: ArrayLike) -> ArrayLike:
    """電極 m の開始角から測った角度（2π 周期で正規化）"""
    return np.mod(np.asarray(theta, dtype=float) - layout.theta1[m], TWO_PI)


def _bump(layout: ElectrodeLayout, m: int, offset: np.ndarray) -> np.ndarray:
    span = layout.theta2[m] - layout.theta1[m]
    half = 0.5 * layout.support_fraction * span
    s = (offset - 0.5 * span) / half
    out = np.zeros_like(offset)
    inner = np.abs(s) < 1.0
    out[inner] = np.exp(1.0 - 1.0 / (1.0 - s[inner] ** 2))
    return out


def admittivity_at(layout: ElectrodeLayout, m: int, theta: float) -> float:
    """電極 m 上の角度 θ での接触アドミッタンス ξ_m(θ)"""
    span = layout.theta2[m] - layout.theta1[m]
    offset = float(arc_offset(layout, m, theta))
    if offset > span:
        raise GeometryError(f"θ={theta:.6f} は電極 {m + 1} の弧の外です")
    return float(admittivity_values(layout, np.array([m]), np.array([theta]))[0])


def admittivity_values(layout: ElectrodeLayout, electrodes: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """
    境界点ごとの ξ をまとめて評価する

    electrodes が -1 の点（電極外）は 0 を返す。
    """
    electrodes = np.asarray(electrodes, dtype=int)
    theta = np.asarray(theta, dtype=float)
    values = np.zeros(theta.shape, dtype=float)
    for m in range(layout.count):
        mask = electrodes == m
        if not mask.any():
            continue
        scale = 1.0 / layout.z[m]
        if layout.kind == AdmittivityKind.CONSTANT:
            values[mask] = scale
        else:
            values[mask] = scale * _bump(layout, m, arc_offset(layout, m, theta[mask]))
    return values


def make_layout(theta1: Sequence[float], theta2: Sequence[float],
                z: Union[float, Sequence[float]] = 1.0,
                kind: AdmittivityKind = AdmittivityKind.CONSTANT,
                support_fraction: float = 0.8) -> ElectrodeLayout:
    count = len(theta1)
    z_values = (float(z),) * count if np.isscalar(z) else tuple(float(v) for v in z)
    return ElectrodeLayout(
        theta1=tuple(float(t) for t in theta1),
        theta2=tuple(float(t) for t in theta2),
        z=z_values,
        kind=kind,
        support_fraction=support_fraction,
    )


def layout_from_length(shape: BoundaryShape, theta1: Sequence[float],
                       length: Union[float, Sequence[float]],
                       z: Union[float, Sequence[float]] = 1.0,
                       kind: AdmittivityKind = AdmittivityKind.CONSTANT,
                       support_fraction: float = 0.8) -> ElectrodeLayout:
    """開始角と電極長から終了角を解いて配置を作る"""
    theta1 = [float(t) for t in theta1]
    lengths = [float(length)] * len(theta1) if np.isscalar(length) else [float(v) for v in length]
    theta2 = []
    for k, (t1, L) in enumerate(zip(theta1, lengths)):
        next_start = theta1[(k + 1) % len(theta1)] + (TWO_PI if k + 1 == len(theta1) else 0.0)
        theta2.append(solve_end_angle(shape, t1, L, max_span=next_start - t1))
    return make_layout(theta1, theta2, z=z, kind=kind, support_fraction=support_fraction)


def default_layout(shape: BoundaryShape, count: int = 16, length: float = 0.35,
                   z: Union[float, Sequence[float]] = 1.0,
                   kind: AdmittivityKind = AdmittivityKind.CONSTANT) -> ElectrodeLayout:
    """Θ¹_k = −π + (k−1)2π/count、長さ L の標準配置"""
    theta1 = [-math.pi + k * TWO_PI / count for k in range(count)]
    return layout_from_length(shape, theta1, length, z=z, kind=kind)


def equally_spaced_layout(count: int, first_angle: float, span: float,
                          z: Union[float, Sequence[float]] = 1.0,
                          kind: AdmittivityKind = AdmittivityKind.CONSTANT,
                          support_fraction: float = 0.8) -> ElectrodeLayout:
    """角度幅 span の電極を等間隔に並べる"""
    theta1 = [first_angle + k * TWO_PI / count for k in range(count)]
    theta2 = [t + span for t in theta1]
    return make_layout(theta1, theta2, z=z, kind=kind, support_fraction=support_fraction)
