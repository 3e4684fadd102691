from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import List, Optional, Tuple
from enum import Enum
import math

import numpy as np

# 形状検証に使う θ のサンプル数
SHAPE_SAMPLES = 4096


class GroundMode(str, Enum):
    """接地（定数の不定性）の固定方式"""
    FIRST_ELECTRODE = "first_electrode"
    MEAN_FREE = "mean_free"


class AdmittivityKind(str, Enum):
    """接触アドミッタンスのモデル"""
    CONSTANT = "constant"
    SMOOTH_BUMP = "smooth_bump"


class PointRegion(str, Enum):
    """場のダンプに使う点の区分"""
    INTERIOR = "interior"
    EXTERIOR = "exterior"
    BOUNDARY = "boundary"


class SolverKind(str, Enum):
    """線形ソルバーの種類"""
    AUTO = "auto"
    DIRECT = "direct"
    ITERATIVE = "iterative"


class ElectrodeMode(str, Enum):
    """電極位置推定のパラメータ化"""
    FREE = "free"
    FIXED_LENGTH = "fixed_length"


class EndpointSide(str, Enum):
    """電極の端点"""
    START = "start"
    END = "end"


class StopReason(str, Enum):
    """反復の終了理由"""
    CONVERGED = "converged"
    NO_STEP = "no_step"
    MAX_ITER = "max_iter"
    SMALL_GRADIENT = "small_gradient"
    SMALL_STEP = "small_step"
    ORDERING_VIOLATION = "ordering_violation"


class BoundaryShape(BaseModel):
    """フーリエ極座標表示の境界形状 r(θ)"""
    model_config = ConfigDict(frozen=True)

    alpha: Tuple[float, ...] = Field(..., description="極座標半径の係数 [α0, α1..αN, αN+1..α2N]")

    @field_validator("alpha")
    @classmethod
    def _check_alpha(cls, value: Tuple[float, ...]) -> Tuple[float, ...]:
        if len(value) % 2 != 1:
            raise ValueError(f"alpha の長さは奇数 (2N+1) である必要があります: {len(value)}")
        coeffs = np.asarray(value, dtype=float)
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("alpha に有限でない値があります")
        order = (len(value) - 1) // 2
        theta = np.linspace(0.0, 2.0 * math.pi, SHAPE_SAMPLES, endpoint=False)
        k = np.arange(1, order + 1)[:, None]
        r = coeffs[0] + (coeffs[1:order + 1, None] * np.cos(k * theta)).sum(axis=0) \
            + (coeffs[order + 1:, None] * np.sin(k * theta)).sum(axis=0)
        if r.min() <= 0.0 or r.max() >= 2.0:
            raise ValueError(f"r(θ) は (0, 2) に収まる必要があります: min={r.min():.6g}, max={r.max():.6g}")
        return value

    @property
    def order(self) -> int:
        """フーリエ次数 N"""
        return (len(self.alpha) - 1) // 2


class ElectrodeLayout(BaseModel):
    """電極の角度区間と接触アドミッタンス"""
    model_config = ConfigDict(frozen=True)

    theta1: Tuple[float, ...] = Field(..., description="開始角 Θ¹")
    theta2: Tuple[float, ...] = Field(..., description="終了角 Θ²")
    z: Tuple[float, ...] = Field(..., description="接触インピーダンス z_m")
    kind: AdmittivityKind = Field(AdmittivityKind.CONSTANT, description="アドミッタンスのモデル")
    support_fraction: float = Field(0.8, description="SmoothBump の台が占める弧の割合", gt=0, le=1)

    @model_validator(mode="after")
    def _check_layout(self) -> "ElectrodeLayout":
        count = len(self.theta1)
        if count < 1:
            raise ValueError("電極が1つもありません")
        if len(self.theta2) != count or len(self.z) != count:
            raise ValueError(
                f"theta1/theta2/z の長さが一致しません: {count}, {len(self.theta2)}, {len(self.z)}"
            )
        if any(z <= 0 for z in self.z):
            raise ValueError("接触インピーダンス z_m は正である必要があります")
        chain = []
        for a, b in zip(self.theta1, self.theta2):
            chain.extend([a, b])
        chain.append(self.theta1[0] + 2.0 * math.pi)
        if any(not (lo < hi) for lo, hi in zip(chain[:-1], chain[1:])):
            raise ValueError("電極の角度は Θ¹₁ < Θ²₁ < Θ¹₂ < … < Θ²_M < Θ¹₁ + 2π を満たす必要があります")
        return self

    @property
    def count(self) -> int:
        """電極数 M"""
        return len(self.theta1)


class CurrentPatterns(BaseModel):
    """入力電流パターン（M×P 行列の列）"""
    model_config = ConfigDict(frozen=True)

    columns: Tuple[Tuple[float, ...], ...] = Field(..., description="各パターンの電流ベクトル")
    labels: Tuple[str, ...] = Field((), description="パターン名")

    @model_validator(mode="after")
    def _check_columns(self) -> "CurrentPatterns":
        if not self.columns:
            raise ValueError("電流パターンが空です")
        lengths = {len(c) for c in self.columns}
        if len(lengths) != 1:
            raise ValueError(f"電流パターンの長さが揃っていません: {sorted(lengths)}")
        if self.labels and len(self.labels) != len(self.columns):
            raise ValueError("labels の数がパターン数と一致しません")
        return self

    @property
    def electrode_count(self) -> int:
        return len(self.columns[0])

    @property
    def pattern_count(self) -> int:
        return len(self.columns)

    @property
    def matrix(self) -> np.ndarray:
        """M×P 行列"""
        return np.asarray(self.columns, dtype=float).T

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, labels: Optional[List[str]] = None) -> "CurrentPatterns":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        return cls(
            columns=tuple(tuple(float(v) for v in col) for col in matrix.T),
            labels=tuple(labels or ()),
        )


class Inclusion(BaseModel):
    """なめらかな円形介在物"""
    model_config = ConfigDict(frozen=True, extra="forbid")

    center: Tuple[float, float] = Field(..., description="中心座標")
    radius: float = Field(..., description="半径", gt=0)
    amplitude: float = Field(..., description="中心での導電率の増分")


class MeshSummary(BaseModel):
    """格子の分類統計"""
    h: float
    resolution: int
    interior_nodes: int
    exterior_nodes: int
    rim_nodes: int
    irregular_nodes: int
    boundary_points: int
    electrode_points: List[int]
    clamped_points: int
    unknowns: int


class SweepRow(BaseModel):
    """収束スイープの1行"""
    h: float
    err_u_inf: float = math.nan
    err_u_l2: float = math.nan
    err_grad_inf: float = math.nan
    err_grad_inf_all: float = math.nan
    seconds: float = 0.0
    eps_u1: float = math.nan
    error: Optional[str] = Field(None, description="この h での失敗内容")

    @property
    def ok(self) -> bool:
        return self.error is None


class OrderFit(BaseModel):
    """対数-対数回帰による収束次数"""
    order: Optional[float] = Field(None, description="傾き（exact の場合 None）")
    r2: Optional[float] = None
    exact: bool = False

    def label(self) -> str:
        if self.exact:
            return "exact"
        return f"{self.order:.3f}"


class InversionHistoryRow(BaseModel):
    """導電率推定の反復履歴"""
    n: int
    F: float
    t_n: float
    norm_dsigma: float


class ElectrodeHistoryRow(BaseModel):
    """電極位置推定の反復履歴"""
    n: int
    F: float
    grad_norm: float
    step: float
    theta1: List[float]
    theta2: List[float]
