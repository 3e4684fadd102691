"""
実行設定（TOML）のスキーマ

未知のキーは extra="forbid" で読み込み時に弾く。各モジュールの前提条件も
ここでできるだけ検証する。
"""

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator
from typing import List, Optional, Tuple, Union
from enum import Enum
from pathlib import Path

from models.eit_model import (
    AdmittivityKind, BoundaryShape, ElectrodeLayout, ElectrodeMode, GroundMode, Inclusion, SolverKind,
)
from services import geometry

SHAPE_NAMES = tuple(geometry.NAMED_SHAPES)
SWEEP_NAMES = ("shapes", "admittivity", "compatibility", "constant")
SIGMA_FIXTURES = ("center", "near_boundary", "two_inclusions")
ELECTRODE_FIXTURES = ("disk_theta1", "disk_theta2", "fixed_length_1", "fixed_length_2")


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SigmaKind(str, Enum):
    """導電率の指定方法"""
    CONSTANT = "constant"
    INCLUSIONS = "inclusions"
    RASTER = "raster"


class PatternKind(str, Enum):
    """電流パターンの種類"""
    ADJACENT = "adjacent"
    ALTERNATING = "alternating"
    PAIR = "pair"
    CUSTOM = "custom"


class GeometryConfig(StrictModel):
    """境界形状：名前付き形状か α 係数のどちらか"""
    shape: Optional[str] = Field(None, description="名前付き形状")
    alpha: Optional[List[float]] = Field(None, description="フーリエ係数 [α0, α1..αN, αN+1..α2N]")

    @model_validator(mode="after")
    def _one_source(self) -> "GeometryConfig":
        if (self.shape is None) == (self.alpha is None):
            raise ValueError("geometry には shape か alpha のどちらか一方を指定してください")
        if self.shape is not None and self.shape not in SHAPE_NAMES:
            raise ValueError(f"不明な形状: {self.shape}（{', '.join(SHAPE_NAMES)}）")
        if self.alpha is not None:
            BoundaryShape(alpha=tuple(self.alpha))
        return self

    def boundary_shape(self) -> BoundaryShape:
        if self.shape is not None:
            return geometry.NAMED_SHAPES[self.shape]
        return BoundaryShape(alpha=tuple(self.alpha))


class ElectrodeConfig(StrictModel):
    """
    電極配置

    theta1 + theta2、theta1 + length、count + length の3通りで指定できる。
    """
    count: Optional[int] = Field(None, description="等間隔配置の電極数", ge=1)
    theta1: Optional[List[float]] = Field(None, description="開始角 Θ¹")
    theta2: Optional[List[float]] = Field(None, description="終了角 Θ²")
    length: Optional[Union[float, List[float]]] = Field(None, description="電極の弧長")
    z: Union[float, List[float]] = Field(1.0, description="接触インピーダンス")
    admittivity: AdmittivityKind = Field(AdmittivityKind.CONSTANT, description="アドミッタンスのモデル")
    support_fraction: float = Field(0.8, gt=0, le=1)

    @model_validator(mode="after")
    def _check_spec(self) -> "ElectrodeConfig":
        if self.theta1 is None:
            if self.count is None:
                raise ValueError("electrodes には count か theta1 が必要です")
            if self.theta2 is not None:
                raise ValueError("theta2 を使うときは theta1 も指定してください")
            return self
        if self.count is not None and self.count != len(self.theta1):
            raise ValueError(f"count={self.count} と theta1 の長さ {len(self.theta1)} が一致しません")
        if (self.theta2 is None) == (self.length is None):
            raise ValueError("theta1 には theta2 か length のどちらか一方を組み合わせてください")
        if self.theta2 is not None:
            self.layout(None)
        return self

    def layout(self, shape: Optional[BoundaryShape]) -> ElectrodeLayout:
        if self.theta1 is not None and self.theta2 is not None:
            return geometry.make_layout(self.theta1, self.theta2, z=self.z, kind=self.admittivity,
                                        support_fraction=self.support_fraction)
        if shape is None:
            raise ValueError("長さ指定の電極配置には形状が必要です")
        if self.theta1 is not None:
            return geometry.layout_from_length(shape, self.theta1, self.length, z=self.z,
                                               kind=self.admittivity, support_fraction=self.support_fraction)
        layout = geometry.default_layout(shape, count=self.count,
                                         length=0.35 if self.length is None else self.length,
                                         z=self.z, kind=self.admittivity)
        if self.support_fraction != layout.support_fraction:
            layout = layout.model_copy(update={"support_fraction": self.support_fraction})
        return layout


class GridConfig(StrictModel):
    """計算格子 [a, b]²（h か resolution のどちらか）"""
    extent: Tuple[float, float] = Field((-2.0, 2.0), description="計算領域の下端と上端")
    h: Optional[float] = Field(None, gt=0)
    resolution: Optional[int] = Field(None, ge=4, description="1辺の格子区間数 N")

    @model_validator(mode="after")
    def _check_grid(self) -> "GridConfig":
        if self.extent[0] >= self.extent[1]:
            raise ValueError(f"extent は a < b である必要があります: {self.extent}")
        if (self.h is None) == (self.resolution is None):
            raise ValueError("grid には h か resolution のどちらか一方を指定してください")
        return self


class SigmaConfig(StrictModel):
    """導電率 σ"""
    kind: SigmaKind = SigmaKind.CONSTANT
    value: float = Field(1.0, gt=0, description="kind=constant の値")
    background: float = Field(1.0, gt=0, description="介在物・ラスターの背景値")
    inclusions: List[Inclusion] = Field(default_factory=list)
    path: Optional[str] = Field(None, description="ラスター CSV（x,y,sigma）")

    @model_validator(mode="after")
    def _check_sigma(self) -> "SigmaConfig":
        if self.kind == SigmaKind.INCLUSIONS and not self.inclusions:
            raise ValueError("kind=inclusions には inclusions が1つ以上必要です")
        if self.kind == SigmaKind.RASTER and not self.path:
            raise ValueError("kind=raster には path が必要です")
        return self


class PhysicsConfig(StrictModel):
    epsilon: float = Field(1e-10, gt=0, description="接地の重み ε")
    ground_mode: GroundMode = GroundMode.FIRST_ELECTRODE
    sigma: SigmaConfig = Field(default_factory=SigmaConfig)


class CurrentsConfig(StrictModel):
    """入力電流パターン"""
    pattern: PatternKind = PatternKind.ADJACENT
    source: int = Field(8, ge=1, description="pair の流入電極（1始まり）")
    sink: int = Field(14, ge=1, description="pair の流出電極（1始まり）")
    matrix: Optional[List[List[float]]] = Field(None, description="custom の M×P 行列（行が電極）")

    @model_validator(mode="after")
    def _check_pattern(self) -> "CurrentsConfig":
        if self.pattern == PatternKind.CUSTOM:
            if not self.matrix or not self.matrix[0]:
                raise ValueError("pattern=custom には matrix が必要です")
            if len({len(row) for row in self.matrix}) != 1:
                raise ValueError("matrix の行の長さが揃っていません")
        if self.pattern == PatternKind.PAIR and self.source == self.sink:
            raise ValueError("source と sink は異なる電極にしてください")
        return self


class SolverConfig(StrictModel):
    kind: SolverKind = SolverKind.AUTO
    rtol: float = Field(1e-10, gt=0)
    max_iter: int = Field(10_000, ge=1)
    drop_tol: float = Field(1e-5, gt=0)
    fill_factor: float = Field(20.0, gt=0)
    verify: bool = False


class SweepConfig(StrictModel):
    """収束スイープ"""
    name: str = "shapes"
    full_scale: bool = False
    h_list: Optional[List[float]] = Field(None, description="既定の h を上書きする（狭義単調減少）")

    @field_validator("name")
    @classmethod
    def _known_sweep(cls, value: str) -> str:
        if value not in SWEEP_NAMES:
            raise ValueError(f"不明なスイープ: {value}（{', '.join(SWEEP_NAMES)}）")
        return value

    @field_validator("h_list")
    @classmethod
    def _decreasing(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None:
            if len(value) < 3:
                raise ValueError("収束次数の推定には h が3つ以上必要です")
            if any(h <= 0 for h in value) or any(b >= a for a, b in zip(value[:-1], value[1:])):
                raise ValueError(f"h_list は正で狭義単調減少である必要があります: {value}")
        return value


class DataConfig(StrictModel):
    """合成データ生成（再構成より細かい格子で解く）"""
    resolution: int = Field(301, ge=4)
    noise: float = Field(0.0, ge=0, description="相対ノイズ δ")


class InversionConfig(StrictModel):
    """導電率再構成"""
    fixture: Optional[str] = Field(None, description="同梱の試験問題")
    reg_weight: float = Field(1e-4, ge=0)
    tau_stop: float = Field(1e-8, gt=0)
    max_iter: int = Field(50, ge=1)
    t_max: float = Field(10.0, gt=0)
    sigma_min: float = Field(1e-3, gt=0)
    background: float = Field(1.0, gt=0, description="σ★")
    measurements: Optional[str] = Field(None, description="𝓤_meas の CSV（省略時は合成）")
    check_derivative: bool = Field(True, description="初期点で方向微分を差分と比べる")

    @field_validator("fixture")
    @classmethod
    def _known_fixture(cls, value: Optional[str]) -> Optional[str]:
        if value is not None and value not in SIGMA_FIXTURES:
            raise ValueError(f"不明な試験問題: {value}（{', '.join(SIGMA_FIXTURES)}）")
        return value


class ElectrodeInversionConfig(StrictModel):
    """電極位置推定"""
    fixture: Optional[str] = None
    mode: ElectrodeMode = ElectrodeMode.FREE
    start_theta1: Optional[List[float]] = Field(None, description="初期値 Θ¹")
    start_theta2: Optional[List[float]] = Field(None, description="初期値 Θ²（自由モード）")
    prior_theta1: Optional[List[float]] = Field(None, description="事前値 Θ¹★（省略時は初期値）")
    prior_theta2: Optional[List[float]] = None
    lengths: Optional[List[float]] = Field(None, description="長さ固定モードの電極長")
    reg_weight: float = Field(1e-6, ge=0)
    max_iter: int = Field(100, ge=1)
    grad_tol: float = Field(1e-6, gt=0)
    step_tol: float = Field(1e-8, gt=0)
    initial_step: float = Field(0.1, gt=0)
    calibrate: bool = Field(True, description="端点の符号を差分で較正する")
    measurements: Optional[str] = None

    @model_validator(mode="after")
    def _check_start(self) -> "ElectrodeInversionConfig":
        if self.fixture is not None and self.fixture not in ELECTRODE_FIXTURES:
            raise ValueError(f"不明な試験問題: {self.fixture}（{', '.join(ELECTRODE_FIXTURES)}）")
        if self.fixture is None and self.start_theta1 is None:
            raise ValueError("fixture を使わない場合は start_theta1 が必要です")
        if self.mode == ElectrodeMode.FREE and self.start_theta1 is not None and self.start_theta2 is None:
            raise ValueError("自由モードでは start_theta2 も必要です")
        if (self.prior_theta1 is None) != (self.prior_theta2 is None) and self.mode == ElectrodeMode.FREE:
            raise ValueError("prior_theta1 と prior_theta2 は組で指定してください")
        return self


class DumpConfig(StrictModel):
    matrix: bool = Field(False, description="A_h を COO 形式で書き出す")
    field: bool = Field(True, description="格子点の分類を CSV で書き出す")


class RunConfig(StrictModel):
    """1回の実行の設定"""
    output_dir: str = "output"
    seed: int = Field(0, ge=0, description="乱数生成器のシード")
    geometry: Optional[GeometryConfig] = None
    electrodes: Optional[ElectrodeConfig] = None
    grid: Optional[GridConfig] = None
    physics: PhysicsConfig = Field(default_factory=PhysicsConfig)
    currents: CurrentsConfig = Field(default_factory=CurrentsConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    sweep: Optional[SweepConfig] = None
    data: Optional[DataConfig] = None
    inversion: Optional[InversionConfig] = None
    electrode_inversion: Optional[ElectrodeInversionConfig] = None
    dump: Optional[DumpConfig] = None

    _base_dir: Path = PrivateAttr(default_factory=Path.cwd)

    @model_validator(mode="after")
    def _check_layout_fits(self) -> "RunConfig":
        if self.electrodes is not None and self.electrodes.theta2 is None and self.geometry is None:
            raise ValueError("長さ指定の電極配置には geometry が必要です")
        return self

    def resolve_path(self, value: str) -> Path:
        """設定ファイルからの相対パスを解決する"""
        path = Path(value)
        return path if path.is_absolute() else self._base_dir / path

    def with_base_dir(self, base_dir: Path) -> "RunConfig":
        self._base_dir = Path(base_dir)
        return self

    def missing(self, *blocks: str) -> List[str]:
        return [name for name in blocks if getattr(self, name) is None]
