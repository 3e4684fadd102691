"""
TOML 設定の読み込みとドメインオブジェクトへの変換
"""

from pathlib import Path
from typing import Union
import logging

import numpy as np
import toml
from pydantic import ValidationError

from models.eit_model import CurrentPatterns
from models.errors import ConfigError
from models.run_config import CurrentsConfig, PatternKind, RunConfig, SigmaConfig, SigmaKind, SolverConfig
from services.conductivity_field import ConstantConductivity, InclusionConductivity, load_raster
from services.forward_solver import adjacent_patterns, alternating_pattern, pair_pattern
from services.sparse_solve import SolverSettings
from services.system_assembly import Conductivity

logger = logging.getLogger(__name__)


def _format_validation(error: ValidationError) -> str:
    lines = []
    for item in error.errors():
        where = ".".join(str(part) for part in item["loc"]) or "(root)"
        lines.append(f"  {where}: {item['msg']}")
    return "\n".join(lines)


def parse_config(data: dict, base_dir: Union[str, Path, None] = None) -> RunConfig:
    """辞書から RunConfig を作る（ValidationError は ConfigError に包む）"""
    try:
        config = RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"設定の検証エラー:\n{_format_validation(e)}") from e
    if base_dir is not None:
        config.with_base_dir(Path(base_dir))
    return config


def load_config(path: Union[str, Path]) -> RunConfig:
    """
    TOML ファイルを読み込んで検証する

    相対パス（出力先・測定 CSV・ラスター）は設定ファイルのディレクトリを基準に解決する。
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"設定ファイルが見つかりません: {path}")
    try:
        data = toml.load(path)
    except toml.TomlDecodeError as e:
        raise ConfigError(f"TOML の構文エラー ({path}): {str(e)}") from e
    config = parse_config(data, base_dir=path.resolve().parent)
    logger.info(f"設定を読み込みました: {path}")
    return config


def dump_config(config: RunConfig) -> str:
    """設定の TOML エコー（parse_config で同じ設定に戻る）"""
    return toml.dumps(config.model_dump(mode="json", exclude_none=True))


def build_sigma(spec: SigmaConfig, config: RunConfig) -> Conductivity:
    if spec.kind == SigmaKind.CONSTANT:
        return ConstantConductivity(spec.value)
    if spec.kind == SigmaKind.INCLUSIONS:
        return InclusionConductivity(background=spec.background, inclusions=tuple(spec.inclusions))
    path = config.resolve_path(spec.path)
    if not path.exists():
        raise FileNotFoundError(f"ラスター導電率が見つかりません: {path}")
    return load_raster(str(path), background=spec.background)


def build_patterns(spec: CurrentsConfig, count: int) -> CurrentPatterns:
    """電極数 count に対する電流パターン"""
    if spec.pattern == PatternKind.ADJACENT:
        return adjacent_patterns(count)
    if spec.pattern == PatternKind.ALTERNATING:
        return alternating_pattern(count)
    if spec.pattern == PatternKind.PAIR:
        if max(spec.source, spec.sink) > count:
            raise ConfigError(f"source/sink が電極数 {count} を超えています: {spec.source}, {spec.sink}")
        return pair_pattern(count, spec.source, spec.sink)
    matrix = np.asarray(spec.matrix, dtype=float)
    if matrix.shape[0] != count:
        raise ConfigError(f"currents.matrix の行数 {matrix.shape[0]} が電極数 {count} と一致しません")
    return CurrentPatterns.from_matrix(matrix, [f"custom_{p + 1}" for p in range(matrix.shape[1])])


def build_solver_settings(spec: SolverConfig) -> SolverSettings:
    return SolverSettings(
        kind=spec.kind,
        rtol=spec.rtol,
        max_iter=spec.max_iter,
        drop_tol=spec.drop_tol,
        fill_factor=spec.fill_factor,
        verify=spec.verify,
    )
