"""
ソルバー全体で使う例外階層

CLIは ConfigError を終了コード2、それ以外の EITError を終了コード3に対応付ける。
"""


class EITError(Exception):
    """数値計算系エラーの基底クラス"""


class GeometryError(EITError):
    """境界形状・電極配置に関するエラー"""


class MeshResolutionError(EITError):
    """格子が形状を解像できない場合のエラー"""


class AssemblyError(EITError):
    """線形系の組み立てエラー"""


class FluxStencilError(AssemblyError):
    """フラックスステンシルの三角形が退化した"""


class QuadratureError(AssemblyError):
    """電極上の求積点が不足している"""


class SolverError(EITError):
    """疎行列ソルバーのエラー"""


class ConfigError(EITError):
    """設定ファイルのエラー"""


class DataFormatError(ConfigError):
    """入力CSVの形式エラー"""
