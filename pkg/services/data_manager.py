"""
出力ディレクトリの管理と CSV・PGM・JSON の読み書き
"""

from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union
import json
import logging
import platform
import time

import jinja2
import numpy as np
import pandas as pd
import pydantic
import scipy
import sklearn
from jinja2 import Environment, FileSystemLoader
from scipy import sparse

from models.eit_model import ElectrodeHistoryRow, InversionHistoryRow, MeshSummary
from models.errors import DataFormatError

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"
FLOAT_FORMAT = "%.17e"


def library_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "scikit-learn": sklearn.__version__,
        "pydantic": pydantic.VERSION,
        "jinja2": jinja2.__version__,
    }


class DataManager:
    """1回の実行の出力先"""

    def __init__(self, output_dir: Union[str, Path]):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.logger = logging.getLogger(__name__)
        self.files: List[str] = []
        self.timings: Dict[str, float] = {}
        self.env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), keep_trailing_newline=True)

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def _record(self, path: Path) -> Path:
        if path.name not in self.files:
            self.files.append(path.name)
        self.logger.debug(f"書き出し: {path}")
        return path

    @contextmanager
    def timer(self, label: str):
        """処理時間を timings に記録する"""
        started = time.perf_counter()
        try:
            yield
        finally:
            self.timings[label] = self.timings.get(label, 0.0) + time.perf_counter() - started

    def write_frame(self, df: pd.DataFrame, name: str) -> Path:
        path = self.path(name)
        df.to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return self._record(path)

    def write_text(self, text: str, name: str) -> Path:
        path = self.path(name)
        path.write_text(text, encoding="utf-8")
        return self._record(path)

    def write_json(self, data: Dict[str, Any], name: str) -> Path:
        path = self.path(name)
        path.write_text(json.dumps(data, ensure_ascii=False, indent=2, default=str), encoding="utf-8")
        return self._record(path)

    def write_pgm(self, grid: np.ndarray, name: str) -> Path:
        """
        (N+1)×(N+1) の格子値を 8 bit グレースケールの PGM (P5) で書く

        grid[i, j] は (x_i, y_j)。画像の上端が y の最大になるよう転置・反転する。
        NaN の画素は 0 にする。
        """
        values = np.asarray(grid, dtype=float).T[::-1]
        finite = np.isfinite(values)
        image = np.zeros(values.shape, dtype=np.uint8)
        if finite.any():
            lo = float(values[finite].min())
            hi = float(values[finite].max())
            scale = 255.0 / (hi - lo) if hi > lo else 0.0
            image[finite] = np.clip(np.rint((values[finite] - lo) * scale), 0, 255).astype(np.uint8)
        path = self.path(name)
        header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
        path.write_bytes(header + image.tobytes())
        return self._record(path)

    def write_measurements(self, matrix: np.ndarray, name: str,
                           labels: Optional[Sequence[str]] = None) -> Path:
        """M×P の測定行列（行が電極、列がパターン）"""
        matrix = np.atleast_2d(np.asarray(matrix, dtype=float))
        labels = list(labels) if labels else [f"pattern_{p + 1}" for p in range(matrix.shape[1])]
        df = pd.DataFrame(matrix, columns=labels)
        df.insert(0, "electrode", np.arange(1, matrix.shape[0] + 1))
        return self.write_frame(df, name)

    @staticmethod
    def read_measurements(path: Union[str, Path], shape: Optional[Sequence[int]] = None) -> np.ndarray:
        """write_measurements の CSV を読む（shape を与えると形状も検証する）"""
        try:
            df = pd.read_csv(path, float_precision="round_trip")
        except FileNotFoundError:
            raise
        except Exception as e:
            raise DataFormatError(f"測定 CSV の読み込みエラー ({path}): {str(e)}") from e
        if "electrode" in df.columns:
            df = df.sort_values("electrode").drop(columns="electrode")
        try:
            matrix = df.to_numpy(dtype=float)
        except ValueError as e:
            raise DataFormatError(f"測定 CSV に数値でない値があります ({path})") from e
        if not np.all(np.isfinite(matrix)):
            raise DataFormatError(f"測定 CSV に有限でない値があります ({path})")
        if shape is not None and matrix.shape != tuple(shape):
            raise DataFormatError(f"測定行列の形状 {matrix.shape} が {tuple(shape)} と一致しません ({path})")
        return matrix

    def write_matrix_coo(self, matrix: sparse.spmatrix, name: str) -> Path:
        """疎行列を row,col,value の座標形式で書く"""
        coo = sparse.coo_matrix(matrix)
        df = pd.DataFrame({"row": coo.row, "col": coo.col, "value": coo.data})
        return self.write_frame(df.sort_values(["row", "col"], kind="stable"), name)

    def write_mesh_summary(self, summary: MeshSummary, name: str = "mesh_summary.csv") -> Path:
        data = summary.model_dump()
        points = data.pop("electrode_points")
        rows = [{"key": k, "value": v} for k, v in data.items()]
        rows.extend({"key": f"electrode_points_{m + 1}", "value": n} for m, n in enumerate(points))
        return self.write_frame(pd.DataFrame(rows), name)

    def write_history(self, rows: Iterable[Union[InversionHistoryRow, ElectrodeHistoryRow]], name: str) -> Path:
        """反復履歴（電極角は theta1_k / theta2_k の列に展開する）"""
        records = []
        for row in rows:
            record = row.model_dump()
            for key in ("theta1", "theta2"):
                if key in record:
                    for k, value in enumerate(record.pop(key)):
                        record[f"{key}_{k + 1}"] = value
            records.append(record)
        return self.write_frame(pd.DataFrame(records), name)

    def write_manifest(self, command: str, config_text: str, seed: int,
                       extra: Optional[Dict[str, Any]] = None, name: str = "manifest.json") -> Path:
        """設定のエコー・ライブラリのバージョン・処理時間・シード"""
        manifest = {
            "command": command,
            "created": datetime.now().isoformat(timespec="seconds"),
            "config": config_text,
            "seed": seed,
            "versions": library_versions(),
            "timings": {k: round(v, 6) for k, v in self.timings.items()},
            "files": list(self.files),
        }
        if extra:
            manifest.update(extra)
        return self.write_json(manifest, name)

    def write_run_summary(self, command: str, started: datetime, seconds: float,
                          items: Dict[str, Any], name: str = "summary.txt") -> Path:
        template = self.env.get_template("run_summary.txt.j2")
        text = template.render(
            command=command,
            started=started.isoformat(timespec="seconds"),
            seconds=seconds,
            output_dir=str(self.output_dir),
            items=list(items.items()),
            files=list(self.files),
        )
        return self.write_text(text, name)
