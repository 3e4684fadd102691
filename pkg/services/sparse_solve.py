"""
非対称疎行列 A_h の分解と求解

直接法（ピボット付き LU）は1回の分解を多数の右辺で使い回す。
大きな格子では ILU 前処理付き BiCGSTAB に切り替える。
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence
import logging
import os
import time

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from models.eit_model import SolverKind
from models.errors import SolverError

logger = logging.getLogger(__name__)

# 500×500 格子までは直接法
DIRECT_LIMIT = 501 * 501 + 4000
DIRECT_TOLERANCE = 1e-10
BATCH_COLUMNS = 64


def thread_count() -> int:
    """EIT_NUM_THREADS（未設定なら CPU 数、最大 8）"""
    value = os.environ.get("EIT_NUM_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logger.warning(f"EIT_NUM_THREADS が整数ではありません: {value}")
    return max(1, min(8, os.cpu_count() or 1))


def residual_checks_enabled() -> bool:
    return os.environ.get("EIT_CHECK_RESIDUAL", "").lower() in ("1", "true", "yes")


@dataclass(frozen=True)
class SolverSettings:
    """ソルバーの設定"""
    kind: SolverKind = SolverKind.AUTO
    rtol: float = 1e-10
    max_iter: int = 10_000
    drop_tol: float = 1e-5
    fill_factor: float = 20.0
    verify: bool = False


def residual_norm(matrix: sparse.spmatrix, x: np.ndarray, rhs: np.ndarray) -> float:
    """‖A x − r‖∞"""
    return float(np.abs(matrix @ x - rhs).max(initial=0.0))


class Factorization:
    """1つの A_h に対する再利用可能な分解"""

    def __init__(self, matrix: sparse.spmatrix, settings: Optional[SolverSettings] = None):
        self.settings = settings or SolverSettings()
        self.matrix = sparse.csr_matrix(matrix)
        self.size = self.matrix.shape[0]
        self.logger = logging.getLogger(__name__)
        self._norm = float(abs(self.matrix).sum(axis=1).max()) if self.size else 0.0
        kind = self.settings.kind
        if kind == SolverKind.AUTO:
            kind = SolverKind.DIRECT if self.size <= DIRECT_LIMIT else SolverKind.ITERATIVE
        self.kind = kind
        self.verify = self.settings.verify or residual_checks_enabled()

        started = time.perf_counter()
        try:
            if kind == SolverKind.DIRECT:
                self._lu = spla.splu(self.matrix.tocsc())
                self._preconditioner = None
            else:
                self._lu = None
                self._ilu = spla.spilu(self.matrix.tocsc(), drop_tol=self.settings.drop_tol,
                                       fill_factor=self.settings.fill_factor)
                self._preconditioner = spla.LinearOperator(self.matrix.shape, self._ilu.solve)
        except RuntimeError as e:
            raise SolverError(f"行列が特異です（組み立てを確認してください）: {str(e)}") from e
        self.factor_seconds = time.perf_counter() - started
        self.logger.debug(f"分解完了: kind={kind.value}, n={self.size}, {self.factor_seconds:.2f}s")

    def _check(self, x: np.ndarray, rhs: np.ndarray) -> None:
        if not np.all(np.isfinite(x)):
            raise SolverError("解に有限でない値があります")
        if not self.verify:
            return
        res = residual_norm(self.matrix, x, rhs)
        if self.kind == SolverKind.DIRECT:
            bound = DIRECT_TOLERANCE * (1.0 + np.abs(rhs).max(initial=0.0) + self._norm * np.abs(x).max(initial=0.0))
        else:
            bound = 10.0 * self.settings.rtol * max(np.linalg.norm(rhs), 1e-300) * max(1.0, np.sqrt(self.size))
        if res > bound:
            raise SolverError(f"残差が許容値を超えました: {res:.3e} > {bound:.3e}")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """A_h x = rhs を解く"""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.size,):
            raise SolverError(f"右辺の長さが一致しません: {rhs.shape} != ({self.size},)")
        if not rhs.any():
            return np.zeros(self.size)
        if self.kind == SolverKind.DIRECT:
            x = self._lu.solve(rhs)
        else:
            x, info = spla.bicgstab(self.matrix, rhs, M=self._preconditioner,
                                    rtol=self.settings.rtol, atol=0.0, maxiter=self.settings.max_iter)
            if info != 0:
                raise SolverError(f"BiCGSTAB が収束しませんでした (info={info})")
        self._check(x, rhs)
        return x

    def solve_transpose(self, rhs: np.ndarray) -> np.ndarray:
        """A_hᵀ y = rhs を解く（同じ分解を使う）"""
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape != (self.size,):
            raise SolverError(f"右辺の長さが一致しません: {rhs.shape} != ({self.size},)")
        if self.kind == SolverKind.DIRECT:
            y = self._lu.solve(rhs, trans="T")
        else:
            preconditioner = spla.LinearOperator(self.matrix.shape, lambda r: self._ilu.solve(r, trans="T"))
            y, info = spla.bicgstab(self.matrix.T.tocsr(), rhs, M=preconditioner,
                                    rtol=self.settings.rtol, atol=0.0, maxiter=self.settings.max_iter)
            if info != 0:
                raise SolverError(f"転置系の BiCGSTAB が収束しませんでした (info={info})")
        if not np.all(np.isfinite(y)):
            raise SolverError("転置系の解に有限でない値があります")
        return y

    def solve_block(self, rhs: np.ndarray) -> np.ndarray:
        """n×k の右辺をまとめて解く（直接法）"""
        rhs = np.asarray(rhs, dtype=float)
        if self.kind != SolverKind.DIRECT:
            return np.column_stack([self.solve(rhs[:, c]) for c in range(rhs.shape[1])])
        x = self._lu.solve(rhs)
        for c in range(rhs.shape[1]):
            self._check(x[:, c], rhs[:, c])
        return x


def factorize(matrix, settings: Optional[SolverSettings] = None) -> Factorization:
    """
    AssembledSystem または疎行列を分解する
    """
    matrix = getattr(matrix, "matrix", matrix)
    return Factorization(matrix, settings)


def solve_many(fact: Factorization, rhs_list: Sequence[np.ndarray],
               workers: Optional[int] = None) -> List[np.ndarray]:
    """
    1つの分解に対して複数の右辺を独立に解く

    直接法では右辺を列にまとめて前進後退代入し、反復法ではスレッドで並列に解く。
    """
    if not len(rhs_list):
        return []
    if fact.kind == SolverKind.DIRECT:
        results: List[np.ndarray] = []
        for start in range(0, len(rhs_list), BATCH_COLUMNS):
            block = np.column_stack(rhs_list[start:start + BATCH_COLUMNS])
            x = fact.solve_block(block)
            results.extend(x[:, c].copy() for c in range(x.shape[1]))
        return results
    workers = workers or thread_count()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fact.solve, rhs_list))


def green_column(fact: Factorization, index: int) -> np.ndarray:
    """A_h⁻¹ の第 index 列（離散グリーン関数 G_h(·, Q)）"""
    e = np.zeros(fact.size)
    e[index] = 1.0
    return fact.solve(e)
