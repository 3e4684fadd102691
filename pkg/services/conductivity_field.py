"""
導電率場

どの導電率も points[..., 2] を受け取り値を返す callable で、
製造解の生成用に gradient(points) も持つ。
"""

from dataclasses import dataclass
from typing import Callable, Tuple
import logging

import numpy as np
import pandas as pd
from scipy import sparse
from scipy.interpolate import RegularGridInterpolator

from models.eit_model import Inclusion
from models.errors import DataFormatError
from services import geometry
from services.cartesian_mesh import INTERIOR

logger = logging.getLogger(__name__)

# 摂動を背景値に戻す ∂Ω 近傍の幅（h 単位）
INTERFACE_BAND = 1e-2


def smooth_bump(s: np.ndarray) -> np.ndarray:
    """exp(1 − 1/(1 − s²))（|s| < 1）、それ以外は 0"""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inner = np.abs(s) < 1.0
    out[inner] = np.exp(1.0 - 1.0 / (1.0 - s[inner] ** 2))
    return out


@dataclass(frozen=True)
class ConstantConductivity:
    value: float = 1.0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return np.full(np.shape(points)[:-1], self.value, dtype=float)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(points), dtype=float)

    @property
    def background(self) -> float:
        return self.value


@dataclass(frozen=True)
class InclusionConductivity:
    """背景値 + なめらかな円形介在物の和"""
    background: float
    inclusions: Tuple[Inclusion, ...] = ()

    def _profiles(self, points: np.ndarray):
        points = np.asarray(points, dtype=float)
        for inc in self.inclusions:
            offset = points - np.asarray(inc.center)
            s2 = (offset ** 2).sum(axis=-1) / inc.radius ** 2
            yield inc, offset, s2

    def __call__(self, points: np.ndarray) -> np.ndarray:
        values = np.full(np.shape(points)[:-1], self.background, dtype=float)
        for inc, _, s2 in self._profiles(points):
            values += inc.amplitude * smooth_bump(np.sqrt(s2))
        return values

    def gradient(self, points: np.ndarray) -> np.ndarray:
        grad = np.zeros(np.shape(points), dtype=float)
        for inc, offset, s2 in self._profiles(points):
            inner = s2 < 1.0
            bump = smooth_bump(np.sqrt(s2))
            factor = np.zeros_like(s2)
            factor[inner] = -2.0 * inc.amplitude * bump[inner] / (inc.radius ** 2 * (1.0 - s2[inner]) ** 2)
            grad += factor[..., None] * offset
        return grad


class GridConductivity:
    """
    格子上の値を双線形補間する導電率（ラスターファイル用）
    """

    def __init__(self, coords: np.ndarray, values: np.ndarray, background: float = 1.0):
        self.coords = np.asarray(coords, dtype=float)
        self.values = np.asarray(values, dtype=float)
        self.background = float(background)
        self._interp = RegularGridInterpolator(
            (self.coords, self.coords), self.values, method="linear", bounds_error=False, fill_value=None
        )
        gx, gy = np.gradient(self.values, self.coords, self.coords)
        self._grad = (
            RegularGridInterpolator((self.coords, self.coords), gx, bounds_error=False, fill_value=None),
            RegularGridInterpolator((self.coords, self.coords), gy, bounds_error=False, fill_value=None),
        )

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self._interp(np.asarray(points, dtype=float))

    def gradient(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return np.stack([self._grad[0](points), self._grad[1](points)], axis=-1)


def perturbation_weights(mesh, points: np.ndarray) -> sparse.csr_matrix:
    """
    δ（内部格子点の値）から点での摂動値への双線形補間行列 W

    σ★ + δ の値は base(points) + W @ δ。内部以外の格子点は δ = 0 として扱い、
    ∂Ω から INTERFACE_BAND·h 以内・Ω の外・格子の外の点の行は 0。
    """
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    h = mesh.h
    n = mesh.resolution
    fx = (points[:, 0] - mesh.lower) / h
    fy = (points[:, 1] - mesh.lower) / h
    inside = (geometry.boundary_level(mesh.shape, points) < -INTERFACE_BAND * h) \
        & (fx >= 0) & (fx <= n) & (fy >= 0) & (fy <= n)
    i0 = np.clip(np.floor(fx).astype(int), 0, n - 1)
    j0 = np.clip(np.floor(fy).astype(int), 0, n - 1)
    tx = fx - i0
    ty = fy - j0
    rows, cols, vals = [], [], []
    for di, dj, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                      (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        i, j = i0 + di, j0 + dj
        keep = inside & (mesh.region[i, j] == INTERIOR) & (w != 0.0)
        rows.append(np.flatnonzero(keep))
        cols.append(mesh.node_index[i[keep], j[keep]])
        vals.append(w[keep])
    return sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(points), mesh.n_interior),
    ).tocsr()


class PerturbedConductivity:
    """
    σ★ + δ：δ は内部格子点の値を双線形補間した摂動

    外部格子点では δ = 0 とし、∂Ω から INTERFACE_BAND·h 以内と Ω の外では σ★ そのものを返す。
    """

    def __init__(self, base: Callable[[np.ndarray], np.ndarray], mesh, delta: np.ndarray):
        self.base = base
        self.mesh = mesh
        self.delta = np.asarray(delta, dtype=float)
        if self.delta.shape != (mesh.n_interior,):
            raise ValueError(f"摂動の長さが内部格子点数と一致しません: {self.delta.shape}")

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        shift = perturbation_weights(self.mesh, points) @ self.delta
        return self.base(points) + shift.reshape(points.shape[:-1])

    def node_values(self) -> np.ndarray:
        """内部格子点での σ"""
        return sample_field(self.base, self.mesh) + self.delta

    def perturbation_grid(self) -> np.ndarray:
        """(N+1)×(N+1) の δ（内部以外は 0）"""
        grid = np.zeros(self.mesh.region.shape)
        I, J = self.mesh.interior_nodes()
        grid[I, J] = self.delta
        return grid


def sample_field(sigma, mesh) -> np.ndarray:
    """導電率を内部格子点で評価する"""
    I, J = mesh.interior_nodes()
    return np.asarray(sigma(mesh.node_xy(I, J)), dtype=float)


def load_raster(path: str, background: float = 1.0) -> GridConductivity:
    """
    x,y,sigma 列の CSV から正方格子のラスター導電率を読み込む
    """
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except FileNotFoundError:
        raise
    except Exception as e:
        raise DataFormatError(f"ラスター導電率の読み込みエラー: {str(e)}") from e
    missing = {"x", "y", "sigma"} - set(df.columns)
    if missing:
        raise DataFormatError(f"ラスター導電率に列がありません: {sorted(missing)}")
    xs = np.unique(df["x"].to_numpy(dtype=float))
    ys = np.unique(df["y"].to_numpy(dtype=float))
    if len(xs) != len(ys) or not np.allclose(xs, ys):
        raise DataFormatError("ラスター導電率は x, y 共通の正方格子である必要があります")
    grid = df.pivot_table(index="x", columns="y", values="sigma").to_numpy()
    if np.isnan(grid).any():
        raise DataFormatError("ラスター導電率に欠損した格子点があります")
    logger.info(f"ラスター導電率を読み込み: {path} ({len(xs)}×{len(ys)})")
    return GridConductivity(xs, grid, background=background)
