"""
製造解による h 収束の自動検証

h ごとに格子・A_h・ソースを作り直して解き、誤差ノルムと
両対数回帰による収束次数を求める。
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple
import logging
import math
import time

import numpy as np
import pandas as pd
from jinja2 import Environment, FileSystemLoader
from sklearn.linear_model import LinearRegression

from models.eit_model import (
    AdmittivityKind, BoundaryShape, ElectrodeLayout, GroundMode, OrderFit, SweepRow,
)
from models.errors import EITError
from services import geometry
from services.cartesian_mesh import build_mesh
from services.conductivity_field import ConstantConductivity
from services.forward_solver import (
    ManufacturedSolution, constant, exp_r2, manufacture_sources, numerical_gradient, sin_xy, solve_forward,
)
from services.sparse_solve import SolverSettings, factorize, thread_count
from services.system_assembly import DEFAULT_EPSILON, Conductivity, SourceData, assemble

logger = logging.getLogger(__name__)

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"

# これ以下の誤差は丸め誤差とみなす
EXACT_TOLERANCE = 1e-12

DESK_H = (1 / 25, 1 / 40, 1 / 60, 1 / 80, 1 / 100)
FULL_H = tuple(1 / n for n in range(25, 226, 25))
CIRCLE_DESK_H = (1 / 50, 1 / 100, 1 / 150)
CIRCLE_FULL_H = tuple(1 / n for n in range(50, 251, 50))

REPORT_COLUMNS = ["h", "err_u_inf", "err_u_l2", "err_grad_inf", "seconds"]
EXTRA_COLUMNS = ["err_grad_inf_all", "eps_u1", "error"]


@dataclass
class SweepCase:
    """1本の h スイープの入力"""
    name: str
    shape: BoundaryShape
    layout: ElectrodeLayout
    extent: Tuple[float, float]
    h_list: Sequence[float]
    exact: Optional[ManufacturedSolution] = None
    U_exact: Optional[np.ndarray] = None
    currents: Optional[np.ndarray] = None
    sigma: Conductivity = field(default_factory=lambda: ConstantConductivity(1.0))
    epsilon: float = DEFAULT_EPSILON
    ground_mode: GroundMode = GroundMode.FIRST_ELECTRODE
    settings: Optional[SolverSettings] = None

    def __post_init__(self):
        h = np.asarray(self.h_list, dtype=float)
        if len(h) and (np.any(h <= 0) or np.any(np.diff(h) >= 0)):
            raise ValueError(f"h のリストは正で狭義単調減少である必要があります: {list(h)}")
        if (self.exact is None) == (self.currents is None):
            raise ValueError("製造解か電流パターンのどちらか一方を指定してください")
        if self.exact is not None and self.U_exact is None:
            self.U_exact = np.zeros(self.layout.count)

    @property
    def is_compatibility(self) -> bool:
        return self.currents is not None


@dataclass
class SweepReport:
    """スイープ結果と収束次数"""
    case: SweepCase
    rows: List[SweepRow]
    fits: Dict[str, OrderFit]

    @property
    def errors(self) -> List[str]:
        return [f"h={row.h:.6g}: {row.error}" for row in self.rows if not row.ok]

    def frame(self) -> pd.DataFrame:
        df = pd.DataFrame([row.model_dump() for row in self.rows])
        return df[REPORT_COLUMNS + EXTRA_COLUMNS]


def fit_order(h: Sequence[float], errors: Sequence[float]) -> OrderFit:
    """
    log err = p·log h + c の最小二乗傾き p と決定係数

    誤差がすべて丸め誤差以下なら exact を返す。
    """
    h = np.asarray(h, dtype=float)
    errors = np.asarray(errors, dtype=float)
    mask = np.isfinite(errors)
    h, errors = h[mask], errors[mask]
    if len(h) < 3:
        raise ValueError(f"収束次数の推定には3点以上必要です: {len(h)}")
    if errors.max() <= EXACT_TOLERANCE:
        return OrderFit(order=None, r2=None, exact=True)
    if np.any(errors <= 0):
        raise ValueError("正でない誤差が含まれています")
    X = np.log(h).reshape(-1, 1)
    y = np.log(errors)
    model = LinearRegression().fit(X, y)
    return OrderFit(order=float(model.coef_[0]), r2=float(model.score(X, y)), exact=False)


def solution_errors(mesh, solution, exact: ManufacturedSolution, U_exact: np.ndarray) -> Dict[str, float]:
    """
    接地をそろえた離散解と製造解の誤差

    定数分は U₁ の差でずらしてから比べる。
    """
    shifted = solution.regrounded()
    shifted.values = shifted.values + U_exact[0]
    I, J = mesh.interior_nodes()
    nodes = mesh.node_xy(I, J)
    err_nodes = np.abs(shifted.u_interior - exact.value(nodes))
    err_bp = np.abs(shifted.u_boundary - exact.value(mesh.bp_xy))

    grad, regular = numerical_gradient(mesh, shifted)
    grad_err = np.linalg.norm(grad[I, J] - exact.gradient(nodes), axis=-1)
    reg = regular[I, J]
    return {
        "err_u_inf": float(max(err_nodes.max(initial=0.0), err_bp.max(initial=0.0))),
        "err_u_l2": float(math.sqrt(mesh.h ** 2 * float(err_nodes @ err_nodes))),
        "err_grad_inf": float(grad_err[reg].max(initial=0.0)),
        "err_grad_inf_all": float(grad_err.max(initial=0.0)),
    }


class ConvergenceHarness:
    """h スイープの実行とレポート出力"""

    def __init__(self, workers: Optional[int] = None):
        self.logger = logging.getLogger(__name__)
        self.workers = workers or thread_count()
        self.env = Environment(loader=FileSystemLoader(str(TEMPLATE_DIR)), keep_trailing_newline=True)

    def run_case(self, case: SweepCase, h: float) -> SweepRow:
        started = time.perf_counter()
        try:
            mesh = build_mesh(case.shape, case.layout, case.extent, h=h)
            system = assemble(mesh, case.sigma, ground_mode=case.ground_mode, epsilon=case.epsilon)
            fact = factorize(system, case.settings)
            if case.is_compatibility:
                sources = SourceData.currents(mesh, case.currents)
            else:
                sources = manufacture_sources(mesh, case.sigma, case.exact, case.U_exact)
            solution = solve_forward(system, fact, sources)
            eps_u1 = case.epsilon * float(solution.U[0])
            if case.is_compatibility:
                target = float(np.sum(case.currents))
                errors = {"err_u_inf": abs(eps_u1 - target)}
            else:
                errors = solution_errors(mesh, solution, case.exact, case.U_exact)
        except (EITError, ValueError) as e:
            self.logger.warning(f"[{case.name}] h={h:.6g} で失敗: {str(e)}")
            return SweepRow(h=h, seconds=time.perf_counter() - started, error=str(e))
        row = SweepRow(h=h, seconds=time.perf_counter() - started, eps_u1=eps_u1, **errors)
        self.logger.info(
            f"[{case.name}] h={h:.6g}: err_u={row.err_u_inf:.3e}, err_grad={row.err_grad_inf:.3e}, "
            f"εU₁={eps_u1:.3e} ({row.seconds:.2f}s)"
        )
        return row

    def run_sweep(self, case: SweepCase) -> SweepReport:
        """
        h のリストを並列に回し、h ごとの失敗は記録して続行する
        """
        self.logger.info(f"スイープ開始: {case.name}, h={[round(h, 6) for h in case.h_list]}")
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            rows = list(pool.map(lambda h: self.run_case(case, h), case.h_list))
        return SweepReport(case=case, rows=rows, fits=self.fit_rows(case, rows))

    def fit_rows(self, case: SweepCase, rows: List[SweepRow]) -> Dict[str, OrderFit]:
        ok = [row for row in rows if row.ok]
        if len(ok) < 3:
            self.logger.warning(f"[{case.name}] 成功した h が3点未満のため次数を推定できません")
            return {}
        h = [row.h for row in ok]
        columns = ["err_u_inf"] if case.is_compatibility else \
            ["err_u_inf", "err_u_l2", "err_grad_inf", "err_grad_inf_all"]
        fits = {}
        for column in columns:
            try:
                fits[column] = fit_order(h, [getattr(row, column) for row in ok])
            except ValueError as e:
                self.logger.warning(f"[{case.name}] {column} の次数推定に失敗: {str(e)}")
        for column, fit in fits.items():
            self.logger.info(f"[{case.name}] {column}: {fit.label()}")
        return fits

    def render_summary(self, report: SweepReport, title: Optional[str] = None) -> str:
        template = self.env.get_template("sweep_summary.txt.j2")
        return template.render(
            title=title or f"収束検証: {report.case.name}",
            name=report.case.name,
            epsilon=report.case.epsilon,
            ground_mode=GroundMode(report.case.ground_mode).value,
            rows=report.rows,
            fits=[{"name": k, "label": v.label()} for k, v in report.fits.items()],
        )

    def render_gnuplot(self, report: SweepReport, csv_name: str) -> str:
        template = self.env.get_template("sweep.gp.j2")
        ok = [row for row in report.rows if row.ok]
        # 参照直線 O(h) は最も粗い h の誤差に合わせる
        scale = ok[0].err_u_inf / ok[0].h if ok and ok[0].h > 0 else 1.0
        return template.render(
            title=f"収束検証: {report.case.name}",
            csv_name=csv_name,
            reference_scale=f"{scale:.6e}",
            fits=[{"name": k, "label": v.label()} for k, v in report.fits.items()],
        )

    def write_report(self, report: SweepReport, data_manager, stem: Optional[str] = None) -> List[Path]:
        """CSV・gnuplot スクリプト・サマリーを書き出す"""
        stem = stem or f"sweep_{report.case.name}"
        csv_path = data_manager.write_frame(report.frame(), f"{stem}.csv")
        gp_path = data_manager.write_text(self.render_gnuplot(report, csv_path.name), f"{stem}.gp")
        txt_path = data_manager.write_text(self.render_summary(report), f"{stem}_summary.txt")
        return [csv_path, gp_path, txt_path]


def shape_cases(full_scale: bool = False, epsilon: float = DEFAULT_EPSILON) -> List[SweepCase]:
    """Ω₁〜Ω₃、u = sin(xy)、U = 0、16電極"""
    h_list = FULL_H if full_scale else DESK_H
    cases = []
    for name in ("omega1", "omega2", "omega3"):
        shape = geometry.NAMED_SHAPES[name]
        cases.append(SweepCase(
            name=f"{name}_sin_xy",
            shape=shape,
            layout=geometry.default_layout(shape),
            extent=(-2.0, 2.0),
            h_list=h_list,
            exact=sin_xy(),
            U_exact=np.zeros(16),
            epsilon=epsilon,
        ))
    return cases


def circle_layout(kind: AdmittivityKind = AdmittivityKind.CONSTANT) -> ElectrodeLayout:
    """半径 0.5 の円に等間隔の4電極"""
    return geometry.equally_spaced_layout(4, -3 * math.pi / 4, math.pi / 4, z=1.0, kind=kind)


def admittivity_cases(full_scale: bool = False, epsilon: float = DEFAULT_EPSILON) -> List[SweepCase]:
    """円 R = 0.5、u = exp(x²+y²)、U = 0.5·exp(R²)·𝟙、古典 CEM となめらかなアドミッタンス"""
    h_list = CIRCLE_FULL_H if full_scale else CIRCLE_DESK_H
    U = 0.5 * math.exp(0.25) * np.ones(4)
    return [
        SweepCase(
            name=f"circle_exp_{kind.value}",
            shape=geometry.SMALL_DISK,
            layout=circle_layout(kind),
            extent=(-1.0, 1.0),
            h_list=h_list,
            exact=exp_r2(),
            U_exact=U,
            epsilon=epsilon,
        )
        for kind in (AdmittivityKind.CONSTANT, AdmittivityKind.SMOOTH_BUMP)
    ]


def constant_case(value: float = 1.0, h_list: Sequence[float] = (1 / 25, 1 / 40, 1 / 60)) -> SweepCase:
    """定数の製造解（誤差は丸め誤差の水準）"""
    shape = geometry.OMEGA1
    return SweepCase(
        name="omega1_constant",
        shape=shape,
        layout=geometry.default_layout(shape),
        extent=(-2.0, 2.0),
        h_list=h_list,
        exact=constant(value),
        U_exact=np.full(16, value),
    )


def compatibility_case(currents: Optional[Sequence[float]] = None,
                       h_list: Sequence[float] = DESK_H,
                       epsilon: float = DEFAULT_EPSILON) -> SweepCase:
    """f = g = 0 で εU₁ → ΣI_m を確かめる（既定は I = e₁）"""
    shape = geometry.OMEGA1
    layout = geometry.default_layout(shape)
    if currents is None:
        currents = np.eye(layout.count)[0]
    return SweepCase(
        name="omega1_compatibility",
        shape=shape,
        layout=layout,
        extent=(-2.0, 2.0),
        h_list=h_list,
        currents=np.asarray(currents, dtype=float),
        epsilon=epsilon,
    )


def named_cases(name: str, full_scale: bool = False, epsilon: float = DEFAULT_EPSILON) -> List[SweepCase]:
    if name == "shapes":
        return shape_cases(full_scale, epsilon)
    if name == "admittivity":
        return admittivity_cases(full_scale, epsilon)
    if name == "compatibility":
        return [compatibility_case(epsilon=epsilon)]
    if name == "constant":
        return [constant_case()]
    raise KeyError(f"不明なスイープ: {name}")
