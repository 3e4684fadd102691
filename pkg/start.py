#!/usr/bin/env python3
"""
完全電極モデル（CEM）ソルバー 起動スクリプト

サブコマンド: forward, make-data, convergence, invert-sigma, invert-electrodes, dump-mesh
終了コード: 0 成功、2 設定エラー、3 数値計算エラー
"""

from dataclasses import replace
from datetime import datetime
from typing import Any, Callable, Dict, Optional, Tuple
import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from models.errors import ConfigError, EITError
from models.run_config import DataConfig, GridConfig, RunConfig
from services import conductivity_inversion, electrode_inversion, geometry
from services.cartesian_mesh import INTERIOR, build_mesh, mesh_summary
from services.conductivity_field import ConstantConductivity, InclusionConductivity
from services.config_loader import build_patterns, build_sigma, build_solver_settings, dump_config, load_config
from services.conductivity_inversion import (
    ConductivityInversion, InversionSettings, add_noise, inclusion_centroid, local_maxima, synthetic_measurements,
)
from services.convergence_harness import ConvergenceHarness, named_cases
from services.data_manager import DataManager
from services.electrode_inversion import (
    ElectrodeInversion, ElectrodeInversionSettings, calibrate_endpoint_signs,
)
from services.forward_solver import ForwardSolver, field_frame, ground_measurements
from services.system_assembly import assemble

logger = logging.getLogger("start")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def require(config: RunConfig, *blocks: str) -> None:
    missing = config.missing(*blocks)
    if missing:
        raise ConfigError(f"このコマンドには設定ブロックが必要です: {', '.join(missing)}")


def grid_of(config: RunConfig) -> GridConfig:
    require(config, "grid")
    return config.grid


def shape_and_layout(config: RunConfig):
    require(config, "geometry", "electrodes")
    shape = config.geometry.boundary_shape()
    try:
        layout = config.electrodes.layout(shape)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"電極配置が不正です: {str(e)}") from e
    return shape, layout


def cmd_forward(config: RunConfig, dm: DataManager) -> Dict[str, Any]:
    """
    順問題を解き、パターンごとの場（CSV と PGM）と接地済み測定行列を書く
    """
    shape, layout = shape_and_layout(config)
    grid = grid_of(config)
    sigma = build_sigma(config.physics.sigma, config)
    patterns = build_patterns(config.currents, layout.count)

    with dm.timer("setup"):
        solver = ForwardSolver.build(
            shape, layout, grid.extent, sigma, h=grid.h, resolution=grid.resolution,
            ground_mode=config.physics.ground_mode, epsilon=config.physics.epsilon,
            settings=build_solver_settings(config.solver),
        )
    with dm.timer("solve"):
        Umat, solutions = solver.solve_patterns(patterns, compatible=True)

    labels = list(patterns.labels) or [f"pattern_{p + 1}" for p in range(patterns.pattern_count)]
    for label, solution in zip(labels, solutions):
        dm.write_frame(field_frame(solution), f"field_{label}.csv")
        dm.write_pgm(solution.grid_values(), f"field_{label}.pgm")
    dm.write_measurements(ground_measurements(Umat, config.physics.ground_mode), "measurements.csv", labels)
    dm.write_mesh_summary(mesh_summary(solver.mesh))

    print(f"✅ {patterns.pattern_count} パターンを解きました（未知数 {solver.system.size}）")
    return {
        "unknowns": solver.system.size,
        "patterns": patterns.pattern_count,
        "clamped_points": solver.mesh.clamped_count,
        "max_abs_U": float(np.abs(Umat).max(initial=0.0)),
    }


def cmd_make_data(config: RunConfig, dm: DataManager) -> Dict[str, Any]:
    """
    細かい格子で 𝓤 を計算し、接地・ノイズ付加して clean / noisy の CSV を書く
    """
    shape, layout = shape_and_layout(config)
    data = config.data or DataConfig()
    extent = config.grid.extent if config.grid else GridConfig.model_fields["extent"].default
    sigma = build_sigma(config.physics.sigma, config)
    patterns = build_patterns(config.currents, layout.count)
    rng = np.random.default_rng(config.seed)

    with dm.timer("solve"):
        clean = synthetic_measurements(shape, layout, extent, sigma, patterns, data.resolution,
                                       epsilon=config.physics.epsilon,
                                       settings=build_solver_settings(config.solver))
    noisy = add_noise(clean, data.noise, rng)
    dm.write_measurements(clean, "measurements_clean.csv", patterns.labels)
    dm.write_measurements(noisy, "measurements.csv", patterns.labels)

    relative = float(np.linalg.norm(noisy - clean) / max(np.linalg.norm(clean), 1e-300))
    print(f"✅ 測定データを生成しました（{clean.shape[0]}×{clean.shape[1]}、相対ノイズ {relative:.3e}）")
    return {"resolution": data.resolution, "noise": data.noise, "relative_noise": relative}


def cmd_convergence(config: RunConfig, dm: DataManager) -> Dict[str, Any]:
    """製造解による h スイープ"""
    require(config, "sweep")
    sweep = config.sweep
    cases = named_cases(sweep.name, sweep.full_scale, config.physics.epsilon)
    if sweep.h_list:
        cases = [replace(case, h_list=tuple(sweep.h_list)) for case in cases]

    harness = ConvergenceHarness()
    items: Dict[str, Any] = {}
    for case in cases:
        with dm.timer(case.name):
            report = harness.run_sweep(case)
        harness.write_report(report, dm)
        for column, fit in report.fits.items():
            items[f"{case.name}.{column}"] = fit.label()
        for message in report.errors:
            logger.warning(f"[{case.name}] {message}")
        print(f"📈 {case.name}: " + ", ".join(f"{k}={v.label()}" for k, v in report.fits.items()))
    return items


def _sigma_problem(config: RunConfig):
    """(shape, layout, extent, 真の σ, σ★, patterns)"""
    inv = config.inversion
    if inv.fixture is not None:
        fixture = conductivity_inversion.FIXTURES[inv.fixture]()
        return fixture.shape, fixture.layout, fixture.extent, fixture.truth, fixture.background, fixture.patterns
    shape, layout = shape_and_layout(config)
    truth = build_sigma(config.physics.sigma, config)
    extent = grid_of(config).extent
    return shape, layout, extent, truth, ConstantConductivity(inv.background), \
        build_patterns(config.currents, layout.count)


def cmd_invert_sigma(config: RunConfig, dm: DataManager) -> Dict[str, Any]:
    """
    導電率の再構成

    inversion.measurements がなければ data.resolution の細かい格子で合成データを作る。
    """
    require(config, "inversion")
    inv = config.inversion
    grid = grid_of(config)
    shape, layout, extent, truth, background, patterns = _sigma_problem(config)
    settings = build_solver_settings(config.solver)

    if inv.measurements:
        path = config.resolve_path(inv.measurements)
        if not path.exists():
            raise FileNotFoundError(f"測定 CSV が見つかりません: {path}")
        measurements = DataManager.read_measurements(path, shape=(layout.count, patterns.pattern_count))
    else:
        data = config.data or DataConfig()
        with dm.timer("data"):
            clean = synthetic_measurements(shape, layout, extent, truth, patterns, data.resolution,
                                           epsilon=config.physics.epsilon, settings=settings)
        measurements = add_noise(clean, data.noise, np.random.default_rng(config.seed))
        dm.write_measurements(measurements, "measurements.csv", patterns.labels)

    mesh = build_mesh(shape, layout, extent, h=grid.h, resolution=grid.resolution)
    inversion = ConductivityInversion(mesh, patterns, measurements, background, InversionSettings(
        reg_weight=inv.reg_weight, tau_stop=inv.tau_stop, max_iter=inv.max_iter, t_max=inv.t_max,
        sigma_min=inv.sigma_min, epsilon=config.physics.epsilon, solver=settings,
    ))

    items: Dict[str, Any] = {"unknowns": mesh.n_interior, "patterns": patterns.pattern_count}
    if inv.check_derivative:
        with dm.timer("derivative_check"):
            predicted, fd = inversion.directional_derivative_check(np.zeros(mesh.n_interior))
        items["slope_predicted"] = predicted
        items["slope_finite_difference"] = fd
        items["slope_relative_error"] = abs(predicted - fd) / max(abs(fd), 1e-300)
        print(f"🔎 方向微分: 予測 {predicted:.6e} / 差分 {fd:.6e}")

    with dm.timer("reconstruct"):
        state = inversion.reconstruct()
    dm.write_history(state.history, "history.csv")

    I, J = mesh.interior_nodes()
    xy = mesh.node_xy(I, J)
    dm.write_frame(pd.DataFrame({
        "x": xy[:, 0], "y": xy[:, 1],
        "sigma": inversion.background_nodes + state.delta, "delta": state.delta,
    }), "sigma.csv")
    dm.write_pgm(inversion.field_grid(state.delta), "sigma.pgm")

    items.update({"iterations": state.n, "F": state.F, "stop_reason": state.stop_reason.value})
    centroid = inclusion_centroid(mesh, state.delta)
    if centroid is not None:
        items["centroid"] = [float(c) for c in centroid]
        if isinstance(truth, InclusionConductivity) and len(truth.inclusions) == 1:
            items["centroid_error"] = float(np.linalg.norm(centroid - np.asarray(truth.inclusions[0].center)))
    items["local_maxima"] = [[round(v, 6) for v in peak] for peak in local_maxima(mesh, state.delta)]
    print(f"✅ 再構成終了: n={state.n}, F={state.F:.6e}（{state.stop_reason.value}）")
    return items


def _electrode_problem(config: RunConfig):
    """(shape, extent, truth, start, prior, mode, lengths, patterns)"""
    ei = config.electrode_inversion
    if ei.fixture is not None:
        fixture = electrode_inversion.FIXTURES[ei.fixture]()
        return (fixture.shape, fixture.extent, fixture.truth, fixture.start, fixture.start,
                fixture.mode, fixture.lengths, fixture.patterns)
    shape, truth = shape_and_layout(config)
    lengths = ei.lengths or [arc.length for arc in geometry.electrode_arcs(shape, truth)]
    try:
        if ei.start_theta2 is not None:
            start = geometry.make_layout(ei.start_theta1, ei.start_theta2, z=truth.z, kind=truth.kind,
                                         support_fraction=truth.support_fraction)
        else:
            start = geometry.layout_from_length(shape, ei.start_theta1, lengths, z=truth.z, kind=truth.kind,
                                                support_fraction=truth.support_fraction)
        prior = start
        if ei.prior_theta1 is not None:
            if ei.prior_theta2 is not None:
                prior = geometry.make_layout(ei.prior_theta1, ei.prior_theta2, z=truth.z, kind=truth.kind,
                                             support_fraction=truth.support_fraction)
            else:
                prior = geometry.layout_from_length(shape, ei.prior_theta1, lengths, z=truth.z,
                                                    kind=truth.kind, support_fraction=truth.support_fraction)
    except (ValidationError, ValueError) as e:
        raise ConfigError(f"電極の初期値・事前値が不正です: {str(e)}") from e
    return (shape, grid_of(config).extent, truth, start, prior, ei.mode, lengths,
            build_patterns(config.currents, truth.count))


def cmd_invert_electrodes(config: RunConfig, dm: DataManager) -> Dict[str, Any]:
    """電極角の推定（必要なら端点の符号を差分で較正してから解く）"""
    require(config, "electrode_inversion")
    ei = config.electrode_inversion
    grid = grid_of(config)
    shape, extent, truth, start, prior, mode, lengths, patterns = _electrode_problem(config)
    sigma = build_sigma(config.physics.sigma, config)

    if ei.measurements:
        path = config.resolve_path(ei.measurements)
        if not path.exists():
            raise FileNotFoundError(f"測定 CSV が見つかりません: {path}")
        measurements = DataManager.read_measurements(path, shape=(truth.count, patterns.pattern_count))
    else:
        with dm.timer("data"):
            truth_solver = ForwardSolver.build(shape, truth, extent, sigma, h=grid.h, resolution=grid.resolution,
                                               epsilon=config.physics.epsilon,
                                               settings=build_solver_settings(config.solver))
            measurements = truth_solver.measurements(patterns)
        dm.write_measurements(measurements, "measurements.csv", patterns.labels)

    settings = ElectrodeInversionSettings(
        mode=mode, reg_weight=ei.reg_weight, max_iter=ei.max_iter, grad_tol=ei.grad_tol,
        step_tol=ei.step_tol, initial_step=ei.initial_step, epsilon=config.physics.epsilon,
        solver=build_solver_settings(config.solver),
    )
    inversion = ElectrodeInversion(shape, extent, sigma, patterns, measurements, prior,
                                   h=grid.h, resolution=grid.resolution, settings=settings, lengths=lengths)

    items: Dict[str, Any] = {"mode": mode.value}
    calibration: Optional[Dict[str, Any]] = None
    if ei.calibrate:
        with dm.timer("calibration"):
            calibration = calibrate_endpoint_signs(inversion, start)
        signs = tuple(calibration["signs"])
        if signs != settings.signs:
            logger.warning(f"較正した符号 {signs} が既定値 {settings.signs} と異なるため較正値を使います")
            inversion.settings = replace(settings, signs=signs)
        items["signs"] = list(signs)
        print(f"🔎 端点の符号: {signs}（相対誤差 {calibration['relative_error']}）")

    with dm.timer("reconstruct"):
        state = inversion.reconstruct(start)
    dm.write_history(state.history, "history.csv")

    result = state.layout
    dm.write_frame(pd.DataFrame({
        "electrode": np.arange(1, result.count + 1),
        "theta1": result.theta1, "theta2": result.theta2,
        "theta1_true": truth.theta1, "theta2_true": truth.theta2,
        "theta1_start": start.theta1, "theta2_start": start.theta2,
    }), "electrodes.csv")

    error = max(float(np.abs(np.subtract(result.theta1, truth.theta1)).max()),
                float(np.abs(np.subtract(result.theta2, truth.theta2)).max()))
    items.update({"iterations": state.n, "F": state.F, "stop_reason": state.stop_reason.value,
                  "max_angle_error": error})
    if calibration is not None:
        items["calibration"] = calibration
    print(f"✅ 電極推定終了: n={state.n}, F={state.F:.6e}, 最大誤差 {error:.3e}（{state.stop_reason.value}）")
    return items


def cmd_dump_mesh(config: RunConfig, dm: DataManager) -> Dict[str, Any]:
    """格子の分類統計（と必要なら A_h の COO）を書く"""
    shape, layout = shape_and_layout(config)
    grid = grid_of(config)
    dump = config.dump
    mesh = build_mesh(shape, layout, grid.extent, h=grid.h, resolution=grid.resolution)
    summary = mesh_summary(mesh)
    dm.write_mesh_summary(summary)

    if dump is None or dump.field:
        X, Y = np.meshgrid(mesh.coords, mesh.coords, indexing="ij")
        nodes = pd.DataFrame({"x": X.ravel(), "y": Y.ravel(), "region": mesh.region.ravel(),
                              "index": mesh.node_index.ravel()})
        dm.write_frame(nodes, "nodes.csv")
        dm.write_frame(pd.DataFrame({
            "x": mesh.bp_xy[:, 0], "y": mesh.bp_xy[:, 1], "theta": mesh.bp_theta,
            "orientation": mesh.bp_orientation, "electrode": mesh.bp_electrode + 1,
            "clamped": mesh.bp_clamped if len(mesh.bp_clamped) else np.zeros(mesh.n_boundary, dtype=bool),
        }), "boundary_points.csv")
        dm.write_pgm((mesh.region == INTERIOR).astype(float), "mesh.pgm")
    if dump is not None and dump.matrix:
        sigma = build_sigma(config.physics.sigma, config)
        with dm.timer("assemble"):
            system = assemble(mesh, sigma, ground_mode=config.physics.ground_mode,
                              epsilon=config.physics.epsilon)
        dm.write_matrix_coo(system.matrix, "matrix_coo.csv")

    print(f"✅ 格子: 内部 {summary.interior_nodes}、境界点 {summary.boundary_points}、未知数 {summary.unknowns}")
    return summary.model_dump()


COMMANDS: Dict[str, Tuple[Callable[[RunConfig, DataManager], Dict[str, Any]], str]] = {
    "forward": (cmd_forward, "順問題を解いて場と測定行列を書き出す"),
    "make-data": (cmd_make_data, "細かい格子で合成測定データを作る"),
    "convergence": (cmd_convergence, "製造解による h 収束を検証する"),
    "invert-sigma": (cmd_invert_sigma, "導電率を再構成する"),
    "invert-electrodes": (cmd_invert_electrodes, "電極位置を推定する"),
    "dump-mesh": (cmd_dump_mesh, "格子の分類と行列を書き出す"),
}


def configure_logging(verbose: bool) -> None:
    level = os.environ.get("EIT_LOG_LEVEL", "DEBUG" if verbose else "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


def run(command: str, config_path: str, output_dir: Optional[str] = None) -> int:
    """1つのサブコマンドを実行して終了コードを返す"""
    func, _ = COMMANDS[command]
    try:
        config = load_config(config_path)
        target = Path(output_dir) if output_dir else config.resolve_path(config.output_dir)
        dm = DataManager(target)
        started = datetime.now()
        t0 = time.perf_counter()
        print(f"📦 出力先: {target}")
        items = func(config, dm)
        seconds = time.perf_counter() - t0
        extra = {"result": items}
        dm.write_manifest(command, dump_config(config), config.seed, extra=extra)
        dm.write_run_summary(command, started, seconds,
                             {k: v for k, v in items.items() if not isinstance(v, (dict, list))})
    except (ConfigError, ValidationError, FileNotFoundError) as e:
        logger.error(f"設定エラー: {str(e)}")
        print(f"❌ 設定エラー: {str(e)}")
        return EXIT_CONFIG
    except EITError as e:
        logger.error(f"数値計算エラー: {str(e)}")
        print(f"❌ 数値計算エラー: {str(e)}")
        return EXIT_NUMERIC
    print(f"🎉 完了しました（{seconds:.1f} 秒）")
    return EXIT_OK


def main(argv: Optional[list] = None) -> int:
    parser = argparse.ArgumentParser(description="完全電極モデル（CEM）の埋め込み境界ソルバー")
    parser.add_argument("--verbose", "-v", action="store_true", help="DEBUG ログを出す")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("config", help="TOML 設定ファイル")
        sub.add_argument("--output-dir", help="出力先（設定の output_dir を上書き）")

    args = parser.parse_args(argv)
    configure_logging(args.verbose)

    print("=" * 60)
    print(f"🚀 CEM ソルバー: {args.command}")
    print("=" * 60)
    return run(args.command, args.config, args.output_dir)


if __name__ == "__main__":
    sys.exit(main())
