"""
Command-line pipeline: ingest -> graph -> embed / classify / forecast / sweep.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .config import RunConfig, load_config
from .database import LEDGER_NAME, RunLedger
from .errors import CellTrafficError, ConfigError, NumericError, UsageError
from .modules.checkpoint import save_params
from .modules.classify import classify_series, save_history, save_predictions
from .modules.embedding import embed, save_embedding
from .modules.forecast import (
    evaluate_forecaster,
    evaluation_windows,
    save_loss_history,
    save_sweep,
    sweep_horizon,
    sweep_memory,
    train_cut,
    train_forecaster,
)
from .modules.graph import (
    Graph,
    build_graph,
    connected_components,
    load_graph,
    propagation,
    resolve_graph_scales,
    save_graph,
)
from .modules.ingest import (
    build_snapshots,
    load_grid,
    mean_snapshot,
    nearest_cells,
    project_grid,
    read_cdr_files,
    restrict_nodes,
)
from .modules.snapshot_cache import load_coords, load_series, save_coords, save_series
from .modules.svg_plot import emit_line_plot, emit_scatter_plot, loss_curve
from .modules.synth_bench import fixture

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
LOG_FORMAT = "[%(levelname)s] %(name)s: %(message)s"

Metrics = Dict[str, float]


def configure_logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, stream=sys.stderr, force=True)


def parse_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """`--key value` / `--key=value` pairs left over by argparse."""
    overrides: Dict[str, str] = {}
    tokens = list(tokens)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith("--") or token == "--":
            raise ConfigError(f"unexpected argument {token!r}; overrides look like --key value")
        key = token[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens) or tokens[i + 1].startswith("--"):
                raise ConfigError(f"missing value for --{key}")
            value = tokens[i + 1]
            i += 2
        overrides[key.replace("-", "_")] = value
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--config", help="Flat key = value run-config file")
    common.add_argument("--seed", type=int, help="Seed override applied last")
    common.add_argument("--fixture", help="Use a synthetic fixture (tiny_6, two_hotspots_100, periodic_200)")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(
        prog="celltraffic",
        description="Cellular traffic graph learning pipeline. Any config key can be overridden with --key value.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], allow_abbrev=False, help="CDR files + grid -> snapshot cache")
    sub.add_parser("synth", parents=[common], allow_abbrev=False, help="Write a synthetic fixture as a snapshot cache")
    sub.add_parser("graph", parents=[common], allow_abbrev=False, help="Snapshot cache -> spatial graph")
    sub.add_parser("embed", parents=[common], allow_abbrev=False, help="Node embedding (laplacian, gcn_method1, gcn_method2)")
    sub.add_parser("classify", parents=[common], allow_abbrev=False, help="High-demand node classification")
    sub.add_parser("forecast", parents=[common], allow_abbrev=False, help="Train and evaluate one forecaster")
    sweep = sub.add_parser("sweep", parents=[common], allow_abbrev=False, help="Memory (m) or horizon (k) sweep")
    sweep.add_argument("--param", choices=["m", "k"], help="Swept parameter")
    sweep.add_argument("--values", help="Comma-separated values, e.g. 1,3,6")
    return parser


def _resolve(args: argparse.Namespace, extras: Sequence[str]) -> RunConfig:
    overrides = parse_overrides(extras)
    if args.fixture:
        overrides["fixture"] = args.fixture
    if getattr(args, "param", None):
        overrides["sweep_param"] = args.param
    if getattr(args, "values", None):
        overrides["sweep_values"] = args.values
    return load_config(args.config, overrides, args.seed)


def load_inputs(config: RunConfig) -> Tuple:
    """(series, graph) from a fixture or from the cache and graph directories."""
    if config.fixture:
        fx = fixture(config.fixture)
        return fx.series, fx.graph
    series = load_series(config.cache_dir)
    graph = load_graph(config.graph_dir)
    if graph.node_ids != series.node_ids:
        raise UsageError(f"graph in {config.graph_dir} does not match the cache in {config.cache_dir} (re-run `graph`)")
    return series, graph


def cmd_ingest(config: RunConfig) -> Metrics:
    if not config.cdr or not config.grid:
        raise UsageError("ingest needs --cdr FILE[,FILE...] and --grid FILE")
    grid = load_grid(config.grid)
    paths = [p.strip() for p in config.cdr.split(",") if p.strip()]
    records = read_cdr_files(paths, config.workers)
    series = build_snapshots(records, grid, config.interval_minutes * 60 * 1000)
    if config.node_count:
        series = restrict_nodes(series, nearest_cells(grid, config.center_cell, config.node_count))
        print(f"[INFO] kept the {series.N} cells nearest cell {config.center_cell}")
    save_series(series, config.cache_dir)
    save_coords(series.node_ids, project_grid(grid, series.node_ids), config.cache_dir)
    config.write(config.cache_dir)
    print(f"[INFO] N={series.N} d={series.d} T={series.T} interval={series.interval_ms // 60000}min -> {config.cache_dir}")
    return {"N": series.N, "d": series.d, "T": series.T, "records": len(records)}


def cmd_synth(config: RunConfig) -> Metrics:
    if not config.fixture:
        raise UsageError("synth needs --fixture NAME")
    fx = fixture(config.fixture)
    save_series(fx.series, config.cache_dir)
    save_coords(fx.series.node_ids, fx.coords, config.cache_dir)
    config.write(config.cache_dir)
    series = fx.series
    print(f"[INFO] fixture {fx.name}: N={series.N} d={series.d} T={series.T} sha256={fx.metadata['sha256'][:12]} -> {config.cache_dir}")
    return {"N": series.N, "d": series.d, "T": series.T}


def cmd_graph(config: RunConfig) -> Metrics:
    if config.fixture:
        fx = fixture(config.fixture)
        node_ids, coords = fx.series.node_ids, fx.coords
    else:
        node_ids = load_series(config.cache_dir).node_ids
        coords = load_coords(config.cache_dir, node_ids)
    config = config.replace(**resolve_graph_scales(coords, config.edge_radius_m, config.sigma_m))
    graph = build_graph(coords, node_ids, config.graph_kind, config.edge_radius_m, config.sigma_m, config.weight_floor)
    components, _ = connected_components(graph)
    save_graph(graph, config.graph_dir)
    config.write(config.graph_dir)
    print(f"[INFO] {config.graph_kind} graph: N={graph.N} edges={graph.edge_count} components={components} "
          f"radius={config.edge_radius_m:.1f}m -> {config.graph_dir}")
    return {"N": graph.N, "edges": graph.edge_count, "components": components, "edge_radius_m": config.edge_radius_m}


def cmd_embed(config: RunConfig) -> Metrics:
    series, graph = load_inputs(config)
    result = embed(graph, mean_snapshot(series).features, config.embed_method, config.embed_dims, config.embed_layers,
                   config.seed, config.feature_subset, config.feature_sigma, repair=config.method2_repair)
    out = Path(config.out_dir)
    save_embedding(result, graph.node_ids, out / "embedding.csv")
    coords = result.coords if result.dims >= 2 else np.column_stack([np.arange(graph.N), result.coords[:, 0]])
    _, groups = connected_components(graph)
    emit_scatter_plot(coords[:, :2], groups, out / "embedding.svg", title=f"{result.method} embedding",
                      x_label="e1" if result.dims >= 2 else "node", y_label="e2" if result.dims >= 2 else "e1")
    config.write(out)
    print(f"[INFO] {result.method} embedding: N={graph.N} dims={result.dims} -> {out / 'embedding.csv'}")
    return {"N": graph.N, "dims": result.dims}


def cmd_classify(config: RunConfig) -> Metrics:
    series, graph = load_inputs(config)
    result = classify_series(graph, series, config)
    out = Path(config.out_dir)
    save_predictions(result, out / "predictions.csv")
    save_history(result.history, out / "classify_history.csv")
    if len(result.history) >= 2:
        emit_line_plot([[(r.epoch, r.loss) for r in result.history]], ["train loss"], out / "classify_loss.svg",
                       title="classifier training loss", x_label="epoch", y_label="cross-entropy")
    save_params(result.model.params(), out / "classifier.params",
                {"kappa": result.labeled.kappa, "feature_scale": result.scale, "snapshot": result.snapshot_index})
    config.write(out)
    print(f"[INFO] kappa={result.labeled.kappa:.4f} positives={int(result.labeled.labels.sum())}/{graph.N}")
    print(f"[INFO] accuracy: train {result.train_accuracy:.3f} held-out {result.heldout_accuracy:.3f}")
    return {"kappa": result.labeled.kappa, "train_accuracy": result.train_accuracy, "heldout_accuracy": result.heldout_accuracy}


def cmd_forecast(config: RunConfig) -> Metrics:
    series, graph = load_inputs(config)
    cut = train_cut(series, config.train_fraction)
    test_windows = evaluation_windows(series, cut, config.m, config.k, config.target_channel)
    model, history = train_forecaster(graph, series.slice(0, cut), config.m, config.k, config)
    L = propagation(graph, config.propagation, repair=config.method2_repair, self_loops=config.method2_self_loops)
    report = evaluate_forecaster(model, L, test_windows, history)
    out = Path(config.out_dir)
    save_loss_history(history.step_losses, out / "forecast_loss.csv")
    if len(history.step_losses) >= 2:
        emit_line_plot([loss_curve(history.step_losses)], [f"m={config.m} k={config.k}"], out / "forecast_loss.svg",
                       title="forecaster training loss", x_label="step", y_label="l2 loss")
    with (out / "forecast_metrics.csv").open("w", encoding="utf-8") as handle:
        handle.write("m,k,rmse,mae,sec_per_epoch\n")
        handle.write(f"{config.m},{config.k},{report.rmse!r},{report.mae!r},{report.sec_per_epoch!r}\n")
    save_params(model.params(), out / "forecaster.params", {"m": config.m, "k": config.k, "kernel_width": model.kernel_width})
    config.write(out)
    print(f"[INFO] m={config.m} k={config.k}: rmse={report.rmse:.4f} mae={report.mae:.4f} ({report.sec_per_epoch:.3f}s/epoch)")
    return {"rmse": report.rmse, "mae": report.mae, "sec_per_epoch": report.sec_per_epoch}


def cmd_sweep(config: RunConfig) -> Metrics:
    series, graph = load_inputs(config)
    values = list(config.sweep_values)
    if config.sweep_param == "m":
        rows = sweep_memory(graph, series, values, config.k, config)
    else:
        rows = sweep_horizon(graph, series, config.m, values, config)
    out = Path(config.out_dir) / f"sweep_{config.sweep_param}"
    save_sweep(rows, out)
    if len(rows) >= 2:
        emit_line_plot(
            [[(row.value, row.report.rmse) for row in rows], [(row.value, row.report.mae) for row in rows]],
            ["rmse", "mae"],
            out / f"sweep_{config.sweep_param}.svg",
            title=f"test error vs {config.sweep_param}",
            x_label=config.sweep_param,
            y_label="error",
        )
    else:
        logger.warning("single-value sweep: no plot written")
    config.write(out)
    print(f"[INFO] {config.sweep_param:>3} {'rmse':>10} {'mae':>10} {'s/epoch':>8}")
    metrics: Metrics = {}
    for row in rows:
        print(f"[INFO] {row.value:>3} {row.report.rmse:>10.4f} {row.report.mae:>10.4f} {row.report.sec_per_epoch:>8.3f}")
        metrics[f"rmse_{config.sweep_param}{row.value}"] = row.report.rmse
        metrics[f"mae_{config.sweep_param}{row.value}"] = row.report.mae
    return metrics


HANDLERS: Dict[str, Callable[[RunConfig], Metrics]] = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "graph": cmd_graph,
    "embed": cmd_embed,
    "classify": cmd_classify,
    "forecast": cmd_forecast,
    "sweep": cmd_sweep,
}


def main(argv: List[str] | None = None) -> int:
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    configure_logging(args.verbose)

    ledger, run_id = None, None
    code, message = EXIT_OK, ""
    try:
        config = _resolve(args, extras)
        ledger = RunLedger(Path(config.out_dir) / LEDGER_NAME)
        run_id = ledger.start_run(args.command, config.as_dict())
        metrics = HANDLERS[args.command](config)
        ledger.record_metrics(run_id, metrics)
    except NumericError as exc:
        code, message = EXIT_NUMERIC, str(exc)
        print(f"[ERROR] numeric failure in {args.command}: {exc}", file=sys.stderr)
    except (CellTrafficError, FileNotFoundError) as exc:
        code, message = EXIT_USAGE, str(exc)
        print(f"[ERROR] {args.command}: {exc}", file=sys.stderr)
    finally:
        if ledger is not None and run_id is not None:
            ledger.finish_run(run_id, code, message)
    return code


if __name__ == "__main__":
    sys.exit(main())
