"""
Spatio-temporal traffic forecasting: sliding windows, the temporal/spatial/temporal
GCN stack, training with ADAM and the memory/horizon sweeps.
"""
import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..errors import DomainError, NumericError, ShapeError
from .graph import Graph, propagation
from .ingest import SnapshotSeries, channel_index
from .nn_core import (
    LayerParams,
    ModelParams,
    adam_init,
    adam_step,
    dense_backward,
    dense_forward,
    graph_conv_backward,
    graph_conv_forward,
    init_weight,
    l2_loss,
    l2_loss_backward,
    relu,
    relu_backward,
    temporal_conv_backward,
    temporal_conv_forward,
)

logger = logging.getLogger(__name__)

EVAL_CHUNK = 64


@dataclass(frozen=True)
class WindowBatch:
    inputs: np.ndarray
    targets: np.ndarray
    window_start_indices: Tuple[int, ...]

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.targets.ndim != 3:
            raise ShapeError(f"inputs must be B x m x N x d and targets B x k x N, got {self.inputs.shape}, {self.targets.shape}")
        if self.inputs.shape[0] != self.targets.shape[0] or self.inputs.shape[2] != self.targets.shape[2]:
            raise ShapeError(f"inputs {self.inputs.shape} and targets {self.targets.shape} disagree")

    @property
    def B(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    @property
    def k(self) -> int:
        return self.targets.shape[1]

    def take(self, rows) -> "WindowBatch":
        rows = np.asarray(rows)
        return WindowBatch(self.inputs[rows], self.targets[rows], tuple(self.window_start_indices[i] for i in rows))


def build_windows(series: SnapshotSeries, m: int, k: int, target_channel: int | str = "internet") -> WindowBatch:
    """Every stride-1 window: inputs [i, i+m), targets of one channel over [i+m, i+m+k)."""
    if m < 1 or k < 1:
        raise DomainError(f"m and k must be >= 1, got m={m}, k={k}")
    if m + k > series.T:
        raise DomainError(f"m + k = {m} + {k} exceeds the {series.T} snapshots available")
    column = channel_index(target_channel, series.channels)
    starts = np.arange(series.T - m - k + 1)
    values = series.values
    inputs = values[starts[:, None] + np.arange(m)]
    targets = values[starts[:, None] + m + np.arange(k), :, column]
    return WindowBatch(inputs, targets, tuple(int(s) for s in starts))


@dataclass(frozen=True)
class ChannelScaler:
    """Per-channel z-score fitted on a training series."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray) -> "ChannelScaler":
        values = np.asarray(values, dtype=np.float64)
        flat = values.reshape(-1, values.shape[-1])
        std = flat.std(axis=0)
        std[std == 0] = 1.0
        return cls(flat.mean(axis=0), std)

    @classmethod
    def identity(cls, d: int) -> "ChannelScaler":
        return cls(np.zeros(d), np.ones(d))

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def transform_channel(self, values: np.ndarray, column: int) -> np.ndarray:
        return (values - self.mean[column]) / self.std[column]

    def inverse_channel(self, values: np.ndarray, column: int) -> np.ndarray:
        return values * self.std[column] + self.mean[column]


def effective_kernel_width(m: int, kernel_width: int) -> int:
    """Largest width <= kernel_width leaving a time step after both temporal convolutions."""
    return max(1, min(kernel_width, (m + 1) // 2))


@dataclass
class ForecastModel:
    temporal_in: LayerParams
    spatial: LayerParams
    temporal_out: LayerParams
    head: LayerParams
    m: int
    k: int
    target_column: int = 4
    scaler: Optional[ChannelScaler] = None

    def __post_init__(self):
        if self.m - 2 * (self.kernel_width - 1) < 1:
            raise ShapeError(f"kernel width {self.kernel_width} leaves no time step for m = {self.m}")
        if self.temporal_out.weight.shape[0] != self.kernel_width:
            raise ShapeError("both temporal kernels must have the same width")
        expected = (self.remaining_steps * self.temporal_out.weight.shape[2], self.k)
        if self.head.weight.shape != expected:
            raise ShapeError(f"head must be {expected}, got {self.head.weight.shape}")

    @property
    def kernel_width(self) -> int:
        return self.temporal_in.weight.shape[0]

    @property
    def remaining_steps(self) -> int:
        return self.m - 2 * (self.kernel_width - 1)

    def params(self) -> ModelParams:
        items = []
        for layer in (self.temporal_in, self.spatial, self.temporal_out, self.head):
            items.extend(layer.items())
        return ModelParams(items)

    def with_params(self, params: ModelParams) -> "ForecastModel":
        layers = [
            LayerParams(name, params[f"{name}.weight"], params.get(f"{name}.bias"))
            for name in ("temporal_in", "spatial", "temporal_out", "head")
        ]
        return ForecastModel(*layers, self.m, self.k, self.target_column, self.scaler)


def init_forecaster(m: int, k: int, d: int, seed: int, kernel_width: int = 3, temporal_channels: int = 16,
                    spatial_channels: int = 16, out_channels: int = 8, use_bias: bool = False,
                    target_column: int = 4, scaler: ChannelScaler | None = None) -> ForecastModel:
    width = effective_kernel_width(m, kernel_width)
    remaining = m - 2 * (width - 1)
    rng = np.random.default_rng(seed)

    def layer(name, fan_in, fan_out, shape=None):
        bias = np.zeros(fan_out) if use_bias else None
        return LayerParams(name, init_weight(fan_in, fan_out, rng, shape), bias)

    return ForecastModel(
        layer("temporal_in", width * d, temporal_channels, (width, d, temporal_channels)),
        layer("spatial", temporal_channels, spatial_channels),
        layer("temporal_out", width * spatial_channels, out_channels, (width, spatial_channels, out_channels)),
        layer("head", remaining * out_channels, k),
        m,
        k,
        target_column,
        scaler,
    )


@dataclass
class ForecastCache:
    temporal_in: object
    pre_in: np.ndarray
    spatial: object
    temporal_out: object
    pre_out: np.ndarray
    head: object


def forecast_forward_batch(model: ForecastModel, L, X: np.ndarray) -> Tuple[np.ndarray, ForecastCache]:
    """B x m x N x d windows -> B x k x N predictions."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != model.m or X.shape[3] != model.temporal_in.weight.shape[1]:
        raise ShapeError(f"windows {X.shape} do not match model (m={model.m}, d={model.temporal_in.weight.shape[1]})")
    pre_in, c_in = temporal_conv_forward(X, model.temporal_in.weight, model.temporal_in.bias)
    spatial, c_spatial = graph_conv_forward(L, relu(pre_in), model.spatial.weight, model.spatial.bias)
    pre_out, c_out = temporal_conv_forward(spatial, model.temporal_out.weight, model.temporal_out.bias)
    B, steps, N, channels = pre_out.shape
    flat = relu(pre_out).transpose(0, 2, 1, 3).reshape(B, N, steps * channels)
    out, c_head = dense_forward(flat, model.head.weight, model.head.bias)
    return out.transpose(0, 2, 1), ForecastCache(c_in, pre_in, c_spatial, c_out, pre_out, c_head)


def forecast_forward(model: ForecastModel, L, window: np.ndarray) -> np.ndarray:
    """One m x N x d window -> k x N prediction."""
    window = np.asarray(window, dtype=np.float64)
    if window.ndim != 3:
        raise ShapeError(f"window must be m x N x d, got {window.shape}")
    prediction, _ = forecast_forward_batch(model, L, window[None])
    return prediction[0]


def forecast_backward(cache: ForecastCache, grad_pred: np.ndarray) -> Dict[str, np.ndarray]:
    B, steps, N, channels = cache.pre_out.shape
    grad_flat, g_head_w, g_head_b = dense_backward(cache.head, grad_pred.transpose(0, 2, 1))
    grad_relu_out = grad_flat.reshape(B, N, steps, channels).transpose(0, 2, 1, 3)
    grad_spatial, g_out_w, g_out_b = temporal_conv_backward(cache.temporal_out, relu_backward(cache.pre_out, grad_relu_out))
    grad_relu_in, g_sp_w, g_sp_b = graph_conv_backward(cache.spatial, grad_spatial)
    _, g_in_w, g_in_b = temporal_conv_backward(cache.temporal_in, relu_backward(cache.pre_in, grad_relu_in))
    grads = {}
    for name, weight, bias in (
        ("temporal_in", g_in_w, g_in_b),
        ("spatial", g_sp_w, g_sp_b),
        ("temporal_out", g_out_w, g_out_b),
        ("head", g_head_w, g_head_b),
    ):
        grads[f"{name}.weight"] = weight
        if bias is not None:
            grads[f"{name}.bias"] = bias
    return grads


def forecast_loss(model: ForecastModel, L, X: np.ndarray, Y: np.ndarray) -> Tuple[float, Dict[str, np.ndarray]]:
    prediction, cache = forecast_forward_batch(model, L, X)
    return l2_loss(prediction, Y), forecast_backward(cache, l2_loss_backward(prediction, Y))


def loss_fn(template: ForecastModel):
    """(params, (L, X, Y)) -> (loss, grads), for gradient_check."""
    def evaluate(params: ModelParams, inputs):
        L, X, Y = inputs
        return forecast_loss(template.with_params(params), L, X, Y)
    return evaluate


@dataclass
class TrainingHistory:
    step_losses: List[float] = field(default_factory=list)
    epoch_losses: List[float] = field(default_factory=list)
    wall_time_per_epoch: List[float] = field(default_factory=list)


@dataclass(frozen=True)
class MetricsReport:
    rmse: float
    mae: float
    per_epoch_loss: Tuple[float, ...] = ()
    wall_time_per_epoch: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        if not (math.isfinite(self.rmse) and math.isfinite(self.mae)):
            raise NumericError(f"non-finite metrics: rmse={self.rmse}, mae={self.mae}")
        if self.mae < 0 or self.rmse < self.mae - 1e-12 * max(1.0, self.rmse):
            raise DomainError(f"rmse {self.rmse} must dominate mae {self.mae} >= 0")

    @property
    def sec_per_epoch(self) -> float:
        return float(np.mean(self.wall_time_per_epoch)) if self.wall_time_per_epoch else 0.0


def _scaled(model: ForecastModel, batch: WindowBatch) -> Tuple[np.ndarray, np.ndarray]:
    scaler = model.scaler or ChannelScaler.identity(batch.inputs.shape[-1])
    return scaler.transform(batch.inputs), scaler.transform_channel(batch.targets, model.target_column)


def train_forecaster(graph: Graph, train_series: SnapshotSeries, m: int, k: int, config) -> Tuple[ForecastModel, TrainingHistory]:
    """Mini-batch ADAM on the l2 loss over seeded shuffles of every training window."""
    column = channel_index(config.target_channel, train_series.channels)
    windows = build_windows(train_series, m, k, column)
    scaler = ChannelScaler.fit(train_series.values)
    model = init_forecaster(
        m, k, train_series.d, config.seed, config.kernel_width, config.temporal_channels,
        config.spatial_channels, config.out_channels, config.use_bias, column, scaler,
    )
    L = propagation(graph, config.propagation, repair=config.method2_repair, self_loops=config.method2_self_loops)
    inputs, targets = _scaled(model, windows)
    params = model.params()
    state = adam_init(params, config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    history = TrainingHistory()
    logger.info("training forecaster m=%d k=%d K_t=%d on %d windows", m, k, model.kernel_width, windows.B)

    for epoch in tqdm(range(config.epochs), desc=f"forecast m={m} k={k}", disable=not config.progress, leave=False):
        began = time.perf_counter()
        order = rng.permutation(windows.B)
        losses = []
        for step, start in enumerate(range(0, windows.B, config.batch)):
            rows = order[start:start + config.batch]
            try:
                loss, grads = forecast_loss(model, L, inputs[rows], targets[rows])
                params, state = adam_step(params, grads, state)
            except NumericError as exc:
                raise NumericError(f"forecaster epoch {epoch} step {step}: {exc}") from exc
            if not math.isfinite(loss):
                raise NumericError(f"forecaster epoch {epoch} step {step}: loss is {loss}")
            model = model.with_params(params)
            losses.append(loss)
        history.step_losses.extend(losses)
        history.epoch_losses.append(float(np.mean(losses)))
        history.wall_time_per_epoch.append(max(time.perf_counter() - began, 1e-9))
        logger.debug("epoch %d mean loss %.5f (%.2fs)", epoch, history.epoch_losses[-1], history.wall_time_per_epoch[-1])

    return model, history


def predict(model: ForecastModel, L, batch: WindowBatch) -> np.ndarray:
    """Raw-scale B x k x N predictions."""
    scaler = model.scaler or ChannelScaler.identity(batch.inputs.shape[-1])
    chunks = [
        forecast_forward_batch(model, L, scaler.transform(batch.inputs[start:start + EVAL_CHUNK]))[0]
        for start in range(0, batch.B, EVAL_CHUNK)
    ]
    return scaler.inverse_channel(np.concatenate(chunks), model.target_column)


def metrics(predictions: np.ndarray, targets: np.ndarray, history: TrainingHistory | None = None) -> MetricsReport:
    errors = np.asarray(predictions, dtype=np.float64) - np.asarray(targets, dtype=np.float64)
    if errors.size == 0:
        raise DomainError("no errors to summarise")
    history = history or TrainingHistory()
    return MetricsReport(
        float(np.sqrt(np.mean(errors ** 2))),
        float(np.mean(np.abs(errors))),
        tuple(history.epoch_losses),
        tuple(history.wall_time_per_epoch),
    )


def evaluate_forecaster(model: ForecastModel, L, test_windows: WindowBatch, history: TrainingHistory | None = None) -> MetricsReport:
    if test_windows.B == 0:
        raise DomainError("cannot evaluate on an empty window batch")
    return metrics(predict(model, L, test_windows), test_windows.targets, history)


def evaluation_windows(series: SnapshotSeries, cut: int, m: int, k: int, target_channel: int | str) -> WindowBatch:
    """Windows whose targets all lie at or after `cut`; inputs may reach back into the training part."""
    if cut - m < 0:
        raise DomainError(f"memory m={m} reaches before the start of the series (cut {cut})")
    return build_windows(series.slice(cut - m, series.T), m, k, target_channel)


def train_cut(series: SnapshotSeries, train_fraction: float) -> int:
    cut = int(math.floor(series.T * train_fraction))
    if cut < 1 or cut >= series.T:
        raise DomainError(f"train_fraction {train_fraction} leaves an empty side for T={series.T}")
    return cut


def train_and_evaluate(graph: Graph, series: SnapshotSeries, m: int, k: int, config) -> Tuple[MetricsReport, TrainingHistory]:
    cut = train_cut(series, config.train_fraction)
    model, history = train_forecaster(graph, series.slice(0, cut), m, k, config)
    L = propagation(graph, config.propagation, repair=config.method2_repair, self_loops=config.method2_self_loops)
    report = evaluate_forecaster(model, L, evaluation_windows(series, cut, m, k, config.target_channel), history)
    logger.info("m=%d k=%d: rmse %.4f mae %.4f (%.3fs/epoch)", m, k, report.rmse, report.mae, report.sec_per_epoch)
    return report, history


@dataclass(frozen=True)
class SweepRow:
    param: str
    value: int
    report: MetricsReport
    step_losses: Tuple[float, ...] = field(default=(), compare=False)


def _sweep(graph: Graph, series: SnapshotSeries, param: str, runs: Sequence[Tuple[int, int, int]], config) -> List[SweepRow]:
    if not runs:
        raise DomainError(f"empty {param} sweep")
    for _, m, k in runs:
        if m + k > series.T:
            raise DomainError(f"m + k = {m} + {k} exceeds the {series.T} snapshots available")
    workers = max(1, int(getattr(config, "workers", 1)))
    if workers > 1 and len(runs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(runs))) as pool:
            futures = [pool.submit(train_and_evaluate, graph, series, m, k, config) for _, m, k in runs]
            results = [future.result() for future in futures]
    else:
        results = [train_and_evaluate(graph, series, m, k, config) for _, m, k in runs]
    rows = [SweepRow(param, value, report, tuple(history.step_losses)) for (value, _, _), (report, history) in zip(runs, results)]
    return sorted(rows, key=lambda row: row.value)


def sweep_memory(graph: Graph, series: SnapshotSeries, m_values: Sequence[int], k: int, config) -> List[SweepRow]:
    """One model per memory length m at fixed horizon k."""
    return _sweep(graph, series, "m", [(int(m), int(m), k) for m in m_values], config)


def sweep_horizon(graph: Graph, series: SnapshotSeries, m: int, k_values: Sequence[int], config) -> List[SweepRow]:
    """One model per horizon k at fixed memory m."""
    return _sweep(graph, series, "k", [(int(k), m, int(k)) for k in k_values], config)


def save_sweep(rows: Sequence[SweepRow], directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = directory / "sweep.csv"
    with table.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["param", "rmse", "mae", "sec_per_epoch"])
        for row in rows:
            writer.writerow([row.value, repr(row.report.rmse), repr(row.report.mae), repr(row.report.sec_per_epoch)])
    for row in rows:
        save_loss_history(row.step_losses, directory / f"loss_{row.param}_{row.value}.csv")
    return table


def save_loss_history(step_losses: Sequence[float], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for step, loss in enumerate(step_losses):
            writer.writerow([step, repr(float(loss))])
    return path
