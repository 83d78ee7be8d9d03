"""
High-demand node classification with a two-layer GCN.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from ..errors import DomainError, NumericError, ShapeError
from .graph import Graph, PropagationMatrix, propagation
from .ingest import CHANNELS, Snapshot, SnapshotSeries, channel_index, mean_snapshot
from .nn_core import (
    EVAL,
    TRAIN,
    LayerParams,
    ModelParams,
    adam_init,
    adam_step,
    dense_backward,
    dense_forward,
    dropout_mask,
    graph_conv_backward,
    graph_conv_forward,
    init_weight,
    masked_cross_entropy,
    masked_cross_entropy_backward,
    propagate,
    propagate_transpose,
    softmax_rows,
)

logger = logging.getLogger(__name__)

PEAK = "peak"
MEAN = "mean"


@dataclass(frozen=True)
class LabeledNodes:
    labels: np.ndarray
    mask: np.ndarray
    kappa: float

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        mask = np.asarray(self.mask, dtype=bool)
        if labels.ndim != 1 or mask.shape != labels.shape:
            raise ShapeError(f"labels {labels.shape} and mask {mask.shape} must be matching N-vectors")
        if not np.isin(labels, (0, 1)).all():
            raise DomainError("labels must be 0 or 1")
        if not mask.any() or mask.all():
            raise DomainError("mask needs at least one visible and one held-out node")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "mask", mask)

    @property
    def heldout(self) -> np.ndarray:
        return ~self.mask


@dataclass
class ClassifierModel:
    layer1: LayerParams
    layer2: LayerParams
    dropout_rate: float = 0.2
    propagation: str = "method1"

    def __post_init__(self):
        if self.layer1.weight.shape[1] < 1:
            raise DomainError("hidden width must be >= 1")
        if self.layer2.weight.shape != (self.layer1.weight.shape[1], 2):
            raise ShapeError(f"layer2 must be {self.layer1.weight.shape[1]} x 2, got {self.layer2.weight.shape}")

    @property
    def hidden(self) -> int:
        return self.layer1.weight.shape[1]

    def params(self) -> ModelParams:
        return ModelParams(list(self.layer1.items()) + list(self.layer2.items()))

    def with_params(self, params: ModelParams) -> "ClassifierModel":
        return ClassifierModel(
            LayerParams("layer1", params["layer1.weight"], params.get("layer1.bias")),
            LayerParams("layer2", params["layer2.weight"], params.get("layer2.bias")),
            self.dropout_rate,
            self.propagation,
        )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    heldout_accuracy: float


@dataclass
class ClassificationResult:
    model: ClassifierModel
    labeled: LabeledNodes
    history: List[EpochRecord]
    probs: np.ndarray
    snapshot_index: int
    node_ids: Tuple[int, ...] = ()
    scale: float = 1.0

    @property
    def train_accuracy(self) -> float:
        return accuracy(self.probs, self.labeled.labels, self.labeled.mask)

    @property
    def heldout_accuracy(self) -> float:
        return accuracy(self.probs, self.labeled.labels, self.labeled.heldout)


def init_classifier(d: int, hidden: int, seed: int, dropout_rate: float = 0.2,
                    propagation_kind: str = "method1", use_bias: bool = False) -> ClassifierModel:
    if hidden < 1:
        raise DomainError("hidden width must be >= 1")
    rng = np.random.default_rng(seed)
    layer1 = LayerParams("layer1", init_weight(d, hidden, rng), np.zeros(hidden) if use_bias else None)
    layer2 = LayerParams("layer2", init_weight(hidden, 2, rng), np.zeros(2) if use_bias else None)
    return ClassifierModel(layer1, layer2, dropout_rate, propagation_kind)


def make_labels(snapshot: Snapshot | np.ndarray, channel: int | str, kappa: float,
                channels: Sequence[str] | None = None) -> np.ndarray:
    """1 where the channel value is >= kappa, else 0.

    Channel names resolve against `channels`, else the snapshot's own names.
    A bare array with other than the five CDR columns is named f0, f1, ...
    """
    if isinstance(snapshot, Snapshot):
        features, names = snapshot.features, snapshot.channels
    else:
        features, names = np.asarray(snapshot, dtype=np.float64), None
    width = features.shape[1]
    names = tuple(channels) if channels is not None else names
    if names is None:
        names = CHANNELS if width == len(CHANNELS) else tuple(f"f{i}" for i in range(width))
    if len(names) != width:
        raise DomainError(f"{len(names)} channel names for {width} feature columns")
    column = channel_index(channel, names)
    return (features[:, column] >= kappa).astype(np.int64)


def choose_kappa(values: Sequence[float], balance: float) -> float:
    """(1 - balance)-quantile with midpoint interpolation."""
    if not 0.0 < balance < 1.0:
        raise DomainError(f"balance must be in (0, 1), got {balance}")
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0 or np.ptp(values) == 0:
        raise DomainError("cannot choose a threshold on constant values")
    return float(np.quantile(values, 1.0 - balance, method="midpoint"))


def split_nodes(n: int, visible_fraction: float, seed: int) -> np.ndarray:
    """Seeded uniform sample of visible nodes; at least one on each side."""
    if n < 2:
        raise DomainError("need at least 2 nodes to split")
    if not 0.0 < visible_fraction < 1.0:
        raise DomainError(f"visible_fraction must be in (0, 1), got {visible_fraction}")
    visible = int(np.clip(round(visible_fraction * n), 1, n - 1))
    chosen = np.random.default_rng(seed).permutation(n)[:visible]
    mask = np.zeros(n, dtype=bool)
    mask[chosen] = True
    return mask


def pick_snapshot(series: SnapshotSeries, channel: int | str, which: str | int = PEAK) -> Tuple[int, Snapshot]:
    """The snapshot labels are drawn from: the peak of the channel total, the time mean, or an index."""
    column = channel_index(channel, series.channels)
    if which == PEAK:
        index = int(np.argmax(series.values[:, :, column].sum(axis=1)))
        return index, series.snapshot(index)
    if which == MEAN:
        return -1, mean_snapshot(series)
    try:
        index = int(which)
    except ValueError:
        raise DomainError(f"label snapshot must be {PEAK!r}, {MEAN!r} or an index, got {which!r}") from None
    return range(series.T)[index], series.snapshot(index)


def scale_features(X: np.ndarray) -> Tuple[np.ndarray, float]:
    X = np.asarray(X, dtype=np.float64)
    top = float(np.max(np.abs(X))) if X.size else 0.0
    if top == 0.0:
        return X.copy(), 1.0
    return X / top, top


@dataclass
class ClassifierCache:
    conv1: object
    dropout: np.ndarray
    head: object
    L: PropagationMatrix
    probs: np.ndarray


def _forward(model: ClassifierModel, L, X: np.ndarray, mode: str, dropout_seed: int | None) -> Tuple[np.ndarray, ClassifierCache]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.layer1.weight.shape[0]:
        raise ShapeError(f"X {X.shape} does not match layer1 input width {model.layer1.weight.shape[0]}")
    hidden, conv1 = graph_conv_forward(L, X, model.layer1.weight, model.layer1.bias)
    if mode == TRAIN:
        keep = dropout_mask(hidden.shape, model.dropout_rate, dropout_seed)
    elif mode == EVAL:
        keep = np.ones_like(hidden)
    else:
        raise DomainError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")
    logits, head = dense_forward(propagate(L, hidden * keep), model.layer2.weight, model.layer2.bias)
    probs = softmax_rows(logits)
    return probs, ClassifierCache(conv1, keep, head, L, probs)


def classifier_forward(model: ClassifierModel, L, X: np.ndarray, mode: str = EVAL, dropout_seed: int | None = None) -> np.ndarray:
    """softmax(L . dropout(ReLU(L X W1)) . W2), N x 2."""
    probs, _ = _forward(model, L, X, mode, dropout_seed)
    return probs


def classifier_backward(cache: ClassifierCache, labels: np.ndarray, mask: np.ndarray) -> Dict[str, np.ndarray]:
    grad_logits = masked_cross_entropy_backward(cache.probs, labels, mask)
    grad_prop, grad_w2, grad_b2 = dense_backward(cache.head, grad_logits)
    grad_hidden = propagate_transpose(cache.L, grad_prop) * cache.dropout
    _, grad_w1, grad_b1 = graph_conv_backward(cache.conv1, grad_hidden)
    grads = {"layer1.weight": grad_w1, "layer2.weight": grad_w2}
    if grad_b1 is not None:
        grads["layer1.bias"] = grad_b1
    if grad_b2 is not None:
        grads["layer2.bias"] = grad_b2
    return grads


def classifier_loss(model: ClassifierModel, L, X: np.ndarray, labels: np.ndarray, mask: np.ndarray,
                    mode: str = EVAL, dropout_seed: int | None = None) -> Tuple[float, Dict[str, np.ndarray], np.ndarray]:
    probs, cache = _forward(model, L, X, mode, dropout_seed)
    loss = masked_cross_entropy(probs, labels, mask)
    return loss, classifier_backward(cache, labels, mask), probs


def loss_fn(template: ClassifierModel):
    """(params, (L, X, labels, mask)) -> (loss, grads) in eval mode, for gradient_check."""
    def evaluate(params: ModelParams, inputs) -> Tuple[float, Dict[str, np.ndarray]]:
        L, X, labels, mask = inputs
        loss, grads, _ = classifier_loss(template.with_params(params), L, X, labels, mask)
        return loss, grads
    return evaluate


def accuracy(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Argmax accuracy over masked nodes; ties go to class 0."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DomainError("accuracy needs a non-empty mask")
    predicted = np.argmax(np.asarray(probs)[mask], axis=1)
    return float(np.mean(predicted == np.asarray(labels)[mask]))


def train_classifier(graph: Graph, X: np.ndarray, labeled: LabeledNodes, config) -> Tuple[ClassifierModel, List[EpochRecord]]:
    """Full-batch ADAM on the masked cross-entropy of the visible nodes."""
    X, _ = scale_features(X)
    if X.shape[0] != graph.N:
        raise ShapeError(f"X has {X.shape[0]} rows for a {graph.N}-node graph")
    L = propagation(graph, config.propagation, repair=config.method2_repair, self_loops=config.method2_self_loops)
    model = init_classifier(X.shape[1], config.hidden, config.seed, config.dropout_rate, config.propagation,
                            config.classify_use_bias)
    params = model.params()
    state = adam_init(params, config.classify_learning_rate, config.beta1, config.beta2, config.adam_eps)
    history: List[EpochRecord] = []

    epochs = tqdm(range(config.classify_epochs), desc="classify", disable=not config.progress, leave=False)
    for epoch in epochs:
        try:
            loss, grads, _ = classifier_loss(model, L, X, labeled.labels, labeled.mask, TRAIN, config.seed * 100_003 + epoch)
            params, state = adam_step(params, grads, state)
            model = model.with_params(params)
            probs = classifier_forward(model, L, X)
        except NumericError as exc:
            raise NumericError(f"classifier epoch {epoch}: {exc}") from exc
        record = EpochRecord(
            epoch,
            loss,
            accuracy(probs, labeled.labels, labeled.mask),
            accuracy(probs, labeled.labels, labeled.heldout),
        )
        history.append(record)
        logger.debug("epoch %d loss %.5f train %.3f held-out %.3f", epoch, loss, record.train_accuracy, record.heldout_accuracy)

    if history:
        logger.info(
            "classifier trained %d epochs: loss %.4f -> %.4f, held-out accuracy %.3f",
            len(history), history[0].loss, history[-1].loss, history[-1].heldout_accuracy,
        )
    return model, history


def classify_series(graph: Graph, series: SnapshotSeries, config) -> ClassificationResult:
    """Label one snapshot, hide part of the labels, train, and predict every node."""
    index, snapshot = pick_snapshot(series, config.label_channel, config.label_snapshot)
    column = channel_index(config.label_channel, series.channels)
    kappa = config.kappa if config.kappa is not None else choose_kappa(snapshot.features[:, column], config.balance)
    labels = make_labels(snapshot, config.label_channel, kappa)
    labeled = LabeledNodes(labels, split_nodes(series.N, config.visible_fraction, config.seed), kappa)
    logger.info("labels from snapshot %d: kappa %.4f, %d of %d positive", index, kappa, int(labels.sum()), len(labels))

    model, history = train_classifier(graph, snapshot.features, labeled, config)
    X, scale = scale_features(snapshot.features)
    L = propagation(graph, config.propagation, repair=config.method2_repair, self_loops=config.method2_self_loops)
    probs = classifier_forward(model, L, X)
    return ClassificationResult(model, labeled, history, probs, index, series.node_ids, scale)


def save_predictions(result: ClassificationResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    predicted = np.argmax(result.probs, axis=1)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["cell_id", "label_true", "label_pred", "p_high"])
        for node_id, truth, guess, p_high in zip(result.node_ids, result.labeled.labels, predicted, result.probs[:, 1]):
            writer.writerow([node_id, int(truth), int(guess), repr(float(p_high))])
    return path


def save_history(history: Sequence[EpochRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["epoch", "loss", "train_accuracy", "heldout_accuracy"])
        for record in history:
            writer.writerow([record.epoch, repr(record.loss), repr(record.train_accuracy), repr(record.heldout_accuracy)])
    return path
