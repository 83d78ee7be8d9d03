"""
Hand-derived neural-network building blocks on float64 numpy arrays.

Every layer comes as a `*_forward` returning (output, cache) and a
`*_backward(cache, grad_out)` returning input and parameter gradients.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np
import scipy.sparse as sp

from ..errors import DomainError, NumericError, ShapeError, UsageError
from .graph import PropagationMatrix

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
TRAIN = "train"
EVAL = "eval"


class ModelParams(dict):
    """Ordered name -> weight array mapping shared by every model."""

    def copy(self) -> "ModelParams":
        return ModelParams((name, value.copy()) for name, value in self.items())

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(value.shape) for name, value in self.items()}

    def zeros_like(self) -> "ModelParams":
        return ModelParams((name, np.zeros_like(value)) for name, value in self.items())


@dataclass
class LayerParams:
    name: str
    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def items(self) -> Iterable[Tuple[str, np.ndarray]]:
        yield f"{self.name}.weight", self.weight
        if self.bias is not None:
            yield f"{self.name}.bias", self.bias


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def check_finite(array: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite values in {where}")
    return array


def init_weight(fan_in: int, fan_out: int, rng: np.random.Generator, shape: Tuple[int, ...] | None = None) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


def _operator(L):
    if isinstance(L, PropagationMatrix):
        return L.values
    if sp.issparse(L):
        return L.tocsr()
    return np.asarray(L, dtype=np.float64)


def propagate(L, H: np.ndarray) -> np.ndarray:
    """Apply L over the node axis (second to last) of H."""
    op = _operator(L)
    n = H.shape[-2]
    if op.shape != (n, n):
        raise ShapeError(f"propagation matrix {op.shape} does not match {n} nodes of H {H.shape}")
    moved = np.moveaxis(H, -2, 0)
    flat = moved.reshape(n, -1)
    out = np.asarray(op @ flat)
    return np.moveaxis(out.reshape(moved.shape), 0, -2)


def propagate_transpose(L, H: np.ndarray) -> np.ndarray:
    return propagate(_operator(L).T, H)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return relu(x), x


def relu_backward(cache: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (cache > 0)


@dataclass
class GraphConvCache:
    L: object
    propagated: np.ndarray
    weight: np.ndarray
    pre_activation: np.ndarray
    has_bias: bool


def graph_conv_forward(L, H: np.ndarray, W: np.ndarray, bias: np.ndarray | None = None) -> Tuple[np.ndarray, GraphConvCache]:
    """ReLU(L . H . W (+ b)); H is N x f_in or batched (..., N, f_in)."""
    H = np.asarray(H, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if H.ndim < 2 or W.ndim != 2 or H.shape[-1] != W.shape[0]:
        raise ShapeError(f"graph conv: H {H.shape} incompatible with W {W.shape}")
    propagated = propagate(L, H)
    pre = propagated @ W
    if bias is not None:
        pre = pre + bias
    check_finite(pre, "graph_conv_forward")
    return relu(pre), GraphConvCache(L, propagated, W, pre, bias is not None)


def graph_conv_backward(cache: GraphConvCache | None, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Returns (grad_H, grad_W, grad_bias)."""
    if cache is None:
        raise UsageError("graph_conv_backward called without a forward cache")
    grad_pre = grad_out * (cache.pre_activation > 0)
    f_in, f_out = cache.weight.shape
    grad_W = cache.propagated.reshape(-1, f_in).T @ grad_pre.reshape(-1, f_out)
    grad_bias = grad_pre.reshape(-1, f_out).sum(axis=0) if cache.has_bias else None
    grad_H = propagate_transpose(cache.L, grad_pre @ cache.weight.T)
    return check_finite(grad_H, "graph_conv_backward"), grad_W, grad_bias


@dataclass
class TemporalConvCache:
    inputs: np.ndarray
    kernel: np.ndarray
    has_bias: bool


def temporal_conv_forward(X: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> Tuple[np.ndarray, TemporalConvCache]:
    """Valid correlation along time, shared by every node.

    X is (..., m, N, c_in), kernel is (K_t, c_in, c_out); the output is
    (..., m - K_t + 1, N, c_out).
    """
    X = np.asarray(X, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if X.ndim < 3 or kernel.ndim != 3 or X.shape[-1] != kernel.shape[1]:
        raise ShapeError(f"temporal conv: X {X.shape} incompatible with kernel {kernel.shape}")
    m, width = X.shape[-3], kernel.shape[0]
    if width > m:
        raise ShapeError(f"temporal kernel width {width} exceeds window length {m}")
    out_len = m - width + 1
    out = sum(X[..., tau:tau + out_len, :, :] @ kernel[tau] for tau in range(width))
    if bias is not None:
        out = out + bias
    check_finite(out, "temporal_conv_forward")
    return out, TemporalConvCache(X, kernel, bias is not None)


def temporal_conv_backward(cache: TemporalConvCache | None, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    if cache is None:
        raise UsageError("temporal_conv_backward called without a forward cache")
    X, kernel = cache.inputs, cache.kernel
    width, c_in, c_out = kernel.shape
    out_len = grad_out.shape[-3]
    grad_X = np.zeros_like(X)
    grad_kernel = np.empty_like(kernel)
    flat_grad = grad_out.reshape(-1, c_out)
    for tau in range(width):
        window = X[..., tau:tau + out_len, :, :]
        grad_kernel[tau] = window.reshape(-1, c_in).T @ flat_grad
        grad_X[..., tau:tau + out_len, :, :] += grad_out @ kernel[tau].T
    grad_bias = flat_grad.sum(axis=0) if cache.has_bias else None
    return grad_X, grad_kernel, grad_bias


def temporal_conv1d_forward(X: np.ndarray, kernel: np.ndarray) -> Tuple[np.ndarray, TemporalConvCache]:
    """Single-channel case: X is m x N, kernel has K_t taps; output (m - K_t + 1) x N."""
    X = np.asarray(X, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64).reshape(-1, 1, 1)
    if X.ndim != 2:
        raise ShapeError(f"temporal_conv1d expects an m x N input, got {X.shape}")
    out, cache = temporal_conv_forward(X[..., None], kernel)
    return out[..., 0], cache


def temporal_conv1d_backward(cache: TemporalConvCache | None, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    grad_X, grad_kernel, _ = temporal_conv_backward(cache, np.asarray(grad_out)[..., None])
    return grad_X[..., 0], grad_kernel.reshape(-1)


@dataclass
class DenseCache:
    inputs: np.ndarray
    weight: np.ndarray
    has_bias: bool


def dense_forward(H: np.ndarray, W: np.ndarray, bias: np.ndarray | None = None) -> Tuple[np.ndarray, DenseCache]:
    if H.shape[-1] != W.shape[0]:
        raise ShapeError(f"dense: H {H.shape} incompatible with W {W.shape}")
    out = H @ W
    if bias is not None:
        out = out + bias
    return check_finite(out, "dense_forward"), DenseCache(H, W, bias is not None)


def dense_backward(cache: DenseCache | None, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    if cache is None:
        raise UsageError("dense_backward called without a forward cache")
    f_in, f_out = cache.weight.shape
    grad_W = cache.inputs.reshape(-1, f_in).T @ grad_out.reshape(-1, f_out)
    grad_bias = grad_out.reshape(-1, f_out).sum(axis=0) if cache.has_bias else None
    return grad_out @ cache.weight.T, grad_W, grad_bias


def dropout_mask(shape: Tuple[int, ...], rate: float, seed: int | None) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = np.random.default_rng(seed).random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(H: np.ndarray, rate: float, mode: str = TRAIN, rng_seed: int | None = None) -> np.ndarray:
    """Inverted dropout in train mode, identity in eval mode."""
    if not 0.0 <= rate < 1.0:
        raise DomainError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == EVAL or rate == 0.0:
        return np.array(H, dtype=np.float64)
    if mode != TRAIN:
        raise DomainError(f"mode must be {TRAIN!r} or {EVAL!r}, got {mode!r}")
    return H * dropout_mask(np.shape(H), rate, rng_seed)


def softmax_rows(H: np.ndarray) -> np.ndarray:
    shifted = H - H.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def _check_mask(mask: np.ndarray, n: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n,):
        raise ShapeError(f"mask shape {mask.shape} does not match {n} nodes")
    if not mask.any():
        raise DomainError("mask selects no nodes")
    return mask


def masked_cross_entropy(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    """Mean binary cross-entropy over masked nodes, p1 clamped to [1e-12, 1 - 1e-12]."""
    mask = _check_mask(mask, probs.shape[0])
    y = np.asarray(labels, dtype=np.float64)[mask]
    p1 = np.clip(probs[mask, 1], PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = -(y * np.log(p1) + (1.0 - y) * np.log(1.0 - p1))
    return float(loss.mean())


def masked_cross_entropy_backward(probs: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Gradient of the masked loss w.r.t. the pre-softmax logits; zero on unmasked rows."""
    mask = _check_mask(mask, probs.shape[0])
    onehot = np.zeros_like(probs)
    onehot[np.arange(probs.shape[0]), np.asarray(labels, dtype=np.int64)] = 1.0
    grad = (probs - onehot) / mask.sum()
    grad[~mask] = 0.0
    return grad


def l2_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean of squared entrywise differences."""
    if np.shape(pred) != np.shape(target):
        raise ShapeError(f"l2_loss: prediction {np.shape(pred)} vs target {np.shape(target)}")
    return float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))


def l2_loss_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return 2.0 * (pred - target) / np.size(pred)


def adam_init(params: ModelParams, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(0, {n: np.zeros_like(p) for n, p in params.items()}, {n: np.zeros_like(p) for n, p in params.items()}, lr, beta1, beta2, eps)


def adam_step(params: ModelParams, grads: Dict[str, np.ndarray], state: AdamState) -> Tuple[ModelParams, AdamState]:
    """One bias-corrected ADAM update; inputs are left untouched."""
    step = state.step + 1
    bc1 = 1.0 - state.beta1 ** step
    bc2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = ModelParams(), {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {value.shape}")
        m = state.beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(step, new_m, new_v, state.lr, state.beta1, state.beta2, state.eps)


LossAndGrads = Callable[[ModelParams, object], Tuple[float, Dict[str, np.ndarray]]]


def gradient_check(
    model_fn: LossAndGrads,
    params: ModelParams,
    inputs: object,
    h: float = 1e-5,
    max_coords_per_param: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    model_fn(params, inputs) must return (scalar loss, gradient dict).
    """
    loss, analytic = model_fn(params, inputs)
    if not np.isfinite(loss):
        raise NumericError("gradient_check: non-finite loss")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params.items():
        coords = np.arange(value.size)
        if max_coords_per_param is not None and value.size > max_coords_per_param:
            coords = rng.choice(value.size, size=max_coords_per_param, replace=False)
        for flat_index in coords:
            index = np.unravel_index(flat_index, value.shape)
            plus, minus = params.copy(), params.copy()
            plus[name][index] += h
            minus[name][index] -= h
            f_plus, _ = model_fn(plus, inputs)
            f_minus, _ = model_fn(minus, inputs)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"gradient_check: non-finite loss perturbing {name}{index}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = float(analytic[name][index])
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, error)
    logger.debug("gradient check max relative error %.3e", worst)
    return worst
