"""
Node embeddings: Laplacian eigenmaps and untrained (forward-only) GCN stacks.
"""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from ..errors import DomainError, ShapeError
from .graph import Graph, PropagationMatrix, connected_components, propagation, reweight_by_features
from .nn_core import graph_conv_forward, init_weight

logger = logging.getLogger(__name__)

LAPLACIAN = "laplacian"
GCN_METHOD1 = "gcn_method1"
GCN_METHOD2 = "gcn_method2"
DENSE_EIGEN_LIMIT = 2000
ZERO_EIGENVALUE = 1e-10


@dataclass(frozen=True)
class EmbeddingResult:
    coords: np.ndarray
    method: str
    feature_subset: Tuple[int, ...] = ()
    eigenvalues: Tuple[float, ...] = ()

    @property
    def dims(self) -> int:
        return self.coords.shape[1]


def normalized_laplacian(graph: Graph) -> sp.csr_matrix:
    """D^-1/2 (D - A) D^-1/2 with 0^-1/2 mapped to 0.

    Equals I - D^-1/2 A D^-1/2 on every node with an edge; isolated nodes
    get an all-zero row, so each of them contributes one zero eigenvalue
    like any other connected component.
    """
    a = graph.adjacency
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    inv_sqrt[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    scale = sp.diags(inv_sqrt)
    lap = sp.diags(deg) - a
    return (scale @ lap @ scale).tocsr()


def laplacian_spectrum(graph: Graph) -> Tuple[np.ndarray, np.ndarray]:
    """All eigenpairs of the normalized Laplacian, eigenvalues ascending."""
    if graph.N > DENSE_EIGEN_LIMIT:
        raise DomainError(f"dense spectrum limited to {DENSE_EIGEN_LIMIT} nodes, graph has {graph.N}")
    values, vectors = scipy.linalg.eigh(normalized_laplacian(graph).toarray())
    return np.clip(values, 0.0, None), vectors


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    pivots = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[pivots, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def laplacian_eigenmap(
    graph: Graph,
    d_emb: int,
    allow_disconnected: bool = True,
    features: np.ndarray | None = None,
    feature_sigma: float = 0.0,
) -> EmbeddingResult:
    """Eigenvectors of the d_emb smallest nonzero eigenvalues of L_sym."""
    if d_emb < 1 or d_emb >= graph.N:
        raise DomainError(f"embedding dimension must be in [1, N-1] = [1, {graph.N - 1}], got {d_emb}")
    if features is not None and feature_sigma > 0:
        graph = reweight_by_features(graph, features, feature_sigma)

    components, _ = connected_components(graph)
    if components > 1 and not allow_disconnected:
        raise DomainError(f"graph has {components} connected components")
    if d_emb > graph.N - components:
        raise DomainError(f"only {graph.N - components} nonzero eigenvalues available, asked for {d_emb}")

    if graph.N <= DENSE_EIGEN_LIMIT:
        values, vectors = laplacian_spectrum(graph)
    else:
        values, vectors = eigsh(normalized_laplacian(graph), k=d_emb + components, which="SA")
        order = np.argsort(values)
        values, vectors = np.clip(values[order], 0.0, None), vectors[:, order]

    nonzero = np.flatnonzero(values >= ZERO_EIGENVALUE)[:d_emb]
    chosen = vectors[:, nonzero]
    chosen = _fix_signs(chosen / np.linalg.norm(chosen, axis=0))
    logger.info("laplacian eigenmap: %d components, eigenvalues %s", components, np.round(values[nonzero], 6))
    return EmbeddingResult(chosen, LAPLACIAN, (), tuple(float(v) for v in values[nonzero]))


def select_features(X: np.ndarray, subset: Sequence[int]) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    subset = [int(i) for i in subset]
    if not subset:
        raise DomainError("feature subset is empty")
    if len(set(subset)) != len(subset):
        raise DomainError(f"feature subset has duplicates: {subset}")
    bad = [i for i in subset if not 0 <= i < X.shape[1]]
    if bad:
        raise DomainError(f"feature indices out of range for {X.shape[1]} features: {bad}")
    return X[:, subset]


def gcn_embed(
    L: PropagationMatrix,
    X: np.ndarray,
    layer_dims: Sequence[int],
    seed: int,
    weights: Sequence[np.ndarray] | None = None,
) -> EmbeddingResult:
    """Stack of ReLU(L H W) layers with seeded random weights, no training."""
    if not layer_dims:
        raise ShapeError("layer_dims must not be empty")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"X must be N x d, got {X.shape}")
    if weights is None:
        rng = np.random.default_rng(seed)
        fan_in = X.shape[1]
        weights = []
        for width in layer_dims:
            weights.append(init_weight(fan_in, width, rng))
            fan_in = width
    H = X
    for W in weights:
        H, _ = graph_conv_forward(L, H, W)
    method = GCN_METHOD2 if getattr(L, "kind", "") == "method2" else GCN_METHOD1
    return EmbeddingResult(H, method)


def embed(graph: Graph, X: np.ndarray, method: str, d_emb: int, layer_dims: Sequence[int], seed: int,
          feature_subset: Sequence[int] = (), feature_sigma: float = 0.0, repair: bool = True) -> EmbeddingResult:
    subset = tuple(feature_subset) or tuple(range(X.shape[1]))
    features = select_features(X, subset)
    if method == LAPLACIAN:
        result = laplacian_eigenmap(graph, d_emb, features=features, feature_sigma=feature_sigma)
    elif method in (GCN_METHOD1, GCN_METHOD2):
        kind = "method1" if method == GCN_METHOD1 else "method2"
        dims = list(layer_dims)
        if not dims or dims[-1] != d_emb:
            dims = dims[:-1] + [d_emb] if dims else [d_emb]
        result = gcn_embed(propagation(graph, kind, repair=repair), features, dims, seed)
    else:
        raise DomainError(f"unknown embedding method {method!r}")
    return EmbeddingResult(result.coords, result.method, subset, result.eigenvalues)


def save_embedding(result: EmbeddingResult, node_ids: Sequence[int], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["cell_id"] + [f"e{i + 1}" for i in range(result.dims)])
        for node_id, row in zip(node_ids, result.coords):
            writer.writerow([node_id] + [repr(float(v)) for v in row])
    return path
