"""
Spatial graphs over node coordinates and the propagation matrices GCN layers use.
"""
import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _components
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from ..errors import DomainError, IngestError, UsageError

logger = logging.getLogger(__name__)

SPATIAL_INDEX_THRESHOLD = 2000
METHOD1 = "method1"
METHOD2 = "method2"


@dataclass(frozen=True)
class Graph:
    coords: np.ndarray
    adjacency: sp.csr_matrix
    node_ids: Tuple[int, ...] = ()

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        adjacency = sp.csr_matrix(self.adjacency, dtype=np.float64)
        adjacency.eliminate_zeros()
        adjacency.sort_indices()
        n = coords.shape[0]
        if adjacency.shape != (n, n):
            raise DomainError(f"adjacency shape {adjacency.shape} does not match {n} nodes")
        if adjacency.diagonal().any():
            raise DomainError("adjacency diagonal must be zero")
        if adjacency.nnz and adjacency.data.min() <= 0:
            raise DomainError("adjacency weights must be positive")
        if (adjacency != adjacency.T).nnz:
            raise DomainError("adjacency must be exactly symmetric")
        node_ids = tuple(int(v) for v in self.node_ids) or tuple(range(1, n + 1))
        if len(node_ids) != n:
            raise DomainError(f"{len(node_ids)} node ids for {n} nodes")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "adjacency", adjacency)
        object.__setattr__(self, "node_ids", node_ids)

    @property
    def N(self) -> int:
        return self.coords.shape[0]

    @property
    def edge_count(self) -> int:
        return self.adjacency.nnz // 2


@dataclass(frozen=True)
class PropagationMatrix:
    values: sp.csr_matrix
    kind: str = METHOD1

    @property
    def N(self) -> int:
        return self.values.shape[0]

    def dense(self) -> np.ndarray:
        return self.values.toarray()

    @classmethod
    def from_matrix(cls, matrix, kind: str = "custom") -> "PropagationMatrix":
        return cls(sp.csr_matrix(np.asarray(matrix, dtype=np.float64) if not sp.issparse(matrix) else matrix), kind)


def _check_coords(coords) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 2:
        raise DomainError(f"coords must be N x 2, got shape {coords.shape}")
    if coords.shape[0] < 1:
        raise DomainError("graph needs at least one node")
    if not np.all(np.isfinite(coords)):
        raise DomainError("coords contain non-finite values")
    return coords


def candidate_pairs(coords: np.ndarray, radius: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pairs i < j with distance <= radius, plus their distances.

    Brute force up to SPATIAL_INDEX_THRESHOLD nodes, a k-d tree above.
    """
    n = coords.shape[0]
    if n < 2:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0)
    if n <= SPATIAL_INDEX_THRESHOLD:
        dist = pdist(coords)
        i, j = np.triu_indices(n, k=1)
        keep = dist <= radius
        return i[keep], j[keep], dist[keep]
    pairs = cKDTree(coords).query_pairs(radius, output_type="ndarray")
    if len(pairs) == 0:
        empty = np.empty(0, dtype=np.int64)
        return empty, empty, np.empty(0)
    pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
    i, j = pairs[:, 0], pairs[:, 1]
    return i, j, np.hypot(*(coords[i] - coords[j]).T)


def _symmetric(n: int, i: np.ndarray, j: np.ndarray, w: np.ndarray) -> sp.csr_matrix:
    rows = np.concatenate([i, j])
    cols = np.concatenate([j, i])
    data = np.concatenate([w, w])
    return sp.csr_matrix((data, (rows, cols)), shape=(n, n))


def build_epsilon_graph(coords, epsilon: float, node_ids: Sequence[int] = ()) -> Graph:
    """Unit-weight edge between i != j iff their distance is strictly below epsilon."""
    coords = _check_coords(coords)
    if not epsilon > 0:
        raise DomainError(f"epsilon must be > 0, got {epsilon}")
    i, j, dist = candidate_pairs(coords, epsilon)
    keep = dist < epsilon
    graph = Graph(coords, _symmetric(len(coords), i[keep], j[keep], np.ones(int(keep.sum()))), tuple(node_ids))
    logger.info("epsilon graph: %d nodes, %d edges (radius %.1f m)", graph.N, graph.edge_count, epsilon)
    return graph


def build_gaussian_graph(coords, sigma: float, epsilon: float, node_ids: Sequence[int] = ()) -> Graph:
    """Gaussian-kernel weights exp(-d^2 / sigma^2), kept where the weight exceeds epsilon."""
    coords = _check_coords(coords)
    if not sigma > 0:
        raise DomainError(f"sigma must be > 0, got {sigma}")
    if not 0.0 < epsilon < 1.0:
        raise DomainError(f"weight floor must be in (0, 1), got {epsilon}")
    radius = sigma * math.sqrt(-math.log(epsilon))
    i, j, dist = candidate_pairs(coords, radius * (1 + 1e-9))
    weights = np.exp(-(dist ** 2) / sigma ** 2)
    keep = weights > epsilon
    graph = Graph(coords, _symmetric(len(coords), i[keep], j[keep], weights[keep]), tuple(node_ids))
    logger.info("gaussian graph: %d nodes, %d edges (sigma %.1f m, floor %g)", graph.N, graph.edge_count, sigma, epsilon)
    return graph


def degree(graph: Graph, with_self_loops: bool = False) -> np.ndarray:
    deg = np.asarray(graph.adjacency.sum(axis=1)).ravel()
    return deg + 1.0 if with_self_loops else deg


def propagation_method1(graph: Graph) -> PropagationMatrix:
    """L1 = D^-1 (A + I), D the degree of A + I; rows sum to 1."""
    a_hat = (graph.adjacency + sp.identity(graph.N, format="csr")).tocoo()
    deg = degree(graph, with_self_loops=True)
    values = sp.csr_matrix((a_hat.data / deg[a_hat.row], (a_hat.row, a_hat.col)), shape=a_hat.shape)
    values.sort_indices()
    return PropagationMatrix(values, METHOD1)


def propagation_method2(graph: Graph, repair: bool = False, self_loops: bool = False) -> PropagationMatrix:
    """L2 = D^-1/2 A D^-1/2 on the plain adjacency (A + I when self_loops is set)."""
    a = graph.adjacency + sp.identity(graph.N, format="csr") if self_loops else graph.adjacency
    a = a.tocoo()
    deg = np.asarray(a.sum(axis=1)).ravel()
    isolated = np.flatnonzero(deg == 0)
    if len(isolated) and not repair:
        names = [graph.node_ids[i] for i in isolated[:10]]
        raise DomainError(f"isolated nodes have zero degree: {names}")
    inv_sqrt = np.zeros_like(deg)
    nonzero = deg > 0
    inv_sqrt[nonzero] = 1.0 / np.sqrt(deg[nonzero])
    # s_i * s_j is commutative in floating point, so the result is exactly symmetric
    scale = inv_sqrt[a.row] * inv_sqrt[a.col]
    values = sp.csr_matrix((a.data * scale, (a.row, a.col)), shape=a.shape)
    values.eliminate_zeros()
    values.sort_indices()
    return PropagationMatrix(values, METHOD2)


def propagation(graph: Graph, kind: str = METHOD1, repair: bool = False, self_loops: bool = False) -> PropagationMatrix:
    if kind == METHOD1:
        return propagation_method1(graph)
    if kind == METHOD2:
        return propagation_method2(graph, repair=repair, self_loops=self_loops)
    raise DomainError(f"unknown propagation kind {kind!r}")


def median_nn_distance(coords) -> float:
    coords = _check_coords(coords)
    if coords.shape[0] < 2:
        raise DomainError("nearest-neighbour distance needs at least 2 nodes")
    dist, _ = cKDTree(coords).query(coords, k=2)
    return float(np.median(dist[:, 1]))


def resolve_graph_scales(coords, edge_radius_m: float = 0.0, sigma_m: float = 0.0) -> Dict[str, float]:
    """Data-adaptive defaults: radius = 2 x median NN distance, sigma = radius."""
    radius = edge_radius_m if edge_radius_m > 0 else 2.0 * median_nn_distance(coords)
    if radius <= 0:
        raise DomainError("could not derive a positive edge radius (co-located nodes?)")
    sigma = sigma_m if sigma_m > 0 else radius
    return {"edge_radius_m": float(radius), "sigma_m": float(sigma)}


def build_graph(coords, node_ids: Sequence[int], graph_kind: str, edge_radius_m: float, sigma_m: float, weight_floor: float) -> Graph:
    if graph_kind == "epsilon":
        return build_epsilon_graph(coords, edge_radius_m, node_ids)
    if graph_kind == "gaussian":
        return build_gaussian_graph(coords, sigma_m, weight_floor, node_ids)
    raise DomainError(f"unknown graph kind {graph_kind!r}")


def reweight_by_features(graph: Graph, features, sigma_f: float) -> Graph:
    """w_ij <- w_ij * exp(-|f_i - f_j|^2 / sigma_f^2)."""
    if not sigma_f > 0:
        raise DomainError(f"feature sigma must be > 0, got {sigma_f}")
    features = np.asarray(features, dtype=np.float64)
    a = graph.adjacency.tocoo()
    gap = ((features[a.row] - features[a.col]) ** 2).sum(axis=1)
    weights = a.data * np.exp(-gap / sigma_f ** 2)
    return Graph(graph.coords, sp.csr_matrix((weights, (a.row, a.col)), shape=a.shape), graph.node_ids)


def connected_components(graph: Graph) -> Tuple[int, np.ndarray]:
    count, labels = _components(graph.adjacency, directed=False)
    return int(count), labels


def to_dense(matrix) -> np.ndarray:
    if isinstance(matrix, PropagationMatrix):
        return matrix.dense()
    if isinstance(matrix, Graph):
        return matrix.adjacency.toarray()
    return matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix, dtype=np.float64)


def save_graph(graph: Graph, directory: str | Path) -> Path:
    """Write edges.csv (src,dst,weight; src < dst) and nodes.csv (cell_id,x,y)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    upper = sp.triu(graph.adjacency, k=1).tocoo()
    order = np.lexsort((upper.col, upper.row))
    with (directory / "edges.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["src", "dst", "weight"])
        for idx in order:
            writer.writerow([graph.node_ids[upper.row[idx]], graph.node_ids[upper.col[idx]], repr(float(upper.data[idx]))])
    with (directory / "nodes.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["cell_id", "x", "y"])
        for node_id, (x, y) in zip(graph.node_ids, graph.coords):
            writer.writerow([node_id, repr(float(x)), repr(float(y))])
    return directory


def load_graph(directory: str | Path) -> Graph:
    directory = Path(directory)
    nodes_path, edges_path = directory / "nodes.csv", directory / "edges.csv"
    if not nodes_path.exists() or not edges_path.exists():
        raise UsageError(f"no graph at {directory} (run `graph` first)")
    with nodes_path.open("r", encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    node_ids = tuple(int(r["cell_id"]) for r in rows)
    coords = np.array([[float(r["x"]), float(r["y"])] for r in rows], dtype=np.float64).reshape(-1, 2)
    index = {n: i for i, n in enumerate(node_ids)}
    src, dst, weight = [], [], []
    with edges_path.open("r", encoding="utf-8", newline="") as handle:
        for line_number, row in enumerate(csv.DictReader(handle), start=2):
            ends = int(row["src"]), int(row["dst"])
            unknown = [cell for cell in ends if cell not in index]
            if unknown:
                raise IngestError(f"{edges_path}: line {line_number}: cell {unknown[0]} is not in {nodes_path.name}")
            src.append(index[ends[0]])
            dst.append(index[ends[1]])
            weight.append(float(row["weight"]))
    adjacency = _symmetric(len(node_ids), np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), np.array(weight))
    return Graph(coords, adjacency, node_ids)
