import csv

import numpy as np
import pytest

from conftest import dense_graph
from src.errors import DomainError, ShapeError
from src.modules.embedding import (
    GCN_METHOD1,
    GCN_METHOD2,
    LAPLACIAN,
    embed,
    gcn_embed,
    laplacian_eigenmap,
    laplacian_spectrum,
    normalized_laplacian,
    save_embedding,
    select_features,
)
from src.modules.graph import build_epsilon_graph, propagation_method1


def two_paths():
    """Two disjoint five-node paths."""
    coords = np.array([[i * 10.0, 0.0] for i in range(5)] + [[i * 10.0, 500.0] for i in range(5)])
    return build_epsilon_graph(coords, 15.0)


class TestSpectrum:
    def test_triangle_eigenvalues(self, triangle):
        values, _ = laplacian_spectrum(triangle)
        assert np.allclose(values, [0.0, 1.5, 1.5], atol=1e-12)

    def test_one_zero_eigenvalue_per_component(self):
        values, _ = laplacian_spectrum(two_paths())
        assert (values < 1e-10).sum() == 2

    def test_isolated_node_adds_zero_eigenvalue(self):
        graph = dense_graph([[0, 1, 0], [1, 0, 0], [0, 0, 0]])
        assert not normalized_laplacian(graph).toarray()[2].any()
        values, _ = laplacian_spectrum(graph)
        assert (values < 1e-10).sum() == 2

    def test_laplacian_is_symmetric(self, two_hotspots):
        lap = normalized_laplacian(two_hotspots.graph).toarray()
        assert np.allclose(lap, lap.T, atol=1e-15)


class TestEigenmap:
    def test_triangle_embedding(self, triangle):
        result = laplacian_eigenmap(triangle, 2)
        assert result.method == LAPLACIAN
        assert result.eigenvalues == pytest.approx((1.5, 1.5))
        assert np.allclose(result.coords.T @ result.coords, np.eye(2), atol=1e-12)

    def test_skips_zero_eigenvalues_of_every_component(self):
        result = laplacian_eigenmap(two_paths(), 3)
        assert min(result.eigenvalues) >= 1e-10
        assert result.coords.shape == (10, 3)

    def test_path_embedding_is_monotone(self, path_graph):
        first = laplacian_eigenmap(path_graph, 1).coords[:, 0]
        steps = np.diff(first)
        assert np.all(steps > 0) or np.all(steps < 0)

    def test_sign_convention_is_deterministic(self, two_hotspots):
        a = laplacian_eigenmap(two_hotspots.graph, 2).coords
        b = laplacian_eigenmap(two_hotspots.graph, 2).coords
        assert np.array_equal(a, b)
        pivots = np.argmax(np.abs(a), axis=0)
        assert np.all(a[pivots, [0, 1]] > 0)

    @pytest.mark.parametrize("d_emb", [0, 3])
    def test_dimension_range(self, triangle, d_emb):
        with pytest.raises(DomainError):
            laplacian_eigenmap(triangle, d_emb)

    def test_too_many_dimensions_for_components(self):
        with pytest.raises(DomainError, match="nonzero"):
            laplacian_eigenmap(two_paths(), 9)

    def test_disconnected_rejected_on_request(self):
        with pytest.raises(DomainError, match="components"):
            laplacian_eigenmap(two_paths(), 2, allow_disconnected=False)

    def test_feature_reweighting_changes_embedding(self, two_hotspots):
        X = two_hotspots.series.values.mean(axis=0)
        plain = laplacian_eigenmap(two_hotspots.graph, 2).coords
        weighted = laplacian_eigenmap(two_hotspots.graph, 2, features=X, feature_sigma=50.0).coords
        assert not np.allclose(plain, weighted)


    @pytest.mark.parametrize("graph_name", ["path", "two_paths", "two_hotspots"])
    def test_eigenpair_residuals(self, graph_name, path_graph, two_hotspots):
        graph = {"path": path_graph, "two_paths": two_paths(), "two_hotspots": two_hotspots.graph}[graph_name]
        result = laplacian_eigenmap(graph, 2)
        lap = normalized_laplacian(graph).toarray()
        for value, vector in zip(result.eigenvalues, result.coords.T):
            assert np.linalg.norm(lap @ vector - value * vector) < 1e-8


class TestGcnEmbed:
    def test_shape_and_nonnegative(self, tiny):
        X = tiny.series.values.mean(axis=0)
        result = gcn_embed(propagation_method1(tiny.graph), X, [4, 2], seed=3)
        assert result.coords.shape == (tiny.graph.N, 2)
        assert np.all(result.coords >= 0)
        assert result.method == GCN_METHOD1

    def test_seeded(self, tiny):
        X = tiny.series.values.mean(axis=0)
        L = propagation_method1(tiny.graph)
        assert np.array_equal(gcn_embed(L, X, [3], 5).coords, gcn_embed(L, X, [3], 5).coords)

    def test_permutation_equivariance(self, two_hotspots):
        rng = np.random.default_rng(2)
        perm = rng.permutation(two_hotspots.graph.N)
        X = two_hotspots.series.values.mean(axis=0)
        L = propagation_method1(two_hotspots.graph).dense()
        base = gcn_embed(L, X, [4, 2], seed=1).coords
        moved = gcn_embed(L[np.ix_(perm, perm)], X[perm], [4, 2], seed=1).coords
        assert np.allclose(moved, base[perm], atol=1e-10)

    def test_empty_layers(self, tiny):
        with pytest.raises(ShapeError):
            gcn_embed(propagation_method1(tiny.graph), np.ones((tiny.graph.N, 2)), [], seed=0)


class TestEmbedDispatch:
    def test_gcn_method2_uses_requested_width(self, tiny):
        X = tiny.series.values.mean(axis=0)
        result = embed(tiny.graph, X, GCN_METHOD2, 2, [5, 7], seed=0, feature_subset=(1,))
        assert result.coords.shape == (tiny.graph.N, 2)
        assert result.method == GCN_METHOD2
        assert result.feature_subset == (1,)

    def test_unknown_method(self, tiny):
        with pytest.raises(DomainError):
            embed(tiny.graph, np.ones((tiny.graph.N, 2)), "pca", 2, [2], seed=0)

    @pytest.mark.parametrize("subset", [(), (0, 0), (5,)])
    def test_bad_feature_subsets(self, subset):
        with pytest.raises(DomainError):
            select_features(np.ones((3, 2)), subset)

    def test_save_embedding(self, tmp_path, triangle):
        result = laplacian_eigenmap(triangle, 2)
        path = save_embedding(result, triangle.node_ids, tmp_path / "embedding.csv")
        with path.open(encoding="utf-8") as handle:
            rows = list(csv.reader(handle))
        assert rows[0] == ["cell_id", "e1", "e2"]
        assert [r[0] for r in rows[1:]] == ["1", "2", "3"]
        assert float(rows[1][1]) == result.coords[0, 0]
