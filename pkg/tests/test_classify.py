import csv

import numpy as np
import pytest

from src.errors import DomainError, ShapeError
from src.modules.classify import (
    MEAN,
    PEAK,
    ClassifierModel,
    LabeledNodes,
    accuracy,
    choose_kappa,
    classifier_forward,
    classifier_loss,
    classify_series,
    init_classifier,
    loss_fn,
    make_labels,
    pick_snapshot,
    save_history,
    save_predictions,
    scale_features,
    split_nodes,
    train_classifier,
)
from src.modules.graph import PropagationMatrix, build_epsilon_graph, propagation_method1
from src.modules.ingest import SnapshotSeries, channel_index
from src.modules.nn_core import EVAL, TRAIN, LayerParams, gradient_check, softmax_rows


def line_graph(n):
    coords = np.array([[100.0 * i, 0.0] for i in range(n)])
    return build_epsilon_graph(coords, 150.0)


class TestLabels:
    def test_threshold_is_inclusive(self):
        assert make_labels(np.array([[3.0]]), 0, 3.0).tolist() == [1]

    def test_elementwise(self):
        assert make_labels(np.array([[1.0], [5.0], [3.0]]), 0, 3.0).tolist() == [0, 1, 1]

    def test_all_zero_snapshot(self):
        assert not make_labels(np.zeros((4, 5)), "internet", 0.5).any()

    def test_channel_out_of_range(self):
        with pytest.raises(DomainError):
            make_labels(np.zeros((3, 2)), "internet", 1.0)

    def test_names_resolve_against_series_channels(self):
        values = np.zeros((1, 4, 3))
        values[0, :, 0] = [9.0, 1.0, 9.0, 1.0]
        values[0, :, 2] = [1.0, 9.0, 1.0, 9.0]
        series = SnapshotSeries(values, 0, node_ids=(1, 2, 3, 4), channels=("call_in", "call_out", "internet"))
        snapshot = series.snapshot(0)
        assert make_labels(snapshot, "call_in", 5.0).tolist() == [1, 0, 1, 0]
        assert make_labels(snapshot, "internet", 5.0).tolist() == [0, 1, 0, 1]
        assert make_labels(snapshot.features, "call_in", 5.0, series.channels).tolist() == [1, 0, 1, 0]

    def test_bare_array_needs_names(self):
        with pytest.raises(DomainError):
            make_labels(np.zeros((4, 3)), "call_in", 1.0)
        with pytest.raises(DomainError):
            make_labels(np.zeros((4, 3)), 0, 1.0, channels=("call_in", "internet"))

    def test_median_split(self):
        values = np.arange(1.0, 101.0)
        kappa = choose_kappa(values, 0.5)
        assert kappa == 50.5
        assert make_labels(values[:, None], 0, kappa).sum() == 50

    def test_extreme_balance(self):
        values = np.arange(1.0, 11.0)
        positives = make_labels(values[:, None], 0, choose_kappa(values, 0.99)).sum()
        assert positives in (9, 10)

    def test_constant_values_rejected(self):
        with pytest.raises(DomainError):
            choose_kappa(np.full(5, 2.0), 0.5)

    @pytest.mark.parametrize("balance", [0.0, 1.0])
    def test_balance_range(self, balance):
        with pytest.raises(DomainError):
            choose_kappa(np.arange(5.0), balance)

    @pytest.mark.parametrize("seed", range(10))
    def test_balance_within_one_node(self, seed):
        values = np.random.default_rng(seed).permutation(37) + 0.25
        positives = make_labels(values[:, None], 0, choose_kappa(values, 0.5)).sum()
        assert abs(positives / 37 - 0.5) <= 1 / 37

    def test_fixture_peak_snapshot_is_balanced(self, two_hotspots):
        series = two_hotspots.series
        column = channel_index("internet", series.channels)
        _, snapshot = pick_snapshot(series, "internet", PEAK)
        values = snapshot.features[:, column]
        assert abs(make_labels(snapshot, column, choose_kappa(values, 0.5)).sum() - 50) <= 1


class TestSplitAndSnapshots:
    def test_visible_count_and_seed(self):
        mask = split_nodes(100, 0.3, seed=7)
        assert mask.sum() == 30
        assert np.array_equal(mask, split_nodes(100, 0.3, seed=7))
        assert not np.array_equal(mask, split_nodes(100, 0.3, seed=8))

    def test_both_sides_non_empty(self):
        assert split_nodes(3, 0.01, seed=0).sum() == 1
        assert split_nodes(3, 0.99, seed=0).sum() == 2

    def test_labeled_nodes_need_both_sides(self):
        with pytest.raises(DomainError):
            LabeledNodes(np.array([0, 1]), np.array([True, True]), 1.0)
        with pytest.raises(DomainError):
            LabeledNodes(np.array([0, 2]), np.array([True, False]), 1.0)

    def test_pick_snapshot_modes(self):
        values = np.zeros((3, 2, 1))
        values[1] = 5.0
        series = SnapshotSeries(values, 0, node_ids=(1, 2), channels=("internet",))
        index, snapshot = pick_snapshot(series, "internet", PEAK)
        assert index == 1 and snapshot.features.tolist() == [[5.0], [5.0]]
        _, mean = pick_snapshot(series, "internet", MEAN)
        assert mean.features[0, 0] == pytest.approx(5.0 / 3)
        assert pick_snapshot(series, "internet", "-1")[0] == 2
        with pytest.raises(DomainError):
            pick_snapshot(series, "internet", "latest")

    def test_scale_features(self):
        X, scale = scale_features(np.array([[2.0, -8.0], [4.0, 1.0]]))
        assert scale == 8.0
        assert np.abs(X).max() == 1.0
        assert scale_features(np.zeros((2, 2)))[1] == 1.0


class TestForward:
    def test_single_node_matches_hand_computation(self):
        X = np.array([[0.5, -1.0, 2.0]])
        W1 = np.array([[1.0, -0.5], [0.25, 0.5], [0.5, 1.0]])
        W2 = np.array([[1.0, -1.0], [0.5, 2.0]])
        model = ClassifierModel(LayerParams("layer1", W1), LayerParams("layer2", W2), dropout_rate=0.0)
        probs = classifier_forward(model, np.array([[1.0]]), X)
        hidden = np.maximum(X @ W1, 0.0)
        logits = hidden @ W2
        expected = np.exp(logits) / np.exp(logits).sum()
        assert np.allclose(probs, expected, atol=1e-15)

    def test_rows_sum_to_one(self, two_hotspots):
        model = init_classifier(5, 16, seed=1)
        X, _ = scale_features(two_hotspots.series.values[0])
        probs = classifier_forward(model, propagation_method1(two_hotspots.graph), X)
        assert np.allclose(probs.sum(axis=1), 1.0)

    def test_zero_dropout_train_equals_eval(self, tiny):
        model = init_classifier(2, 4, seed=0, dropout_rate=0.0)
        L = propagation_method1(tiny.graph)
        X = tiny.series.values[2]
        assert np.array_equal(classifier_forward(model, L, X, TRAIN, 5), classifier_forward(model, L, X, EVAL))

    def test_shape_mismatch(self, tiny):
        model = init_classifier(3, 4, seed=0)
        with pytest.raises(ShapeError):
            classifier_forward(model, propagation_method1(tiny.graph), tiny.series.values[0])

    def test_layer2_must_have_two_outputs(self):
        with pytest.raises(ShapeError):
            ClassifierModel(LayerParams("layer1", np.ones((2, 3))), LayerParams("layer2", np.ones((3, 3))))

    @pytest.mark.parametrize("use_bias", [False, True])
    def test_full_gradient_check(self, tiny, use_bias):
        X, _ = scale_features(tiny.series.values[4])
        labels = np.array([0, 1, 1, 0, 1, 0])
        mask = np.array([True, True, True, False, True, False])
        model = init_classifier(2, 5, seed=3, dropout_rate=0.5, use_bias=use_bias)
        if use_bias:
            params = model.params()
            params["layer1.bias"] = np.full(5, 0.1)
            params["layer2.bias"] = np.array([0.05, -0.05])
            model = model.with_params(params)
        L = propagation_method1(tiny.graph)
        assert gradient_check(loss_fn(model), model.params(), (L, X, labels, mask)) < 1e-4

    def test_masked_loss_ignores_far_nodes(self):
        graph = line_graph(8)
        L = propagation_method1(graph)
        X = np.random.default_rng(0).random((8, 3))
        labels = np.array([1, 0, 0, 0, 0, 0, 0, 1])
        mask = np.zeros(8, dtype=bool)
        mask[0] = True
        model = init_classifier(3, 4, seed=2)
        before, _, _ = classifier_loss(model, L, X, labels, mask)
        moved = X.copy()
        moved[3:] += 10.0
        after, _, _ = classifier_loss(model, L, moved, labels, mask)
        assert before == after
        moved[2] += 10.0
        changed, _, _ = classifier_loss(model, L, moved, labels, mask)
        assert changed != before


class TestAccuracy:
    def test_examples(self):
        labels = np.array([1, 0, 1, 0])
        mask = np.ones(4, dtype=bool)
        perfect = np.eye(2)[labels]
        assert accuracy(perfect, labels, mask) == 1.0
        assert accuracy(perfect[:, ::-1], labels, mask) == 0.0
        three = perfect.copy()
        three[3] = [0.2, 0.8]
        assert accuracy(three, labels, mask) == 0.75

    def test_ties_go_to_class_zero(self):
        assert accuracy(np.array([[0.5, 0.5]]), np.array([0]), np.array([True])) == 1.0

    def test_empty_mask(self):
        with pytest.raises(DomainError):
            accuracy(np.eye(2), np.array([0, 1]), np.zeros(2, dtype=bool))

    @pytest.mark.parametrize("factor", [0.01, 3.0, 250.0])
    def test_logit_scaling_keeps_accuracy(self, factor):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(40, 2))
        labels = rng.integers(0, 2, size=40)
        mask = rng.random(40) < 0.6
        assert accuracy(softmax_rows(logits), labels, mask) == accuracy(softmax_rows(factor * logits), labels, mask)


class TestTraining:
    def test_loss_drops_and_runs_repeat(self, two_hotspots, config):
        config = config.replace(classify_epochs=40)
        series = two_hotspots.series
        _, snapshot = pick_snapshot(series, "internet")
        column = channel_index("internet", series.channels)
        labels = make_labels(snapshot, column, choose_kappa(snapshot.features[:, column], 0.5))
        labeled = LabeledNodes(labels, split_nodes(series.N, 0.3, config.seed), 0.0)
        _, first = train_classifier(two_hotspots.graph, snapshot.features, labeled, config)
        _, second = train_classifier(two_hotspots.graph, snapshot.features, labeled, config)
        assert first == second
        assert len(first) == 40
        assert first[-1].loss < first[0].loss

    def test_outputs(self, tmp_path, two_hotspots, config):
        result = classify_series(two_hotspots.graph, two_hotspots.series, config.replace(classify_epochs=5))
        predictions = save_predictions(result, tmp_path / "predictions.csv")
        with predictions.open(encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 100
        assert set(rows[0]) == {"cell_id", "label_true", "label_pred", "p_high"}
        history = save_history(result.history, tmp_path / "history.csv")
        assert len(history.read_text(encoding="utf-8").splitlines()) == 6

    def test_method2_propagation(self, two_hotspots, config):
        config = config.replace(classify_epochs=3, propagation="method2", method2_repair=True)
        result = classify_series(two_hotspots.graph, two_hotspots.series, config)
        assert result.model.propagation == "method2"
        assert 0.0 <= result.heldout_accuracy <= 1.0

    @pytest.mark.slow
    def test_heldout_accuracy_on_two_hotspots(self, two_hotspots, config):
        result = classify_series(two_hotspots.graph, two_hotspots.series, config)
        assert result.heldout_accuracy >= 0.85
