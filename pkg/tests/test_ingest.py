import json
import math

import numpy as np
import pytest

from conftest import MILAN_START, TEN_MINUTES, cdr_line
from src.errors import DomainError, IngestError, ParseError
from src.modules.ingest import (
    CHANNELS,
    GridGeometry,
    SnapshotSeries,
    TrafficRecord,
    build_snapshots,
    channel_index,
    load_grid,
    mean_snapshot,
    nearest_cells,
    parse_cdr_line,
    project_grid,
    project_wgs84,
    read_cdr_file,
    read_cdr_files,
    restrict_nodes,
    split_series,
)


def grid_of(*cells):
    return GridGeometry({c: (9.0 + 0.01 * c, 45.0) for c in cells}, (9.0, 45.0))


class TestParseCdrLine:
    def test_empty_field_reads_as_zero(self):
        record = parse_cdr_line("1\t1383260400000\t39\t0.27\t\t0.11\t0.30\t8.14")
        assert record.cell_id == 1
        assert record.interval_start == 1383260400000
        assert record.sms_out == 0.0
        assert record.internet == pytest.approx(8.14)

    def test_five_channels_in_order(self):
        record = parse_cdr_line("5\t1383260400000\t39\t1\t2\t3\t4\t5")
        assert record.channels() == (1.0, 2.0, 3.0, 4.0, 5.0)

    def test_cell_zero_rejected(self):
        with pytest.raises(ParseError):
            parse_cdr_line("0\t1383260400000\t39\t0\t0\t0\t0\t0")

    def test_negative_activity_carries_line_number(self):
        with pytest.raises(ParseError) as info:
            parse_cdr_line("3\t1383260400000\t39\t-1\t0\t0\t0\t0", line_number=17)
        assert info.value.line_number == 17
        assert "line 17" in str(info.value)

    def test_malformed_timestamp(self):
        with pytest.raises(ParseError):
            parse_cdr_line("3\tnoon\t39\t0\t0\t0\t0\t0")

    def test_trailing_empty_columns_may_be_omitted(self):
        record = parse_cdr_line("4\t1383260400000\t39\t2.5")
        assert record.channels() == (2.5, 0.0, 0.0, 0.0, 0.0)

    def test_nan_rejected(self):
        with pytest.raises(ParseError):
            parse_cdr_line("4\t1383260400000\t39\tnan\t0\t0\t0\t0")


class TestProjection:
    def test_origin_maps_to_zero(self):
        assert project_wgs84(9.0, 45.0, (9.0, 45.0)) == (0.0, 0.0)

    def test_north_offset(self):
        x, y = project_wgs84(9.0, 45.01, (9.0, 45.0))
        assert x == 0.0
        assert y == pytest.approx(1111.95, abs=0.01)

    def test_east_offset(self):
        x, y = project_wgs84(9.01, 45.0, (9.0, 45.0))
        assert x == pytest.approx(786.26, abs=0.01)
        assert y == 0.0

    def test_out_of_range_rejected(self):
        with pytest.raises(DomainError):
            project_wgs84(200.0, 45.0, (9.0, 45.0))

    def test_distance_symmetry(self):
        rng = np.random.default_rng(3)
        origin = (9.19, 45.46)
        for _ in range(20):
            a = project_wgs84(9.1 + 0.2 * rng.random(), 45.4 + 0.1 * rng.random(), origin)
            b = project_wgs84(9.1 + 0.2 * rng.random(), 45.4 + 0.1 * rng.random(), origin)
            assert math.dist(a, b) == math.dist(b, a)

    def test_project_grid_matches_pointwise(self, grid_csv):
        grid = load_grid(grid_csv)
        coords = project_grid(grid)
        for row, cell in zip(coords, grid.node_ids):
            expected = project_wgs84(*grid.cells[cell], grid.origin)
            assert row == pytest.approx(expected, abs=1e-9)


class TestBuildSnapshots:
    def test_duplicates_are_summed(self):
        records = [
            TrafficRecord(7, MILAN_START, internet=1.0),
            TrafficRecord(7, MILAN_START, internet=2.5),
        ]
        series = build_snapshots(records, grid_of(7))
        assert series.T == 1
        assert series.values[0, 0, CHANNELS.index("internet")] == 3.5

    def test_silent_cell_gets_zero_row(self):
        records = [TrafficRecord(1, MILAN_START, 1, 1, 1, 1, 1)]
        series = build_snapshots(records, grid_of(1, 2))
        assert series.node_ids == (1, 2)
        assert not series.values[:, 1].any()

    def test_gap_is_zero_filled(self):
        records = [
            TrafficRecord(1, MILAN_START, internet=4.0),
            TrafficRecord(1, MILAN_START + 2 * TEN_MINUTES, internet=6.0),
        ]
        series = build_snapshots(records, grid_of(1))
        assert series.T == 3
        assert not series.values[1].any()
        assert series.timestamps == [MILAN_START + i * TEN_MINUTES for i in range(3)]

    def test_unknown_cell_listed(self):
        with pytest.raises(IngestError, match="99"):
            build_snapshots([TrafficRecord(99, MILAN_START)], grid_of(1))

    def test_no_records(self):
        with pytest.raises(IngestError, match="no records"):
            build_snapshots([], grid_of(1))

    def test_misaligned_timestamp(self):
        records = [TrafficRecord(1, MILAN_START), TrafficRecord(1, MILAN_START + 1000)]
        with pytest.raises(IngestError):
            build_snapshots(records, grid_of(1))

    def test_snapshot_sum_matches_records(self):
        rng = np.random.default_rng(11)
        records = [
            TrafficRecord(int(rng.integers(1, 5)), MILAN_START + int(rng.integers(0, 4)) * TEN_MINUTES,
                          *np.round(rng.random(5) * 10, 3))
            for _ in range(60)
        ]
        series = build_snapshots(records, grid_of(1, 2, 3, 4))
        for slot in range(series.T):
            ts = series.start_ms + slot * TEN_MINUTES
            expected = sum(sum(r.channels()) for r in records if r.interval_start == ts)
            assert series.values[slot].sum() == pytest.approx(expected, rel=1e-12)

    def test_record_order_does_not_change_result(self):
        rng = np.random.default_rng(5)
        records = [TrafficRecord(int(rng.integers(1, 4)), MILAN_START + int(rng.integers(0, 3)) * TEN_MINUTES,
                                 *(rng.random(5) * 1e3)) for _ in range(50)]
        forward = build_snapshots(records, grid_of(1, 2, 3))
        backward = build_snapshots(records[::-1], grid_of(1, 2, 3))
        assert np.array_equal(forward.values, backward.values)

    def test_snapshot_count_formula(self, small_cdr, grid_csv):
        series = build_snapshots(read_cdr_file(small_cdr), load_grid(grid_csv))
        assert series.T == (2 * TEN_MINUTES) // TEN_MINUTES + 1

    def test_missing_cell_interval_is_zero(self, small_cdr, grid_csv):
        series = build_snapshots(read_cdr_file(small_cdr), load_grid(grid_csv))
        assert (series.T, series.N, series.d) == (3, 3, 5)
        assert not series.values[1, 2].any()
        assert series.values[1, 0].tolist() == [1.0, 2.0, 3.0, 4.0, 2.0]
        assert series.values[2, 2, 4] == 5.0


class TestSplitSeries:
    @pytest.mark.parametrize("T, fraction, lengths", [(10, 0.8, (8, 2)), (2, 0.5, (1, 1))])
    def test_floor_split(self, T, fraction, lengths):
        series = SnapshotSeries(np.zeros((T, 2, 1)), MILAN_START)
        train, test = split_series(series, fraction)
        assert (train.T, test.T) == lengths
        assert test.start_ms == MILAN_START + lengths[0] * series.interval_ms

    def test_empty_train_rejected(self):
        with pytest.raises(DomainError):
            split_series(SnapshotSeries(np.zeros((3, 2, 1)), MILAN_START), 0.1)


class TestFiles:
    def test_shard_order_does_not_matter(self, tmp_path, grid_csv):
        first = tmp_path / "a.txt"
        second = tmp_path / "b.txt"
        first.write_text(cdr_line(1, MILAN_START, values=(0.1, 0.2, 0.3, 0.4, 0.5)), encoding="utf-8")
        second.write_text(cdr_line(1, MILAN_START, values=(1e-3, 7, 0.3, 0, 9.75)) + "\n"
                          + cdr_line(2, MILAN_START + TEN_MINUTES, values=(1, 1, 1, 1, 1)), encoding="utf-8")
        grid = load_grid(grid_csv)
        a = build_snapshots(read_cdr_files([first, second], workers=2), grid)
        b = build_snapshots(read_cdr_files([second, first]), grid)
        assert np.array_equal(a.values, b.values)

    def test_parse_error_names_file_and_line(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text(cdr_line(1, MILAN_START) + "\n" + "x\t1\t39\t0\t0\t0\t0\t0\n", encoding="utf-8")
        with pytest.raises(ParseError) as info:
            read_cdr_file(path)
        assert info.value.line_number == 3
        assert "bad.txt" in str(info.value)

    def test_missing_grid_names_path(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nowhere.csv"):
            load_grid(tmp_path / "nowhere.csv")

    def test_geojson_grid_uses_ring_centroid(self, tmp_path):
        square = [[9.0, 45.0], [9.002, 45.0], [9.002, 45.002], [9.0, 45.002], [9.0, 45.0]]
        payload = {
            "type": "FeatureCollection",
            "features": [{"type": "Feature", "properties": {"cellId": 42},
                          "geometry": {"type": "Polygon", "coordinates": [square]}}],
        }
        path = tmp_path / "grid.geojson"
        path.write_text(json.dumps(payload), encoding="utf-8")
        grid = load_grid(path)
        assert grid.cells[42] == pytest.approx((9.001, 45.001))

    def test_grid_header_required(self, tmp_path):
        path = tmp_path / "grid.csv"
        path.write_text("id,x,y\n1,9,45\n", encoding="utf-8")
        with pytest.raises(IngestError):
            load_grid(path)


class TestSeriesHelpers:
    def test_restrict_nodes_keeps_ascending_ids(self):
        values = np.arange(2 * 3 * 1, dtype=float).reshape(2, 3, 1)
        series = SnapshotSeries(values, MILAN_START, node_ids=(10, 20, 30))
        sub = restrict_nodes(series, [30, 10])
        assert sub.node_ids == (10, 30)
        assert np.array_equal(sub.values[:, :, 0], values[:, [0, 2], 0])

    def test_nearest_cells(self, grid_csv):
        assert nearest_cells(load_grid(grid_csv), 1, 2) == [1, 2]

    def test_mean_snapshot(self):
        values = np.array([[[1.0]], [[3.0]]])
        assert mean_snapshot(SnapshotSeries(values, MILAN_START)).features.tolist() == [[2.0]]

    def test_values_are_read_only(self):
        series = SnapshotSeries(np.zeros((1, 1, 1)), MILAN_START)
        with pytest.raises(ValueError):
            series.values[0, 0, 0] = 1.0

    def test_channel_names_and_indices(self):
        assert channel_index("internet") == 4
        assert channel_index(2) == 2
        with pytest.raises(DomainError):
            channel_index("voice")
