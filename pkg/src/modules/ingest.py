"""
Grid-traffic ingestion: CDR parsing, grid projection and snapshot assembly.
"""
import csv
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from ..errors import DomainError, IngestError, ParseError

logger = logging.getLogger(__name__)

CHANNELS = ("sms_in", "sms_out", "call_in", "call_out", "internet")
CDR_COLUMNS = 8
EARTH_RADIUS_M = 6371000.0
DEFAULT_INTERVAL_MS = 10 * 60 * 1000


@dataclass(frozen=True)
class TrafficRecord:
    cell_id: int
    interval_start: int
    sms_in: float = 0.0
    sms_out: float = 0.0
    call_in: float = 0.0
    call_out: float = 0.0
    internet: float = 0.0

    def channels(self) -> Tuple[float, float, float, float, float]:
        return (self.sms_in, self.sms_out, self.call_in, self.call_out, self.internet)


@dataclass(frozen=True)
class GridGeometry:
    cells: Dict[int, Tuple[float, float]]
    origin: Tuple[float, float]

    def __post_init__(self):
        for cell_id, (lon, lat) in self.cells.items():
            check_wgs84(lon, lat, f"cell {cell_id}")
        check_wgs84(*self.origin, "origin")

    @property
    def node_ids(self) -> Tuple[int, ...]:
        return tuple(sorted(self.cells))


@dataclass(frozen=True)
class Snapshot:
    timestamp: int
    features: np.ndarray
    channels: Tuple[str, ...] = CHANNELS


@dataclass(frozen=True)
class SnapshotSeries:
    """T x N x d stack of snapshots with uniform spacing.

    Gaps are materialised as zero rows, so snapshot i always starts at
    start_ms + i * interval_ms.
    """

    values: np.ndarray
    start_ms: int
    interval_ms: int = DEFAULT_INTERVAL_MS
    node_ids: Tuple[int, ...] = ()
    channels: Tuple[str, ...] = CHANNELS

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, order="C")
        if values.ndim != 3:
            raise DomainError(f"series values must be T x N x d, got shape {values.shape}")
        if self.interval_ms <= 0:
            raise DomainError("interval must be positive")
        if not np.all(np.isfinite(values)):
            raise DomainError("series contains NaN or infinite values")
        node_ids = tuple(int(n) for n in self.node_ids) or tuple(range(1, values.shape[1] + 1))
        if len(node_ids) != values.shape[1]:
            raise DomainError(f"{len(node_ids)} node ids for {values.shape[1]} nodes")
        channels = tuple(self.channels)
        if len(channels) != values.shape[2]:
            channels = tuple(f"f{i}" for i in range(values.shape[2]))
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "node_ids", node_ids)
        object.__setattr__(self, "channels", channels)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def timestamps(self) -> List[int]:
        return [self.start_ms + i * self.interval_ms for i in range(self.T)]

    @property
    def snapshots(self) -> List[Snapshot]:
        return [Snapshot(ts, self.values[i], self.channels) for i, ts in enumerate(self.timestamps)]

    def snapshot(self, index: int) -> Snapshot:
        index = range(self.T)[index]
        return Snapshot(self.start_ms + index * self.interval_ms, self.values[index], self.channels)

    def slice(self, start: int, stop: int) -> "SnapshotSeries":
        return SnapshotSeries(
            self.values[start:stop],
            self.start_ms + start * self.interval_ms,
            self.interval_ms,
            self.node_ids,
            self.channels,
        )


def check_wgs84(lon: float, lat: float, what: str = "point") -> None:
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise DomainError(f"{what}: non-finite coordinates ({lon}, {lat})")
    if not -180.0 <= lon <= 180.0 or not -90.0 <= lat <= 90.0:
        raise DomainError(f"{what}: coordinates out of WGS84 range ({lon}, {lat})")


def channel_index(channel: int | str, channels: Sequence[str] = CHANNELS) -> int:
    if isinstance(channel, str) and not channel.lstrip("-").isdigit():
        if channel not in channels:
            raise DomainError(f"unknown channel {channel!r}; expected one of {', '.join(channels)}")
        return list(channels).index(channel)
    index = int(channel)
    if not 0 <= index < len(channels):
        raise DomainError(f"channel index {index} out of range for {len(channels)} channels")
    return index


def _parse_activity(text: str, name: str, line_number: int | None, source: str | None) -> float:
    text = text.strip()
    if not text:
        return 0.0
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"malformed {name} value {text!r}", line_number, source) from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite {name} value {text!r}", line_number, source)
    if value < 0:
        raise ParseError(f"negative {name} value {value}", line_number, source)
    return value


def parse_cdr_line(line: str, line_number: int | None = None, source: str | None = None) -> TrafficRecord:
    """Parse one tab-separated CDR aggregate line.

    Columns: cell_id, interval_start_ms, country_code, sms_in, sms_out,
    call_in, call_out, internet. Empty numeric cells read as 0; trailing
    empty cells may be omitted.
    """
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) > CDR_COLUMNS or len(fields) < 2:
        raise ParseError(f"expected {CDR_COLUMNS} tab-separated columns, got {len(fields)}", line_number, source)
    fields += [""] * (CDR_COLUMNS - len(fields))

    try:
        cell_id = int(fields[0])
    except ValueError:
        raise ParseError(f"malformed cell_id {fields[0]!r}", line_number, source) from None
    if cell_id < 1:
        raise ParseError(f"cell_id must be >= 1, got {cell_id}", line_number, source)

    try:
        interval_start = int(fields[1])
    except ValueError:
        raise ParseError(f"malformed timestamp {fields[1]!r}", line_number, source) from None

    # country code is validated but not kept; rows are summed across countries
    if fields[2].strip():
        try:
            int(fields[2])
        except ValueError:
            raise ParseError(f"malformed country_code {fields[2]!r}", line_number, source) from None

    activity = [
        _parse_activity(text, name, line_number, source) for text, name in zip(fields[3:], CHANNELS)
    ]
    return TrafficRecord(cell_id, interval_start, *activity)


def read_cdr_file(path: str | Path) -> List[TrafficRecord]:
    path = Path(path)
    records: List[TrafficRecord] = []
    with path.open("r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            records.append(parse_cdr_line(line, line_number, str(path)))
    logger.info("parsed %d records from %s", len(records), path)
    return records


def read_cdr_files(paths: Sequence[str | Path], workers: int = 1) -> List[TrafficRecord]:
    """Parse several CDR shards; the merged list follows the order of paths."""
    if workers > 1 and len(paths) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            shards = list(pool.map(read_cdr_file, paths))
    else:
        shards = [read_cdr_file(p) for p in paths]
    return [record for shard in shards for record in shard]


def _ring_centroid(ring: Sequence[Sequence[float]]) -> Tuple[float, float]:
    points = np.asarray(ring, dtype=np.float64)[:, :2]
    if len(points) > 1 and np.array_equal(points[0], points[-1]):
        points = points[:-1]
    lon, lat = points.mean(axis=0)
    return float(lon), float(lat)


def _load_grid_geojson(path: Path) -> Dict[int, Tuple[float, float]]:
    payload = json.loads(path.read_text(encoding="utf-8"))
    cells: Dict[int, Tuple[float, float]] = {}
    for feature in payload.get("features", []):
        props = feature.get("properties") or {}
        cell_id = props.get("cellId", props.get("cell_id", feature.get("id")))
        geometry = feature.get("geometry") or {}
        if cell_id is None or geometry.get("type") != "Polygon":
            raise IngestError(f"{path}: grid feature without cell id or polygon geometry")
        cells[int(cell_id)] = _ring_centroid(geometry["coordinates"][0])
    return cells


def load_grid(path: str | Path, origin: Tuple[float, float] | None = None) -> GridGeometry:
    """Read grid centroids from a `cell_id,lon,lat` CSV (or a GeoJSON grid)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"grid file not found: {path}")
    if path.suffix.lower() in (".geojson", ".json"):
        cells = _load_grid_geojson(path)
    else:
        cells = {}
        with path.open("r", encoding="utf-8", newline="") as handle:
            reader = csv.DictReader(handle)
            if reader.fieldnames is None or not {"cell_id", "lon", "lat"} <= set(reader.fieldnames):
                raise IngestError(f"{path}: grid CSV needs header cell_id,lon,lat")
            for row_number, row in enumerate(reader, start=2):
                try:
                    cells[int(row["cell_id"])] = (float(row["lon"]), float(row["lat"]))
                except (TypeError, ValueError):
                    raise ParseError(f"malformed grid row {row}", row_number, str(path)) from None
    if not cells:
        raise IngestError(f"{path}: grid has no cells")
    if origin is None:
        lons, lats = zip(*cells.values())
        origin = (float(np.mean(lons)), float(np.mean(lats)))
    return GridGeometry(cells, origin)


def project_wgs84(lon: float, lat: float, origin: Tuple[float, float]) -> Tuple[float, float]:
    """Local equirectangular projection about origin, in meters."""
    check_wgs84(lon, lat)
    check_wgs84(*origin, "origin")
    lon0, lat0 = origin
    x = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * math.radians(lon - lon0)
    y = EARTH_RADIUS_M * math.radians(lat - lat0)
    return x, y


def project_grid(grid: GridGeometry, node_ids: Sequence[int] | None = None) -> np.ndarray:
    node_ids = grid.node_ids if node_ids is None else node_ids
    missing = [n for n in node_ids if n not in grid.cells]
    if missing:
        raise IngestError(f"cells missing from grid: {missing}")
    lonlat = np.array([grid.cells[n] for n in node_ids], dtype=np.float64).reshape(-1, 2)
    lon0, lat0 = grid.origin
    x = EARTH_RADIUS_M * math.cos(math.radians(lat0)) * np.radians(lonlat[:, 0] - lon0)
    y = EARTH_RADIUS_M * np.radians(lonlat[:, 1] - lat0)
    return np.column_stack([x, y])


def build_snapshots(
    records: Iterable[TrafficRecord],
    grid: GridGeometry,
    interval_ms: int = DEFAULT_INTERVAL_MS,
) -> SnapshotSeries:
    """Sum records per (cell, interval) and zero-fill every missing slot."""
    if interval_ms <= 0:
        raise DomainError("interval must be positive")
    records = list(records)
    if not records:
        raise IngestError("no records")

    missing = sorted({r.cell_id for r in records} - set(grid.cells))
    if missing:
        raise IngestError(f"records reference cells absent from grid: {missing}")

    node_ids = grid.node_ids
    row_of = {cell_id: row for row, cell_id in enumerate(node_ids)}
    stamps = np.array([r.interval_start for r in records], dtype=np.int64)
    start = int(stamps.min())
    offsets = stamps - start
    misaligned = offsets % interval_ms != 0
    if misaligned.any():
        bad = int(stamps[np.argmax(misaligned)])
        raise IngestError(f"timestamp {bad} is not aligned to the {interval_ms} ms interval")
    slots = offsets // interval_ms
    rows = np.array([row_of[r.cell_id] for r in records], dtype=np.int64)
    activity = np.array([r.channels() for r in records], dtype=np.float64)

    # canonical order makes the float sums independent of record/shard order
    order = np.lexsort(tuple(activity.T[::-1]) + (rows, slots))
    values = np.zeros((int(slots.max()) + 1, len(node_ids), len(CHANNELS)))
    np.add.at(values, (slots[order], rows[order]), activity[order])

    series = SnapshotSeries(values, start, interval_ms, node_ids, CHANNELS)
    logger.info("assembled %d snapshots x %d nodes x %d channels", series.T, series.N, series.d)
    return series


def split_series(series: SnapshotSeries, train_fraction: float) -> Tuple[SnapshotSeries, SnapshotSeries]:
    """Temporal prefix/suffix split at floor(T * train_fraction)."""
    if series.T < 2:
        raise DomainError(f"need at least 2 snapshots to split, got {series.T}")
    if not 0.0 < train_fraction < 1.0:
        raise DomainError(f"train_fraction must be in (0, 1), got {train_fraction}")
    cut = int(math.floor(series.T * train_fraction))
    if cut == 0 or cut == series.T:
        raise DomainError(f"train_fraction {train_fraction} leaves an empty side for T={series.T}")
    return series.slice(0, cut), series.slice(cut, series.T)


def restrict_nodes(series: SnapshotSeries, node_ids: Iterable[int]) -> SnapshotSeries:
    keep = sorted(set(int(n) for n in node_ids))
    index = {n: i for i, n in enumerate(series.node_ids)}
    missing = [n for n in keep if n not in index]
    if missing:
        raise DomainError(f"nodes not in series: {missing}")
    rows = [index[n] for n in keep]
    return SnapshotSeries(series.values[:, rows], series.start_ms, series.interval_ms, tuple(keep), series.channels)


def nearest_cells(grid: GridGeometry, center_cell: int, count: int) -> List[int]:
    """The `count` grid cells closest to center_cell (ties by cell id)."""
    if center_cell not in grid.cells:
        raise DomainError(f"cell {center_cell} not in grid")
    node_ids = grid.node_ids
    coords = project_grid(grid, node_ids)
    center = coords[node_ids.index(center_cell)]
    dist = np.hypot(*(coords - center).T)
    order = np.lexsort((np.array(node_ids), dist))
    return sorted(int(node_ids[i]) for i in order[:count])


def mean_snapshot(series: SnapshotSeries) -> Snapshot:
    return Snapshot(series.start_ms, series.values.mean(axis=0), series.channels)
