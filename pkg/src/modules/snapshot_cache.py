"""
On-disk snapshot cache: manifest.json plus one little-endian float64 file per snapshot.
"""
import hashlib
import json
import logging
import os
from pathlib import Path

import numpy as np

from ..errors import IngestError, UsageError
from .ingest import SnapshotSeries

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
COORDS_NAME = "coords.csv"
PAYLOAD_SUFFIX = ".f64"
LE_FLOAT64 = np.dtype("<f8")


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as handle:
        handle.write(data)
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)


def payload_name(timestamp: int) -> str:
    return f"{timestamp}{PAYLOAD_SUFFIX}"


def series_checksum(series: SnapshotSeries) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(series.values, dtype=LE_FLOAT64).tobytes())
    return digest.hexdigest()


def save_series(series: SnapshotSeries, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for stale in directory.glob(f"*{PAYLOAD_SUFFIX}"):
        stale.unlink()

    timestamps = series.timestamps
    for timestamp, features in zip(timestamps, series.values):
        _atomic_write(directory / payload_name(timestamp), np.ascontiguousarray(features, dtype=LE_FLOAT64).tobytes())

    manifest = {
        "interval_ms": series.interval_ms,
        "node_ids": list(series.node_ids),
        "d": series.d,
        "channels": list(series.channels),
        "timestamps": timestamps,
        "sha256": series_checksum(series),
    }
    _atomic_write(directory / MANIFEST_NAME, (json.dumps(manifest, indent=2) + "\n").encode("utf-8"))
    logger.info("wrote %d snapshots to %s", series.T, directory)
    return directory


def load_series(directory: str | Path) -> SnapshotSeries:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise UsageError(f"no snapshot cache at {directory} (run `ingest` first)")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))

    node_ids = manifest["node_ids"]
    d = int(manifest["d"])
    timestamps = manifest["timestamps"]
    interval_ms = int(manifest["interval_ms"])
    if not timestamps:
        raise IngestError(f"{manifest_path}: empty series")
    expected = [timestamps[0] + i * interval_ms for i in range(len(timestamps))]
    if timestamps != expected:
        raise IngestError(f"{manifest_path}: timestamps are not uniformly spaced")

    values = np.empty((len(timestamps), len(node_ids), d), dtype=np.float64)
    for i, timestamp in enumerate(timestamps):
        raw = (directory / payload_name(timestamp)).read_bytes()
        if len(raw) != len(node_ids) * d * LE_FLOAT64.itemsize:
            raise IngestError(f"{directory / payload_name(timestamp)}: payload size mismatch")
        values[i] = np.frombuffer(raw, dtype=LE_FLOAT64).reshape(len(node_ids), d)

    series = SnapshotSeries(values, timestamps[0], interval_ms, tuple(node_ids), tuple(manifest.get("channels", ())))
    checksum = manifest.get("sha256")
    if checksum and checksum != series_checksum(series):
        raise IngestError(f"{manifest_path}: checksum mismatch")
    return series


def save_coords(node_ids, coords: np.ndarray, directory: str | Path) -> Path:
    """Projected node coordinates beside the cache, as cell_id,x,y."""
    path = Path(directory) / COORDS_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["cell_id,x,y"] + [f"{int(n)},{float(x)!r},{float(y)!r}" for n, (x, y) in zip(node_ids, coords)]
    _atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
    return path


def load_coords(directory: str | Path, node_ids=None) -> np.ndarray:
    path = Path(directory) / COORDS_NAME
    if not path.exists():
        raise UsageError(f"no node coordinates at {path} (run `ingest` or `synth` first)")
    rows = {}
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        cell, x, y = line.split(",")
        rows[int(cell)] = (float(x), float(y))
    order = list(rows) if node_ids is None else [int(n) for n in node_ids]
    missing = [n for n in order if n not in rows]
    if missing:
        raise IngestError(f"{path}: no coordinates for cells {missing[:10]}")
    return np.array([rows[n] for n in order], dtype=np.float64).reshape(-1, 2)
