"""
Parameter checkpoints: one JSON header line, then little-endian float64 payloads.
"""
import json
import os
from pathlib import Path

import numpy as np

from ..errors import UsageError
from .nn_core import ModelParams

MAGIC = "celltraffic-params-v1"
LE_FLOAT64 = np.dtype("<f8")


def save_params(params: ModelParams, path: str | Path, metadata: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": MAGIC,
        "tensors": [{"name": name, "shape": list(value.shape)} for name, value in params.items()],
        "metadata": metadata or {},
    }
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as handle:
        handle.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for value in params.values():
            handle.write(np.ascontiguousarray(value, dtype=LE_FLOAT64).tobytes())
        handle.flush()
        os.fsync(handle.fileno())
    os.replace(tmp, path)
    return path


def load_params(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    with path.open("rb") as handle:
        header = json.loads(handle.readline().decode("utf-8"))
        if header.get("format") != MAGIC:
            raise UsageError(f"{path} is not a parameter checkpoint")
        params = ModelParams()
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64))
            raw = handle.read(count * LE_FLOAT64.itemsize)
            if len(raw) != count * LE_FLOAT64.itemsize:
                raise UsageError(f"{path}: truncated payload for {entry['name']}")
            params[entry["name"]] = np.frombuffer(raw, dtype=LE_FLOAT64).reshape(shape).astype(np.float64)
    return params, header.get("metadata", {})
