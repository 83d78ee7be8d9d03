import numpy as np
import pytest

from src.errors import UsageError
from src.modules.checkpoint import MAGIC, load_params, save_params
from src.modules.nn_core import ModelParams


def test_round_trip_keeps_order_shapes_and_bits(tmp_path):
    rng = np.random.default_rng(0)
    params = ModelParams()
    params["layer2.weight"] = rng.normal(size=(4, 2))
    params["layer1.weight"] = rng.normal(size=(3, 3, 4))
    params["layer1.bias"] = rng.normal(size=4)
    path = save_params(params, tmp_path / "model.params", {"m": 6, "k": 1})
    loaded, metadata = load_params(path)
    assert list(loaded) == list(params)
    for name in params:
        assert loaded[name].tobytes() == params[name].tobytes()
    assert metadata == {"m": 6, "k": 1}
    assert not (tmp_path / "model.params.tmp").exists()


def test_header_line_names_format(tmp_path):
    path = save_params(ModelParams(w=np.zeros((1, 1))), tmp_path / "a.params")
    assert path.read_bytes().split(b"\n", 1)[0].decode("utf-8").find(MAGIC) > 0


def test_missing_checkpoint(tmp_path):
    with pytest.raises(UsageError):
        load_params(tmp_path / "nothing.params")


def test_foreign_file_rejected(tmp_path):
    path = tmp_path / "x.params"
    path.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(UsageError):
        load_params(path)


def test_truncated_payload(tmp_path):
    path = save_params(ModelParams(w=np.ones((2, 2))), tmp_path / "t.params")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(UsageError, match="truncated"):
        load_params(path)
