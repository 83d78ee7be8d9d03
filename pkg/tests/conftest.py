import numpy as np
import pytest

from src.config import RunConfig
from src.modules.graph import Graph, build_epsilon_graph
from src.modules.synth_bench import fixture

MILAN_START = 1383260400000
TEN_MINUTES = 600000


@pytest.fixture(scope="session")
def tiny():
    return fixture("tiny_6")


@pytest.fixture(scope="session")
def two_hotspots():
    return fixture("two_hotspots_100")


@pytest.fixture(scope="session")
def periodic():
    return fixture("periodic_200")


@pytest.fixture
def config(tmp_path):
    """Defaults with every output redirected under tmp_path."""
    return RunConfig(
        cache_dir=str(tmp_path / "cache"),
        graph_dir=str(tmp_path / "graph"),
        out_dir=str(tmp_path / "out"),
    )


@pytest.fixture
def path_graph():
    """Four nodes on a line, 100 m apart, edges between neighbours."""
    coords = np.array([[0.0, 0.0], [100.0, 0.0], [200.0, 0.0], [300.0, 0.0]])
    return build_epsilon_graph(coords, 150.0)


@pytest.fixture
def triangle():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.8]])
    return build_epsilon_graph(coords, 2.0)


def cdr_line(cell, ts, country=39, values=("", "", "", "", "")):
    return "\t".join([str(cell), str(ts), str(country), *[str(v) for v in values]]) + "\n"


@pytest.fixture
def grid_csv(tmp_path):
    path = tmp_path / "grid.csv"
    path.write_text("cell_id,lon,lat\n1,9.00,45.00\n2,9.01,45.00\n3,9.00,45.01\n", encoding="utf-8")
    return path


@pytest.fixture
def small_cdr(tmp_path):
    """3 cells x 3 intervals; cell 3 has no record in the second interval."""
    lines = []
    for slot in range(3):
        for cell in (1, 2, 3):
            if cell == 3 and slot == 1:
                continue
            lines.append(cdr_line(cell, MILAN_START + slot * TEN_MINUTES, values=(1, 2, 3, 4, cell + slot)))
    path = tmp_path / "cdr.txt"
    path.write_text("".join(lines), encoding="utf-8")
    return path


def dense_graph(adjacency, coords=None):
    adjacency = np.asarray(adjacency, dtype=np.float64)
    n = adjacency.shape[0]
    coords = np.zeros((n, 2)) if coords is None else coords
    return Graph(coords, adjacency)
