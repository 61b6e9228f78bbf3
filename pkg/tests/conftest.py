import os

import pytest

from schedtune.schedspace import SketchContext
from schedtune.workload import TargetConfig, generate_sketches, load_network

WORKLOADS = os.path.join(os.path.dirname(__file__), os.pardir, "workloads")


def workload_path(name: str) -> str:
    return os.path.join(WORKLOADS, name)


@pytest.fixture(scope="session")
def target2():
    return TargetConfig(tiling_levels=2)


@pytest.fixture(scope="session")
def gemm64(target2):
    """(subgraph, tiled sketch, context) for the 64^3 matmul at 2 levels."""
    net = load_network(workload_path("gemm_64.yaml"))
    sg = net.subgraphs[0]
    sketch = generate_sketches(sg, target2)[0]
    return sg, sketch, SketchContext(sg, sketch, target2)
