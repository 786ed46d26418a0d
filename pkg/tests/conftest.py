import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from eitkit.mesh import MeshSpec, generate_disk_mesh


@pytest.fixture(scope="session", autouse=True)
def single_threaded_blas():
    # small-matrix workloads here lose badly to BLAS spin-wait overhead,
    # and single-threaded reductions keep reruns byte-identical
    with threadpool_limits(limits=1):
        yield


@pytest.fixture(scope="session")
def small_mesh():
    return generate_disk_mesh(MeshSpec(target_nodes=450))


@pytest.fixture(scope="session")
def coarse_mesh():
    return generate_disk_mesh(MeshSpec(target_nodes=1145))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
