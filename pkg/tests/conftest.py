import numpy as np
import pytest

import jmgtlab as jl


@pytest.fixture(scope="session")
def interval_setup():
    """Small damped 1D problem shared across tests."""
    mesh = jl.build_interval_mesh(1.0, 30)
    part = jl.partition_boundary(mesh, "endpoint0")
    params = jl.PhysicalParams.build(
        mesh, part, tau=1.0, c=1.3, delta=0.7,
        alpha=lambda x: 0.8 + 0.2 * x, kappa0=1.0, kappa1=1.0)
    ops = jl.assemble_core(mesh, part, params)
    return mesh, part, params, ops


@pytest.fixture(scope="session")
def rect_setup():
    mesh = jl.build_rect_mesh(1.0, 1.0, 8, 8)
    part = jl.partition_boundary(mesh, "left")
    params = jl.PhysicalParams.build(mesh, part, alpha="critical+0.1",
                                     kappa0=1.0, kappa1=1.0)
    ops = jl.assemble_core(mesh, part, params)
    return mesh, part, params, ops


@pytest.fixture
def rng():
    return np.random.default_rng(42)
