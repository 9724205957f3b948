import numpy as np
import pytest

from crossdiff.model import CrossTensor, Grid, ModelSpec


def product_sine(amplitude=1.0):
    def f(points):
        out = np.full(points.shape[0], amplitude)
        for d in range(points.shape[1]):
            out = out * np.sin(np.pi * points[:, d])
        return out
    return f


def coupled_spec_2d(ell=1.0, k_offdiag=1.0, amp=(1.0, 0.8)):
    """Two-species spec on the unit square satisfying the existence bound."""
    iso = CrossTensor.isotropic
    k = [[iso(1.0, 2), iso(k_offdiag, 2)], [iso(k_offdiag, 2), iso(1.0, 2)]]
    return ModelSpec(m=2, delta=[1.0, 1.0], K=k, ell=ell, domain=(1.0, 1.0),
                     initial=[product_sine(amp[0]), product_sine(amp[1])],
                     dirichlet=[0.0, 0.0])


@pytest.fixture(scope="session")
def grid_12() -> Grid:
    return Grid((12, 12), (1.0, 1.0))


@pytest.fixture(scope="session")
def grid_1d() -> Grid:
    return Grid((64,), (1.0,))
