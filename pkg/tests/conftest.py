import numpy as np
import pytest

from atlasflow.network import (
    flatten_params,
    assign_from_vector,
    init_template,
    init_velocity_stack,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_template(rng):
    return init_template(2, 8, 2, rng, geometric=False)


@pytest.fixture
def small_stack(rng):
    return init_velocity_stack(2, 3, 8, 1, 4, 0.05, rng)


def fd_param_gradient(param_arrays, loss_fn, h=1e-5):
    """Central finite differences of a scalar loss over flattened parameters."""
    vec0 = flatten_params(param_arrays)
    out = np.zeros_like(vec0)
    for i in range(len(vec0)):
        vp = vec0.copy()
        vp[i] += h
        assign_from_vector(param_arrays, vp)
        lp = loss_fn()
        vp[i] -= 2 * h
        assign_from_vector(param_arrays, vp)
        lm = loss_fn()
        out[i] = (lp - lm) / (2 * h)
    assign_from_vector(param_arrays, vec0)
    return out


def rel_err(a, b, floor=1e-8):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
