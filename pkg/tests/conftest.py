import numpy as np
import pytest

from smoothcritic.autodiff import Tensor


def finite_difference_grads(loss_fn, params, h=1e-5):
    """Central finite differences of loss_fn() w.r.t. each parameter tensor.

    loss_fn must be a pure function of the current parameter values.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        assert flat.base is not None, "parameter data must be contiguous"
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss_fn().item()
            flat[i] = old - h
            lm = loss_fn().item()
            flat[i] = old
            gflat[i] = (lp - lm) / (2.0 * h)
        grads.append(g)
    return grads


def assert_grads_close(loss_fn, params, rtol=1e-4, h=1e-5):
    loss = loss_fn()
    loss.backward()
    fd = finite_difference_grads(loss_fn, params, h=h)
    for p, g_fd in zip(params, fd):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(g_fd)), 1e-6)
        rel = np.abs(g - g_fd) / denom
        assert np.max(rel) < rtol, f"max rel err {np.max(rel)}"


@pytest.fixture
def rng():
    return np.random.default_rng(0)
