"""
Unit tests for the Adam optimizer
"""

import numpy as np
import pytest

from engine.python.errors import ContractError
from engine.python.optim import Adam, AdamState, adam_step
from tests.conftest import make_paramset


def _with_grads(params, grads):
    params = params.clone(requires_grad=True)
    for tensor, grad in zip(params.tensors(), grads):
        tensor.grad = np.asarray(grad, dtype=float)
    return params


class TestAdamStep:
    """Bias-corrected Adam"""

    def test_first_step_moves_by_learning_rate(self):
        params = _with_grads(make_paramset([[[1.0, -2.0, 0.5]]]), [[0.3, -4.0, 1e3]])
        adam_step(params, AdamState.for_params(params), lr=0.01)
        np.testing.assert_allclose(params.arrays()[0], [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01], rtol=0, atol=1e-9)

    def test_zero_gradient_is_fixed_point(self):
        params = _with_grads(make_paramset([[[1.0, 2.0]]]), [[0.0, 0.0]])
        adam_step(params, AdamState.for_params(params), lr=0.1)
        np.testing.assert_array_equal(params.arrays()[0], [1.0, 2.0])

    def test_deterministic(self):
        base = make_paramset([[[0.2, -0.7]], [[1.1]]])
        grads = [[0.5, -0.25], [2.0]]
        first = _with_grads(base, grads)
        second = _with_grads(base, grads)
        adam_step(first, AdamState.for_params(first), lr=0.005)
        adam_step(second, AdamState.for_params(second), lr=0.005)
        assert first.bitwise_equal(second)

    def test_step_counter(self):
        params = _with_grads(make_paramset([[[1.0]]]), [[1.0]])
        state = AdamState.for_params(params)
        adam_step(params, state, lr=0.01)
        adam_step(params, state, lr=0.01)
        assert state.step == 2

    def test_missing_gradient(self):
        params = make_paramset([[[1.0]]]).clone(requires_grad=True)
        with pytest.raises(ContractError):
            adam_step(params, AdamState.for_params(params), lr=0.01)

    def test_mismatched_state(self):
        params = _with_grads(make_paramset([[[1.0]], [[2.0]]]), [[1.0], [1.0]])
        with pytest.raises(ContractError):
            adam_step(params, AdamState(), lr=0.01)


class TestAdamWrapper:
    """Stateful optimizer"""

    def test_minimizes_quadratic(self):
        params = make_paramset([[[3.0, -2.0]]]).clone(requires_grad=True)
        optimizer = Adam(params, lr=0.1)
        for _ in range(300):
            optimizer.zero_grad()
            w = params.tensors()[0]
            (w * w).sum().backward()
            optimizer.step()
        assert np.max(np.abs(params.arrays()[0])) < 0.05
