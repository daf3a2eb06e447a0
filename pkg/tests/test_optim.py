import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from resmoco.nn import ParamTensor
from resmoco.optim import NonFiniteGradientError, OptimizerState, lars_step, lars_trust, sgd_step
from resmoco.tensor import Tensor


def param(name, value, grad, excluded=False):
    p = ParamTensor(name, Tensor(np.array(value, dtype=np.float64), requires_grad=True), excluded, excluded)
    p.value.grad = np.array(grad, dtype=np.float64)
    return p


def test_zero_gradient_fixed_point():
    p = param("w", [1.0, -2.0], [0.0, 0.0])
    lars_step([p], OptimizerState(), lr=0.5, weight_decay=0.0)
    np.testing.assert_array_equal(p.value.data, [1.0, -2.0])


def test_trust_ratio_scalar():
    assert lars_trust(np.array([1.0]), np.array([1.0]), 0.02, 0.0) == pytest.approx(0.02)
    assert lars_trust(np.array([0.0]), np.array([1.0]), 0.02, 0.0) == 1.0
    assert lars_trust(np.array([1.0]), np.array([0.0]), 0.02, 0.0) == 1.0


def test_lars_single_step_value():
    p = param("w", [1.0], [1.0])
    lars_step([p], OptimizerState(), lr=0.1, eta=0.02, weight_decay=0.0)
    np.testing.assert_allclose(p.value.data, [1.0 - 0.1 * 0.02])


def test_lars_with_weight_decay():
    w, g, wd, eta, lr = np.array([3.0, 4.0]), np.array([0.6, 0.8]), 0.1, 0.02, 0.5
    p = param("w", w, g)
    lars_step([p], OptimizerState(), lr, eta, wd)
    trust = eta * 5.0 / (1.0 + wd * 5.0)
    np.testing.assert_allclose(p.value.data, w - lr * trust * (g + wd * w))


def test_excluded_parameter_gets_no_decay():
    a = param("b", [5.0], [0.3], excluded=True)
    b = param("b", [-7.0], [0.3], excluded=True)
    lars_step([a], OptimizerState(), 0.1, weight_decay=0.5)
    lars_step([b], OptimizerState(), 0.1, weight_decay=0.5)
    assert a.value.data[0] - 5.0 == pytest.approx(b.value.data[0] + 7.0)
    assert a.value.data[0] == pytest.approx(5.0 - 0.1 * 0.3)


def test_nan_gradient_aborts_before_any_update():
    good = param("a", [1.0], [1.0])
    bad = param("b", [1.0], [np.nan])
    for step in (lars_step, sgd_step):
        with pytest.raises(NonFiniteGradientError):
            step([good, bad], OptimizerState(), 0.1)
        assert good.value.data[0] == 1.0


def test_sgd_plain():
    p = param("w", [1.0, 2.0], [0.5, -1.0])
    sgd_step([p], OptimizerState(), lr=0.2, momentum=0.0)
    np.testing.assert_allclose(p.value.data, [0.9, 2.2])


def test_sgd_two_step_momentum():
    p = param("w", [0.0], [1.0])
    state = OptimizerState()
    sgd_step([p], state, lr=0.1, momentum=0.9)
    sgd_step([p], state, lr=0.1, momentum=0.9)
    assert p.value.data[0] == pytest.approx(-0.1 * (1 + 1.9))
    assert state.step == 2


def test_sgd_buffer_decays():
    p = param("w", [0.0], [1.0])
    state = OptimizerState()
    sgd_step([p], state, lr=0.1)
    p.value.grad = np.zeros(1)
    for _ in range(300):
        sgd_step([p], state, lr=0.1)
    assert abs(state.buffers["w"][0]) < 1e-12


@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8), st.floats(0.001, 1.0))
def test_buffers_match_shapes_and_start_at_zero(vals, lr):
    p = param("w", vals, np.ones(len(vals)))
    state = OptimizerState()
    lars_step([p], state, lr)
    assert state.buffers["w"].shape == p.value.shape
