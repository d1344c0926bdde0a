import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from src.errors import ConfigError, PoisonedStateError
from src.optim import OptimizerConfig, make_optimizer, step
from src.tensorcore import Tensor

finite = st.floats(min_value=-10.0, max_value=10.0, allow_nan=False)


def _param(values):
    return Tensor(np.array(values, dtype=np.float64), requires_grad=True, name="w")


@pytest.mark.parametrize(
    "preset, expected",
    [
        ("adam", dict(kind="adam", lr=0.001, beta1=0.9, beta2=0.999)),
        ("adam_2nd", dict(kind="adam", lr=0.0005, beta1=0.01, beta2=0.999)),
        ("rmsprop", dict(kind="rmsprop", lr=0.0001, alpha=0.99, weight_decay=0.01)),
        ("sgd_momentum", dict(kind="sgd_momentum", lr=0.001, momentum=0.9)),
        ("adamw", dict(kind="adamw", lr=0.001, beta1=0.9, weight_decay=0.01)),
        ("adamw_appendix", dict(kind="adamw", lr=0.001, beta1=0.01, weight_decay=0.01)),
    ],
)
def test_presets(preset, expected):
    config = OptimizerConfig.from_preset(preset)
    for key, value in expected.items():
        assert getattr(config, key) == value


@pytest.mark.parametrize(
    "kwargs", [dict(lr=0.0), dict(beta1=1.0), dict(alpha=-0.1), dict(kind="lamb"), dict(weight_decay=-1.0)]
)
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        OptimizerConfig(**kwargs)


def test_unknown_preset():
    with pytest.raises(ConfigError):
        OptimizerConfig.from_preset("adagrad")


def test_sgd_first_step_is_plain_gradient_step():
    p = _param([1.0, -2.0])
    g = np.array([0.5, -0.25])
    state = make_optimizer(OptimizerConfig.from_preset("sgd_momentum"))
    step(state, [p], {p: g})
    assert np.allclose(p.data, [1.0 - 0.001 * 0.5, -2.0 + 0.001 * 0.25], atol=1e-15)
    assert state.step_count == 1


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(min_value=0.01, max_value=10.0)), st.booleans())
def test_adam_first_step_moves_by_lr_times_sign(magnitude, negative):
    g = -magnitude if negative else magnitude
    p = _param(np.zeros(4))
    step(make_optimizer(OptimizerConfig.from_preset("adam")), [p], {p: g})
    assert np.allclose(p.data, -0.001 * np.sign(g), rtol=1e-5)


def test_adamw_with_zero_gradient_decays_geometrically():
    p = _param([2.0, -1.0])
    config = OptimizerConfig.from_preset("adamw")
    state = make_optimizer(config)
    for _ in range(5):
        step(state, [p], {p: np.zeros(2)})
    assert np.allclose(p.data, np.array([2.0, -1.0]) * (1 - 0.001 * 0.01) ** 5, rtol=1e-14)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_adam_and_adamw_agree_without_decay(start, grad):
    a, b = _param(start), _param(start)
    adam = make_optimizer(OptimizerConfig(kind="adam"))
    adamw = make_optimizer(OptimizerConfig(kind="adamw", weight_decay=0.0))
    for k in range(3):
        step(adam, [a], {a: grad * (k + 1)})
        step(adamw, [b], {b: grad * (k + 1)})
    assert np.array_equal(a.data, b.data)


def test_rmsprop_update():
    p = _param([1.0])
    config = OptimizerConfig.from_preset("rmsprop")
    step(make_optimizer(config), [p], {p: np.array([2.0])})
    decayed = 1.0 * (1 - 0.0001 * 0.01)
    expected = decayed - 0.0001 * 2.0 / np.sqrt(0.01 * 4.0 + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("preset", ["adam", "sgd_momentum", "rmsprop", "adamw"])
def test_identical_runs_are_bit_identical(preset):
    rng = np.random.default_rng(0)
    grads = [rng.normal(size=(2, 3)) for _ in range(10)]

    def trajectory():
        p = _param(np.ones((2, 3)))
        state = make_optimizer(OptimizerConfig.from_preset(preset))
        for g in grads:
            step(state, [p], {p: g})
        return p.data

    assert np.array_equal(trajectory(), trajectory())


def test_nan_gradient_poisons_without_moving():
    p, q = _param([1.0]), _param([2.0])
    state = make_optimizer(OptimizerConfig.from_preset("adam"))
    with pytest.raises(PoisonedStateError):
        step(state, [p, q], {p: np.array([0.1]), q: np.array([np.nan])})
    assert p.data.tolist() == [1.0] and state.step_count == 0


def test_parameters_without_gradient_are_untouched():
    p, q = _param([1.0]), _param([2.0])
    step(make_optimizer(OptimizerConfig.from_preset("adam")), [p, q], {p: np.array([1.0])})
    assert q.data.tolist() == [2.0]
