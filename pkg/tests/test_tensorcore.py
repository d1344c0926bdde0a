import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from src import tensorcore as tc
from src.errors import ConformanceError, InvalidRootError, InvalidShapeError, ParameterError
from src.modelzoo import ModelConfig, build_model
from src.tensorcore import PrimitiveKind, RandomFill, Tape, Tensor


@pytest.mark.parametrize("kind", list(PrimitiveKind))
def test_grad_check_every_primitive(kind):
    assert tc.grad_check(kind, trial_count=3, seed=11) < 1e-4


def test_grad_check_rejects_zero_trials():
    with pytest.raises(ParameterError):
        tc.grad_check(PrimitiveKind.ADD, trial_count=0, seed=0)


def test_tensor_create_is_seeded():
    a = tc.tensor_create((3, 4), RandomFill(seed=5))
    b = tc.tensor_create((3, 4), RandomFill(seed=5))
    assert np.array_equal(a.data, b.data)
    assert tc.tensor_create((2,), 1.5).data.tolist() == [1.5, 1.5]


@pytest.mark.parametrize("shape", [(), (0, 3), (2, -1)])
def test_tensor_create_invalid_shape(shape):
    with pytest.raises(InvalidShapeError):
        tc.tensor_create(shape)


def test_matmul_shape_mismatch():
    with pytest.raises(ConformanceError):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_backward_needs_scalar_root():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    tape = Tape()
    y = tc.relu(x, tape)
    with pytest.raises(InvalidRootError):
        tc.backward(y, tape)


def test_backward_root_must_come_from_tape():
    x = Tensor(np.ones(()), requires_grad=True)
    with pytest.raises(InvalidRootError):
        tc.backward(x, Tape())


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    tape = Tape()
    loss = tc.sum_axis(tc.add(x, x, tape), 0, tape)
    grads = tc.backward(loss, tape)
    assert np.array_equal(grads[x], np.full(3, 2.0))


def test_relu_gradient_is_zero_at_kink():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    tape = Tape()
    loss = tc.sum_axis(tc.relu(x, tape), 0, tape)
    assert tc.backward(loss, tape)[x].tolist() == [0.0, 1.0, 0.0]


def test_constants_are_not_recorded():
    tape = Tape()
    tc.add(Tensor(np.ones(3)), Tensor(np.ones(3)), tape)
    assert len(tape) == 0


def test_cross_entropy_of_uniform_logits_is_log_vocab():
    logits = Tensor(np.zeros((4, 3, 5)), requires_grad=True)
    loss = tc.cross_entropy(logits, np.zeros((4, 3), dtype=int))
    assert loss.item() == pytest.approx(np.log(5.0), abs=1e-12)


def test_dropout_eval_is_identity_and_rate_is_checked():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(tc.dropout(x, 0.5, train=False).data, x.data)
    with pytest.raises(ParameterError):
        tc.dropout(x, 1.0, train=True, rng=np.random.default_rng(0))
    with pytest.raises(ParameterError):
        tc.dropout(x, 0.3, train=True)


def test_dropout_mask_is_seeded_and_survivors_are_rescaled():
    x = Tensor(np.random.default_rng(3).uniform(0.5, 2.0, size=(6, 7)))
    first = tc.dropout(x, 0.25, True, np.random.default_rng(7)).data
    second = tc.dropout(x, 0.25, True, np.random.default_rng(7)).data
    assert np.array_equal(first, second)
    kept = first != 0
    assert kept.any() and not kept.all()
    assert np.array_equal(first[kept], x.data[kept] / 0.75)
    assert np.all(first[~kept] == 0.0)


@pytest.mark.parametrize(
    "a_shape, b_shape, subscripts",
    [
        ((2, 3, 4), (4, 5), "bij,bik->jk"),
        ((2, 2, 3, 4), (4, 5), "xyij,xyik->jk"),
        ((2, 3, 4), (2, 4, 5), "bij,bik->bjk"),
    ],
)
def test_matmul_weight_gradient(a_shape, b_shape, subscripts):
    rng = np.random.default_rng(5)
    a = Tensor(rng.normal(size=a_shape), requires_grad=True)
    b = Tensor(rng.normal(size=b_shape), requires_grad=True)
    tape = Tape()
    out = tc.matmul(a, b, tape)
    w = rng.normal(size=out.shape)
    loss = tc.sum_axis(tc.reshape(tc.mul(out, Tensor(w), tape), (w.size,), tape), 0, tape)
    grads = tc.backward(loss, tape)
    assert grads[b].shape == b_shape
    assert np.allclose(grads[b], np.einsum(subscripts, a.data, w), atol=1e-12)
    assert np.allclose(grads[a], w @ np.swapaxes(b.data, -1, -2), atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=6), st.integers(0, 2**16))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = tc.tensor_create((rows, cols), RandomFill(seed, -30.0, 30.0))
    out = tc.softmax_last(x).data
    assert np.all(out > 0)
    assert np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_end_to_end_transformer_gradient():
    config = ModelConfig.for_target(3, 3, d=8, L=2, h=2, dropout_rate=0.0, seed=3)
    model = build_model(config)
    rng = np.random.default_rng(0)
    batch = np.concatenate([np.full((4, 1), 3), rng.integers(0, 3, size=(4, 3))], axis=1)

    tape = Tape()
    loss, _ = model.forward_train(batch, tape)
    grads = tc.backward(loss, tape)

    worst = 0.0
    for name, param in model.params.items():
        coords = [tuple(rng.integers(0, s) for s in param.shape) for _ in range(4)]
        numeric = tc.numeric_gradient(lambda: model.forward_train(batch, Tape())[0].item(), param, coords)
        analytic = np.array([grads[param][c] for c in coords])
        if np.linalg.norm(analytic) + np.linalg.norm(numeric) > 1e-8:
            worst = max(worst, tc.relative_error(analytic, numeric))
    assert worst < 1e-3
