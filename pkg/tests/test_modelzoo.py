import numpy as np
import pytest

from src import tensorcore as tc
from src.errors import ConfigError, ConformanceError, RangeError, UnsupportedVariantError
from src.modelzoo import (
    ModelConfig,
    build_model,
    combine_paths,
    count_parameters,
    ffn_key_value_form,
    load_checkpoint,
    save_checkpoint,
    sinusoidal_positions,
)
from src.tensorcore import Tape, Tensor


def _tiny(**kwargs):
    defaults = dict(d=8, L=2, h=2, seed=0)
    defaults.update(kwargs)
    return build_model(ModelConfig.for_target(3, 3, **defaults))


@pytest.mark.parametrize(
    "kwargs, error",
    [
        (dict(d=10, h=4), ConfigError),
        (dict(family="gru", L=2), ConfigError),
        (dict(family="lstm", variant="attention_only"), ConfigError),
        (dict(variant="ffn_only"), UnsupportedVariantError),
        (dict(family="rnn"), ConfigError),
        (dict(dropout_rate=1.0), ConfigError),
    ],
)
def test_invalid_configs(kwargs, error):
    with pytest.raises(error):
        ModelConfig.for_target(5, 5, **kwargs)


def test_default_config_follows_target():
    config = ModelConfig.for_target(5, 5)
    assert (config.vocab_in, config.vocab_out, config.max_len, config.d_h) == (6, 5, 6, 256)
    assert config.start_token == 5


def test_parameter_count_of_full_transformer():
    d, V, dh = 64, 5, 256
    model = build_model(ModelConfig.for_target(V, 5))
    per_layer = 4 * d * d + 2 * d + (d * dh + dh + dh * d + d) + 2 * d
    assert count_parameters(model) == (V + 1) * d + 5 * per_layer + d * V + V


def test_routed_transformer_adds_router_parameters():
    plain = _tiny()
    routed = _tiny(routed=True)
    assert count_parameters(routed) - count_parameters(plain) == 2 * (8 * 8 + 8 * 3)


@pytest.mark.parametrize(
    "variant, attention, ffn",
    [
        ("full", [0, 1, 2], [0, 1, 2]),
        ("attention_only", [0, 1, 2], []),
        ("attention_main", [0, 1, 2], [2]),
        ("ffn_main", [0], [0, 1, 2]),
    ],
)
def test_variants_prune_sublayers(variant, attention, ffn):
    model = _tiny(L=3, variant=variant)
    assert model.attention_layers() == attention
    assert model.ffn_layers() == ffn


def test_seeded_construction_is_identical():
    a, b = _tiny(seed=4), _tiny(seed=4)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)


@pytest.mark.parametrize("family", ["transformer", "gru", "lstm"])
def test_conditionals_are_distributions(family):
    kwargs = dict(family=family) if family == "transformer" else dict(family=family, L=1)
    model = _tiny(**kwargs).eval()
    seqs = np.array([[0, 1, 2], [2, 2, 0]])
    rows = model.conditionals(seqs)
    assert rows.shape == (2, 3, 3)
    assert np.allclose(rows.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("family", ["transformer", "gru", "lstm"])
def test_causality(family):
    kwargs = dict(family=family) if family == "transformer" else dict(family=family, L=1)
    model = _tiny(**kwargs).eval()
    rows_a = model.conditionals(np.array([[1, 0, 2]]))
    rows_b = model.conditionals(np.array([[1, 2, 0]]))
    # shared first character: the first two rows see identical inputs
    assert np.array_equal(rows_a[0, :2], rows_b[0, :2])
    assert np.allclose(model.next_dist([1, 0]), rows_a[0, 2], atol=1e-12)


def test_next_dist_prefix_too_long():
    with pytest.raises(RangeError):
        _tiny().next_dist([0, 1, 2])


def test_zeroed_head_is_uniform():
    model = _tiny()
    model.params["head.w"].data[:] = 0.0
    assert np.allclose(model.next_dist([2]), np.full(3, 1.0 / 3.0), atol=1e-15)


def test_forward_train_at_init_is_near_log_vocab():
    model = _tiny(dropout_rate=0.0)
    batch = np.array([[3, 0, 1, 2], [3, 2, 2, 1]])
    loss, taps = model.forward_train(batch, Tape())
    assert abs(loss.item() - np.log(3.0)) < 0.5
    assert set(taps.ffn_preacts) == {0, 1}
    with pytest.raises(ConformanceError):
        model.forward_train(batch[:, :3], Tape())


def test_dropout_only_in_train_mode():
    model = _tiny(dropout_rate=0.5)
    batch = np.array([[3, 0, 1, 2]])
    model.eval()
    first = model.forward_train(batch, Tape())[0].item()
    assert first == model.forward_train(batch, Tape())[0].item()
    model.train()
    assert model.forward_train(batch, Tape())[0].item() != first


def test_routed_taps_and_uniform_router():
    model = _tiny(routed=True).eval()
    for layer in range(2):
        model.params[f"layers.{layer}.router.w2"].data[:] = 0.0
    _, taps = model.run_eval(np.array([[0, 1, 2]]))
    assert set(taps.router_weights) == {0, 1}
    assert np.allclose(taps.router_weights[0], 1.0 / 3.0, atol=1e-15)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_router_weights_lie_on_the_simplex(seed):
    model = _tiny(routed=True, seed=seed).eval()
    sequences = np.array([[0, 1, 2], [2, 2, 0], [1, 0, 1]])
    _, taps = model.run_eval(sequences)
    for weights in taps.router_weights.values():
        assert weights.shape == (3, 3, 3)
        assert np.all(weights > 0)
        assert np.all(np.abs(weights.sum(axis=-1) - 1.0) <= 1e-12)


def test_residual_path_weight_one_returns_input():
    rng = np.random.default_rng(0)
    heads = Tensor(rng.normal(size=(2, 2, 3, 4)))
    x = Tensor(rng.normal(size=(2, 3, 4)))
    weights = np.zeros((2, 3, 3))
    weights[..., -1] = 1.0
    assert np.array_equal(combine_paths(heads, x, Tensor(weights)).data, x.data)


def test_equal_routing_mixes_heads_and_residual():
    rng = np.random.default_rng(1)
    heads = Tensor(rng.normal(size=(1, 2, 3, 4)))
    x = Tensor(rng.normal(size=(1, 3, 4)))
    out = combine_paths(heads, x, Tensor(np.full((1, 3, 3), 1.0 / 3.0)))
    assert np.allclose(out.data, (heads.data.sum(axis=1) + x.data) / 3.0, atol=1e-14)


def test_ffn_equals_key_value_sum():
    model = _tiny()
    x = np.random.default_rng(2).normal(size=(2, 3, 8))
    out, _ = model.ffn(0, Tensor(x))
    assert np.allclose(out.data, ffn_key_value_form(model, 0, x), atol=1e-12)


def test_sinusoidal_positions():
    table = sinusoidal_positions(4, 6)
    assert table.shape == (4, 6)
    assert np.array_equal(table[0], np.tile([0.0, 1.0], 3))


def test_forward_call_counter():
    model = _tiny().eval()
    model.conditionals(np.zeros((5, 3), dtype=int))
    assert model.forward_calls == 5


@pytest.mark.parametrize("kwargs", [dict(routed=True), dict(family="lstm", L=1)])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, kwargs):
    model = _tiny(**kwargs)
    for t in model.parameters():
        t.data += 0.125
    path = str(tmp_path / "model.zip")
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    assert all(np.array_equal(loaded.params[k].data, model.params[k].data) for k in model.params)


def test_gru_gradients_flow_to_every_parameter():
    model = _tiny(family="gru", L=1, dropout_rate=0.0)
    tape = Tape()
    loss, _ = model.forward_train(np.array([[3, 0, 1, 2]]), tape)
    grads = tc.backward(loss, tape)
    assert set(grads) == set(model.parameters())
