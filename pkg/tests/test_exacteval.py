import numpy as np
import pytest

from src import exacteval as ev
from src.errors import EnumerationTooLargeError, InfiniteDivergenceError, ModelContractError, RangeError
from src.modelzoo import ModelConfig, build_model
from src.targetgen import Dataset, TargetSpec, build_target, empirical_target, sample_dataset


def test_sequence_id_round_trip():
    assert ev.encode_sequence([1, 0, 2], 3) == 11
    assert ev.decode_sequence(11, 3, 3).tolist() == [1, 0, 2]
    assert ev.decode_batch(np.arange(4), 2, 2).tolist() == [[0, 0], [0, 1], [1, 0], [1, 1]]


def test_enumeration_cap():
    with pytest.raises(EnumerationTooLargeError):
        ev.space_size(10, 8)
    assert list(ev.enumerate_sequences(2, 3)) == list(range(8))


def test_brute_force_oracle_two_by_two(table_model):
    rows = {
        (): np.array([0.25, 0.75]),
        (0,): np.array([0.5, 0.5]),
        (1,): np.array([0.1, 0.9]),
    }
    model = table_model(2, 2, rows=rows)
    probs = ev.all_probabilities(model)
    expected = np.array([0.25 * 0.5, 0.25 * 0.5, 0.75 * 0.1, 0.75 * 0.9])
    assert np.array_equal(probs, expected)
    assert ev.model_entropy(model) == -np.sum(expected * np.log(expected))

    empirical = empirical_target(Dataset(np.array([[0, 0], [1, 1], [1, 1], [1, 1]])), 2)
    p = np.array([0.25, 0.75])
    q = expected[[0, 3]]
    assert ev.kl_divergence(empirical, model) == pytest.approx(np.sum(p * np.log(p / q)), abs=1e-15)
    sparse, nonsparse = ev.split_entropy(model, empirical)
    terms = -expected * np.log(expected)
    assert sparse == pytest.approx(terms[1] + terms[2], abs=1e-15)
    assert nonsparse == pytest.approx(terms[0] + terms[3], abs=1e-15)


@pytest.mark.parametrize("trial", range(50))
def test_exactness_identities_on_random_models(trial, table_model):
    rng = np.random.default_rng(trial)
    vocab, length = int(rng.integers(2, 6)), int(rng.integers(1, 6))
    if vocab**length > 1024:
        length = 3
    model = table_model(vocab, length, seed=trial)
    target = build_target(TargetSpec(vocab, length, (0.8, 0.2), trial))
    empirical = empirical_target(sample_dataset(target, 500, seed=trial), vocab)

    assert ev.all_probabilities(model).sum() == pytest.approx(1.0, abs=1e-9)
    report = ev.evaluate(model, empirical)
    assert report.cross_entropy_nats == pytest.approx(report.target_entropy_nats + report.kl_nats, abs=1e-9)
    assert report.sparse_part_entropy + report.nonsparse_part_entropy == pytest.approx(report.entropy_nats, abs=1e-9)
    assert report.kl_nats >= -1e-12


def test_transformer_is_a_distribution():
    model = build_model(ModelConfig.for_target(3, 4, d=8, L=2, h=2, seed=1)).eval()
    assert ev.all_probabilities(model).sum() == pytest.approx(1.0, abs=1e-9)


def test_zeroed_head_gives_uniform_entropy():
    model = build_model(ModelConfig.for_target(3, 3, d=8, L=1, h=2, seed=0)).eval()
    model.params["head.w"].data[:] = 0.0
    assert ev.model_entropy(model) == pytest.approx(3 * np.log(3.0), abs=1e-12)


def test_kl_of_target_against_itself_is_zero(small_target):
    assert ev.kl_divergence(small_target, small_target) == pytest.approx(0.0, abs=1e-12)
    assert ev.full_cross_entropy(small_target, small_target) == pytest.approx(ev.target_entropy(small_target))


def test_zero_probability_on_support_is_infinite_divergence(table_model):
    rows = {(): np.array([1.0, 0.0]), (0,): np.array([0.5, 0.5]), (1,): np.array([0.5, 0.5])}
    model = table_model(2, 2, rows=rows)
    empirical = empirical_target(Dataset(np.array([[1, 0]])), 2)
    with pytest.raises(InfiniteDivergenceError) as info:
        ev.kl_divergence(empirical, model)
    assert info.value.sequence_id == 2


def test_rows_must_be_distributions(table_model):
    rows = {(): np.array([0.6, 0.6]), (0,): np.array([0.5, 0.5]), (1,): np.array([0.5, 0.5])}
    with pytest.raises(ModelContractError):
        ev.all_probabilities(table_model(2, 2, rows=rows))


def test_joint_probability_range(small_target):
    with pytest.raises(RangeError):
        ev.joint_probability(small_target, 27)
    assert ev.joint_probability(small_target, 0) == ev.all_probabilities(small_target)[0]


def test_threaded_enumeration_is_bit_identical(table_model):
    model = table_model(4, 4, seed=3)
    ids = np.arange(256)
    serial = ev.sequence_probabilities(model, ids, chunk_size=16)
    threaded = ev.sequence_probabilities(model, ids, chunk_size=16, workers=4)
    assert np.array_equal(serial, threaded)
