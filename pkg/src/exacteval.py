"""
Exact measurement of next-token models by full enumeration of the sequence space.

Sequence ids are base-|V| integers in [0, |V|^n), most significant digit first.
All sums run over arrays laid out in ascending id order, so results are
bit-reproducible for a given model snapshot.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Protocol, Sequence, Tuple, Union

import numpy as np

from src.constants import ENUMERATION_CAP, EVAL_CHUNK_SIZE, MODEL_ROW_TOL
from src.errors import (
    EnumerationTooLargeError,
    InfiniteDivergenceError,
    ModelContractError,
    RangeError,
)
from src.targetgen import EmpiricalDistribution, TargetDistribution, entropy_of


class NextTokenModel(Protocol):
    """
    Anything that can report p(s_i | s_<i).

    `conditionals` takes full sequences (N, n) and returns the teacher-forced
    rows (N, n, |V|); row i conditions on the first i characters only.
    """

    vocab_size: int
    length: int

    def conditionals(self, sequences: np.ndarray) -> np.ndarray: ...

    def next_dist(self, prefix: Sequence[int]) -> np.ndarray: ...


Target = Union[EmpiricalDistribution, TargetDistribution]


@dataclass(frozen=True)
class EvalReport:
    entropy_nats: float
    kl_nats: float
    cross_entropy_nats: float
    sparse_part_entropy: float
    nonsparse_part_entropy: float
    target_entropy_nats: float


def encode_sequence(chars: Sequence[int], vocab_size: int) -> int:
    seq_id = 0
    for c in chars:
        seq_id = seq_id * vocab_size + int(c)
    return seq_id


def decode_sequence(seq_id: int, vocab_size: int, length: int) -> np.ndarray:
    return decode_batch(np.array([seq_id], dtype=np.int64), vocab_size, length)[0]


def decode_batch(ids: np.ndarray, vocab_size: int, length: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    powers = vocab_size ** np.arange(length - 1, -1, -1, dtype=np.int64)
    return (ids[:, None] // powers[None, :]) % vocab_size


def space_size(vocab_size: int, length: int, cap: int = ENUMERATION_CAP) -> int:
    size = vocab_size**length
    if size > cap or size > np.iinfo(np.int64).max:
        raise EnumerationTooLargeError(
            f"|V|^n = {vocab_size}^{length} = {size} exceeds the enumeration cap {cap}"
        )
    return size


def enumerate_sequences(vocab_size: int, length: int, cap: int = ENUMERATION_CAP) -> Iterator[int]:
    """Yield every sequence id in ascending order."""
    yield from range(space_size(vocab_size, length, cap))


def _checked_rows(model: NextTokenModel, sequences: np.ndarray) -> np.ndarray:
    rows = model.conditionals(sequences)
    if np.any(~np.isfinite(rows)) or np.any(rows < 0):
        raise ModelContractError("model returned negative or non-finite probabilities")
    worst = np.max(np.abs(rows.sum(axis=-1) - 1.0)) if rows.size else 0.0
    if worst > MODEL_ROW_TOL:
        raise ModelContractError(f"model rows do not sum to 1 (worst deviation {worst:.3e})")
    return rows


def sequence_probabilities(
    model: NextTokenModel,
    ids: np.ndarray,
    chunk_size: int = EVAL_CHUNK_SIZE,
    workers: int = 1,
) -> np.ndarray:
    """
    Joint probabilities p(s) = prod_i p(s_i | s_<i) for the given ids.

    Chunks may run on a thread pool; results are merged in chunk order.
    """
    ids = np.asarray(ids, dtype=np.int64)
    chunks = [ids[i : i + chunk_size] for i in range(0, len(ids), chunk_size)]

    def work(chunk):
        sequences = decode_batch(chunk, model.vocab_size, model.length)
        rows = _checked_rows(model, sequences)
        picked = np.take_along_axis(rows, sequences[..., None], axis=-1)[..., 0]
        return np.prod(picked, axis=1)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(work, chunks))
    else:
        parts = [work(c) for c in chunks]
    return np.concatenate(parts) if parts else np.zeros(0)


def all_probabilities(model: NextTokenModel, cap: int = ENUMERATION_CAP, workers: int = 1) -> np.ndarray:
    size = space_size(model.vocab_size, model.length, cap)
    return sequence_probabilities(model, np.arange(size, dtype=np.int64), workers=workers)


def joint_probability(model: NextTokenModel, seq_id: int) -> float:
    if not 0 <= seq_id < model.vocab_size**model.length:
        raise RangeError(f"sequence id {seq_id} outside [0, {model.vocab_size ** model.length})")
    return float(sequence_probabilities(model, np.array([seq_id]))[0])


def _entropy_terms(probs: np.ndarray) -> np.ndarray:
    # 0 ln 0 = 0
    terms = np.zeros_like(probs)
    positive = probs > 0
    terms[positive] = -probs[positive] * np.log(probs[positive])
    return terms


def model_entropy(model: NextTokenModel, cap: int = ENUMERATION_CAP, workers: int = 1) -> float:
    return float(np.sum(_entropy_terms(all_probabilities(model, cap, workers))))


def target_support(target: Target, cap: int = ENUMERATION_CAP) -> Tuple[np.ndarray, np.ndarray]:
    """Ids (ascending) and probabilities of the sequences with nonzero target probability."""
    if isinstance(target, EmpiricalDistribution):
        return target.ids, target.probs
    probs = all_probabilities(target, cap)
    ids = np.flatnonzero(probs > 0)
    return ids, probs[ids]


def target_entropy(target: Target) -> float:
    _, probs = target_support(target)
    return entropy_of(probs)


def _pairwise_terms(target_probs: np.ndarray, model_probs: np.ndarray, ids: np.ndarray):
    zero = np.flatnonzero(model_probs <= 0)
    if len(zero):
        raise InfiniteDivergenceError(int(ids[zero[0]]))
    return np.log(target_probs), np.log(model_probs)


def kl_divergence(target: Target, model: NextTokenModel) -> float:
    """sum_s p_tgt(s) ln[p_tgt(s) / p_model(s)] over the target support."""
    ids, p = target_support(target)
    log_p, log_q = _pairwise_terms(p, sequence_probabilities(model, ids), ids)
    return float(np.sum(p * (log_p - log_q)))


def full_cross_entropy(target: Target, model: NextTokenModel) -> float:
    """Sequence-level cross-entropy -sum_s p_tgt(s) ln p_model(s)."""
    ids, p = target_support(target)
    _, log_q = _pairwise_terms(p, sequence_probabilities(model, ids), ids)
    return float(-np.sum(p * log_q))


def _split(model_probs: np.ndarray, support_ids: np.ndarray) -> Tuple[float, float]:
    terms = _entropy_terms(model_probs)
    on_support = np.zeros(len(model_probs), dtype=bool)
    on_support[support_ids] = True
    return float(np.sum(terms[~on_support])), float(np.sum(terms[on_support]))


def split_entropy(model: NextTokenModel, target: Target) -> Tuple[float, float]:
    """
    Partition the model entropy into (sparse_part, nonsparse_part).

    The sparse part sums over sequences the target gives probability 0.
    """
    ids, _ = target_support(target)
    return _split(all_probabilities(model), ids)


def evaluate(model: NextTokenModel, target: Target, workers: int = 1) -> EvalReport:
    """All exact measurements of model against target from a single enumeration."""
    q = all_probabilities(model, workers=workers)
    ids, p = target_support(target)
    log_p, log_q = _pairwise_terms(p, q[ids], ids)
    sparse, nonsparse = _split(q, ids)
    return EvalReport(
        entropy_nats=float(np.sum(_entropy_terms(q))),
        kl_nats=float(np.sum(p * (log_p - log_q))),
        cross_entropy_nats=float(-np.sum(p * log_q)),
        sparse_part_entropy=sparse,
        nonsparse_part_entropy=nonsparse,
        target_entropy_nats=entropy_of(p),
    )
