"""
Seeded sparse target distributions over length-n sequences, dataset sampling,
and the empirical distribution of a sample.

Character indices run over [0, |V|); the start symbol "#" is implicit (it is the
conditioning context of the first step). Prefixes are keyed by (length, code)
where code is the base-|V| integer of the prefix, most significant digit first.
"""

import math
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from src.constants import PROB_SUM_TOL, TARGET_PATTERNS
from src.errors import RangeError, SpecError


@dataclass(frozen=True)
class TargetSpec:
    vocab_size: int
    length: int
    pattern: Tuple[float, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "pattern", tuple(float(p) for p in self.pattern))
        if self.vocab_size < 1 or self.length < 1:
            raise SpecError(
                f"vocab_size and length must be positive, got {self.vocab_size}, {self.length}"
            )
        if len(self.pattern) == 0 or any(p <= 0 for p in self.pattern):
            raise SpecError(f"pattern entries must be strictly positive, got {self.pattern}")
        if abs(math.fsum(self.pattern) - 1.0) > PROB_SUM_TOL:
            raise SpecError(f"pattern must sum to 1, got {math.fsum(self.pattern)}")
        if len(self.pattern) > self.vocab_size:
            raise SpecError(
                f"pattern of length {len(self.pattern)} longer than vocabulary {self.vocab_size}"
            )

    @classmethod
    def preset(cls, name: str, seed: int, vocab_size: int = 5, length: int = 5):
        if name not in TARGET_PATTERNS:
            raise SpecError(f"unknown target preset {name}, choose one of {list(TARGET_PATTERNS)}")
        return cls(vocab_size, length, tuple(TARGET_PATTERNS[name]), seed)


def encode_prefix(chars: Sequence[int], vocab_size: int) -> int:
    code = 0
    for c in chars:
        code = code * vocab_size + int(c)
    return code


def entropy_of(probs) -> float:
    """Shannon entropy in nats with the 0 ln 0 = 0 convention."""
    p = np.asarray(probs, dtype=np.float64)
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


@dataclass
class TargetDistribution:
    """
    Generated target: a first-step vector plus one sparse row per reachable prefix.

    Immutable after `build_target`; safe to read from several threads.
    """

    spec: TargetSpec
    first_step: np.ndarray
    transitions: Dict[Tuple[int, int], np.ndarray]

    @property
    def vocab_size(self) -> int:
        return self.spec.vocab_size

    @property
    def length(self) -> int:
        return self.spec.length

    def support_size(self) -> int:
        return self.vocab_size * len(self.spec.pattern) ** (self.length - 1)

    def row(self, prefix_length: int, code: int) -> Optional[np.ndarray]:
        if prefix_length == 0:
            return self.first_step
        return self.transitions.get((prefix_length, code))

    def conditionals(self, sequences: np.ndarray) -> np.ndarray:
        """
        Teacher-forced conditionals p(s_i | s_<i) for a batch of full sequences.

        Rows of unreachable prefixes are filled uniformly; they never change a
        joint probability because an earlier factor is already zero.
        """
        sequences = np.asarray(sequences)
        count, n = sequences.shape
        out = np.empty((count, n, self.vocab_size))
        uniform = np.full(self.vocab_size, 1.0 / self.vocab_size)
        out[:, 0] = self.first_step
        codes = np.zeros(count, dtype=np.int64)
        for i in range(1, n):
            codes = codes * self.vocab_size + sequences[:, i - 1]
            for j, code in enumerate(codes):
                row = self.transitions.get((i, int(code)))
                out[j, i] = uniform if row is None else row
        return out

    def next_dist(self, prefix: Sequence[int]) -> np.ndarray:
        row = conditional_of(self, prefix)
        if row is None:
            return np.full(self.vocab_size, 1.0 / self.vocab_size)
        return row


def build_target(spec: TargetSpec) -> TargetDistribution:
    """
    Generate the sparse target distribution for spec.

    The first-step vector is drawn uniformly from the simplex (normalized
    exponential spacings). Each reachable prefix of length 1..n-1 assigns the
    pattern values to characters chosen without replacement; all others get 0.
    Prefixes are visited level by level in ascending code order so the draw is
    fully determined by the seed.
    """
    rng = np.random.default_rng(spec.seed)
    V, k = spec.vocab_size, len(spec.pattern)
    spacings = rng.exponential(size=V)
    first_step = spacings / spacings.sum()

    transitions = {}
    frontier = [c for c in range(V) if first_step[c] > 0]
    for prefix_length in range(1, spec.length):
        next_frontier = []
        for code in sorted(frontier):
            chosen = rng.permutation(V)[:k]
            row = np.zeros(V)
            row[chosen] = spec.pattern
            transitions[(prefix_length, code)] = row
            next_frontier.extend(code * V + int(c) for c in chosen)
        frontier = next_frontier
    return TargetDistribution(spec=spec, first_step=first_step, transitions=transitions)


def analytic_entropy(target: TargetDistribution) -> float:
    """H(first_step) + (n-1) H(pattern), in nats."""
    return entropy_of(target.first_step) + (target.length - 1) * entropy_of(target.spec.pattern)


def conditional_of(target: TargetDistribution, prefix: Sequence[int]) -> Optional[np.ndarray]:
    """
    Conditional next-character distribution after prefix.

    Returns None when the prefix contains a zero-probability transition.
    """
    prefix = [int(c) for c in prefix]
    if len(prefix) >= target.length:
        raise RangeError(f"prefix length {len(prefix)} must be < n = {target.length}")
    if len(prefix) == 0:
        return target.first_step
    if target.first_step[prefix[0]] <= 0:
        return None
    for i in range(1, len(prefix) + 1):
        row = target.transitions.get((i, encode_prefix(prefix[:i], target.vocab_size)))
        if row is None:
            return None
        if i < len(prefix) and row[prefix[i]] <= 0:
            return None
    return row


@dataclass
class Dataset:
    sequences: np.ndarray

    @property
    def count(self) -> int:
        return int(self.sequences.shape[0])

    @property
    def length(self) -> int:
        return int(self.sequences.shape[1])


def sample_dataset(target: TargetDistribution, count: int, seed: int) -> Dataset:
    """
    Draw count i.i.d. sequences by ancestral inverse-CDF sampling.

    Characters are scanned in index order; a uniform draw u selects the first
    character whose cumulative probability exceeds u, so zero-probability
    characters are never selected.
    """
    if count < 1:
        raise SpecError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    V, n = target.vocab_size, target.length
    draws = rng.random((count, n))
    sequences = np.zeros((count, n), dtype=np.int64)
    codes = np.zeros(count, dtype=np.int64)
    for i in range(n):
        unique_codes, inverse = np.unique(codes, return_inverse=True)
        for u_idx, code in enumerate(unique_codes):
            row = target.row(i, int(code))
            members = np.flatnonzero(inverse == u_idx)
            cdf = np.cumsum(row)
            picked = np.searchsorted(cdf, draws[members, i], side="right")
            # guard against cdf[-1] rounding below a draw
            picked = np.minimum(picked, np.flatnonzero(row > 0)[-1])
            sequences[members, i] = picked
        codes = codes * V + sequences[:, i]
    return Dataset(sequences=sequences)


@dataclass
class EmpiricalDistribution:
    """Relative frequencies of the sequences observed in a dataset, keyed by sequence id."""

    vocab_size: int
    length: int
    ids: np.ndarray
    probs: np.ndarray
    sample_count: int

    @property
    def table(self) -> Dict[int, float]:
        return {int(i): float(p) for i, p in zip(self.ids, self.probs)}


def empirical_target(dataset: Dataset, vocab_size: int) -> EmpiricalDistribution:
    if dataset.count < 1:
        raise SpecError("empirical target of an empty dataset")
    codes = np.zeros(dataset.count, dtype=np.int64)
    for i in range(dataset.length):
        codes = codes * vocab_size + dataset.sequences[:, i]
    ids, counts = np.unique(codes, return_counts=True)
    return EmpiricalDistribution(
        vocab_size=vocab_size,
        length=dataset.length,
        ids=ids,
        probs=counts / dataset.count,
        sample_count=dataset.count,
    )


### line-oriented text persistence
# target file:
#   # target vocab_size=<V> length=<n> pattern=<p1,p2,...> seed=<seed>
#   first <p_0> ... <p_{V-1}>
#   <prefix length> <prefix code> <p_0> ... <p_{V-1}>      (one row per stored prefix)
# dataset file:
#   # dataset count=<N> length=<n>
#   <c_1> ... <c_n>                                       (one sequence per line)


def _fmt(row) -> str:
    return " ".join(repr(float(p)) for p in row)


def save_target(target: TargetDistribution, path: str):
    spec = target.spec
    try:
        with open(path, "w") as f:
            f.write(
                f"# target vocab_size={spec.vocab_size} length={spec.length} "
                f"pattern={','.join(repr(p) for p in spec.pattern)} seed={spec.seed}\n"
            )
            f.write("first " + _fmt(target.first_step) + "\n")
            for (prefix_length, code), row in sorted(target.transitions.items()):
                f.write(f"{prefix_length} {code} " + _fmt(row) + "\n")
    except OSError as e:
        raise OSError(f"could not write target file {path}: {e}") from e


def _parse_header(line: str, expected: str) -> dict:
    parts = line.split()
    if len(parts) < 2 or parts[0] != "#" or parts[1] != expected:
        raise SpecError(f"expected a '# {expected}' header, got {line!r}")
    return dict(p.split("=", 1) for p in parts[2:])


def load_target(path: str) -> TargetDistribution:
    with open(path, "r") as f:
        lines = f.read().splitlines()
    header = _parse_header(lines[0], "target")
    spec = TargetSpec(
        vocab_size=int(header["vocab_size"]),
        length=int(header["length"]),
        pattern=tuple(float(p) for p in header["pattern"].split(",")),
        seed=int(header["seed"]),
    )
    first_fields = lines[1].split()
    if first_fields[0] != "first":
        raise SpecError(f"{path}: second line must hold the first-step vector")
    first_step = np.array([float(p) for p in first_fields[1:]])
    transitions = {}
    for line in lines[2:]:
        fields = line.split()
        if not fields:
            continue
        transitions[(int(fields[0]), int(fields[1]))] = np.array([float(p) for p in fields[2:]])
    return TargetDistribution(spec=spec, first_step=first_step, transitions=transitions)


def save_dataset(dataset: Dataset, path: str):
    try:
        with open(path, "w") as f:
            f.write(f"# dataset count={dataset.count} length={dataset.length}\n")
            f.writelines(" ".join(str(c) for c in seq) + "\n" for seq in dataset.sequences.tolist())
    except OSError as e:
        raise OSError(f"could not write dataset file {path}: {e}") from e


def load_dataset(path: str) -> Dataset:
    with open(path, "r") as f:
        lines = f.read().splitlines()
    header = _parse_header(lines[0], "dataset")
    sequences = np.array([[int(c) for c in line.split()] for line in lines[1:] if line.strip()], dtype=np.int64)
    if sequences.shape != (int(header["count"]), int(header["length"])):
        raise SpecError(f"{path}: body shape {sequences.shape} disagrees with header {header}")
    return Dataset(sequences=sequences)
