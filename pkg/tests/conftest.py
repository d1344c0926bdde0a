import numpy as np
import pytest

from src.targetgen import TargetSpec, build_target


class TableModel:
    """Next-token model with seeded random rows, one per prefix."""

    def __init__(self, vocab_size, length, seed=0, rows=None):
        self.vocab_size = vocab_size
        self.length = length
        self.seed = seed
        self.rows = rows or {}

    def row(self, prefix):
        key = tuple(int(c) for c in prefix)
        if key not in self.rows:
            rng = np.random.default_rng([self.seed, len(key)] + list(key))
            self.rows[key] = rng.dirichlet(np.ones(self.vocab_size))
        return self.rows[key]

    def next_dist(self, prefix):
        return self.row(prefix)

    def conditionals(self, sequences):
        sequences = np.asarray(sequences)
        out = np.empty(sequences.shape + (self.vocab_size,))
        for j, seq in enumerate(sequences):
            for i in range(self.length):
                out[j, i] = self.row(seq[:i])
        return out


@pytest.fixture
def table_model():
    return TableModel


@pytest.fixture
def small_target():
    return build_target(TargetSpec(3, 3, (0.8, 0.2), 5))


TINY_TOML = """
[target]
vocab_size = 3
length = 3
pattern = [0.8, 0.2]
seed = 3

[dataset]
sample_count = 200
sample_seed = 1

[model]
d = 8
L = 1
h = 2

[training]
epochs = 3
batch_size = 64

[output]
run_dir = "RUN_DIR"
"""


@pytest.fixture
def tiny_config(tmp_path):
    """Path of a TOML run config small enough to train in about a second."""

    def write(name="tiny", run_dir=None, extra=""):
        run_dir = run_dir or str(tmp_path / "runs" / name)
        path = tmp_path / f"{name}.toml"
        path.write_text(TINY_TOML.replace("RUN_DIR", run_dir.replace("\\", "/")) + extra)
        return str(path)

    return write
