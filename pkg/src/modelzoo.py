import math
import threading
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import zarr
from numcodecs import Blosc

from src import tensorcore as tc
from src.constants import (
    DEFAULT_D,
    DEFAULT_DROPOUT,
    DEFAULT_HEADS,
    DEFAULT_LAYERS,
    DEFAULT_MODEL_SEED,
    FFN_MULT,
    MODEL_FAMILIES,
    MODEL_VARIANTS,
)
from src.errors import ConfigError, ConformanceError, RangeError, UnsupportedVariantError
from src.tensorcore import Tape, Tensor

# additive causal mask value; exp underflows to exactly 0 after max-subtraction
MASK_VALUE = -1e30


@dataclass(frozen=True)
class ModelConfig:
    family: str = "transformer"
    d: int = DEFAULT_D
    L: int = DEFAULT_LAYERS
    h: int = DEFAULT_HEADS
    d_h: Optional[int] = None
    variant: str = "full"
    routed: bool = False
    dropout_rate: float = DEFAULT_DROPOUT
    max_len: int = 6
    vocab_in: int = 6
    vocab_out: int = 5
    seed: int = DEFAULT_MODEL_SEED

    def __post_init__(self):
        if self.d_h is None:
            object.__setattr__(self, "d_h", FFN_MULT * self.d)
        if self.family not in MODEL_FAMILIES:
            raise ConfigError(f"unknown model family {self.family}, choose one of {MODEL_FAMILIES}")
        if self.variant == "ffn_only":
            raise UnsupportedVariantError(
                "ffn_only is not supported: stacked FFN modules alone cannot model sequences"
            )
        if self.variant not in MODEL_VARIANTS:
            raise ConfigError(f"unknown variant {self.variant}, choose one of {MODEL_VARIANTS}")
        if min(self.d, self.L, self.h, self.d_h, self.max_len, self.vocab_out) < 1:
            raise ConfigError("model extents must be positive")
        if self.vocab_in != self.vocab_out + 1:
            raise ConfigError(
                f"vocab_in ({self.vocab_in}) must be vocab_out ({self.vocab_out}) + 1 for the start symbol"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.family == "transformer":
            if self.d % self.h != 0:
                raise ConfigError(f"d={self.d} is not divisible by h={self.h}")
        else:
            if self.L != 1:
                raise ConfigError(f"{self.family} models are single-layer, got L={self.L}")
            if self.variant != "full" or self.routed:
                raise ConfigError(f"variants and routing apply to transformers only, not {self.family}")

    @classmethod
    def for_target(cls, vocab_size: int, length: int, **kwargs):
        return cls(max_len=length + 1, vocab_in=vocab_size + 1, vocab_out=vocab_size, **kwargs)

    @property
    def start_token(self) -> int:
        return self.vocab_out

    @property
    def head_dim(self) -> int:
        return self.d // self.h


@dataclass
class Taps:
    """Instrumentation captured during a forward pass."""

    # layer index -> FFN preactivations x^T k_i + b_i, shape (B, T, d_h)
    ffn_preacts: Dict[int, np.ndarray] = field(default_factory=dict)
    # layer index -> routing weights, shape (B, T, h + 1)
    router_weights: Dict[int, np.ndarray] = field(default_factory=dict)


def sinusoidal_positions(max_len: int, d: int) -> np.ndarray:
    """Fixed position table, sine on even dimensions and cosine on odd ones."""
    positions = np.arange(max_len)[:, None]
    freqs = np.power(10000.0, -(np.arange(0, d, 2) / d))
    table = np.zeros((max_len, d))
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs[: d // 2])
    return table


class SequenceModel:
    """
    Shared surface of every model: parameters, train/eval mode, the
    NextTokenModel query methods and a forward-call counter.
    """

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: Dict[str, Tensor] = {}
        self.training = True
        init_seq, dropout_seq = np.random.SeedSequence(config.seed).spawn(2)
        self._init_rng = np.random.default_rng(init_seq)
        self.dropout_rng = np.random.default_rng(dropout_seq)
        self.forward_calls = 0
        self._counter_lock = threading.Lock()

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_out

    @property
    def length(self) -> int:
        return self.config.max_len - 1

    def _matrix(self, name, shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        self.params[name] = Tensor(self._init_rng.uniform(-bound, bound, size=shape), True, name)

    def _const(self, name, shape, value):
        self.params[name] = Tensor(np.full(shape, float(value)), True, name)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def parameters(self):
        return list(self.params.values())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if missing or unexpected:
            raise ConfigError(f"state mismatch, missing {sorted(missing)} unexpected {sorted(unexpected)}")
        for name, t in self.params.items():
            if state[name].shape != t.shape:
                raise ConfigError(f"shape mismatch for {name}: {state[name].shape} vs {t.shape}")
            t.data = np.array(state[name], dtype=np.float64)

    def forward(self, tokens: np.ndarray, tape: Optional[Tape] = None, train: Optional[bool] = None):
        raise NotImplementedError

    def _head(self, x, tape):
        return tc.add(tc.matmul(x, self.params["head.w"], tape), self.params["head.b"], tape)

    def forward_train(self, batch: np.ndarray, tape: Tape) -> Tuple[Tensor, Taps]:
        """
        Teacher-forced next-token loss over all n positions.

        batch holds length-(n+1) token sequences whose first token is the start symbol.

        Returns
        ----------
        loss: Tensor
            mean per-token cross-entropy in nats, recorded on tape
        taps: Taps
        """
        batch = np.asarray(batch)
        if batch.ndim != 2 or batch.shape[1] != self.config.max_len:
            raise ConformanceError(
                f"batch must have shape (B, {self.config.max_len}), got {batch.shape}"
            )
        logits, taps = self.forward(batch[:, :-1], tape)
        return tc.cross_entropy(logits, batch[:, 1:], tape), taps

    def _with_start(self, sequences: np.ndarray) -> np.ndarray:
        start = np.full((sequences.shape[0], 1), self.config.start_token, dtype=np.int64)
        return np.concatenate([start, sequences], axis=1)

    def run_eval(self, sequences: np.ndarray) -> Tuple[np.ndarray, Taps]:
        """
        One deterministic forward pass over full sequences (N, n) with dropout off.

        Returns the softmax rows (N, n, |V|) and the taps; counts N forward calls.
        """
        tokens = self._with_start(np.asarray(sequences, dtype=np.int64)[:, :-1])
        logits, taps = self.forward(tokens, None, train=False)
        with self._counter_lock:
            self.forward_calls += tokens.shape[0]
        return tc.softmax_last(logits).data, taps

    def conditionals(self, sequences: np.ndarray) -> np.ndarray:
        return self.run_eval(sequences)[0]

    def next_dist(self, prefix: Sequence[int]) -> np.ndarray:
        prefix = [int(c) for c in prefix]
        if len(prefix) > self.length - 1:
            raise RangeError(f"prefix length {len(prefix)} exceeds n - 1 = {self.length - 1}")
        tokens = self._with_start(np.array([prefix], dtype=np.int64).reshape(1, len(prefix)))
        logits, _ = self.forward(tokens, None, train=False)
        return tc.softmax_last(logits).data[0, -1]


class TransformerLM(SequenceModel):
    """
    Decoder-only post-LN transformer with optional routed attention and
    build-time removal of attention or FFN sublayers.
    """

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        c = config
        self.positions = Tensor(sinusoidal_positions(c.max_len, c.d))
        self._matrix("embed", (c.vocab_in, c.d), c.vocab_in)
        for layer in range(c.L):
            if self.has_attention(layer):
                for name in ("w_q", "w_k", "w_v", "w_o"):
                    self._matrix(f"layers.{layer}.attn.{name}", (c.d, c.d), c.d)
                if c.routed:
                    self._matrix(f"layers.{layer}.router.w1", (c.d, c.d), c.d)
                    self._matrix(f"layers.{layer}.router.w2", (c.d, c.h + 1), c.d)
                self._const(f"layers.{layer}.ln1.g", (c.d,), 1.0)
                self._const(f"layers.{layer}.ln1.b", (c.d,), 0.0)
            if self.has_ffn(layer):
                self._matrix(f"layers.{layer}.ffn.w1", (c.d, c.d_h), c.d)
                self._const(f"layers.{layer}.ffn.b1", (c.d_h,), 0.0)
                self._matrix(f"layers.{layer}.ffn.w2", (c.d_h, c.d), c.d_h)
                self._const(f"layers.{layer}.ffn.b2", (c.d,), 0.0)
                self._const(f"layers.{layer}.ln2.g", (c.d,), 1.0)
                self._const(f"layers.{layer}.ln2.b", (c.d,), 0.0)
        self._matrix("head.w", (c.d, c.vocab_out), c.d)
        self._const("head.b", (c.vocab_out,), 0.0)

    def has_attention(self, layer: int) -> bool:
        return self.config.variant != "ffn_main" or layer == 0

    def has_ffn(self, layer: int) -> bool:
        variant = self.config.variant
        if variant == "attention_only":
            return False
        if variant == "attention_main":
            return layer == self.config.L - 1
        return True

    def ffn_layers(self):
        return [layer for layer in range(self.config.L) if self.has_ffn(layer)]

    def attention_layers(self):
        return [layer for layer in range(self.config.L) if self.has_attention(layer)]

    def _split_heads(self, x, name, layer, tape):
        B, T, _ = x.shape
        c = self.config
        y = tc.matmul(x, self.params[f"layers.{layer}.attn.{name}"], tape)
        y = tc.reshape(y, (B, T, c.h, c.head_dim), tape)
        return tc.transpose(y, (0, 2, 1, 3), tape)

    def head_outputs(self, layer: int, x: Tensor, tape=None) -> Tensor:
        """Per-head outputs P^(k) W_V^(k) X softmax(...), shape (B, h, T, d)."""
        c = self.config
        T = x.shape[1]
        q = self._split_heads(x, "w_q", layer, tape)
        k = self._split_heads(x, "w_k", layer, tape)
        v = self._split_heads(x, "w_v", layer, tape)
        scores = tc.matmul(q, tc.transpose(k, (0, 1, 3, 2), tape), tape)
        scores = tc.scalar_mul(scores, 1.0 / math.sqrt(c.d), tape)
        mask = Tensor(np.triu(np.full((T, T), MASK_VALUE), k=1))
        weights = tc.softmax_last(tc.add(scores, mask, tape), tape)
        context = tc.matmul(weights, v, tape)
        per_head_proj = tc.reshape(self.params[f"layers.{layer}.attn.w_o"], (c.h, c.head_dim, c.d), tape)
        return tc.matmul(context, per_head_proj, tape)

    def router(self, layer: int, x: Tensor, tape=None) -> Tensor:
        """Routing weights f(x) = softmax(W_2 relu(W_1 x)), shape (B, T, h + 1)."""
        hidden = tc.relu(tc.matmul(x, self.params[f"layers.{layer}.router.w1"], tape), tape)
        return tc.softmax_last(tc.matmul(hidden, self.params[f"layers.{layer}.router.w2"], tape), tape)

    def routed_attention(self, layer: int, x: Tensor, tape=None) -> Tuple[Tensor, Tensor]:
        """
        Weighted mix of the h head paths and the residual path, before layer norm.

        Returns
        ----------
        combined: Tensor
            sum_k f_k(x_i) Head^(k)(x_i) + f_{h+1}(x_i) x_i, shape (B, T, d)
        weights: Tensor
            routing weights, shape (B, T, h + 1)
        """
        weights = self.router(layer, x, tape)
        return combine_paths(self.head_outputs(layer, x, tape), x, weights, tape), weights

    def ffn(self, layer: int, x: Tensor, tape=None, train=False) -> Tuple[Tensor, np.ndarray]:
        p = f"layers.{layer}.ffn"
        preact = tc.add(tc.matmul(x, self.params[f"{p}.w1"], tape), self.params[f"{p}.b1"], tape)
        out = tc.add(tc.matmul(tc.relu(preact, tape), self.params[f"{p}.w2"], tape), self.params[f"{p}.b2"], tape)
        out = tc.dropout(out, self.config.dropout_rate, train, self.dropout_rng, tape)
        return out, preact.data

    def forward(self, tokens, tape=None, train=None):
        train = self.training if train is None else train
        tokens = np.asarray(tokens, dtype=np.int64)
        T = tokens.shape[1]
        if T > self.config.max_len:
            raise ConformanceError(f"sequence of length {T} exceeds max_len {self.config.max_len}")
        taps = Taps()
        x = tc.embedding(self.params["embed"], tokens, tape)
        x = tc.add(x, tc.slice_(self.positions, slice(0, T)), tape)
        for layer in range(self.config.L):
            if self.has_attention(layer):
                if self.config.routed:
                    merged, weights = self.routed_attention(layer, x, tape)
                    taps.router_weights[layer] = weights.data
                else:
                    merged = tc.add(x, tc.sum_axis(self.head_outputs(layer, x, tape), 1, tape), tape)
                x = tc.layernorm(
                    merged, self.params[f"layers.{layer}.ln1.g"], self.params[f"layers.{layer}.ln1.b"], tape
                )
            if self.has_ffn(layer):
                out, preact = self.ffn(layer, x, tape, train)
                taps.ffn_preacts[layer] = preact
                x = tc.layernorm(
                    tc.add(x, out, tape),
                    self.params[f"layers.{layer}.ln2.g"],
                    self.params[f"layers.{layer}.ln2.b"],
                    tape,
                )
        return self._head(x, tape), taps


def combine_paths(heads: Tensor, x: Tensor, weights: Tensor, tape=None) -> Tensor:
    """
    Mix head outputs (B, h, T, d) and the residual x (B, T, d) with weights (B, T, h + 1).
    """
    B, h, T, _ = heads.shape
    head_weights = tc.slice_(weights, (slice(None), slice(None), slice(0, h)), tape)
    head_weights = tc.reshape(tc.transpose(head_weights, (0, 2, 1), tape), (B, h, T, 1), tape)
    mixed = tc.sum_axis(tc.mul(heads, head_weights, tape), 1, tape)
    residual_weight = tc.slice_(weights, (slice(None), slice(None), slice(h, h + 1)), tape)
    return tc.add(mixed, tc.mul(x, residual_weight, tape), tape)


def ffn_key_value_form(model: TransformerLM, layer: int, x: np.ndarray) -> np.ndarray:
    """FFN(x) written as sum_i max(x^T k_i + b_i, 0) v_i + b_2, one key-value pair at a time."""
    p = f"layers.{layer}.ffn"
    keys = model.params[f"{p}.w1"].data.T
    key_bias = model.params[f"{p}.b1"].data
    values = model.params[f"{p}.w2"].data
    out = np.zeros(x.shape[:-1] + (values.shape[1],))
    for k_i, b_i, v_i in zip(keys, key_bias, values):
        out += np.maximum(x @ k_i + b_i, 0.0)[..., None] * v_i
    return out + model.params[f"{p}.b2"].data


class RecurrentLM(SequenceModel):
    """Single-layer GRU or LSTM language model with hidden size d_h."""

    def __init__(self, config: ModelConfig):
        super().__init__(config)
        c = config
        gates = 3 if c.family == "gru" else 4
        self._matrix("embed", (c.vocab_in, c.d), c.vocab_in)
        self._matrix("rnn.w_ih", (c.d, gates * c.d_h), c.d)
        self._matrix("rnn.w_hh", (c.d_h, gates * c.d_h), c.d_h)
        self._const("rnn.b_ih", (gates * c.d_h,), 0.0)
        self._const("rnn.b_hh", (gates * c.d_h,), 0.0)
        self._matrix("head.w", (c.d_h, c.vocab_out), c.d_h)
        self._const("head.b", (c.vocab_out,), 0.0)

    def _gate(self, pre, index, tape):
        H = self.config.d_h
        return tc.slice_(pre, (slice(None), slice(index * H, (index + 1) * H)), tape)

    def _gru_step(self, gi, gh, h, tape):
        r = tc.sigmoid(tc.add(self._gate(gi, 0, tape), self._gate(gh, 0, tape), tape), tape)
        z = tc.sigmoid(tc.add(self._gate(gi, 1, tape), self._gate(gh, 1, tape), tape), tape)
        n = tc.tanh(tc.add(self._gate(gi, 2, tape), tc.mul(r, self._gate(gh, 2, tape), tape), tape), tape)
        # h' = (1 - z) n + z h
        return tc.add(n, tc.mul(z, tc.add(h, tc.scalar_mul(n, -1.0, tape), tape), tape), tape)

    def _lstm_step(self, gi, gh, h, c_state, tape):
        pre = tc.add(gi, gh, tape)
        i = tc.sigmoid(self._gate(pre, 0, tape), tape)
        f = tc.sigmoid(self._gate(pre, 1, tape), tape)
        g = tc.tanh(self._gate(pre, 2, tape), tape)
        o = tc.sigmoid(self._gate(pre, 3, tape), tape)
        c_state = tc.add(tc.mul(f, c_state, tape), tc.mul(i, g, tape), tape)
        return tc.mul(o, tc.tanh(c_state, tape), tape), c_state

    def forward(self, tokens, tape=None, train=None):
        train = self.training if train is None else train
        tokens = np.asarray(tokens, dtype=np.int64)
        B, T = tokens.shape
        if T > self.config.max_len:
            raise ConformanceError(f"sequence of length {T} exceeds max_len {self.config.max_len}")
        H = self.config.d_h
        x = tc.embedding(self.params["embed"], tokens, tape)
        h = Tensor(np.zeros((B, H)))
        c_state = Tensor(np.zeros((B, H)))
        outputs = []
        for t in range(T):
            x_t = tc.slice_(x, (slice(None), t), tape)
            gi = tc.add(tc.matmul(x_t, self.params["rnn.w_ih"], tape), self.params["rnn.b_ih"], tape)
            gh = tc.add(tc.matmul(h, self.params["rnn.w_hh"], tape), self.params["rnn.b_hh"], tape)
            if self.config.family == "gru":
                h = self._gru_step(gi, gh, h, tape)
            else:
                h, c_state = self._lstm_step(gi, gh, h, c_state, tape)
            outputs.append(tc.reshape(h, (B, 1, H), tape))
        out = tc.concat(outputs, axis=1, tape=tape)
        out = tc.dropout(out, self.config.dropout_rate, train, self.dropout_rng, tape)
        return self._head(out, tape), Taps()


def build_model(config: ModelConfig) -> SequenceModel:
    """
    Build a seeded model for config; variant pruning happens here.
    """
    if config.family == "transformer":
        return TransformerLM(config)
    return RecurrentLM(config)


def count_parameters(model: SequenceModel) -> int:
    return int(sum(t.data.size for t in model.parameters()))


def save_checkpoint(model: SequenceModel, path: str):
    """
    Store parameters in a zarr zip store, one array per parameter keyed by its
    dotted name (dots become group separators), config in the group attributes.
    """
    try:
        store = zarr.ZipStore(path, mode="w")
    except OSError as e:
        raise OSError(f"could not open checkpoint {path} for writing: {e}") from e
    root = zarr.group(store=store)
    root.attrs["config"] = asdict(model.config)
    for name, t in model.params.items():
        root.create_dataset(
            name.replace(".", "/"),
            data=t.data,
            dtype="f8",
            compressor=Blosc(cname="lz4", clevel=3, shuffle=Blosc.SHUFFLE),
        )
    store.close()


def load_checkpoint(path: str) -> SequenceModel:
    """
    Rebuild a model from a checkpoint written by save_checkpoint; parameters are restored bit-exactly.
    """
    store = zarr.ZipStore(path, mode="r")
    try:
        root = zarr.open_group(store=store, mode="r")
        model = build_model(ModelConfig(**root.attrs["config"]))
        model.load_state_dict({name: np.asarray(root[name.replace(".", "/")][:]) for name in model.params})
    finally:
        store.close()
    print("succesfully loaded model weights from", path)
    return model
