from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Sequence

import numpy as np

from src.constants import DEFAULT_OPTIMIZER_PRESET, OPTIMIZER_KINDS, OPTIMIZER_PRESETS
from src.errors import ConfigError, ConformanceError, PoisonedStateError
from src.tensorcore import Tensor


@dataclass(frozen=True)
class OptimizerConfig:
    """
    Hyperparameters of one optimizer. Fields not used by a kind are ignored
    (momentum for sgd_momentum only, alpha for rmsprop only, betas for adam/adamw).
    """

    kind: str = "adam"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    alpha: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"unknown optimizer kind {self.kind}, choose one of {OPTIMIZER_KINDS}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        for name in ("beta1", "beta2", "momentum", "alpha"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if self.eps < 0 or self.weight_decay < 0:
            raise ConfigError("eps and weight_decay must be nonnegative")

    @classmethod
    def from_preset(cls, name: str = DEFAULT_OPTIMIZER_PRESET, **overrides):
        if name not in OPTIMIZER_PRESETS:
            raise ConfigError(f"unknown optimizer preset {name}, choose one of {list(OPTIMIZER_PRESETS)}")
        return replace(cls(**OPTIMIZER_PRESETS[name]), **overrides)


@dataclass
class OptimizerState:
    config: OptimizerConfig
    step_count: int = 0
    # slot name -> one buffer per parameter position
    slots: Dict[str, List[np.ndarray]] = field(default_factory=dict)


def make_optimizer(config: OptimizerConfig) -> OptimizerState:
    """Zeroed optimizer state; buffers are allocated on the first step."""
    return OptimizerState(config=config)


def _slot(state: OptimizerState, name: str, index: int, like: np.ndarray) -> np.ndarray:
    buffers = state.slots.setdefault(name, [])
    while len(buffers) <= index:
        buffers.append(None)
    if buffers[index] is None:
        buffers[index] = np.zeros_like(like)
    elif buffers[index].shape != like.shape:
        raise ConformanceError(f"{name} slot {index} has shape {buffers[index].shape}, parameter {like.shape}")
    return buffers[index]


def _check_finite(params: Sequence[Tensor], grads: Mapping[Tensor, np.ndarray]):
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConformanceError(f"gradient shape {g.shape} does not match parameter {p.name or i} {p.shape}")
        if not np.all(np.isfinite(g)):
            raise PoisonedStateError(f"non-finite gradient for parameter {p.name or i}")


def step(state: OptimizerState, params: Sequence[Tensor], grads: Mapping[Tensor, np.ndarray]) -> Sequence[Tensor]:
    """
    Apply one update in place and advance the 1-indexed step counter.

    Parameters without a gradient entry are left untouched. All gradients are
    checked before any parameter moves, so a poisoned step leaves the state unchanged.
    """
    _check_finite(params, grads)
    cfg = state.config
    state.step_count += 1
    t = state.step_count
    for i, p in enumerate(params):
        g = grads.get(p)
        if g is None:
            continue
        if cfg.kind == "sgd_momentum":
            if cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            buf = _slot(state, "momentum_buffer", i, p.data)
            buf *= cfg.momentum
            buf += g
            p.data -= cfg.lr * buf
        elif cfg.kind == "rmsprop":
            # decoupled decay
            if cfg.weight_decay:
                p.data *= 1.0 - cfg.lr * cfg.weight_decay
            sq = _slot(state, "square_avg", i, p.data)
            sq *= cfg.alpha
            sq += (1.0 - cfg.alpha) * g * g
            p.data -= cfg.lr * g / np.sqrt(sq + cfg.eps)
        else:
            if cfg.kind == "adamw":
                p.data *= 1.0 - cfg.lr * cfg.weight_decay
            elif cfg.weight_decay:
                g = g + cfg.weight_decay * p.data
            m = _slot(state, "exp_avg", i, p.data)
            v = _slot(state, "exp_avg_sq", i, p.data)
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
    return params
