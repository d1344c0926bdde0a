"""
Measurement machinery: FFN neuron census, router-weight statistics, loss-spike
and sparsity-jump detection, smoothing and tail averaging.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.constants import (
    ACTIVATION_BINS,
    ENUMERATION_CAP,
    EVAL_CHUNK_SIZE,
    JUMP_THRESHOLD,
    PAIRING_WINDOW,
    ROUTER_BINS,
    SMOOTH_WINDOW,
    SPIKE_LOOKBACK,
    SPIKE_RISE_THRESHOLD,
    TAIL_EPOCHS,
)
from src.errors import EmptyTailError, ParameterError, UnsupportedProbeError
from src.exacteval import decode_batch, space_size


@dataclass
class ActivationLedger:
    """
    Per-layer activation counts of FFN neurons over a traversal.

    counts[layer][i] is the number of token positions where neuron i of that
    layer had a strictly positive preactivation; n_max is the number of token
    positions visited.
    """

    counts: Dict[int, np.ndarray]
    n_max: int
    # fraction of all FFN neurons active at least once per sequence, ascending id order
    per_sequence_active: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def layers(self) -> List[int]:
        return sorted(self.counts)

    def pooled(self) -> np.ndarray:
        if not self.counts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([self.counts[layer] for layer in self.layers])

    def view(self, layer: Optional[int] = None) -> np.ndarray:
        return self.pooled() if layer is None else self.counts[layer]

    def merge(self, other: "ActivationLedger") -> "ActivationLedger":
        counts = {layer: self.counts[layer] + other.counts[layer] for layer in self.layers}
        return ActivationLedger(
            counts=counts,
            n_max=self.n_max + other.n_max,
            per_sequence_active=np.concatenate([self.per_sequence_active, other.per_sequence_active]),
        )


@dataclass
class Histogram:
    bin_edges: np.ndarray
    mass: np.ndarray
    dead_proportion: Optional[float] = None

    def to_dict(self) -> dict:
        doc = {"bin_edges": self.bin_edges.tolist(), "mass": self.mass.tolist()}
        if self.dead_proportion is not None:
            doc["dead_proportion"] = self.dead_proportion
        return doc


@dataclass
class RouterStats:
    """Flat samples of routing weights: all paths, and the residual path alone."""

    all_weights: np.ndarray
    residual_weights: np.ndarray

    def histogram(self, residual_only: bool = False, bins: int = ROUTER_BINS) -> Histogram:
        sample = self.residual_weights if residual_only else self.all_weights
        counts, edges = np.histogram(sample, bins=bins, range=(0.0, 1.0))
        mass = counts / max(len(sample), 1)
        return Histogram(bin_edges=edges, mass=mass)


@dataclass
class CensusResult:
    ledger: ActivationLedger
    router: Optional[RouterStats]


def _census_chunk(model, ids: np.ndarray):
    sequences = decode_batch(ids, model.vocab_size, model.length)
    _, taps = model.run_eval(sequences)
    counts, seen = {}, []
    for layer in sorted(taps.ffn_preacts):
        active = taps.ffn_preacts[layer] > 0
        counts[layer] = active.sum(axis=(0, 1)).astype(np.int64)
        seen.append(active.any(axis=1))
    if seen:
        per_sequence = np.concatenate(seen, axis=1).mean(axis=1)
    else:
        per_sequence = np.zeros(len(ids))
    ledger = ActivationLedger(counts=counts, n_max=sequences.size, per_sequence_active=per_sequence)
    weights = [taps.router_weights[layer] for layer in sorted(taps.router_weights)]
    return ledger, weights


def census(
    model,
    cap: int = ENUMERATION_CAP,
    chunk_size: int = EVAL_CHUNK_SIZE,
    workers: int = 1,
) -> CensusResult:
    """
    Traverse every sequence of the space once in eval mode and collect both the
    neuron ledger and (for routed models) the routing weights.

    Chunks may run on a thread pool against the same model snapshot; counts are
    merged by integer addition in chunk order.
    """
    size = space_size(model.vocab_size, model.length, cap)
    ids = np.arange(size, dtype=np.int64)
    chunks = [ids[i : i + chunk_size] for i in range(0, size, chunk_size)]
    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            parts = list(executor.map(lambda c: _census_chunk(model, c), chunks))
    else:
        parts = [_census_chunk(model, c) for c in chunks]

    ledger = parts[0][0]
    for part, _ in parts[1:]:
        ledger = ledger.merge(part)

    router = None
    if getattr(model.config, "routed", False):
        flat = [w.reshape(-1) for _, weights in parts for w in weights]
        residual = [w[..., -1].reshape(-1) for _, weights in parts for w in weights]
        router = RouterStats(
            all_weights=np.concatenate(flat) if flat else np.zeros(0),
            residual_weights=np.concatenate(residual) if residual else np.zeros(0),
        )
    return CensusResult(ledger=ledger, router=router)


def neuron_census(model, cap: int = ENUMERATION_CAP, workers: int = 1) -> ActivationLedger:
    return census(model, cap, workers=workers).ledger


def router_census(model, cap: int = ENUMERATION_CAP, workers: int = 1) -> RouterStats:
    if not getattr(model.config, "routed", False):
        raise UnsupportedProbeError("router census needs a model with routed attention")
    return census(model, cap, workers=workers).router


def dead_proportion(ledger: ActivationLedger, layer: Optional[int] = None) -> float:
    """Share of neurons that never fired; 0 for a model without FFN neurons."""
    counts = ledger.view(layer)
    if counts.size == 0:
        return 0.0
    return float(np.count_nonzero(counts == 0) / counts.size)


def activation_histogram(
    ledger: ActivationLedger, bins: int = ACTIVATION_BINS, layer: Optional[int] = None
) -> Histogram:
    """
    Normalized histogram of activation counts over (0, N_max], equal-width bins,
    left-open intervals. Dead neurons are left out of the mass and reported separately.
    """
    if bins < 1:
        raise ParameterError(f"bins must be >= 1, got {bins}")
    counts = ledger.view(layer)
    edges = np.linspace(0.0, float(ledger.n_max), bins + 1)
    if counts.size == 0 or ledger.n_max == 0:
        return Histogram(bin_edges=edges, mass=np.zeros(bins), dead_proportion=0.0)
    active = counts[counts > 0]
    # bin index = ceil(c * bins / N_max) - 1, in exact integer arithmetic
    index = (active * bins + ledger.n_max - 1) // ledger.n_max - 1
    mass = np.bincount(index, minlength=bins)[:bins] / counts.size
    return Histogram(bin_edges=edges, mass=mass, dead_proportion=dead_proportion(ledger, layer))


def per_sequence_active_fraction(model, seq: Sequence[int]) -> float:
    """Fraction of all FFN neurons firing at least once over the n positions of seq."""
    _, taps = model.run_eval(np.asarray(seq, dtype=np.int64)[None, :])
    seen = [taps.ffn_preacts[layer][0] > 0 for layer in sorted(taps.ffn_preacts)]
    if not seen:
        return 0.0
    return float(np.concatenate([s.any(axis=0) for s in seen]).mean())


def mean_active_fraction(ledger: ActivationLedger) -> float:
    if ledger.per_sequence_active.size == 0:
        return 0.0
    return float(ledger.per_sequence_active.mean())


### training-dynamics series


def detect_spikes(
    loss_series: Sequence[float],
    rise_threshold: float = SPIKE_RISE_THRESHOLD,
    lookback: int = SPIKE_LOOKBACK,
) -> List[int]:
    """
    Epochs whose loss rose at least rise_threshold above the minimum of the
    previous lookback epochs. Early epochs compare against the shorter window available.
    """
    series = np.asarray(loss_series, dtype=np.float64)
    spikes = []
    for t in range(1, len(series)):
        window = series[max(0, t - lookback) : t]
        if series[t] - window.min() >= rise_threshold:
            spikes.append(t)
    return spikes


def detect_sparsity_jumps(dead_series: Sequence[float], jump_threshold: float = JUMP_THRESHOLD) -> List[int]:
    series = np.asarray(dead_series, dtype=np.float64)
    return [t for t in range(1, len(series)) if series[t] - series[t - 1] >= jump_threshold]


@dataclass
class SpikeReport:
    spikes: List[int]
    jumps: List[int]
    # (jump epoch, nearest spike epoch within the window or None)
    pairs: List[Tuple[int, Optional[int]]]

    @property
    def unpaired_jumps(self) -> List[int]:
        return [jump for jump, spike in self.pairs if spike is None]

    def to_dict(self) -> dict:
        return {
            "spikes": list(self.spikes),
            "jumps": list(self.jumps),
            "pairs": [{"jump": jump, "spike": spike} for jump, spike in self.pairs],
        }


def pair_jumps(jumps: Sequence[int], spikes: Sequence[int], window: int = PAIRING_WINDOW):
    pairs = []
    for jump in jumps:
        near = [s for s in spikes if abs(s - jump) <= window]
        # nearest first, earlier spike on ties
        pairs.append((jump, min(near, key=lambda s: (abs(s - jump), s)) if near else None))
    return pairs


def spike_report(
    loss_series: Sequence[float],
    dead_series: Sequence[float],
    rise_threshold: float = SPIKE_RISE_THRESHOLD,
    lookback: int = SPIKE_LOOKBACK,
    jump_threshold: float = JUMP_THRESHOLD,
    window: int = PAIRING_WINDOW,
) -> SpikeReport:
    spikes = detect_spikes(loss_series, rise_threshold, lookback)
    jumps = detect_sparsity_jumps(dead_series, jump_threshold)
    return SpikeReport(spikes=spikes, jumps=jumps, pairs=pair_jumps(jumps, spikes, window))


def smooth_series(series: Sequence[float], window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centered moving average; the edges average over the truncated window."""
    if window < 1 or window % 2 == 0:
        raise ParameterError(f"window must be odd and >= 1, got {window}")
    values = pd.Series(np.asarray(series, dtype=np.float64))
    if window == 1:
        return values.to_numpy()
    return values.rolling(window, center=True, min_periods=1).mean().to_numpy()


def tail_average(series: Sequence[float], tail: int = TAIL_EPOCHS, exclude: Sequence[int] = ()) -> float:
    """
    Mean of the last tail values, skipping every excluded epoch and the epoch right after it.
    """
    values = np.asarray(series, dtype=np.float64)
    if tail < 1 or tail > len(values):
        raise ParameterError(f"tail must lie in [1, {len(values)}], got {tail}")
    dropped = set(exclude) | {e + 1 for e in exclude}
    kept = [t for t in range(len(values) - tail, len(values)) if t not in dropped]
    if not kept:
        raise EmptyTailError(f"all {tail} tail epochs are excluded as spike outliers")
    return float(math.fsum(values[kept]) / len(kept))


def histograms_document(ledger: ActivationLedger, router: Optional[RouterStats], bins: int = ACTIVATION_BINS) -> dict:
    """JSON-ready histograms: pooled and per-layer activation views, router views when present."""
    doc = {
        "n_max": ledger.n_max,
        "activation": {
            "pooled": activation_histogram(ledger, bins).to_dict(),
            "per_layer": {str(layer): activation_histogram(ledger, bins, layer).to_dict() for layer in ledger.layers},
        },
        "mean_active_fraction": mean_active_fraction(ledger),
    }
    if router is not None:
        doc["router"] = {
            "all_paths": router.histogram().to_dict(),
            "residual_path": router.histogram(residual_only=True).to_dict(),
            "sample_count": int(router.all_weights.size),
        }
    return doc
