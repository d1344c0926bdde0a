import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from datetime import timedelta
from timeit import default_timer as timer
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
import toml
from tqdm.auto import tqdm

from src import probes
from src.constants import (
    ACTIVATION_BINS,
    CHECKPOINT_DIR,
    CONFIG_FILE,
    DATASET_FILE,
    DEFAULT_BATCH_SIZE,
    DEFAULT_CENSUS_EVERY,
    DEFAULT_EPOCHS,
    DEFAULT_LENGTH,
    DEFAULT_OPTIMIZER_PRESET,
    DEFAULT_SAMPLE_COUNT,
    DEFAULT_SAMPLE_SEED,
    DEFAULT_SHUFFLE_SEED,
    DEFAULT_TARGET_SEED,
    DEFAULT_VOCAB_SIZE,
    FFN_MULT,
    HISTOGRAMS_FILE,
    JUMP_THRESHOLD,
    METRICS_COLUMNS,
    METRICS_FILE,
    PAIRING_WINDOW,
    SMOKE_D,
    SMOKE_EPOCHS,
    SMOOTH_WINDOW,
    SPIKE_LOOKBACK,
    SPIKE_RISE_THRESHOLD,
    SPIKES_FILE,
    SUMMARY_FILE,
    TAIL_EPOCHS,
    TARGET_FILE,
    TARGET_PATTERNS,
)
from src.errors import (
    ConfigError,
    EmptyTailError,
    EnumerationTooLargeError,
    PoisonedStateError,
    StrictParseError,
    TrainingAbortedError,
)
from src.exacteval import evaluate, space_size, target_entropy
from src.modelzoo import ModelConfig, build_model, count_parameters, save_checkpoint
from src.optim import OptimizerConfig, make_optimizer, step
from src.targetgen import TargetSpec, build_target, empirical_target, sample_dataset, save_dataset, save_target
from src.tensorcore import Tape, backward
from src.viz_utils import emit_plots


@dataclass(frozen=True)
class TargetSection:
    vocab_size: int = DEFAULT_VOCAB_SIZE
    length: int = DEFAULT_LENGTH
    pattern: Tuple[float, ...] = tuple(TARGET_PATTERNS["base"])
    seed: int = DEFAULT_TARGET_SEED

    def to_spec(self) -> TargetSpec:
        return TargetSpec(self.vocab_size, self.length, tuple(self.pattern), self.seed)


@dataclass(frozen=True)
class DatasetSection:
    sample_count: int = DEFAULT_SAMPLE_COUNT
    sample_seed: int = DEFAULT_SAMPLE_SEED


@dataclass(frozen=True)
class TrainingSection:
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    shuffle_seed: int = DEFAULT_SHUFFLE_SEED
    # 0 keeps only the final checkpoint
    checkpoint_every: int = 0
    workers: int = 1


@dataclass(frozen=True)
class ProbeSection:
    census_every: int = DEFAULT_CENSUS_EVERY
    spike_rise_threshold: float = SPIKE_RISE_THRESHOLD
    spike_lookback: int = SPIKE_LOOKBACK
    jump_threshold: float = JUMP_THRESHOLD
    pairing_window: int = PAIRING_WINDOW
    tail_epochs: int = TAIL_EPOCHS
    smooth_window: int = SMOOTH_WINDOW
    activation_bins: int = ACTIVATION_BINS


@dataclass(frozen=True)
class OutputSection:
    run_dir: str = os.path.join("runs", "default")


@dataclass(frozen=True)
class RunConfig:
    target: TargetSection = field(default_factory=TargetSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig.from_preset)
    training: TrainingSection = field(default_factory=TrainingSection)
    probes: ProbeSection = field(default_factory=ProbeSection)
    output: OutputSection = field(default_factory=OutputSection)

    def __post_init__(self):
        t, m = self.target, self.model
        if (m.vocab_out, m.max_len) != (t.vocab_size, t.length + 1):
            raise ConfigError("model vocabulary and length must follow the target")
        if self.dataset.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        if self.training.epochs < 1 or self.training.batch_size < 1 or self.training.workers < 1:
            raise ConfigError("epochs, batch_size and workers must be >= 1")
        if self.training.checkpoint_every < 0 or self.probes.census_every < 1:
            raise ConfigError("checkpoint_every must be >= 0 and census_every >= 1")
        p = self.probes
        if min(p.tail_epochs, p.spike_lookback, p.activation_bins) < 1 or p.pairing_window < 0:
            raise ConfigError(
                "tail_epochs, spike_lookback and activation_bins must be >= 1, pairing_window >= 0"
            )
        if p.smooth_window < 1 or p.smooth_window % 2 == 0:
            raise ConfigError(f"smooth_window must be odd and >= 1, got {p.smooth_window}")
        if p.spike_rise_threshold <= 0 or p.jump_threshold <= 0:
            raise ConfigError("spike_rise_threshold and jump_threshold must be > 0")
        try:
            space_size(t.vocab_size, t.length)
        except EnumerationTooLargeError as e:
            raise ConfigError(str(e)) from e


# keys derived from the target section, never read from the model section
DERIVED_MODEL_KEYS = ("max_len", "vocab_in", "vocab_out")
SECTIONS = ("target", "dataset", "model", "optimizer", "training", "probes", "output")


def _section(doc: dict, name: str) -> dict:
    section = doc.get(name, {})
    if not isinstance(section, dict):
        raise StrictParseError(f"[{name}] must be a table")
    return dict(section)


def _strict(cls, section: dict, name: str, allowed=None):
    allowed = set(allowed if allowed is not None else (f.name for f in fields(cls)))
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise StrictParseError(f"unknown key(s) in [{name}]: {unknown}, allowed: {sorted(allowed)}")


def parse_config(doc: dict) -> RunConfig:
    """
    Build a RunConfig from a parsed TOML document. Unknown sections or keys are rejected;
    missing ones take the defaults from src.constants.
    """
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise StrictParseError(f"unknown section(s) {unknown}, allowed: {list(SECTIONS)}")
    try:
        raw = _section(doc, "target")
        _strict(TargetSection, raw, "target", [f.name for f in fields(TargetSection)] + ["preset"])
        preset = raw.pop("preset", None)
        if preset is not None:
            if preset not in TARGET_PATTERNS:
                raise ConfigError(f"unknown target preset {preset}, choose one of {list(TARGET_PATTERNS)}")
            raw.setdefault("pattern", TARGET_PATTERNS[preset])
        if "pattern" in raw:
            raw["pattern"] = tuple(float(p) for p in raw["pattern"])
        target = TargetSection(**raw)
        target.to_spec()

        raw = _section(doc, "dataset")
        _strict(DatasetSection, raw, "dataset")
        dataset = DatasetSection(**raw)

        raw = _section(doc, "model")
        _strict(ModelConfig, raw, "model", [f.name for f in fields(ModelConfig) if f.name not in DERIVED_MODEL_KEYS])
        model = ModelConfig.for_target(target.vocab_size, target.length, **raw)

        raw = _section(doc, "optimizer")
        _strict(OptimizerConfig, raw, "optimizer", [f.name for f in fields(OptimizerConfig)] + ["preset"])
        optimizer = OptimizerConfig.from_preset(raw.pop("preset", DEFAULT_OPTIMIZER_PRESET), **raw)

        sections = {}
        for name, cls in (("training", TrainingSection), ("probes", ProbeSection), ("output", OutputSection)):
            raw = _section(doc, name)
            _strict(cls, raw, name)
            sections[name] = cls(**raw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(target=target, dataset=dataset, model=model, optimizer=optimizer, **sections)


def load_config(path: str) -> RunConfig:
    try:
        doc = toml.load(path)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except toml.TomlDecodeError as e:
        raise StrictParseError(f"{path}: {e}") from e
    return parse_config(doc)


def config_to_dict(config: RunConfig) -> dict:
    model = {k: v for k, v in asdict(config.model).items() if k not in DERIVED_MODEL_KEYS}
    target = asdict(config.target)
    target["pattern"] = list(config.target.pattern)
    return {
        "target": target,
        "dataset": asdict(config.dataset),
        "model": model,
        "optimizer": asdict(config.optimizer),
        "training": asdict(config.training),
        "probes": asdict(config.probes),
        "output": asdict(config.output),
    }


def save_config(config: RunConfig, path: str):
    try:
        with open(path, "w") as f:
            toml.dump(config_to_dict(config), f)
    except OSError as e:
        raise OSError(f"could not write config {path}: {e}") from e


def apply_overrides(
    config: RunConfig, epochs: Optional[int] = None, output_root: Optional[str] = None, smoke: bool = False
) -> RunConfig:
    """Command-line overrides on top of a loaded config."""
    if smoke:
        config = replace(
            config,
            model=replace(config.model, d=SMOKE_D, d_h=FFN_MULT * SMOKE_D),
            training=replace(config.training, epochs=SMOKE_EPOCHS),
        )
    if epochs is not None:
        config = replace(config, training=replace(config.training, epochs=epochs))
    if output_root is not None:
        run_name = os.path.basename(os.path.normpath(config.output.run_dir))
        config = replace(config, output=OutputSection(run_dir=os.path.join(output_root, run_name)))
    return config


@dataclass
class MetricsRecord:
    epoch: int
    mean_train_loss: float
    model_entropy: float
    kl_vs_empirical_target: float
    cross_entropy_full: float
    sparse_part_entropy: float
    nonsparse_part_entropy: float
    dead_proportion: float
    mean_active_fraction: float
    spike_flag: int


@dataclass
class RunSummary:
    run_dir: str
    epochs: int
    parameter_count: int
    empirical_entropy: float
    tail_entropy: Optional[float]
    tail_kl: Optional[float]
    tail_loss: Optional[float]
    tail_cross_entropy: Optional[float]
    tail_sparse_part: Optional[float]
    tail_nonsparse_part: Optional[float]
    final_dead_proportion: float
    final_mean_active_fraction: float
    spikes: dict
    histograms: dict = field(repr=False, default_factory=dict)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("histograms")
        return doc


def emit_metrics(records: List[MetricsRecord], path: str):
    """One header row then one row per epoch, reals at 9 significant digits."""
    if not records:
        raise ValueError("no metrics records to write")
    frame = pd.DataFrame([asdict(r) for r in records], columns=METRICS_COLUMNS)
    try:
        frame.to_csv(path, index=False, float_format="%.9g")
    except OSError as e:
        raise OSError(f"could not write metrics {path}: {e}") from e
    return path


def read_metrics(path: str) -> pd.DataFrame:
    return pd.read_csv(path)


def _write_json(doc, path):
    try:
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
    except OSError as e:
        raise OSError(f"could not write {path}: {e}") from e


def _safe_tail(series, tail, exclude):
    try:
        return probes.tail_average(series, min(tail, len(series)), exclude)
    except EmptyTailError:
        print("every tail epoch was excluded as a spike outlier, no tail average")
        return None


def summarize(records: List[MetricsRecord], config: RunConfig) -> Tuple[dict, probes.SpikeReport]:
    """Tail averages with spike epochs excluded, and the spike/jump report (epochs as in metrics.csv)."""
    p = config.probes
    loss = [r.mean_train_loss for r in records]
    report = probes.spike_report(
        loss,
        [r.dead_proportion for r in records],
        p.spike_rise_threshold,
        p.spike_lookback,
        p.jump_threshold,
        p.pairing_window,
    )
    tails = {
        name: _safe_tail([getattr(r, column) for r in records], p.tail_epochs, report.spikes)
        for name, column in (
            ("tail_entropy", "model_entropy"),
            ("tail_kl", "kl_vs_empirical_target"),
            ("tail_loss", "mean_train_loss"),
            ("tail_cross_entropy", "cross_entropy_full"),
            ("tail_sparse_part", "sparse_part_entropy"),
            ("tail_nonsparse_part", "nonsparse_part_entropy"),
        )
    }
    epochs = [r.epoch for r in records]
    labelled = probes.SpikeReport(
        spikes=[epochs[i] for i in report.spikes],
        jumps=[epochs[i] for i in report.jumps],
        pairs=[(epochs[j], None if s is None else epochs[s]) for j, s in report.pairs],
    )
    return tails, labelled


def _train_epoch(model, opt_state, tokens, perm, batch_size):
    params = model.parameters()
    loss_sum = 0.0
    model.train()
    for start in range(0, len(perm), batch_size):
        idx = perm[start : start + batch_size]
        tape = Tape()
        loss, _ = model.forward_train(tokens[idx], tape)
        grads = backward(loss, tape)
        step(opt_state, params, grads)
        loss_sum += loss.item() * len(idx)
    return loss_sum / len(perm)


def run_experiment(config: RunConfig, progress: bool = True) -> RunSummary:
    """
    Build target, sample the dataset, train with per-epoch measurements and
    write every artifact into config.output.run_dir.
    """
    start_time = timer()
    run_dir = config.output.run_dir
    os.makedirs(os.path.join(run_dir, CHECKPOINT_DIR), exist_ok=True)
    print("saving results to:", run_dir)
    save_config(config, os.path.join(run_dir, CONFIG_FILE))

    target = build_target(config.target.to_spec())
    save_target(target, os.path.join(run_dir, TARGET_FILE))
    dataset = sample_dataset(target, config.dataset.sample_count, config.dataset.sample_seed)
    save_dataset(dataset, os.path.join(run_dir, DATASET_FILE))
    empirical = empirical_target(dataset, config.target.vocab_size)
    h_emp = target_entropy(empirical)
    print(f"empirical target: {len(empirical.ids)} distinct sequences, entropy {h_emp:.6f} nats")

    model = build_model(config.model)
    opt_state = make_optimizer(config.optimizer)
    print(f"training {config.model.family} ({config.model.variant}) with {count_parameters(model)} parameters")

    start = np.full((dataset.count, 1), config.model.start_token, dtype=np.int64)
    tokens = np.concatenate([start, dataset.sequences], axis=1)
    shuffle_rng = np.random.default_rng(config.training.shuffle_seed)
    metrics_path = os.path.join(run_dir, METRICS_FILE)
    workers = config.training.workers

    records: List[MetricsRecord] = []
    census = None
    for epoch in tqdm(range(1, config.training.epochs + 1), disable=not progress):
        perm = shuffle_rng.permutation(dataset.count)
        try:
            mean_loss = _train_epoch(model, opt_state, tokens, perm, config.training.batch_size)
        except PoisonedStateError as e:
            if records:
                emit_metrics(records, metrics_path)
            raise TrainingAbortedError(f"training aborted in epoch {epoch}: {e}", records) from e

        model.eval()
        report = evaluate(model, empirical, workers=workers)
        if census is None or (epoch - 1) % config.probes.census_every == 0 or epoch == config.training.epochs:
            census = probes.census(model, workers=workers)
        losses = [r.mean_train_loss for r in records] + [mean_loss]
        spikes = probes.detect_spikes(losses, config.probes.spike_rise_threshold, config.probes.spike_lookback)
        records.append(
            MetricsRecord(
                epoch=epoch,
                mean_train_loss=mean_loss,
                model_entropy=report.entropy_nats,
                kl_vs_empirical_target=report.kl_nats,
                cross_entropy_full=report.cross_entropy_nats,
                sparse_part_entropy=report.sparse_part_entropy,
                nonsparse_part_entropy=report.nonsparse_part_entropy,
                dead_proportion=probes.dead_proportion(census.ledger),
                mean_active_fraction=probes.mean_active_fraction(census.ledger),
                spike_flag=int(len(losses) - 1 in spikes),
            )
        )
        emit_metrics(records, metrics_path)
        every = config.training.checkpoint_every
        if every and epoch % every == 0:
            save_checkpoint(model, os.path.join(run_dir, CHECKPOINT_DIR, f"epoch_{epoch:04d}.zip"))

    save_checkpoint(model, os.path.join(run_dir, CHECKPOINT_DIR, "final.zip"))
    histograms = probes.histograms_document(census.ledger, census.router, config.probes.activation_bins)
    _write_json(histograms, os.path.join(run_dir, HISTOGRAMS_FILE))
    tails, spike_report = summarize(records, config)
    _write_json(spike_report.to_dict(), os.path.join(run_dir, SPIKES_FILE))

    summary = RunSummary(
        run_dir=run_dir,
        epochs=len(records),
        parameter_count=count_parameters(model),
        empirical_entropy=h_emp,
        final_dead_proportion=records[-1].dead_proportion,
        final_mean_active_fraction=records[-1].mean_active_fraction,
        spikes=spike_report.to_dict(),
        histograms=histograms,
        **tails,
    )
    _write_json(summary.to_dict(), os.path.join(run_dir, SUMMARY_FILE))
    emit_plots(run_dir, read_metrics(metrics_path), histograms, h_emp)
    print("::: run took", timedelta(seconds=timer() - start_time))
    return summary


def report(run_dir: str):
    """Regenerate plots of a finished run from its metrics, histograms and summary."""
    metrics = read_metrics(os.path.join(run_dir, METRICS_FILE))
    histograms = {}
    hist_path = os.path.join(run_dir, HISTOGRAMS_FILE)
    if os.path.exists(hist_path):
        with open(hist_path) as f:
            histograms = json.load(f)
    summary_path = os.path.join(run_dir, SUMMARY_FILE)
    if os.path.exists(summary_path):
        with open(summary_path) as f:
            h_emp = json.load(f)["empirical_entropy"]
    else:
        config = load_config(os.path.join(run_dir, CONFIG_FILE))
        dataset = sample_dataset(build_target(config.target.to_spec()), config.dataset.sample_count, config.dataset.sample_seed)
        h_emp = target_entropy(empirical_target(dataset, config.target.vocab_size))
    return emit_plots(run_dir, metrics, histograms, h_emp)
