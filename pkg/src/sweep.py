import concurrent.futures
import itertools
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import pearsonr
from tqdm.auto import tqdm

from src.errors import ConfigError, TrainingAbortedError
from src.runner import OutputSection, RunConfig, run_experiment
from src.viz_utils import plot_scatter

SWEEP_CSV = "sweep.csv"
SWEEP_JSON = "sweep.json"
SWEEP_COLUMNS = [
    "index",
    "status",
    "group",
    "family",
    "variant",
    "routed",
    "d",
    "L",
    "h",
    "seed",
    "optimizer",
    "parameter_count",
    "empirical_entropy",
    "tail_entropy",
    "tail_kl",
    "tail_loss",
    "tail_cross_entropy",
    "tail_sparse_part",
    "tail_nonsparse_part",
    "final_dead_proportion",
    "spike_count",
    "run_dir",
]


def grid_configs(
    base: RunConfig,
    output_root: str,
    families: Sequence[str] = ("transformer",),
    dims: Sequence[int] = (),
    layers: Sequence[int] = (),
    variants: Sequence[str] = ("full",),
    seeds: Sequence[int] = (),
) -> List[RunConfig]:
    """
    Cartesian grid over model family, width, depth, variant and model seed.
    Recurrent families are single-layer and always use the full variant, so
    their duplicates across layers and variants collapse to one entry.
    """
    dims = list(dims) or [base.model.d]
    layers = list(layers) or [base.model.L]
    seeds = list(seeds) or [base.model.seed]
    configs, seen = [], set()
    for family, d, L, variant, seed in itertools.product(families, dims, layers, variants, seeds):
        recurrent = family != "transformer"
        key = (family, d, 1 if recurrent else L, "full" if recurrent else variant, seed)
        if key in seen:
            continue
        seen.add(key)
        model = replace(
            base.model,
            family=family,
            d=d,
            d_h=None,
            L=key[2],
            variant=key[3],
            routed=base.model.routed and not recurrent,
            seed=seed,
        )
        name = f"{family}_{key[3]}_d{d}_L{key[2]}_s{seed}"
        configs.append(replace(base, model=model, output=OutputSection(run_dir=os.path.join(output_root, name))))
    return configs


def _run_one(index: int, config: RunConfig) -> dict:
    m = config.model
    row = {
        "index": index,
        "status": "ok",
        "group": f"{m.family}/{m.variant}" + ("/routed" if m.routed else ""),
        "family": m.family,
        "variant": m.variant,
        "routed": int(m.routed),
        "d": m.d,
        "L": m.L,
        "h": m.h,
        "seed": m.seed,
        "optimizer": config.optimizer.kind,
        "run_dir": config.output.run_dir,
    }
    try:
        summary = run_experiment(config, progress=False)
    except TrainingAbortedError as e:
        print(f"run {index} aborted: {e}")
        row["status"] = "aborted"
        return row
    doc = summary.to_dict()
    for column in SWEEP_COLUMNS:
        if column in doc:
            row[column] = doc[column]
    row["spike_count"] = len(summary.spikes["spikes"])
    return row


def correlation(x: np.ndarray, y: np.ndarray) -> Optional[dict]:
    """Pearson r between two tail-averaged columns; None when undefined."""
    mask = np.isfinite(x) & np.isfinite(y)
    x, y = x[mask], y[mask]
    if len(x) < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    r, p_value = pearsonr(x, y)
    return {"r": float(r), "p_value": float(p_value), "n": int(len(x))}


def correlations(frame: pd.DataFrame) -> dict:
    def pair(part):
        kl = part["tail_kl"].to_numpy(dtype=np.float64)
        return {
            "kl_vs_loss": correlation(kl, part["tail_loss"].to_numpy(dtype=np.float64)),
            "kl_vs_cross_entropy": correlation(kl, part["tail_cross_entropy"].to_numpy(dtype=np.float64)),
        }

    doc = {"all": pair(frame)}
    doc["groups"] = {str(name): pair(part) for name, part in frame.groupby("group", sort=True)}
    return doc


def sweep_main(configs: Sequence[RunConfig], output_root: str, workers: int = 1) -> pd.DataFrame:
    """
    Run every config (one process each when workers > 1) and write
    sweep.csv, sweep.json and scatter plots into output_root.
    """
    if not configs:
        raise ConfigError("sweep needs at least one config")
    os.makedirs(output_root, exist_ok=True)
    print("running", len(configs), "experiment(s), saving results to:", output_root)
    rows = []
    if workers > 1:
        executor = ProcessPoolExecutor(max_workers=workers)
        futures = [executor.submit(_run_one, i, c) for i, c in enumerate(configs)]
        for future in tqdm(concurrent.futures.as_completed(futures), total=len(futures)):
            rows.append(future.result())
        executor.shutdown(wait=True)
    else:
        for i, c in enumerate(tqdm(configs)):
            rows.append(_run_one(i, c))

    frame = pd.DataFrame(rows, columns=SWEEP_COLUMNS).sort_values("index").reset_index(drop=True)
    frame.to_csv(os.path.join(output_root, SWEEP_CSV), index=False, float_format="%.9g")
    done = frame[frame["status"] == "ok"]
    with open(os.path.join(output_root, SWEEP_JSON), "w") as f:
        json.dump({"runs": len(frame), "completed": len(done), "pearson": correlations(done)}, f, indent=2)
    if len(done):
        plot_scatter(done, "tail_kl", "tail_entropy", os.path.join(output_root, "entropy_vs_kl.svg"))
        plot_scatter(done, "tail_kl", "tail_loss", os.path.join(output_root, "loss_vs_kl.svg"))
        plot_scatter(done, "tail_kl", "tail_cross_entropy", os.path.join(output_root, "cross_entropy_vs_kl.svg"))
    return frame
