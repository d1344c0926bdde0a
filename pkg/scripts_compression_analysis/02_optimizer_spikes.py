import os
import sys
import json
import argparse
from dataclasses import replace
import pandas as pd
from tqdm import tqdm

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src.runner import OutputSection, RunConfig, load_config, run_experiment  # noqa: E402
from src.optim import OptimizerConfig  # noqa: E402
from src.constants import SPIKES_FILE, SUMMARY_FILE  # noqa: E402
from src.errors import TrainingAbortedError  # noqa: E402


def run_or_load(config):
    summary_path = os.path.join(config.output.run_dir, SUMMARY_FILE)
    if not os.path.exists(summary_path):
        try:
            run_experiment(config, progress=False)
        except TrainingAbortedError as e:
            print(f"{config.output.run_dir}: {e}")
            return None, None
    with open(summary_path) as f:
        summary = json.load(f)
    with open(os.path.join(config.output.run_dir, SPIKES_FILE)) as f:
        return summary, json.load(f)


def main(base, output_root, seeds, presets, dims):
    rows = []
    for seed in tqdm(seeds, desc="seeds", unit="seed"):
        for d in dims:
            for preset in presets:
                config = replace(
                    base,
                    model=replace(base.model, d=d, d_h=None, seed=seed),
                    optimizer=OptimizerConfig.from_preset(preset),
                    output=OutputSection(run_dir=os.path.join(output_root, f"{preset}_d{d}_s{seed}")),
                )
                summary, spikes = run_or_load(config)
                if summary is None:
                    rows.append({"seed": seed, "d": d, "optimizer": preset, "aborted": 1})
                    continue
                rows.append(
                    {
                        "seed": seed,
                        "d": d,
                        "optimizer": preset,
                        "aborted": 0,
                        "spikes": len(spikes["spikes"]),
                        "jumps": len(spikes["jumps"]),
                        "unpaired_jumps": sum(p["spike"] is None for p in spikes["pairs"]),
                        "dead_proportion": summary["final_dead_proportion"],
                        "mean_active_fraction": summary["final_mean_active_fraction"],
                    }
                )
    frame = pd.DataFrame(rows)
    frame.to_csv(os.path.join(output_root, "optimizer_spikes.csv"), index=False, float_format="%.9g")
    print(frame.to_string(index=False))

    done = frame[frame["aborted"] == 0]
    sgd = done[done["optimizer"] == "sgd_momentum"]
    adam = done[done["optimizer"] == "adam"]
    if len(sgd):
        print(f"sgd_momentum spike and jump free in {((sgd['spikes'] == 0) & (sgd['jumps'] == 0)).sum()}/{len(sgd)} runs")
    if len(adam):
        coupled = (adam["spikes"] >= 1) & (adam["unpaired_jumps"] == 0)
        print(f"adam spikes with paired jumps in {coupled.sum()}/{len(adam)} runs")
    print("Done!")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Loss spikes and dead-neuron jumps per optimizer preset.")
    parser.add_argument("--config", type=str, default=None, help="base TOML config, defaults to the standard protocol with L=8")
    parser.add_argument("--output_root", type=str, required=True, help="directory for the run folders")
    parser.add_argument("--seeds", type=str, default="0,1,2", help="comma separated model seeds")
    parser.add_argument("--presets", type=str, default="sgd_momentum,adam,rmsprop,adam_2nd", help="optimizer presets")
    parser.add_argument("--d", type=str, default="64", help="comma separated model widths, e.g. 8,64")
    args = parser.parse_args()
    if args.config:
        base = load_config(args.config)
    else:
        base = RunConfig()
        base = replace(base, model=replace(base.model, L=8))
    main(
        base,
        args.output_root,
        [int(s) for s in args.seeds.split(",")],
        args.presets.split(","),
        [int(d) for d in args.d.split(",")],
    )
