import os
import sys
import json
import argparse
from dataclasses import replace
import pandas as pd
from tqdm import tqdm

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src.runner import OutputSection, RunConfig, load_config, run_experiment  # noqa: E402
from src.constants import HISTOGRAMS_FILE, SUMMARY_FILE  # noqa: E402
from src.errors import TrainingAbortedError  # noqa: E402


def run_or_load(config):
    summary_path = os.path.join(config.output.run_dir, SUMMARY_FILE)
    if os.path.exists(summary_path):
        print(f"{config.output.run_dir} already finished. Skipping...")
    else:
        try:
            run_experiment(config, progress=False)
        except TrainingAbortedError as e:
            print(f"{config.output.run_dir}: {e}")
            return None, None
    with open(summary_path) as f:
        summary = json.load(f)
    with open(os.path.join(config.output.run_dir, HISTOGRAMS_FILE)) as f:
        return summary, json.load(f)


def main(base, output_root, seeds, dims):
    rows = []
    for seed in tqdm(seeds, desc="seeds", unit="seed"):
        for d in dims:
            for routed in (True, False):
                name = f"{'routed' if routed else 'plain'}_d{d}_L{base.model.L}_s{seed}"
                config = replace(
                    base,
                    model=replace(base.model, d=d, d_h=None, routed=routed, seed=seed),
                    output=OutputSection(run_dir=os.path.join(output_root, name)),
                )
                summary, histograms = run_or_load(config)
                if summary is None:
                    continue
                row = {
                    "seed": seed,
                    "d": d,
                    "routed": int(routed),
                    "dead_proportion": summary["final_dead_proportion"],
                    "mean_active_fraction": summary["final_mean_active_fraction"],
                    "residual_top_bin": None,
                }
                if routed:
                    # mass of the residual path in [29/30, 1]
                    row["residual_top_bin"] = histograms["router"]["residual_path"]["mass"][-1]
                rows.append(row)
    frame = pd.DataFrame(rows)
    frame.to_csv(os.path.join(output_root, "dynamic_sparsity.csv"), index=False, float_format="%.9g")
    print(frame.to_string(index=False))

    routed = frame[frame["routed"] == 1]
    plain = frame[frame["routed"] == 0]
    wide, narrow = max(dims), min(dims)

    r_wide = routed[routed["d"] == wide]
    r_narrow = routed[routed["d"] == narrow]
    print(f"routed d={wide}: residual top-bin mass >= 0.15 in {(r_wide['residual_top_bin'] >= 0.15).sum()}/{len(r_wide)} runs")
    print(f"routed d={narrow}: residual top-bin mass <= 0.05 in {(r_narrow['residual_top_bin'] <= 0.05).sum()}/{len(r_narrow)} runs")

    p_wide = plain[plain["d"] == wide]
    p_narrow = plain[plain["d"] == narrow]
    sparse = (p_wide["dead_proportion"] >= 0.05) & (p_wide["mean_active_fraction"] <= 0.25)
    print(f"d={wide}: dead >= 0.05 and active fraction <= 0.25 in {sparse.sum()}/{len(p_wide)} runs")
    print(f"d={narrow}: active fraction >= 0.35 in {(p_narrow['mean_active_fraction'] >= 0.35).sum()}/{len(p_narrow)} runs")
    print("Done!")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Routing-weight and FFN-neuron sparsity of wide vs narrow models.")
    parser.add_argument("--config", type=str, default=None, help="base TOML config, defaults to the standard protocol with L=8")
    parser.add_argument("--output_root", type=str, required=True, help="directory for the run folders")
    parser.add_argument("--seeds", type=str, default="0,1,2", help="comma separated model seeds")
    parser.add_argument("--d", type=str, default="8,64", help="comma separated model widths, narrowest and widest are compared")
    args = parser.parse_args()
    if args.config:
        base = load_config(args.config)
    else:
        base = RunConfig()
        base = replace(base, model=replace(base.model, L=8))
    os.makedirs(args.output_root, exist_ok=True)
    main(base, args.output_root, [int(s) for s in args.seeds.split(",")], [int(d) for d in args.d.split(",")])
