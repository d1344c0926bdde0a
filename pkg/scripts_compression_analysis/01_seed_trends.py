import os
import sys
import json
import argparse
from dataclasses import replace
import pandas as pd
from tqdm import tqdm

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from src.runner import OutputSection, RunConfig, load_config, run_experiment  # noqa: E402
from src.constants import SUMMARY_FILE  # noqa: E402

# (family, variant) pairs compared against the empirical-target entropy
MODELS = {
    "transformer_full": ("transformer", "full"),
    "lstm": ("lstm", "full"),
    "attention_only": ("transformer", "attention_only"),
    "attention_main": ("transformer", "attention_main"),
    "ffn_main": ("transformer", "ffn_main"),
}
BELOW_MARGIN = 0.05
AROUND_MARGIN = 0.15


def run_or_load(config):
    """Run an experiment unless its summary already exists"""
    summary_path = os.path.join(config.output.run_dir, SUMMARY_FILE)
    if os.path.exists(summary_path):
        print(f"{summary_path} already exists. Skipping...")
    else:
        run_experiment(config, progress=False)
    with open(summary_path) as f:
        return json.load(f)


def main(base, output_root, seeds, names):
    rows = []
    for seed in tqdm(seeds, desc="seeds", unit="seed"):
        for name in names:
            family, variant = MODELS[name]
            model = replace(base.model, family=family, variant=variant, L=1 if family != "transformer" else base.model.L, seed=seed)
            config = replace(
                base,
                model=model,
                dataset=replace(base.dataset, sample_seed=base.dataset.sample_seed + seed),
                training=replace(base.training, shuffle_seed=base.training.shuffle_seed + seed),
                output=OutputSection(run_dir=os.path.join(output_root, f"{name}_s{seed}")),
            )
            summary = run_or_load(config)
            rows.append({"seed": seed, "model": name, **{k: summary[k] for k in ("empirical_entropy", "tail_entropy", "tail_kl", "tail_loss")}})

    frame = pd.DataFrame(rows)
    frame["gap"] = frame["tail_entropy"] - frame["empirical_entropy"]
    frame.to_csv(os.path.join(output_root, "seed_trends.csv"), index=False, float_format="%.9g")
    gaps = frame.pivot(index="seed", columns="model", values="gap")

    if "transformer_full" in gaps and "lstm" in gaps:
        passed = ((gaps["transformer_full"] <= -BELOW_MARGIN) & (gaps["lstm"].abs() <= AROUND_MARGIN)).sum()
        print(f"low-entropy preference holds in {passed}/{len(gaps)} seeds")
    if {"attention_only", "attention_main", "ffn_main"} <= set(gaps):
        entropy = frame.pivot(index="seed", columns="model", values="tail_entropy")
        ordered = (entropy["attention_only"] >= entropy["attention_main"]) & (entropy["attention_main"] >= entropy["ffn_main"])
        sides = (gaps["attention_only"] > 0) & (gaps["ffn_main"] <= 0)
        print(f"variant ordering holds in {(ordered & sides).sum()}/{len(gaps)} seeds")
    print(gaps.to_string())
    print("Done!")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Tail-averaged entropy of transformer variants and LSTM across seeds.")
    parser.add_argument("--config", type=str, default=None, help="base TOML config, defaults to the standard protocol")
    parser.add_argument("--output_root", type=str, required=True, help="directory for the run folders")
    parser.add_argument("--seeds", type=str, default="0,1,2", help="comma separated seeds")
    parser.add_argument("--models", type=str, default="transformer_full,lstm", help=f"comma separated, from {list(MODELS)}")
    args = parser.parse_args()
    base = load_config(args.config) if args.config else RunConfig()
    main(base, args.output_root, [int(s) for s in args.seeds.split(",")], args.models.split(","))
