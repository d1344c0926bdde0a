import os
import argparse
import json
import sys
from timeit import default_timer as timer
from datetime import timedelta
from src.constants import (
    EXIT_ABORTED,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    HISTOGRAMS_FILE,
    PLOTS_DIR,
    TARGET_FILE,
)
from src.errors import ConfigError, SpecError, TrainingAbortedError, UnsupportedProbeError
from src.targetgen import TargetSpec, analytic_entropy, build_target, save_target
from src.runner import apply_overrides, load_config, report, run_experiment
from src.sweep import grid_configs, sweep_main


def _csv(value, cast=str):
    return [cast(v) for v in value.split(",") if v.strip()] if value else []


def gen_target(params: dict):
    """
    Generate a seeded target distribution and write it in the text target format
    """
    if params["preset"] is not None:
        spec = TargetSpec.preset(params["preset"], params["seed"], params["vocab"], params["len"])
    else:
        spec = TargetSpec(params["vocab"], params["len"], tuple(_csv(params["pattern"], float)), params["seed"])
    target = build_target(spec)
    out = params["out"] or TARGET_FILE
    save_target(target, out)
    print("saving target to:", out)
    print(
        f"support size {target.support_size()}, entropy {analytic_entropy(target):.6f} nats"
    )


def train(params: dict):
    """
    Run a single experiment from a TOML run config
    """
    config = load_config(params["config"])
    config = apply_overrides(config, params["epochs"], params["output_root"], params["smoke"])
    summary = run_experiment(config)
    print(json.dumps(summary.to_dict(), indent=2))


def probe(params: dict):
    """
    Census and router statistics of a saved checkpoint
    """
    from src.modelzoo import load_checkpoint
    from src import probes
    from src.viz_utils import emit_histogram_plots

    model = load_checkpoint(params["checkpoint"])
    model.eval()
    if params["router"] and not model.config.routed:
        raise UnsupportedProbeError("checkpoint model has no routed attention")
    result = probes.census(model, workers=params["workers"])
    doc = probes.histograms_document(result.ledger, result.router)
    doc["dead_proportion"] = probes.dead_proportion(result.ledger)
    doc["forward_calls"] = model.forward_calls
    out_dir = params["out"] or os.path.dirname(params["checkpoint"])
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, HISTOGRAMS_FILE), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
    emit_histogram_plots(doc, os.path.join(out_dir, PLOTS_DIR))
    print("saving results to:", out_dir)
    print(f"dead proportion {doc['dead_proportion']:.4f}, mean active fraction {doc['mean_active_fraction']:.4f}")


def sweep(params: dict):
    """
    Run a grid (or list) of configs and write the combined scatter table
    """
    if params["configs"]:
        configs = [
            apply_overrides(load_config(p), params["epochs"], params["output_root"], params["smoke"])
            for p in params["configs"]
        ]
    else:
        if params["config"] is None:
            raise ConfigError("sweep needs --config (grid base) or --configs")
        base = apply_overrides(load_config(params["config"]), params["epochs"], None, params["smoke"])
        configs = grid_configs(
            base,
            params["output_root"],
            families=_csv(params["families"]) or ["transformer"],
            dims=_csv(params["d"], int),
            layers=_csv(params["layers"], int),
            variants=_csv(params["variants"]) or ["full"],
            seeds=_csv(params["seeds"], int),
        )
    sweep_main(configs, params["output_root"], params["workers"])


def report_cmd(params: dict):
    written = report(params["run_dir"])
    print("wrote", len(written), "plot(s) to:", os.path.join(params["run_dir"], PLOTS_DIR))


def build_parser():
    parser = argparse.ArgumentParser(description="controlled compression laboratory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-target", help="write a seeded target distribution")
    p.add_argument("--vocab", type=int, default=5, help="vocabulary size |V| without the start symbol")
    p.add_argument("--len", type=int, default=5, help="sequence length n")
    p.add_argument("--pattern", type=str, default="0.8,0.2", help="comma separated transition pattern")
    p.add_argument("--preset", type=str, default=None, help="named pattern: base, lower or higher")
    p.add_argument("--seed", type=int, default=0, help="target seed")
    p.add_argument("--out", type=str, default=None, help="output target file")
    p.set_defaults(func=gen_target)

    p = sub.add_parser("train", help="run one experiment")
    p.add_argument("--config", type=str, required=True, help="TOML run config")
    p.add_argument("--epochs", type=int, default=None, help="override training.epochs")
    p.add_argument("--output_root", type=str, default=None, help="place the run directory under this root")
    p.add_argument("--smoke", action="store_true", help="reduced preset: d=16, 20 epochs")
    p.set_defaults(func=train)

    p = sub.add_parser("probe", help="neuron census and router histograms of a checkpoint")
    p.add_argument("--checkpoint", type=str, required=True, help="checkpoint zip written by train")
    p.add_argument("--out", type=str, default=None, help="output directory, defaults to the checkpoint folder")
    p.add_argument("--router", action="store_true", help="fail unless the model has routed attention")
    p.add_argument("--workers", type=int, default=1, help="threads for the census traversal")
    p.set_defaults(func=probe)

    p = sub.add_parser("sweep", help="run several configs and emit the scatter table")
    p.add_argument("--config", type=str, default=None, help="base TOML config for the grid")
    p.add_argument("--configs", type=str, nargs="*", default=None, help="explicit list of TOML configs")
    p.add_argument("--families", type=str, default=None, help="comma separated: transformer,gru,lstm")
    p.add_argument("--d", type=str, default=None, help="comma separated model widths")
    p.add_argument("--layers", type=str, default=None, help="comma separated transformer depths")
    p.add_argument("--variants", type=str, default=None, help="comma separated transformer variants")
    p.add_argument("--seeds", type=str, default=None, help="comma separated model seeds")
    p.add_argument("--output_root", type=str, required=True, help="sweep output directory")
    p.add_argument("--epochs", type=int, default=None, help="override training.epochs")
    p.add_argument("--smoke", action="store_true", help="reduced preset: d=16, 20 epochs")
    p.add_argument(
        "--workers",
        type=int,
        default=1,
        help="number of experiments run in parallel processes, maximally set this to number of cores",
    )
    p.set_defaults(func=sweep)

    p = sub.add_parser("report", help="regenerate plots of a finished run")
    p.add_argument("--run_dir", type=str, required=True, help="run directory written by train")
    p.set_defaults(func=report_cmd)
    return parser


def main(argv=None) -> int:
    """
    Parse the command line and dispatch to a subcommand

    Returns
    ----------
    exit status: 0 on success, 2 on config errors, 3 on aborted training
    """
    params = vars(build_parser().parse_args(argv))
    start_time = timer()
    try:
        params["func"](params)
    except (ConfigError, SpecError, UnsupportedProbeError) as e:
        print("config error:", e, file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except TrainingAbortedError as e:
        print("aborted:", e, file=sys.stderr)
        return EXIT_ABORTED
    print("::: done after", timedelta(seconds=timer() - start_time))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
