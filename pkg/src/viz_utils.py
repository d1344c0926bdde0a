import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from src.constants import PLOTS_DIR, SMOOTH_WINDOW
from src.probes import smooth_series

# reproducible svg output: fixed element ids, no timestamp
plt.rcParams["svg.hashsalt"] = "compression-lab"
plt.rcParams["figure.figsize"] = (8.0, 5.0)
plt.rcParams["axes.titlesize"] = 13
plt.rcParams["axes.labelsize"] = 11
plt.rcParams["legend.fontsize"] = 10
SVG_METADATA = {"Date": None}


def _save(fig, path):
    try:
        fig.savefig(path, format="svg", metadata=SVG_METADATA)
    except OSError as e:
        raise OSError(f"could not write plot {path}: {e}") from e
    finally:
        plt.close(fig)
    return path


def plot_entropy_kl(metrics: pd.DataFrame, empirical_entropy: float, path: str, window: int = SMOOTH_WINDOW):
    """Smoothed model entropy and KL per epoch, gray reference line at the empirical-target entropy."""
    fig, ax = plt.subplots()
    epochs = metrics["epoch"].to_numpy()
    ax.plot(epochs, smooth_series(metrics["model_entropy"], window), label="model entropy")
    ax.plot(epochs, smooth_series(metrics["kl_vs_empirical_target"], window), label="KL(target || model)")
    ax.axhline(empirical_entropy, color="gray", linewidth=1.0, label=f"target entropy {empirical_entropy:.3f}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("nats")
    ax.set_title("Entropy and KL during training")
    ax.grid(True, linestyle=":", linewidth=0.5)
    ax.legend()
    return _save(fig, path)


def plot_loss(metrics: pd.DataFrame, path: str):
    # raw series, spikes must stay visible
    fig, ax = plt.subplots()
    ax.plot(metrics["epoch"], metrics["mean_train_loss"], color="tab:red", label="train loss")
    flagged = metrics[metrics["spike_flag"] == 1]
    if len(flagged):
        ax.scatter(flagged["epoch"], flagged["mean_train_loss"], marker="x", color="black", label="spike")
    ax.set_xlabel("epoch")
    ax.set_ylabel("nats / token")
    ax.set_title("Training loss")
    ax.grid(True, linestyle=":", linewidth=0.5)
    ax.legend()
    return _save(fig, path)


def plot_entropy_parts(metrics: pd.DataFrame, path: str, window: int = SMOOTH_WINDOW):
    fig, ax = plt.subplots()
    epochs = metrics["epoch"].to_numpy()
    ax.plot(epochs, smooth_series(metrics["sparse_part_entropy"], window), label="sparse part")
    ax.plot(epochs, smooth_series(metrics["nonsparse_part_entropy"], window), label="non-sparse part")
    ax.set_xlabel("epoch")
    ax.set_ylabel("nats")
    ax.set_title("Entropy split over target support")
    ax.grid(True, linestyle=":", linewidth=0.5)
    ax.legend()
    return _save(fig, path)


def plot_sparsity(metrics: pd.DataFrame, path: str):
    fig, ax = plt.subplots()
    ax.plot(metrics["epoch"], metrics["dead_proportion"], label="dead neurons")
    ax.plot(metrics["epoch"], metrics["mean_active_fraction"], label="active per sequence")
    ax.set_xlabel("epoch")
    ax.set_ylabel("fraction of FFN neurons")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, linestyle=":", linewidth=0.5)
    ax.legend()
    return _save(fig, path)


def plot_histogram(hist: dict, title: str, xlabel: str, path: str):
    """Bar chart of a histogram document ({bin_edges, mass[, dead_proportion]})."""
    edges = np.asarray(hist["bin_edges"], dtype=np.float64)
    mass = np.asarray(hist["mass"], dtype=np.float64)
    fig, ax = plt.subplots()
    total = float(mass.sum())
    label = f"total mass {total:.3f}"
    if hist.get("dead_proportion") is not None:
        label += f" (+ dead {hist['dead_proportion']:.3f})"
    ax.bar(edges[:-1], mass, width=np.diff(edges), align="edge", edgecolor="black", linewidth=0.3, label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("proportion")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def emit_histogram_plots(histograms: dict, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    written = [
        plot_histogram(
            histograms["activation"]["pooled"],
            "FFN neuron activation counts (all layers)",
            "activation count",
            os.path.join(out_dir, "activation_pooled.svg"),
        )
    ]
    for layer, hist in histograms["activation"]["per_layer"].items():
        written.append(
            plot_histogram(
                hist,
                f"FFN neuron activation counts (layer {layer})",
                "activation count",
                os.path.join(out_dir, f"activation_layer{layer}.svg"),
            )
        )
    if "router" in histograms:
        written.append(
            plot_histogram(
                histograms["router"]["all_paths"],
                "Routing weights, all paths",
                "weight",
                os.path.join(out_dir, "router_all_paths.svg"),
            )
        )
        written.append(
            plot_histogram(
                histograms["router"]["residual_path"],
                "Routing weights, residual path",
                "weight",
                os.path.join(out_dir, "router_residual.svg"),
            )
        )
    return written


def emit_plots(run_dir: str, metrics: pd.DataFrame, histograms: dict, empirical_entropy: float):
    """Write every run plot as SVG into <run_dir>/plots and return the paths."""
    out_dir = os.path.join(run_dir, PLOTS_DIR)
    os.makedirs(out_dir, exist_ok=True)
    written = [
        plot_entropy_kl(metrics, empirical_entropy, os.path.join(out_dir, "entropy_kl.svg")),
        plot_loss(metrics, os.path.join(out_dir, "loss.svg")),
        plot_entropy_parts(metrics, os.path.join(out_dir, "entropy_parts.svg")),
        plot_sparsity(metrics, os.path.join(out_dir, "sparsity.svg")),
    ]
    if histograms:
        written.extend(emit_histogram_plots(histograms, out_dir))
    return written


def plot_scatter(frame: pd.DataFrame, x: str, y: str, path: str, hue: str = "group"):
    """Scatter of tail-averaged sweep results, one color per group."""
    fig, ax = plt.subplots()
    for name, part in frame.groupby(hue, sort=True):
        ax.scatter(part[x], part[y], label=str(name))
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    ax.grid(True, linestyle=":", linewidth=0.5)
    ax.legend()
    return _save(fig, path)
