"""Per-epoch curves of a run: gnuplot data files and optional PNG figures.

Telemetry files are ``telemetry/<model>_r<index>.csv`` in long format
``epoch,metric,value,split``; curves are replicate means per epoch.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import numpy as np

from .experiments import RunFilesError, format_value

# (metric, split) pairs drawn for each study, with axis labels
FIGURES = {
    "ood_orbit_variance": [("orbit_variance", "test", "orbit variance, in distribution"),
                           ("orbit_variance", "ood", "orbit variance, out of distribution"),
                           ("loss", "test", "test loss")],
    "train_compare": [("gradient_variance", "train", "gradient variance"),
                      ("loss", "test", "test loss"),
                      ("loss_single", "test", "test loss without averaging")],
    "invariant_convergence": [("invariant_residual", "train", "invariant projection residual")],
}


def telemetry_curves(run_dir, metric: str, split: str) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Epochs and the replicate-mean curve of every model that logged ``metric``."""
    files = sorted(Path(run_dir, "telemetry").glob("*_r*.csv"))
    if not files:
        raise RunFilesError(f"{run_dir} has no telemetry files")
    acc: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    for path in files:
        model = path.stem.rsplit("_r", 1)[0]
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                if row["metric"] == metric and row["split"] == split:
                    acc[model][int(row["epoch"])].append(float(row["value"]))
    epochs = sorted({e for per in acc.values() for e in per})
    curves = {m: np.array([np.mean(per[e]) if per.get(e) else np.nan for e in epochs])
              for m, per in sorted(acc.items())}
    return np.array(epochs), curves


def write_gnuplot(run_dir, study: str, out_dir) -> list[Path]:
    """One whitespace-separated ``.dat`` file per figure panel; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric, split, label in FIGURES.get(study, []):
        epochs, curves = telemetry_curves(run_dir, metric, split)
        if not curves:
            continue
        path = out_dir / f"{study}_{metric}_{split}.dat"
        models = list(curves)
        lines = [f"# {label}; replicate means", "# epoch " + " ".join(models)]
        for j, e in enumerate(epochs):
            lines.append(" ".join([str(int(e))] + [format_value(curves[m][j]) for m in models]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(path)
    return written


def render_figures(run_dir, study: str, out_dir) -> list[Path]:
    """PNG per figure panel (needs matplotlib)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric, split, label in FIGURES.get(study, []):
        epochs, curves = telemetry_curves(run_dir, metric, split)
        if not curves:
            continue
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for model, ys in curves.items():
            ax.plot(epochs, ys, marker="o", markersize=3, label=model)
        if metric in ("gradient_variance", "invariant_residual"):
            ax.set_yscale("symlog", linthresh=1e-8)
        ax.set_xlabel("epoch")
        ax.set_ylabel(label)
        ax.legend(frameon=False)
        fig.tight_layout()
        path = out_dir / f"{study}_{metric}_{split}.png"
        # no software tag keeps the bytes reproducible
        fig.savefig(path, dpi=120, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
