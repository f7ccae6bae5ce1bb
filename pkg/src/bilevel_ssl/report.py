"""Weight histograms, cohort means and figures from a finished run."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .metrics import MetricsRecord, read_metrics
from .regularizers import WeightLedger

BIN_EDGES = np.array([0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])


def histogram(weights) -> np.ndarray:
    """Percentages over the right-closed bins (0, 0.1], ..., (0.9, 1.0].

    Exact zeros are counted in the first bin.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.size == 0:
        raise ValueError("no weights to histogram")
    if (w < 0).any() or (w > 1).any():
        raise ValueError("weights must lie in [0, 1]")
    idx = np.maximum(np.searchsorted(BIN_EDGES, w, side="left") - 1, 0)
    counts = np.bincount(idx, minlength=10)
    return 100.0 * counts / w.size


def bin_labels() -> list[str]:
    return [f"({BIN_EDGES[i]:.1f},{BIN_EDGES[i + 1]:.1f}]" for i in range(10)]


def write_histograms(ledger: WeightLedger, path: str | Path) -> dict[str, np.ndarray]:
    if len(ledger) == 0:
        raise ValueError("ledger is empty")
    out = {}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cohort", *bin_labels()])
        for cohort in sorted(set(ledger.cohort.values()) or {"?"}):
            pct = histogram(ledger.values(cohort) if ledger.cohort else ledger.values())
            out[cohort] = pct
            w.writerow([cohort, *(repr(float(p)) for p in pct)])
    return out


def write_cohort_means(ledger: WeightLedger, path: str | Path) -> dict[str, float]:
    if len(ledger) == 0:
        raise ValueError("ledger is empty")
    means = ledger.cohort_means()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cohort", "count", "mean_weight"])
        for cohort, m in means.items():
            w.writerow([cohort, len(ledger.values(cohort)), repr(m)])
    return means


def _series(records: list[MetricsRecord], name: str) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for i, r in enumerate(records):
        v = getattr(r, name)
        if not (isinstance(v, float) and math.isnan(v)):
            xs.append(i)
            ys.append(v)
    return np.array(xs), np.array(ys)


def plot_figures(records: list[MetricsRecord], hist: dict[str, np.ndarray], means: dict[str, float],
                 directory: str | Path) -> list[Path]:
    """Histogram, weight-trajectory and loss figures as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    d = Path(directory)
    written = []

    fig, ax = plt.subplots(figsize=(7, 4))
    width = 0.8 / max(1, len(hist))
    for k, (cohort, pct) in enumerate(sorted(hist.items())):
        ax.bar(np.arange(10) + k * width, pct, width, label=f"{cohort} (mean {means.get(cohort, float('nan')):.2f})")
    ax.set_xticks(np.arange(10) + 0.4 - width / 2)
    ax.set_xticklabels(bin_labels(), rotation=45, fontsize=7)
    ax.set_ylabel("% of samples")
    ax.legend()
    fig.tight_layout()
    written.append(d / "weight_histogram.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    for cohort in ("U", "W", "S", "O"):
        x, y = _series(records, f"lambda_{cohort}")
        if len(x):
            ax.plot(x, y, label=cohort, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean weight in batch")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    written.append(d / "weights_over_time.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4))
    for name in ("train_loss", "val_loss"):
        x, y = _series(records, name)
        if len(x):
            ax.plot(x, y, label=name, lw=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    written.append(d / "losses.png")
    fig.savefig(written[-1], dpi=120)
    plt.close(fig)
    return written


def build_report(run_dir: str | Path, out_dir: str | Path | None = None, figures: bool = True) -> dict:
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run / "report"
    out.mkdir(parents=True, exist_ok=True)
    ledger_path = run / "ledger.csv"
    if not ledger_path.exists():
        raise FileNotFoundError(f"{ledger_path} not found")
    ledger = WeightLedger.from_csv(ledger_path)
    hist = write_histograms(ledger, out / "histogram.csv")
    means = write_cohort_means(ledger, out / "cohort_means.csv")
    files = [out / "histogram.csv", out / "cohort_means.csv"]
    if figures:
        metrics_path = run / "metrics.csv"
        records = read_metrics(metrics_path) if metrics_path.exists() else []
        files += plot_figures(records, hist, means, out)
    return {"histogram": {k: v.tolist() for k, v in hist.items()}, "means": means,
            "files": [str(f) for f in files]}
