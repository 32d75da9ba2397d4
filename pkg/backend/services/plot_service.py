"""
Plot Service
Heatmaps (task dissimilarity, CKA), training curves from diagnostics.csv,
accuracy-vs-teachers from sweep.csv, and image grids of recovered tasks.
Figures are rendered to memory and written atomically.
"""

import io
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.figure import Figure  # noqa: E402

from models.errors import ConfigValidationError, RejectedInputError  # noqa: E402
from services.artifact_service import atomic_write_bytes, read_csv, read_json, read_matrix_csv, require  # noqa: E402

logger = logging.getLogger(__name__)


def save_figure(fig: Figure, path: Path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120)
    plt.close(fig)
    return atomic_write_bytes(path, buf.getvalue())


def heatmap_figure(matrix: np.ndarray, title: str, labels: Optional[Sequence[str]] = None) -> Figure:
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise RejectedInputError(f"heatmap needs a square matrix, got {matrix.shape}")
    n = matrix.shape[0]
    fig, ax = plt.subplots(figsize=(max(4, 0.45 * n + 2), max(3.5, 0.45 * n + 1.5)))
    im = ax.imshow(matrix, cmap="viridis", vmin=0.0, vmax=1.0)
    fig.colorbar(im, ax=ax)
    if labels is not None:
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
        ax.set_xticklabels(labels, rotation=90, fontsize=7)
        ax.set_yticklabels(labels, fontsize=7)
    ax.set_title(title)
    fig.tight_layout()
    return fig


def curve_figure(epochs: Sequence[int], values: Sequence[float], ylabel: str, title: str) -> Figure:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(list(epochs), list(values), marker=".", linewidth=1)
    ax.set_xlabel("Epoch")
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True)
    fig.tight_layout()
    return fig


def accuracy_vs_teachers_figure(rows: List[dict]) -> Figure:
    """Accuracy (with ci95 bars) and cover rate against the number of teachers."""
    rows = sorted(rows, key=lambda r: int(r["value"]))
    n = [int(r["value"]) for r in rows]
    acc = [100 * float(r["mean_accuracy"]) for r in rows]
    ci = [100 * float(r["ci95"]) for r in rows]
    cover = [float(r["cover_rate"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.errorbar(n, acc, yerr=ci, marker="o", capsize=3, label="accuracy")
    ax.set_xlabel("Number of pre-trained models")
    ax.set_ylabel("Accuracy (%)")
    twin = ax.twinx()
    twin.plot(n, cover, color="tab:orange", linestyle="--", marker="s", label="cover rate")
    twin.set_ylabel("Cover rate")
    twin.set_ylim(0.0, 1.05)
    ax.grid(True)
    fig.tight_layout()
    return fig


def save_image_grid(images: np.ndarray, path: Path, columns: int = 8) -> Path:
    """Tile a B x H x W x C batch in [0, 1] into one PNG."""
    images = np.clip(np.asarray(images, dtype=np.float32), 0.0, 1.0)
    if images.ndim != 4 or len(images) == 0:
        raise RejectedInputError(f"image grid needs a nonempty B x H x W x C batch, got {images.shape}")
    rows = int(np.ceil(len(images) / columns))
    cols = min(columns, len(images))
    fig, axes = plt.subplots(rows, cols, figsize=(cols, rows), squeeze=False)
    for k, ax in enumerate(axes.flat):
        ax.axis("off")
        if k < len(images):
            ax.imshow(images[k])
    fig.subplots_adjust(wspace=0.05, hspace=0.05)
    return save_figure(fig, path)


def plot_artifacts(out_dir: Path) -> List[Path]:
    """Render every figure whose source artifacts exist under `out_dir`; diagnostics are required."""
    out_dir = Path(out_dir)
    figures = out_dir / "figures"
    written: List[Path] = []

    rows = read_csv(require(out_dir / "diagnostics.csv", "train"))
    if not rows:
        raise ConfigValidationError("diagnostics.csv holds no epochs; run `train` first", stage="train")
    epochs = [int(r["epoch"]) for r in rows]
    written.append(save_figure(
        curve_figure(epochs, [float(r["regularizer"]) for r in rows], "Gradient regularizer", "Gradient variance"),
        figures / "regularizer.png",
    ))
    written.append(save_figure(
        curve_figure(epochs, [float(r["mean_cosine"]) for r in rows], "Mean cosine similarity", "Gradient alignment"),
        figures / "cosine.png",
    ))

    ids = None
    if (out_dir / "groups.json").exists():
        ids = read_json(out_dir / "groups.json").get("ids")
    if (out_dir / "W.csv").exists():
        w = read_matrix_csv(out_dir / "W.csv")
        written.append(save_figure(heatmap_figure(w, "Task dissimilarity", ids), figures / "W.png"))
    if (out_dir / "cka.csv").exists():
        cka = read_matrix_csv(out_dir / "cka.csv")
        written.append(save_figure(heatmap_figure(cka, "Linear CKA", ids), figures / "cka.png"))
    if (out_dir / "sweep.csv").exists():
        sweep = [r for r in read_csv(out_dir / "sweep.csv") if r["sweep"] == "pool_size"]
        if sweep:
            written.append(save_figure(accuracy_vs_teachers_figure(sweep), figures / "accuracy_vs_models.png"))

    logger.info(f"[PlotService] wrote {len(written)} figures to {figures}")
    return written
