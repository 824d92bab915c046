"""Report figures: training curves, comparison bars, 2-D scatters and image grids.

All functions write a file and close their figure. The Agg backend is forced
so the CLI works without a display. Image grids bypass matplotlib and are
encoded with Pillow so identical samples give byte-identical PNGs.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}

METRIC_LABELS = {"fid": "FID (lower)", "kid": "KID (lower)",
                 "precision": "Precision (higher)", "recall": "Recall (higher)"}


def _read_log(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for key in rows[0].keys() if rows else ():
        vals = [float(r[key]) if r[key] not in ("", None) else np.nan for r in rows]
        out[key] = np.asarray(vals)
    return out


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_training_log(log_csv, out_png, title: str = "") -> Path:
    """Losses, r_d and the adaptive T against iteration."""
    log = _read_log(log_csv)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(10, 2.8))
        it = log.get("iter", np.arange(0))
        axes[0].plot(it, log.get("d_loss", it * np.nan), lw=0.8, label="D")
        axes[0].plot(it, log.get("g_loss", it * np.nan), lw=0.8, label="G")
        axes[0].set_xlabel("iteration")
        axes[0].set_ylabel("loss")
        axes[0].legend(frameon=False)
        rd = log.get("r_d", it * np.nan)
        ok = np.isfinite(rd)
        axes[1].plot(it[ok], rd[ok], ".", ms=2)
        axes[1].set_ylim(-1.05, 1.05)
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("r_d")
        axes[2].step(it, log.get("T", it * np.nan), where="post", lw=0.8)
        axes[2].set_xlabel("iteration")
        axes[2].set_ylabel("T")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, out_png)


def plot_comparison(table: list[dict], out_png, caveat: str = "") -> Path:
    """Bar chart of per-variant medians with min/max whiskers, one panel per metric.

    ``table`` rows hold ``variant`` plus ``<metric>_median``, ``_min``, ``_max``.
    Rows without values (failed variants) are drawn empty.
    """
    names = [r["variant"] for r in table]
    x = np.arange(len(names))
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 4, figsize=(12, 3.2))
        for ax, m in zip(axes, METRIC_LABELS):
            med = np.array([r.get(f"{m}_median", np.nan) for r in table], dtype=float)
            lo = np.array([r.get(f"{m}_min", np.nan) for r in table], dtype=float)
            hi = np.array([r.get(f"{m}_max", np.nan) for r in table], dtype=float)
            err = np.vstack([med - lo, hi - med])
            ax.bar(x, np.nan_to_num(med), color="0.6", edgecolor="0.2", lw=0.6)
            ax.errorbar(x, med, yerr=np.nan_to_num(err), fmt="none", ecolor="k", lw=0.8, capsize=2)
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=30, ha="right")
            ax.set_title(METRIC_LABELS[m])
        if caveat:
            fig.text(0.5, 0.005, caveat, ha="center", va="bottom", fontsize=7, color="0.3")
        fig.tight_layout(rect=(0, 0.05, 1, 1))
        return _save(fig, out_png)


def plot_points(samples: np.ndarray, out_png, centers: np.ndarray | None = None,
                title: str = "") -> Path:
    """Scatter of 2-D samples, with mode centers marked when given."""
    s = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(s[:, 0], s[:, 1], s=2, alpha=0.4, lw=0)
        if centers is not None:
            c = np.asarray(centers, dtype=float)
            ax.scatter(c[:, 0], c[:, 1], marker="x", s=20, c="r", lw=0.8)
        ax.set_aspect("equal")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, out_png)


def to_uint8(images: np.ndarray) -> np.ndarray:
    """Map [-1, 1] to [0, 255] with rounding."""
    x = (np.clip(np.asarray(images, dtype=np.float64), -1.0, 1.0) + 1.0) * 127.5
    return np.rint(x).astype(np.uint8)


def tile_grid(images: np.ndarray, grid: int) -> np.ndarray:
    """Tile up to ``grid * grid`` images ``[n, C, R, R]`` row-major; empty cells stay black."""
    n, c, r, _ = images.shape
    canvas = np.zeros((grid * r, grid * r, c), dtype=np.uint8)
    pix = to_uint8(images).transpose(0, 2, 3, 1)
    for k in range(n):
        i, j = divmod(k, grid)
        canvas[i * r:(i + 1) * r, j * r:(j + 1) * r] = pix[k]
    return canvas


def save_grid_png(images: np.ndarray, grid: int, out_png) -> Path:
    canvas = tile_grid(images, grid)
    if canvas.shape[2] not in (1, 3):
        raise ValueError(f"PNG grids need 1 or 3 channels, got {canvas.shape[2]}")
    img = Image.fromarray(canvas[:, :, 0] if canvas.shape[2] == 1 else canvas)
    path = Path(out_png)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path
