"""Static figures: attention overlays, loss curves, metric and ablation charts.

Everything renders through the Agg backend with pinned PNG metadata, so the
same inputs give the same bytes.
"""
from __future__ import annotations

from contextlib import contextmanager
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data import resize_map  # noqa: E402

CMAP = "jet"
STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "svg.hashsalt": "iagaze",
    "path.simplify": False,
}
PNG_METADATA = {"Software": None}


@contextmanager
def style():
    with plt.rc_context(STYLE):
        yield


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path


def _rgb(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.max() > 1.0:
        img = img / 255.0
    return np.clip(img[:, :, :3], 0.0, 1.0)


def fit_map(m, height: int, width: int) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"attention map must be 2-D, got shape {m.shape}")
    if m.shape != (height, width):
        m = resize_map(m, height, width, "bilinear")
    return m


def overlay(image, m, alpha: float = 0.6) -> np.ndarray:
    """Blend ``CMAP(m)`` over the image with per-pixel weight ``alpha * m``.

    Zero-valued pixels keep the image untouched.
    """
    img = _rgb(image)
    m = np.clip(fit_map(m, *img.shape[:2]), 0.0, 1.0)
    color = plt.get_cmap(CMAP)(m)[:, :, :3]
    w = (alpha * m)[:, :, None]
    return img * (1 - w) + color * w


def plot_maps(image, maps, labels, path, title: str | None = None, upsample: bool = True) -> Path:
    """Image panel followed by one overlay panel per map."""
    img = _rgb(image)
    if len(labels) != len(maps):
        raise ValueError("need one label per map")
    if not upsample:
        for m in maps:
            if np.shape(m) != img.shape[:2]:
                raise ValueError(f"map shape {np.shape(m)} != image shape {img.shape[:2]}")
    n = len(maps) + 1
    with style():
        fig, axes = plt.subplots(1, n, figsize=(2.2 * n, 2.4))
        axes = np.atleast_1d(axes)
        axes[0].imshow(img, interpolation="nearest")
        axes[0].set_title("image")
        for ax, m, lab in zip(axes[1:], maps, labels):
            ax.imshow(overlay(img, m), interpolation="nearest")
            ax.set_title(lab)
        for ax in axes:
            ax.set_xticks([])
            ax.set_yticks([])
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss(log: list[dict], path) -> Path:
    with style():
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot([r["epoch"] for r in log], [r["mean_loss"] for r in log], color="k", lw=1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean BCE")
        ax.set_yscale("log")
        fig.tight_layout()
        return _save(fig, path)


def plot_metric_hist(rows: list[dict], path) -> Path:
    keys = ("cc", "kldiv", "sim", "auc")
    with style():
        fig, axes = plt.subplots(1, 4, figsize=(9, 2.4))
        for ax, k in zip(axes, keys):
            vals = np.array([r[k] for r in rows], dtype=np.float64)
            lo, hi = vals.min(), vals.max()
            span = (lo - 0.5, hi + 0.5) if hi - lo < 1e-9 else (lo, hi)
            ax.hist(vals, bins=min(20, len(vals)), range=span, color="0.4")
            ax.set_title(k)
        fig.tight_layout()
        return _save(fig, path)


def plot_ablation(rows: list[dict], path) -> Path:
    keys = ("cc", "kldiv", "sim", "auc")
    names = [r["variant"] for r in rows]
    x = np.arange(len(names))
    with style():
        fig, axes = plt.subplots(1, 4, figsize=(10, 2.6))
        for ax, k in zip(axes, keys):
            ax.bar(x, [r[k] for r in rows], color="0.5")
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=45, ha="right")
            ax.set_title(k)
        fig.tight_layout()
        return _save(fig, path)


def plot_attention_grid(images, maps, path, ncols: int = 4) -> Path:
    """Overlay host attention maps on a few images, one panel each."""
    n = len(images)
    nrows = max(1, int(np.ceil(n / ncols)))
    with style():
        fig, axes = plt.subplots(nrows, ncols, figsize=(2 * ncols, 2 * nrows), squeeze=False)
        for i, ax in enumerate(axes.ravel()):
            ax.set_xticks([])
            ax.set_yticks([])
            if i < n:
                m = np.asarray(maps[i], dtype=np.float64)
                span = m.max() - m.min()
                m = (m - m.min()) / span if span > 0 else np.zeros_like(m)
                ax.imshow(overlay(images[i], m), interpolation="nearest")
            else:
                ax.axis("off")
        fig.tight_layout()
        return _save(fig, path)
