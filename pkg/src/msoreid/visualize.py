"""Figure-style plots: stem feature-map grids, 2-D embedding scatter, loss curves."""
from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .data import ImageRecord, Modality, resize, to_tensor  # noqa: E402
from .losses import LossReport  # noqa: E402

PROJECTIONS = ("tsne", "pca")


def channel_tiles(fmap: np.ndarray) -> np.ndarray:
    """Scale each channel of a (C, h, w) map into [0, 1] by its own peak magnitude.

    Channels that are zero everywhere stay zero, i.e. render as black tiles.
    """
    fmap = np.asarray(fmap, dtype=np.float64)
    if fmap.ndim != 3:
        raise ValueError(f"expected a (C, h, w) feature map, got shape {fmap.shape}")
    peak = np.abs(fmap).reshape(len(fmap), -1).max(axis=1)
    scale = np.where(peak > 0, peak, 1.0)[:, None, None]
    return np.abs(fmap) / scale


def channel_grid(fmap: np.ndarray, cols: int | None = None, gap: int = 1) -> np.ndarray:
    """Tile a (C, h, w) map into one 2-D mosaic; gaps are mid-gray."""
    tiles = channel_tiles(fmap)
    c, h, w = tiles.shape
    cols = cols or math.ceil(math.sqrt(c))
    rows = math.ceil(c / cols)
    grid = np.full((rows * (h + gap) - gap, cols * (w + gap) - gap), 0.5)
    for i, tile in enumerate(tiles):
        r, q = divmod(i, cols)
        grid[r * (h + gap):r * (h + gap) + h, q * (w + gap):q * (w + gap) + w] = tile
    return grid


@torch.no_grad()
def stem_maps(model, rgb: ImageRecord, ir: ImageRecord, image_size=None) -> dict[Modality, np.ndarray]:
    """Stem outputs (C, h, w) of one RGB and one IR image, model in eval mode."""
    was_training = model.training
    model.eval()
    out = {}
    try:
        for rec, modality in ((rgb, Modality.RGB), (ir, Modality.IR)):
            if rec.modality is not modality:
                raise ValueError(f"expected a {modality.value} record, got {rec.modality.value}")
            img = rec.pixels()
            if image_size is not None:
                img = resize(img, image_size)
            x = to_tensor([img], model.cfg.mean, model.cfg.std)
            out[modality] = model.stem_forward(x, modality)[0].numpy()
    finally:
        model.train(was_training)
    return out


def plot_feature_maps(maps: dict[Modality, np.ndarray], path: str | Path, max_channels: int | None = 64) -> Path:
    fig, axes = plt.subplots(1, len(maps), figsize=(5 * len(maps), 5), squeeze=False)
    for ax, (modality, fmap) in zip(axes[0], maps.items()):
        fmap = fmap[:max_channels] if max_channels else fmap
        ax.imshow(channel_grid(fmap), cmap="gray", vmin=0.0, vmax=1.0, interpolation="nearest")
        inactive = int((np.abs(fmap).reshape(len(fmap), -1).max(axis=1) == 0).sum())
        ax.set_title(f"{Modality(modality).value} stem ({inactive}/{len(fmap)} inactive)")
        ax.axis("off")
    return _save(fig, path)


def plot_edge_map(edge: np.ndarray, path: str | Path) -> Path:
    """Debug export of one (H, W) edge map, diverging colormap centered at zero."""
    edge = np.asarray(edge, dtype=np.float64).squeeze()
    lim = float(np.abs(edge).max()) or 1.0
    fig, ax = plt.subplots(figsize=(3, 5))
    im = ax.imshow(edge, cmap="coolwarm", vmin=-lim, vmax=lim)
    fig.colorbar(im, ax=ax, fraction=0.05)
    ax.axis("off")
    return _save(fig, path)


def project_2d(features: np.ndarray, method: str = "tsne", seed: int = 0) -> np.ndarray:
    """L2-normalize, then t-SNE (cosine metric) or PCA down to two dimensions."""
    x = np.asarray(features, dtype=np.float64)
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    if method == "pca":
        from sklearn.decomposition import PCA

        return PCA(n_components=2, random_state=seed).fit_transform(x)
    if method == "tsne":
        from sklearn.manifold import TSNE

        perplexity = float(min(30.0, max(2.0, (len(x) - 1) / 3)))
        return TSNE(n_components=2, metric="cosine", init="pca", perplexity=perplexity,
                    random_state=seed).fit_transform(x)
    raise ValueError(f"unknown projection {method!r}; choose from {PROJECTIONS}")


def plot_embedding_scatter(features: np.ndarray, identities: Sequence[int], modalities: Sequence,
                           path: str | Path, method: str = "tsne", seed: int = 0) -> np.ndarray:
    """Scatter colored by identity, circle = RGB, triangle = IR. Returns the 2-D points."""
    features = np.asarray(features)
    if len(features) != len(identities) or len(features) != len(modalities):
        raise ValueError("features, identities and modalities differ in length")
    pts = project_2d(features, method, seed)
    ids = np.asarray(identities)
    mods = np.array([Modality(m) if not isinstance(m, (int, np.integer)) else
                     (Modality.RGB if m == 0 else Modality.IR) for m in modalities])
    cmap = plt.get_cmap("tab20")
    palette = {pid: cmap(i % 20) for i, pid in enumerate(np.unique(ids))}
    fig, ax = plt.subplots(figsize=(6, 6))
    for modality, marker in ((Modality.RGB, "o"), (Modality.IR, "^")):
        sel = mods == modality
        if sel.any():
            ax.scatter(pts[sel, 0], pts[sel, 1], c=[palette[i] for i in ids[sel]], marker=marker, s=18,
                       label=modality.value, edgecolors="none")
    ax.legend(loc="best")
    ax.set_title(f"post-BN embeddings ({method})")
    ax.set_xticks([])
    ax.set_yticks([])
    _save(fig, path)
    return pts


def read_step_log(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return [json.loads(line) for line in fh if line.strip()]


def plot_training_curves(rows: Iterable[dict], path: str | Path) -> list[str]:
    """One line per LossReport field against the step index; returns the plotted names."""
    rows = list(rows)
    if not rows:
        raise ValueError("no training steps to plot")
    names = list(LossReport().as_dict())
    steps = [r.get("step", i) for i, r in enumerate(rows)]
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in names:
        ax.plot(steps, [r.get(name, 0.0) for r in rows], label=name, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    _save(fig, path)
    return names


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
