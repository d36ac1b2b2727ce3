"""Figures written next to the CSV outputs.

Plots go through matplotlib's Agg backend. Contact sheets are assembled
pixel-for-pixel with Pillow so they are byte-stable across runs.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from .diffusion import to_uint8  # noqa: E402

# no version/date text in the files, so identical figures are identical bytes
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def read_loss_csv(path) -> dict[str, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], np.array(rows[1:], dtype=np.float64).reshape(-1, len(rows[0]))
    return {name: body[:, i] for i, name in enumerate(header)}


def smooth(values: np.ndarray, window: int = 50) -> np.ndarray:
    """Trailing moving average; the first entries average what is available."""
    values = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(values)])
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def loss_curves(curves: Mapping[str, Mapping[str, np.ndarray]], path, window: int = 50) -> Path:
    """One panel per loss column, one line per run label."""
    cols = ["L_total", "L_o", "L_p", "L_iso", "L_dec", "cos_raw"]
    fig, axes = plt.subplots(2, 3, figsize=(12, 6.5), sharex=True)
    for ax, col in zip(axes.flat, cols):
        for label, data in curves.items():
            ax.plot(data["step"], smooth(data[col], window), label=label, lw=1.2)
        ax.set_title(col)
        ax.grid(alpha=0.3)
    for ax in axes[1]:
        ax.set_xlabel("step")
    axes.flat[0].legend(fontsize=7)
    fig.suptitle(f"training losses (moving average, window {window})")
    fig.tight_layout()
    return _save(fig, path)


def attention_heatmaps(maps: Sequence[np.ndarray], positions: Mapping[str, int], grid: int,
                       path, csv_path=None) -> Path:
    """Per-block token grids for selected text positions.

    ``maps`` holds one (image tokens, text tokens) array per block, already
    averaged over samples and steps.
    """
    labels = list(positions)
    fig, axes = plt.subplots(len(maps), len(labels), figsize=(2.6 * len(labels), 2.4 * len(maps)),
                             squeeze=False)
    rows = []
    for b, m in enumerate(maps):
        for j, label in enumerate(labels):
            g = np.asarray(m)[:, positions[label]].reshape(grid, grid)
            ax = axes[b, j]
            im = ax.imshow(g, cmap="magma", vmin=0.0)
            ax.set_title(f"block {b}: {label}", fontsize=9)
            ax.set_xticks([])
            ax.set_yticks([])
            fig.colorbar(im, ax=ax, fraction=0.046)
            rows.extend([b, label, r, c, repr(float(g[r, c]))]
                        for r in range(grid) for c in range(grid))
    fig.tight_layout()
    if csv_path is not None:
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["block", "token", "row", "col", "weight"])
            w.writerows(rows)
    return _save(fig, path)


def sweep_heatmap(cells, path) -> Path:
    """Mean Proxy-V-O over the (lambda_iso, lambda_dec) grid."""
    isos = sorted({c.lambda_iso for c in cells})
    decs = sorted({c.lambda_dec for c in cells})
    surf = np.full((len(isos), len(decs)), np.nan)
    for c in cells:
        surf[isos.index(c.lambda_iso), decs.index(c.lambda_dec)] = c.mean
    fig, ax = plt.subplots(figsize=(5, 4.2))
    im = ax.imshow(surf, cmap="viridis", origin="lower")
    ax.set_xticks(range(len(decs)), [f"{d:g}" for d in decs])
    ax.set_yticks(range(len(isos)), [f"{i:g}" for i in isos])
    ax.set_xlabel("lambda_dec")
    ax.set_ylabel("lambda_iso")
    for i in range(len(isos)):
        for j in range(len(decs)):
            ax.text(j, i, f"{surf[i, j]:.3f}", ha="center", va="center", color="w", fontsize=8)
    fig.colorbar(im, ax=ax, label="mean Proxy-V-O")
    fig.tight_layout()
    return _save(fig, path)


def ablation_plot(rows, path) -> Path:
    names = [r.name for r in rows]
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(6, 4))
    for k, (key, label) in enumerate((("proxy_v", "Proxy-V"), ("proxy_vo", "Proxy-V-O"))):
        stats = [r.stats(key) for r in rows]
        ax.bar(x + (k - 0.5) * 0.38, [s[0] for s in stats], 0.38,
               yerr=[s[1] for s in stats], capsize=4, label=label)
    ax.set_xticks(x, names)
    ax.set_ylabel("score (mean +- std over seeds)")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def contact_sheet(images: np.ndarray, path, labels: Sequence[str] | None = None,
                  highlight: int | None = None, cols: int = 5, zoom: int = 4) -> Path:
    """Grid of images upscaled by ``zoom``; the highlighted tile gets a white frame.

    ``labels`` are not drawn (the sheet stays font-free); they go into a sidecar
    text file, one line per tile.
    """
    images = np.asarray(images)
    n, h, w = images.shape
    rows = -(-n // cols)
    pad = 2
    sheet = np.zeros((rows * (h * zoom + 2 * pad), cols * (w * zoom + 2 * pad)), dtype=np.uint8)
    sheet[:] = 64
    tiles = to_uint8(images)
    for i in range(n):
        r, c = divmod(i, cols)
        y0, x0 = r * (h * zoom + 2 * pad), c * (w * zoom + 2 * pad)
        if i == highlight:
            sheet[y0:y0 + h * zoom + 2 * pad, x0:x0 + w * zoom + 2 * pad] = 255
        tile = np.kron(tiles[i], np.ones((zoom, zoom), dtype=np.uint8))
        sheet[y0 + pad:y0 + pad + h * zoom, x0 + pad:x0 + pad + w * zoom] = tile
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet, mode="L").save(path, format="PNG")
    if labels is not None:
        path.with_suffix(".txt").write_text("\n".join(labels) + "\n", encoding="utf-8")
    return path


def save_images(images: np.ndarray, out_dir, stem: str = "sample") -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(to_uint8(images)):
        p = out_dir / f"{stem}_{i:03d}.png"
        Image.fromarray(img, mode="L").save(p, format="PNG")
        paths.append(p)
    return paths
