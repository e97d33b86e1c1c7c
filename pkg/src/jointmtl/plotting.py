"""2-D PCA projection of embeddings and a static SVG scatter plot."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .exceptions import InputError, JointMTLError, MetricError
from .metrics import silhouette

__all__ = ["PlotError", "pca_power", "read_embeddings", "scatter_svg", "plot_embeddings"]

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


class PlotError(JointMTLError):
    pass


def pca_power(x, n_components: int = 2, iters: int = 1000, tol: float = 1e-12):
    """Top principal axes by power iteration with deflation.

    The start vector is fixed, so results are reproducible bit for bit.
    Each axis is signed so its largest-magnitude entry is positive. Returns
    ``(projection (n, k), axes (k, d))``; axes of a zero-variance direction
    are zero.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(len(x), 1)
    d = cov.shape[0]
    axes = np.zeros((n_components, d))
    for c in range(min(n_components, d)):
        v = np.cos(np.arange(1, d + 1) * (c + 1.0))
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = cov @ v
            norm = np.linalg.norm(w)
            if norm <= 1e-300:
                v = np.zeros(d)
                break
            w /= norm
            done = np.linalg.norm(w - v) < tol
            v, lam = w, norm
            if done:
                break
        if not v.any() or lam <= 1e-12 * max(np.trace(cov), 1e-300):
            continue
        v = v * np.sign(v[np.argmax(np.abs(v))])
        axes[c] = v
        cov = cov - lam * np.outer(v, v)
    return xc @ axes.T, axes


def read_embeddings(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Read a ``patient,label,e0..`` CSV."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    if not rows or rows[0][:2] != ["patient", "label"]:
        raise InputError(f"{path}: expected a header starting with patient,label")
    patients, labels, vecs = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        try:
            labels.append(int(row[1]))
            vecs.append([float(v) for v in row[2:]])
        except (ValueError, IndexError) as exc:
            raise InputError(f"{path}:{lineno}: {exc}") from exc
        patients.append(row[0])
    width = {len(v) for v in vecs}
    if len(width) > 1:
        raise InputError(f"{path}: rows have differing widths {sorted(width)}")
    return patients, np.array(labels), np.array(vecs, dtype=np.float64).reshape(len(vecs), -1)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def scatter_svg(points: np.ndarray, labels, title: str = "", width: int = 480, height: int = 420) -> str:
    """Deterministic SVG scatter; one color per label."""
    pad, top = 40, 50
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    sx = pad + (pts[:, 0] - lo[0]) / span[0] * (width - 2 * pad)
    sy = height - pad - (pts[:, 1] - lo[1]) / span[1] * (height - pad - top)
    classes = sorted(set(np.asarray(labels).tolist()))
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{pad}" y="24" font-family="sans-serif" font-size="14">{title}</text>',
        f'<rect x="{pad}" y="{top}" width="{width - 2 * pad}" height="{height - pad - top}" fill="none" stroke="#888"/>',
    ]
    for k, cls in enumerate(classes):
        color = COLORS[k % len(COLORS)]
        out.append(f'<text x="{width - pad - 60}" y="{top - 8 - 14 * (len(classes) - 1 - k)}" font-family="sans-serif" font-size="11" fill="{color}">label {cls}</text>')
    for x, y, lab in zip(sx, sy, labels):
        color = COLORS[classes.index(lab) % len(COLORS)]
        out.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="3" fill="{color}" fill-opacity="0.75"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_embeddings(embeddings, labels, path=None) -> tuple[str, float | None]:
    """Project to 2-D, annotate the silhouette of the projection, render SVG.

    Returns ``(svg, silhouette)``; the silhouette is None for one label.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels).reshape(-1).tolist()
    if x.ndim != 2 or len(x) < 3:
        raise PlotError(f"need at least 3 embeddings to plot, got {len(x)}")
    if len(labels) != len(x):
        raise PlotError(f"{len(x)} embeddings but {len(labels)} labels")
    proj, _ = pca_power(x, 2)
    try:
        ss = silhouette(proj, labels)
    except MetricError:
        ss = None
    title = f"PCA of {len(x)} embeddings, silhouette = {'n/a' if ss is None else f'{ss:.4f}'}"
    svg = scatter_svg(proj, labels, title)
    if path is not None:
        Path(path).write_text(svg)
    return svg, ss
