"""Two-dimensional views of summed attribution maps: flatten, PCA, exact t-SNE.

Includes a seeded k-means and the Rand index so cluster structure in the
embedding can be checked against known labels.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .tensor_core import Rng

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class EmbeddingConfig:
    pca_dims: int = 50
    perplexity: float = 30.0
    learning_rate: float = 200.0
    iterations: int = 1000
    early_exaggeration: float = 12.0
    exaggeration_iterations: int = 250
    momentum_switch: int = 250
    seed: int = 42


def min_points(perplexity: float) -> int:
    return int(math.floor(3 * perplexity)) + 1


def flatten(maps) -> np.ndarray:
    """Row-major flattening of n_layers x n_heads maps, one row per map in input order."""
    arrays = [np.asarray(getattr(m, "values", m), dtype=np.float64) for m in maps]
    if not arrays:
        return np.zeros((0, 0))
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise EmbeddingError("summed maps have heterogeneous shapes")
    return np.stack([a.reshape(-1) for a in arrays])


def unflatten(matrix, n_layers: int, n_heads: int) -> np.ndarray:
    return np.asarray(matrix).reshape(-1, n_layers, n_heads)


def pca(matrix, k: int):
    """Scores (N x k) and all covariance eigenvalues, largest first.

    Each component's sign is fixed so its largest-magnitude loading is positive.
    """
    x = np.asarray(matrix, dtype=np.float64)
    n, d = x.shape if x.ndim == 2 else (0, 0)
    if n < 2:
        raise EmbeddingError("PCA needs at least two rows")
    if not 1 <= k <= min(n - 1, d):
        raise EmbeddingError(f"k={k} exceeds the rank bound min(N-1, D) = {min(n - 1, d)}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order[:k]]
    lead = np.argmax(np.abs(comps), axis=0)
    comps = comps * np.sign(comps[lead, np.arange(k)])
    return centered @ comps, evals, comps


def _row_affinities(dist_row, target_entropy, tol=1e-5, max_iter=50):
    beta, lo, hi = 1.0, -np.inf, np.inf
    for _ in range(max_iter):
        p = np.exp(-(dist_row - dist_row.min()) * beta)
        s = p.sum()
        h = math.log(s) + beta * float(np.dot(dist_row - dist_row.min(), p)) / s
        diff = h - target_entropy
        if abs(diff) < tol:
            break
        if diff > 0:
            lo = beta
            beta = beta * 2.0 if hi == np.inf else (beta + hi) / 2.0
        else:
            hi = beta
            beta = beta / 2.0 if lo == -np.inf else (beta + lo) / 2.0
    return p / s


def joint_probabilities(x, perplexity: float) -> np.ndarray:
    """Symmetrized input affinities with per-point bandwidths matched to ``perplexity``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    sq = np.sum(x * x, axis=1)
    dist = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    cond = np.zeros((n, n))
    target = math.log(perplexity)
    for i in range(n):
        others = np.r_[0:i, i + 1:n]
        cond[i, others] = _row_affinities(dist[i, others], target)
    p = cond + cond.T
    return np.maximum(p / p.sum(), 1e-12)


def _kl_and_grad(p, y):
    sq = np.sum(y * y, axis=1)
    num = 1.0 / (1.0 + np.maximum(sq[:, None] + sq[None, :] - 2.0 * y @ y.T, 0.0))
    np.fill_diagonal(num, 0.0)
    q = np.maximum(num / num.sum(), 1e-12)
    pq = (p - q) * num
    grad = 4.0 * (np.diag(pq.sum(axis=1)) - pq) @ y
    mask = ~np.eye(len(p), dtype=bool)
    kl = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return kl, grad


def tsne(scores, config: EmbeddingConfig = EmbeddingConfig(), return_history: bool = False):
    """Exact t-SNE with early exaggeration, momentum and per-coordinate gains.

    With ``return_history`` the per-iteration KL divergence (computed with
    un-exaggerated affinities) is returned as well.
    """
    x = np.asarray(scores, dtype=np.float64)
    n = x.shape[0]
    if n < min_points(config.perplexity):
        raise EmbeddingError(f"t-SNE with perplexity {config.perplexity} needs at least "
                             f"{min_points(config.perplexity)} points, got {n}")
    if np.all(x == x[0]):
        raise EmbeddingError("all input rows are identical")
    p = joint_probabilities(x, config.perplexity)
    y = Rng(config.seed).child("tsne-init").normal((n, 2), scale=1e-4)
    update = np.zeros_like(y)
    gains = np.ones_like(y)
    history = []
    for it in range(config.iterations):
        exaggerate = it < config.exaggeration_iterations
        momentum = 0.5 if it < config.momentum_switch else 0.8
        kl, grad = _kl_and_grad(p * config.early_exaggeration if exaggerate else p, y)
        if return_history:
            history.append(kl if not exaggerate else _kl_and_grad(p, y)[0])
        same_sign = (grad > 0) == (update > 0)
        gains = np.where(same_sign, gains * 0.8, gains + 0.2)
        gains = np.maximum(gains, 0.01)
        update = momentum * update - config.learning_rate * gains * grad
        y = y + update
        y = y - y.mean(axis=0)
    if return_history:
        return y, np.array(history)
    return y


def kmeans(points, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts by inertia."""
    x = np.asarray(points, dtype=np.float64)
    rng = Rng(seed)
    best_labels, best_inertia = None, np.inf
    for run in range(n_init):
        r = rng.child(run)
        centers = [x[int(r.integers(0, len(x)))]]
        for _ in range(1, k):
            d2 = np.min(((x[:, None, :] - np.array(centers)[None]) ** 2).sum(-1), axis=1)
            probs = d2 / d2.sum() if d2.sum() > 0 else np.full(len(x), 1 / len(x))
            centers.append(x[int(r.choice(len(x), p=probs))])
        centers = np.array(centers)
        labels = None
        for _ in range(max_iter):
            d2 = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
            new = d2.argmin(axis=1)
            if labels is not None and np.array_equal(new, labels):
                break
            labels = new
            for j in range(k):
                if (labels == j).any():
                    centers[j] = x[labels == j].mean(axis=0)
        inertia = float(((x - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_labels, best_inertia = labels, inertia
    return best_labels


def rand_index(a, b) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    n = len(a)
    if n < 2:
        return 1.0
    same_a = a[:, None] == a[None, :]
    same_b = b[:, None] == b[None, :]
    iu = np.triu_indices(n, 1)
    return float(np.mean(same_a[iu] == same_b[iu]))


def scatter_csv(points, labels, ids) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["protein_id", "class", "x", "y"])
    for pid, lab, (px, py) in zip(ids, labels, np.asarray(points, dtype=np.float64)):
        w.writerow([pid, lab, repr(float(px)), repr(float(py))])
    return buf.getvalue()


def scatter_svg(points, labels, size: int = 600, margin: int = 40) -> str:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    classes = sorted({str(l) for l in labels})
    color = {c: PALETTE[i % len(PALETTE)] for i, c in enumerate(classes)}
    lo = pts.min(axis=0) if len(pts) else np.zeros(2)
    span = (pts.max(axis=0) - lo) if len(pts) else np.ones(2)
    span = np.where(span > 0, span, 1.0)
    inner = size - 2 * margin
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 20 * len(classes)}">',
           f'<rect width="100%" height="100%" fill="white"/>']
    for (px, py), lab in zip(pts, labels):
        cx = margin + (px - lo[0]) / span[0] * inner
        cy = margin + (1.0 - (py - lo[1]) / span[1]) * inner
        out.append(f'<circle cx="{cx:.3f}" cy="{cy:.3f}" r="4" fill="{color[str(lab)]}"/>')
    for i, c in enumerate(classes):
        y0 = size + 20 * i
        out.append(f'<rect x="{margin}" y="{y0}" width="10" height="10" fill="{color[c]}"/>')
        out.append(f'<text x="{margin + 16}" y="{y0 + 10}" font-size="12">{escape(c)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_scatter(points, labels, ids, directory) -> tuple[Path, Path]:
    if not (len(points) == len(labels) == len(ids)):
        raise EmbeddingError("points, labels and ids differ in length")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    csv_path, svg_path = d / "scatter.csv", d / "scatter.svg"
    csv_path.write_text(scatter_csv(points, labels, ids), encoding="utf-8", newline="\n")
    svg_path.write_text(scatter_svg(points, labels), encoding="utf-8", newline="\n")
    return csv_path, svg_path


def embed_maps(matrix, config: EmbeddingConfig = EmbeddingConfig()):
    """PCA to ``pca_dims`` followed by t-SNE; returns (points, eigenvalues)."""
    scores, evals, _ = pca(matrix, config.pca_dims)
    return tsne(scores, config), evals


def synthetic_summed_maps(n: int, n_classes: int, n_layers: int, n_heads: int, seed: int = 0,
                          hot_cells: int = 24, signal: float = 2.0):
    """Class-structured summed maps: each class raises its own random set of heads.

    Returns (maps, labels) with labels ``class0``, ``class1``, ... assigned
    round-robin, so class sizes differ by at most one.
    """
    from .attribution import SummedMap
    rng = Rng(seed)
    cells = n_layers * n_heads
    patterns = np.zeros((n_classes, cells))
    for c in range(n_classes):
        patterns[c, rng.child(f"pattern{c}").permutation(cells)[:hot_cells]] = signal
    noise = rng.child("noise").normal((n, cells))
    width = len(str(max(n - 1, 0)))
    maps, labels = [], []
    for i in range(n):
        c = i % n_classes
        values = (patterns[c] + noise[i]).reshape(n_layers, n_heads)
        maps.append(SummedMap(values, f"map{i:0{width}d}", c))
        labels.append(f"class{c}")
    return maps, labels
