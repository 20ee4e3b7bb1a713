"""Quantitative evaluation: importance-weighted likelihood bounds, stroke
statistics, and clustering of inferred stroke representations."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .generative import Generator
from .recognition import Recognizer


class EvaluationError(RuntimeError):
    pass


def log_weights(gen: Generator, rec: Recognizer, x_tiled: np.ndarray, rng: np.random.Generator, t_max=None) -> np.ndarray:
    """Unnormalized importance log-weights log p(x, z) - log q(z | x), one per row."""
    result = rec.infer(x_tiled, rng, t_max=t_max)
    recon = gen.image_likelihood(result.recon, result.x).data
    gap = np.zeros_like(recon)
    for s in result.steps:
        gap += (s.log_p_o.data - s.log_q_o.data) + (s.log_p_l.data - s.log_q_l.data) + (s.log_p_s.data - s.log_q_s.data)
    return recon + gap


def iwae_from_logweights(logw: np.ndarray) -> float:
    """log (1/K sum exp(logw)), log-sum-exp stabilized."""
    logw = np.asarray(logw, dtype=np.float64)
    m = logw.max()
    return float(m + np.log(np.exp(logw - m).mean()))


def iwae(
    gen: Generator,
    rec: Recognizer,
    images: np.ndarray,
    k: int,
    rng: np.random.Generator,
    t_max=None,
    sample_batch: int = 64,
) -> np.ndarray:
    """Per-image IWAE bound with k posterior samples (k >= 1)."""
    if k < 1:
        raise ValueError("iwae needs k >= 1")
    out = np.zeros(len(images))
    with T.no_grad():
        for i, img in enumerate(images):
            logw = []
            remaining = k
            while remaining > 0:
                reps = min(sample_batch, remaining)
                tiled = np.repeat(img[None], reps, axis=0)
                logw.append(log_weights(gen, rec, tiled, rng, t_max=t_max))
                remaining -= reps
            out[i] = iwae_from_logweights(np.concatenate(logw))
    return out


@dataclass
class CrossTable:
    sources: List[str]
    targets: List[str]
    means: np.ndarray  # (S, T)
    stds: np.ndarray
    missing: np.ndarray  # bool mask


def cross_dataset_table(
    models: Dict[str, Optional[Tuple[Generator, Recognizer]]],
    datasets: Dict[str, np.ndarray],
    k: int,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    n_images: int = 32,
) -> CrossTable:
    """Mean +- std IWAE per (source model, target dataset) cell over eval seeds.

    Rows are sources (models), columns targets; missing checkpoints give
    masked cells.
    """
    sources = list(models)
    targets = list(datasets)
    means = np.full((len(sources), len(targets)), np.nan)
    stds = np.full_like(means, np.nan)
    missing = np.zeros(means.shape, dtype=bool)
    for i, src in enumerate(sources):
        pair = models[src]
        if pair is None:
            missing[i, :] = True
            continue
        gen, rec = pair
        for j, tgt in enumerate(targets):
            images = datasets[tgt][:n_images]
            per_seed = []
            for seed in seeds:
                vals = iwae(gen, rec, images, k, np.random.default_rng(seed))
                per_seed.append(vals.mean())
            means[i, j] = float(np.mean(per_seed))
            stds[i, j] = float(np.std(per_seed))
    return CrossTable(sources=sources, targets=targets, means=means, stds=stds, missing=missing)


def write_table_csv(table: CrossTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source"] + list(table.targets))
        for i, src in enumerate(table.sources):
            row = [src]
            for j in range(len(table.targets)):
                row.append("absent" if table.missing[i, j] else f"{table.means[i, j]:.4f}+-{table.stds[i, j]:.4f}")
            writer.writerow(row)


def write_table_heatmap(table: CrossTable, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(1.2 * len(table.targets) + 2, 1.0 * len(table.sources) + 2))
    data = np.ma.masked_invalid(table.means)
    im = ax.imshow(data, cmap="viridis")
    ax.set_xticks(range(len(table.targets)), table.targets, rotation=30)
    ax.set_yticks(range(len(table.sources)), table.sources)
    ax.set_xlabel("target dataset")
    ax.set_ylabel("source model")
    for i in range(len(table.sources)):
        for j in range(len(table.targets)):
            text = "absent" if table.missing[i, j] else f"{table.means[i, j]:.1f}"
            ax.text(j, i, text, ha="center", va="center", color="white", fontsize=8)
    fig.colorbar(im, ax=ax, label="IWAE")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def stroke_histogram(rec: Recognizer, images: np.ndarray, rng: np.random.Generator, t_max=None, batch: int = 64) -> np.ndarray:
    """Histogram of posterior stroke counts; index c = number of images using c strokes."""
    t_max = t_max or rec.cfg.model.t_max
    counts = np.zeros(t_max + 1, dtype=np.int64)
    with T.no_grad():
        for start in range(0, len(images), batch):
            chunk = images[start : start + batch]
            result = rec.infer(chunk, rng, t_max=t_max)
            used = result.stroke_counts().astype(np.int64)
            for u in used:
                counts[u] += 1
    return counts


def infer_stroke_vectors(rec: Recognizer, images: np.ndarray, rng: np.random.Generator, t_max=None, batch: int = 64):
    """Flattened canonical control points of every present stroke.

    Returns (vectors (M, 2J), image_index (M,), step_index (M,)).
    """
    vecs, img_idx, step_idx = [], [], []
    with T.no_grad():
        for start in range(0, len(images), batch):
            chunk = images[start : start + batch]
            result = rec.infer(chunk, rng, t_max=t_max)
            for t, s in enumerate(result.steps):
                present = (s.alive_prev * s.latents.o) > 0
                if present.any():
                    cp = s.latents.cp.data[present].reshape(present.sum(), -1)
                    vecs.append(cp)
                    img_idx.extend((start + np.nonzero(present)[0]).tolist())
                    step_idx.extend([t] * int(present.sum()))
    if not vecs:
        return np.zeros((0, 2 * rec.gen.J)), np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(vecs), np.asarray(img_idx), np.asarray(step_idx)


# -- k-means and silhouette ---------------------------------------------------------


def _kmeans_once(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 100):
    n = len(points)
    # k-means++ seeding
    centers = [points[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min([((points - c) ** 2).sum(-1) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(points[rng.integers(n)])
            continue
        centers.append(points[rng.choice(n, p=d2 / total)])
    centers = np.stack(centers)
    assign = np.zeros(n, dtype=int)
    for it in range(iters):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        new_assign = d2.argmin(1)
        if it > 0 and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            mask = assign == c
            if mask.any():
                centers[c] = points[mask].mean(0)
            else:
                centers[c] = points[rng.integers(n)]
    inertia = float(((points - centers[assign]) ** 2).sum())
    return centers, assign, inertia


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, restarts: int = 50):
    """k-means with k-means++ init and restarts; returns the lowest-inertia run."""
    if len(points) < k:
        raise EvaluationError(f"need at least k={k} points, got {len(points)}")
    best = None
    for _ in range(restarts):
        centers, assign, inertia = _kmeans_once(points, k, rng)
        if best is None or inertia < best[2]:
            best = (centers, assign, inertia)
    return best


def silhouette_score(points: np.ndarray, assign: np.ndarray) -> float:
    """Mean silhouette over all points; raises on degenerate clusterings."""
    n = len(points)
    labels = np.unique(assign)
    if len(labels) < 2:
        raise EvaluationError("silhouette undefined: fewer than two clusters")
    d = np.sqrt(np.maximum(((points[:, None, :] - points[None]) ** 2).sum(-1), 0.0))
    if d.max() == 0:
        raise EvaluationError("silhouette undefined: all points identical")
    scores = np.zeros(n)
    for i in range(n):
        own = assign == assign[i]
        own_others = own.copy()
        own_others[i] = False
        if not own_others.any():
            scores[i] = 0.0
            continue
        a = d[i][own_others].mean()
        b = min(d[i][assign == lab].mean() for lab in labels if lab != assign[i])
        scores[i] = 0.0 if max(a, b) == 0 else (b - a) / max(a, b)
    value = float(scores.mean())
    if not -1.0 <= value <= 1.0:
        raise EvaluationError(f"silhouette out of range: {value}")
    return value


def cluster_purity(assign: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of points whose cluster's majority label matches their own."""
    total = 0
    for c in np.unique(assign):
        mask = assign == c
        values, counts = np.unique(labels[mask], return_counts=True)
        total += counts.max()
    return total / len(assign)


@dataclass
class ClusterResult:
    assignments: np.ndarray
    silhouette: float
    vectors: np.ndarray
    image_index: np.ndarray
    step_index: np.ndarray


def cluster_strokes(
    rec: Recognizer,
    images: np.ndarray,
    k: int = 8,
    rng: Optional[np.random.Generator] = None,
    t_max=None,
    restarts: int = 50,
    seed: int = 0,
) -> ClusterResult:
    """k-means over flattened control points of present strokes + mean silhouette."""
    rng = rng or np.random.default_rng(seed)
    vectors, image_index, step_index = infer_stroke_vectors(rec, images, rng, t_max=t_max)
    if len(vectors) < k:
        raise EvaluationError(f"only {len(vectors)} inferred strokes for k={k}")
    _, assign, _ = kmeans(vectors, k, np.random.default_rng(seed), restarts=restarts)
    sil = silhouette_score(vectors, assign)
    return ClusterResult(assignments=assign, silhouette=sil, vectors=vectors, image_index=image_index, step_index=step_index)


def reconstruction_grid(rec: Recognizer, images: np.ndarray, rng: np.random.Generator, t_max=None) -> np.ndarray:
    """Stacked pairs (target row, reconstruction row) as one image grid."""
    with T.no_grad():
        result = rec.infer(images, rng, t_max=t_max)
    recon = np.clip(result.recon.data, 0, 1)
    top = np.concatenate(list(images), axis=1)
    bottom = np.concatenate(list(recon), axis=1)
    return np.concatenate([top, bottom], axis=0)
