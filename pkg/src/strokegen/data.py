"""Dataset ingestion and the synthetic spline corpus.

Real datasets arrive either as IDX files (the MNIST-family container,
big-endian, bit-exact parsing) or as directories of grayscale PNGs listed in
a ``path<TAB>label`` manifest. Every image is resized to 50x50 grayscale in
[0, 1] (optionally inverted) before use.

The synthetic corpus is the ground-truth oracle for the test-suite: it draws
stroke trajectories (layout + canonical control points), renders them through
the same renderer the model uses, and stores both the images and the true
latents. Rendering the stored trajectory reproduces the stored image exactly.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import affine as A
from . import renderer as R
from . import tensor as T
from .config import SyntheticConfig

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    """Malformed dataset input; message carries the failing byte offset."""


@dataclass
class ImageDataset:
    name: str
    split: str
    images: np.ndarray  # (N, H, W) floats in [0, 1]
    labels: Optional[np.ndarray] = None  # (N,) ints

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, idx) -> "ImageDataset":
        labels = self.labels[idx] if self.labels is not None else None
        return ImageDataset(self.name, self.split, self.images[idx], labels)


@dataclass
class StrokeRecord:
    """Ground-truth latents for one stroke of a synthetic image."""

    layout: np.ndarray  # (4,) shift_x, shift_y, scale, rotation
    cp: np.ndarray  # (J, 2) canonical control points
    sigma: float
    s_slope: float
    label: int = -1  # template index, -1 for free strokes


@dataclass
class Trajectory:
    strokes: List[StrokeRecord]
    g_slope: float

    def count(self) -> int:
        return len(self.strokes)


# -- IDX container ---------------------------------------------------------------


def load_idx(path) -> np.ndarray:
    """Parse an IDX file; images (N, H, W) uint8 or labels (N,) uint8."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 8:
        raise DataFormatError(f"{path}: truncated header at offset {len(data)}")
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise DataFormatError(f"{path}: truncated image header at offset {len(data)}")
        n, rows, cols = struct.unpack_from(">III", data, 4)
        expected = 16 + n * rows * cols
        if len(data) < expected:
            raise DataFormatError(f"{path}: truncated image payload at offset {len(data)} (need {expected})")
        return np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols).copy()
    if magic == IDX_LABELS_MAGIC:
        (n,) = struct.unpack_from(">I", data, 4)
        expected = 8 + n
        if len(data) < expected:
            raise DataFormatError(f"{path}: truncated label payload at offset {len(data)} (need {expected})")
        return np.frombuffer(data, dtype=np.uint8, count=n, offset=8).copy()
    raise DataFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0")


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


# -- preprocessing -----------------------------------------------------------------


def _resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    h, w = img.shape
    if (h, w) == (size, size):
        return img.astype(np.float64)
    ys = np.linspace(0, h - 1, size)
    xs = np.linspace(0, w - 1, size)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    img = img.astype(np.float64)
    top = img[np.ix_(y0, x0)] * (1 - fx) + img[np.ix_(y0, x1)] * fx
    bot = img[np.ix_(y1, x0)] * (1 - fx) + img[np.ix_(y1, x1)] * fx
    return top * (1 - fy) + bot * fy


def preprocess(raw: np.ndarray, size: int = 50, invert: bool = False) -> np.ndarray:
    """uint8 image -> bilinear-resized float image in [0, 1], optional inversion."""
    img = _resize_bilinear(np.asarray(raw, dtype=np.float64), size) / 255.0
    if invert:
        img = 1.0 - img
    return np.clip(img, 0.0, 1.0).astype(T.default_dtype())


def load_idx_dataset(images_path, labels_path=None, name="idx", split="train", size=50, invert=False) -> ImageDataset:
    raw = load_idx(images_path)
    if raw.ndim != 3:
        raise DataFormatError(f"{images_path}: expected an image file, found labels")
    images = np.stack([preprocess(img, size=size, invert=invert) for img in raw])
    labels = None
    if labels_path:
        labels = load_idx(labels_path).astype(np.int64)
        if len(labels) != len(images):
            raise DataFormatError(f"{labels_path}: {len(labels)} labels for {len(images)} images")
    ds = ImageDataset(name, split, images, labels)
    if name.lower() in ("mnist", "kmnist") and len(ds) not in (60_000, 10_000):
        import logging

        logging.getLogger(__name__).warning("%s %s split has %d items (expected 60k/10k)", name, split, len(ds))
    return ds


# -- manifest (PNG directories) -------------------------------------------------------


def load_manifest(path, size=50, invert=False, name="png", split="train") -> ImageDataset:
    """Newline-separated ``path<TAB>label`` records; paths relative to the manifest."""
    root = os.path.dirname(os.path.abspath(path))
    images, labels = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataFormatError(f"{path}:{lineno}: expected path<TAB>label")
            rel, _, label = line.partition("\t")
            img = R.read_png(os.path.join(root, rel))
            img = preprocess(np.round(img * 255).astype(np.uint8), size=size, invert=invert)
            images.append(img)
            labels.append(int(label))
    if not images:
        raise DataFormatError(f"{path}: empty manifest")
    return ImageDataset(name, split, np.stack(images), np.asarray(labels, dtype=np.int64))


def write_manifest(path, records: Sequence[Tuple[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rel, label in records:
            fh.write(f"{rel}\t{label}\n")


# -- synthetic corpus ------------------------------------------------------------------


def _smooth_control_points(rng: np.random.Generator, j: int, span: float) -> np.ndarray:
    """Random control polygon with bounded steps, giving pen-like curves."""
    pts = np.zeros((j, 2))
    pts[0] = rng.uniform(-span, span, size=2)
    for i in range(1, j):
        step = rng.uniform(-0.9 * span, 0.9 * span, size=2)
        pts[i] = np.clip(pts[i - 1] + step, -span, span)
    return pts


def make_templates(rng: np.random.Generator, n_templates: int, j: int, span: float) -> np.ndarray:
    """Well-separated canonical stroke shapes used as planted cluster types."""
    templates = []
    for _ in range(n_templates):
        for _ in range(200):
            cand = _smooth_control_points(rng, j, span)
            if all(np.linalg.norm(cand - t) > 1.2 * span for t in templates):
                templates.append(cand)
                break
        else:
            templates.append(_smooth_control_points(rng, j, span))
    return np.stack(templates)


def sample_trajectory(spec: SyntheticConfig, rng: np.random.Generator, j: int, templates: Optional[np.ndarray]) -> Trajectory:
    count = int(rng.choice(np.asarray(spec.stroke_counts)))
    strokes = []
    for _ in range(count):
        if templates is not None:
            label = int(rng.integers(len(templates)))
            cp = templates[label] + rng.normal(scale=spec.template_jitter, size=(j, 2))
        else:
            label = -1
            cp = _smooth_control_points(rng, j, spec.cp_span)
        layout = np.array(
            [
                rng.uniform(-spec.shift_span, spec.shift_span),
                rng.uniform(-spec.shift_span, spec.shift_span),
                rng.uniform(spec.scale_lo, spec.scale_hi),
                rng.uniform(-spec.rotation_span, spec.rotation_span),
            ]
        )
        strokes.append(StrokeRecord(layout=layout, cp=cp, sigma=spec.sigma, s_slope=spec.stroke_slope, label=label))
    return Trajectory(strokes=strokes, g_slope=spec.canvas_slope)


def render_trajectory(traj: Trajectory, size: int = 50, curve_samples: int = 100) -> np.ndarray:
    """Render ground-truth latents through the model's own renderer."""
    with T.no_grad():
        total = T.zeros((size, size))
        for s in traj.strokes:
            lat = A.LayoutLatent.from_sample(T.Tensor(s.layout.reshape(1, 4)))
            matrix = A.layout_to_matrix(lat)
            cp_px = A.transform_control_points(T.Tensor(s.cp[None]), matrix, size, size)
            stroke = R.render_stroke(
                cp_px, R.RenderParams(s.sigma, s.s_slope, traj.g_slope), n_samples=curve_samples, height=size, width=size
            )
            total = total + stroke[0]
        canvas = R.normalize_canvas(total, traj.g_slope)
    return canvas.data.astype(T.default_dtype())


def make_synthetic(spec: SyntheticConfig, size: int = 50, control_points: int = 5, curve_samples: int = 100):
    """Deterministic synthetic dataset plus its ground-truth trajectories.

    Labels are the planted template index of the first stroke when templates
    are in play (classification corpora), else the stroke count.
    """
    rng = np.random.default_rng(spec.seed)
    templates = None
    if spec.n_templates > 0:
        templates = make_templates(rng, spec.n_templates, control_points, spec.cp_span)
    images, trajectories, labels = [], [], []
    for _ in range(spec.n_images):
        traj = sample_trajectory(spec, rng, control_points, templates)
        images.append(render_trajectory(traj, size=size, curve_samples=curve_samples))
        trajectories.append(traj)
        labels.append(traj.strokes[0].label if (templates is not None and traj.strokes) else traj.count())
    ds = ImageDataset("synthetic", "train", np.stack(images), np.asarray(labels, dtype=np.int64))
    return ds, trajectories, templates


def save_synthetic(out_dir, ds: ImageDataset, trajectories: List[Trajectory]) -> None:
    """Images plus flattened ragged trajectories in a single .npz."""
    os.makedirs(out_dir, exist_ok=True)
    counts = np.array([t.count() for t in trajectories], dtype=np.int64)
    layouts = np.concatenate([[s.layout for s in t.strokes] for t in trajectories if t.strokes]) if counts.sum() else np.zeros((0, 4))
    cps = np.concatenate([[s.cp for s in t.strokes] for t in trajectories if t.strokes]) if counts.sum() else np.zeros((0, 0, 2))
    sigmas = np.array([s.sigma for t in trajectories for s in t.strokes])
    slopes = np.array([s.s_slope for t in trajectories for s in t.strokes])
    stroke_labels = np.array([s.label for t in trajectories for s in t.strokes], dtype=np.int64)
    g = np.array([t.g_slope for t in trajectories])
    np.savez(
        os.path.join(out_dir, "synthetic.npz"),
        images=ds.images,
        labels=ds.labels,
        counts=counts,
        layouts=layouts,
        cps=cps,
        sigmas=sigmas,
        slopes=slopes,
        stroke_labels=stroke_labels,
        g_slopes=g,
    )


def load_synthetic(path) -> Tuple[ImageDataset, List[Trajectory]]:
    blob = np.load(path)
    ds = ImageDataset("synthetic", "train", blob["images"].astype(T.default_dtype()), blob["labels"])
    trajectories = []
    offset = 0
    for i, count in enumerate(blob["counts"]):
        strokes = []
        for k in range(count):
            strokes.append(
                StrokeRecord(
                    layout=blob["layouts"][offset + k],
                    cp=blob["cps"][offset + k],
                    sigma=float(blob["sigmas"][offset + k]),
                    s_slope=float(blob["slopes"][offset + k]),
                    label=int(blob["stroke_labels"][offset + k]),
                )
            )
        offset += count
        trajectories.append(Trajectory(strokes=strokes, g_slope=float(blob["g_slopes"][i])))
    return ds, trajectories
