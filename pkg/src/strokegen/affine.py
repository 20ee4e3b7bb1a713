"""Affine maps between the canonical glimpse frame and the canvas.

A layout latent (shift, scale, rotation) builds a 2x3 matrix mapping glimpse
normalized coordinates into canvas normalized coordinates:

    M = [[s cos r, -s sin r, tx],
         [s sin r,  s cos r, ty]]

The same matrix serves reading and writing: ``extract_glimpse`` samples the
canvas at M-mapped glimpse positions (read attention), and
``transform_control_points`` pushes canonical control points through M onto
the canvas (write attention), so the glimpse view and the canonical stroke
frame stay consistent.

Normalized coordinates span [-1, 1] with (-1, -1) at pixel (0, 0).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

SCALE_MIN_DEFAULT = 0.2
ROT_MAX_DEFAULT = np.pi / 4


@dataclass
class LayoutLatent:
    """Shift in [-1,1]^2, scale in [s_min, 1], rotation in [-pi/4, pi/4].

    ``from_sample`` projects raw Gaussian samples into the declared ranges;
    density evaluation always happens on the raw sample, the projected values
    only drive geometry.
    """

    shift_x: Union[Tensor, float]
    shift_y: Union[Tensor, float]
    scale: Union[Tensor, float]
    rotation: Union[Tensor, float]

    @classmethod
    def from_sample(cls, sample: Tensor, scale_min: float = SCALE_MIN_DEFAULT, rot_max: float = ROT_MAX_DEFAULT):
        """Build from a (..., 4) sample (shift_x, shift_y, scale, rotation)."""
        return cls(
            shift_x=T.clamp(sample[..., 0], -1.0, 1.0),
            shift_y=T.clamp(sample[..., 1], -1.0, 1.0),
            scale=T.clamp(sample[..., 2], scale_min, 1.0),
            rotation=T.clamp(sample[..., 3], -rot_max, rot_max),
        )

    def stacked(self) -> Tensor:
        return T.stack(
            [T.as_tensor(self.shift_x), T.as_tensor(self.shift_y), T.as_tensor(self.scale), T.as_tensor(self.rotation)],
            axis=-1,
        )


def layout_to_matrix(layout: LayoutLatent) -> Tensor:
    """(..., 2, 3) affine matrix from a layout latent; differentiable."""
    s = T.as_tensor(layout.scale)
    r = T.as_tensor(layout.rotation)
    tx = T.as_tensor(layout.shift_x)
    ty = T.as_tensor(layout.shift_y)
    cr, sr = T.cos(r), T.sin(r)
    row0 = T.stack([s * cr, -1.0 * s * sr, tx], axis=-1)
    row1 = T.stack([s * sr, s * cr, ty], axis=-1)
    return T.stack([row0, row1], axis=-2)


def invert_affine(m: np.ndarray) -> np.ndarray:
    """Inverse of a 2x3 affine map (numpy, non-differentiable helper)."""
    a = m[..., :2, :2]
    t = m[..., :2, 2]
    det = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
    if np.any(np.abs(det) < 1e-6):
        raise ValueError("affine matrix is not invertible")
    inv = np.empty_like(a)
    inv[..., 0, 0] = a[..., 1, 1] / det
    inv[..., 0, 1] = -a[..., 0, 1] / det
    inv[..., 1, 0] = -a[..., 1, 0] / det
    inv[..., 1, 1] = a[..., 0, 0] / det
    it = -np.einsum("...ij,...j->...i", inv, t)
    return np.concatenate([inv, it[..., None]], axis=-1)


def compose_affine(m1: Tensor, m2: Tensor) -> Tensor:
    """Composition m1 after m2 as 2x3 matrices: apply m2 first, then m1."""
    m1, m2 = T.as_tensor(m1), T.as_tensor(m2)
    a = T.matmul(m1[..., :2], m2[..., :2])
    t = T.matmul(m1[..., :2], m2[..., 2:3]) + m1[..., 2:3]
    return T.concat([a, t], axis=-1)


def apply_affine(m: Tensor, points: Tensor) -> Tensor:
    """Apply a (..., 2, 3) map to (..., P, 2) points in normalized coordinates."""
    m, points = T.as_tensor(m), T.as_tensor(points)
    rot = T.matmul(points, T.transpose(m[..., :2], _swap_last_two(m.ndim)))
    return rot + T.reshape(m[..., 2], m.shape[:-2] + (1, 2))


def _swap_last_two(ndim: int):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def glimpse_grid(matrix: Tensor, glimpse: int) -> Tensor:
    """(..., g, g, 2) canvas-normalized sampling grid for a glimpse."""
    lin = np.linspace(-1.0, 1.0, glimpse, dtype=T.as_tensor(matrix).dtype)
    gx, gy = np.meshgrid(lin, lin)  # gy varies along rows
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=-1)  # (g*g, 2)
    mapped = apply_affine(matrix, Tensor(pts))
    return T.reshape(mapped, matrix.shape[:-2] + (glimpse, glimpse, 2))


def extract_glimpse(img, matrix: Tensor, glimpse: int) -> Tensor:
    """Bilinear crop of ``img`` (N, H, W) at the M-mapped glimpse grid.

    Zero outside the source image; differentiable w.r.t. image and matrix.
    """
    if glimpse < 2:
        raise ValueError("glimpse size must be at least 2")
    img = T.as_tensor(img)
    if img.ndim == 2:
        img = T.reshape(img, (1,) + img.shape)
    n = img.shape[0]
    grid = glimpse_grid(matrix, glimpse)
    if grid.ndim == 3:  # unbatched matrix: share across the batch
        grid = T.reshape(grid, (1, glimpse, glimpse, 2))
        grid = T.concat([grid] * n, axis=0) if n > 1 else grid
    img4 = T.reshape(img, (n, 1, img.shape[1], img.shape[2]))
    out = T.bilinear_sample(img4, grid)
    return T.reshape(out, (n, glimpse, glimpse))


def to_pixels(points: Tensor, height: int, width: int) -> Tensor:
    """Map normalized (..., P, 2) coordinates onto the pixel grid."""
    points = T.as_tensor(points)
    scale = Tensor(np.array([(width - 1) / 2.0, (height - 1) / 2.0], dtype=points.dtype))
    return (points + 1.0) * scale


def transform_control_points(cp: Tensor, matrix: Tensor, height: int = 50, width: int = 50) -> Tensor:
    """Canonical control points -> canvas pixel coordinates through M."""
    return to_pixels(apply_affine(matrix, cp), height, width)
