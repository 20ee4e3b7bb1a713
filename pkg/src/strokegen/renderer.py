"""Differentiable Bezier stroke rasterizer and canvas compositor.

A stroke is a degree-(J-1) Bezier curve given by J control points. Rendering
proceeds in three differentiable stages:

1. ``bezier_points``: sample S points along the curve via the Bernstein form
   b_n = sum_j C(J-1, j) (1-n)^(J-1-j) n^j p_j  for n evenly spaced in [0, 1].
2. ``rasterize``: deposit a Gaussian kernel at every sample,
   raw[h, w] = sum_n exp(-((w - b_{n,x})^2 + (h - b_{n,y})^2) / sigma^2),
   so sigma controls the blur of the stroke.
3. ``normalize_stroke``: max-normalize then squash with a parametrized tanh,
   out = tanh((raw / max(raw)) / s_slope), keeping pixels in [0, 1).

Strokes are combined by ``normalize_canvas``: canvas = tanh(sum_t stroke_t / g).

Coordinates are (x, y) with x along image width; pixel (0, 0) is the top-left
corner. Rasterization happens on the full canvas after control points have
been mapped to pixel coordinates (see ``affine``), not inside the glimpse.

A historical rasterization variant that multiplies squared coordinate
differences instead of applying the Gaussian kernel is kept behind
``literal_formula=True`` for debugging; it grows away from the curve and is
not usable as ink.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "RenderParams",
    "bernstein_matrix",
    "bezier_points",
    "rasterize",
    "normalize_stroke",
    "normalize_canvas",
    "render_stroke",
    "write_png",
    "read_png",
]

_MAXNORM_EPS = 1e-8


@dataclass
class RenderParams:
    """Per-stroke blur and tanh slopes; all strictly positive.

    ``sigma`` and ``s_slope`` apply per stroke, ``g_slope`` once per image.
    """

    sigma: Union[Tensor, float]
    s_slope: Union[Tensor, float]
    g_slope: Union[Tensor, float]


def bernstein_matrix(n_points: int, n_samples: int, dtype=None) -> np.ndarray:
    """(S, J) matrix mapping control points to evenly spaced curve samples."""
    if n_samples < 2:
        raise ValueError("need at least two curve samples")
    if n_points < 2:
        raise ValueError("need at least two control points")
    dtype = dtype or T.default_dtype()
    ns = np.linspace(0.0, 1.0, n_samples, dtype=np.float64)
    j = np.arange(n_points)
    coeff = np.array([math.comb(n_points - 1, int(jj)) for jj in j], dtype=np.float64)
    basis = coeff * np.power.outer(1.0 - ns, n_points - 1 - j) * np.power.outer(ns, j)
    return basis.astype(dtype)


def bezier_points(cp: Tensor, n_samples: int = 100) -> Tensor:
    """Sample the Bezier curve; differentiable w.r.t. the control points.

    ``cp``: (..., J, 2) control points; returns (..., S, 2).
    """
    cp = T.as_tensor(cp)
    basis = Tensor(bernstein_matrix(cp.shape[-2], n_samples, dtype=cp.dtype))
    return T.matmul(basis, cp)


def _pixel_grids(height: int, width: int, dtype):
    ys = np.arange(height, dtype=dtype)
    xs = np.arange(width, dtype=dtype)
    return ys, xs


def rasterize(samples: Tensor, sigma, height: int = 50, width: int = 50, literal_formula: bool = False) -> Tensor:
    """Deposit curve samples onto an (H, W) grid; batched over leading dims.

    ``samples``: (..., S, 2) pixel coordinates (x, y); ``sigma``: broadcastable
    scalar or (...,) tensor, strictly positive. Returns raw intensities
    (..., H, W), nonnegative, differentiable w.r.t. samples and sigma.

    Implemented as one fused graph node: the (H, W, S) distance volume is
    recomputed during backward instead of being stored per stroke.
    """
    samples = T.as_tensor(samples)
    sigma_t = T.as_tensor(sigma)
    batch = samples.shape[:-2]
    s = samples.shape[-2]
    dt = samples.dtype
    sig = np.broadcast_to(sigma_t.data, batch).astype(dt, copy=False)
    if np.any(sig <= 0):
        raise ValueError("rasterize: sigma must be positive")
    ys, xs = _pixel_grids(height, width, dt)

    bx = samples.data[..., 0].reshape(batch + (1, 1, s))
    by = samples.data[..., 1].reshape(batch + (1, 1, s))
    s2 = (sig * sig).reshape(batch + (1, 1, 1))

    def volume():
        # (..., 1, W, S) and (..., H, 1, S); their sum broadcasts to (..., H, W, S)
        dx2 = (xs.reshape(1, -1, 1) - bx) ** 2
        dy2 = (ys.reshape(-1, 1, 1) - by) ** 2
        return dx2, dy2

    dx2, dy2 = volume()
    if literal_formula:
        vol = dx2 * dy2 / s2
        out = vol.sum(axis=-1)
    else:
        vol = np.exp(-(dx2 + dy2) / s2)
        out = vol.sum(axis=-1)

    need_sample_grad = samples.requires_grad
    need_sigma_grad = isinstance(sigma, Tensor) and sigma.requires_grad

    def vjp(g):
        gexp = g[..., None]  # (..., H, W, 1)
        dx2b, dy2b = volume()
        if literal_formula:
            gx = (gexp * (-2.0) * (xs.reshape(1, -1, 1) - bx) * dy2b / s2).sum(axis=(-3, -2))
            gy = (gexp * (-2.0) * (ys.reshape(-1, 1, 1) - by) * dx2b / s2).sum(axis=(-3, -2))
            gsig = None
            if need_sigma_grad:
                gsig = (gexp * dx2b * dy2b * (-2.0) / (s2 * sig.reshape(batch + (1, 1, 1)))).sum(axis=(-3, -2, -1))
        else:
            e = np.exp(-(dx2b + dy2b) / s2)
            gx = (gexp * e * 2.0 * (xs.reshape(1, -1, 1) - bx) / s2).sum(axis=(-3, -2))
            gy = (gexp * e * 2.0 * (ys.reshape(-1, 1, 1) - by) / s2).sum(axis=(-3, -2))
            gsig = None
            if need_sigma_grad:
                d2 = dx2b + dy2b
                gsig = (gexp * e * 2.0 * d2 / (s2 * sig.reshape(batch + (1, 1, 1)))).sum(axis=(-3, -2, -1))
        gsamples = np.stack([gx, gy], axis=-1) if need_sample_grad else None
        if gsig is not None:
            gsig = T._unbroadcast(gsig, sigma_t.shape)
        return gsamples, gsig

    return T.custom_op(out, (samples, sigma_t), vjp)


def normalize_stroke(raw: Tensor, s_slope) -> Tensor:
    """Max-normalize then squash: tanh((raw / max(raw)) / s_slope).

    Max-normalization puts the tanh input in [0, 1]. An all-zero raw raster
    returns all zeros (the guard epsilon keeps the division defined).
    Batched over leading dims; the max is taken per image.
    """
    raw = T.as_tensor(raw)
    s_slope = T.as_tensor(s_slope)
    m = T.max_(raw, axis=(-2, -1), keepdims=True)
    unit = raw / (m + _MAXNORM_EPS)
    slope = T.reshape(s_slope, s_slope.shape + (1, 1)) if s_slope.ndim else s_slope
    return T.tanh(unit / slope)


def normalize_canvas(strokes, g_slope, shape: Optional[tuple] = None) -> Tensor:
    """Composite strokes: canvas = tanh(sum_t stroke_t / g_slope), pixels in [0, 1).

    ``strokes`` may be a sequence of (..., H, W) stroke images or an already
    summed tensor. An empty sequence yields an all-zero canvas of ``shape``.
    """
    if isinstance(strokes, (list, tuple)):
        if not strokes:
            if shape is None:
                raise ValueError("empty stroke list needs an explicit shape")
            return T.zeros(shape)
        total = strokes[0]
        for s in strokes[1:]:
            total = total + s
    else:
        total = T.as_tensor(strokes)
    g = T.as_tensor(g_slope)
    g = T.reshape(g, g.shape + (1, 1)) if g.ndim else g
    return T.tanh(total / g)


def render_stroke(
    cp_pixels: Tensor,
    rp: RenderParams,
    n_samples: int = 100,
    height: int = 50,
    width: int = 50,
    literal_formula: bool = False,
) -> Tensor:
    """Render one stroke from control points in pixel coordinates to [0, 1)."""
    pts = bezier_points(cp_pixels, n_samples)
    raw = rasterize(pts, rp.sigma, height=height, width=width, literal_formula=literal_formula)
    return normalize_stroke(raw, rp.s_slope)


def write_png(canvas, path) -> None:
    """8-bit grayscale PNG export; pixel value round(p * 255)."""
    from PIL import Image

    arr = np.asarray(canvas.data if isinstance(canvas, Tensor) else canvas)
    img = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def read_png(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG back into [0, 1] floats."""
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"), dtype=T.default_dtype())
    return arr / 255.0
