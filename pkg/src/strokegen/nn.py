"""Neural building blocks and probability primitives.

Layer shapes follow the reference architecture used throughout the package:
MLPs with two 256-wide tanh hidden layers and named squashed output heads,
image encoders with two 3x3 stride-1 convolutions (channels 1 -> 8 -> 16,
no pooling) plus a single linear projection to the feature width, and GRU
cells with 256-wide hidden state. All widths can be overridden via config.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)
SCALE_FLOOR = 1e-3
PROB_EPS = 1e-6


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(T.default_dtype()), requires_grad=True)


class Linear:
    def __init__(self, rng, n_in: int, n_out: int):
        self.w = uniform_fan_in(rng, (n_in, n_out), n_in)
        self.b = uniform_fan_in(rng, (n_out,), n_in)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b

    def params(self):
        return [("w", self.w), ("b", self.b)]


# -- head squashing helpers ------------------------------------------------------


def squash_range(lo: float, hi: float) -> Callable[[Tensor], Tensor]:
    """Map reals into (lo, hi) via a scaled tanh."""
    mid, half = (lo + hi) / 2.0, (hi - lo) / 2.0

    def fn(x: Tensor) -> Tensor:
        return T.tanh(x) * half + mid

    return fn


def positive(floor: float = SCALE_FLOOR) -> Callable[[Tensor], Tensor]:
    """Softplus with an additive floor, used for every scale-like quantity."""

    def fn(x: Tensor) -> Tensor:
        return T.softplus(x) + floor

    return fn


@dataclass
class Head:
    """Named slice of an MLP output with its own squashing and bias init."""

    name: str
    width: int
    squash: Optional[Callable[[Tensor], Tensor]] = None
    bias: float = 0.0


class Mlp:
    """Tanh MLP with named output heads sliced from one final linear layer."""

    def __init__(self, rng, n_in: int, heads: Sequence[Head], hidden: Sequence[int] = (256, 256)):
        self.heads = list(heads)
        self.hidden_layers = []
        width = n_in
        for h in hidden:
            self.hidden_layers.append(Linear(rng, width, h))
            width = h
        total = sum(h.width for h in self.heads)
        self.out = Linear(rng, width, total)
        offset = 0
        self._slices = {}
        for h in self.heads:
            self._slices[h.name] = slice(offset, offset + h.width)
            if h.bias:
                self.out.b.data[offset : offset + h.width] += h.bias
            offset += h.width

    def trunk(self, x: Tensor) -> Tensor:
        for layer in self.hidden_layers:
            x = T.tanh(layer(x))
        return self.out(x)

    def __call__(self, x: Tensor) -> dict:
        raw = self.trunk(x)
        out = {}
        for h in self.heads:
            piece = raw[(Ellipsis, self._slices[h.name])]
            out[h.name] = h.squash(piece) if h.squash else piece
        return out

    def init_last_layer(self, weight_value: float = 0.0, biases: Optional[dict] = None) -> None:
        """Overwrite final-layer init, e.g. identity-transform or presence-bias init."""
        self.out.w.data[...] = weight_value
        if biases:
            for name, value in biases.items():
                self.out.b.data[self._slices[name]] = value

    def params(self):
        out = []
        for i, layer in enumerate(self.hidden_layers):
            out += [(f"h{i}.{n}", p) for n, p in layer.params()]
        out += [(f"out.{n}", p) for n, p in self.out.params()]
        return out


class ConvEncoder:
    """Image feature extractor: 3x3 stride-1 convs 1->8->16 + linear projection.

    One projection per supported image size so the same conv stack serves both
    full canvases and glimpses. Output feature length is constant regardless of
    input size.
    """

    def __init__(self, rng, sizes: Sequence[int], feature_dim: int):
        self.feature_dim = feature_dim
        self.conv1_w = uniform_fan_in(rng, (8, 1, 3, 3), 9)
        self.conv1_b = uniform_fan_in(rng, (8,), 9)
        self.conv2_w = uniform_fan_in(rng, (16, 8, 3, 3), 8 * 9)
        self.conv2_b = uniform_fan_in(rng, (16,), 8 * 9)
        self.proj = {int(s): Linear(rng, 16 * s * s, feature_dim) for s in sorted(set(int(s) for s in sizes))}

    def __call__(self, img) -> Tensor:
        x = T.as_tensor(img)
        if x.ndim == 3:
            x = T.reshape(x, (x.shape[0], 1, x.shape[1], x.shape[2]))
        size = x.shape[-1]
        if size not in self.proj:
            raise T.ShapeError(f"ConvEncoder: no projection for input size {size}, have {sorted(self.proj)}")
        x = T.tanh(T.conv2d_3x3_s1(x, self.conv1_w, self.conv1_b))
        x = T.tanh(T.conv2d_3x3_s1(x, self.conv2_w, self.conv2_b))
        flat = T.reshape(x, (x.shape[0], -1))
        return self.proj[size](flat)

    def params(self):
        out = [
            ("conv1.w", self.conv1_w),
            ("conv1.b", self.conv1_b),
            ("conv2.w", self.conv2_w),
            ("conv2.b", self.conv2_b),
        ]
        for size, layer in sorted(self.proj.items()):
            out += [(f"proj{size}.{n}", p) for n, p in layer.params()]
        return out


class GruCell:
    """Gated recurrent unit; gates kept in (0,1) by construction."""

    def __init__(self, rng, n_in: int, n_hidden: int):
        self.n_hidden = n_hidden
        self.w_ih = uniform_fan_in(rng, (n_in, 3 * n_hidden), n_in)
        self.w_hh = uniform_fan_in(rng, (n_hidden, 3 * n_hidden), n_hidden)
        self.b_ih = uniform_fan_in(rng, (3 * n_hidden,), n_in)
        self.b_hh = uniform_fan_in(rng, (3 * n_hidden,), n_hidden)

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        n = self.n_hidden
        gi = T.matmul(x, self.w_ih) + self.b_ih
        gh = T.matmul(h, self.w_hh) + self.b_hh
        r = T.sigmoid(gi[..., :n] + gh[..., :n])
        z = T.sigmoid(gi[..., n : 2 * n] + gh[..., n : 2 * n])
        cand = T.tanh(gi[..., 2 * n :] + r * gh[..., 2 * n :])
        return (1.0 - z) * cand + z * h

    def params(self):
        return [("w_ih", self.w_ih), ("w_hh", self.w_hh), ("b_ih", self.b_ih), ("b_hh", self.b_hh)]


def collect_params(named_modules) -> list:
    """Flatten [(prefix, module), ...] into [(dotted_name, tensor), ...]."""
    out = []
    for prefix, module in named_modules:
        for name, p in module.params():
            out.append((f"{prefix}.{name}", p))
    return out


# -- distributions ----------------------------------------------------------------


@dataclass
class GmmParams:
    """Mixture weights plus per-component diagonal Gaussian parameters.

    ``pi``: (..., K) on the simplex; ``mu``: (..., K, D); ``sigma``: (..., K, D)
    strictly positive.
    """

    pi: Tensor
    mu: Tensor
    sigma: Tensor

    def validate(self) -> None:
        pi = self.pi.data
        if not np.allclose(pi.sum(-1), 1.0, atol=1e-5) or (pi < 0).any():
            raise ValueError("mixture weights must lie on the simplex")
        if (self.sigma.data <= 0).any():
            raise ValueError("mixture scales must be positive")


@dataclass
class DiagGaussianParams:
    mu: Tensor
    sigma: Tensor

    def validate(self) -> None:
        if (self.sigma.data <= 0).any():
            raise ValueError("scales must be positive")


def gaussian_log_prob(p: DiagGaussianParams, x) -> Tensor:
    """Sum of per-dimension Gaussian log densities over the trailing axis."""
    x = T.as_tensor(x)
    z = (x - p.mu) / p.sigma
    per_dim = z * z * -0.5 - T.log(p.sigma) - 0.5 * LOG_2PI
    return T.sum_(per_dim, axis=-1)


def gmm_log_prob(p: GmmParams, x) -> Tensor:
    """log sum_k pi_k N(x; mu_k, diag sigma_k^2), log-sum-exp stabilized."""
    x = T.as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise FloatingPointError("gmm_log_prob: non-finite input")
    xb = T.reshape(x, x.shape[:-1] + (1,) + x.shape[-1:])
    z = (xb - p.mu) / p.sigma
    comp = T.sum_(z * z * -0.5 - T.log(p.sigma) - 0.5 * LOG_2PI, axis=-1)
    return T.log_sum_exp(T.log(T.clamp(p.pi, PROB_EPS, None)) + comp, axis=-1)


def gmm_sample(p: GmmParams, rng: np.random.Generator):
    """Ancestral sample (component, then Gaussian); not reparameterized through pi.

    Returns plain arrays: prior-side sampling never carries gradients.
    """
    pi = p.pi.data
    mu, sigma = p.mu.data, p.sigma.data
    cdf = np.cumsum(pi, axis=-1)
    u = rng.random(pi.shape[:-1] + (1,))
    comp = (u > cdf).sum(axis=-1)
    comp = np.minimum(comp, pi.shape[-1] - 1)
    idx = comp[..., None, None]
    mu_k = np.take_along_axis(mu, idx, axis=-2)[..., 0, :]
    sigma_k = np.take_along_axis(sigma, idx, axis=-2)[..., 0, :]
    x = mu_k + sigma_k * rng.standard_normal(mu_k.shape)
    return x.astype(mu.dtype), comp


def gaussian_rsample(p: DiagGaussianParams, rng: np.random.Generator, sample_shape: tuple = ()) -> Tensor:
    """Reparameterized sample mu + sigma * xi; gradients flow to mu and sigma."""
    xi = rng.standard_normal(tuple(sample_shape) + p.mu.shape).astype(p.mu.dtype)
    return p.mu + p.sigma * Tensor(xi)


def bernoulli_log_prob(p, o) -> Tensor:
    """log Bernoulli(o; p) with p clamped into [1e-6, 1 - 1e-6]."""
    p = T.clamp(T.as_tensor(p), PROB_EPS, 1.0 - PROB_EPS)
    o = np.asarray(o, dtype=p.dtype)
    return Tensor(o) * T.log(p) + Tensor(1.0 - o) * T.log(1.0 - p)


def laplace_log_prob(loc, scale, x) -> Tensor:
    """Elementwise Laplace log density -log(2b) - |x - loc| / b."""
    loc, scale, x = T.as_tensor(loc), T.as_tensor(scale), T.as_tensor(x)
    return -T.log(scale * 2.0) - T.absolute(x - loc) / scale


def tempered_pi(pi: np.ndarray, temperature: float) -> np.ndarray:
    """Sharpen mixture weights as pi^(1/tau), renormalized."""
    logits = np.log(np.clip(pi, 1e-30, None)) / temperature
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def tempered_bernoulli(p: np.ndarray, temperature: float) -> np.ndarray:
    """Sharpen a Bernoulli probability toward {0,1} as tau -> 0."""
    p = np.clip(p, 1e-30, 1.0 - 1e-16)
    logit = (np.log(p) - np.log1p(-p)) / temperature
    with np.errstate(over="ignore"):
        return np.where(logit >= 0, 1.0 / (1.0 + np.exp(-logit)), np.exp(logit) / (1.0 + np.exp(logit)))
