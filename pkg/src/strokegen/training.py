"""Variational objective and optimization.

The single-sample ELBO splits into a Laplace reconstruction term and per-step
KL terms for layout, stroke and presence latents. Continuous latents use the
reparameterized path (KL as log q - log p at the sample); the discrete
presence bit goes through REINFORCE with an input-dependent baseline, signal
centering and variance normalization. The presence KL carries an extra weight
beta. The final loss is the weighted negative ELBO plus the surrogate and the
baseline regression; parameter groups split into the NVIL-estimated set
(presence heads and baseline) at a higher learning rate and the rest.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np

from . import nn
from . import tensor as T
from .config import RunConfig
from .generative import Generator
from .nn import Head
from .recognition import InferResult, Recognizer
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "elbo", "recon", "kl_l", "kl_s", "kl_o", "L_b", "mean_strokes")


class DataError(ValueError):
    """Bad or empty dataset input (CLI exit code 3)."""


@dataclass
class LossBreakdown:
    """All pieces of one training objective evaluation."""

    recon: Tensor  # (N,) E_q[log p(x|z)] single-sample estimate
    kl_l: Tensor  # (N,)
    kl_s: Tensor  # (N,)
    kl_o: Tensor  # (N,)
    baseline_loss: Tensor  # scalar
    surrogate: Tensor  # scalar REINFORCE surrogate (to be maximized)
    total: Tensor  # scalar loss handed to the optimizer
    beta: float
    mean_strokes: float

    def elbo(self) -> np.ndarray:
        return self.recon.data - self.kl_l.data - self.kl_s.data - self.kl_o.data


class RunningNorm:
    """Exponential running mean/variance used to center and smooth the signal."""

    def __init__(self, decay: float = 0.9):
        self.decay = decay
        self.mean = 0.0
        self.var = 1.0
        self._ready = False

    def normalize(self, values: np.ndarray) -> np.ndarray:
        if not self._ready:
            return values
        return (values - self.mean) / max(1.0, np.sqrt(self.var))

    def update(self, values: np.ndarray) -> None:
        if values.size == 0:
            return
        m, v = float(values.mean()), float(values.var())
        if not self._ready:
            self.mean, self.var, self._ready = m, max(v, 1e-8), True
        else:
            self.mean = self.decay * self.mean + (1 - self.decay) * m
            self.var = self.decay * self.var + (1 - self.decay) * max(v, 1e-8)


def reinforce_term(signal, baseline, log_q_o: Tensor, normalizer: Optional[RunningNorm] = None) -> Tensor:
    """Score-function surrogate: mean over the batch of detach(signal - b) * log q(o).

    ``signal`` and ``baseline`` enter detached; gradients reach only the
    parameters inside ``log_q_o``. With baseline == signal the surrogate is
    exactly zero and contributes no gradient.
    """
    sig = signal.data if isinstance(signal, Tensor) else np.asarray(signal, dtype=log_q_o.dtype)
    base = baseline.data if isinstance(baseline, Tensor) else np.asarray(baseline, dtype=log_q_o.dtype)
    adv = sig - base
    if normalizer is not None:
        adv = normalizer.normalize(adv)
    return T.mean(Tensor(np.asarray(adv, dtype=log_q_o.dtype)) * log_q_o)


def baseline_loss(signal, baseline: Tensor, mask=None) -> Tensor:
    """Mean squared error between the (detached) signal and the baseline."""
    sig = signal.data if isinstance(signal, Tensor) else np.asarray(signal, dtype=baseline.dtype)
    diff = Tensor(sig) - baseline
    sq = diff * diff
    if mask is not None:
        sq = sq * Tensor(np.asarray(mask, dtype=baseline.dtype))
    return T.mean(sq)


class BaselineNet:
    """Input-dependent control variate b(z_{<t}, x).

    Reads detached target features and the detached hidden states summarizing
    the latent prefix; receives gradient only from the baseline regression.
    """

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        f, h = cfg.model.feature_dim, cfg.model.hidden_dim
        self.mlp = nn.Mlp(rng, f + 2 * h, [Head("b", 1)], hidden=(h, h))

    def __call__(self, x_feat: Tensor, h_l: Tensor, h_s: Tensor) -> Tensor:
        inp = T.concat([x_feat.detach(), h_l.detach(), h_s.detach()], axis=-1)
        return self.mlp(inp)["b"][..., 0]

    def named_parameters(self):
        return [(f"baseline.{n}", p) for n, p in self.mlp.params()]


def _check_finite(arr: np.ndarray, term: str, step: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite {term} term at step index {step}")


def compute_loss(
    gen: Generator,
    baseline_net: BaselineNet,
    result: InferResult,
    beta: float,
    normalizer: Optional[RunningNorm] = None,
) -> LossBreakdown:
    """Assemble the full objective from one guided-inference pass."""
    n = result.x.shape[0]
    recon = gen.image_likelihood(result.recon, result.x)
    _check_finite(recon.data, "reconstruction", -1)

    zeros = T.zeros((n,))
    kl_l, kl_s, kl_o = zeros, zeros, zeros
    step_gap = []  # detached per-step beta-weighted log p - log q
    for i, s in enumerate(result.steps):
        for term, value in (("layout", s.log_q_l), ("stroke", s.log_q_s), ("presence", s.log_q_o)):
            _check_finite(value.data, f"log q {term}", i)
        for term, value in (("layout", s.log_p_l), ("stroke", s.log_p_s), ("presence", s.log_p_o)):
            _check_finite(value.data, f"log p {term}", i)
        kl_l = kl_l + (s.log_q_l - s.log_p_l)
        kl_s = kl_s + (s.log_q_s - s.log_p_s)
        kl_o = kl_o + (s.log_q_o - s.log_p_o)
        step_gap.append(
            (s.log_p_l.data - s.log_q_l.data)
            + (s.log_p_s.data - s.log_q_s.data)
            + beta * (s.log_p_o.data - s.log_q_o.data)
        )

    # local learning signals: ell_t = log p(x|z) + sum_{tau >= t} weighted gaps
    recon_det = recon.data
    suffix = np.zeros_like(recon_det)
    signals = [None] * len(result.steps)
    for i in range(len(result.steps) - 1, -1, -1):
        suffix = suffix + step_gap[i]
        signals[i] = recon_det + suffix

    surrogate = T.zeros(())
    l_b = T.zeros(())
    fresh = []
    for i, s in enumerate(result.steps):
        b = baseline_net(result.x_feat, s.h_l, s.h_s)
        mask = s.alive_prev
        l_b = l_b + baseline_loss(signals[i] * mask, b * Tensor(mask), mask=None)
        adv = (signals[i] - b.data) * mask
        fresh.append(adv[mask > 0])
        if normalizer is not None:
            adv = normalizer.normalize(adv) * mask
        surrogate = surrogate + T.mean(Tensor(adv.astype(s.log_q_o.dtype)) * s.log_q_o)
    if normalizer is not None and fresh:
        pooled = np.concatenate([f for f in fresh if f.size]) if any(f.size for f in fresh) else np.zeros(0)
        normalizer.update(pooled)

    weighted = T.mean(-1.0 * recon + kl_l + kl_s + kl_o * beta)
    total = weighted - surrogate + l_b
    counts = result.stroke_counts()
    return LossBreakdown(
        recon=recon,
        kl_l=kl_l,
        kl_s=kl_s,
        kl_o=kl_o,
        baseline_loss=l_b,
        surrogate=surrogate,
        total=total,
        beta=beta,
        mean_strokes=float(counts.mean()),
    )


# -- optimizer ---------------------------------------------------------------------


def is_nvil_parameter(name: str) -> bool:
    """Presence heads and the baseline are trained from the NVIL estimator."""
    return "presence" in name or name.startswith("baseline.")


class Adam:
    """Adam without weight decay, per-parameter-group learning rates.

    Steps with any non-finite gradient are skipped (with a warning and a
    counter) rather than corrupting the parameters.
    """

    def __init__(self, named_params, lr_for: Callable[[str], float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.items = [(name, p, lr_for(name)) for name, p in named_params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.skipped = 0
        self.m = {name: np.zeros_like(p.data) for name, p, _ in self.items}
        self.v = {name: np.zeros_like(p.data) for name, p, _ in self.items}

    def zero_grad(self) -> None:
        for _, p, _ in self.items:
            p.grad = None

    def grads_finite(self) -> bool:
        return all(p.grad is None or np.all(np.isfinite(p.grad)) for _, p, _ in self.items)

    def clip_global_norm(self, max_norm: float) -> float:
        total = 0.0
        for _, p, _ in self.items:
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if max_norm > 0 and norm > max_norm and np.isfinite(norm):
            scale = max_norm / (norm + 1e-12)
            for _, p, _ in self.items:
                if p.grad is not None:
                    p.grad *= scale
        return norm

    def step(self) -> bool:
        if not self.grads_finite():
            self.skipped += 1
            log.warning("skipping optimizer step %d: non-finite gradient", self.t + 1)
            return False
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for name, p, lr in self.items:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)
        return True

    def state_arrays(self):
        out = []
        for name, _, _ in self.items:
            out.append((f"adam.m.{name}", self.m[name]))
            out.append((f"adam.v.{name}", self.v[name]))
        return out

    def load_state_arrays(self, arrays: dict, t: int, skipped: int = 0) -> None:
        for name, _, _ in self.items:
            self.m[name] = arrays[f"adam.m.{name}"].astype(self.m[name].dtype).reshape(self.m[name].shape)
            self.v[name] = arrays[f"adam.v.{name}"].astype(self.v[name].dtype).reshape(self.v[name].shape)
        self.t = t
        self.skipped = skipped


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainOutcome:
    metrics: List[dict]
    checkpoint_path: Optional[str]
    steps_run: int


def make_optimizer(gen: Generator, rec: Recognizer, baseline_net: BaselineNet, cfg: RunConfig) -> Adam:
    params = gen.named_parameters() + rec.named_parameters() + baseline_net.named_parameters()
    lr_for = lambda name: cfg.train.lr_nvil if is_nvil_parameter(name) else cfg.train.lr_rest
    return Adam(params, lr_for)


def train_step(
    gen: Generator,
    rec: Recognizer,
    baseline_net: BaselineNet,
    adam: Adam,
    x: np.ndarray,
    cfg: RunConfig,
    rng: np.random.Generator,
    normalizer: RunningNorm,
) -> LossBreakdown:
    result = rec.infer(x, rng)
    loss = compute_loss(gen, baseline_net, result, cfg.train.beta, normalizer)
    backward(loss.total)
    adam.clip_global_norm(cfg.train.grad_clip)
    adam.step()
    adam.zero_grad()
    return loss


def train(
    dataset,
    cfg: RunConfig,
    out_dir: Optional[str] = None,
    resume_from: Optional[str] = None,
    on_step: Optional[Callable] = None,
) -> TrainOutcome:
    """Minibatch training: infer, objective, backward, Adam; periodic checkpoints.

    ``dataset`` must expose ``images`` (N, H, W in [0,1]). Emits newline-
    delimited metric records and a checkpoint stream under ``out_dir``.
    """
    from . import checkpoint as ckpt

    images = np.asarray(dataset.images, dtype=T.default_dtype())
    if images.size == 0:
        raise DataError("training dataset is empty")

    init_rng = np.random.default_rng([cfg.seed, 0xA])
    gen, rec = _build(cfg, init_rng)
    baseline_net = BaselineNet(cfg, init_rng)
    adam = make_optimizer(gen, rec, baseline_net, cfg)
    rng = np.random.default_rng([cfg.seed, 0xB])
    normalizer = RunningNorm(cfg.train.baseline_decay)
    start_step = 0

    if resume_from:
        state = ckpt.load(resume_from)
        ckpt.restore_model(state, gen, rec, baseline_net, adam)
        ckpt.restore_normalizer(state, normalizer)
        rng = state.rng()
        start_step = state.step

    metrics: List[dict] = []
    metrics_fh = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.ndjson"), "a", encoding="utf-8")
    ckpt_path = None
    try:
        for step in range(start_step, cfg.train.steps):
            idx = rng.integers(0, images.shape[0], size=cfg.train.batch_size)
            batch = images[idx]
            loss = train_step(gen, rec, baseline_net, adam, batch, cfg, rng, normalizer)
            if (step + 1) % cfg.train.metrics_every == 0 or step == start_step:
                record = {
                    "step": step + 1,
                    "elbo": float(loss.elbo().mean()),
                    "recon": float(loss.recon.data.mean()),
                    "kl_l": float(loss.kl_l.data.mean()),
                    "kl_s": float(loss.kl_s.data.mean()),
                    "kl_o": float(loss.kl_o.data.mean()),
                    "L_b": float(loss.baseline_loss.data),
                    "mean_strokes": loss.mean_strokes,
                }
                metrics.append(record)
                if metrics_fh:
                    metrics_fh.write(json.dumps(record) + "\n")
                    metrics_fh.flush()
            if on_step:
                on_step(step + 1, loss, gen, rec)
            if out_dir and cfg.train.checkpoint_every and (step + 1) % cfg.train.checkpoint_every == 0:
                ckpt_path = os.path.join(out_dir, f"ckpt_{step + 1:07d}.bin")
                ckpt.save(ckpt_path, cfg, gen, rec, baseline_net, adam, rng, step + 1, normalizer)
        if out_dir:
            ckpt_path = os.path.join(out_dir, "ckpt_final.bin")
            ckpt.save(ckpt_path, cfg, gen, rec, baseline_net, adam, rng, cfg.train.steps, normalizer)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainOutcome(metrics=metrics, checkpoint_path=ckpt_path, steps_run=cfg.train.steps - start_step)


def _build(cfg: RunConfig, rng: np.random.Generator):
    from .generative import build_model

    return build_model(cfg, rng)
