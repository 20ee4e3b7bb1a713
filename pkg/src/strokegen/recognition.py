"""Amortised posterior over stroke latents, mirroring the generative model.

Inference is driven by the residual (target minus canvas-so-far, clamped to
[0, 1]): the layout posterior reads residual and target features, the stroke
posterior reads glimpses of both extracted at the sampled layout, and the
presence posterior reads the residual (optionally extended with the residual
pixel ratio). Posteriors are single squashed Gaussians, one component of the
corresponding prior GMMs. The two GRUs are shared with the generative side,
and the canvases/residuals feeding them are detached, exactly as during
generation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import affine as A
from . import nn
from . import tensor as T
from .config import RunConfig
from .generative import GenState, Generator, StepLatents
from .nn import DiagGaussianParams, Head
from .tensor import Tensor


@dataclass
class StepRecord:
    """Everything one inference step contributes to the objective."""

    alive_prev: np.ndarray  # (N,) mask: the o_t decision exists
    latents: StepLatents  # sampled o, layout, cp, render params
    log_q_o: Tensor
    log_q_l: Tensor
    log_q_s: Tensor
    log_p_o: Tensor
    log_p_l: Tensor
    log_p_s: Tensor
    h_l: Tensor
    h_s: Tensor


@dataclass
class InferResult:
    x: np.ndarray  # (N, H, W) target
    steps: List[StepRecord]
    recon: Tensor  # (N, H, W) final differentiable reconstruction
    x_feat: Tensor  # (N, F) target features (image encoder)
    final_state: GenState

    def stroke_counts(self) -> np.ndarray:
        return np.sum([s.latents.o * s.alive_prev for s in self.steps], axis=0)


class Recognizer:
    """Posterior heads plus the guided inference loop."""

    def __init__(self, cfg: RunConfig, gen: Generator, rng: np.random.Generator):
        self.cfg = cfg
        self.gen = gen
        m = cfg.model
        f, h = m.feature_dim, m.hidden_dim
        hidden = (m.hidden_dim, m.hidden_dim)
        self.enc_rsd = nn.ConvEncoder(rng, (m.image_size, m.glimpse_size), f)
        self.layout_post = nn.Mlp(rng, 2 * f + h, [Head("mu", 4), Head("sigma", 4)], hidden=hidden)
        self.stroke_post = nn.Mlp(
            rng, 2 * f + h, [Head("mu", gen.J * 2), Head("sigma", gen.J * 2)], hidden=hidden
        )
        # presence input always reserves the ratio slot; it reads zero when the
        # rho_rsd flag is off so the architecture is flag-independent
        self.presence_post = nn.Mlp(rng, f + 1, [Head("logit", 1)], hidden=hidden)
        if m.stn_identity_init:
            self.layout_post.init_last_layer(0.0, {"mu": np.array([0.0, 0.0, 3.0, 0.0])})
        if m.presence_bias_init:
            self.presence_post.init_last_layer(0.0, {"logit": m.presence_bias_init})

    def named_parameters(self):
        return nn.collect_params(
            [
                ("rec.enc_rsd", self.enc_rsd),
                ("rec.layout_post", self.layout_post),
                ("rec.stroke_post", self.stroke_post),
                ("rec.presence_post", self.presence_post),
            ]
        )

    # -- conditioning ----------------------------------------------------------

    def residual(self, x: np.ndarray, canvas: np.ndarray) -> np.ndarray:
        return np.clip(x - canvas, 0.0, 1.0)

    def residual_features(self, rsd: np.ndarray) -> Tensor:
        if self.cfg.flags.eg_ablation:
            return T.zeros((rsd.shape[0], self.gen.f_dim))
        return self.enc_rsd(Tensor(rsd.astype(T.default_dtype(), copy=False)))

    def residual_glimpse_features(self, rsd: np.ndarray, matrix: Tensor) -> Tensor:
        if self.cfg.flags.eg_ablation:
            return T.zeros((rsd.shape[0], self.gen.f_dim))
        glimpse = A.extract_glimpse(Tensor(rsd.astype(T.default_dtype(), copy=False)), matrix, self.gen.glimpse)
        return self.enc_rsd(glimpse)

    def residual_ratio(self, rsd: np.ndarray, x: np.ndarray) -> np.ndarray:
        """Unexplained-ink fraction: sum(residual) / sum(target), 0 for blank targets."""
        tot = x.sum(axis=(-2, -1))
        r = rsd.sum(axis=(-2, -1))
        return np.where(tot > 0, r / np.maximum(tot, 1e-12), 0.0).astype(x.dtype)

    # -- posterior heads ---------------------------------------------------------

    def post_layout(self, rsd_feat: Tensor, x_feat: Tensor, h_l: Tensor) -> DiagGaussianParams:
        out = self.layout_post(T.concat([rsd_feat, x_feat, h_l], axis=-1))
        mu = self.gen._squash_layout_mu(out["mu"])
        return DiagGaussianParams(mu=mu, sigma=nn.positive()(out["sigma"]))

    def post_stroke(self, rsd_glimpse_feat: Tensor, x_glimpse_feat: Tensor, h_s: Tensor) -> DiagGaussianParams:
        out = self.stroke_post(T.concat([rsd_glimpse_feat, x_glimpse_feat, h_s], axis=-1))
        n = out["mu"].shape[0]
        lim = self.cfg.model.cp_limit
        mu = nn.squash_range(-lim, lim)(T.reshape(out["mu"], (n, self.gen.J, 2)))
        sigma = nn.positive()(T.reshape(out["sigma"], (n, self.gen.J, 2)))
        return DiagGaussianParams(mu=mu, sigma=sigma)

    def post_presence(self, rsd_feat: Tensor, rho: np.ndarray, alive: np.ndarray) -> Tensor:
        rho_col = Tensor(rho.reshape(-1, 1).astype(rsd_feat.dtype))
        logit = self.presence_post(T.concat([rsd_feat, rho_col], axis=-1))["logit"][..., 0]
        return Tensor(alive.astype(logit.dtype)) * T.sigmoid(logit)

    # -- guided inference ----------------------------------------------------------

    def infer(self, x: np.ndarray, rng: np.random.Generator, t_max: Optional[int] = None) -> InferResult:
        """Run the posterior for ``t_max`` steps with guided execution.

        Every step samples (o, l, s), renders and composites exactly as the
        generative side, and records log q / log p for each latent. Steps past
        the first stop keep running for batching but are masked by callers.
        """
        if np.min(x) < 0 or np.max(x) > 1:
            raise ValueError("infer: target pixels must lie in [0, 1]")
        gen, cfg = self.gen, self.cfg
        t_max = t_max or cfg.model.t_max
        n = x.shape[0]
        x = x.astype(T.default_dtype(), copy=False)
        x_feat = gen.enc_img(Tensor(x))
        state = gen.initial_state(n)
        steps: List[StepRecord] = []
        use_rho = cfg.flags.rho_rsd and not cfg.flags.eg_ablation

        for _ in range(t_max):
            rsd = self.residual(x, state.canvas)
            canvas_feat = gen.canvas_features(state.canvas)
            h_l, h_s = gen.advance_hidden(state, canvas_feat)
            rsd_feat = self.residual_features(rsd)
            rho = self.residual_ratio(rsd, x) if use_rho else np.zeros(n, dtype=x.dtype)

            alive_prev = state.alive
            q_on = self.post_presence(rsd_feat, rho, alive_prev)
            o = (rng.random(n) < q_on.data).astype(x.dtype)
            alive_new = alive_prev * o

            q_layout = self.post_layout(rsd_feat, x_feat, h_l)
            layout = nn.gaussian_rsample(q_layout, rng)

            lat = A.LayoutLatent.from_sample(layout, cfg.model.scale_min, cfg.model.rotation_max)
            matrix = A.layout_to_matrix(lat)
            rsd_gl_feat = self.residual_glimpse_features(rsd, matrix)
            x_gl_feat = gen.enc_img(A.extract_glimpse(Tensor(x), matrix, gen.glimpse))
            q_stroke = self.post_stroke(rsd_gl_feat, x_gl_feat, h_s)
            cp = nn.gaussian_rsample(q_stroke, rng)

            # prior densities at the posterior samples (shared hidden states)
            p_on = gen.prior_presence(canvas_feat, np.ones_like(alive_prev))
            p_layout = gen.prior_layout(canvas_feat, h_l)
            gl_canvas_feat = gen.glimpse_features_canvas(state.canvas, matrix)
            p_stroke = gen.prior_stroke(h_s, layout, gl_canvas_feat)

            sigma, s_slope, g_slope = gen.render_params(canvas_feat, h_l)
            mask_on = Tensor(alive_prev)
            mask_draw = Tensor(alive_new)
            record = StepRecord(
                alive_prev=alive_prev,
                latents=StepLatents(o=o, layout=layout, cp=cp, sigma=sigma, s_slope=s_slope, g_slope=g_slope),
                log_q_o=nn.bernoulli_log_prob(q_on, o) * mask_on,
                log_q_l=nn.gaussian_log_prob(q_layout, layout) * mask_draw,
                log_q_s=T.sum_(nn.gaussian_log_prob(q_stroke, cp), axis=-1) * mask_draw,
                log_p_o=nn.bernoulli_log_prob(p_on, o) * mask_on,
                log_p_l=nn.gmm_log_prob(p_layout, layout) * mask_draw,
                log_p_s=T.sum_(nn.gmm_log_prob(p_stroke, cp), axis=-1) * mask_draw,
                h_l=h_l,
                h_s=h_s,
            )
            stroke_sum, _ = gen.render_step(state, layout, cp, sigma, s_slope, alive_new)
            canvas = gen.composite(stroke_sum.detach(), g_slope.detach(), state.base_logits).data

            steps.append(record)
            state = GenState(
                step=state.step + 1,
                canvas=canvas,
                stroke_sum=stroke_sum,
                h_l=h_l,
                h_s=h_s,
                alive=alive_new,
                prev_layout=layout,
                prev_cp=T.reshape(cp, (n, -1)),
                g_slope=g_slope,
                base_logits=state.base_logits,
            )

        recon = gen.composite(state.stroke_sum, state.g_slope, state.base_logits)
        return InferResult(x=x, steps=steps, recon=recon, x_feat=x_feat, final_state=state)
