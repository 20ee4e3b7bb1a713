"""Autoregressive generative model over stroke latents.

Each step samples a presence bit (stop/continue), a layout latent placing an
attention window on the canvas, and canonical Bezier control points inside
that window; the stroke is rendered on the full canvas and composited with a
slope-parametrized tanh. Two GRUs (layout and stroke) carry the latent
history; the canvas-so-far conditions every head but is detached, so it never
acts as a backpropagation-through-time medium.

Priors: presence is a Bernoulli gated by the previous bit (once the model
stops it stops permanently), layout is a K-component factorized GMM over
(shift, scale, rotation), and each control point gets its own K-component
2-D GMM. Means are squashed into their declared ranges, scales are softplus
with a small floor. Renderer parameters (blur, stroke slope, canvas slope)
are predicted per step by a small MLP and are not latent variables.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import affine as A
from . import nn
from . import renderer as R
from . import tensor as T
from .config import RunConfig
from .nn import GmmParams, Head
from .tensor import Tensor


def inverse_softplus(y: float) -> float:
    return float(np.log(np.expm1(y)))


_RENDER_INIT = {"sigma": 2.5, "s_slope": 0.3, "g_slope": 0.6}


@dataclass
class StepLatents:
    """One generation step: presence bit, layout, control points, render params."""

    o: np.ndarray  # (N,) floats in {0, 1}
    layout: Tensor  # (N, 4) raw sample scored by the densities
    cp: Tensor  # (N, J, 2) canonical control points
    sigma: Tensor  # (N,)
    s_slope: Tensor  # (N,)
    g_slope: Tensor  # (N,)


@dataclass
class GenState:
    step: int
    canvas: np.ndarray  # (N, H, W) detached canvas-so-far
    stroke_sum: Tensor  # (N, H, W) differentiable sum of masked strokes
    h_l: Tensor
    h_s: Tensor
    alive: np.ndarray  # (N,) o_{t-1}
    prev_layout: Tensor
    prev_cp: Tensor  # (N, 2J) flattened
    g_slope: Optional[Tensor] = None
    base_logits: Optional[np.ndarray] = None  # pre-tanh offset for completion


class Generator:
    """Generative side: priors, renderer-parameter head, compositing."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.cfg = cfg
        m = cfg.model
        self.image_size = m.image_size
        self.glimpse = m.glimpse_size
        self.J = m.control_points
        self.K = m.mixture_components
        self.S = m.curve_samples
        f, h = m.feature_dim, m.hidden_dim
        self.f_dim, self.h_dim = f, h
        hidden = (m.hidden_dim, m.hidden_dim)

        self.enc_img = nn.ConvEncoder(rng, (m.image_size, m.glimpse_size), f)
        self.gru_l = nn.GruCell(rng, 4 + f, h)
        self.gru_s = nn.GruCell(rng, 2 * self.J + f, h)
        self.layout_prior = nn.Mlp(
            rng,
            f + h,
            [Head("pi", self.K), Head("mu", self.K * 4), Head("sigma", self.K * 4)],
            hidden=hidden,
        )
        self.stroke_prior = nn.Mlp(
            rng,
            h + 4 + f,
            [Head("pi", self.J * self.K), Head("mu", self.J * self.K * 2), Head("sigma", self.J * self.K * 2)],
            hidden=hidden,
        )
        self.presence_prior = nn.Mlp(rng, f, [Head("logit", 1)], hidden=hidden)
        self.render_mlp = nn.Mlp(
            rng,
            f + h,
            [
                Head("sigma", 1, bias=inverse_softplus(_RENDER_INIT["sigma"])),
                Head("s_slope", 1, bias=inverse_softplus(_RENDER_INIT["s_slope"])),
                Head("g_slope", 1, bias=inverse_softplus(_RENDER_INIT["g_slope"])),
            ],
            hidden=hidden,
        )
        self.laplace_raw = Tensor(np.array(-2.0, dtype=T.default_dtype()), requires_grad=True)

        if m.stn_identity_init:
            # zero final weights; biases put the layout means on the identity
            # transform (scale mean tanh-squashed, so bias 3.0 lands at ~0.995)
            self.layout_prior.init_last_layer(0.0, {"mu": 0.0})
            self.layout_prior.out.b.data[self.layout_prior._slices["mu"]] = np.tile(
                [0.0, 0.0, 3.0, 0.0], self.K
            )
        if m.presence_bias_init:
            self.presence_prior.init_last_layer(0.0, {"logit": m.presence_bias_init})

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        out = nn.collect_params(
            [
                ("gen.enc_img", self.enc_img),
                ("gen.gru_l", self.gru_l),
                ("gen.gru_s", self.gru_s),
                ("gen.layout_prior", self.layout_prior),
                ("gen.stroke_prior", self.stroke_prior),
                ("gen.presence_prior", self.presence_prior),
                ("gen.render_mlp", self.render_mlp),
            ]
        )
        out.append(("gen.laplace_raw", self.laplace_raw))
        return out

    # -- conditioning --------------------------------------------------------

    def canvas_features(self, canvas: np.ndarray) -> Tensor:
        """Image-family features of the (detached) canvas; zeroed under the
        execution-guidance ablation so nothing reads intermediate renderings."""
        n = canvas.shape[0]
        if self.cfg.flags.eg_ablation:
            return T.zeros((n, self.f_dim))
        return self.enc_img(Tensor(canvas.astype(T.default_dtype(), copy=False)))

    def glimpse_features_canvas(self, canvas: np.ndarray, matrix: Tensor) -> Tensor:
        n = canvas.shape[0]
        if self.cfg.flags.eg_ablation:
            return T.zeros((n, self.f_dim))
        glimpse = A.extract_glimpse(Tensor(canvas.astype(T.default_dtype(), copy=False)), matrix, self.glimpse)
        return self.enc_img(glimpse)

    def advance_hidden(self, state: GenState, canvas_feat: Tensor):
        h_l = self.gru_l(T.concat([state.prev_layout, canvas_feat], axis=-1), state.h_l)
        h_s = self.gru_s(T.concat([state.prev_cp, canvas_feat], axis=-1), state.h_s)
        return h_l, h_s

    # -- prior heads ----------------------------------------------------------

    def _squash_layout_mu(self, raw: Tensor) -> Tensor:
        m = self.cfg.model
        shift = nn.squash_range(-1.0, 1.0)(raw[..., 0:2])
        scale = nn.squash_range(m.scale_min, 1.0)(raw[..., 2:3])
        rot = nn.squash_range(-m.rotation_max, m.rotation_max)(raw[..., 3:4])
        return T.concat([shift, scale, rot], axis=-1)

    def prior_layout(self, canvas_feat: Tensor, h_l: Tensor) -> GmmParams:
        out = self.layout_prior(T.concat([canvas_feat, h_l], axis=-1))
        n = out["pi"].shape[0]
        pi = T.softmax(out["pi"], axis=-1)
        mu = self._squash_layout_mu(T.reshape(out["mu"], (n, self.K, 4)))
        sigma = nn.positive()(T.reshape(out["sigma"], (n, self.K, 4)))
        return GmmParams(pi=pi, mu=mu, sigma=sigma)

    def prior_stroke(self, h_s: Tensor, layout: Tensor, glimpse_feat: Tensor) -> GmmParams:
        out = self.stroke_prior(T.concat([h_s, layout, glimpse_feat], axis=-1))
        n = out["pi"].shape[0]
        lim = self.cfg.model.cp_limit
        pi = T.softmax(T.reshape(out["pi"], (n, self.J, self.K)), axis=-1)
        mu = nn.squash_range(-lim, lim)(T.reshape(out["mu"], (n, self.J, self.K, 2)))
        sigma = nn.positive()(T.reshape(out["sigma"], (n, self.J, self.K, 2)))
        return GmmParams(pi=pi, mu=mu, sigma=sigma)

    def prior_presence(self, canvas_feat: Tensor, alive: np.ndarray) -> Tensor:
        logit = self.presence_prior(canvas_feat)["logit"][..., 0]
        return Tensor(alive.astype(logit.dtype)) * T.sigmoid(logit)

    def render_params(self, canvas_feat: Tensor, h_l: Tensor):
        out = self.render_mlp(T.concat([canvas_feat, h_l], axis=-1))
        pos = nn.positive()
        return pos(out["sigma"][..., 0]), pos(out["s_slope"][..., 0]), pos(out["g_slope"][..., 0])

    def laplace_scale(self) -> Tensor:
        return T.softplus(self.laplace_raw) + nn.SCALE_FLOOR

    # -- stepping -------------------------------------------------------------

    def initial_state(self, n: int, base_canvas: Optional[np.ndarray] = None) -> GenState:
        size = self.image_size
        dt = T.default_dtype()
        canvas = np.zeros((n, size, size), dtype=dt)
        base_logits = None
        if base_canvas is not None:
            clipped = np.clip(base_canvas.astype(dt), 0.0, 1.0 - 1e-6)
            base_logits = np.arctanh(clipped)
            canvas = base_canvas.astype(dt).copy()
        return GenState(
            step=0,
            canvas=canvas,
            stroke_sum=T.zeros((n, size, size)),
            h_l=T.zeros((n, self.h_dim)),
            h_s=T.zeros((n, self.h_dim)),
            alive=np.ones(n, dtype=dt),
            prev_layout=T.zeros((n, 4)),
            prev_cp=T.zeros((n, 2 * self.J)),
            base_logits=base_logits,
        )

    def composite(self, stroke_sum: Tensor, g_slope: Tensor, base_logits: Optional[np.ndarray]) -> Tensor:
        pre = stroke_sum / T.reshape(g_slope, g_slope.shape + (1, 1))
        if base_logits is not None:
            pre = pre + Tensor(base_logits)
        return T.tanh(pre)

    def render_step(self, state: GenState, layout: Tensor, cp: Tensor, sigma: Tensor, s_slope: Tensor, o: np.ndarray):
        """Render one stroke and accumulate it, masked by the presence bit."""
        m = self.cfg.model
        lat = A.LayoutLatent.from_sample(layout, m.scale_min, m.rotation_max)
        matrix = A.layout_to_matrix(lat)
        cp_px = A.transform_control_points(cp, matrix, self.image_size, self.image_size)
        stroke = R.render_stroke(
            cp_px,
            R.RenderParams(sigma, s_slope, 1.0),
            n_samples=self.S,
            height=self.image_size,
            width=self.image_size,
            literal_formula=self.cfg.flags.literal_raster_formula,
        )
        mask = Tensor(o.reshape(-1, 1, 1).astype(stroke.dtype))
        return state.stroke_sum + stroke * mask, matrix

    def gen_step(self, state: GenState, rng: np.random.Generator, temperature: float = 1.0):
        """Sample (o_t, l_t, s_t) from the priors and advance the state."""
        feat = self.canvas_features(state.canvas)
        h_l, h_s = self.advance_hidden(state, feat)

        p_on = self.prior_presence(feat, state.alive)
        p_np = p_on.data
        if temperature != 1.0:
            p_np = state.alive * nn.tempered_bernoulli(np.where(state.alive > 0, p_np, 0.5), temperature)
        o = (rng.random(p_np.shape) < p_np).astype(p_np.dtype)
        alive_new = state.alive * o

        layout_gmm = self.prior_layout(feat, h_l)
        layout_np, _ = nn.gmm_sample(self._temper(layout_gmm, temperature), rng)
        layout = Tensor(layout_np)

        lat = A.LayoutLatent.from_sample(layout, self.cfg.model.scale_min, self.cfg.model.rotation_max)
        matrix_for_glimpse = A.layout_to_matrix(lat)
        gl_feat = self.glimpse_features_canvas(state.canvas, matrix_for_glimpse)
        stroke_gmm = self.prior_stroke(h_s, layout, gl_feat)
        cp_np, _ = nn.gmm_sample(self._temper(stroke_gmm, temperature), rng)
        cp = Tensor(cp_np)

        sigma, s_slope, g_slope = self.render_params(feat, h_l)
        stroke_sum, _ = self.render_step(state, layout, cp, sigma, s_slope, alive_new)
        canvas = self.composite(stroke_sum.detach(), g_slope.detach(), state.base_logits).data

        latents = StepLatents(o=o, layout=layout, cp=cp, sigma=sigma, s_slope=s_slope, g_slope=g_slope)
        new_state = GenState(
            step=state.step + 1,
            canvas=canvas,
            stroke_sum=stroke_sum,
            h_l=h_l,
            h_s=h_s,
            alive=alive_new,
            prev_layout=layout,
            prev_cp=T.reshape(cp, (cp.shape[0], -1)),
            g_slope=g_slope,
            base_logits=state.base_logits,
        )
        return latents, new_state

    @staticmethod
    def _temper(p: GmmParams, temperature: float) -> GmmParams:
        if temperature == 1.0:
            return p
        return GmmParams(
            pi=Tensor(nn.tempered_pi(p.pi.data, temperature)),
            mu=p.mu,
            sigma=Tensor(p.sigma.data * temperature),
        )

    def rollout(
        self,
        n: int,
        rng: np.random.Generator,
        t_max: Optional[int] = None,
        temperature: float = 1.0,
        init_state: Optional[GenState] = None,
    ):
        """Unconditional (or state-seeded) generation from zero canvas and states.

        Returns (final canvas Tensor, trajectory list, final state). Sampling
        stops contributing after the first o_t = 0 per element.
        """
        if not (0 < temperature <= 1.0):
            raise ValueError("temperature must lie in (0, 1]")
        t_max = t_max or self.cfg.model.t_max
        state = init_state if init_state is not None else self.initial_state(n)
        trajectory = []
        for _ in range(t_max):
            latents, state = self.gen_step(state, rng, temperature)
            trajectory.append(latents)
            if not state.alive.any():
                break
        g = state.g_slope if state.g_slope is not None else T.ones((n,))
        final = self.composite(state.stroke_sum, g, state.base_logits)
        return final, trajectory, state

    # -- scoring ---------------------------------------------------------------

    def image_likelihood(self, recon: Tensor, x: np.ndarray) -> Tensor:
        """Pixelwise Laplace log likelihood, summed per image; one global scale."""
        if recon.shape != x.shape:
            raise T.ShapeError(f"image_likelihood: {recon.shape} vs {x.shape}")
        scale = self.laplace_scale()
        lp = nn.laplace_log_prob(recon, scale, Tensor(x.astype(recon.dtype, copy=False)))
        return T.sum_(lp, axis=(-2, -1))

    def trajectory_log_prior(self, trajectory: List[StepLatents], n: int, base_canvas: Optional[np.ndarray] = None):
        """Replay a trajectory, scoring every latent under the priors.

        Returns (total (N,) Tensor, per-step dicts). The o-chain is scored for
        every step still alive; layout/stroke only for steps actually drawn.
        """
        state = self.initial_state(n, base_canvas)
        total = T.zeros((n,))
        steps = []
        for latents in trajectory:
            feat = self.canvas_features(state.canvas)
            h_l, h_s = self.advance_hidden(state, feat)
            alive_prev = state.alive
            o = latents.o
            alive_new = alive_prev * o

            p_on = self.prior_presence(feat, np.ones_like(alive_prev))
            lp_o = nn.bernoulli_log_prob(p_on, o) * Tensor(alive_prev)

            layout_gmm = self.prior_layout(feat, h_l)
            lp_l = nn.gmm_log_prob(layout_gmm, latents.layout) * Tensor(alive_new)

            lat = A.LayoutLatent.from_sample(latents.layout, self.cfg.model.scale_min, self.cfg.model.rotation_max)
            matrix = A.layout_to_matrix(lat)
            gl_feat = self.glimpse_features_canvas(state.canvas, matrix)
            stroke_gmm = self.prior_stroke(h_s, latents.layout, gl_feat)
            lp_s = T.sum_(nn.gmm_log_prob(stroke_gmm, latents.cp), axis=-1) * Tensor(alive_new)

            stroke_sum, _ = self.render_step(state, latents.layout, latents.cp, latents.sigma, latents.s_slope, alive_new)
            canvas = self.composite(stroke_sum.detach(), latents.g_slope.detach(), state.base_logits).data

            total = total + lp_o + lp_l + lp_s
            steps.append({"o": lp_o, "layout": lp_l, "stroke": lp_s})
            state = GenState(
                step=state.step + 1,
                canvas=canvas,
                stroke_sum=stroke_sum,
                h_l=h_l,
                h_s=h_s,
                alive=alive_new,
                prev_layout=latents.layout,
                prev_cp=T.reshape(latents.cp, (n, -1)),
                g_slope=latents.g_slope,
                base_logits=state.base_logits,
            )
        return total, steps, state


def build_model(cfg: RunConfig, rng: np.random.Generator):
    """Construct the generative/recognition pair with shared RNNs and encoder."""
    from .recognition import Recognizer

    gen = Generator(cfg, rng)
    rec = Recognizer(cfg, gen, rng)
    return gen, rec
