"""Type-token hierarchy and the downstream tasks.

A character "type" is a full inferred latent trajectory; a "token" is that
trajectory perturbed by the plug-and-play token model: spherical Gaussian
motor noise (scale 1e-3) on every canonical control-point coordinate plus one
shared affine transform, sampled uniformly over fixed ranges (shift
[-0.2, 0.2]^2, per-axis scale [0.8, 1.2], rotation [-pi/4, pi/4], shear
[-pi/4, pi/4]), applied in the canvas frame after the layout transform.
The token model's parameters are fixed, not learned.

Tasks: exemplar generation (sample type from the recognition model, perturb,
render), partial completion (recognition provides the shared-RNN states, the
generative model unrolls from the partial canvas), and one-shot episode
classification via the Bayesian score with gradient-based token fitting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import affine as A
from . import nn
from . import renderer as R
from . import tensor as T
from .data import StrokeRecord, Trajectory
from .generative import GenState, Generator, StepLatents
from .recognition import InferResult, Recognizer
from .tensor import Tensor, backward


@dataclass
class TokenModel:
    noise_scale: float = 1e-3
    shift_range: Tuple[float, float] = (-0.2, 0.2)
    scale_range: Tuple[float, float] = (0.8, 1.2)
    rotation_range: Tuple[float, float] = (-0.25 * math.pi, 0.25 * math.pi)
    shear_range: Tuple[float, float] = (-0.25 * math.pi, 0.25 * math.pi)

    def identity_params(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0])

    def sample_params(self, rng: np.random.Generator) -> np.ndarray:
        """(tx, ty, sx, sy, rot, shear_x, shear_y) uniform over the ranges."""
        return np.array(
            [
                rng.uniform(*self.shift_range),
                rng.uniform(*self.shift_range),
                rng.uniform(*self.scale_range),
                rng.uniform(*self.scale_range),
                rng.uniform(*self.rotation_range),
                rng.uniform(*self.shear_range),
                rng.uniform(*self.shear_range),
            ]
        )

    def clip_params(self, params: np.ndarray) -> np.ndarray:
        lo = [self.shift_range[0], self.shift_range[0], self.scale_range[0], self.scale_range[0],
              self.rotation_range[0], self.shear_range[0], self.shear_range[0]]
        hi = [self.shift_range[1], self.shift_range[1], self.scale_range[1], self.scale_range[1],
              self.rotation_range[1], self.shear_range[1], self.shear_range[1]]
        return np.clip(params, lo, hi)

    def noise_log_prob(self, delta: Tensor) -> Tensor:
        """Spherical Gaussian motor-noise density over all coordinates."""
        z = delta / self.noise_scale
        per = z * z * -0.5 - math.log(self.noise_scale) - 0.5 * nn.LOG_2PI
        return T.sum_(per)


def token_affine_matrix(params) -> Tensor:
    """Differentiable (2, 3) matrix R(rot) @ Shear @ Scale plus translation."""
    p = params if isinstance(params, Tensor) else Tensor(np.asarray(params, dtype=T.default_dtype()))
    tx, ty, sx, sy, rot, shx, shy = (p[i] for i in range(7))
    cr, sr = T.cos(rot), T.sin(rot)
    tanx = T.sin(shx) / T.cos(shx)
    tany = T.sin(shy) / T.cos(shy)
    # linear = R @ [[1, tanx], [tany, 1]] @ diag(sx, sy)
    a00 = (cr - sr * tany) * sx
    a01 = (cr * tanx - sr) * sy
    a10 = (sr + cr * tany) * sx
    a11 = (sr * tanx + cr) * sy
    row0 = T.stack([a00, a01, tx], axis=-1)
    row1 = T.stack([a10, a11, ty], axis=-1)
    return T.stack([row0, row1], axis=-2)


def trajectory_from_infer(result: InferResult, index: int) -> Trajectory:
    """Extract one element's inferred type (present strokes only)."""
    strokes = []
    g = 1.0
    for s in result.steps:
        g = float(s.latents.g_slope.data[index])
        if s.alive_prev[index] * s.latents.o[index] <= 0:
            break
        strokes.append(
            StrokeRecord(
                layout=np.array(s.latents.layout.data[index], dtype=np.float64),
                cp=np.array(s.latents.cp.data[index], dtype=np.float64),
                sigma=float(s.latents.sigma.data[index]),
                s_slope=float(s.latents.s_slope.data[index]),
            )
        )
    return Trajectory(strokes=strokes, g_slope=g)


@dataclass
class Token:
    """A perturbed instance of a type: per-stroke control-point noise plus one
    shared affine applied in the canvas frame."""

    type_: Trajectory
    deltas: List[np.ndarray]
    affine_params: np.ndarray

    def perturbed_trajectory(self) -> Trajectory:
        strokes = []
        m_tok = token_affine_matrix(self.affine_params)
        for s, d in zip(self.type_.strokes, self.deltas):
            strokes.append(StrokeRecord(layout=s.layout, cp=s.cp + d, sigma=s.sigma, s_slope=s.s_slope, label=s.label))
        return Trajectory(strokes=strokes, g_slope=self.type_.g_slope)


def token_perturb(type_: Trajectory, rng: np.random.Generator, token_model: Optional[TokenModel] = None) -> Token:
    """Motor noise on canonical control points + one shared sampled affine."""
    tm = token_model or TokenModel()
    deltas = [rng.normal(scale=tm.noise_scale, size=s.cp.shape) for s in type_.strokes]
    params = tm.sample_params(rng)
    return Token(type_=type_, deltas=deltas, affine_params=params)


def render_token(
    token: Token,
    size: int = 50,
    curve_samples: int = 100,
    deltas: Optional[Sequence[Tensor]] = None,
    affine_params: Optional[Tensor] = None,
) -> Tensor:
    """Render a token; differentiable w.r.t. optional tensor-valued overrides."""
    tm_matrix = token_affine_matrix(affine_params if affine_params is not None else token.affine_params)
    total = T.zeros((size, size))
    for i, s in enumerate(token.type_.strokes):
        d = deltas[i] if deltas is not None else Tensor(token.deltas[i].astype(T.default_dtype()))
        cp = Tensor(s.cp.astype(T.default_dtype())) + d
        lat = A.LayoutLatent.from_sample(Tensor(s.layout.reshape(1, 4).astype(T.default_dtype())))
        layout_m = A.layout_to_matrix(lat)
        canvas_norm = A.apply_affine(layout_m, T.reshape(cp, (1,) + cp.shape))[0]
        tokened = A.apply_affine(tm_matrix, canvas_norm)
        cp_px = A.to_pixels(tokened, size, size)
        stroke = R.render_stroke(
            cp_px, R.RenderParams(s.sigma, s.s_slope, token.type_.g_slope), n_samples=curve_samples, height=size, width=size
        )
        total = total + stroke
    return R.normalize_canvas(total, token.type_.g_slope)


def render_type(type_: Trajectory, size: int = 50, curve_samples: int = 100) -> np.ndarray:
    """Noise-free, identity-affine render (the type's own reconstruction)."""
    tm = TokenModel()
    token = Token(type_=type_, deltas=[np.zeros_like(s.cp) for s in type_.strokes], affine_params=tm.identity_params())
    with T.no_grad():
        return render_token(token, size=size, curve_samples=curve_samples).data


def exemplars(
    x: np.ndarray,
    gen: Generator,
    rec: Recognizer,
    n: int,
    rng: np.random.Generator,
    token_model: Optional[TokenModel] = None,
    share_type: bool = False,
    t_max: Optional[int] = None,
) -> np.ndarray:
    """New exemplars of the concept in ``x``: type from the posterior, token
    perturbation, render. ``share_type`` reuses one posterior sample for all."""
    size = gen.image_size
    out = np.zeros((n, size, size), dtype=T.default_dtype())
    with T.no_grad():
        type_ = None
        for i in range(n):
            if type_ is None or not share_type:
                result = rec.infer(x[None], rng, t_max=t_max)
                type_ = trajectory_from_infer(result, 0)
            token = token_perturb(type_, rng, token_model)
            out[i] = np.clip(render_token(token, size=size, curve_samples=gen.S).data, 0.0, 1.0)
    return out


# -- partial completion ------------------------------------------------------------


def completion_state(gen: Generator, result: InferResult, index: int, x_partial: np.ndarray) -> GenState:
    """Generation state seeded by the recognition pass over a partial figure.

    Hidden states and previous latents come from the last drawn step; the
    canvas-so-far is the partial figure itself.
    """
    drawn = 0
    for s in result.steps:
        if s.alive_prev[index] * s.latents.o[index] > 0:
            drawn += 1
        else:
            break
    state = gen.initial_state(1, base_canvas=x_partial[None])
    if drawn > 0:
        last = result.steps[drawn - 1]
        state.h_l = Tensor(last.h_l.data[index : index + 1])
        state.h_s = Tensor(last.h_s.data[index : index + 1])
        state.prev_layout = Tensor(last.latents.layout.data[index : index + 1])
        state.prev_cp = Tensor(last.latents.cp.data[index : index + 1].reshape(1, -1))
    return state


def complete(
    x_partial: np.ndarray,
    gen: Generator,
    rec: Recognizer,
    rng: np.random.Generator,
    t_max: Optional[int] = None,
    temperature: float = 1.0,
) -> np.ndarray:
    """Extend a partial figure: recognition parses it, generation unrolls.

    Compositing only adds ink, so the completion dominates the partial input
    pixelwise.
    """
    with T.no_grad():
        result = rec.infer(x_partial[None], rng, t_max=t_max)
        state = completion_state(gen, result, 0, x_partial)
        final, _, _ = gen.rollout(1, rng, t_max=t_max, temperature=temperature, init_state=state)
    return np.clip(final.data[0], 0.0, 1.0)


# -- one-shot classification ----------------------------------------------------------


def _type_log_joint(gen: Generator, type_: Trajectory, support: np.ndarray) -> float:
    """log p(psi, x) = trajectory log prior + Laplace likelihood of its render."""
    latents = _trajectory_to_steplatents(type_, gen)
    with T.no_grad():
        log_prior, _, state = gen.trajectory_log_prior(latents, 1)
        g = state.g_slope if state.g_slope is not None else T.ones((1,))
        recon = gen.composite(state.stroke_sum, g, None)
        log_lik = gen.image_likelihood(recon, support[None])
    return float(log_prior.data[0] + log_lik.data[0])


def _trajectory_to_steplatents(type_: Trajectory, gen: Generator) -> List[StepLatents]:
    dt = T.default_dtype()
    steps = []
    for s in type_.strokes:
        steps.append(
            StepLatents(
                o=np.ones(1, dtype=dt),
                layout=Tensor(s.layout.reshape(1, 4).astype(dt)),
                cp=Tensor(s.cp.reshape(1, -1, 2).astype(dt)),
                sigma=Tensor(np.full(1, s.sigma, dtype=dt)),
                s_slope=Tensor(np.full(1, s.s_slope, dtype=dt)),
                g_slope=Tensor(np.full(1, type_.g_slope, dtype=dt)),
            )
        )
    if len(steps) < gen.cfg.model.t_max:  # terminating zero
        j = gen.J
        steps.append(
            StepLatents(
                o=np.zeros(1, dtype=dt),
                layout=T.zeros((1, 4)),
                cp=T.zeros((1, j, 2)),
                sigma=Tensor(np.full(1, 1.0, dtype=dt)),
                s_slope=Tensor(np.full(1, 0.5, dtype=dt)),
                g_slope=Tensor(np.full(1, type_.g_slope, dtype=dt)),
            )
        )
    return steps


@dataclass
class TokenFit:
    score: float
    fell_back: bool
    token: Token


def fit_token(
    gen: Generator,
    type_: Trajectory,
    query: np.ndarray,
    token_model: Optional[TokenModel] = None,
    steps: int = 50,
    step_size: float = 0.01,
) -> TokenFit:
    """Maximize log p(x_T | z) + log p(z | psi) over the token variable z.

    Gradient ascent on the control-point noise and the affine parameters only;
    the affine is projected back into its uniform support after every step.
    Falls back to the unperturbed type if the optimization diverges.
    """
    tm = token_model or TokenModel()
    size = gen.image_size
    if not type_.strokes:
        blank = Token(type_=type_, deltas=[], affine_params=tm.identity_params())
        with T.no_grad():
            img = render_token(blank, size=size, curve_samples=gen.S)
            score = float(gen.image_likelihood(T.reshape(img, (1, size, size)), query[None]).data[0])
        return TokenFit(score=score, fell_back=False, token=blank)

    deltas = [Tensor(np.zeros_like(s.cp, dtype=T.default_dtype()), requires_grad=True) for s in type_.strokes]
    params = Tensor(tm.identity_params().astype(T.default_dtype()), requires_grad=True)
    token = Token(type_=type_, deltas=[d.data for d in deltas], affine_params=params.data)

    def objective() -> Tensor:
        img = render_token(token, size=size, curve_samples=gen.S, deltas=deltas, affine_params=params)
        lik = gen.image_likelihood(T.reshape(img, (1, size, size)), query[None])[0]
        noise_lp = T.zeros(())
        for d in deltas:
            noise_lp = noise_lp + tm.noise_log_prob(d)
        return lik + noise_lp

    with T.no_grad():
        initial = float(objective().data)
    diverged = False
    for _ in range(steps):
        value = objective()
        if not np.isfinite(value.data):
            diverged = True
            break
        backward(value)
        for d in deltas:
            if d.grad is not None:
                norm = np.linalg.norm(d.grad) + 1e-12
                d.data = d.data + step_size * tm.noise_scale * d.grad / norm
            d.grad = None
        if params.grad is not None:
            norm = np.linalg.norm(params.grad) + 1e-12
            params.data = tm.clip_params(params.data + step_size * params.grad / norm)
        params.grad = None
    with T.no_grad():
        final_value = float(objective().data)
    if diverged or not np.isfinite(final_value) or final_value < initial:
        final = Token(type_=type_, deltas=[np.zeros_like(s.cp) for s in type_.strokes], affine_params=tm.identity_params())
        with T.no_grad():
            img = render_token(final, size=size, curve_samples=gen.S)
            score = float(gen.image_likelihood(T.reshape(img, (1, size, size)), query[None]).data[0])
        return TokenFit(score=score, fell_back=True, token=final)
    return TokenFit(score=final_value, fell_back=False, token=token)


@dataclass
class EpisodeResult:
    predicted: int
    scores: np.ndarray  # (C,) per-class log scores
    fallbacks: int


def classify_episode(
    supports: Sequence[np.ndarray],
    query: np.ndarray,
    gen: Generator,
    rec: Recognizer,
    rng: np.random.Generator,
    k: int = 5,
    token_model: Optional[TokenModel] = None,
    fit_steps: int = 50,
) -> EpisodeResult:
    """Score every class c by sum_k pi_k max_z p(x_T|z) p(z|psi_k) and argmax.

    Type samples psi_k come from the posterior given the support; pi_k are the
    softmax-normalized joint scores log p(psi_k, x_c).
    """
    if len(supports) < 2:
        raise ValueError("an episode needs at least two classes")
    if k < 1:
        raise ValueError("need at least one type sample")
    scores = np.zeros(len(supports))
    fallbacks = 0
    for c, support in enumerate(supports):
        with T.no_grad():
            tiled = np.repeat(support[None], k, axis=0)
            result = rec.infer(tiled, rng)
        types = [trajectory_from_infer(result, i) for i in range(k)]
        log_joint = np.array([_type_log_joint(gen, t, support) for t in types])
        log_pi = log_joint - _logsumexp(log_joint)
        fits = []
        for t in types:
            fit = fit_token(gen, t, query, token_model, steps=fit_steps)
            fits.append(fit.score)
            fallbacks += int(fit.fell_back)
        scores[c] = _logsumexp(log_pi + np.asarray(fits))
    return EpisodeResult(predicted=int(scores.argmax()), scores=scores, fallbacks=fallbacks)


def _logsumexp(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


# -- episode manifests ------------------------------------------------------------------


def write_episode_manifest(path, episodes: Sequence[dict]) -> None:
    """Episodes as blocks of ``role<TAB>path<TAB>label`` lines, blank-line separated."""
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            for p, label in ep["supports"]:
                fh.write(f"support\t{p}\t{label}\n")
            for p, label in ep["queries"]:
                fh.write(f"query\t{p}\t{label}\n")
            fh.write("\n")


def read_episode_manifest(path) -> List[dict]:
    roles = {"support": "supports", "query": "queries"}
    episodes = []
    current = {"supports": [], "queries": []}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                if current["supports"] or current["queries"]:
                    episodes.append(current)
                    current = {"supports": [], "queries": []}
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[0] not in roles:
                raise ValueError(f"{path}:{lineno}: expected role<TAB>path<TAB>label")
            role, p, label = parts
            current[roles[role]].append((p, int(label)))
    if current["supports"] or current["queries"]:
        episodes.append(current)
    return episodes
