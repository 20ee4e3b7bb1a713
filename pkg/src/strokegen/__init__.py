"""Stroke-based drawing as a neuro-symbolic generative model.

A differentiable Bezier renderer, an autoregressive generative/recognition
pair over stroke latents, variational training with mixed reparameterized and
REINFORCE gradients, and the downstream generation/completion/classification
tasks, all on a small self-contained autodiff engine.
"""

__version__ = "0.1.0"
