"""Conditional Wasserstein-GAN losses and single training steps.

The critic maximizes E[D(a, x_real)] - E[D(a, x_fake)]; we train by
minimizing the negation plus a gradient penalty that keeps the critic's
input-gradient norm near 1.  The generator minimizes -E[D(a, G(a, z))].
Both sides update through hand-written backward passes over the shared
parameter stores.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ParameterError
from .numerics import OptimHyper
from .supernet import Grads, Subnet

_NORM_EPS = 1e-12


@dataclass
class CriticConfig:
    n_critic: int = 5
    gp_weight: float = 10.0

    def __post_init__(self):
        if self.n_critic < 1:
            raise ParameterError(f"n_critic must be >= 1, got {self.n_critic}")
        if self.gp_weight < 0:
            raise ParameterError(f"gp_weight must be >= 0, got {self.gp_weight}")


@dataclass
class GanBatch:
    """One conditional batch: real features, their class attrs, and noise."""

    real_features: np.ndarray
    attrs: np.ndarray
    noise: np.ndarray

    def __post_init__(self):
        b = self.real_features.shape[0]
        if self.attrs.shape[0] != b or self.noise.shape[0] != b:
            raise ParameterError("batch arrays must have the same row count")


@dataclass
class StepMetrics:
    w_estimate: float = float("nan")
    gp: float = float("nan")
    g_loss: float = float("nan")
    d_loss: float = float("nan")


def _interpolates(real, fake, rng):
    eps = rng.random((real.shape[0], 1))
    return eps * real + (1.0 - eps) * fake


def _input_grad_norms(d: Subnet, attrs, u, rng):
    """Per-row gradient of sum(D(a, u)) w.r.t. u, plus the forward cache."""
    scores, cache = d.forward(attrs, u, mode="train", rng=rng)
    ones = np.ones_like(scores)
    grads = d.backward(cache, ones)
    g = grads.d_second
    norms = np.sqrt(np.sum(g * g, axis=1))
    return scores, cache, g, norms


def gradient_penalty(d: Subnet, real: np.ndarray, fake: np.ndarray,
                     attrs: np.ndarray, rng: np.random.Generator) -> float:
    """Mean over the batch of (||grad_u D(a, u)||_2 - 1)^2 at random
    interpolates u between real and fake rows."""
    value, _ = gradient_penalty_with_grads(d, real, fake, attrs, rng)
    return value


def gradient_penalty_with_grads(d: Subnet, real, fake, attrs,
                                rng) -> tuple[float, Grads]:
    """Penalty value and its exact gradients w.r.t. the critic parameters.

    The parameter gradient is a second-order quantity; with piecewise-linear
    activations it equals a tangent forward of c_i = dphi/dg_i through the
    recorded masks followed by a standard backward with the bias gradients
    dropped (phi is independent of biases for fixed masks).
    """
    if real.shape != fake.shape:
        raise ParameterError(f"real {real.shape} and fake {fake.shape} differ")
    u = _interpolates(real, fake, rng)
    _, cache, g, norms = _input_grad_norms(d, attrs, u, rng)
    batch = real.shape[0]
    value = float(np.mean((norms - 1.0) ** 2))

    coef = 2.0 * (norms - 1.0) / np.maximum(norms, _NORM_EPS) / batch
    tangent = coef[:, None] * g
    _, t_cache = d.jvp(cache, np.zeros_like(attrs), tangent)
    grads = d.backward(t_cache, np.ones((batch, 1)), skip_bias=True)
    return value, grads


def critic_loss(d: Subnet, real: np.ndarray, fake: np.ndarray, attrs: np.ndarray,
                cfg: CriticConfig, rng: np.random.Generator):
    """-mean D(a, x) + mean D(a, x_fake) + gp_weight * GP, with critic grads.

    The fake batch is treated as a constant; gradients flow to the critic
    only.  Raises NumericError when the loss or any gradient is non-finite.
    """
    batch = real.shape[0]
    real_scores, real_cache = d.forward(attrs, real, mode="train", rng=rng)
    fake_scores, fake_cache = d.forward(attrs, fake, mode="train", rng=rng)

    grads = d.backward(real_cache, np.full_like(real_scores, -1.0 / batch))
    grads.add_(d.backward(fake_cache, np.full_like(fake_scores, 1.0 / batch)))

    gp_value = 0.0
    if cfg.gp_weight > 0:
        gp_value, gp_grads = gradient_penalty_with_grads(d, real, fake, attrs, rng)
        grads.add_(gp_grads.scaled(cfg.gp_weight))

    w_estimate = float(np.mean(real_scores) - np.mean(fake_scores))
    loss = -w_estimate + cfg.gp_weight * gp_value
    if not np.isfinite(loss) or not grads.all_finite():
        raise NumericError("non-finite critic loss or gradient")
    return loss, grads, StepMetrics(w_estimate=w_estimate, gp=gp_value, d_loss=loss)


def generator_loss(d: Subnet, g: Subnet, attrs: np.ndarray, noise: np.ndarray,
                   rng: np.random.Generator, extra_fake_grad=None):
    """-mean D(a, G(a, z)) with gradients flowing to the generator only.

    ``extra_fake_grad(fake) -> (loss_term, d_term/d_fake)`` lets callers add
    a differentiable term on the synthesized features (e.g. an auxiliary
    classification loss) without another generator pass.
    """
    batch = attrs.shape[0]
    fake, g_cache = g.forward(attrs, noise, mode="train", rng=rng)
    scores, d_cache = d.forward(attrs, fake, mode="train", rng=rng)
    loss = float(-np.mean(scores))

    d_grads = d.backward(d_cache, np.full_like(scores, -1.0 / batch))
    d_fake = d_grads.d_second
    if extra_fake_grad is not None:
        term, term_grad = extra_fake_grad(fake)
        loss += float(term)
        d_fake = d_fake + term_grad
    grads = g.backward(g_cache, d_fake)

    if not np.isfinite(loss) or not grads.all_finite():
        raise NumericError("non-finite generator loss or gradient")
    return loss, grads, StepMetrics(g_loss=loss)


def gan_step(d: Subnet, g: Subnet, batch: GanBatch, cfg: CriticConfig,
             hyper: OptimHyper, which: str, rng: np.random.Generator,
             extra_fake_grad=None) -> StepMetrics:
    """One Adam update on the designated side; the other side is untouched.

    All gradients are validated finite before any parameter changes, so a
    NumericError leaves both stores exactly as they were.
    """
    if which == "train_d":
        fake, _ = g.forward(batch.attrs, batch.noise, mode="train", rng=rng)
        _, grads, metrics = critic_loss(d, batch.real_features, fake,
                                        batch.attrs, cfg, rng)
        d.apply_grads(grads, hyper)
        return metrics
    if which == "train_g":
        _, grads, metrics = generator_loss(d, g, batch.attrs, batch.noise, rng,
                                           extra_fake_grad=extra_fake_grad)
        g.apply_grads(grads, hyper)
        return metrics
    raise ParameterError(f"which must be 'train_d' or 'train_g', got {which!r}")
