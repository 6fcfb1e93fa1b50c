"""Dense float64 numerical substrate: affine layers, activations, inverted
dropout, the Adam optimizer, and a finite-difference gradient checker.

All functions operate on 2-D row-major ``numpy`` arrays (batch x features) and
are pure given their inputs; randomness always comes from an explicit
``numpy.random.Generator``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, NumericError, ParameterError

LEAKY_SLOPE_DEFAULT = 0.2
DROPOUT_RATE_DEFAULT = 0.5


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Derive an independent counter-based RNG stream from a root seed.

    Each distinct tag tuple yields a statistically independent Philox stream,
    so population members / pipeline phases can draw randomness in any order
    without affecting each other.
    """
    h = hashlib.sha256(repr((int(seed),) + tuple(str(t) for t in tags)).encode())
    entropy = int.from_bytes(h.digest()[:16], "little")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def as_matrix(x) -> np.ndarray:
    out = np.asarray(x, dtype=np.float64)
    if out.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {out.shape}")
    return out


def check_finite(x: np.ndarray, what: str = "value") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite entries in {what}")
    return x


# ---------------------------------------------------------------------------
# affine layer


def affine_forward(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    """out[i] = W @ x[i] + b for each batch row; W is (d_out, d_in)."""
    if w.ndim != 2 or x.ndim != 2 or w.shape[1] != x.shape[1]:
        raise DimensionError(
            f"affine shapes do not conform: W {w.shape} vs x {x.shape}"
        )
    if b.shape != (w.shape[0],):
        raise DimensionError(f"bias shape {b.shape} does not match W {w.shape}")
    return x @ w.T + b


def affine_backward(w, b, x, grad_out):
    """Gradients of the affine layer given the forward inputs.

    Returns (grad_w, grad_b, grad_x) with
    grad_w = grad_out^T @ x, grad_b = column-sum of grad_out,
    grad_x = grad_out @ W.
    """
    if grad_out.shape != (x.shape[0], w.shape[0]):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} does not match batch {x.shape[0]} x d_out {w.shape[0]}"
        )
    grad_w = grad_out.T @ x
    grad_b = grad_out.sum(axis=0)
    grad_x = grad_out @ w
    return grad_w, grad_b, grad_x


# ---------------------------------------------------------------------------
# activations

ACTIVATIONS = ("relu", "leaky_relu")


def activate(x: np.ndarray, kind: str, slope: float = LEAKY_SLOPE_DEFAULT) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x >= 0.0, x, slope * x)
    raise ParameterError(f"unknown activation kind: {kind!r}")


def activation_mask(x: np.ndarray, kind: str, slope: float = LEAKY_SLOPE_DEFAULT) -> np.ndarray:
    """Elementwise derivative of the activation at pre-activation x."""
    if kind == "relu":
        return (x > 0.0).astype(np.float64)
    if kind == "leaky_relu":
        return np.where(x >= 0.0, 1.0, slope)
    raise ParameterError(f"unknown activation kind: {kind!r}")


def activate_backward(grad_out: np.ndarray, x: np.ndarray, kind: str,
                      slope: float = LEAKY_SLOPE_DEFAULT) -> np.ndarray:
    return grad_out * activation_mask(x, kind, slope)


# ---------------------------------------------------------------------------
# inverted dropout


def dropout(x: np.ndarray, rate: float, rng: np.random.Generator | None,
            training: bool):
    """Inverted dropout: kept entries are scaled by 1/(1-rate) at train time.

    Returns (output, mask); the mask is the multiplicative factor applied, so
    the backward pass is just grad * mask.  Eval mode is the exact identity.
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x, np.ones_like(x)
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(np.float64) / keep
    return x * mask, mask


def dropout_backward(grad_out: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return grad_out * mask


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimHyper:
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ParameterError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.beta1 < self.beta2 < 1.0:
            raise ParameterError(
                f"require 0 < beta1 < beta2 < 1, got ({self.beta1}, {self.beta2})"
            )
        if self.epsilon <= 0:
            raise ParameterError("epsilon must be positive")


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0)

    def copy(self) -> "AdamState":
        return AdamState(self.first_moment.copy(), self.second_moment.copy(),
                         self.step_count)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState,
              hyper: OptimHyper) -> None:
    """Bias-corrected Adam update, applied to ``param`` in place."""
    if param.shape != grad.shape or param.shape != state.first_moment.shape:
        raise DimensionError(
            f"adam shapes do not agree: param {param.shape}, grad {grad.shape}, "
            f"state {state.first_moment.shape}"
        )
    state.step_count += 1
    b1, b2 = hyper.beta1, hyper.beta2
    with np.errstate(invalid="ignore", over="ignore"):
        state.first_moment *= b1
        state.first_moment += (1.0 - b1) * grad
        state.second_moment *= b2
        state.second_moment += (1.0 - b2) * np.square(grad)
        m_hat = state.first_moment / (1.0 - b1 ** state.step_count)
        v_hat = state.second_moment / (1.0 - b2 ** state.step_count)
        param -= hyper.learning_rate * m_hat / (np.sqrt(v_hat) + hyper.epsilon)
    check_finite(param, "parameter after adam_step")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f, x: np.ndarray, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f(x)`` must return ``(scalar_value, grad_wrt_x)``.  The relative error per
    coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    _, analytic = f(x)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise DimensionError(
            f"analytic gradient shape {analytic.shape} does not match x {x.shape}"
        )
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up, _ = f(x)
        flat[i] = orig - h
        down, _ = f(x)
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("non-finite value during grad_check evaluation")
        numeric = (up - down) / (2.0 * h)
        a = analytic.reshape(-1)[i]
        err = abs(a - numeric) / max(1.0, abs(a))
        worst = max(worst, err)
    if not np.isfinite(worst):
        raise NumericError("non-finite gradient in grad_check")
    return worst
