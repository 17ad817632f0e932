"""Minimal differentiable building blocks in float64 numpy.

Gated attention scores a set of instance embeddings, a two-class affine
softmax head turns an embedding into grade probabilities, and every
backward pass is written analytically so the whole model stack can be
verified against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ValidationError


def _require_finite(name: str, array: np.ndarray) -> None:
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} contains non-finite entries")


def softmax(scores: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis (max subtraction)."""
    shifted = scores - np.max(scores, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=-1, keepdims=True)


def softmax_backward(probs: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient through softmax given its output and the upstream gradient."""
    return probs * (upstream - np.dot(upstream, probs))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class AttentionParams:
    """Gated attention parameters: w scores the gated hidden features,
    V feeds tanh and U feeds the sigmoid gate."""

    w: np.ndarray  # (M,)
    V: np.ndarray  # (M, D)
    U: np.ndarray  # (M, D)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.U = np.asarray(self.U, dtype=np.float64)
        if self.V.shape != self.U.shape or self.w.shape != (self.V.shape[0],):
            raise ValidationError(
                f"inconsistent attention shapes w{self.w.shape} "
                f"V{self.V.shape} U{self.U.shape}"
            )
        for name in ("w", "V", "U"):
            _require_finite(f"attention {name}", getattr(self, name))

    @property
    def hidden_dim(self) -> int:
        return self.w.shape[0]

    @property
    def input_dim(self) -> int:
        return self.V.shape[1]


@dataclass
class ClassifierParams:
    weight: np.ndarray  # (2, D)
    bias: np.ndarray    # (2,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.weight.shape[0] != 2 or self.bias.shape != (2,):
            raise ValidationError(
                f"bad classifier shapes weight{self.weight.shape} bias{self.bias.shape}"
            )
        _require_finite("classifier weight", self.weight)
        _require_finite("classifier bias", self.bias)


def gated_attention_forward(H: np.ndarray, params: AttentionParams) -> np.ndarray:
    """Attention weights over the rows of H.

    Each row's score is w . (tanh(V h) * sigm(U h)); the scores pass
    through a stable softmax, so the result is a probability vector.
    """
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] < 1:
        raise ValidationError(f"H must be (N, D) with N >= 1, got {H.shape}")
    if H.shape[1] != params.input_dim:
        raise ValidationError(
            f"input dim {H.shape[1]} != attention dim {params.input_dim}"
        )
    _require_finite("H", H)
    gated = np.tanh(H @ params.V.T) * sigmoid(H @ params.U.T)
    return softmax(gated @ params.w)


def gated_attention_backward(
    H: np.ndarray, params: AttentionParams, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of the attention weights, including the softmax
    coupling across instances. Returns (dH, dw, dV, dU)."""
    H = np.asarray(H, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != (H.shape[0],):
        raise ValidationError(
            f"upstream shape {upstream.shape} != ({H.shape[0]},)"
        )
    t = np.tanh(H @ params.V.T)          # (N, M)
    s = sigmoid(H @ params.U.T)          # (N, M)
    gated = t * s
    a = softmax(gated @ params.w)

    d_scores = a * (upstream - np.dot(upstream, a))   # softmax backward
    dw = gated.T @ d_scores
    d_gated = np.outer(d_scores, params.w)
    d_pre_v = d_gated * s * (1.0 - t * t)
    d_pre_u = d_gated * t * s * (1.0 - s)
    dV = d_pre_v.T @ H
    dU = d_pre_u.T @ H
    dH = d_pre_v @ params.V + d_pre_u @ params.U
    return dH, dw, dV, dU


def classifier_forward(h: np.ndarray, params: ClassifierParams) -> np.ndarray:
    """Two-class probabilities softmax(W h + b); index 0 = LG, 1 = HG."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (params.weight.shape[1],):
        raise ValidationError(
            f"embedding shape {h.shape} != ({params.weight.shape[1]},)"
        )
    _require_finite("h", h)
    return softmax(params.weight @ h + params.bias)


def classifier_backward(
    h: np.ndarray, params: ClassifierParams, probs: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dh, dweight, dbias) given the forward probabilities."""
    dz = softmax_backward(probs, np.asarray(upstream, dtype=np.float64))
    dweight = np.outer(dz, h)
    dbias = dz
    dh = params.weight.T @ dz
    return dh, dweight, dbias


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_attention_params(rng: np.random.Generator, input_dim: int,
                          hidden_dim: int) -> AttentionParams:
    return AttentionParams(
        w=uniform_init(rng, (hidden_dim,), hidden_dim),
        V=uniform_init(rng, (hidden_dim, input_dim), input_dim),
        U=uniform_init(rng, (hidden_dim, input_dim), input_dim),
    )


def init_classifier_params(rng: np.random.Generator, input_dim: int) -> ClassifierParams:
    return ClassifierParams(
        weight=uniform_init(rng, (2, input_dim), input_dim),
        bias=uniform_init(rng, (2,), input_dim),
    )


# ---------------------------------------------------------------------------
# Finite-difference gradient verification.
# ---------------------------------------------------------------------------

@dataclass
class BlockCheck:
    name: str
    max_rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    blocks: list[BlockCheck]
    tolerance: float
    step: float

    @property
    def max_rel_error(self) -> float:
        return max((b.max_rel_error for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(b.passed for b in self.blocks)


def grad_check(
    closure: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    tolerance: float = 1e-4,
    step: float = 1e-5,
) -> GradCheckReport:
    """Compare a closure's analytic gradients against central differences.

    The closure maps a parameter dict to (loss, gradient dict). Relative
    error per entry is |a - n| / max(1, |a|, |n|); the report carries the
    per-block maximum.
    """
    params = {k: np.asarray(v, dtype=np.float64).copy() for k, v in params.items()}
    _, analytic = closure(params)
    blocks: list[BlockCheck] = []
    for name in sorted(params):
        block = params[name]
        grad = np.asarray(analytic[name], dtype=np.float64)
        if grad.shape != block.shape:
            raise ValidationError(
                f"gradient shape {grad.shape} != parameter shape {block.shape} "
                f"for block {name}"
            )
        worst = 0.0
        flat = block.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            loss_plus, _ = closure(params)
            flat[i] = keep - step
            loss_minus, _ = closure(params)
            flat[i] = keep
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            a = float(grad.reshape(-1)[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, rel)
        blocks.append(BlockCheck(name=name, max_rel_error=worst,
                                 passed=worst < tolerance))
    return GradCheckReport(blocks=blocks, tolerance=tolerance, step=step)
