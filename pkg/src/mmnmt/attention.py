"""Soft, hard stochastic and local attention, plus the image-attention add-ons
(gating scalar, grounding reweighting).

Shapes: annotations (B, L, D), decoder states (B, n), weights (B, L).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import ops

NORMALIZATION_TOL = 1e-4


@dataclass
class SoftAttnParams:
    U_a: Tensor  # (n, A)
    W_a: Tensor  # (D, A)
    v: Tensor    # (A,)

    def __post_init__(self):
        A = self.v.shape[0]
        if self.U_a.shape[1] != A or self.W_a.shape[1] != A:
            raise ValueError(f"attention width mismatch: U_a {self.U_a.shape}, "
                             f"W_a {self.W_a.shape}, v {self.v.shape}")


@dataclass
class LocalAttnParams:
    U_p: Tensor  # (n, A)
    v_p: Tensor  # (A,)
    half_width: int

    def __post_init__(self):
        if self.half_width < 1:
            raise ValueError("local attention half-width must be >= 1")

    @property
    def sigma(self) -> float:
        return self.half_width / 2.0


@dataclass
class GatingParams:
    W: Tensor  # (n,)
    b: Tensor  # (1,)


@dataclass
class GroundingParams:
    conv1_W: Tensor          # (D, G)
    conv1_b: Tensor          # (G,)
    conv2_W: Tensor          # (G,)
    proj: Optional[Tensor]   # (n, D) when decoder width != D


def default_half_width(n_annotations: int) -> int:
    """49 for the 14x14 grid, otherwise L/4 capped at 49 (never below 1)."""
    return max(1, min(49, n_annotations // 4))


class HardBaseline:
    """Moving-average baseline b_k = 0.9 b_{k-1} + 0.1 * log-likelihood."""

    def __init__(self, value: float = 0.0, decay: float = 0.9):
        self.value = float(value)
        self.decay = decay
        self.updates = 0

    def update(self, loglik: float) -> float:
        self.value = self.decay * self.value + (1.0 - self.decay) * float(loglik)
        self.updates += 1
        return self.value


# ---------------------------------------------------------------- soft

def project_annotations(annotations: Tensor, p: SoftAttnParams) -> Tensor:
    """W_a a_l for every position; independent of the decode step, so computed once."""
    if annotations.shape[-1] != p.W_a.shape[0]:
        raise ValueError(f"attention: annotation width {annotations.shape[-1]} does not match "
                         f"W_a input side {p.W_a.shape[0]}")
    return annotations @ p.W_a


def attn_energies(annotations: Tensor, s_prime: Tensor, p: SoftAttnParams,
                  mask: Optional[np.ndarray] = None, ann_proj: Optional[Tensor] = None) -> Tensor:
    """e_l = v . tanh(U_a s' + W_a a_l); masked positions get -inf."""
    if ann_proj is None:
        ann_proj = project_annotations(annotations, p)
    if s_prime.shape[-1] != p.U_a.shape[0]:
        raise ValueError(f"attention: state width {s_prime.shape[-1]} does not match U_a {p.U_a.shape}")
    hidden = ops.tanh(ann_proj + ops.expand_dims(s_prime @ p.U_a, 1))
    e = hidden @ p.v
    if mask is not None and not np.all(mask):
        e = ops.where_const(mask, e, -np.inf)
    return e


def weighted_sum(alpha: Tensor, annotations: Tensor) -> Tensor:
    """sum_l alpha_l a_l -> (B, D)."""
    out = ops.expand_dims(alpha, 1) @ annotations
    return ops.reshape(out, (annotations.shape[0], annotations.shape[2]))


def soft_attend(annotations: Tensor, s_prime: Tensor, p: SoftAttnParams,
                mask: Optional[np.ndarray] = None, ann_proj: Optional[Tensor] = None):
    """Returns (alpha, context)."""
    e = attn_energies(annotations, s_prime, p, mask, ann_proj)
    alpha = ops.softmax(e, axis=-1)
    return alpha, weighted_sum(alpha, annotations)


# ---------------------------------------------------------------- hard

def sample_categorical(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row by inverse CDF."""
    u = rng.random(probs.shape[0])
    cdf = np.cumsum(probs, axis=1)
    idx = (cdf < (u * cdf[:, -1])[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


def hard_attend(alpha: Tensor, annotations: Tensor, rng: Optional[np.random.Generator] = None,
                forced: Optional[np.ndarray] = None):
    """Pick one annotation per row, gamma ~ Multinoulli(alpha).

    With ``forced`` the indices are given; with neither rng nor forced the
    argmax is taken (inference). Returns (gamma one-hot, context, log alpha of
    the chosen index). The context is a copy of the chosen annotation row.
    """
    a = alpha.data
    total = a.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > NORMALIZATION_TOL) or np.any(a < 0):
        raise ValueError(f"hard_attend: alpha is not a distribution (row sums {total})")
    if forced is not None:
        idx = np.asarray(forced, dtype=np.int64)
    elif rng is not None:
        idx = sample_categorical(a.astype(np.float64), rng)
    else:
        idx = np.argmax(a, axis=-1)
    gamma = np.zeros(a.shape, dtype=a.dtype)
    gamma[np.arange(a.shape[0]), idx] = 1
    context = ops.select_rows(annotations, idx)
    log_sel = ops.log(ops.take_along(alpha, idx, axis=-1))
    return gamma, context, log_sel


# ---------------------------------------------------------------- local

@dataclass
class LocalResult:
    alpha: Tensor        # post-Gaussian weights (B, L)
    context: Tensor      # (B, D)
    position: Tensor     # p_t (B,)
    pre_alpha: Tensor    # window softmax before the Gaussian factor
    window: np.ndarray   # (B, 2) inclusive [lo, hi]


def window_bounds(p: np.ndarray, half_width: int, length: int) -> np.ndarray:
    lo = np.clip(np.ceil(p - half_width), 0, length - 1).astype(np.int64)
    hi = np.clip(np.floor(p + half_width), 0, length - 1).astype(np.int64)
    return np.stack([lo, hi], axis=-1)


def local_attend(annotations: Tensor, s_prime: Tensor, soft: SoftAttnParams, local: LocalAttnParams,
                 ann_proj: Optional[Tensor] = None, mask: Optional[np.ndarray] = None) -> LocalResult:
    """Predictive local attention.

    p_t = L * sigmoid(v_p . tanh(U_p s')); softmax of the usual energies over the
    integer window [ceil(p_t - D), floor(p_t + D)] clipped to the sequence; each
    weight is then multiplied by exp(-(i - p_t)^2 / (2 sigma^2)), sigma = D / 2,
    without renormalizing.
    """
    B, L = annotations.shape[:2]
    score = ops.tanh(s_prime @ local.U_p) @ local.v_p
    position = ops.scale(ops.sigmoid(score), float(L))
    window = window_bounds(position.data, local.half_width, L)
    idx = np.arange(L)
    in_window = (idx[None, :] >= window[:, :1]) & (idx[None, :] <= window[:, 1:])
    if mask is not None:
        in_window &= mask
    e = attn_energies(annotations, s_prime, soft, in_window, ann_proj)
    pre_alpha = ops.softmax(e, axis=-1)
    offset = ops.sub(idx.astype(annotations.dtype)[None, :], ops.expand_dims(position, 1))
    sigma = local.sigma
    gauss = ops.exp(ops.scale(ops.square(offset), -1.0 / (2.0 * sigma * sigma)))
    alpha = pre_alpha * gauss
    return LocalResult(alpha, weighted_sum(alpha, annotations), position, pre_alpha, window)


# ------------------------------------------------------------- add-ons

def gate_context(s_prev: Tensor, context: Tensor, p: GatingParams):
    """beta = sigmoid(W_beta . s_{t-1} + b_beta); returns (beta * context, beta)."""
    beta = ops.sigmoid((s_prev @ p.W) + p.b)
    return context * ops.expand_dims(beta, 1), beta


def ground_annotations(annotations: Tensor, s0: Tensor, p: GroundingParams,
                       return_weights: bool = False):
    """Reweight image annotations once per sentence against the initial state.

    I' = tanh(a_i + s0), L2-normalized per location, scored by two position-shared
    linear maps (D -> G with tanh, G -> 1), softmaxed over locations; each a_i is
    scaled by its weight.
    """
    s = s0 if p.proj is None else s0 @ p.proj
    if s.shape[-1] != annotations.shape[-1]:
        raise ValueError(f"grounding: state width {s.shape[-1]} != annotation width "
                         f"{annotations.shape[-1]}; a projection is required")
    merged = ops.l2_normalize(ops.tanh(annotations + ops.expand_dims(s, 1)), axis=-1)
    hidden = ops.tanh(ops.linear(merged, p.conv1_W, p.conv1_b))
    weights = ops.softmax(hidden @ p.conv2_W, axis=-1)
    out = annotations * ops.expand_dims(weights, 2)
    return (out, weights) if return_weights else out


__all__ = [
    "GatingParams", "GroundingParams", "HardBaseline", "LocalAttnParams", "LocalResult",
    "SoftAttnParams", "attn_energies", "default_half_width", "gate_context", "ground_annotations",
    "hard_attend", "local_attend", "project_annotations", "sample_categorical", "soft_attend",
    "weighted_sum", "window_bounds",
]
