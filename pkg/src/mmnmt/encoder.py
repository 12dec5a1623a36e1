"""Bidirectional GRU encoder and decoder-state initialization.

All functions are batched: vectors are (B, dim), sequences (B, T, dim).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import Tensor
from .autodiff import ops


@dataclass
class GRUParams:
    W: Tensor  # (in, 3H), blocks [z | r | candidate]
    U: Tensor  # (H, 3H)
    b: Tensor  # (3H,)

    @property
    def hidden(self) -> int:
        return self.U.shape[0]


@dataclass
class InitStateParams:
    W1: Tensor  # (2H, H)
    b1: Tensor
    W2: Tensor  # (H, dec)
    b2: Tensor


@dataclass
class EncoderParams:
    emb: Tensor
    fwd: GRUParams
    bwd: GRUParams
    init: InitStateParams


def gru_from_projection(x_proj: Tensor, h_prev: Tensor, U: Tensor,
                        h_mask: Optional[np.ndarray] = None) -> Tensor:
    """GRU update given the already projected input ``x W + b`` of width 3H."""
    H = U.shape[0]
    if x_proj.shape[-1] != 3 * H:
        raise ValueError(f"gru: input projection width {x_proj.shape[-1]} != 3*{H}")
    h_in = h_prev if h_mask is None else h_prev * h_mask
    uh = h_in @ U
    z = ops.sigmoid(x_proj[..., :H] + uh[..., :H])
    r = ops.sigmoid(x_proj[..., H:2 * H] + uh[..., H:2 * H])
    cand = ops.tanh(x_proj[..., 2 * H:] + r * uh[..., 2 * H:])
    return (1.0 - z) * cand + z * h_prev


def gru_step(x: Tensor, h_prev: Tensor, p: GRUParams, h_mask: Optional[np.ndarray] = None) -> Tensor:
    """One GRU transition.

    z = sig(x Wz + h Uz + bz), r = sig(x Wr + h Ur + br),
    h~ = tanh(x W + r * (h U) + b), h = (1 - z) * h~ + z * h_prev.
    """
    return gru_from_projection(ops.linear(x, p.W, p.b), h_prev, p.U, h_mask)


def _run_direction(x_proj: Tensor, mask: np.ndarray, U: Tensor, reverse: bool,
                   h_mask: Optional[np.ndarray]) -> list:
    B, M = mask.shape
    H = U.shape[0]
    h = ops.constant(np.zeros((B, H), dtype=x_proj.dtype))
    states = [None] * M
    steps = range(M - 1, -1, -1) if reverse else range(M)
    for t in steps:
        h_new = gru_from_projection(x_proj[:, t], h, U, h_mask)
        m = mask[:, t]
        if m.all():
            h = h_new
        else:
            keep = m[:, None].astype(x_proj.dtype)
            h = h_new * keep + h * (1.0 - keep)
        states[t] = h
    return states


def encode(tokens, params: EncoderParams, mask: Optional[np.ndarray] = None,
           dropout: Optional[dict] = None) -> Tensor:
    """Annotation sequence C of shape (B, M, 2H), row t = [forward h_t ; backward h_t].

    Both directions start from a zero state. Padded positions (mask False) carry
    the previous state forward and are expected to be masked out downstream.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] == 0:
        raise ValueError(f"encode: need a nonempty (B, M) token array, got shape {tokens.shape}")
    if mask is None:
        mask = np.ones(tokens.shape, dtype=bool)
    dropout = dropout or {}
    emb = ops.embedding(params.emb, tokens)
    if dropout.get("src_emb") is not None:
        emb = emb * dropout["src_emb"][:, None, :]
    fwd = _run_direction(ops.linear(emb, params.fwd.W, params.fwd.b), mask, params.fwd.U,
                         False, dropout.get("enc_fwd"))
    bwd = _run_direction(ops.linear(emb, params.bwd.W, params.bwd.b), mask, params.bwd.U,
                         True, dropout.get("enc_bwd"))
    return ops.concat([ops.stack(fwd, axis=1), ops.stack(bwd, axis=1)], axis=-1)


def last_annotation(C: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
    """h_M: the annotation at the final non-padded position of each sentence."""
    B, M = C.shape[:2]
    last = np.full(B, M - 1) if mask is None else np.asarray(mask).sum(axis=1) - 1
    return ops.select_rows(C, last)


def init_state(C: Tensor, params: InitStateParams, mask: Optional[np.ndarray] = None) -> Tensor:
    """s0 = tanh(W2 tanh(W1 h_M + b1) + b2)."""
    if C.shape[1] == 0:
        raise ValueError("init_state: empty annotation sequence")
    hidden = ops.tanh(ops.linear(last_annotation(C, mask), params.W1, params.b1))
    return ops.tanh(ops.linear(hidden, params.W2, params.b2))
