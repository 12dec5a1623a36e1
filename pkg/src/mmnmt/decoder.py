"""Conditional GRU decoder with optional image attention, deep output layer,
teacher-forced scoring and greedy decoding."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (
    gate_context, ground_annotations, hard_attend, local_attend, project_annotations, soft_attend,
)
from .autodiff import Tensor, dropout_mask, no_record
from .autodiff import ops
from .encoder import GRUParams, encode, gru_from_projection, init_state
from .model import Model
from .vocab import EOS_ID


# ------------------------------------------------------------------ cells

def rec1(s_prev: Tensor, y_prev_emb: Tensor, p: GRUParams, h_mask=None) -> Tensor:
    """State proposal s' from s_{t-1} and the previous target embedding."""
    return gru_from_projection(ops.linear(y_prev_emb, p.W, p.b), s_prev, p.U, h_mask)


def rec2_mono(s_prime: Tensor, c_t: Tensor, Wc: Tensor, U: Tensor, b: Tensor, h_mask=None) -> Tensor:
    return gru_from_projection(ops.linear(c_t, Wc, b), s_prime, U, h_mask)


def rec2_multi(s_prime: Tensor, c_t: Tensor, i_t: Tensor, Wc: Tensor, Wi: Tensor, U: Tensor,
               b: Tensor, h_mask=None) -> Tensor:
    """Second cGRU cell fed with both contexts through separate input matrices."""
    return gru_from_projection(ops.linear(c_t, Wc, b) + i_t @ Wi, s_prime, U, h_mask)


def output_logits(model: Model, s_t: Tensor, c_t: Tensor, i_t: Optional[Tensor], y_prev_emb: Tensor,
                  hidden_mask=None) -> Tensor:
    """o_t = L_o tanh(L_s s_t + L_c c_t [+ L_i i_t] + L_w E_Y[y_{t-1}])."""
    P = model.params
    pre = s_t @ P["out_Ls"] + c_t @ P["out_Lc"] + ops.linear(y_prev_emb, P["out_Lw"], P["out_b"])
    if i_t is not None:
        pre = pre + i_t @ P["out_Li"]
    hidden = ops.tanh(pre)
    if hidden_mask is not None:
        hidden = hidden * hidden_mask
    return ops.linear(hidden, P["out_Lo"], P["out_bo"])


def embed_previous(model: Model, y_prev: Optional[np.ndarray], batch: int) -> Tensor:
    """E_Y[y_{t-1}]; the first step (y_prev None) uses a zero vector."""
    table = model["dec_emb"]
    if y_prev is None:
        return ops.constant(np.zeros((batch, table.shape[1]), dtype=table.dtype))
    y_prev = np.asarray(y_prev)
    if y_prev.min() < 0 or y_prev.max() >= table.shape[0]:
        raise IndexError(f"target index out of range for vocabulary of {table.shape[0]}")
    return ops.embedding(table, y_prev)


# ---------------------------------------------------------------- context

@dataclass
class DecodeContext:
    """Everything a decode step needs that is fixed for the whole sentence."""

    model: Model
    C: Tensor
    C_proj: Tensor
    src_mask: np.ndarray
    s0: Tensor
    I: Optional[Tensor] = None
    I_proj: Optional[Tensor] = None
    ground_weights: Optional[Tensor] = None
    masks: dict = field(default_factory=dict)
    sample_rng: Optional[np.random.Generator] = None

    @property
    def batch(self) -> int:
        return self.C.shape[0]


@dataclass
class StepResult:
    s: Tensor
    logits: Tensor
    alpha_txt: Tensor
    alpha_img: Optional[Tensor] = None
    beta: Optional[Tensor] = None
    position: Optional[Tensor] = None
    selected: Optional[np.ndarray] = None
    log_alpha_sel: Optional[Tensor] = None
    pre_alpha_img: Optional[Tensor] = None
    window: Optional[np.ndarray] = None


def make_dropout_masks(model: Model, batch: int, p: float, rng, train: bool) -> dict:
    """One mask per sequence and site, reused at every timestep."""
    if not train or p == 0.0:
        return {}
    c = model.config
    dt = model.dtype
    sites = {
        "src_emb": (batch, c.emb_dim),
        "enc_fwd": (batch, c.enc_dim),
        "enc_bwd": (batch, c.enc_dim),
        "ann": (batch, 1, c.ctx_dim),
        "tgt_emb": (batch, c.emb_dim),
        "dec_h": (batch, c.dec_dim),
        "ctx": (batch, c.ctx_dim),
        "out_hidden": (batch, c.emb_dim),
    }
    if c.multimodal:
        sites["img"] = (batch, 1, c.img_dim)
        sites["img_ctx"] = (batch, c.img_dim)
    return {k: dropout_mask(shape, p, rng, train, dtype=dt) for k, shape in sites.items()}


def prepare_context(model: Model, src: np.ndarray, src_mask: Optional[np.ndarray] = None,
                    feats: Optional[np.ndarray] = None, masks: Optional[dict] = None,
                    sample_rng=None) -> DecodeContext:
    """Encode the source, initialize s0 and (optionally ground and) project the image."""
    cfg = model.config
    masks = masks or {}
    src = np.asarray(src)
    if src_mask is None:
        src_mask = np.ones(src.shape, dtype=bool)
    C = encode(src, model.encoder_params(), src_mask, masks)
    s0 = init_state(C, model.encoder_params().init, src_mask)
    if masks.get("ann") is not None:
        C = C * masks["ann"]
    C_proj = C @ model["att_txt_W"]
    ctx = DecodeContext(model, C, C_proj, np.asarray(src_mask, dtype=bool), s0, masks=masks,
                        sample_rng=sample_rng)
    if cfg.multimodal:
        if feats is None:
            raise ValueError(f"image attention '{cfg.img_attention}' requires image features")
        feats = np.asarray(feats, dtype=model.dtype)
        if feats.ndim != 3 or feats.shape[0] != src.shape[0] or feats.shape[2] != cfg.img_dim:
            raise ValueError(f"features must be (B={src.shape[0]}, L, {cfg.img_dim}), got {feats.shape}")
        I = ops.constant(feats)
        if masks.get("img") is not None:
            I = I * masks["img"]
        gp = model.grounding()
        if gp is not None:
            I, ctx.ground_weights = ground_annotations(I, s0, gp, return_weights=True)
        ctx.I = I
        ctx.I_proj = project_annotations(I, model.img_attn())
    return ctx


def decode_step(ctx: DecodeContext, s_prev: Tensor, y_prev_emb: Tensor,
                forced_img: Optional[np.ndarray] = None) -> StepResult:
    """rec1 -> text attention -> image attention -> gating -> rec2 -> deep output."""
    model = ctx.model
    cfg = model.config
    P = model.params
    m = ctx.masks
    if m.get("tgt_emb") is not None:
        y_prev_emb = y_prev_emb * m["tgt_emb"]
    dec_h = m.get("dec_h")
    s_prime = rec1(s_prev, y_prev_emb, GRUParams(P["rec1_W"], P["rec1_U"], P["rec1_b"]), dec_h)

    alpha_txt, c_t = soft_attend(ctx.C, s_prime, model.text_attn(), ctx.src_mask, ctx.C_proj)
    if m.get("ctx") is not None:
        c_t = c_t * m["ctx"]

    res = StepResult(s=None, logits=None, alpha_txt=alpha_txt)
    i_t = None
    if cfg.multimodal:
        if ctx.I is None:
            raise ValueError("decode_step: image annotations missing for a multimodal model")
        mode = cfg.img_attention
        soft = model.img_attn()
        if mode == "soft":
            res.alpha_img, i_t = soft_attend(ctx.I, s_prime, soft, None, ctx.I_proj)
        elif mode == "hard":
            e = soft_attend(ctx.I, s_prime, soft, None, ctx.I_proj)[0]
            res.alpha_img = e
            gamma, i_t, res.log_alpha_sel = hard_attend(e, ctx.I, ctx.sample_rng, forced_img)
            res.selected = np.argmax(gamma, axis=-1)
        elif mode == "local":
            loc = local_attend(ctx.I, s_prime, soft, model.local_attn(ctx.I.shape[1]), ctx.I_proj)
            res.alpha_img, i_t = loc.alpha, loc.context
            res.position, res.pre_alpha_img, res.window = loc.position, loc.pre_alpha, loc.window
        gp = model.gating()
        if gp is not None:
            i_t, res.beta = gate_context(s_prev, i_t, gp)
        if m.get("img_ctx") is not None:
            i_t = i_t * m["img_ctx"]
        s_t = rec2_multi(s_prime, c_t, i_t, P["rec2_Wc"], P["rec2_Wi"], P["rec2_U"], P["rec2_b"], dec_h)
    else:
        s_t = rec2_mono(s_prime, c_t, P["rec2_Wc"], P["rec2_U"], P["rec2_b"], dec_h)

    res.s = s_t
    res.logits = output_logits(model, s_t, c_t, i_t, y_prev_emb, m.get("out_hidden"))
    return res


# -------------------------------------------------------- teacher forcing

@dataclass
class ForwardResult:
    sent_loglik: Tensor            # (B,) sum of log p(y_t | ...) over real target tokens
    token_loglik: Tensor           # (B, N), zero at padding
    log_alpha_sel: Optional[Tensor]  # (B,) sum_t log alpha_{t, gamma_t} (hard mode only)
    steps: list
    n_tokens: int


def forward(model: Model, src, tgt, src_mask=None, tgt_mask=None, feats=None, *, train: bool = False,
            dropout: float = 0.0, rng=None, sample_rng=None, forced_img=None,
            keep_steps: bool = False) -> ForwardResult:
    """Teacher-forced log-likelihood of the target given source (and image)."""
    src = np.asarray(src)
    tgt = np.asarray(tgt)
    B, N = tgt.shape
    if tgt_mask is None:
        tgt_mask = np.ones(tgt.shape, dtype=bool)
    V = model.config.tgt_vocab
    if tgt[tgt_mask].size and (tgt[tgt_mask].min() < 0 or tgt[tgt_mask].max() >= V):
        raise IndexError(f"target index out of range for vocabulary of {V}")
    tgt = np.where(tgt_mask, tgt, EOS_ID)
    masks = make_dropout_masks(model, B, dropout, rng, train)
    ctx = prepare_context(model, src, src_mask, feats, masks, sample_rng)
    s = ctx.s0
    y_emb = embed_previous(model, None, B)
    tm = tgt_mask.astype(model.dtype)
    per_step, log_sel, steps = [], None, []
    for t in range(N):
        step = decode_step(ctx, s, y_emb, None if forced_img is None else np.asarray(forced_img)[:, t])
        lp = ops.take_along(ops.log_softmax(step.logits, axis=-1), tgt[:, t], axis=-1)
        per_step.append(lp)
        if step.log_alpha_sel is not None:
            term = step.log_alpha_sel * tm[:, t]
            log_sel = term if log_sel is None else log_sel + term
        if keep_steps:
            steps.append(step)
        s = step.s
        y_emb = embed_previous(model, tgt[:, t], B)
    token_ll = ops.stack(per_step, axis=1) * tm
    return ForwardResult(ops.sum(token_ll, axis=1), token_ll, log_sel, steps, int(tgt_mask.sum()))


# --------------------------------------------------------------- greedy

@dataclass
class DecodeTrace:
    """Per emitted token (the end-of-sentence step included)."""

    tokens: list = field(default_factory=list)
    alpha_txt: list = field(default_factory=list)
    alpha_img: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    position: list = field(default_factory=list)
    selected: list = field(default_factory=list)
    logits: list = field(default_factory=list)

    def __len__(self):
        return len(self.tokens)


def greedy_decode(model: Model, src, feats=None, max_len: int = 50, src_mask=None):
    """Argmax decoding from s0 until end-of-sentence or ``max_len`` tokens.

    Returns (translations, traces): token id lists without the end marker, and a
    DecodeTrace per sentence.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    src = np.asarray(src)
    if src.ndim == 1:
        src = src[None, :]
        feats = None if feats is None else np.asarray(feats)[None]
    B = src.shape[0]
    with no_record():
        ctx = prepare_context(model, src, src_mask, feats)
        s = ctx.s0
        y_emb = embed_previous(model, None, B)
        done = np.zeros(B, dtype=bool)
        outputs = [[] for _ in range(B)]
        traces = [DecodeTrace() for _ in range(B)]
        for _ in range(max_len):
            step = decode_step(ctx, s, y_emb)
            y = np.argmax(step.logits.data, axis=-1)
            for b in np.flatnonzero(~done):
                tr = traces[b]
                tr.tokens.append(int(y[b]))
                tr.alpha_txt.append(step.alpha_txt.data[b].copy())
                tr.logits.append(step.logits.data[b].copy())
                if step.alpha_img is not None:
                    tr.alpha_img.append(step.alpha_img.data[b].copy())
                if step.beta is not None:
                    tr.beta.append(float(step.beta.data[b]))
                if step.position is not None:
                    tr.position.append(float(step.position.data[b]))
                if step.selected is not None:
                    tr.selected.append(int(step.selected[b]))
                if y[b] == EOS_ID:
                    done[b] = True
                else:
                    outputs[b].append(int(y[b]))
            if done.all():
                break
            s = step.s
            y_emb = embed_previous(model, y, B)
    return outputs, traces
