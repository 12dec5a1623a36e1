"""Losses, the score-function estimator for hard attention, ADADELTA and the
epoch loop with BLEU-based early stopping."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Optional

import numpy as np

from .attention import HardBaseline
from .autodiff import Tape, backward, make_rng, no_record
from .autodiff import ops
from .bleu import corpus_bleu4
from .data import Batch, ParallelCorpus, iterate_batches, make_batch
from .decoder import forward, greedy_decode
from .model import Model
from .vocab import Vocabulary

log = logging.getLogger(__name__)

SAMPLE_STREAM = 0x5DEECE66D


@dataclass
class TrainConfig:
    batch_size: Optional[int] = None   # None: 80 text-only, 40 multimodal
    dropout: float = 0.5
    patience: int = 20
    max_epochs: int = 100
    seed: int = 1234
    n_samples: int = 1
    rho: float = 0.95
    eps: float = 1e-6
    max_decode_len: int = 50
    record_wall_time: bool = True

    def __post_init__(self):
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def resolved_batch_size(self, multimodal: bool) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 40 if multimodal else 80

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------ losses

@dataclass
class LossResult:
    loss: object            # scalar Tensor: mean over sentences of -log p(y|x)
    total_nll: float
    n_tokens: int

    @property
    def per_token(self) -> float:
        return self.total_nll / max(self.n_tokens, 1)


def nll_loss(model: Model, batch: Batch, *, train: bool = False, dropout: float = 0.0,
             rng=None, sample_rng=None) -> LossResult:
    """Teacher-forced negative log-likelihood, averaged over the sentences of the batch."""
    res = forward(model, batch.src, batch.tgt, batch.src_mask, batch.tgt_mask, batch.feats,
                  train=train, dropout=dropout, rng=rng, sample_rng=sample_rng)
    loss = ops.neg(ops.mean(res.sent_loglik))
    return LossResult(loss, float(-res.sent_loglik.data.sum()), res.n_tokens)


@dataclass
class HardStepResult:
    loglik: float              # mean sampled log p(y | gamma, I) over rows
    baseline_before: float
    baseline_after: float
    total_nll: float
    n_tokens: int
    skipped: bool = False


def hard_step_gradient(model: Model, batch: Batch, rng: np.random.Generator, baseline: HardBaseline,
                       n_samples: int = 1, *, train: bool = False, dropout: float = 0.0,
                       dropout_rng=None, forced_img=None) -> HardStepResult:
    """Accumulate the Monte Carlo gradient of the variational lower bound into param.grad.

    For every sampled gamma (one per target step and sentence, ``n_samples``
    copies of the batch) the gradient is that of
        log p(y | gamma, I) + (log p(y | gamma, I) - b) * sum_t log alpha_{t, gamma_t},
    with the coefficient held constant, averaged over rows and negated so it is
    a descent direction. Afterwards b <- 0.9 b + 0.1 * mean log p(y | gamma, I).
    """
    if model.config.img_attention != "hard":
        raise ValueError("hard_step_gradient requires img_attention='hard'")
    tiled = batch.tile(n_samples) if n_samples > 1 else batch
    b_before = baseline.value
    with Tape() as tape:
        res = forward(model, tiled.src, tiled.tgt, tiled.src_mask, tiled.tgt_mask, tiled.feats,
                      train=train, dropout=dropout, rng=dropout_rng, sample_rng=rng,
                      forced_img=forced_img)
        ll = res.sent_loglik.data
        if not np.all(np.isfinite(ll)):
            log.warning("hard attention: non-finite sampled log-likelihood, batch skipped")
            return HardStepResult(float("nan"), b_before, b_before, float("nan"), res.n_tokens, True)
        coef = (ll - b_before).astype(ll.dtype)
        surrogate = res.sent_loglik + res.log_alpha_sel * coef
        loss = ops.neg(ops.mean(surrogate))
    backward(tape, loss)
    mean_ll = float(ll.mean())
    baseline.update(mean_ll)
    return HardStepResult(mean_ll, b_before, baseline.value, float(-ll.sum()) / n_samples,
                          res.n_tokens // n_samples)


# --------------------------------------------------------------- optimizer

class Adadelta:
    """ADADELTA: E[g^2] and E[dx^2] running averages with decay rho."""

    def __init__(self, params, rho: float = 0.95, eps: float = 1e-6):
        self.params = list(params)
        self.rho = rho
        self.eps = eps
        self.eg2 = {p.name: np.zeros_like(p.data) for p in self.params}
        self.edx2 = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        rho, eps = self.rho, self.eps
        for p in self.params:
            g = p.grad
            eg2 = self.eg2[p.name]
            eg2 *= rho
            eg2 += (1.0 - rho) * g * g
            dx = -np.sqrt(self.edx2[p.name] + eps) / np.sqrt(eg2 + eps) * g
            edx2 = self.edx2[p.name]
            edx2 *= rho
            edx2 += (1.0 - rho) * dx * dx
            p.data += dx.astype(p.dtype)


def adadelta_update(params, state: Adadelta):
    state.step()
    return params


# ------------------------------------------------------------------- loop

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    dev_bleu: float
    baseline: Optional[float]
    wall_time: Optional[float]

    def line(self) -> str:
        b = "-" if self.baseline is None else f"{self.baseline:.6f}"
        w = "-" if self.wall_time is None else f"{self.wall_time:.3f}"
        return f"{self.epoch}\t{self.train_loss:.6f}\t{self.dev_bleu:.4f}\t{b}\t{w}"


@dataclass
class TrainResult:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_bleu: float = -1.0
    best_state: Optional[dict] = None
    stopped_early: bool = False

    def log_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.epochs)


def translate_corpus(model: Model, corpus: ParallelCorpus, src_vocab: Vocabulary, tgt_vocab: Vocabulary,
                     max_len: int = 50, batch_size: int = 100, return_traces: bool = False):
    """Greedy translations (token strings) for every sentence, in corpus order."""
    hyps, traces = [], []
    for start in range(0, len(corpus), batch_size):
        idx = np.arange(start, min(len(corpus), start + batch_size))
        b = make_batch(corpus, idx, src_vocab, tgt_vocab)
        out, tr = greedy_decode(model, b.src, b.feats, max_len, b.src_mask)
        hyps.extend(tgt_vocab.decode(o) for o in out)
        traces.extend(tr)
    return (hyps, traces) if return_traces else hyps


def evaluate_bleu(model, corpus, src_vocab, tgt_vocab, max_len=50) -> float:
    hyps = translate_corpus(model, corpus, src_vocab, tgt_vocab, max_len)
    return corpus_bleu4(hyps, corpus.tgt).score


def train(model: Model, corpus: ParallelCorpus, dev: ParallelCorpus, config: TrainConfig,
          src_vocab: Vocabulary, tgt_vocab: Vocabulary, *, log_path=None,
          on_epoch: Optional[Callable[[EpochLog], None]] = None) -> TrainResult:
    """Epoch loop: ADADELTA updates, greedy dev BLEU-4 after each epoch, keep the best.

    Stops once ``patience`` consecutive epochs fail to improve the best dev BLEU,
    or after ``max_epochs``. The best parameters are loaded back into ``model``.
    """
    if len(dev) == 0:
        raise ValueError("train: development set is empty")
    mode = model.config.img_attention
    rng = make_rng(config.seed)
    sample_rng = make_rng(config.seed ^ SAMPLE_STREAM)
    opt = Adadelta(model.parameters(), config.rho, config.eps)
    baseline = HardBaseline() if mode == "hard" else None
    batch_size = config.resolved_batch_size(model.config.multimodal)
    result = TrainResult()
    since_best = 0
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.max_epochs + 1):
            t0 = time.perf_counter()
            total_nll, total_tok = 0.0, 0
            for batch in iterate_batches(corpus, batch_size, src_vocab, tgt_vocab, rng):
                model.zero_grad()
                if baseline is not None:
                    r = hard_step_gradient(model, batch, sample_rng, baseline, config.n_samples,
                                           train=True, dropout=config.dropout, dropout_rng=rng)
                    if r.skipped:
                        continue
                    nll, ntok = r.total_nll, r.n_tokens
                else:
                    with Tape() as tape:
                        lr = nll_loss(model, batch, train=True, dropout=config.dropout, rng=rng)
                    backward(tape, lr.loss)
                    nll, ntok = lr.total_nll, lr.n_tokens
                if not all(np.all(np.isfinite(p.grad)) for p in model.parameters()):
                    log.warning("epoch %d: non-finite gradient, update skipped", epoch)
                    continue
                opt.step()
                total_nll += nll
                total_tok += ntok
            with no_record():
                bleu = evaluate_bleu(model, dev, src_vocab, tgt_vocab, config.max_decode_len)
            entry = EpochLog(epoch, total_nll / max(total_tok, 1), bleu,
                             baseline.value if baseline else None,
                             time.perf_counter() - t0 if config.record_wall_time else None)
            result.epochs.append(entry)
            if log_file:
                log_file.write(entry.line() + "\n")
                log_file.flush()
            log.info("epoch %d loss %.4f dev BLEU %.2f", epoch, entry.train_loss, bleu)
            if on_epoch:
                on_epoch(entry)
            if bleu > result.best_bleu:
                result.best_bleu, result.best_epoch = bleu, epoch
                result.best_state = model.state_dict()
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    result.stopped_early = True
                    break
    finally:
        if log_file:
            log_file.close()
    if result.best_state is not None:
        model.load_state_dict(result.best_state)
    return result


__all__ = [
    "Adadelta", "EpochLog", "HardStepResult", "LossResult", "TrainConfig", "TrainResult",
    "adadelta_update", "evaluate_bleu", "hard_step_gradient", "nll_loss", "train", "translate_corpus",
]
