"""Self-checks: a full-model gradient check and the unbiasedness test of the
hard-attention gradient estimator."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .attention import HardBaseline, SoftAttnParams, attn_energies, hard_attend
from .autodiff import (GradCheckResult, Parameter, Tape, Tensor, backward, child_rng, grad_check,
                       make_rng, no_record)
from .autodiff import ops
from .decoder import forward
from .model import Model, ModelConfig

GRADCHECK_CONFIGS = {
    "soft": dict(img_attention="soft"),
    "local": dict(img_attention="local"),
    "soft+gating": dict(img_attention="soft", gating=True),
    "soft+grounding": dict(img_attention="soft", grounding=True),
    "soft+doubling": dict(img_attention="soft", doubling=True),
}


@dataclass
class ToyProblem:
    model: Model
    src: np.ndarray      # (1, M)
    tgt: np.ndarray      # (1, N)
    feats: np.ndarray    # (1, L, D)


def toy_problem(seed: int = 0, *, hidden: int = 8, embed: int = 6, src_len: int = 4, tgt_len: int = 4,
                n_locations: int = 4, img_dim: int = 8, vocab: int = 10, ground_dim: int = 8,
                weight_std: float = 0.5, **overrides) -> ToyProblem:
    """A one-sentence float64 problem with random (not small) weights."""
    rng = make_rng(seed)
    cfg = ModelConfig(src_vocab=vocab, tgt_vocab=vocab, emb_dim=embed, enc_dim=hidden, dec_dim=hidden,
                      img_dim=img_dim, ground_dim=ground_dim, **overrides)
    model = Model(cfg, dtype=np.float64).randomize(rng, weight_std)
    src = rng.integers(3, vocab, size=(1, src_len))
    tgt = rng.integers(3, vocab, size=(1, tgt_len))
    feats = rng.standard_normal((1, n_locations, img_dim)) if cfg.multimodal else None
    return ToyProblem(model, src, tgt, feats)


def full_loss(prob: ToyProblem, forced_img=None):
    res = forward(prob.model, prob.src, prob.tgt, feats=prob.feats, forced_img=forced_img)
    return ops.neg(ops.sum(res.sent_loglik))


def gradcheck_model(mode: str, seed: int = 0, epsilon: float = 1e-5, tol: float = 1e-4,
                    **kwargs) -> GradCheckResult:
    """Gradient check of -log p(y | x, I) over every parameter of one configuration."""
    if mode in GRADCHECK_CONFIGS:
        overrides = dict(GRADCHECK_CONFIGS[mode])
    else:
        overrides = dict(img_attention=mode)
    overrides.update(kwargs)
    prob = toy_problem(seed, **overrides)
    return grad_check(lambda: full_loss(prob), prob.model.parameters(), epsilon, tol)


# ------------------------------------------------------- hard attention

@dataclass
class HardToy:
    """One decode step of hard attention over L annotations.

    alpha = softmax(v . tanh(s U_a + a_l W_a)), gamma ~ Multinoulli(alpha),
    log p(y | gamma) = log softmax(a_gamma W_o + b_o)[y]. Annotations are
    non-negative, like rectified CNN features.
    """

    params: dict           # name -> Parameter (float64)
    annotations: np.ndarray  # (1, L, D)
    state: np.ndarray        # (1, n)
    target: int

    @property
    def n_locations(self) -> int:
        return self.annotations.shape[1]

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def terms(self, rows: int, rng=None, forced=None):
        """(log p(y | gamma), log alpha_gamma) for ``rows`` copies of the step."""
        P = self.params
        ann = Tensor(np.repeat(self.annotations, rows, axis=0))
        s = Tensor(np.repeat(self.state, rows, axis=0))
        alpha = ops.softmax(attn_energies(ann, s, SoftAttnParams(P["U_a"], P["W_a"], P["v"])), axis=-1)
        _, context, log_sel = hard_attend(alpha, ann, rng=rng, forced=forced)
        logp = ops.log_softmax(ops.linear(context, P["W_o"], P["b_o"]), axis=-1)
        ll = ops.take_along(logp, np.full(rows, self.target), axis=-1)
        return ll, log_sel


def hard_toy(seed: int = 3, n_locations: int = 3, dim: int = 3, state_dim: int = 3, att_dim: int = 3,
             vocab: int = 3, weight_std: float = 2.0) -> HardToy:
    rng = make_rng(seed)
    shapes = dict(U_a=(state_dim, att_dim), W_a=(dim, att_dim), v=(att_dim,), W_o=(dim, vocab), b_o=(vocab,))
    params = {k: Parameter(k, rng.standard_normal(shape) * weight_std, np.float64)
              for k, shape in shapes.items()}
    ann = np.abs(rng.standard_normal((1, n_locations, dim)))
    state = rng.standard_normal((1, state_dim))
    return HardToy(params, ann, state, int(rng.integers(vocab)))


def _grads(toy: HardToy, fn) -> dict:
    toy.zero_grad()
    with Tape() as tape:
        root = fn()
    backward(tape, root)
    return {p.name: p.grad.copy() for p in toy.parameters()}


def exact_lower_bound_gradient(toy: HardToy) -> dict:
    """Gradient of sum_gamma alpha_gamma log p(y | gamma) by enumerating gamma.

    Differentiating through both alpha and log p(y | gamma) gives exactly the
    expectation the score-function estimator targets.
    """
    L = toy.n_locations

    def objective():
        ll, log_sel = toy.terms(L, forced=np.arange(L))
        return ops.sum(ops.exp(log_sel) * ll)

    return _grads(toy, objective)


def per_sample_gradients(toy: HardToy, baseline: float) -> tuple:
    """Per-gamma estimator values G_gamma and probabilities alpha_gamma (exact, by enumeration)."""
    L = toy.n_locations
    alpha = np.zeros(L)
    values = []
    for g in range(L):
        forced = np.array([g])
        with no_record():
            alpha[g] = float(np.exp(toy.terms(1, forced=forced)[1].data[0]))

        def surrogate(forced=forced):
            ll, log_sel = toy.terms(1, forced=forced)
            return ops.sum(ll + log_sel * (ll.data - baseline))

        values.append(_grads(toy, surrogate))
    return alpha, values


def monte_carlo_gradient(toy: HardToy, n_samples: int, rng: np.random.Generator, baseline: float,
                         chunk: int = 2000) -> dict:
    """Mean over ``n_samples`` i.i.d. draws of grad[ll] + (ll - b) grad[log alpha_gamma]."""
    sums = {p.name: np.zeros(p.shape) for p in toy.parameters()}
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)

        def surrogate(k=k):
            ll, log_sel = toy.terms(k, rng=rng)
            return ops.sum(ll + log_sel * (ll.data - baseline))

        for name, g in _grads(toy, surrogate).items():
            sums[name] += g
        done += k
    return {name: s / n_samples for name, s in sums.items()}


def pilot_baseline(toy: HardToy, rng: np.random.Generator, steps: int = 100) -> float:
    """Moving-average baseline after ``steps`` single-sample updates on an independent stream."""
    b = HardBaseline()
    with no_record():
        for _ in range(steps):
            b.update(float(toy.terms(1, rng=rng)[0].data[0]))
    return b.value


@dataclass
class UnbiasednessReport:
    exact: dict              # param name -> exact gradient of the lower bound
    estimate: dict           # param name -> mean of the Monte Carlo gradients
    max_rel_error: float     # over coordinates with |exact| > threshold
    worst: Optional[tuple]   # (param, flat index)
    n_checked: int
    n_samples: int
    baseline: float
    tol: float = 0.05

    @property
    def ok(self) -> bool:
        return self.n_checked > 0 and self.max_rel_error <= self.tol


def hard_unbiasedness(n_samples: int = 10_000, seed: int = 0, threshold: float = 1e-3,
                      toy: Optional[HardToy] = None, tol: float = 0.05) -> UnbiasednessReport:
    """Compare the mean Monte Carlo gradient with the enumerated exact gradient."""
    toy = toy or hard_toy()
    exact = exact_lower_bound_gradient(toy)
    rng = make_rng(seed)
    b = pilot_baseline(toy, child_rng(rng))
    estimate = monte_carlo_gradient(toy, n_samples, rng, b)
    worst, worst_at, count = 0.0, None, 0
    for name, g in exact.items():
        sel = np.abs(g) > threshold
        if not sel.any():
            continue
        rel = np.abs(estimate[name][sel] - g[sel]) / np.abs(g[sel])
        count += int(sel.sum())
        k = int(np.argmax(rel))
        if rel[k] > worst:
            worst, worst_at = float(rel[k]), (name, int(np.flatnonzero(sel)[k]))
    return UnbiasednessReport(exact, estimate, worst, worst_at, count, n_samples, b, tol)


def baseline_trajectory(loglik: float, steps: int) -> np.ndarray:
    """b_1..b_steps of the moving-average baseline under a constant log-likelihood."""
    b = HardBaseline()
    return np.array([b.update(loglik) for _ in range(steps)])


__all__ = [
    "GRADCHECK_CONFIGS", "HardToy", "ToyProblem", "UnbiasednessReport", "baseline_trajectory",
    "exact_lower_bound_gradient", "full_loss", "gradcheck_model", "hard_toy", "hard_unbiasedness",
    "monte_carlo_gradient", "per_sample_gradients", "pilot_baseline", "toy_problem",
]
