import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmnmt.attention import (GatingParams, GroundingParams, HardBaseline, LocalAttnParams, SoftAttnParams,
                             attn_energies, default_half_width, gate_context, ground_annotations,
                             hard_attend, local_attend, soft_attend, window_bounds)
from mmnmt.autodiff import Tensor, grad_check, make_rng, ops

from conftest import param


def soft_params(rng, n=3, D=4, A=5, std=0.7, prefix=""):
    return SoftAttnParams(param(prefix + "U_a", rng.standard_normal((n, A)) * std),
                          param(prefix + "W_a", rng.standard_normal((D, A)) * std),
                          param(prefix + "v", rng.standard_normal(A) * std))


def scalar_energies(ann, s, U, W, v):
    """e_l = sum_k v_k tanh(sum_j s_j U_jk + sum_d a_ld W_dk), on python floats."""
    out = []
    for a in ann:
        e = 0.0
        for k in range(len(v)):
            pre = sum(s[j] * U[j][k] for j in range(len(s))) + sum(a[d] * W[d][k] for d in range(len(a)))
            e += v[k] * math.tanh(pre)
        out.append(e)
    return out


def scalar_softmax(e):
    m = max(e)
    ex = [math.exp(x - m) for x in e]
    z = sum(ex)
    return [x / z for x in ex]


# ----------------------------------------------------------------- energies

def test_energies_match_scalar_oracle(rng):
    p = soft_params(rng)
    ann = rng.standard_normal((3, 4))
    s = rng.standard_normal(3)
    oracle = scalar_energies(ann.tolist(), s.tolist(), p.U_a.data.tolist(), p.W_a.data.tolist(), p.v.data.tolist())
    e = attn_energies(Tensor(ann[None]), Tensor(s[None]), p).data[0]
    np.testing.assert_allclose(e, oracle, rtol=0, atol=1e-12)


def test_zero_v_gives_uniform_weights(rng):
    p = soft_params(rng)
    p.v.data[...] = 0
    alpha, _ = soft_attend(Tensor(rng.standard_normal((1, 5, 4))), Tensor(rng.standard_normal((1, 3))), p)
    np.testing.assert_allclose(alpha.data, 0.2, atol=1e-15)


def test_identical_annotations_give_uniform_weights(rng):
    p = soft_params(rng)
    ann = np.tile(rng.standard_normal(4), (1, 6, 1))
    alpha, _ = soft_attend(Tensor(ann), Tensor(rng.standard_normal((1, 3))), p)
    np.testing.assert_allclose(alpha.data, 1 / 6, atol=1e-15)


def test_padding_gets_zero_weight(rng):
    p = soft_params(rng)
    alpha, _ = soft_attend(Tensor(rng.standard_normal((1, 4, 4))), Tensor(rng.standard_normal((1, 3))), p,
                           mask=np.array([[True, True, False, False]]))
    assert np.all(alpha.data[0, 2:] == 0)
    np.testing.assert_allclose(alpha.data.sum(), 1.0)


def test_energy_width_mismatch_is_rejected(rng):
    p = soft_params(rng)
    with pytest.raises(ValueError, match="annotation width"):
        attn_energies(Tensor(np.zeros((1, 3, 5))), Tensor(np.zeros((1, 3))), p)
    with pytest.raises(ValueError, match="attention width"):
        SoftAttnParams(param("U", np.zeros((3, 4))), param("W", np.zeros((4, 5))), param("v", np.zeros(5)))


# --------------------------------------------------------------------- soft

def test_uniform_soft_attention_gives_mean_annotation(rng):
    p = soft_params(rng)
    p.v.data[...] = 0
    ann = rng.standard_normal((1, 5, 4))
    _, ctx = soft_attend(Tensor(ann), Tensor(rng.standard_normal((1, 3))), p)
    np.testing.assert_allclose(ctx.data[0], ann[0].mean(axis=0), atol=1e-14)


def test_saturated_soft_attention_picks_one_annotation():
    # v = [1], U = 0, W_a = identity-like picks feature 0, energy gap of 50
    p = SoftAttnParams(param("U", np.zeros((2, 1))), param("W", [[1.0], [0.0]]), param("v", [1.0]))
    ann = np.array([[[0.0, 3.0], [50.0, -2.0], [0.0, 1.0]]])
    p.W_a.data[...] = [[1.0], [0.0]]
    # tanh saturates, so scale v to keep the 50 gap in energy space
    p.v.data[...] = [50.0]
    _, ctx = soft_attend(Tensor(ann), Tensor(np.zeros((1, 2))), p)
    np.testing.assert_allclose(ctx.data[0], ann[0, 1], atol=1e-6)


def test_soft_context_matches_brute_force(rng):
    p = soft_params(rng, D=3)
    ann = rng.standard_normal((4, 3))
    s = rng.standard_normal(3)
    w = scalar_softmax(scalar_energies(ann.tolist(), s.tolist(), p.U_a.data.tolist(), p.W_a.data.tolist(),
                                       p.v.data.tolist()))
    oracle = [sum(w[l] * ann[l][d] for l in range(4)) for d in range(3)]
    alpha, ctx = soft_attend(Tensor(ann[None]), Tensor(s[None]), p)
    np.testing.assert_allclose(alpha.data[0], w, atol=1e-12)
    np.testing.assert_allclose(ctx.data[0], oracle, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 9), st.floats(-30, 30))
def test_soft_alpha_is_a_distribution_and_argmax_shift_invariant(seed, L, shift):
    rng = make_rng(seed)
    p = soft_params(rng, std=2.0)
    ann = Tensor(rng.standard_normal((2, L, 4)))
    s = Tensor(rng.standard_normal((2, 3)))
    e = attn_energies(ann, s, p)
    alpha = ops.softmax(e, axis=-1).data
    assert np.all(alpha >= 0)
    np.testing.assert_allclose(alpha.sum(axis=-1), 1.0, atol=1e-6)
    shifted = ops.softmax(e + shift, axis=-1).data
    np.testing.assert_array_equal(np.argmax(alpha, -1), np.argmax(shifted, -1))


def test_doubled_projection_shapes():
    from mmnmt.model import Model, ModelConfig
    m = Model(ModelConfig(10, 10, emb_dim=4, enc_dim=4, dec_dim=6, img_dim=5, doubling=True))
    p = m.img_attn()
    assert p.U_a.shape == (6, 10) and p.W_a.shape == (5, 10) and p.v.shape == (10,)


# --------------------------------------------------------------------- hard

def test_one_hot_alpha_always_selects_that_index(rng):
    ann = rng.standard_normal((1, 4, 3))
    alpha = Tensor(np.array([[0.0, 0.0, 1.0, 0.0]]))
    for _ in range(20):
        gamma, ctx, log_sel = hard_attend(alpha, Tensor(ann), rng)
        assert gamma[0, 2] == 1 and gamma.sum() == 1
        np.testing.assert_array_equal(ctx.data[0], ann[0, 2])
        assert log_sel.data[0] == 0.0


def test_uniform_alpha_draw_frequencies():
    rng = make_rng(11)
    alpha = Tensor(np.full((10000, 4), 0.25))
    gamma, _, _ = hard_attend(alpha, Tensor(np.zeros((10000, 4, 1))), rng)
    freq = gamma.mean(axis=0)
    assert np.all(np.abs(freq - 0.25) <= 0.02)


def test_hard_rejects_unnormalized_alpha():
    with pytest.raises(ValueError, match="distribution"):
        hard_attend(Tensor(np.array([[0.5, 0.6]])), Tensor(np.zeros((1, 2, 1))), make_rng(0))


def test_hard_without_rng_takes_argmax():
    alpha = Tensor(np.array([[0.2, 0.5, 0.3]]))
    gamma, _, _ = hard_attend(alpha, Tensor(np.zeros((1, 3, 2))))
    assert gamma[0, 1] == 1


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 8))
def test_hard_gamma_one_hot_and_context_bit_equal(seed, L):
    rng = make_rng(seed)
    p = soft_params(rng, std=2.0)
    ann = rng.standard_normal((3, L, 4)).astype(np.float32)
    alpha = ops.softmax(attn_energies(Tensor(ann), Tensor(rng.standard_normal((3, 3))), p), axis=-1)
    gamma, ctx, _ = hard_attend(alpha, Tensor(ann), rng)
    assert np.all(gamma.sum(axis=-1) == 1) and set(np.unique(gamma)) <= {0, 1}
    idx = np.argmax(gamma, axis=-1)
    for b in range(3):
        assert ctx.data[b].tobytes() == ann[b, idx[b]].tobytes()


# -------------------------------------------------------------------- local

def local_params(rng, n=3, A=5, D=2, std=0.7):
    return LocalAttnParams(param("U_p", rng.standard_normal((n, A)) * std), param("v_p", rng.standard_normal(A) * std), D)


def test_zero_vp_centers_at_half_length(rng):
    loc = local_params(rng)
    loc.v_p.data[...] = 0
    res = local_attend(Tensor(rng.standard_normal((1, 8, 4))), Tensor(rng.standard_normal((1, 3))),
                       soft_params(rng), loc)
    assert res.position.data[0] == 4.0


def test_integer_position_keeps_its_weight():
    # v_p = 0 puts p_t at L/2 = 4 exactly, so the Gaussian factor there is 1
    rng = make_rng(5)
    loc = local_params(rng)
    loc.v_p.data[...] = 0
    res = local_attend(Tensor(rng.standard_normal((1, 8, 4))), Tensor(rng.standard_normal((1, 3))),
                       soft_params(rng), loc)
    assert res.alpha.data[0, 4] == res.pre_alpha.data[0, 4]


def test_local_matches_brute_force(rng):
    L, D_half = 8, 2
    soft = soft_params(rng, D=4)
    loc = local_params(rng, D=D_half, std=1.5)
    ann = rng.standard_normal((L, 4))
    s = rng.standard_normal(3)
    # oracle, built from scratch
    score = sum(loc.v_p.data[k] * math.tanh(sum(s[j] * loc.U_p.data[j, k] for j in range(3)))
                for k in range(loc.v_p.shape[0]))
    p_t = L / (1 + math.exp(-score))
    lo, hi = max(0, math.ceil(p_t - D_half)), min(L - 1, math.floor(p_t + D_half))
    window = list(range(lo, hi + 1))
    e = scalar_energies(ann[window].tolist(), s.tolist(), soft.U_a.data.tolist(), soft.W_a.data.tolist(),
                        soft.v.data.tolist())
    w = scalar_softmax(e)
    sigma = D_half / 2
    alpha = [0.0] * L
    for i, wi in zip(window, w):
        alpha[i] = wi * math.exp(-((i - p_t) ** 2) / (2 * sigma ** 2))
    ctx = [sum(alpha[i] * ann[i][d] for i in range(L)) for d in range(4)]

    res = local_attend(Tensor(ann[None]), Tensor(s[None]), soft, loc)
    assert abs(res.position.data[0] - p_t) < 1e-12
    np.testing.assert_allclose(res.alpha.data[0], alpha, atol=1e-12)
    np.testing.assert_allclose(res.context.data[0], ctx, atol=1e-12)


def test_window_is_clipped_and_never_empty():
    w = window_bounds(np.array([0.0, 7.9, 3.5]), 2, 8)
    np.testing.assert_array_equal(w, [[0, 2], [6, 7], [2, 5]])


@pytest.mark.parametrize("L,expected", [(196, 49), (16, 4), (4, 1), (1, 1), (1000, 49)])
def test_default_half_width(L, expected):
    assert default_half_width(L) == expected


def test_sigma_is_half_the_window():
    assert LocalAttnParams(None, None, 3).sigma == 1.5
    with pytest.raises(ValueError):
        LocalAttnParams(None, None, 0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 12), st.integers(1, 4))
def test_local_invariants(seed, L, half):
    rng = make_rng(seed)
    res = local_attend(Tensor(rng.standard_normal((3, L, 4))), Tensor(rng.standard_normal((3, 3))),
                       soft_params(rng, std=2.0), local_params(rng, D=half, std=2.0))
    a, pre, p = res.alpha.data, res.pre_alpha.data, res.position.data
    idx = np.arange(L)
    outside = (idx[None] < p[:, None] - half) | (idx[None] > p[:, None] + half)
    assert np.all(a[outside] == 0)
    assert np.all(a <= pre) and np.all(a >= 0)
    total = a.sum(axis=-1)
    assert np.all(total > 0) and np.all(total <= 1 + 1e-12)


# ------------------------------------------------------------------- gating

def test_gate_zero_weights_is_one_half(rng):
    p = GatingParams(param("W", np.zeros(3)), param("b", [0.0]))
    ctx = rng.standard_normal((1, 4))
    gated, beta = gate_context(Tensor(rng.standard_normal((1, 3))), Tensor(ctx), p)
    assert beta.data[0] == 0.5
    np.testing.assert_array_equal(gated.data, 0.5 * ctx)


@pytest.mark.parametrize("bias,scale", [(50.0, 1.0), (-50.0, 0.0)])
def test_gate_saturation(bias, scale, rng):
    p = GatingParams(param("W", np.zeros(3)), param("b", [bias]))
    ctx = rng.standard_normal((1, 4))
    gated, beta = gate_context(Tensor(rng.standard_normal((1, 3))), Tensor(ctx), p)
    assert abs(beta.data[0] - scale) <= 1e-6
    np.testing.assert_allclose(gated.data, scale * ctx, atol=1e-6)


@given(st.integers(0, 2**31))
def test_beta_in_unit_interval(seed):
    rng = make_rng(seed)
    p = GatingParams(param("W", rng.standard_normal(3) * 10), param("b", rng.standard_normal(1) * 10))
    _, beta = gate_context(Tensor(rng.standard_normal((4, 3))), Tensor(rng.standard_normal((4, 2))), p)
    assert np.all((beta.data >= 0) & (beta.data <= 1))


# ---------------------------------------------------------------- grounding

def grounding_params(rng, D=4, G=5, n=None, std=0.7):
    proj = None if n is None else param("proj", rng.standard_normal((n, D)) * std)
    return GroundingParams(param("c1W", rng.standard_normal((D, G)) * std), param("c1b", rng.standard_normal(G) * std),
                           param("c2W", rng.standard_normal(G) * std), proj)


def test_zero_conv_weights_scale_by_one_over_L(rng):
    p = grounding_params(rng)
    for t in (p.conv1_W, p.conv1_b, p.conv2_W):
        t.data[...] = 0
    ann = rng.standard_normal((1, 5, 4))
    out = ground_annotations(Tensor(ann), Tensor(rng.standard_normal((1, 4))), p).data
    np.testing.assert_allclose(out, ann / 5, atol=1e-15)


def test_single_location_is_unchanged(rng):
    ann = rng.standard_normal((1, 1, 4))
    out = ground_annotations(Tensor(ann), Tensor(rng.standard_normal((1, 4))), grounding_params(rng)).data
    np.testing.assert_array_equal(out, ann)


def test_grounding_matches_scalar_oracle(rng):
    D, G, n, L = 4, 3, 2, 4
    p = grounding_params(rng, D, G, n)
    ann = rng.standard_normal((L, D))
    s0 = rng.standard_normal(n)
    s = [sum(s0[j] * p.proj.data[j, d] for j in range(n)) for d in range(D)]
    scores = []
    for a in ann:
        merged = [math.tanh(a[d] + s[d]) for d in range(D)]
        norm = math.sqrt(sum(m * m for m in merged))
        merged = [m / norm for m in merged]
        hidden = [math.tanh(p.conv1_b.data[g] + sum(merged[d] * p.conv1_W.data[d, g] for d in range(D)))
                  for g in range(G)]
        scores.append(sum(hidden[g] * p.conv2_W.data[g] for g in range(G)))
    w = scalar_softmax(scores)
    oracle = [[w[i] * ann[i][d] for d in range(D)] for i in range(L)]
    out, weights = ground_annotations(Tensor(ann[None]), Tensor(s0[None]), p, return_weights=True)
    np.testing.assert_allclose(weights.data[0], w, atol=1e-12)
    np.testing.assert_allclose(out.data[0], oracle, atol=1e-12)


def test_grounding_without_projection_needs_equal_widths(rng):
    with pytest.raises(ValueError, match="projection"):
        ground_annotations(Tensor(np.zeros((1, 2, 4))), Tensor(np.zeros((1, 3))), grounding_params(rng))


def test_grounding_weights_shared_across_locations(rng):
    # identical annotations at every location must get identical weights
    ann = np.tile(rng.standard_normal(4), (1, 5, 1))
    _, w = ground_annotations(Tensor(ann), Tensor(rng.standard_normal((1, 4))), grounding_params(rng),
                              return_weights=True)
    np.testing.assert_allclose(w.data, 0.2, atol=1e-15)


# -------------------------------------------------------------- gradients

def test_soft_local_gating_grounding_gradients(rng):
    soft = soft_params(rng, D=4)
    loc = local_params(rng, D=1)
    gate = GatingParams(param("gW", rng.standard_normal(3)), param("gb", [0.1]))
    gnd = grounding_params(rng, D=4, G=3, n=3)
    ann = rng.standard_normal((2, 5, 4))
    s = param("s", rng.standard_normal((2, 3)))
    weights = rng.standard_normal((2, 4))

    def loss():
        grounded = ground_annotations(Tensor(ann), s, gnd)
        _, c_soft = soft_attend(grounded, s, soft)
        c_loc = local_attend(grounded, s, soft, loc).context
        gated, _ = gate_context(s, c_soft + c_loc, gate)
        return ops.sum(gated * weights)

    params = [soft.U_a, soft.W_a, soft.v, loc.U_p, loc.v_p, gate.W, gate.b,
              gnd.conv1_W, gnd.conv1_b, gnd.conv2_W, gnd.proj, s]
    res = grad_check(loss, params)
    assert res.ok, str(res)


# ----------------------------------------------------------------- baseline

def test_baseline_closed_form():
    b = HardBaseline()
    ell = -3.7
    for k in range(1, 101):
        b.update(ell)
        assert abs(b.value - ell * (1 - 0.9 ** k)) <= 1e-12


@given(st.floats(-50, 0), st.integers(1, 100))
def test_baseline_converges_geometrically(ell, k):
    b = HardBaseline()
    for _ in range(k):
        b.update(ell)
    assert abs(b.value - ell) <= abs(ell) * 0.9 ** k + 1e-12
