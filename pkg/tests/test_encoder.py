import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmnmt.autodiff import Tensor, grad_check, make_rng, ops
from mmnmt.encoder import EncoderParams, GRUParams, InitStateParams, encode, gru_step, init_state
from mmnmt.vocab import EOS, PAD, UNK, UNK_ID, Vocabulary

from conftest import param


def sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def scalar_gru(x, h, W, U, b):
    """Loop-by-loop GRU transition on python floats (the independent oracle)."""
    H = len(h)
    n_in = len(x)

    def pre(block, j):
        col = block * H + j
        return (b[col] + sum(x[i] * W[i][col] for i in range(n_in))
                + sum(h[k] * U[k][col] for k in range(H)))

    z = [sig(pre(0, j)) for j in range(H)]
    r = [sig(pre(1, j)) for j in range(H)]
    cand = []
    for j in range(H):
        col = 2 * H + j
        xin = b[col] + sum(x[i] * W[i][col] for i in range(n_in))
        hin = sum(h[k] * U[k][col] for k in range(H))
        cand.append(math.tanh(xin + r[j] * hin))
    return [(1 - z[j]) * cand[j] + z[j] * h[j] for j in range(H)]


def random_gru(rng, n_in, H, std=0.5, prefix=""):
    return GRUParams(param(prefix + "W", rng.standard_normal((n_in, 3 * H)) * std),
                     param(prefix + "U", rng.standard_normal((H, 3 * H)) * std),
                     param(prefix + "b", rng.standard_normal(3 * H) * std))


def random_encoder(rng, V=7, E=3, H=4, dec=5, std=0.5, tied=False):
    fwd = random_gru(rng, E, H, std, "fwd_")
    bwd = fwd if tied else random_gru(rng, E, H, std, "bwd_")
    init = InitStateParams(param("W1", rng.standard_normal((2 * H, H)) * std), param("b1", np.zeros(H)),
                           param("W2", rng.standard_normal((H, dec)) * std), param("b2", np.zeros(dec)))
    return EncoderParams(param("emb", rng.standard_normal((V, E))), fwd, bwd, init)


# ---------------------------------------------------------------- gru_step

def test_gru_zero_weights_halves_previous_state():
    H = 3
    p = GRUParams(param("W", np.zeros((2, 3 * H))), param("U", np.zeros((H, 3 * H))), param("b", np.zeros(3 * H)))
    h_prev = np.array([[0.4, -1.0, 2.0]])
    h = gru_step(Tensor(np.array([[5.0, -3.0]])), Tensor(h_prev), p).data
    np.testing.assert_array_equal(h, 0.5 * h_prev)


def test_gru_zero_weights_zero_state_stays_zero():
    H = 3
    p = GRUParams(param("W", np.zeros((2, 3 * H))), param("U", np.zeros((H, 3 * H))), param("b", np.zeros(3 * H)))
    h = gru_step(Tensor(np.ones((1, 2))), Tensor(np.zeros((1, H))), p).data
    np.testing.assert_array_equal(h, 0.0)


def test_gru_matches_scalar_oracle(rng):
    p = random_gru(rng, 3, 4)
    x = rng.standard_normal(3)
    h = rng.standard_normal(4)
    oracle = scalar_gru(list(x), list(h), p.W.data.tolist(), p.U.data.tolist(), p.b.data.tolist())
    out = gru_step(Tensor(x[None]), Tensor(h[None]), p).data[0]
    np.testing.assert_allclose(out, oracle, rtol=0, atol=1e-12)


# ------------------------------------------------------------------ encode

def test_encode_matches_compositional_oracle(rng):
    enc = random_encoder(rng)
    tokens = [3, 5, 4]
    emb = enc.emb.data
    args_f = (enc.fwd.W.data.tolist(), enc.fwd.U.data.tolist(), enc.fwd.b.data.tolist())
    args_b = (enc.bwd.W.data.tolist(), enc.bwd.U.data.tolist(), enc.bwd.b.data.tolist())
    H = 4
    h, fwd = [0.0] * H, []
    for t in tokens:
        h = scalar_gru(list(emb[t]), h, *args_f)
        fwd.append(h)
    h, bwd = [0.0] * H, [None] * 3
    for i in (2, 1, 0):
        h = scalar_gru(list(emb[tokens[i]]), h, *args_b)
        bwd[i] = h
    oracle = np.array([f + b for f, b in zip(fwd, bwd)])
    C = encode(np.array([tokens]), enc).data[0]
    assert C.shape == (3, 2 * H)
    np.testing.assert_allclose(C, oracle, rtol=0, atol=1e-12)


def test_single_token_both_directions_see_it(rng):
    enc = random_encoder(rng, tied=True)
    C = encode(np.array([[4]]), enc).data
    assert C.shape == (1, 1, 8)
    np.testing.assert_array_equal(C[0, 0, :4], C[0, 0, 4:])


def test_palindrome_with_tied_weights_is_symmetric(rng):
    enc = random_encoder(rng, tied=True)
    C = encode(np.array([[3, 5, 6, 5, 3]]), enc).data[0]
    swapped = np.concatenate([C[::-1, 4:], C[::-1, :4]], axis=1)
    np.testing.assert_allclose(C, swapped, atol=1e-12)


def test_encode_rejects_empty_input(rng):
    with pytest.raises(ValueError, match="nonempty"):
        encode(np.zeros((1, 0), dtype=np.int64), random_encoder(rng))


def test_padding_does_not_change_real_positions(rng):
    enc = random_encoder(rng)
    short = encode(np.array([[3, 4]]), enc).data[0]
    padded = encode(np.array([[3, 4, 2, 2]]), enc, mask=np.array([[True, True, False, False]])).data[0]
    np.testing.assert_allclose(padded[:2], short, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, 3))
def test_every_token_influences_the_annotations(seed, pos):
    rng = make_rng(seed)
    enc = random_encoder(rng)
    tokens = rng.integers(3, 7, size=(1, 4))
    other = tokens.copy()
    other[0, pos] = 3 + (tokens[0, pos] - 3 + 1) % 4
    assert not np.allclose(encode(tokens, enc).data, encode(other, enc).data)


def test_encoding_is_deterministic(rng):
    enc = random_encoder(rng)
    toks = np.array([[3, 4, 5]])
    np.testing.assert_array_equal(encode(toks, enc).data, encode(toks, enc).data)


def test_encoder_gradients(rng):
    enc = random_encoder(rng)
    params = [enc.emb, enc.fwd.W, enc.fwd.U, enc.fwd.b, enc.bwd.W, enc.bwd.U, enc.bwd.b]
    weights = rng.standard_normal((1, 3, 8))
    res = grad_check(lambda: ops.sum(ops.tanh(encode(np.array([[3, 6, 4]]), enc)) * weights), params)
    assert res.ok, str(res)


# -------------------------------------------------------------- init_state

def test_init_state_zero_weights_is_zero(rng):
    H, dec = 2, 3
    p = InitStateParams(param("W1", np.zeros((2 * H, H))), param("b1", np.zeros(H)),
                        param("W2", np.zeros((H, dec))), param("b2", np.zeros(dec)))
    s0 = init_state(Tensor(rng.standard_normal((1, 3, 2 * H))), p).data
    np.testing.assert_array_equal(s0, 0.0)


def test_init_state_hand_computed():
    # identity-like first layer picks h_M[0] and h_M[1]; second layer sums them
    p = InitStateParams(param("W1", [[1.0, 0.0], [0.0, 1.0], [0.0, 0.0], [0.0, 0.0]]), param("b1", [0.0, 0.0]),
                        param("W2", [[1.0], [1.0]]), param("b2", [0.0]))
    C = np.zeros((1, 2, 4))
    C[0, 1] = [0.3, -0.7, 9.0, 9.0]
    expected = math.tanh(math.tanh(0.3) + math.tanh(-0.7))
    s0 = init_state(Tensor(C), p).data
    assert s0.shape == (1, 1)
    assert abs(s0[0, 0] - expected) < 1e-15


def test_init_state_uses_last_real_position(rng):
    enc = random_encoder(rng)
    C = rng.standard_normal((1, 3, 8))
    masked = init_state(Tensor(C), enc.init, mask=np.array([[True, True, False]])).data
    truncated = init_state(Tensor(C[:, :2]), enc.init).data
    np.testing.assert_array_equal(masked, truncated)


def test_init_state_is_pure(rng):
    enc = random_encoder(rng)
    C = Tensor(rng.standard_normal((1, 3, 8)))
    np.testing.assert_array_equal(init_state(C, enc.init).data, init_state(C, enc.init).data)


# -------------------------------------------------------------- vocabulary

def test_vocabulary_reserved_indices_and_unknowns(tmp_path):
    v = Vocabulary.build([["a", "b"], ["b", "c"]])
    assert v.itos[:3] == [EOS, UNK, PAD]
    assert v.encode(["a", "zzz"], add_eos=True) == [3, UNK_ID, 0]
    path = tmp_path / "v.txt"
    v.save(path)
    assert path.read_text().splitlines()[:3] == [EOS, UNK, PAD]
    w = Vocabulary.load(path)
    assert w == v and w.sha256() == v.sha256()


def test_vocabulary_min_count():
    v = Vocabulary.build([["a", "b", "a"]], min_count=2)
    assert "a" in v and "b" not in v


def test_vocabulary_rejects_missing_header():
    with pytest.raises(ValueError, match="reserved"):
        Vocabulary.from_list(["a", "b", "c"])


@given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=5), min_size=1, max_size=5))
def test_vocabulary_is_a_bijection(sents):
    v = Vocabulary.build(sents)
    for s in sents:
        assert v.decode(v.encode(s)) == s
    assert len(set(v.itos)) == len(v)
