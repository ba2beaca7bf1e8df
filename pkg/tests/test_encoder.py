import numpy as np
import pytest

from bitro import numerics as nx
from bitro.encoder import PosTables, TransformerParams, positional_embed, quantize, self_attention, transformer_encode

from conftest import grad_check


def _layer(rng, d, ff=None):
    ff = ff or 4 * d
    return {"q": rng.normal(size=(d, d)), "k": rng.normal(size=(d, d)), "v": rng.normal(size=(d, d)),
            "o": rng.normal(size=(d, d)), "ffn_in": rng.normal(size=(d, ff)), "ffn_out": rng.normal(size=(ff, d))}


def _ln(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)


def _dense_block(x, layer, heads):
    """Direct per-head formula evaluation of one pre-norm block."""
    n, d = x.shape
    dh = d // heads
    z = _ln(x)
    q, k, v = z @ layer["q"], z @ layer["k"], z @ layer["v"]
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        outs.append(w @ v[:, sl])
    x = x + np.concatenate(outs, axis=1) @ layer["o"]
    return x + np.maximum(_ln(x) @ layer["ffn_in"], 0) @ layer["ffn_out"]


def test_matches_dense_oracle(rng):
    x, s = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
    layers = [_layer(rng, 8), _layer(rng, 8)]
    got = transformer_encode(x, s, TransformerParams(layers, 2)).data
    want = x + s
    for layer in layers:
        want = _dense_block(want, layer, 2)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_zero_output_projections_are_identity(rng):
    layer = _layer(rng, 4)
    layer["o"] = np.zeros((4, 4))
    layer["ffn_out"] = np.zeros((16, 4))
    x, s = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    np.testing.assert_array_equal(transformer_encode(x, s, TransformerParams([layer], 2)).data, x + s)


def test_single_token_attends_to_itself(rng):
    x = nx.Tensor(rng.normal(size=(1, 1, 4)))
    _, w = self_attention(x, _layer(rng, 4), 2, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((1, 2, 1, 1)))


def test_attention_rows_sum_to_one(rng):
    _, w = self_attention(nx.Tensor(rng.normal(size=(2, 6, 8))), _layer(rng, 8), 4, return_weights=True)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)


def test_token_permutation(rng):
    x, s = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    p = TransformerParams([_layer(rng, 8)], 4)
    perm = rng.permutation(6)
    np.testing.assert_allclose(transformer_encode(x[perm], s[perm], p).data,
                               transformer_encode(x, s, p).data[perm], atol=1e-9)


def test_padding_does_not_leak(rng):
    x, s = rng.normal(size=(4, 8)), rng.normal(size=(4, 8))
    p = TransformerParams([_layer(rng, 8)], 2)
    alone = transformer_encode(x, s, p).data
    xp = np.concatenate([x, rng.normal(size=(2, 8))])[None]
    sp = np.concatenate([s, rng.normal(size=(2, 8))])[None]
    mask = np.array([[True] * 4 + [False] * 2])
    np.testing.assert_allclose(transformer_encode(xp, sp, p, mask).data[0, :4], alone, atol=1e-12)


def test_shape_errors(rng):
    with pytest.raises(nx.ShapeError):
        transformer_encode(np.zeros((3, 4)), np.zeros((3, 6)), TransformerParams([], 2))
    with pytest.raises(nx.ShapeError):
        transformer_encode(np.zeros((3, 6)), np.zeros((3, 6)), TransformerParams([_layer(rng, 6)], 4))


def test_quantize_boundaries():
    ix, iy, clamped = quantize(np.array([[0.0, 0.0], [10.0, 10.0], [5.0, 2.5], [12.0, 0.0]]),
                               (0.0, 0.0, 10.0, 10.0), 4)
    assert ix.tolist() == [0, 3, 2, 3]
    assert iy.tolist() == [0, 3, 1, 0]
    assert clamped == 1


def test_same_bin_same_embedding(rng):
    t = PosTables(rng.normal(size=(1024, 4)), rng.normal(size=(1024, 4)), (0, 0, 1024, 1024))
    emb = positional_embed(np.array([[10.2, 20.1], [10.7, 20.9], [500.0, 3.0]]), t).data
    np.testing.assert_array_equal(emb[0], emb[1])
    assert emb.shape == (3, 8)
    assert not np.array_equal(emb[0], emb[2])


def test_transformer_gradients(rng):
    names = ("q", "k", "v", "o", "ffn_in", "ffn_out")
    layer = _layer(rng, 4, 8)
    inputs = {"x": rng.normal(size=(5, 4)), **{n: 0.5 * layer[n] for n in names}}
    s = rng.normal(size=(5, 4))
    probe = rng.normal(size=(5, 4))

    def build(t):
        p = TransformerParams([{n: t[n] for n in names}], 2)
        return (transformer_encode(t["x"], s, p) * probe).sum()

    assert grad_check(build, inputs) < 1e-4
