"""Tests for attention and feed-forward layers against direct numpy recomputation."""

import numpy as np
import pytest

from modalrec import autodiff as ad
from modalrec import layers
from modalrec.errors import ConfigError

DIM = 8
HEADS = 2


def make_params(seed: int):
    rng = np.random.default_rng(seed)
    attn = layers.init_attention(rng, DIM)
    ffn = layers.init_ffn(rng, DIM, 4 * DIM)
    return attn, ffn


def np_layernorm(x, gamma, beta, eps=1e-8):
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def np_attention(h, p, n_heads, mask=None):
    """Independent numpy recomputation of the attention layer."""
    n, dim = h.shape
    hd = dim // n_heads
    q = (h @ p.wq.data + p.bq.data).reshape(n, n_heads, hd).swapaxes(0, 1)
    k = (h @ p.wk.data + p.bk.data).reshape(n, n_heads, hd).swapaxes(0, 1)
    v = (h @ p.wv.data + p.bv.data).reshape(n, n_heads, hd).swapaxes(0, 1)
    scores = q @ k.swapaxes(1, 2) / np.sqrt(hd)
    if mask is not None:
        scores = scores + mask
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    ctx = (w @ v).swapaxes(0, 1).reshape(n, dim)
    out = ctx @ p.wo.data + p.bo.data
    return np_layernorm(h + out, p.ln_gamma.data, p.ln_beta.data)


class TestAttention:
    def test_matches_numpy_recomputation(self):
        attn, _ = make_params(0)
        rng = np.random.default_rng(1)
        h = rng.normal(size=(5, DIM))
        mask = layers.attention_mask(5)
        got = layers.attention_layer(ad.Tensor(h), attn, HEADS, mask=mask)
        np.testing.assert_allclose(got.data, np_attention(h, attn, HEADS, mask),
                                   atol=1e-10)

    def test_single_position(self):
        # With one position the attention weight is exactly 1, so the layer
        # reduces to a normalized residual of the value path.
        attn, _ = make_params(2)
        rng = np.random.default_rng(3)
        h = rng.normal(size=(1, DIM))
        got = layers.attention_layer(ad.Tensor(h), attn, HEADS)
        v = h @ attn.wv.data + attn.bv.data
        out = v @ attn.wo.data + attn.bo.data
        expected = np_layernorm(h + out, attn.ln_gamma.data, attn.ln_beta.data)
        np.testing.assert_allclose(got.data, expected, atol=1e-10)

    def test_causal_rows_ignore_future(self):
        attn, _ = make_params(4)
        rng = np.random.default_rng(5)
        h = rng.normal(size=(6, DIM))
        mask = layers.attention_mask(6)
        base = layers.attention_layer(ad.Tensor(h), attn, HEADS, mask=mask).data
        h2 = h.copy()
        h2[4:] = rng.normal(size=(2, DIM))  # perturb positions after row 3
        pert = layers.attention_layer(ad.Tensor(h2), attn, HEADS, mask=mask).data
        np.testing.assert_allclose(pert[:4], base[:4], atol=1e-12)

    def test_padding_keys_ignored(self):
        attn, _ = make_params(6)
        rng = np.random.default_rng(7)
        h = rng.normal(size=(3, DIM))
        out3 = layers.attention_layer(
            ad.Tensor(h), attn, HEADS, mask=layers.attention_mask(3, 3)).data
        padded = np.vstack([h, rng.normal(size=(2, DIM))])
        out5 = layers.attention_layer(
            ad.Tensor(padded), attn, HEADS, mask=layers.attention_mask(5, 3)).data
        np.testing.assert_allclose(out5[:3], out3, atol=1e-5)

    def test_batched_equals_loop(self):
        attn, _ = make_params(8)
        rng = np.random.default_rng(9)
        h = rng.normal(size=(3, 4, DIM))
        mask = layers.batch_attention_mask([4, 2, 3], 4)
        batched = layers.attention_layer(ad.Tensor(h), attn, HEADS, mask=mask).data
        for b in range(3):
            single = layers.attention_layer(
                ad.Tensor(h[b]), attn, HEADS, mask=mask[b, 0]).data
            np.testing.assert_allclose(batched[b], single, atol=1e-12)

    def test_grad_finite_difference(self):
        attn, _ = make_params(10)
        rng = np.random.default_rng(11)
        h = ad.Tensor(rng.normal(size=(3, DIM)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(3, DIM)))
        mask = layers.attention_mask(3, 2)
        params = {"h": h, **attn.named("attn")}

        def f():
            return ad.sum_(ad.mul(layers.attention_layer(h, attn, HEADS, mask=mask), w))

        report = ad.grad_check(f, params, max_coords_per_tensor=6,
                               rng=np.random.default_rng(0))
        assert report.ok(1e-4), report

    def test_bad_head_count(self):
        attn, _ = make_params(12)
        with pytest.raises(ConfigError):
            layers.attention_layer(ad.Tensor(np.zeros((2, DIM))), attn, 3)


class TestFfn:
    def test_zero_weights_reduce_to_layernorm(self):
        _, ffn = make_params(13)
        for t in (ffn.w1, ffn.b1, ffn.w2, ffn.b2):
            t.data[...] = 0.0
        rng = np.random.default_rng(14)
        h = rng.normal(size=(4, DIM))
        got = layers.ffn_layer(ad.Tensor(h), ffn)
        np.testing.assert_allclose(
            got.data, np_layernorm(h, ffn.ln_gamma.data, ffn.ln_beta.data),
            atol=1e-12)

    def test_positionwise(self):
        # The layer acts row-by-row, so permuting rows permutes outputs.
        _, ffn = make_params(15)
        rng = np.random.default_rng(16)
        h = rng.normal(size=(5, DIM))
        perm = rng.permutation(5)
        out = layers.ffn_layer(ad.Tensor(h), ffn).data
        out_perm = layers.ffn_layer(ad.Tensor(h[perm]), ffn).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)

    def test_grad_finite_difference(self):
        _, ffn = make_params(17)
        rng = np.random.default_rng(18)
        h = ad.Tensor(rng.normal(size=(3, DIM)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(3, DIM)))
        params = {"h": h, **ffn.named("ffn")}
        report = ad.grad_check(
            lambda: ad.sum_(ad.mul(layers.ffn_layer(h, ffn), w)), params,
            max_coords_per_tensor=6, rng=np.random.default_rng(1))
        assert report.ok(1e-4), report


class TestMasks:
    def test_causal_structure(self):
        m = layers.attention_mask(4)
        assert np.all(m[np.tril_indices(4)] == 0.0)
        assert np.all(m[np.triu_indices(4, k=1)] == layers.NEG_LOGIT)

    def test_padding_columns(self):
        m = layers.attention_mask(4, true_len=2, causal=False)
        assert np.all(m[:, :2] == 0.0)
        assert np.all(m[:, 2:] == layers.NEG_LOGIT)

    def test_bad_length(self):
        with pytest.raises(ConfigError):
            layers.attention_mask(4, true_len=5)

    def test_dropout_scaling_preserves_mean(self):
        rng = np.random.default_rng(19)
        x = ad.Tensor(np.ones((200, 50)))
        dropped = layers._dropout(x, 0.2, rng).data
        assert set(np.round(np.unique(dropped), 6)) <= {0.0, 1.25}
        assert abs(dropped.mean() - 1.0) < 0.02
