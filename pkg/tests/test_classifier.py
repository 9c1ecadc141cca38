"""Cross-attention classifier contracts and gradients."""

import numpy as np
import pytest

from sampleid.autodiff import Tensor, grad_check
from sampleid.classifier import (MhcaParams, classify, classify_t,
                                 cross_attention, cross_attention_t)


def params_and_inputs(seed=0, n=4, d=8, h=2):
    rng = np.random.default_rng(seed)
    params = MhcaParams.init(d, n_heads=h, rng=rng)
    q = rng.standard_normal((n, d))
    r = rng.standard_normal((n, d))
    return params, q, r


def naive_mhca(q, r, params):
    """Per-head loop oracle with explicit softmax."""
    h = params.n_heads
    d = params.node_dim
    d_h = d // h
    outs = []
    for head in range(h):
        qh = q @ params.w_q.data[head]
        kh = r @ params.w_k.data[head]
        vh = r @ params.w_v.data[head]
        logits = qh @ kh.T / np.sqrt(d_h)
        attn = np.exp(logits - logits.max(axis=1, keepdims=True))
        attn /= attn.sum(axis=1, keepdims=True)
        outs.append(attn @ vh)
    merged = np.concatenate(outs, axis=1)
    return merged @ params.w_o.data


class TestCrossAttention:
    def test_matches_naive_loop(self):
        params, q, r = params_and_inputs()
        got = cross_attention(q, r, params)
        np.testing.assert_allclose(got, naive_mhca(q, r, params), atol=1e-6)

    def test_single_key_softmax_is_identity(self):
        """N=1: the softmax over one key is 1, so C is just the projected
        value row."""
        params, q, r = params_and_inputs(n=1)
        got = cross_attention(q, r, params)
        h, d = params.n_heads, params.node_dim
        vals = np.concatenate([r @ params.w_v.data[head] for head in range(h)], axis=1)
        np.testing.assert_allclose(got, vals @ params.w_o.data, atol=1e-10)

    def test_identical_reference_rows_collapse(self):
        params, q, _ = params_and_inputs(seed=1)
        row = np.random.default_rng(2).standard_normal(8)
        r = np.tile(row, (4, 1))
        got = cross_attention(q, r, params)
        np.testing.assert_allclose(got, np.tile(got[0], (4, 1)), atol=1e-10)

    def test_attention_rows_sum_to_one(self):
        import sampleid.autodiff as ad
        params, q, r = params_and_inputs(seed=3)
        d_h = params.node_dim // params.n_heads
        qh = ad.matmul(Tensor(q), params.w_q)
        kh = ad.matmul(Tensor(r), params.w_k)
        logits = (qh @ ad.transpose(kh, (0, 2, 1))) * (1.0 / np.sqrt(d_h))
        attn = ad.softmax(logits, axis=-1)
        np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_shape_mismatch(self):
        params, q, r = params_and_inputs()
        with pytest.raises(ValueError, match="shape"):
            cross_attention(q, r[:2], params)


class TestClassify:
    def test_score_in_open_interval(self):
        params, q, r = params_and_inputs(seed=4)
        s = classify(q, r, params)
        assert 0.0 < s < 1.0

    def test_zero_head_gives_half(self):
        params, q, r = params_and_inputs(seed=5)
        params.w.data[...] = 0.0
        params.b.data[...] = 0.0
        assert classify(q, r, params) == pytest.approx(0.5, abs=1e-12)

    def test_monotone_in_bias(self):
        params, q, r = params_and_inputs(seed=6)
        scores = []
        for b in (-4.0, -1.0, 0.0, 1.0, 4.0):
            params.b.data[...] = b
            scores.append(classify(q, r, params))
        assert all(x < y for x, y in zip(scores, scores[1:]))
        assert scores[-1] > 0.9

    def test_composition_oracle(self):
        """classify == sigmoid(w . mean(cross_attention) + b)."""
        params, q, r = params_and_inputs(seed=7)
        c = naive_mhca(q, r, params).mean(axis=0)
        expected = 1.0 / (1.0 + np.exp(-(params.w.data @ c + float(params.b.data))))
        assert classify(q, r, params) == pytest.approx(expected, abs=1e-9)

    def test_asymmetry_expected(self):
        params, q, r = params_and_inputs(seed=8)
        assert classify(q, r, params) != pytest.approx(classify(r, q, params), abs=1e-12)

    def test_deterministic(self):
        params, q, r = params_and_inputs(seed=9)
        assert classify(q, r, params) == classify(q, r, params)


class TestGradients:
    def test_score_gradients_params_and_inputs(self):
        params, q, r = params_and_inputs(seed=10, n=3)
        qt, rt = Tensor(q), Tensor(r)
        blocks = dict(params.named())
        blocks["in.q"] = qt
        blocks["in.r"] = rt
        rep = grad_check(lambda: classify_t(qt, rt, params), blocks,
                         tol=1e-4, max_coords=12, rng=np.random.default_rng(1))
        assert rep.passed, str(rep)


class TestParams:
    def test_head_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            MhcaParams.init(10, n_heads=3)
