import itertools
import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import erf

from triground.autodiff import Tensor, default_dtype
from triground.checks import MODULE_CASES, MODULE_TOL, OP_TOL, _run
from triground.geometry import OrientedBox9
from triground.head import (SIZE_FLOOR, DecoderLayer, LayerOutput, LossWeights, Target, decode_box, encode_box,
                            focal_loss, hungarian, match_loss, similarity_logits, topk_select)


def np_ln(x, ln):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + ln.eps) * ln.weight.data + ln.bias.data


def np_attn(x, ctx, mha, mask=None):
    q = x @ mha.q.weight.data + mha.q.bias.data
    k = ctx @ mha.k.weight.data
    v = ctx @ mha.v.weight.data + mha.v.bias.data
    h = mha.heads
    dh = q.shape[-1] // h
    out = np.zeros_like(q)
    for hi in range(h):
        sl = slice(hi * dh, (hi + 1) * dh)
        s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / math.sqrt(dh)
        if mask is not None:
            s = np.where(mask[..., None, :], -np.inf, s)
        s = np.exp(s - s.max(-1, keepdims=True))
        out[..., sl] = (s / s.sum(-1, keepdims=True)) @ v[..., sl]
    return out @ mha.o.weight.data


def np_mlp(x, mlp):
    h = x @ mlp.fc1.weight.data + mlp.fc1.bias.data
    h = 0.5 * h * (1 + erf(h / math.sqrt(2)))
    return h @ mlp.fc2.weight.data + mlp.fc2.bias.data


class TestSimilarity:
    def test_parallel_and_orthogonal(self):
        vis = Tensor(np.array([[2.0, 0.0], [0.0, 3.0]]))
        txt = Tensor(np.array([[1.0, 0.0]]))
        out = similarity_logits(vis, txt, Tensor(np.array([1 / 0.07])), None).data
        np.testing.assert_allclose(out[:, 0], [1 / 0.07, 0.0], atol=1e-9)

    def test_cosine_oracle(self, rng):
        vis, txt = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
        out = similarity_logits(Tensor(vis), Tensor(txt), Tensor(np.array([2.5])), None).data
        for i in range(4):
            for j in range(3):
                cos = vis[i] @ txt[j] / (np.linalg.norm(vis[i]) * np.linalg.norm(txt[j]))
                assert out[i, j] == pytest.approx(2.5 * cos, abs=1e-9)

    def test_pad_mask(self, rng):
        out = similarity_logits(Tensor(rng.normal(size=(1, 3, 4))), Tensor(rng.normal(size=(1, 2, 4))),
                                Tensor(np.ones(1)), np.array([[False, True]])).data
        assert np.all(np.isneginf(out[..., 1])) and np.all(np.isfinite(out[..., 0]))


class TestTopK:
    def test_example(self):
        assert set(topk_select(np.array([0.1, 0.9, 0.5]), 2)) == {1, 2}

    def test_tie(self):
        assert list(topk_select(np.array([0.5, 0.5]), 1)) == [0]

    def test_k_larger_than_n(self, caplog):
        with caplog.at_level(logging.WARNING):
            idx = topk_select(np.array([0.3, 0.1]), 5)
        assert sorted(idx) == [0, 1] and "selecting all" in caplog.text

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=30), st.integers(1, 40))
    def test_sorted_best_first(self, vals, k):
        s = np.array(vals, dtype=float)
        idx = topk_select(s, k)
        ref = sorted(range(len(s)), key=lambda i: (-s[i], i))[:k]
        assert list(idx) == ref


class TestDecoder:
    def test_primitive_chain(self, rng):
        with default_dtype(np.float64):
            layer = DecoderLayer(8, 2, rng, True)
        for p in layer.parameters():
            p.data = rng.normal(0, 0.4, p.shape)
        q, qpos = rng.normal(size=(2, 3, 8)), rng.normal(size=(2, 3, 8))
        mem, text, img = rng.normal(size=(5, 8)), rng.normal(size=(2, 4, 8)), rng.normal(size=(6, 8))
        mask = np.array([[False, False, True, True], [False, False, False, False]])
        out = layer(Tensor(q), Tensor(qpos), Tensor(mem), Tensor(text), mask, Tensor(img)).data
        x = q + np_attn(np_ln(q, layer.ln_self) + qpos, np_ln(q, layer.ln_self) + qpos, layer.self_attn)
        x = x + np_attn(np_ln(x, layer.ln_3d) + qpos, mem, layer.attn_3d)
        x = x + np_attn(np_ln(x, layer.ln_text), text, layer.attn_text, mask)
        x = x + np_attn(np_ln(x, layer.ln_img), img, layer.attn_img)
        x = x + np_mlp(np_ln(x, layer.ln_mlp), layer.mlp)
        np.testing.assert_allclose(out, x, atol=1e-10)

    def test_single_query_single_feature(self, rng):
        with default_dtype(np.float64):
            layer = DecoderLayer(8, 2, rng, False)
        q = rng.normal(size=(1, 1, 8))
        mem = rng.normal(size=(1, 8))
        out = layer(Tensor(q), Tensor(np.zeros_like(q)), Tensor(mem)).data
        # one key means the attention weight is exactly 1
        v3 = (mem @ layer.attn_3d.v.weight.data + layer.attn_3d.v.bias.data) @ layer.attn_3d.o.weight.data
        vs = (np_ln(q, layer.ln_self) @ layer.self_attn.v.weight.data + layer.self_attn.v.bias.data)
        x = q + vs @ layer.self_attn.o.weight.data
        x = x + v3
        x = x + np_mlp(np_ln(x, layer.ln_mlp), layer.mlp)
        np.testing.assert_allclose(out, x, atol=1e-10)

    def test_zero_image_values_match_text_only(self, rng):
        layer = DecoderLayer(8, 2, rng, True)
        layer.attn_img.v.weight.data[...] = 0
        layer.attn_img.v.bias.data[...] = 0
        q, qpos = Tensor(rng.normal(size=(1, 3, 8))), Tensor(rng.normal(size=(1, 3, 8)))
        mem, text = Tensor(rng.normal(size=(4, 8))), Tensor(rng.normal(size=(1, 2, 8)))
        mask = np.zeros((1, 2), bool)
        a = layer(q, qpos, mem, text, mask, Tensor(rng.normal(size=(5, 8)))).data
        b = layer(q, qpos, mem, text, mask, None).data
        np.testing.assert_array_equal(a, b)

    def test_gradcheck(self):
        case, tol = MODULE_CASES["decoder_layer"]
        assert tol == MODULE_TOL
        res = _run("decoder_layer", case, tol, seed=0)
        assert res.passed, res


class TestBoxCodec:
    def test_zero_raw(self):
        box = decode_box(np.zeros(9), np.array([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(box.size, math.log(2) + SIZE_FLOOR)
        assert box.size[0] == pytest.approx(0.6933, abs=1e-4)
        np.testing.assert_array_equal(box.center, [1, 2, 3])
        np.testing.assert_array_equal(box.rotation, 0)

    def test_asymptotes(self):
        raw = np.array([0, 0, 0, -40, 40, 0, 40, -40, 0.0])
        box = decode_box(raw, np.zeros(3))
        assert box.size[0] == pytest.approx(SIZE_FLOOR, rel=1e-6)
        assert box.size[1] == pytest.approx(40.0 + SIZE_FLOOR, rel=1e-9)
        # both saturate at the half-turn, which wraps to +pi
        np.testing.assert_allclose(box.rotation[:2], [math.pi, math.pi])

    @given(st.lists(st.floats(-3, 3), min_size=9, max_size=9))
    def test_round_trip(self, raw):
        anchor = np.array([0.2, -0.1, 0.5])
        box = decode_box(np.array(raw), anchor)
        np.testing.assert_allclose(encode_box(box, anchor), raw, atol=1e-6)

    def test_gradcheck(self):
        case, tol = MODULE_CASES["decode_box"]
        assert tol == OP_TOL
        res = _run("decode_box", case, tol, seed=0)
        assert res.passed, res


def brute_force(cost):
    n, m = cost.shape
    small_rows = n <= m
    c = cost if small_rows else cost.T
    best, best_perm = np.inf, None
    for perm in itertools.permutations(range(c.shape[1]), c.shape[0]):   # lexicographic order
        v = sum(c[i, j] for i, j in enumerate(perm))
        if v < best - 1e-9:
            best, best_perm = v, perm
    pairs = [(i, j) for i, j in enumerate(best_perm)] if small_rows else [(j, i) for i, j in enumerate(best_perm)]
    return sorted(pairs), best


class TestHungarian:
    def test_two_by_two(self):
        assert hungarian([[1, 2], [2, 1]]) == [(0, 0), (1, 1)]

    def test_diagonal(self):
        c = np.full((4, 4), 5.0)
        np.fill_diagonal(c, 0)
        assert hungarian(c) == [(i, i) for i in range(4)]

    def test_all_ties_identity(self):
        assert hungarian(np.ones((3, 3))) == [(0, 0), (1, 1), (2, 2)]

    def test_rectangular(self):
        assert hungarian([[3, 1, 2]]) == [(0, 1)]
        assert hungarian([[3], [1], [2]]) == [(1, 0)]

    def test_brute_force(self, rng):
        for trial in range(200):
            # small integer costs create many tied optima
            c = rng.integers(0, 4, (6, 6)).astype(float)
            ref, best = brute_force(c)
            got = hungarian(c)
            assert got == ref, trial
            assert sum(c[i, j] for i, j in got) == best

    def test_rectangular_brute_force(self, rng):
        for _ in range(50):
            c = rng.integers(0, 3, (3, 5)).astype(float)
            assert hungarian(c) == brute_force(c)[0]
            assert hungarian(c.T) == brute_force(c.T)[0]


def one_layer(logits, boxes, center):
    return [LayerOutput(Tensor(np.asarray(logits, float)[None]), Tensor(np.asarray(boxes, float)[None]),
                        Tensor(np.asarray(center, float)[None]))]


def bce(x, t):
    return -(t * math.log(1 / (1 + math.exp(-x))) + (1 - t) * math.log(1 - 1 / (1 + math.exp(-x))))


class TestLosses:
    def boxes(self):
        return [OrientedBox9((0.5, 0.0, 0.2), (0.4, 0.6, 0.5), (0.3, 0, 0)),
                OrientedBox9((-0.4, 0.3, 0.1), (0.7, 0.3, 0.4), (-0.5, 0, 0))]

    def test_perfect_prediction(self):
        tgt = self.boxes()
        anchors = np.array([tgt[0].center, [2.0, 2.0, 2.0], tgt[1].center])
        raw = np.stack([encode_box(tgt[0], anchors[0]), np.zeros(9), encode_box(tgt[1], anchors[2])])
        out = one_layer([10.0, -10.0, 10.0], raw, [10.0, -10.0, 10.0])
        total, parts = match_loss(out, anchors[None], [Target(tgt)])
        assert parts["total"] <= 1e-3 and parts["box"] <= 1e-9

    def test_focal_reduces_to_half_ce(self, rng):
        x = rng.normal(size=20) * 3
        t = (rng.uniform(size=20) < 0.5).astype(float)
        fl = focal_loss(Tensor(x), t, alpha=0.5, gamma=0.0).data
        ref = [0.5 * bce(a, b) for a, b in zip(x, t)]
        np.testing.assert_allclose(fl, ref, rtol=1e-10)

    def test_single_query_scalar(self):
        w = LossWeights(alpha=1.3, beta=0.7, gamma=0.4)
        box = self.boxes()[0]
        anchor = np.array([0.3, 0.1, 0.0])
        raw = np.array([0.1, -0.2, 0.3, 0.0, 0.5, -0.3, 0.2, 0.1, -0.1])
        logit, ctr = 0.7, -0.4
        _, parts = match_loss(one_layer([logit], raw[None], [ctr]), anchor[None, None], [Target([box])], w)
        p = 1 / (1 + math.exp(-logit))
        cls = -0.25 * (1 - p) ** 2 * math.log(p)
        l1 = float(np.abs(raw - encode_box(box, anchor)).sum())
        d2 = float(((anchor - box.center) ** 2).sum())
        c = bce(ctr, math.exp(-d2 / (2 * 0.5 ** 2)))
        assert parts["cls"] == pytest.approx(cls, rel=1e-9)
        assert parts["box"] == pytest.approx(l1, rel=1e-9)
        assert parts["center"] == pytest.approx(c, rel=1e-9)
        assert parts["total"] == pytest.approx(1.3 * cls + 0.7 * l1 + 0.4 * c, rel=1e-9)

    def random_case(self, rng, k=5):
        anchors = rng.uniform(-1, 1, (1, k, 3))
        return rng.normal(size=k), rng.normal(size=(k, 9)), rng.normal(size=k), anchors

    def test_target_permutation_invariance(self, rng):
        logits, raw, ctr, anchors = self.random_case(rng)
        tgt = self.boxes() + [OrientedBox9((0.0, -0.6, 0.3), (0.5, 0.5, 0.5))]
        a = match_loss(one_layer(logits, raw, ctr), anchors, [Target(tgt)])[1]["total"]
        b = match_loss(one_layer(logits, raw, ctr), anchors, [Target(tgt[::-1])])[1]["total"]
        assert a == pytest.approx(b, rel=1e-12)

    def test_query_permutation_equivariance(self, rng):
        logits, raw, ctr, anchors = self.random_case(rng)
        perm = rng.permutation(5)
        tgt = [Target(self.boxes())]
        a = match_loss(one_layer(logits, raw, ctr), anchors, tgt)[1]["total"]
        b = match_loss(one_layer(logits[perm], raw[perm], ctr[perm]), anchors[:, perm], tgt)[1]["total"]
        assert abs(a - b) <= 1e-5

    @given(st.integers(0, 2 ** 31), st.integers(0, 3))
    def test_nonnegative(self, seed, n_t):
        r = np.random.default_rng(seed)
        logits, raw, ctr, anchors = self.random_case(r, 4)
        tgt = [OrientedBox9(r.uniform(-1, 1, 3), r.uniform(0.1, 1, 3), (r.uniform(-3, 3), 0, 0))
               for _ in range(n_t)]
        _, parts = match_loss(one_layer(logits * 4, raw, ctr), anchors, [Target(tgt)])
        assert all(v >= 0 for v in parts.values())

    def test_weighted_sum_of_parts(self, rng):
        logits, raw, ctr, anchors = self.random_case(rng)
        for w in (LossWeights(), LossWeights(alpha=2.0, beta=0.5, gamma=3.0)):
            _, p = match_loss(one_layer(logits, raw, ctr), anchors, [Target(self.boxes())], w)
            assert p["total"] == pytest.approx(w.alpha * p["cls"] + w.beta * p["box"] + w.gamma * p["center"],
                                               rel=1e-12)

    def test_deep_supervision_averages_layers(self, rng):
        l1, r1, c1, anchors = self.random_case(rng)
        l2, r2, c2, _ = self.random_case(rng)
        tgt = [Target(self.boxes())]
        a = match_loss(one_layer(l1, r1, c1), anchors, tgt)[1]["total"]
        b = match_loss(one_layer(l2, r2, c2), anchors, tgt)[1]["total"]
        both = match_loss(one_layer(l1, r1, c1) + one_layer(l2, r2, c2), anchors, tgt)[1]["total"]
        assert both == pytest.approx((a + b) / 2, rel=1e-12)

    def test_head_gradcheck(self):
        case, tol = MODULE_CASES["head_loss"]
        res = _run("head_loss", case, tol, seed=0)
        assert res.passed, res
