import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angiosynth.attention import (AttentionMatrix, CrossSliceLayer, SliceFeature,
                                  apply_cross_slice, attention_weights, cross_slice_weights,
                                  leaky_relu, slice_similarity, window_mask)
from angiosynth.oracles import central_difference


def test_similarity_examples():
    v = np.array([1.0, 2.0, -0.5])
    assert slice_similarity(v, v) == pytest.approx(1.0)
    assert slice_similarity([1, 0], [0, 3]) == pytest.approx(0.0)
    assert slice_similarity(v, -v) == pytest.approx(-1.0)


def test_similarity_zero_norm():
    with pytest.raises(ValueError):
        slice_similarity([0, 0], [1, 0])


@given(st.integers(0, 1000))
def test_similarity_symmetric(seed):
    a, b = np.random.default_rng(seed).normal(size=(2, 4))
    assert slice_similarity(a, b) == slice_similarity(b, a)


def test_identical_slices_uniform_rows():
    feats = [SliceFeature(np.array([1.0, 2.0]), 1.0) for _ in range(5)]
    a = cross_slice_weights(feats, w=3.0, r=2).weights
    for i in range(5):
        window = [k for k in range(5) if abs(i - k) <= 2]
        assert np.allclose(a[i, window], 1 / len(window))


def test_single_slice():
    a = cross_slice_weights([SliceFeature(np.array([0.3, 0.1]), 0.4)])
    assert a.weights.shape == (1, 1) and a.weights[0, 0] == 1.0


def test_two_slice_hand_value():
    # S01 = 0.5 with masks (1, 1), w = 0.2, r = 1
    h0 = np.array([1.0, 0.0])
    h1 = np.array([0.5, math.sqrt(0.75)])
    a = cross_slice_weights([SliceFeature(h0, 1.0), SliceFeature(h1, 1.0)], w=0.2, r=1).weights
    expected = math.exp(1.2) / (math.exp(1.2) + math.exp(0.7))
    assert a[0, 0] == pytest.approx(expected, abs=1e-9)
    assert a[0, 1] == pytest.approx(1 - expected, abs=1e-9)


def test_negative_logit_uses_leaky_slope():
    h0, h1 = np.array([1.0, 0.0]), np.array([-1.0, 0.0])
    a = attention_weights(np.stack([h0, h1]), np.zeros(2), w=0.0, radius=1)
    expected = math.exp(1.0) / (math.exp(1.0) + math.exp(-0.01))
    assert a[0, 0] == pytest.approx(expected, abs=1e-12)


def test_empty_rejected():
    with pytest.raises(ValueError):
        cross_slice_weights([])


def test_outside_window_is_zero():
    rng = np.random.default_rng(0)
    a = attention_weights(rng.normal(size=(7, 3)), rng.uniform(size=7), 1.0, 2)
    assert np.all(a[~window_mask(7, 2)] == 0)


@given(st.integers(1, 12), st.integers(1, 4), st.floats(-5, 5), st.integers(0, 10 ** 6))
def test_rows_stochastic(n, r, w, seed):
    rng = np.random.default_rng(seed)
    a = attention_weights(rng.normal(size=(n, 4)), rng.uniform(size=n), w, r)
    assert np.all(a >= 0)
    assert np.allclose(a.sum(axis=1), 1.0, atol=1e-6)


@given(st.floats(0.01, 5), st.floats(-1, 1), st.floats(0, 1), st.floats(0, 1))
def test_mask_logit_monotone(w, s, m1, m2):
    lo, hi = sorted((m1, m2))
    assert leaky_relu(s + w * lo) <= leaky_relu(s + w * hi)


# ---------------------------------------------------------------- fusion


def test_identity_fusion():
    g = np.random.default_rng(0).normal(size=(3, 4, 4, 2))
    assert np.array_equal(apply_cross_slice(g, np.eye(3)), g)


def test_uniform_identical_fixed_point():
    s = np.random.default_rng(1).normal(size=(4, 4, 2))
    g = np.stack([s, s])
    assert np.allclose(apply_cross_slice(g, AttentionMatrix(np.full((2, 2), 0.5), 1)), g)


def test_weighted_sum_oracle():
    rng = np.random.default_rng(2)
    g = rng.normal(size=(2, 3, 3, 2))
    alpha = np.array([[0.25, 0.75], [0.5, 0.5]])
    out = apply_cross_slice(g, alpha)
    for y in range(3):
        for x in range(3):
            for c in range(2):
                assert out[0, y, x, c] == pytest.approx(0.25 * g[0, y, x, c] + 0.75 * g[1, y, x, c])


def test_fusion_shape_mismatch():
    with pytest.raises(ValueError):
        apply_cross_slice(np.zeros((3, 2, 2)), np.eye(2))


@given(st.integers(0, 10 ** 6))
def test_fusion_convex(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    g = rng.normal(size=(n, 3, 3, 2))
    a = attention_weights(rng.normal(size=(n, 4)), rng.uniform(size=n), 1.0, 2)
    out = apply_cross_slice(g, a)
    win = window_mask(n, 2)
    for i in range(n):
        sub = g[win[i]]
        assert np.all(out[i] >= sub.min(axis=0) - 1e-12)
        assert np.all(out[i] <= sub.max(axis=0) + 1e-12)


# ---------------------------------------------------------------- layer backward


def test_layer_gradients():
    rng = np.random.default_rng(3)
    S, L = 4, 5
    Y, hid = rng.normal(size=(S, L, 3)), rng.normal(size=(S, L, 2))
    masks = rng.uniform(size=S)
    R = rng.normal(size=(S, L, 3))
    layer = CrossSliceLayer(0.8, 2)
    _, _, cache = layer.forward(Y, hid, masks)
    dY, dh, dm = layer.backward(R, cache)

    def loss(Y=Y, hid=hid, masks=masks):
        return float(np.sum(layer.forward(Y, hid, masks)[0] * R))

    assert np.allclose(central_difference(lambda a: loss(Y=a), Y, 1e-6), dY, atol=1e-7)
    assert np.allclose(central_difference(lambda a: loss(hid=a), hid, 1e-6), dh, atol=1e-7)
    assert np.allclose(central_difference(lambda a: loss(masks=a), masks, 1e-6), dm, atol=1e-7)
