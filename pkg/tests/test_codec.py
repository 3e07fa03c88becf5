import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from angiosynth.codec import (CodecParams, decode_slice, ema_update, encode_slice,
                              identity_codec, patchify, train_codec, unpatchify)


def _random_codec(seed=0, p=4, c=8):
    rng = np.random.default_rng(seed)
    return CodecParams(rng.normal(size=(c, p * p)), rng.normal(size=(p * p, c)), p)


def test_encode_shape():
    assert encode_slice(np.ones((16, 16)), _random_codec()).shape == (4, 4, 8)


def test_zero_slice_zero_tokens():
    assert np.all(encode_slice(np.zeros((8, 8)), _random_codec()) == 0)
    assert np.all(decode_slice(np.zeros((2, 2, 8)), _random_codec()) == 0)


def test_identity_codec_round_trip():
    x = np.random.default_rng(1).uniform(size=(12, 8))
    c = identity_codec(4)
    assert np.array_equal(decode_slice(encode_slice(x, c), c), x)


def test_decode_shape():
    assert decode_slice(np.zeros((3, 2, 8)), _random_codec()).shape == (12, 8)


def test_indivisible_slice_rejected():
    with pytest.raises(ValueError):
        encode_slice(np.zeros((10, 8)), _random_codec())


def test_channel_mismatch_rejected():
    with pytest.raises(ValueError):
        decode_slice(np.zeros((2, 2, 5)), _random_codec())


def test_inconsistent_shapes_rejected():
    with pytest.raises(ValueError):
        CodecParams(np.zeros((8, 16)), np.zeros((16, 7)), 4)


def test_patchify_inverse():
    x = np.arange(2 * 8 * 12, dtype=float).reshape(2, 8, 12)
    assert np.array_equal(unpatchify(patchify(x, 4), 4), x)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_encode_decode_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    c = _random_codec(seed)
    x, y = rng.normal(size=(2, 8, 8))
    lhs = encode_slice(a * x + b * y, c)
    rhs = a * encode_slice(x, c) + b * encode_slice(y, c)
    assert np.allclose(lhs, rhs, rtol=1e-6, atol=1e-9)
    t, u = rng.normal(size=(2, 2, 2, 8))
    assert np.allclose(decode_slice(a * t + b * u, c), a * decode_slice(t, c) + b * decode_slice(u, c),
                       rtol=1e-6, atol=1e-9)


# ---------------------------------------------------------------- EMA


def test_ema_decay_examples():
    s, live = {"w": np.zeros(3)}, {"w": np.full(3, 2.0)}
    assert np.array_equal(ema_update(s, live, 1.0)["w"], s["w"])
    assert np.array_equal(ema_update(s, live, 0.0)["w"], live["w"])
    assert np.array_equal(ema_update(s, live, 0.5)["w"], np.ones(3))


def test_ema_rejects_bad_decay():
    with pytest.raises(ValueError):
        ema_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, 1.5)


@given(st.floats(0, 1), st.integers(0, 1000))
def test_ema_convex(decay, seed):
    rng = np.random.default_rng(seed)
    s, live = rng.normal(size=5), rng.normal(size=5)
    out = ema_update({"w": s}, {"w": live}, decay)["w"]
    lo, hi = np.minimum(s, live), np.maximum(s, live)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


# ---------------------------------------------------------------- training


def test_constant_slice_reconstructs():
    c = train_codec([np.full((8, 8), 0.3)], epochs=100)
    x = np.full((8, 8), 0.3)
    assert np.mean((decode_slice(encode_slice(x, c), c) - x) ** 2) < 1e-6


def test_training_mse_monotone():
    rng = np.random.default_rng(0)
    slices = [rng.uniform(size=(8, 8)) for _ in range(4)]
    hist = []
    train_codec(slices, epochs=50, lr=0.1, init="random", history=hist)
    assert all(b <= a + 1e-6 for a, b in zip(hist, hist[1:]))
    assert hist[-1] < hist[0]


def test_ema_shadow_tracks_live():
    rng = np.random.default_rng(0)
    slices = [rng.uniform(size=(8, 8))]
    frozen = train_codec(slices, epochs=5, lr=0.1, init="random", ema_decay=1.0)
    start = train_codec(slices, epochs=0, lr=0.1, init="random", ema_decay=1.0)
    assert np.array_equal(frozen.ema_shadow["encoder"], start.encoder)
    follow = train_codec(slices, epochs=1, lr=0.1, init="random", ema_decay=0.0)
    assert np.array_equal(follow.ema_shadow["encoder"], follow.encoder)


def test_empty_training_set():
    with pytest.raises(ValueError):
        train_codec([])


def test_training_deterministic():
    rng = np.random.default_rng(0)
    slices = [rng.uniform(size=(8, 8)) for _ in range(3)]
    a = train_codec(slices, epochs=5, init="random", seed=4)
    b = train_codec(slices, epochs=5, init="random", seed=4)
    assert np.array_equal(a.encoder, b.encoder) and np.array_equal(a.decoder, b.decoder)
