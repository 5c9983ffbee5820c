import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flankid.cnn import (CONV, LRN, MAXPOOL, RELU, ConvNetSpec, LayerSpec, ShapeError, WeightError,
                         alexnet_conv3, check_weights, conv2d, extract_features, feature_dim, forward,
                         load_spec, load_weights, lrn, maxpool, output_shape, preprocess, random_weights,
                         save_spec, save_weights, spec_from_dict, spec_to_dict)
from flankid.imaging import ImageBuffer
from flankid.synthetic import small_conv_spec


def conv_oracle(x, w, b, stride, pad, groups):
    c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    og = o // groups
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        g = oc // og
        for i in range(ho):
            for j in range(wo):
                acc = b[oc]
                for ic in range(cg):
                    for u in range(kh):
                        for v in range(kw):
                            acc += w[oc, ic, u, v] * xp[g * cg + ic, i * stride + u, j * stride + v]
                out[oc, i, j] = acc
    return out


def lrn_oracle(x, n, alpha, beta, k):
    c = x.shape[0]
    out = np.empty_like(x)
    for ch in range(c):
        lo, hi = max(0, ch - n // 2), min(c - 1, ch + n // 2)
        s = sum(x[j] ** 2 for j in range(lo, hi + 1))
        out[ch] = x[ch] / (k + alpha / n * s) ** beta
    return out


def pool_oracle(x, k, s):
    c, h, w = x.shape
    ho = math.ceil((h - k) / s) + 1
    wo = math.ceil((w - k) / s) + 1
    if (ho - 1) * s >= h:
        ho -= 1
    if (wo - 1) * s >= w:
        wo -= 1
    out = np.empty((c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, i, j] = x[:, i * s:min(i * s + k, h), j * s:min(j * s + k, w)].max(axis=(1, 2))
    return out


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([1, 2]), st.integers(1, 3), st.integers(0, 2), st.integers(1, 3))
def test_conv_matches_loop_oracle(seed, groups, stride, pad, kernel):
    rng = np.random.default_rng(seed)
    cin, cout = 2 * groups, 2 * groups
    x = rng.standard_normal((cin, 7, 8))
    layer = LayerSpec(CONV, "c", out_channels=cout, kernel=kernel, stride=stride, padding=pad, groups=groups)
    w = rng.standard_normal((cout, cin // groups, kernel, kernel))
    b = rng.standard_normal(cout)
    out = conv2d(x, layer, {"c.weight": w, "c.bias": b})
    np.testing.assert_allclose(out, conv_oracle(x, w, b, stride, pad, groups), rtol=1e-12, atol=1e-12)


def test_grouped_conv_keeps_groups_separate():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 5, 5))
    layer = LayerSpec(CONV, "c", out_channels=2, kernel=3, padding=1, groups=2)
    w = rng.standard_normal((2, 2, 3, 3))
    base = conv2d(x, layer, {"c.weight": w, "c.bias": np.zeros(2)})
    x2 = x.copy()
    x2[2:] += 5.0  # only the second group's inputs change
    out = conv2d(x2, layer, {"c.weight": w, "c.bias": np.zeros(2)})
    np.testing.assert_array_equal(out[0], base[0])
    assert not np.allclose(out[1], base[1])


def test_lrn_matches_scalar_formula():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((7, 3, 4)) * 30
    layer = LayerSpec(LRN, "n", local_size=5, alpha=1e-2, beta=0.75, k=2.0)
    np.testing.assert_allclose(lrn(x, layer), lrn_oracle(x, 5, 1e-2, 0.75, 2.0), rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 12), st.integers(3, 12), st.sampled_from([(2, 2), (3, 2), (3, 3)]))
def test_ceil_maxpool_matches_oracle(h, w, ks):
    k, s = ks
    x = np.random.default_rng(h * 31 + w).standard_normal((2, h, w))
    layer = LayerSpec(MAXPOOL, "p", kernel=k, stride=s)
    out = maxpool(x, layer)
    np.testing.assert_array_equal(out, pool_oracle(x, k, s))


def test_floor_pool_drops_partial_windows():
    x = np.arange(30.0).reshape(1, 5, 6)
    out = maxpool(x, LayerSpec(MAXPOOL, "p", kernel=3, stride=2, rounding="floor"))
    assert out.shape == (1, 2, 2) and out[0, 1, 1] == x[0, 4, 4]


@pytest.mark.parametrize("w, h, dim, shape", [(256, 192, 63360, (11, 15, 384)), (256, 128, 40320, (7, 15, 384))])
def test_alexnet_conv3_dimensions(w, h, dim, shape):
    spec = alexnet_conv3(h, w)
    assert output_shape(spec) == shape
    assert feature_dim(spec) == dim


def test_floor_rounding_would_change_the_dimension():
    spec = alexnet_conv3(192, 256)
    floored = tuple(LayerSpec(l.kind, l.name, l.out_channels, l.kernel, l.stride, l.padding, l.groups,
                              rounding="floor") if l.kind == MAXPOOL else l for l in spec.layers)
    alt = ConvNetSpec(spec.name, spec.input, spec.mean, floored, spec.tap_point)
    assert feature_dim(alt) != 63360


def test_tiny_input_collapses():
    with pytest.raises(ShapeError):
        feature_dim(alexnet_conv3(16, 16))


def test_relu_tap_is_nonnegative_and_deterministic():
    spec = small_conv_spec(64, 96)
    weights = random_weights(spec, seed=3)
    img = ImageBuffer(np.random.default_rng(0).integers(0, 256, (64, 96, 3), dtype=np.uint8))
    a = extract_features(img, spec, weights)
    b = extract_features(img, spec, weights)
    assert a.dim == feature_dim(spec) and a.shape == (32, *output_shape(spec)[:2])
    assert np.all(a.values >= 0)
    np.testing.assert_array_equal(a.values, b.values)
    assert a.provenance["tap"] == "relu3"


def test_preprocess_subtracts_mean_and_checks_geometry():
    spec = small_conv_spec(8, 10)
    img = ImageBuffer(np.full((8, 10, 3), 130, np.uint8))
    x = preprocess(img, spec)
    assert x.shape == (3, 8, 10) and np.all(x == 2.0)
    with pytest.raises(ShapeError):
        preprocess(ImageBuffer(np.zeros((10, 8, 3))), spec)


def test_weight_checks(tmp_path):
    spec = small_conv_spec(64, 64)
    weights = random_weights(spec, 0)
    check_weights(spec, weights)
    save_weights(weights, tmp_path / "w.ntc")
    loaded = load_weights(tmp_path / "w.ntc")
    assert set(loaded) == set(weights)
    for k in weights:
        np.testing.assert_array_equal(loaded[k], weights[k])
    missing = dict(weights)
    del missing["conv2.bias"]
    with pytest.raises(WeightError):
        check_weights(spec, missing)
    bad = dict(weights, **{"conv1.weight": np.zeros((16, 3, 5, 5), np.float32)})
    with pytest.raises(ShapeError):
        check_weights(spec, bad)
    with pytest.raises(WeightError):
        forward(np.zeros((3, 64, 64)), spec, missing)


def test_spec_yaml_roundtrip(tmp_path):
    for spec in (alexnet_conv3(192, 256), small_conv_spec()):
        save_spec(spec, tmp_path / "s.yaml")
        assert load_spec(tmp_path / "s.yaml") == spec
        assert spec_from_dict(spec_to_dict(spec)) == spec


def test_bundled_spec_is_alexnet():
    from flankid.config import load_config
    spec = load_spec(load_config().net_spec)
    assert spec == alexnet_conv3(192, 256)
    assert feature_dim(spec.with_input(128, 256)) == 40320
