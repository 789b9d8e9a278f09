import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import conv2d_loops
from vpfuse import fixtures
from vpfuse.errors import MissingWeight, ShapeError
from vpfuse.image_features import FeatureMap2D, backbone_forward, bilinear_sample, conv2d_forward
from vpfuse.kitti_io import Image, WeightBundle


def identity_kernel(c):
    k = np.zeros((c, c, 3, 3))
    for i in range(c):
        k[i, i, 1, 1] = 1.0
    return k


def test_identity_kernel(rng):
    x = FeatureMap2D(rng.normal(size=(7, 5, 3)))
    y = conv2d_forward(x, identity_kernel(3), 1, "none")
    assert np.array_equal(y.data, x.data) and y.stride_from_input == 1


@pytest.mark.parametrize("shape,stride", [((8, 8, 2), 1), ((8, 8, 2), 2), ((5, 7, 3), 2), ((1, 1, 1), 1)])
def test_conv_matches_loop_oracle(rng, shape, stride):
    for _ in range(50):
        x = rng.normal(size=shape)
        k = rng.normal(size=(4, shape[2], 3, 3))
        b = rng.normal(size=4)
        got = conv2d_forward(FeatureMap2D(x), k, stride, "relu", b).data
        assert np.abs(got - conv2d_loops(x, k, stride, b, relu=True)).max() <= 1e-5


def test_stride_two_shape(rng):
    y = conv2d_forward(FeatureMap2D(rng.normal(size=(8, 8, 2))), rng.normal(size=(3, 2, 3, 3)), 2)
    assert y.data.shape == (4, 4, 3) and y.stride_from_input == 2


def test_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d_forward(FeatureMap2D(np.zeros((4, 4, 2))), np.zeros((1, 3, 3, 3)))


def test_zero_backbone_halves_resolution():
    w = fixtures.make_weights(np.random.default_rng(0), zero=True)
    y = backbone_forward(Image(np.full((9, 13, 3), 0.7)), w)
    assert y.data.shape[:2] == (5, 7) and y.stride_from_input == 2
    assert np.all(y.data == 0.0)


def test_backbone_equals_explicit_layers(rng):
    w = fixtures.make_weights(rng)
    img = Image(rng.uniform(size=(10, 12, 3)))
    x = FeatureMap2D.from_image(img)
    for i, (s, act) in enumerate([(1, "relu"), (2, "relu"), (1, "relu"), (1, "none")], 1):
        x = conv2d_forward(x, w[f"conv{i}.weight"], s, act, w[f"conv{i}.bias"])
    y = backbone_forward(img, w)
    assert np.array_equal(y.data, x.data)
    assert np.array_equal(backbone_forward(img, w).data, y.data)


def test_backbone_missing_layer(rng):
    w = fixtures.make_weights(rng)
    partial = WeightBundle({k: v for k, v in w.items() if not k.startswith("conv3")})
    with pytest.raises(MissingWeight):
        backbone_forward(Image(np.zeros((4, 4, 3))), partial)


def test_bilinear_exact_and_midpoint():
    d = np.arange(12, dtype=float).reshape(3, 4, 1)
    m = FeatureMap2D(d)
    assert bilinear_sample(m, 2, 1) == (pytest.approx([6.0]), True)
    f, ok = bilinear_sample(m, 1.5, 0.5)
    assert ok and f[0] == pytest.approx((1 + 2 + 5 + 6) / 4)


def test_bilinear_out_of_view():
    f, ok = bilinear_sample(FeatureMap2D(np.ones((3, 3, 2))), -5, 1)
    assert not ok and np.array_equal(f, np.zeros(2))


def test_bilinear_uses_stride():
    d = np.arange(12, dtype=float).reshape(3, 4, 1)
    f, ok = bilinear_sample(FeatureMap2D(d, 2), 4.0, 2.0)
    assert ok and f[0] == 6.0


@given(st.floats(0, 3), st.floats(0, 2), st.floats(1e-6, 1e-2))
def test_bilinear_lipschitz(u, v, eps):
    d = np.random.default_rng(1).normal(size=(3, 4, 2))
    m = FeatureMap2D(d)
    L = max(np.abs(np.diff(d, axis=0)).max(), np.abs(np.diff(d, axis=1)).max())
    a, ok_a = bilinear_sample(m, u, v)
    b, ok_b = bilinear_sample(m, min(u + eps, 3.0), v)
    assert ok_a and ok_b
    assert np.abs(a - b).max() <= L * eps + 1e-12
