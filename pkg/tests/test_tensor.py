import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from masf.errors import ConfigError, DataError, PartitionError, ShapeError
from masf.tensor import (
    ConvSpec,
    Tensor,
    activation,
    concat,
    conv2d,
    grad_check,
    groupnorm,
    matmul,
    normalize,
    pool,
    resize_nearest,
    sigmoid,
    split,
    total,
)
from masf.tensor import ops, serialize


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------- conv2d


def test_conv_identity_kernel():
    x = t64(np.ones((1, 1, 3, 3)))
    y = conv2d(x, t64(np.ones((1, 1, 1, 1))), ConvSpec(1, 1, 1, 1))
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_all_ones_3x3_padded():
    y = conv2d(t64(np.ones((1, 1, 3, 3))), t64(np.ones((1, 1, 3, 3))), ConvSpec.same(1, 1, 3)).data[0, 0]
    assert y[1, 1] == 9
    assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4
    assert y[0, 1] == y[1, 0] == y[1, 2] == y[2, 1] == 6


@pytest.mark.parametrize(
    "stride,pad,groups,cout",
    [(1, 0, 1, 8), (2, 1, 1, 8), (1, 1, 2, 6), (2, 1, 4, 4), (1, 0, 4, 8)],
)
def test_conv_matches_loop_oracle(rng, stride, pad, groups, cout):
    x = rng.standard_normal((2, 4, 8, 8))
    w = rng.standard_normal((cout, 4 // groups, 3, 3))
    b = rng.standard_normal(cout)
    spec = ConvSpec(4, cout, 3, 3, stride, pad, pad, groups, True)
    y = conv2d(t64(x), t64(w), spec, t64(b.reshape(1, -1, 1, 1))).data
    ref = np.array(oracles.conv2d_loops(x, w, stride, pad, groups, b))
    np.testing.assert_allclose(y, ref, rtol=1e-6, atol=1e-12)


def test_conv_output_shape_formula():
    spec = ConvSpec(3, 5, 3, 3, stride=2, padding_h=1, padding_w=1)
    y = conv2d(t64(np.zeros((1, 3, 64, 64))), t64(np.zeros(spec.weight_shape)), spec)
    assert y.shape == (1, 5, 32, 32)


def test_conv_errors():
    with pytest.raises(ConfigError):
        ConvSpec(6, 4, 3, 3, groups=4)
    spec = ConvSpec(4, 8, 3, 3)
    with pytest.raises(ShapeError, match=r"\(1, 3, 5, 5\)"):
        conv2d(t64(np.zeros((1, 3, 5, 5))), t64(np.zeros((8, 4, 3, 3))), spec)


def test_band_kernel_same_padding(rng):
    spec = ConvSpec.same(4, 4, 1, groups=4, kw=11)
    assert (spec.padding_h, spec.padding_w) == (0, 5)
    x = rng.standard_normal((1, 4, 6, 12))
    w = rng.standard_normal(spec.weight_shape)
    y = conv2d(t64(x), t64(w), spec).data
    assert y.shape == x.shape


# --------------------------------------------------------------------------- pooling


def test_pool_constant_is_constant():
    x = t64(np.full((2, 3, 4, 6), 2.5))
    for kind in ("global_avg", "avg_along_H", "avg_along_W"):
        assert np.all(pool(x, kind).data == 2.5)


def test_pool_directional_values():
    x = t64(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(pool(x, "avg_along_H").data.ravel(), [2, 3])
    np.testing.assert_array_equal(pool(x, "avg_along_W").data.ravel(), [1.5, 3.5])
    assert pool(x, "avg_along_H").shape == (1, 1, 1, 2)
    assert pool(x, "avg_along_W").shape == (1, 1, 2, 1)


def test_global_avg_against_loops(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    got = pool(t64(x), "global_avg").data
    ref = oracles.mean_loops(x, (2, 3))
    for (n, c, _, _), v in ref.items():
        assert abs(got[n, c, 0, 0] - v) < 1e-7


def test_stride2_max():
    x = t64(np.arange(25, dtype=float).reshape(1, 1, 5, 5))
    y = pool(x, "stride2_max")
    np.testing.assert_array_equal(y.data[0, 0], [[6, 8], [16, 18]])
    with pytest.raises(ShapeError):
        pool(t64(np.zeros((1, 1, 1, 4))), "stride2_max")


# --------------------------------------------------------------------------- resize


def test_resize_nearest(rng):
    x = t64(np.array([[[[1.0, 2.0]]]]))
    np.testing.assert_array_equal(resize_nearest(x, 2).data[0, 0], [[1, 1, 2, 2], [1, 1, 2, 2]])
    assert resize_nearest(x, 1) is x
    z = rng.standard_normal((1, 2, 3, 3))
    up = resize_nearest(t64(z), 3).data
    np.testing.assert_array_equal(up[:, :, ::3, ::3], z)


# --------------------------------------------------------------------------- activations


def test_activation_basics(rng):
    assert sigmoid(t64(np.zeros((1, 1, 1, 1)))).item() == 0.5
    sm = activation(t64(np.full((2, 5, 3, 3), 0.7)), "softmax_over_channels").data
    np.testing.assert_allclose(sm, 1 / 5, rtol=0, atol=1e-15)
    x = rng.standard_normal((2, 3, 4, 4)) * 4
    got = activation(t64(x), "silu").data
    ref = np.vectorize(lambda v: v * oracles.sigmoid_scalar(v))(x)
    np.testing.assert_allclose(got, ref, rtol=0, atol=1e-7)


def test_sigmoid_is_stable_at_extremes():
    y = sigmoid(t64(np.array([-800.0, 800.0]).reshape(1, 1, 1, 2))).data
    assert np.all(np.isfinite(y))
    assert y.ravel()[0] == 0.0 and y.ravel()[1] == 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
def test_softmax_sums_to_one(vals):
    x = t64(np.array(vals).reshape(1, -1, 1, 1))
    s = activation(x, "softmax_over_channels").data
    assert abs(s.sum() - 1.0) < 1e-6
    y = sigmoid(x).data
    assert np.all((y > 0) & (y < 1))


# --------------------------------------------------------------------------- normalization


def test_groupnorm_constant_groups_give_beta():
    x = np.zeros((2, 4, 3, 3))
    x[:, :2] = 3.0
    x[:, 2:] = -1.0
    ones, zeros = t64(np.ones((1, 4, 1, 1))), t64(np.zeros((1, 4, 1, 1)))
    y = groupnorm(t64(x), 2, ones, zeros).data
    np.testing.assert_array_equal(y, 0.0)


def test_batchnorm_identity_params(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    params = dict(mean=np.zeros((1, 3, 1, 1)), var=np.ones((1, 3, 1, 1)),
                  gamma=t64(np.ones((1, 3, 1, 1))), beta=t64(np.zeros((1, 3, 1, 1))))
    y = normalize(t64(x), "batchnorm_infer", params).data
    np.testing.assert_allclose(y, x / np.sqrt(1 + ops.EPS), rtol=1e-12)
    # identity within the epsilon floor
    np.testing.assert_allclose(y, x, atol=1e-5 * np.abs(x).max())


def test_groupnorm_moments(rng):
    x = rng.standard_normal((2, 8, 5, 5)) * 3 + 1
    y = groupnorm(t64(x), 4, t64(np.ones((1, 8, 1, 1))), t64(np.zeros((1, 8, 1, 1)))).data
    for m, v in oracles.group_moments(y, 4):
        assert abs(m) < 1e-5
        assert abs(v - 1) < 1e-5


def test_groupnorm_partition_error():
    with pytest.raises(PartitionError):
        groupnorm(t64(np.zeros((1, 6, 2, 2))), 4, t64(np.ones((1, 6, 1, 1))), t64(np.zeros((1, 6, 1, 1))))


# --------------------------------------------------------------------------- concat / split


def test_split_concat_roundtrip(rng):
    x = t64(rng.standard_normal((2, 8, 3, 3)))
    parts = split(x, 4)
    assert [p.shape[1] for p in parts] == [2, 2, 2, 2]
    assert np.array_equal(concat(parts).data, x.data)
    assert concat([x]) is x
    with pytest.raises(PartitionError, match="C=8"):
        split(x, 3)


def test_concat_index_reads(rng):
    xs = [rng.standard_normal((2, c, 4, 4)) for c in (1, 3, 2)]
    y = concat([t64(a) for a in xs]).data
    offset = 0
    for a in xs:
        for c in range(a.shape[1]):
            assert np.array_equal(y[:, offset + c], a[:, c])
        offset += a.shape[1]


def test_concat_shape_error():
    with pytest.raises(ShapeError):
        concat([t64(np.zeros((1, 1, 2, 2))), t64(np.zeros((1, 1, 3, 2)))])


# --------------------------------------------------------------------------- matmul


def test_matmul_cases(rng):
    a = t64(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    np.testing.assert_array_equal(matmul(a, t64(np.ones((1, 1, 2, 2)))).data[0, 0], [[3, 3], [7, 7]])
    np.testing.assert_array_equal(matmul(a, t64(np.eye(2).reshape(1, 1, 2, 2))).data, a.data)
    x, y = rng.standard_normal((2, 3, 4, 5)), rng.standard_normal((2, 3, 5, 2))
    got = matmul(t64(x), t64(y)).data
    for k, v in oracles.matmul_loops(x, y).items():
        assert abs(got[k] - v) <= 1e-6 * max(1.0, abs(v))
    with pytest.raises(ShapeError):
        matmul(t64(x), t64(x))


# --------------------------------------------------------------------------- gradients


def test_grad_check_linear_is_exact(rng):
    x = t64(rng.standard_normal((1, 1, 1, 5)))
    w = t64(rng.standard_normal((1, 1, 1, 5)))
    err = grad_check(lambda: total(w * x), {"w": w})
    np.testing.assert_array_equal(w.grad, x.data)
    assert err < 1e-10


def test_grad_check_conv_sigmoid(rng):
    x = t64(rng.standard_normal((1, 2, 5, 5)))
    w = t64(rng.standard_normal((3, 2, 3, 3)) * 0.5)
    b = t64(rng.standard_normal((1, 3, 1, 1)))
    spec = ConvSpec.same(2, 3, 3, bias=True)
    assert grad_check(lambda: total(sigmoid(conv2d(x, w, spec, b))), {"x": x, "w": w, "b": b}) < 1e-4


def test_backward_accumulates_shared_use(rng):
    x = t64(rng.standard_normal((1, 1, 2, 2)), grad=True)
    total(x * x + x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_no_grad_skips_tape(rng):
    from masf.tensor import no_grad

    x = t64(rng.standard_normal((1, 1, 2, 2)), grad=True)
    with no_grad():
        y = sigmoid(x)
    assert not y.requires_grad


# --------------------------------------------------------------------------- serialization


def test_serialization_header_and_roundtrip(rng, tmp_path):
    x = Tensor(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
    raw = serialize.encode(x)
    assert raw[:4] == b"MSFT"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 1
    assert [int.from_bytes(raw[16 + 8 * k : 24 + 8 * k], "little") for k in range(4)] == [2, 3, 4, 5]
    assert len(raw) == 48 + 4 * x.size
    serialize.save(tmp_path / "t.bin", x)
    y = serialize.load(tmp_path / "t.bin")
    assert y.dtype == np.float32
    assert np.array_equal(x.data, y.data)


def test_serialization_rejects_garbage():
    with pytest.raises(DataError):
        serialize.decode(b"NOPE" + bytes(60))
    with pytest.raises(DataError):
        serialize.decode(serialize.encode(Tensor(np.zeros((1, 1, 2, 2))))[:-3])


def test_tensor_must_be_4d():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 0, 2, 2)))
