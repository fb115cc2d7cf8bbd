import numpy as np
import pytest

import oracles
from masf.blocks import (
    ConvBnSiLU,
    Dasi,
    DasiSpec,
    Iema,
    IemaSpec,
    Mfam,
    MfamSpec,
    dasi_fuse,
)
from masf.errors import ConfigError
from masf.tensor import Tensor, grad_check, ops, total


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def zero_params(module):
    for p in module.parameters():
        p.data[...] = 0.0


@pytest.fixture
def rng():
    return np.random.default_rng(7)


# --------------------------------------------------------------------------- Conv-BN-SiLU


def test_conv_bn_silu_zero_in_zero_out(rng):
    blk = ConvBnSiLU(3, 3, 1, rng=rng).astype(np.float64).eval()
    blk.conv.weight.data[...] = np.eye(3).reshape(3, 3, 1, 1)
    y = blk(t64(np.zeros((1, 3, 4, 4))))
    assert np.all(y.data == 0)


def test_conv_bn_silu_stride_shape(rng):
    blk = ConvBnSiLU(3, 8, 3, stride=2, rng=rng)
    assert blk(Tensor(np.zeros((1, 3, 64, 64), np.float32))).shape == (1, 8, 32, 32)


def test_conv_bn_silu_composition(rng):
    blk = ConvBnSiLU(4, 6, 3, rng=rng).astype(np.float64).eval()
    blk.bn.set_buffer("running_mean", rng.standard_normal((1, 6, 1, 1)))
    blk.bn.set_buffer("running_var", rng.uniform(0.5, 2, (1, 6, 1, 1)))
    blk.bn.gamma.data[...] = rng.standard_normal((1, 6, 1, 1))
    x = t64(rng.standard_normal((2, 4, 7, 7)))
    c = ops.conv2d(x, blk.conv.weight, blk.spec)
    ref = ops.silu(ops.batchnorm_infer(c, blk.bn.running_mean, blk.bn.running_var,
                                       blk.bn.gamma, blk.bn.beta))
    np.testing.assert_allclose(blk(x).data, ref.data, rtol=1e-6, atol=1e-12)


# --------------------------------------------------------------------------- MFAM


def test_mfam_spec_validation():
    assert MfamSpec(8).branch_count == 4
    assert MfamSpec(8, (3,), include_identity_branch=False).branch_count == 1
    with pytest.raises(ConfigError):
        MfamSpec(8, (3, 4))


@pytest.mark.parametrize("training", [True, False])
def test_mfam_zeroed_is_identity(rng, training):
    blk = Mfam(MfamSpec(16), rng=rng).astype(np.float64).train(training)
    zero_params(blk)
    x = t64(rng.standard_normal((2, 16, 8, 8)))
    assert np.max(np.abs(blk(x).data - x.data)) < 1e-7


def test_mfam_hand_composition(rng):
    blk = Mfam(MfamSpec(8, (3,), include_identity_branch=False), rng=rng).astype(np.float64).eval()
    x = t64(rng.standard_normal((1, 8, 6, 6)))

    def cbs(m, v):
        y = ops.conv2d(v, m.conv.weight, m.spec)
        return ops.silu(ops.batchnorm_infer(y, m.bn.running_mean, m.bn.running_var, m.bn.gamma, m.bn.beta))

    dw = blk.branches.layers[0]
    ref = x + cbs(blk.fuse, ops.conv2d(cbs(blk.pre, x), dw.weight, dw.spec, dw.bias))
    np.testing.assert_allclose(blk(x).data, ref.data, rtol=1e-6, atol=1e-12)


@pytest.mark.parametrize("identity", [True, False])
def test_mfam_branch_sum_matches_separate_convs(rng, identity):
    blk = Mfam(MfamSpec(8, (3, 5, 7), include_identity_branch=identity), rng=rng).astype(np.float64)
    for b in blk.branches.layers:
        b.bias.data[...] = rng.standard_normal(b.bias.shape)
    p = t64(rng.standard_normal((2, 8, 9, 9)))
    ref = p.data.copy() if identity else 0.0
    for b in blk.branches.layers:
        ref = ref + ops.conv2d(p, b.weight, b.spec, b.bias).data
    with ops.count_flops() as tally:
        got = blk._aggregate(p)
    np.testing.assert_allclose(got.data, ref, rtol=1e-12, atol=1e-12)
    assert tally["conv"] == 2 * sum(b.spec.flops(9, 9) for b in blk.branches.layers)
    assert tally["elementwise"] == (2 + identity) * p.data.size


def test_mfam_shape(rng):
    x = Tensor(rng.standard_normal((2, 16, 32, 32)).astype(np.float32))
    assert Mfam(MfamSpec(16), rng=rng)(x).shape == (2, 16, 32, 32)


# --------------------------------------------------------------------------- IEMA


def test_iema_spec_validation():
    with pytest.raises(ConfigError):
        IemaSpec(12, 8)
    with pytest.raises(ConfigError):
        IemaSpec(16, 8)  # 2 channels per group
    assert IemaSpec.fit(16, 8).groups == 4
    assert IemaSpec.fit(64, 8).groups == 8


def test_iema_shape_and_zero(rng):
    blk = Iema(IemaSpec(16, 4), rng=rng)
    x = Tensor(rng.standard_normal((2, 16, 16, 16)).astype(np.float32))
    assert blk(x).shape == x.shape
    z = blk(Tensor(np.zeros((2, 16, 16, 16), np.float32)))
    assert np.all(z.data == 0)


def test_iema_attention_bounds(rng):
    blk = Iema(IemaSpec(16, 4), rng=rng).astype(np.float64)
    for _ in range(20):
        parts = blk.branches(t64(rng.standard_normal((1, 16, 6, 6)) * 3))
        for key in ("att_h", "att_w", "att_cross"):
            a = parts[key].data
            assert np.all((a > 0) & (a < 1))


def test_iema_group_permutation_equivariance(rng):
    spec = IemaSpec(16, 4)
    blk = Iema(spec, rng=rng).astype(np.float64)
    x = rng.standard_normal((2, 16, 5, 7))
    perm = [2, 0, 3, 1]
    chan = np.concatenate([np.arange(g * 4, g * 4 + 4) for g in perm])
    y = blk(t64(x)).data
    y_perm = blk(t64(x[:, chan])).data
    np.testing.assert_allclose(y_perm, y[:, chan], rtol=1e-12, atol=1e-12)


# --------------------------------------------------------------------------- DASI


def test_dasi_spec():
    with pytest.raises(ConfigError):
        DasiSpec(6)
    assert DasiSpec(8).partitions == 4


def test_dasi_zero_current_is_mean(rng):
    low, high = rng.standard_normal((2, 2, 8, 4, 4))
    f = dasi_fuse(t64(np.zeros((2, 8, 4, 4))), t64(low), t64(high)).data
    assert np.max(np.abs(f - (low + high) / 2)) < 1e-7


def test_dasi_saturated_gate_selects_low(rng):
    low, high = rng.standard_normal((2, 1, 8, 4, 4))
    f = dasi_fuse(t64(np.full((1, 8, 4, 4), 100.0)), t64(low), t64(high)).data
    assert np.max(np.abs(f - low)) < 1e-8


def test_dasi_matches_scalar_gate(rng):
    cur, low, high = rng.standard_normal((3, 1, 8, 3, 3)) * 2
    f = dasi_fuse(t64(cur), t64(low), t64(high)).data
    for idx in np.ndindex(cur.shape):
        a = oracles.sigmoid_scalar(cur[idx])
        assert abs(f[idx] - (a * low[idx] + (1 - a) * high[idx])) < 1e-6


def test_dasi_gate_antisymmetry(rng):
    cur, low, high = rng.standard_normal((3, 2, 8, 4, 4))
    a = dasi_fuse(t64(cur), t64(low), t64(high)).data
    b = dasi_fuse(t64(-cur), t64(high), t64(low)).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_dasi_module_alignment(rng):
    blk = Dasi(DasiSpec(8), low_channels=4, high_channels=16, rng=rng)
    cur = Tensor(rng.standard_normal((1, 8, 8, 8)).astype(np.float32))
    low = Tensor(rng.standard_normal((1, 4, 16, 16)).astype(np.float32))
    high = Tensor(rng.standard_normal((1, 16, 4, 4)).astype(np.float32))
    assert blk(cur, low, high).shape == cur.shape
    edge = Dasi(DasiSpec(8), low_channels=None, high_channels=16, rng=rng)
    assert edge(cur, None, high).shape == cur.shape


def test_dasi_rejects_non_power_of_two(rng):
    with pytest.raises(ConfigError):
        Dasi(DasiSpec(8), low_channels=8, low_ratio=3, rng=rng)


def test_dasi_boundary_blend_is_residual(rng):
    # no neighbours at all: fusion equals the current map itself
    blk = Dasi(DasiSpec(8), rng=rng).astype(np.float64).eval()
    cur = t64(rng.standard_normal((1, 8, 4, 4)))
    _, low, high = blk.align(cur)
    np.testing.assert_allclose(dasi_fuse(cur, low, high).data, cur.data, rtol=0, atol=1e-12)


# --------------------------------------------------------------------------- gradients


def _block_grad_error(blk, inputs, seed=0, max_checks=12):
    blk.astype(np.float64).train()
    tensors = {f"in{i}": x for i, x in enumerate(inputs)}
    tensors.update(dict(blk.named_parameters()))
    weights = np.random.default_rng(seed).standard_normal(blk(*inputs).shape)
    w = t64(weights)
    return grad_check(lambda: total(blk(*inputs) * w), tensors, max_checks=max_checks)


def test_grad_conv_bn_silu(rng):
    blk = ConvBnSiLU(3, 4, 3, stride=2, rng=rng)
    assert _block_grad_error(blk, [t64(rng.standard_normal((2, 3, 6, 6)))]) < 1e-3


def test_grad_mfam(rng):
    blk = Mfam(MfamSpec(8), rng=rng)
    assert _block_grad_error(blk, [t64(rng.standard_normal((1, 8, 8, 8)))]) < 1e-3


def test_grad_iema(rng):
    blk = Iema(IemaSpec(8, 2, band_kernel=5), rng=rng)
    assert _block_grad_error(blk, [t64(rng.standard_normal((2, 8, 6, 5)))]) < 1e-3


def test_grad_dasi(rng):
    blk = Dasi(DasiSpec(8), low_channels=4, high_channels=12, rng=rng)
    ins = [t64(rng.standard_normal(s)) for s in [(2, 8, 4, 4), (2, 4, 8, 8), (2, 12, 2, 2)]]
    assert _block_grad_error(blk, ins) < 1e-3
