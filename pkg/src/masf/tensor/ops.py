"""Forward kernels and their derivatives.

Only the kernels the detector needs are provided. Each public function takes
and returns :class:`Tensor` objects and records its own backward closure.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from masf.errors import ConfigError, PartitionError, ShapeError
from masf.tensor.core import Tensor, as_tensor, make_result

EPS = 1e-5

# ---------------------------------------------------------------------------
# FLOP accounting
# ---------------------------------------------------------------------------

_flops = threading.local()


@contextlib.contextmanager
def count_flops():
    """Collect ``{"conv": n, "elementwise": n, "layers": [...]}`` for kernels run inside."""
    tally = {"conv": 0, "elementwise": 0}
    prev = getattr(_flops, "tally", None)
    _flops.tally = tally
    try:
        yield tally
    finally:
        _flops.tally = prev


def _tally(kind: str, n: int):
    tally = getattr(_flops, "tally", None)
    if tally is not None:
        tally[kind] += int(n)


def record_flops(kind: str, n: int):
    """Bill ``n`` FLOPs of ``kind`` to the active :func:`count_flops` tally."""
    _tally(kind, n)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    return grad.sum(axis=axes, keepdims=True)


def _check_broadcast(a: Tensor, b: Tensor):
    for da, db in zip(a.shape, b.shape):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b)
    out = a.data + b.data
    _tally("elementwise", out.size)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b)
    out = a.data - b.data
    _tally("elementwise", out.size)
    sa, sb = a.shape, b.shape
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    out = ad * bd
    _tally("elementwise", out.size)
    return make_result(
        out, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,))


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a ``(1, 1, 1, 1)`` tensor."""
    shape = a.shape
    out = a.data.sum(dtype=a.dtype).reshape(1, 1, 1, 1)
    return make_result(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    if len(shape) != 4:
        raise ShapeError(f"reshape target must be 4-D, got {shape}")
    src = a.shape
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(src),))


def swap_hw(a: Tensor) -> Tensor:
    """Exchange the last two axes, ``(N, C, H, W) -> (N, C, W, H)``."""
    out = a.data.transpose(0, 1, 3, 2)
    return make_result(out, (a,), lambda g: (g.transpose(0, 1, 3, 2),))


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding_h: int = 0
    padding_w: int = 0
    groups: int = 1
    has_bias: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.kernel_h, self.kernel_w,
               self.stride, self.groups) < 1:
            raise ConfigError(f"conv dimensions must be positive: {self}")
        if self.padding_h < 0 or self.padding_w < 0:
            raise ConfigError(f"negative padding: {self}")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @classmethod
    def same(cls, cin, cout, k, stride=1, groups=1, bias=False, kw=None):
        """Zero 'same' padding of floor(k/2) on each axis; ``kw`` allows band kernels."""
        kw = k if kw is None else kw
        return cls(cin, cout, k, kw, stride, k // 2, kw // 2, groups, bias)

    @property
    def weight_shape(self):
        return (self.out_channels, self.in_channels // self.groups, self.kernel_h, self.kernel_w)

    @property
    def depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding_h - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding_w - self.kernel_w) // self.stride + 1
        return ho, wo

    def flops(self, h: int, w: int) -> int:
        ho, wo = self.output_hw(h, w)
        return 2 * self.kernel_h * self.kernel_w * (self.in_channels // self.groups) \
            * self.out_channels * ho * wo


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _dense_forward(xp, w, s, ho, wo):
    # im2col in channel-major layout (C*kh*kw, N*Ho*Wo) so both passes are single GEMMs
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    if kh == 1 and kw == 1:
        cols = xp[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s].transpose(1, 0, 2, 3)
        cols = cols.reshape(c, n * ho * wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    y = w.reshape(o, -1) @ cols
    return y.reshape(o, n, ho, wo).transpose(1, 0, 2, 3), cols


def _dense_backward(g, cols, w, xp_shape, s):
    n, o, ho, wo = g.shape
    _, c, kh, kw = w.shape
    g2 = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
    gw = (g2 @ cols.T).reshape(w.shape)
    gcols = (w.reshape(o, -1).T @ g2).reshape(c, kh, kw, n, ho, wo)
    if kh == kw == s == 1:
        return gcols[:, 0, 0].transpose(1, 0, 2, 3), gw
    gxp = np.zeros((c, n) + tuple(xp_shape[2:]), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += gcols[:, i, j]
    return gxp.transpose(1, 0, 2, 3), gw


def _depthwise_forward(xp, w, s, ho, wo):
    _, _, kh, kw = w.shape
    y = np.zeros(xp.shape[:2] + (ho, wo), dtype=np.result_type(xp, w))
    tmp = np.empty_like(y)
    for i in range(kh):
        for j in range(kw):
            np.multiply(xp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s],
                        w[:, 0, i, j][None, :, None, None], out=tmp)
            y += tmp
    return y


def _depthwise_backward(g, xp, w, s):
    _, _, ho, wo = g.shape
    _, _, kh, kw = w.shape
    gw = np.empty_like(w)
    gxp = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s),
                  slice(j, j + s * (wo - 1) + 1, s))
            gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            gxp[sl] += g * w[:, 0, i, j][None, :, None, None]
    return gxp, gw


def conv2d(x: Tensor, weight: Tensor, spec: ConvSpec, bias: Tensor | None = None) -> Tensor:
    """2-D cross-correlation with zero padding; ``bias`` has shape ``(1, O, 1, 1)``."""
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv2d input has {x.shape[1]} channels, spec expects {spec.in_channels} "
            f"(input shape {x.shape}, weight shape {weight.shape})"
        )
    if weight.shape != spec.weight_shape:
        raise ShapeError(
            f"conv2d weight shape {weight.shape} does not match spec {spec.weight_shape} "
            f"(input shape {x.shape})"
        )
    n, c, h, w_ = x.shape
    ho, wo = spec.output_hw(h, w_)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and {spec}")
    s, ph, pw = spec.stride, spec.padding_h, spec.padding_w
    xp = _pad(x.data, ph, pw)
    wd = weight.data
    g_count = spec.groups
    if g_count == 1:
        y, cols = _dense_forward(xp, wd, s, ho, wo)
    elif spec.depthwise:
        y, cols = _depthwise_forward(xp, wd, s, ho, wo), None
    else:
        cg, og = c // g_count, spec.out_channels // g_count
        parts = [
            _dense_forward(xp[:, k * cg : (k + 1) * cg], wd[k * og : (k + 1) * og], s, ho, wo)
            for k in range(g_count)
        ]
        y = np.concatenate([p[0] for p in parts], axis=1)
        cols = [p[1] for p in parts]
    if bias is not None:
        y = y + bias.data
    _tally("conv", n * spec.flops(h, w_))

    def backward(g):
        if g_count == 1:
            gxp, gw = _dense_backward(g, cols, wd, xp.shape, s)
        elif spec.depthwise:
            gxp, gw = _depthwise_backward(g, xp, wd, s)
        else:
            cg, og = c // g_count, spec.out_channels // g_count
            gxp = np.zeros_like(xp)
            gw = np.empty_like(wd)
            for k in range(g_count):
                gx_k, gw_k = _dense_backward(
                    g[:, k * og : (k + 1) * og], cols[k], wd[k * og : (k + 1) * og],
                    (n, cg) + xp.shape[2:], s,
                )
                gxp[:, k * cg : (k + 1) * cg] = gx_k
                gw[k * og : (k + 1) * og] = gw_k
        gx = gxp[:, :, ph : ph + h, pw : pw + w_]
        gb = g.sum(axis=(0, 2, 3), keepdims=True) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(y, parents, backward)


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------

POOL_KINDS = ("global_avg", "avg_along_H", "avg_along_W", "stride2_max")


def pool(x: Tensor, kind: str) -> Tensor:
    """``global_avg`` -> (N,C,1,1); ``avg_along_H`` -> (N,C,1,W); ``avg_along_W`` -> (N,C,H,1)."""
    d = x.data
    shape = x.shape
    if kind in ("global_avg", "avg_along_H", "avg_along_W"):
        axes = {"global_avg": (2, 3), "avg_along_H": (2,), "avg_along_W": (3,)}[kind]
        count = int(np.prod([shape[a] for a in axes]))
        out = d.mean(axis=axes, keepdims=True)
        _tally("elementwise", d.size)
        return make_result(out, (x,), lambda g: (np.broadcast_to(g / count, shape).copy(),))
    if kind == "stride2_max":
        n, c, h, w = shape
        if h < 2 or w < 2:
            raise ShapeError(f"stride2_max needs H and W >= 2, got {shape}")
        ho, wo = h // 2, w // 2
        blocks = d[:, :, : 2 * ho, : 2 * wo].reshape(n, c, ho, 2, wo, 2)
        blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        _tally("elementwise", d.size)

        def backward(g):
            gb = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
            np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
            gb = gb.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
            gx = np.zeros(shape, dtype=g.dtype)
            gx[:, :, : 2 * ho, : 2 * wo] = gb
            return (gx,)

        return make_result(out, (x,), backward)
    raise ConfigError(f"unknown pool kind {kind!r}; expected one of {POOL_KINDS}")


def resize_nearest(x: Tensor, scale: int) -> Tensor:
    if int(scale) != scale or scale < 1:
        raise ConfigError(f"resize scale must be a positive integer, got {scale}")
    scale = int(scale)
    if scale == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form: one transcendental, no overflow for any finite input
    return 0.5 + 0.5 * np.tanh(0.5 * z)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    _tally("elementwise", y.size)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def silu(x: Tensor) -> Tensor:
    z = x.data
    s = _sigmoid(z)
    y = z * s
    _tally("elementwise", y.size)
    return make_result(y, (x,), lambda g: (g * s * (1.0 + z * (1.0 - s)),))


def softmax_channels(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    _tally("elementwise", y.size)
    return make_result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=1, keepdims=True)),))


ACTIVATIONS = {"sigmoid": sigmoid, "silu": silu, "softmax_over_channels": softmax_channels}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}") from None
    return fn(x)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def _norm_backward(g_hat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes, count):
    s1 = g_hat.sum(axis=axes, keepdims=True)
    s2 = (g_hat * xhat).sum(axis=axes, keepdims=True)
    return inv_std * (g_hat - s1 / count - xhat * s2 / count)


def batchnorm_train(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = EPS):
    """Batch-statistics normalization. Returns ``(y, batch_mean, batch_var)``; variance is biased."""
    d = x.data
    mean = d.mean(axis=(0, 2, 3), keepdims=True)
    var = d.var(axis=(0, 2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (d - mean) * inv_std
    gd = gamma.data
    y = xhat * gd + beta.data
    count = d.shape[0] * d.shape[2] * d.shape[3]
    _tally("elementwise", 2 * y.size)

    def backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        gb = g.sum(axis=(0, 2, 3), keepdims=True)
        gx = _norm_backward(g * gd, xhat, inv_std, (0, 2, 3), count)
        return gx, gg, gb

    return make_result(y, (x, gamma, beta), backward), mean, var


def batchnorm_infer(x: Tensor, mean: np.ndarray, var: np.ndarray, gamma: Tensor, beta: Tensor,
                    eps: float = EPS) -> Tensor:
    inv_std = 1.0 / np.sqrt(np.asarray(var, dtype=x.dtype) + eps)
    xhat = (x.data - mean) * inv_std
    gd = gamma.data
    y = xhat * gd + beta.data
    _tally("elementwise", 2 * y.size)

    def backward(g):
        return (g * gd * inv_std, (g * xhat).sum(axis=(0, 2, 3), keepdims=True),
                g.sum(axis=(0, 2, 3), keepdims=True))

    return make_result(y, (x, gamma, beta), backward)


def groupnorm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = EPS) -> Tensor:
    n, c, h, w = x.shape
    if num_groups < 1 or c % num_groups:
        raise PartitionError(f"groupnorm: {num_groups} groups do not divide C={c}")
    d = x.data.reshape(n, num_groups, -1)
    mean = d.mean(axis=2, keepdims=True)
    var = d.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (d - mean) * inv_std
    gd = gamma.data
    y = xhat.reshape(n, c, h, w) * gd + beta.data
    count = d.shape[2]
    _tally("elementwise", 2 * y.size)

    def backward(g):
        gg = (g * xhat.reshape(n, c, h, w)).sum(axis=(0, 2, 3), keepdims=True)
        gb = g.sum(axis=(0, 2, 3), keepdims=True)
        g_hat = (g * gd).reshape(n, num_groups, -1)
        gx = _norm_backward(g_hat, xhat, inv_std, (2,), count).reshape(n, c, h, w)
        return gx, gg, gb

    return make_result(y, (x, gamma, beta), backward)


def normalize(x: Tensor, kind: str, params: dict) -> Tensor:
    """Dispatch used by the kernel-level contract: ``batchnorm_infer`` or ``groupnorm``."""
    if kind == "batchnorm_infer":
        return batchnorm_infer(x, params["mean"], params["var"], params["gamma"], params["beta"])
    if kind == "groupnorm":
        return groupnorm(x, params["groups"], params["gamma"], params["beta"])
    raise ConfigError(f"unknown normalization {kind!r}")


# ---------------------------------------------------------------------------
# concatenation, split, matmul
# ---------------------------------------------------------------------------


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of zero tensors")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if any(a != b for k, (a, b) in enumerate(zip(ref, t.shape)) if k != axis):
            raise ShapeError(f"concat along axis {axis} of mismatched shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_result(out, tuple(tensors), backward)


def split(x: Tensor, parts, axis: int = 1) -> list[Tensor]:
    """Split into ``parts`` equal pieces (int) or pieces of the listed sizes."""
    size = x.shape[axis]
    if isinstance(parts, int):
        if parts < 1 or size % parts:
            raise PartitionError(f"cannot split C={size} into {parts} equal parts")
        sizes = [size // parts] * parts
    else:
        sizes = [int(p) for p in parts]
        if sum(sizes) != size or min(sizes) < 1:
            raise PartitionError(f"split sizes {sizes} do not partition {size}")
    outs, lo = [], 0
    for sz in sizes:
        outs.append(_slice(x, axis, lo, lo + sz))
        lo += sz
    return outs


def _slice(x: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    index = [slice(None)] * 4
    index[axis] = slice(lo, hi)
    index = tuple(index)
    shape = x.shape
    out = x.data[index].copy()

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[index] = g
        return (gx,)

    return make_result(out, (x,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over the first two."""
    if a.shape[:2] != b.shape[:2] or a.shape[3] != b.shape[2]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)
    _tally("elementwise", 2 * out.size * ad.shape[3])
    return make_result(
        out, (a, b), lambda g: (np.matmul(g, bd.swapaxes(-1, -2)), np.matmul(ad.swapaxes(-1, -2), g))
    )
