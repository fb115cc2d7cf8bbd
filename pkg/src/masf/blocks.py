"""Architectural units: Conv-BN-SiLU, MFAM, IEMA and DASI.

Blocks own their parameters through a small :class:`Module` registry. Parameter
names are dotted attribute paths, so two graphs built from different configs
share names for the layers they have in common.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from masf.errors import ConfigError
from masf.tensor import ops
from masf.tensor.core import Tensor, make_result
from masf.tensor.ops import ConvSpec

BN_MOMENTUM = 0.03
SILU_GAIN = math.sqrt(2.0)


class Module:
    """Parameter/buffer/child registry with train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Module):
            self._children[name] = value
        elif isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def set_buffer(self, name: str, value: np.ndarray):
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_children(self):
        return self._children.items()

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def modules(self):
        yield self
        for child in self._children.values():
            yield from child.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for m in self.modules():
            for p in m._params.values():
                p.data = p.data.astype(dtype)
                p.grad = None
            for name, b in list(m._buffers.items()):
                m.set_buffer(name, b.astype(dtype))
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: dict, strict: bool = True):
        params = dict(self.named_parameters())
        owners = {}
        for m_name, m in self._named_modules():
            for b in m._buffers:
                owners[m_name + b] = (m, b)
        missing = [k for k in list(params) + list(owners) if k not in state]
        unexpected = [k for k in state if k not in params and k not in owners]
        if strict and (missing or unexpected):
            raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, v in state.items():
            if k in params:
                if params[k].shape != tuple(v.shape):
                    raise ConfigError(f"shape mismatch for {k}: {params[k].shape} vs {v.shape}")
                params[k].data = np.array(v, dtype=params[k].dtype)
            elif k in owners:
                m, b = owners[k]
                m.set_buffer(b, np.array(v, dtype=getattr(m, b).dtype))

    def _named_modules(self, prefix: str = ""):
        yield prefix, self
        for cname, child in self._children.items():
            yield from child._named_modules(f"{prefix}{cname}.")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            self._children[str(i)] = layer

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self):
        return len(self.layers)


def _param(arr, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)


def kaiming_uniform(shape, rng: np.random.Generator, gain: float = SILU_GAIN) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = gain * math.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv(Module):
    """Bare convolution with optional bias."""

    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        super().__init__()
        self.spec = spec
        self.weight = _param(kaiming_uniform(spec.weight_shape, rng))
        if spec.has_bias:
            self.bias = _param(np.zeros((1, spec.out_channels, 1, 1)))
        else:
            self.bias = None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.spec, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = BN_MOMENTUM):
        super().__init__()
        self.momentum = momentum
        self.gamma = _param(np.ones((1, channels, 1, 1)))
        self.beta = _param(np.zeros((1, channels, 1, 1)))
        self.register_buffer("running_mean", np.zeros((1, channels, 1, 1), dtype=np.float32))
        self.register_buffer("running_var", np.ones((1, channels, 1, 1), dtype=np.float32))

    def forward(self, x: Tensor) -> Tensor:
        if not self.training:
            return ops.batchnorm_infer(x, self.running_mean, self.running_var, self.gamma, self.beta)
        y, mean, var = ops.batchnorm_train(x, self.gamma, self.beta)
        m = self.momentum
        dt = self.running_mean.dtype
        self.set_buffer("running_mean", ((1 - m) * self.running_mean + m * mean).astype(dt))
        self.set_buffer("running_var", ((1 - m) * self.running_var + m * var).astype(dt))
        return y


class ConvBnSiLU(Module):
    """Convolution (no bias), batch normalization, optional SiLU."""

    def __init__(self, cin, cout, k=1, stride=1, groups=1, act=True, *, rng):
        super().__init__()
        self.conv = Conv(ConvSpec.same(cin, cout, k, stride=stride, groups=groups), rng)
        self.bn = BatchNorm(cout)
        self.act = act

    @property
    def spec(self) -> ConvSpec:
        return self.conv.spec

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.silu(y) if self.act else y


class Bottleneck(Module):
    def __init__(self, c, shortcut=True, *, rng):
        super().__init__()
        self.cv1 = ConvBnSiLU(c, c, 3, rng=rng)
        self.cv2 = ConvBnSiLU(c, c, 3, rng=rng)
        self.shortcut = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.shortcut else y


# ---------------------------------------------------------------------------
# MFAM
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MfamSpec:
    channels: int
    kernel_sizes: tuple = (3, 5, 7)
    include_identity_branch: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.channels < 1:
            raise ConfigError(f"MFAM channels must be positive, got {self.channels}")
        if not self.kernel_sizes:
            raise ConfigError("MFAM needs at least one kernel size")
        even = [k for k in self.kernel_sizes if k % 2 == 0 or k < 1]
        if even:
            raise ConfigError(f"MFAM kernel sizes must be odd, got {list(self.kernel_sizes)}")

    @property
    def branch_count(self) -> int:
        return len(self.kernel_sizes) + int(self.include_identity_branch)


class Mfam(Module):
    """Multi-scale feature aggregation.

    1x1 projection, parallel depthwise convolutions at several kernel sizes plus
    an identity branch, summed, fused by a 1x1 Conv-BN-SiLU, and added back onto
    the block input.
    """

    def __init__(self, spec: MfamSpec, *, rng):
        super().__init__()
        c = spec.channels
        self.spec = spec
        self.pre = ConvBnSiLU(c, c, 1, rng=rng)
        self.branches = Sequential(*[
            Conv(ConvSpec.same(c, c, k, groups=c, bias=True), rng) for k in spec.kernel_sizes
        ])
        self.fuse = ConvBnSiLU(c, c, 1, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        p = self.pre(x)
        return x + self.fuse(self._aggregate(p))

    def _aggregate(self, p: Tensor) -> Tensor:
        # The branch sum equals one depthwise conv with the kernels summed at
        # a common centre, which runs fewer taps. FLOPs are billed per branch.
        branches = self.branches.layers
        k = max(self.spec.kernel_sizes)
        weight, bias = _merge_depthwise(branches, k, self.spec.include_identity_branch)
        spec = ConvSpec.same(self.spec.channels, self.spec.channels, k,
                             groups=self.spec.channels, bias=True)
        with ops.count_flops():
            y = ops.conv2d(p, weight, spec, bias)
        n, _, h, w = p.shape
        for branch in branches:
            ops.record_flops("conv", n * branch.spec.flops(h, w))
        n_adds = len(branches) - 1 + int(self.spec.include_identity_branch)
        ops.record_flops("elementwise", n_adds * y.data.size)
        return y


def _merge_depthwise(branches, k: int, identity: bool):
    """Sum centred depthwise kernels (and biases) into one ``k x k`` kernel."""
    c = branches[0].weight.shape[0]
    dtype = branches[0].weight.data.dtype
    weight = np.zeros((c, 1, k, k), dtype=dtype)
    bias = np.zeros((1, c, 1, 1), dtype=dtype)
    offsets = []
    for b in branches:
        kb = b.weight.shape[2]
        o = (k - kb) // 2
        offsets.append((o, kb))
        weight[:, :, o : o + kb, o : o + kb] += b.weight.data
        bias += b.bias.data
    if identity:
        weight[:, 0, k // 2, k // 2] += 1

    def backward_w(g):
        return tuple(g[:, :, o : o + kb, o : o + kb] for o, kb in offsets)

    w_t = make_result(weight, tuple(b.weight for b in branches), backward_w)
    b_t = make_result(bias, tuple(b.bias for b in branches), lambda g: (g,) * len(branches))
    return w_t, b_t


# ---------------------------------------------------------------------------
# IEMA
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IemaSpec:
    channels: int
    groups: int = 8
    band_kernel: int = 11

    def __post_init__(self):
        if self.groups < 1 or self.channels % self.groups:
            raise ConfigError(f"IEMA: channels={self.channels} not divisible by groups={self.groups}")
        if self.channels // self.groups < 4:
            raise ConfigError(
                f"IEMA: {self.channels // self.groups} channels per group; at least 4 required"
            )
        if self.band_kernel < 1 or self.band_kernel % 2 == 0:
            raise ConfigError(f"IEMA band kernel must be odd, got {self.band_kernel}")

    @classmethod
    def fit(cls, channels: int, groups: int = 8, band_kernel: int = 11) -> "IemaSpec":
        """Largest group count <= ``groups`` that divides ``channels`` with >= 4 channels each."""
        for g in range(min(groups, channels // 4), 0, -1):
            if channels % g == 0:
                return cls(channels, g, band_kernel)
        raise ConfigError(f"IEMA needs at least 4 channels, got {channels}")


class Iema(Module):
    """Grouped attention with directional pooling, a multi-branch local path and
    cross-spatial interaction between the two.

    Channels are folded into ``groups`` sub-features that share parameters.
    """

    def __init__(self, spec: IemaSpec, *, rng):
        super().__init__()
        cg = spec.channels // spec.groups
        band = spec.band_kernel
        self.spec = spec
        self.directional = Conv(ConvSpec(cg, cg, 1, 1, has_bias=True), rng)
        self.local_square = Conv(ConvSpec.same(cg, cg, 3, groups=cg, bias=True), rng)
        self.local_row = Conv(ConvSpec.same(cg, cg, 1, groups=cg, bias=True, kw=band), rng)
        self.local_col = Conv(ConvSpec.same(cg, cg, band, groups=cg, bias=True, kw=1), rng)
        self.gn_gamma = _param(np.ones((1, cg, 1, 1)))
        self.gn_beta = _param(np.zeros((1, cg, 1, 1)))

    def branches(self, x: Tensor) -> dict:
        """All intermediate maps; ``forward`` returns ``out`` from this dict."""
        b, c, h, w = x.shape
        if c != self.spec.channels:
            raise ConfigError(f"IEMA built for {self.spec.channels} channels, got {c}")
        g = self.spec.groups
        cg = c // g
        gx = ops.reshape(x, (b * g, cg, h, w))

        pooled_h = ops.pool(gx, "avg_along_W")
        pooled_w = ops.swap_hw(ops.pool(gx, "avg_along_H"))
        joint = self.directional(ops.concat([pooled_h, pooled_w], axis=2))
        part_h, part_w = ops.split(joint, [h, w], axis=2)
        att_h = ops.sigmoid(part_h)
        att_w = ops.sigmoid(ops.swap_hw(part_w))
        x1 = ops.groupnorm(gx * att_h * att_w, cg, self.gn_gamma, self.gn_beta)

        x2 = self.local_square(gx) + self.local_row(gx) + self.local_col(gx) + gx

        d1 = ops.reshape(ops.softmax_channels(ops.pool(x1, "global_avg")), (b * g, 1, 1, cg))
        d2 = ops.reshape(ops.softmax_channels(ops.pool(x2, "global_avg")), (b * g, 1, 1, cg))
        flat1 = ops.reshape(x1, (b * g, 1, cg, h * w))
        flat2 = ops.reshape(x2, (b * g, 1, cg, h * w))
        cross = ops.matmul(d1, flat2) + ops.matmul(d2, flat1)
        att_x = ops.sigmoid(ops.reshape(cross, (b * g, 1, h, w)))
        out = ops.reshape(gx * att_x, (b, c, h, w))
        return {"att_h": att_h, "att_w": att_w, "att_cross": att_x, "x1": x1, "x2": x2, "out": out}

    def forward(self, x: Tensor) -> Tensor:
        return self.branches(x)["out"]


# ---------------------------------------------------------------------------
# DASI
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DasiSpec:
    channels: int
    partitions: int = field(default=4, init=False)
    align_mode: str = "conv_then_interp"

    def __post_init__(self):
        if self.channels < 4 or self.channels % 4:
            raise ConfigError(f"DASI channels must be a positive multiple of 4, got {self.channels}")
        if self.align_mode != "conv_then_interp":
            raise ConfigError(f"unsupported DASI align mode {self.align_mode!r}")


def dasi_fuse(current: Tensor, low: Tensor, high: Tensor, partitions: int = 4) -> Tensor:
    """Per-partition gate: ``sigmoid(current) * low + (1 - sigmoid(current)) * high``."""
    if not (current.shape == low.shape == high.shape):
        raise ConfigError(f"DASI inputs not aligned: {current.shape}, {low.shape}, {high.shape}")
    fused = []
    for c_i, l_i, h_i in zip(ops.split(current, partitions), ops.split(low, partitions),
                             ops.split(high, partitions)):
        alpha = ops.sigmoid(c_i)
        fused.append(alpha * l_i + (1.0 - alpha) * h_i)
    return ops.concat(fused, axis=1)


def _log2_ratio(ratio: int) -> int:
    if ratio < 1 or ratio & (ratio - 1):
        raise ConfigError(f"DASI cannot align spatial ratio {ratio}; must be a power of two")
    return ratio.bit_length() - 1


class Dasi(Module):
    """Dimension-aware selective integration of (finer, current, coarser) features.

    ``low_channels``/``high_channels`` of ``None`` mean the neighbour is absent and
    the current features stand in for it. ``low_ratio`` is how many times larger
    the finer map is; ``high_ratio`` how many times smaller the coarser one is.
    """

    def __init__(self, spec: DasiSpec, low_channels=None, high_channels=None,
                 low_ratio=2, high_ratio=2, *, rng):
        super().__init__()
        c = spec.channels
        self.spec = spec
        self.low_align = None
        self.high_align = None
        self.high_scale = 1
        if low_channels is not None:
            steps = _log2_ratio(int(low_ratio))
            if steps == 0:
                if low_channels != c:
                    self.low_align = ConvBnSiLU(low_channels, c, 1, rng=rng)
            else:
                layers = [ConvBnSiLU(low_channels if i == 0 else c, c, 3, stride=2, rng=rng)
                          for i in range(steps)]
                self.low_align = Sequential(*layers)
        if high_channels is not None:
            _log2_ratio(int(high_ratio))
            self.high_scale = int(high_ratio)
            if high_channels != c:
                self.high_align = ConvBnSiLU(high_channels, c, 1, rng=rng)
        self.has_low = low_channels is not None
        self.has_high = high_channels is not None
        self.tail = ConvBnSiLU(c, c, 1, act=False, rng=rng)

    def align(self, current, low=None, high=None):
        if self.has_low:
            if low is None:
                raise ConfigError("DASI built with a finer input but none was given")
            low = self.low_align(low) if self.low_align is not None else low
        else:
            low = current
        if self.has_high:
            if high is None:
                raise ConfigError("DASI built with a coarser input but none was given")
            high = self.high_align(high) if self.high_align is not None else high
            high = ops.resize_nearest(high, self.high_scale)
        else:
            high = current
        return current, low, high

    def forward(self, current: Tensor, low: Tensor | None = None, high: Tensor | None = None):
        current, low, high = self.align(current, low, high)
        fused = dasi_fuse(current, low, high, self.spec.partitions)
        return current + self.tail(fused)
