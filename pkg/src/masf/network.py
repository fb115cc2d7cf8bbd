"""Model assembly: backbone with MFAM, P2-augmented PAFPN neck, IEMA, DASI and heads."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from masf.blocks import (
    Bottleneck,
    Conv,
    ConvBnSiLU,
    Dasi,
    DasiSpec,
    Iema,
    IemaSpec,
    Mfam,
    MfamSpec,
    Module,
    Sequential,
)
from masf.errors import ConfigError, ShapeError
from masf.tensor import ops
from masf.tensor.core import Tensor, no_grad
from masf.tensor.ops import ConvSpec

ALL_LEVELS = ("P2", "P3", "P4", "P5")
STRIDES = {"P1": 2, "P2": 4, "P3": 8, "P4": 16, "P5": 32}
DEFAULT_BASE_CHANNELS = {"P1": 32, "P2": 64, "P3": 128, "P4": 256, "P5": 256}
DEFAULT_BASE_DEPTH = {"P2": 2, "P3": 2, "P4": 2, "P5": 2}
CLASS_PRIOR_BIAS = -float(np.log((1 - 0.01) / 0.01))  # initial class score 0.01
CONFIG_KEYS = {
    "num_classes", "image_size", "width_mult", "depth_mult", "levels", "use_mfam", "use_iema",
    "use_dasi", "use_skips", "use_p2", "iema_groups", "mfam_kernels",
}


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 3
    image_size: int = 128
    width_mult: float = 0.25
    depth_mult: float = 0.5
    levels: tuple = ALL_LEVELS
    use_mfam: bool = True
    use_iema: bool = True
    use_dasi: bool = True
    use_skips: bool = True
    use_p2: bool = True
    iema_groups: int = 8
    mfam_kernels: tuple = (3, 5, 7)
    base_channels: dict = field(default_factory=lambda: dict(DEFAULT_BASE_CHANNELS), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(self.levels))
        object.__setattr__(self, "mfam_kernels", tuple(self.mfam_kernels))
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.width_mult <= 0 or self.depth_mult < 0:
            raise ConfigError("width_mult must be > 0 and depth_mult >= 0")
        bad = [lv for lv in self.levels if lv not in ALL_LEVELS]
        if bad or not self.levels:
            raise ConfigError(f"levels must be drawn from {ALL_LEVELS}, got {list(self.levels)}")
        idx = [ALL_LEVELS.index(lv) for lv in self.levels]
        if idx != list(range(idx[0], idx[0] + len(idx))) or idx[-1] != 3:
            raise ConfigError(f"levels must be contiguous and end at P5, got {list(self.levels)}")
        if self.use_p2 != ("P2" in self.levels):
            raise ConfigError(f"use_p2={self.use_p2} disagrees with levels {list(self.levels)}")
        if self.iema_groups < 1:
            raise ConfigError("iema_groups must be >= 1")
        MfamSpec(4, self.mfam_kernels)  # validates kernel sizes
        self.channels()

    def channels(self) -> dict[str, int]:
        out = {}
        for lv, base in self.base_channels.items():
            c = int(round(base * self.width_mult / 4.0)) * 4
            if c <= 0:
                raise ConfigError(f"width_mult={self.width_mult} rounds level {lv} to 0 channels")
            out[lv] = c
        return out

    def depth(self, level: str) -> int:
        return max(1, int(round(DEFAULT_BASE_DEPTH[level] * self.depth_mult)))

    @property
    def strides(self) -> dict[str, int]:
        return {lv: STRIDES[lv] for lv in self.levels}

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_channels")
        d["levels"] = list(self.levels)
        d["mfam_kernels"] = list(self.mfam_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        keys = set(d)
        if keys != CONFIG_KEYS:
            raise ConfigError(
                f"model config keys mismatch: missing {sorted(CONFIG_KEYS - keys)}, "
                f"unexpected {sorted(keys - CONFIG_KEYS)}"
            )
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ModelConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read model config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from None

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def baseline(cls, **kw) -> "ModelConfig":
        """Surrogate baseline: P3-P5 heads, no MFAM, skips, IEMA or DASI."""
        kw.setdefault("levels", ("P3", "P4", "P5"))
        return cls(use_mfam=False, use_iema=False, use_dasi=False, use_skips=False,
                   use_p2=False, **kw)

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def ablation_ladder(cls, **kw) -> list[tuple[str, "ModelConfig"]]:
        """Baseline, then P2 head, MFAM, skip fusion, IEMA and DASI added one at a time."""
        base = cls.baseline(**kw)
        p2 = replace(base, levels=ALL_LEVELS, use_p2=True)
        mfam = replace(p2, use_mfam=True)
        skips = replace(mfam, use_skips=True)
        iema = replace(skips, use_iema=True)
        dasi = replace(iema, use_dasi=True)
        return [("baseline", base), ("+P2", p2), ("+MFAM", mfam), ("+Fusion", skips),
                ("+IEMA", iema), ("+DASI", dasi)]


def _neck_block(cin: int, cout: int, depth: int, rng) -> Sequential:
    layers = [ConvBnSiLU(cin, cout, 1, rng=rng)]
    layers += [Bottleneck(cout, shortcut=False, rng=rng) for _ in range(depth)]
    return Sequential(*layers)


class MasfYolo(Module):
    """Detector graph. ``forward`` maps images to ``{level: (N, 4 + classes, H_k, W_k)}``."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        ch = config.channels()
        self.stem = ConvBnSiLU(3, ch["P1"], 3, stride=2, rng=rng)
        prev = "P1"
        for lv in ALL_LEVELS:
            layers = [ConvBnSiLU(ch[prev], ch[lv], 3, stride=2, rng=rng)]
            layers += [Bottleneck(ch[lv], rng=rng) for _ in range(config.depth(lv))]
            setattr(self, f"stage_{lv}", Sequential(*layers))
            if config.use_mfam:
                setattr(self, f"mfam_{lv}",
                        Mfam(MfamSpec(ch[lv], config.mfam_kernels), rng=rng))
            prev = lv

        levels = config.levels
        top = levels[-1]
        self.lateral_P5 = ConvBnSiLU(ch[top], ch[top], 1, rng=rng)
        for k in range(len(levels) - 2, -1, -1):
            lv, up = levels[k], levels[k + 1]
            setattr(self, f"td_{lv}", _neck_block(ch[up] + ch[lv], ch[lv], config.depth(lv), rng))
        for k in range(1, len(levels)):
            lv, down = levels[k], levels[k - 1]
            setattr(self, f"down_{down}", ConvBnSiLU(ch[down], ch[down], 3, stride=2, rng=rng))
            cin = ch[down] + ch[lv] + (ch[lv] if config.use_skips else 0)
            setattr(self, f"bu_{lv}", _neck_block(cin, ch[lv], config.depth(lv), rng))

        for k, lv in enumerate(levels):
            c = ch[lv]
            if config.use_iema:
                setattr(self, f"iema_{lv}", Iema(IemaSpec.fit(c, config.iema_groups), rng=rng))
            if config.use_dasi:
                low = ch[levels[k - 1]] if k > 0 else None
                high = ch[levels[k + 1]] if k + 1 < len(levels) else None
                setattr(self, f"dasi_{lv}", Dasi(DasiSpec(c), low, high, rng=rng))
            pred = Conv(ConvSpec(c, 4 + config.num_classes, 1, 1, has_bias=True), rng)
            pred.bias.data[:, 4:] = CLASS_PRIOR_BIAS
            head = Sequential(ConvBnSiLU(c, c, 3, rng=rng), pred)
            setattr(self, f"head_{lv}", head)
        self._trace = None

    def _run(self, name, fn, *args):
        if self._trace is None:
            return fn(*args)
        tally = ops._flops.tally
        before = (tally["conv"], tally["elementwise"])
        out = fn(*args)
        self._trace.append((name, out.shape, tally["conv"] - before[0],
                            tally["elementwise"] - before[1]))
        return out

    def forward(self, images: Tensor, check_size: bool = True) -> dict[str, Tensor]:
        cfg = self.config
        if images.shape[1] != 3 or (check_size and images.shape[2:] != (cfg.image_size,) * 2):
            raise ShapeError(
                f"expected images of shape (N, 3, {cfg.image_size}, {cfg.image_size}), "
                f"got {images.shape}"
            )
        run = self._run
        x = run("stem", self.stem, images)
        feats = {}
        for lv in ALL_LEVELS:
            x = run(f"stage_{lv}", getattr(self, f"stage_{lv}"), x)
            if cfg.use_mfam:
                x = run(f"mfam_{lv}", getattr(self, f"mfam_{lv}"), x)
            feats[lv] = x

        levels = cfg.levels
        td = {levels[-1]: run("lateral_P5", self.lateral_P5, feats[levels[-1]])}
        for k in range(len(levels) - 2, -1, -1):
            lv, up = levels[k], levels[k + 1]
            joined = ops.concat([ops.resize_nearest(td[up], 2), feats[lv]])
            td[lv] = run(f"td_{lv}", getattr(self, f"td_{lv}"), joined)

        neck = {levels[0]: td[levels[0]]}
        for k in range(1, len(levels)):
            lv, down = levels[k], levels[k - 1]
            parts = [run(f"down_{down}", getattr(self, f"down_{down}"), neck[down]), td[lv]]
            if cfg.use_skips:
                parts.append(feats[lv])
            neck[lv] = run(f"bu_{lv}", getattr(self, f"bu_{lv}"), ops.concat(parts))

        if cfg.use_iema:
            neck = {lv: run(f"iema_{lv}", getattr(self, f"iema_{lv}"), neck[lv]) for lv in levels}
        if cfg.use_dasi:
            fused = {}
            for k, lv in enumerate(levels):
                low = neck[levels[k - 1]] if k > 0 else None
                high = neck[levels[k + 1]] if k + 1 < len(levels) else None
                fused[lv] = run(f"dasi_{lv}", getattr(self, f"dasi_{lv}"), neck[lv], low, high)
            neck = fused
        return {lv: run(f"head_{lv}", getattr(self, f"head_{lv}"), neck[lv]) for lv in levels}

    def layer_table(self, image_size: int | None = None) -> list[dict]:
        """Per top-level layer: output shape, parameter count and FLOPs for one image."""
        size = image_size or self.config.image_size
        counts = {}
        for name, p in self.named_parameters():
            top = name.split(".", 1)[0]
            counts[top] = counts.get(top, 0) + p.size
        self._trace = []
        try:
            with _frozen(self), ops.count_flops():
                dtype = self.stem.conv.weight.dtype
                self.forward(Tensor(np.zeros((1, 3, size, size), dtype)), check_size=False)
            trace = self._trace
        finally:
            self._trace = None
        return [
            {"layer": name, "output": list(shape), "params": counts.get(name, 0),
             "conv_flops": cf, "elementwise_flops": ef}
            for name, shape, cf, ef in trace
        ]


class _frozen:
    """Evaluate in inference mode without tape; restore the previous mode afterwards."""

    def __init__(self, model: Module):
        self.model = model
        self.ng = no_grad()

    def __enter__(self):
        self.modes = [(m, m.training) for m in self.model.modules()]
        self.model.eval()
        self.ng.__enter__()

    def __exit__(self, *exc):
        self.ng.__exit__(*exc)
        for m, mode in self.modes:
            object.__setattr__(m, "training", mode)


def build_model(config: ModelConfig, seed: int = 0) -> MasfYolo:
    return MasfYolo(config, seed=seed)


def model_forward(graph: MasfYolo, images: Tensor) -> dict[str, Tensor]:
    return graph(images)


def count_params(graph: Module) -> int:
    return int(sum(p.size for p in graph.parameters()))


def flop_counts(graph: Module, image_size: int) -> dict[str, int]:
    """``{"conv": n, "elementwise": n}`` for one image of side ``image_size``."""
    if isinstance(graph, MasfYolo):
        table = graph.layer_table(image_size)
        conv = sum(r["conv_flops"] for r in table)
        elem = sum(r["elementwise_flops"] for r in table)
        return {"conv": conv, "elementwise": elem}
    with _frozen(graph), ops.count_flops() as tally:
        cin = graph.spec.in_channels if hasattr(graph, "spec") else 3
        dtype = graph.parameters()[0].dtype
        graph(Tensor(np.zeros((1, cin, image_size, image_size), dtype)))
    return dict(tally)


def estimate_gflops(graph: Module, image_size: int | None = None) -> float:
    if image_size is None:
        image_size = graph.config.image_size
    c = flop_counts(graph, image_size)
    return (c["conv"] + c["elementwise"]) / 1e9
