"""Double-branch backbone: a residual branch and an inverted-bottleneck (MBCB) branch.

Both branches read a shared stem and tap three pyramid levels. Level ``j = 1`` is
the coarsest (stride 32), ``j = 3`` the finest (stride 8). Stage lists in
:class:`DbfenConfig` are given in execution order, i.e. ``(j=3, j=2, j=1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .nn import Conv, DepthwiseConv, Module
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat_channels,
    global_avg_pool,
    mul,
)

LEVELS = (1, 2, 3)


@dataclass
class DbfenConfig:
    stem_channels: int = 32
    widths: tuple[int, int, int] = (64, 128, 256)
    blocks_per_stage_branch1: tuple[int, int, int] = (1, 1, 1)
    blocks_per_stage_branch2: tuple[int, int, int] = (1, 1, 1)
    expansion_ratio: int = 4
    drop_prob: float = 0.2
    se_reduction: int = 4

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.blocks_per_stage_branch1 = tuple(int(n) for n in self.blocks_per_stage_branch1)
        self.blocks_per_stage_branch2 = tuple(int(n) for n in self.blocks_per_stage_branch2)
        if len(self.blocks_per_stage_branch1) != 3 or len(self.blocks_per_stage_branch2) != 3:
            raise ValueError("each branch needs exactly three per-stage block counts")
        if len(self.widths) != 3:
            raise ValueError("widths needs exactly three entries")
        if min(self.blocks_per_stage_branch1 + self.blocks_per_stage_branch2) < 1:
            raise ValueError("block counts must be positive")
        if any(w % 2 for w in self.widths + (self.stem_channels,)):
            raise ValueError("channel widths must be even (residual units concatenate two halves)")
        if self.expansion_ratio < 1 or self.se_reduction < 1:
            raise ValueError("expansion_ratio and se_reduction must be positive")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ValueError(f"drop_prob must lie in [0, 1), got {self.drop_prob}")

    @property
    def name(self) -> str:
        """``DBFENa-b`` with a, b the total block counts of the two branches."""
        return f"DBFEN{sum(self.blocks_per_stage_branch1)}-{sum(self.blocks_per_stage_branch2)}"

    @classmethod
    def micro(cls, **overrides) -> "DbfenConfig":
        base = dict(stem_channels=8, widths=(8, 16, 32), expansion_ratio=2, drop_prob=0.0)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def named(cls, a: int, b: int, **overrides) -> "DbfenConfig":
        """Spread ``a`` residual and ``b`` MBCB blocks over the three stages."""
        return cls(blocks_per_stage_branch1=_split(a), blocks_per_stage_branch2=_split(b), **overrides)


def _split(total: int) -> tuple[int, int, int]:
    if total < 3:
        raise ValueError("need at least one block per stage")
    base, extra = divmod(total, 3)
    return tuple(base + (1 if i < extra else 0) for i in range(3))


@dataclass
class PyramidSet:
    """Multi-scale features keyed by ``(branch, level)`` or ``("out", level)``."""

    levels: dict = field(default_factory=dict)

    def __getitem__(self, key) -> Tensor:
        try:
            return self.levels[key]
        except KeyError:
            raise ShapeError(f"pyramid level {key!r} missing") from None

    def __setitem__(self, key, value: Tensor):
        self.levels[key] = value

    def __contains__(self, key) -> bool:
        return key in self.levels

    def outputs(self) -> list[Tensor]:
        return [self[("out", k)] for k in LEVELS]


class ResidualBlock(Module):
    """Residual unit of branch 1.

    Downsampling form: ``d = conv3x3/s2(x)``, output ``concat(d, conv3x3(conv1x1(d)))``.
    Stride-1 repeats add the two paths instead of concatenating them.
    """

    def __init__(self, rng, cin: int, cout: int, downsample: bool, dtype=np.float64):
        self._downsample = downsample
        if downsample:
            half = cout // 2
            self.down = Conv(rng, cin, half, 3, stride=2, dtype=dtype)
            self.squeeze = Conv(rng, half, max(1, half // 2), 1, dtype=dtype)
            self.expand = Conv(rng, max(1, half // 2), half, 3, dtype=dtype)
        else:
            if cin != cout:
                raise ValueError("non-downsampling residual units keep their width")
            self.squeeze = Conv(rng, cin, max(1, cin // 2), 1, dtype=dtype)
            self.expand = Conv(rng, max(1, cin // 2), cout, 3, dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        if self._downsample:
            if x.shape[2] % 2 or x.shape[3] % 2:
                raise ShapeError(f"stride-2 residual unit needs even extents, got {x.shape[2]}x{x.shape[3]}")
            d = self.down(x)
            return concat_channels([d, self.expand(self.squeeze(d))])
        return add([x, self.expand(self.squeeze(x))])


class SEBlock(Module):
    """Channel gating: ``x * sigmoid(W2 act(W1 avgpool(x)))``."""

    def __init__(self, rng, channels: int, reduction: int, act: str = "silu", dtype=np.float64):
        reduced = max(1, channels // reduction)
        self.reduce = Conv(rng, channels, reduced, 1, act=act, dtype=dtype)
        self.gate = Conv(rng, reduced, channels, 1, act="sigmoid", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return mul(x, self.gate(self.reduce(global_avg_pool(x))))


def drop_connect(x: Tensor, drop_prob: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Zero whole samples of the residual path with probability ``drop_prob``; rescale the rest."""
    if not training or drop_prob == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode drop-connect needs an rng")
    keep = 1.0 - drop_prob
    mask = (rng.random((x.shape[0], 1, 1, 1)) < keep).astype(x.dtype) / keep
    return mul(x, Tensor(mask))


class MBCBlock(Module):
    """Mobile inverted bottleneck: expand -> depthwise -> SE -> project (+ skip)."""

    def __init__(self, rng, cin: int, cout: int, stride: int, expansion: int,
                 drop_prob: float, se_reduction: int, dtype=np.float64):
        mid = cin * expansion
        self.expand = Conv(rng, cin, mid, 1, act="silu", dtype=dtype) if expansion != 1 else None
        self.depthwise = DepthwiseConv(rng, mid, 3, stride=stride, dtype=dtype)
        self.se = SEBlock(rng, mid, se_reduction, dtype=dtype)
        self.project = Conv(rng, mid, cout, 1, act="linear", dtype=dtype)
        self._skip = stride == 1 and cin == cout
        self._stride = stride
        self._drop_prob = drop_prob
        self._mid = mid

    @property
    def expanded_width(self) -> int:
        return self._mid

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        if self._stride == 2 and (x.shape[2] % 2 or x.shape[3] % 2):
            raise ShapeError(f"stride-2 MBCB needs even extents, got {x.shape[2]}x{x.shape[3]}")
        h = self.expand(x) if self.expand is not None else x
        h = self.project(self.se(self.depthwise(h)))
        if not self._skip:
            return h
        return add([x, drop_connect(h, self._drop_prob, training, rng)])


def residual_block(x: Tensor, block: ResidualBlock) -> Tensor:
    return block(x)


def se_block(x: Tensor, block: SEBlock) -> Tensor:
    return block(x)


def mbcb_block(x: Tensor, block: MBCBlock, training: bool = False, rng=None) -> Tensor:
    return block(x, training=training, rng=rng)


class DBFEN(Module):
    def __init__(self, cfg: DbfenConfig, rng: np.random.Generator, dtype=np.float64):
        self._cfg = cfg
        s = cfg.stem_channels
        self.stem = [ResidualBlock(rng, 3, s, True, dtype), ResidualBlock(rng, s, s, True, dtype)]

        self.branch1 = []
        cin = s
        for width, n in zip(cfg.widths, cfg.blocks_per_stage_branch1):
            stage = [ResidualBlock(rng, cin, width, True, dtype)]
            stage += [ResidualBlock(rng, width, width, False, dtype) for _ in range(n - 1)]
            self.branch1.append(stage)
            cin = width

        self.branch2 = []
        cin = s
        for width, n in zip(cfg.widths, cfg.blocks_per_stage_branch2):
            stage = [MBCBlock(rng, cin, width, 2, cfg.expansion_ratio, cfg.drop_prob, cfg.se_reduction, dtype)]
            stage += [
                MBCBlock(rng, width, width, 1, cfg.expansion_ratio, cfg.drop_prob, cfg.se_reduction, dtype)
                for _ in range(n - 1)
            ]
            self.branch2.append(stage)
            cin = width

    @property
    def config(self) -> DbfenConfig:
        return self._cfg

    def __call__(self, image: Tensor, training: bool = False, rng=None) -> PyramidSet:
        return dbfen_forward(image, self, training=training, rng=rng)


def dbfen_forward(image: Tensor, net: DBFEN, training: bool = False, rng=None) -> PyramidSet:
    """Run both branches and return the six taps ``(i, j)``, ``i`` in {1, 2}, ``j`` in {1, 2, 3}."""
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ShapeError(f"DBFEN expects an N x 3 x H x W image, got {image.shape}")
    h, w = image.shape[2:]
    if h % 32 or w % 32 or h == 0 or w == 0:
        raise ShapeError(f"DBFEN input extents must be positive multiples of 32, got {h}x{w}")
    x = image
    for unit in net.stem:
        x = unit(x)

    pyr = PyramidSet()
    a = x
    for j, stage in zip((3, 2, 1), net.branch1):
        for unit in stage:
            a = unit(a)
        pyr[(1, j)] = a
    b = x
    for j, stage in zip((3, 2, 1), net.branch2):
        for unit in stage:
            b = unit(b, training=training, rng=rng)
        pyr[(2, j)] = b
    return pyr
