"""Seesaw building blocks.

A Seesaw block is an inverted residual bottleneck whose two pointwise
convolutions are split into *uneven* channel groups.  Cross-group
information flow comes either from a channel shuffle after the expansion
(``seesaw_shuffle``) or from groups that read overlapping input channel
ranges (``seesaw_share``).  ``inverted_residual`` is the MobileFaceNet
baseline block with full 1x1 convolutions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .layers import (
    Activation,
    BatchNorm,
    Conv2d,
    DepthwiseConv2d,
    Layer,
    Linear,
    MaxPool2d,
)

VARIANTS = ("seesaw_shuffle", "seesaw_share", "inverted_residual")
SHUFFLE_GROUPS = 2


def channel_shuffle(x: np.ndarray, groups: int) -> np.ndarray:
    """Reshape-transpose shuffle: channel ``k*(C/g)+j`` moves to ``j*g+k``."""
    n, c = x.shape[:2]
    if groups < 1 or c % groups:
        raise ValueError(f"shuffle groups={groups} must divide channel count {c}")
    rest = x.shape[2:]
    return x.reshape(n, groups, c // groups, *rest).swapaxes(1, 2).reshape(x.shape)


def shuffle_permutation(channels: int, groups: int) -> np.ndarray:
    """``perm[new_index] = old_index`` for :func:`channel_shuffle`."""
    return np.arange(channels).reshape(groups, channels // groups).T.reshape(-1)


class ChannelShuffle(Layer):
    def __init__(self, groups: int):
        super().__init__()
        self.groups = groups

    def forward(self, x, train=False):
        self._ctx = True
        return channel_shuffle(x, self.groups)

    def backward(self, grad):
        self._take_ctx()
        return channel_shuffle(grad, grad.shape[1] // self.groups)


@dataclass(frozen=True)
class ChannelRangeGroup:
    """One group of an uneven pointwise conv: reads ``input_range``, writes ``output_range``.

    Ranges are half-open ``(start, end)`` channel intervals.
    """

    input_range: tuple[int, int]
    output_range: tuple[int, int]
    weights: np.ndarray | None = None

    @property
    def in_width(self) -> int:
        return self.input_range[1] - self.input_range[0]

    @property
    def out_width(self) -> int:
        return self.output_range[1] - self.output_range[0]


def split_width(channels: int, split_ratio: float) -> int:
    """Width of the first (small) uneven group."""
    if not 0 < split_ratio < 1:
        raise ValueError(f"split_ratio must lie in (0, 1), got {split_ratio}")
    return math.ceil(split_ratio * channels)


def uneven_split_cover(c_in: int, c_out: int, split_ratio: float) -> list[ChannelRangeGroup]:
    """Two disjoint groups with ``ceil(r*C)`` / ``C - ceil(r*C)`` channels on each side."""
    a = split_width(c_in, split_ratio)
    b = split_width(c_out, split_ratio)
    if a >= c_in or b >= c_out:
        return [ChannelRangeGroup((0, c_in), (0, c_out))]
    return [ChannelRangeGroup((0, a), (0, b)), ChannelRangeGroup((a, c_in), (b, c_out))]


def channel_share_cover(c_in: int, c_out: int, split_ratio: float) -> list[ChannelRangeGroup]:
    """Two groups whose input ranges overlap by ``ceil(r * sA)`` channels.

    Group A reads ``[0, sA)``, group B reads ``[sA - ovl, C_in)``.  Output
    ranges partition ``[0, C_out)`` exactly as in :func:`uneven_split_cover`.
    """
    s_a = split_width(c_in, split_ratio)
    b = split_width(c_out, split_ratio)
    if s_a >= c_in or b >= c_out:
        return [ChannelRangeGroup((0, c_in), (0, c_out))]
    ovl = math.ceil(split_ratio * s_a)
    return [
        ChannelRangeGroup((0, s_a), (0, b)),
        ChannelRangeGroup((s_a - ovl, c_in), (b, c_out)),
    ]


def validate_cover(groups: Sequence[ChannelRangeGroup], c_in: int, c_out: int) -> None:
    if not groups:
        raise ValueError("at least one channel group is required")
    for g in groups:
        (i0, i1), (o0, o1) = g.input_range, g.output_range
        if not (0 <= i0 < i1 <= c_in):
            raise ValueError(f"input range {g.input_range} outside [0, {c_in})")
        if not (0 <= o0 < o1 <= c_out):
            raise ValueError(f"output range {g.output_range} outside [0, {c_out})")
    covered = np.zeros(c_out, dtype=int)
    for g in groups:
        covered[g.output_range[0] : g.output_range[1]] += 1
    if (covered == 0).any():
        gap = int(np.flatnonzero(covered == 0)[0])
        raise ValueError(f"output channels are not covered: gap starting at channel {gap}")
    if (covered > 1).any():
        dup = int(np.flatnonzero(covered > 1)[0])
        raise ValueError(f"output channel {dup} is written by more than one group")


def _pointwise(x, w2d):
    n, _, h, wd = x.shape
    out = np.matmul(w2d, x.reshape(n, x.shape[1], h * wd))
    return out.reshape(n, w2d.shape[0], h, wd)


def uneven_group_pointwise(x: np.ndarray, groups: Sequence[ChannelRangeGroup],
                           c_out: int | None = None) -> np.ndarray:
    """Apply each group's 1x1 weights to its input range and write its output range."""
    T.check_tensor(x)
    if c_out is None:
        c_out = max(g.output_range[1] for g in groups)
    validate_cover(groups, x.shape[1], c_out)
    out = np.empty((x.shape[0], c_out) + x.shape[2:], dtype=x.dtype)
    for g in groups:
        w = g.weights
        if w is None or w.shape[:2] != (g.out_width, g.in_width):
            got = None if w is None else w.shape
            raise T.ShapeError(
                f"weights: group {g.input_range}->{g.output_range} needs "
                f"({g.out_width}, {g.in_width}, 1, 1), got {got}"
            )
        i0, i1 = g.input_range
        o0, o1 = g.output_range
        out[:, o0:o1] = _pointwise(x[:, i0:i1], w.reshape(w.shape[0], w.shape[1]))
    return out


class UnevenPointwise(Layer):
    """Pointwise conv made of :class:`ChannelRangeGroup` pieces; weights ``g{i}.weight``."""

    def __init__(self, c_in, c_out, cover: Sequence[ChannelRangeGroup], dtype=np.float32):
        super().__init__()
        validate_cover(cover, c_in, c_out)
        self.c_in, self.c_out = c_in, c_out
        self.cover = [ChannelRangeGroup(g.input_range, g.output_range) for g in cover]
        for i, g in enumerate(self.cover):
            self.params[f"g{i}.weight"] = np.zeros((g.out_width, g.in_width, 1, 1), dtype=dtype)

    def groups(self) -> list[ChannelRangeGroup]:
        return [
            ChannelRangeGroup(g.input_range, g.output_range, self.params[f"g{i}.weight"])
            for i, g in enumerate(self.cover)
        ]

    def forward(self, x, train=False):
        if x.shape[1] != self.c_in:
            raise T.ShapeError(f"channels: expected {self.c_in}, got {x.shape[1]}")
        self._ctx = x
        return uneven_group_pointwise(x, self.groups(), self.c_out)

    def backward(self, grad):
        x = self._take_ctx()
        n, _, h, wd = x.shape
        dx = np.zeros_like(x, dtype=grad.dtype)
        for i, g in enumerate(self.cover):
            (i0, i1), (o0, o1) = g.input_range, g.output_range
            w = self.params[f"g{i}.weight"]
            xs = x[:, i0:i1].reshape(n, i1 - i0, h * wd)
            gs = grad[:, o0:o1].reshape(n, o1 - o0, h * wd)
            self.grads[f"g{i}.weight"] = np.einsum("nok,nik->oi", gs, xs).reshape(w.shape)
            w2 = w.reshape(w.shape[0], w.shape[1])
            dx[:, i0:i1] += np.matmul(w2.T, gs).reshape(n, i1 - i0, h, wd)
        return dx


def se_width(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


class SqueezeExcite(Layer):
    """avg-pool -> FC(C->C/r) -> swish -> FC(C/r->C) -> sigmoid -> channel scale."""

    def __init__(self, channels: int, reduction: int = 4, dtype=np.float32):
        super().__init__()
        red = se_width(channels, reduction)
        self.fc1 = Linear(channels, red, bias=True, dtype=dtype)
        self.act = Activation("swish")
        self.fc2 = Linear(red, channels, bias=True, dtype=dtype)

    def children(self):
        return iter((("fc1", self.fc1), ("fc2", self.fc2)))

    def scale(self, x):
        s = x.mean(axis=(2, 3))
        z = self.fc2.forward(self.act.forward(self.fc1.forward(s)))
        return T.sigmoid(z)

    def forward(self, x, train=False):
        sc = self.scale(x)
        self._ctx = (x, sc)
        return x * sc[:, :, None, None]

    def backward(self, grad):
        x, sc = self._take_ctx()
        dsc = (grad * x).sum(axis=(2, 3))
        dz = dsc * sc * (1 - sc)
        ds = self.fc1.backward(self.act.backward(self.fc2.backward(dz)))
        hw = x.shape[2] * x.shape[3]
        return grad * sc[:, :, None, None] + ds[:, :, None, None] / hw


@dataclass(frozen=True)
class BlockConfig:
    """One bottleneck block.  ``expansion_channels`` is the middle width."""

    in_channels: int
    out_channels: int
    expansion_channels: int
    stride: int = 1
    variant: str = "seesaw_shuffle"
    split_ratio: float = 0.25
    use_se: bool = True
    se_reduction: int = 4
    activation: str = "swish"
    residual: bool = False
    skip_branch: bool = False

    def __post_init__(self):
        if min(self.in_channels, self.out_channels, self.expansion_channels) < 1:
            raise ValueError("channel counts must be positive")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.activation not in ("swish", "prelu"):
            raise ValueError(f"block activation must be swish or prelu, got {self.activation!r}")
        if self.residual and (self.stride != 1 or self.in_channels != self.out_channels):
            raise ValueError(
                "residual blocks need stride 1 and in_channels == out_channels, got "
                f"stride={self.stride} {self.in_channels}->{self.out_channels}"
            )
        if self.skip_branch and (self.stride != 2 or self.residual):
            raise ValueError("the max-pool skip branch only applies to stride-2 blocks without residual")
        if self.se_reduction < 1:
            raise ValueError("se_reduction must be positive")
        if self.variant != "inverted_residual":
            for c in (self.in_channels, self.expansion_channels, self.out_channels):
                a = split_width(c, self.split_ratio)
                if a < 1 or c - a < 1:
                    raise ValueError(
                        f"split_ratio {self.split_ratio} leaves an empty group for {c} channels"
                    )
            if self.variant == "seesaw_shuffle" and self.expansion_channels % SHUFFLE_GROUPS:
                raise ValueError(
                    f"expansion_channels={self.expansion_channels} must be divisible by "
                    f"{SHUFFLE_GROUPS} for the channel shuffle"
                )

    def covers(self) -> tuple[list[ChannelRangeGroup], list[ChannelRangeGroup]]:
        """Channel groups of the expansion and projection pointwise convs."""
        c_in, c_exp, c_out = self.in_channels, self.expansion_channels, self.out_channels
        if self.variant == "inverted_residual":
            return ([ChannelRangeGroup((0, c_in), (0, c_exp))],
                    [ChannelRangeGroup((0, c_exp), (0, c_out))])
        make = channel_share_cover if self.variant == "seesaw_share" else uneven_split_cover
        return make(c_in, c_exp, self.split_ratio), make(c_exp, c_out, self.split_ratio)


class DownsampleSkip(Layer):
    """2x2 max pool followed by a 1x1 conv; the DW-V2 shortcut for stride-2 blocks."""

    def __init__(self, c_in, c_out, dtype=np.float32):
        super().__init__()
        self.pool = MaxPool2d(2)
        self.conv = Conv2d(c_in, c_out, kernel=1, dtype=dtype)

    def children(self):
        return iter((("conv", self.conv),))

    def forward(self, x, train=False):
        self._ctx = True
        return self.conv.forward(self.pool.forward(x))

    def backward(self, grad):
        self._take_ctx()
        return self.pool.backward(self.conv.backward(grad))


class SeesawBlock(Layer):
    """Expand (uneven 1x1) -> [shuffle] -> 3x3 depthwise -> [SE] -> project (uneven 1x1, linear).

    BN follows every convolution; the expansion and depthwise stages are
    followed by the configured activation.  Residual blocks add the input,
    DW-V2 downsampling blocks add :class:`DownsampleSkip` of the input.
    """

    def __init__(self, cfg: BlockConfig, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        exp_cover, proj_cover = cfg.covers()
        c_exp = cfg.expansion_channels
        main: list[tuple[str, Layer]] = [
            ("expand", UnevenPointwise(cfg.in_channels, c_exp, exp_cover, dtype=dtype)),
            ("bn1", BatchNorm(c_exp, dtype=dtype)),
            ("act1", Activation(cfg.activation, c_exp, dtype=dtype)),
        ]
        if cfg.variant == "seesaw_shuffle":
            main.append(("shuffle", ChannelShuffle(SHUFFLE_GROUPS)))
        main += [
            ("dw", DepthwiseConv2d(c_exp, 3, cfg.stride, dtype=dtype)),
            ("bn2", BatchNorm(c_exp, dtype=dtype)),
            ("act2", Activation(cfg.activation, c_exp, dtype=dtype)),
        ]
        if cfg.use_se:
            main.append(("se", SqueezeExcite(c_exp, cfg.se_reduction, dtype=dtype)))
        main += [
            ("project", UnevenPointwise(c_exp, cfg.out_channels, proj_cover, dtype=dtype)),
            ("bn3", BatchNorm(cfg.out_channels, dtype=dtype)),
        ]
        self.main = main
        self.skip = DownsampleSkip(cfg.in_channels, cfg.out_channels, dtype) if cfg.skip_branch else None

    def children(self):
        yield from self.main
        if self.skip is not None:
            yield "skip", self.skip

    def forward(self, x, train=False):
        if x.shape[1] != self.cfg.in_channels:
            raise T.ShapeError(f"channels: block expects {self.cfg.in_channels}, got {x.shape[1]}")
        out = x
        for _, layer in self.main:
            out = layer.forward(out, train)
        if self.skip is not None:
            branch = self.skip.forward(x, train)
            if branch.shape != out.shape:
                raise T.ShapeError(
                    f"height/width: skip branch gives {branch.shape[2:]}, main path {out.shape[2:]}"
                )
            out = out + branch
        if self.cfg.residual:
            if out.shape != x.shape:
                raise T.ShapeError(f"residual: main path {out.shape} != input {x.shape}")
            out = out + x
        self._ctx = True
        return out

    def backward(self, grad):
        self._take_ctx()
        g = grad
        for _, layer in reversed(self.main):
            g = layer.backward(g)
        if self.skip is not None:
            g = g + self.skip.backward(grad)
        if self.cfg.residual:
            g = g + grad
        return g


def _load(layer: Layer, weights: Mapping[str, np.ndarray] | None) -> Layer:
    if weights is None:
        return layer
    for name, arr in layer.named_parameters():
        if name not in weights:
            raise KeyError(f"missing weight {name!r}")
        src = np.asarray(weights[name])
        if src.shape != arr.shape:
            raise T.ShapeError(f"{name}: expected {arr.shape}, got {src.shape}")
        arr[...] = src
    for name, arr in layer.named_buffers():
        if name in weights:
            arr[...] = weights[name]
    return layer


def seesaw_block_forward(x: np.ndarray, cfg: BlockConfig,
                         weights: Mapping[str, np.ndarray] | None = None,
                         train: bool = False) -> np.ndarray:
    """Stateless block evaluation; ``weights`` maps parameter names to arrays (None = zeros)."""
    return _load(SeesawBlock(cfg, dtype=x.dtype), weights).forward(x, train)


def inverted_residual_forward(x, cfg: BlockConfig, weights=None, train=False):
    if cfg.variant != "inverted_residual":
        raise ValueError("inverted_residual_forward needs variant='inverted_residual'")
    return seesaw_block_forward(x, cfg, weights, train)


def downsample_skip_branch(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Max pool 2x2/2 then a 1x1 conv with ``weights`` shaped (C_out, C_in, 1, 1)."""
    return T.conv2d_forward(T.max_pool2d(x, 2, 2), weights)
