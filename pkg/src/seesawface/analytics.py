"""Analytic parameter / MAdds cost model.

Counting rule: only convolutions and fully connected layers contribute
MAdds (one multiply-accumulate each).  Batch norm, activations (including
sigmoid and swish), channel shuffle, pooling and residual adds cost 0
MAdds.  Parameters include conv/FC weights, FC biases, BN gamma/beta and
PReLU slopes; BN running statistics are not parameters.

Counts are derived from the ModelSpec alone, never from built weights, so the
equality between analytic and built parameter counts is a real check.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from . import tensor as T
from .architectures import LayerSpec, ModelGraph, ModelSpec, expand_layers, layer_output_shape
from .blocks import SHUFFLE_GROUPS, se_width

COUNTING_RULE = (
    "MAdds = multiply-accumulates of conv and FC layers only "
    "(BN, activations, sigmoid/swish, shuffle, pooling, adds = 0); "
    "params include BN gamma/beta and PReLU slopes, exclude BN running stats"
)

PRIMITIVE_KINDS = ("conv", "pointwise", "dwconv", "gdconv", "fc", "bn", "activation",
                   "sigmoid", "se", "shuffle", "maxpool", "add")


@dataclass(frozen=True)
class Primitive:
    """One countable operator.  ``groups`` lists (in_width, out_width) per pointwise group."""

    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 1
    stride: int = 1
    groups: tuple[tuple[int, int], ...] = ()
    activation: str = ""
    reduction: int = 4


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    madds: int
    prelu_params: int = 0


@dataclass
class CostReport:
    model: str
    records: list[LayerCost] = field(default_factory=list)
    counting_rule: str = COUNTING_RULE

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.records)

    @property
    def total_madds(self) -> int:
        return sum(r.madds for r in self.records)

    @property
    def prelu_params(self) -> int:
        return sum(r.prelu_params for r in self.records)

    @property
    def params_without_prelu(self) -> int:
        return self.total_params - self.prelu_params

    @classmethod
    def from_totals(cls, model: str, params: int, madds: int) -> "CostReport":
        """A report holding only published totals, e.g. for a model not implemented here."""
        return cls(model, [LayerCost("total", params, madds)])


def human(n: int | float) -> str:
    """One-decimal M/G rendering with M = 1e6, G = 1e9."""
    if n >= 1e9:
        return f"{n / 1e9:.1f}G"
    if n >= 1e6:
        return f"{n / 1e6:.1f}M"
    if n >= 1e3:
        return f"{n / 1e3:.1f}K"
    return str(int(n))


def count_primitive(p: Primitive, in_shape: tuple[int, int, int]):
    """Return ``(params, madds, out_shape)`` for one primitive on a (C, H, W) input."""
    c, h, w = in_shape
    if p.kind == "conv":
        ho = T.conv_output_size(h, p.kernel, p.stride, p.kernel // 2)
        wo = T.conv_output_size(w, p.kernel, p.stride, p.kernel // 2)
        params = p.kernel * p.kernel * c * p.out_channels
        return params, ho * wo * params, (p.out_channels, ho, wo)
    if p.kind == "pointwise":
        params = sum(a * b for a, b in p.groups)
        return params, h * w * params, (p.out_channels, h, w)
    if p.kind == "dwconv":
        ho = T.conv_output_size(h, p.kernel, p.stride, p.kernel // 2)
        wo = T.conv_output_size(w, p.kernel, p.stride, p.kernel // 2)
        params = c * p.kernel * p.kernel
        return params, ho * wo * params, (c, ho, wo)
    if p.kind == "gdconv":
        params = c * h * w
        return params, params, (c, 1, 1)
    if p.kind == "fc":
        params = c * h * w * p.out_channels
        return params, params, (p.out_channels, 1, 1)
    if p.kind == "bn":
        return 2 * c, 0, in_shape
    if p.kind == "activation":
        return (c if p.activation == "prelu" else 0), 0, in_shape
    if p.kind in ("sigmoid", "shuffle", "add"):
        return 0, 0, in_shape
    if p.kind == "maxpool":
        return 0, 0, (c, h // 2, w // 2)
    if p.kind == "se":
        red = se_width(c, p.reduction)
        # two FC layers (weights + biases); the pooling, swish and sigmoid are free
        return 2 * c * red + red + c, 2 * c * red, in_shape
    raise ValueError(f"unknown layer kind {p.kind!r}; expected one of {PRIMITIVE_KINDS}")


def _cover_widths(cover):
    return tuple((g.in_width, g.out_width) for g in cover)


def layer_primitives(layer: LayerSpec, in_shape) -> list[Primitive]:
    c = in_shape[0]
    act = Primitive("activation", activation=layer.activation)
    if layer.kind == "stem_conv":
        return [Primitive("conv", c, layer.out_channels, 3, layer.stride), Primitive("bn"), act]
    if layer.kind == "dw_conv":
        return [Primitive("dwconv", c, c, 3, layer.stride), Primitive("bn"), act]
    if layer.kind == "head_conv":
        return [Primitive("conv", c, layer.out_channels, 1), Primitive("bn"), act]
    if layer.kind == "gdconv":
        return [Primitive("gdconv", c, c), Primitive("bn")]
    if layer.kind == "embedding_linear":
        return [Primitive("fc", c, layer.out_channels), Primitive("bn")]
    if layer.kind == "block":
        b = layer.block
        exp_cover, proj_cover = b.covers()
        bact = Primitive("activation", activation=b.activation)
        prims = [Primitive("pointwise", b.in_channels, b.expansion_channels,
                           groups=_cover_widths(exp_cover)), Primitive("bn"), bact]
        if b.variant == "seesaw_shuffle":
            prims.append(Primitive("shuffle", groups=((SHUFFLE_GROUPS, 0),)))
        prims += [Primitive("dwconv", kernel=3, stride=b.stride), Primitive("bn"), bact]
        if b.use_se:
            prims.append(Primitive("se", reduction=b.se_reduction))
        prims += [Primitive("pointwise", b.expansion_channels, b.out_channels,
                            groups=_cover_widths(proj_cover)), Primitive("bn")]
        return prims
    raise ValueError(f"unknown layer kind {layer.kind!r}")


def _skip_primitives(layer: LayerSpec):
    b = layer.block
    return [Primitive("maxpool"), Primitive("conv", b.in_channels, b.out_channels, 1)]


def count_layer(layer: LayerSpec | Primitive, input_shape) -> tuple[int, int]:
    """``(params, madds)`` of one layer (all repeats) or one primitive."""
    if isinstance(layer, Primitive):
        params, madds, _ = count_primitive(layer, tuple(input_shape))
        return params, madds
    params = madds = 0
    shape = tuple(input_shape)
    for _ in range(layer.repeat):
        p, m, _prelu = _count_instance(layer, shape)
        params += p
        madds += m
        shape = layer_output_shape(layer, shape)
    return params, madds


def _count_instance(layer: LayerSpec, in_shape):
    params = madds = prelu = 0
    shape = in_shape
    for prim in layer_primitives(layer, in_shape):
        p, m, shape = count_primitive(prim, shape)
        params += p
        madds += m
        if prim.kind == "activation" and prim.activation == "prelu":
            prelu += p
    if layer.block is not None and layer.block.skip_branch:
        shape = in_shape
        for prim in _skip_primitives(layer):
            p, m, shape = count_primitive(prim, shape)
            params += p
            madds += m
    return params, madds, prelu


def count_model(model: ModelSpec | ModelGraph, input_shape=None) -> CostReport:
    """Per-instance cost records (repeats unrolled) for a spec or built model."""
    spec = model.spec if isinstance(model, ModelGraph) else model
    shape = tuple(input_shape or spec.input_shape)
    report = CostReport(spec.name)
    for name, layer in expand_layers(spec):
        p, m, prelu = _count_instance(layer, shape)
        report.records.append(LayerCost(name, p, m, prelu))
        shape = layer_output_shape(layer, shape)
    return report


@dataclass(frozen=True)
class CostDelta:
    name: str
    params_a: int
    params_b: int
    madds_a: int
    madds_b: int

    @property
    def params_delta(self) -> int:
        return self.params_a - self.params_b

    @property
    def madds_delta(self) -> int:
        return self.madds_a - self.madds_b


@dataclass
class Comparison:
    model_a: str
    model_b: str
    rows: list[CostDelta]
    total: CostDelta

    @property
    def madds_ratio(self) -> float:
        return self.total.madds_a / self.total.madds_b if self.total.madds_b else float("nan")

    @property
    def params_ratio(self) -> float:
        return self.total.params_a / self.total.params_b if self.total.params_b else float("nan")


def compare_reports(a: CostReport, b: CostReport) -> Comparison:
    """Layer-by-layer deltas (matched by name; missing layers count as 0) and total ratios."""
    a_map = {r.name: r for r in a.records}
    b_map = {r.name: r for r in b.records}
    names = list(a_map) + [n for n in b_map if n not in a_map]
    zero = LayerCost("", 0, 0)
    rows = [
        CostDelta(n, a_map.get(n, zero).params, b_map.get(n, zero).params,
                  a_map.get(n, zero).madds, b_map.get(n, zero).madds)
        for n in names
    ]
    total = CostDelta("total", a.total_params, b.total_params, a.total_madds, b.total_madds)
    return Comparison(a.model, b.model, rows, total)
