"""Declarative architecture specs and the builder that turns them into models."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Iterator, Mapping

import numpy as np

from . import tensor as T
from .blocks import BlockConfig, SeesawBlock
from .layers import (
    Activation,
    BatchNorm,
    Conv2d,
    DepthwiseConv2d,
    GlobalDepthwiseConv,
    Layer,
    Linear,
    Sequential,
)

LAYER_KINDS = ("stem_conv", "dw_conv", "block", "head_conv", "gdconv", "embedding_linear")
EMBEDDING_DIM = 512


class SpecError(ValueError):
    """An architecture spec whose layer shapes do not chain."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out_channels: int
    stride: int = 1
    activation: str = "swish"
    block: BlockConfig | None = None
    repeat: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}; expected one of {LAYER_KINDS}")
        if self.repeat < 1:
            raise SpecError("repeat must be >= 1")
        if (self.kind == "block") != (self.block is not None):
            raise SpecError("exactly the 'block' kind carries a BlockConfig")
        if self.block is not None and self.repeat > 1 and not self.block.residual:
            raise SpecError("repeated blocks must be residual (in == out, stride 1)")


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int] = (3, 112, 112)
    embedding_dim: int = EMBEDDING_DIM

    def __iter__(self) -> Iterator[LayerSpec]:
        return iter(self.layers)

    def __len__(self) -> int:
        return len(self.layers)


@dataclass(frozen=True)
class ShapeRow:
    name: str
    layer: LayerSpec
    in_shape: tuple[int, int, int]
    out_shape: tuple[int, int, int]


# Stage rows as (expansion, out_channels, repeat, stride); the first row of
# each stage is the non-residual downsampling block.
_BASE_STAGES = [(128, 64, 1, 2), (128, 64, 4, 1), (256, 128, 1, 2), (256, 128, 6, 1),
           (512, 128, 1, 2), (256, 128, 2, 1)]
_MOBI_STAGES = [(128, 64, 1, 2), (128, 64, 2, 1), (256, 128, 1, 2), (256, 128, 3, 1),
           (512, 128, 1, 2), (256, 128, 6, 1)]
_WIDE_STAGES = [(128, 96, 1, 2), (192, 96, 8, 1), (384, 192, 1, 2), (384, 192, 12, 1),
           (768, 192, 1, 2), (384, 192, 4, 1)]


def _scaled(c: int, width: float) -> int:
    return max(2, int(round(c * width / 2)) * 2)


def _assemble(name, stem, rows, *, variant, activation, use_se, split_ratio=0.25,
              skip_branch=False, width=1.0, input_shape=(3, 112, 112),
              embedding_dim=EMBEDDING_DIM) -> ModelSpec:
    stem = _scaled(stem, width)
    layers = [
        LayerSpec("stem_conv", stem, stride=2, activation=activation),
        LayerSpec("dw_conv", stem, activation=activation),
    ]
    c = stem
    for exp, out, repeat, stride in rows:
        exp, out = _scaled(exp, width), _scaled(out, width)
        cfg = BlockConfig(
            in_channels=c, out_channels=out, expansion_channels=exp, stride=stride,
            variant=variant, split_ratio=split_ratio, use_se=use_se,
            activation=activation, residual=stride == 1 and c == out,
            skip_branch=skip_branch and stride == 2,
        )
        layers.append(LayerSpec("block", out, stride, activation, cfg, repeat))
        c = out
    head = _scaled(512, width)
    layers += [
        LayerSpec("head_conv", head, activation=activation),
        LayerSpec("gdconv", head, activation="linear"),
        LayerSpec("embedding_linear", embedding_dim, activation="linear"),
    ]
    return ModelSpec(name, tuple(layers), tuple(input_shape), embedding_dim)


def spec_seesawfacenet(variant: str = "shuffle", *, split_ratio: float = 0.25,
                       use_se: bool = True, width: float = 1.0,
                       input_shape=(3, 112, 112), embedding_dim: int = EMBEDDING_DIM) -> ModelSpec:
    """SeesawFaceNet layer table; ``width`` < 1 gives the reduced toy models."""
    if variant not in ("shuffle", "share"):
        raise ValueError(f"variant must be 'shuffle' or 'share', got {variant!r}")
    return _assemble(f"seesawfacenet-{variant}", 64, _BASE_STAGES, variant=f"seesaw_{variant}",
                     activation="swish", use_se=use_se, split_ratio=split_ratio, width=width,
                     input_shape=input_shape, embedding_dim=embedding_dim)


def spec_seesawfacenet_mobi(*, split_ratio: float = 0.25, use_se: bool = True,
                            variant: str = "shuffle") -> ModelSpec:
    """Seesaw-shuffleFaceNet(mobi): shallower stages with repeats (1, 2, 1, 3, 1, 6)."""
    return _assemble("seesawfacenet-mobi", 64, _MOBI_STAGES, variant=f"seesaw_{variant}",
                     activation="swish", use_se=use_se, split_ratio=split_ratio)


def spec_dw_seesawfacenet(version: str = "v1", *, split_ratio: float = 0.25,
                          use_se: bool = True, variant: str = "shuffle") -> ModelSpec:
    """Deeper/wider SeesawFaceNet; v2 adds the max-pool skip to every stride-2 block."""
    if version not in ("v1", "v2"):
        raise ValueError(f"version must be 'v1' or 'v2', got {version!r}")
    return _assemble(f"dw-seesawfacenet-{version}", 96, _WIDE_STAGES, variant=f"seesaw_{variant}",
                     activation="swish", use_se=use_se, split_ratio=split_ratio,
                     skip_branch=version == "v2")


def spec_mobilefacenet_baseline(*, use_se: bool = False) -> ModelSpec:
    """MobileFaceNet with 512-D embedding: inverted residual blocks, PReLU, no SE."""
    return _assemble("mobilefacenet", 64, _BASE_STAGES, variant="inverted_residual",
                     activation="prelu", use_se=use_se)


MODELS: dict[str, Callable[..., ModelSpec]] = {
    "seesawfacenet-shuffle": lambda **kw: spec_seesawfacenet("shuffle", **kw),
    "seesawfacenet-share": lambda **kw: spec_seesawfacenet("share", **kw),
    "seesawfacenet-mobi": spec_seesawfacenet_mobi,
    "dw-seesawfacenet-v1": lambda **kw: spec_dw_seesawfacenet("v1", **kw),
    "dw-seesawfacenet-v2": lambda **kw: spec_dw_seesawfacenet("v2", **kw),
    "mobilefacenet": spec_mobilefacenet_baseline,
}


def get_spec(name: str) -> ModelSpec:
    try:
        return MODELS[name]()
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known models: {', '.join(MODELS)}") from None


def with_block_options(spec: ModelSpec, **changes) -> ModelSpec:
    """Apply BlockConfig field overrides (e.g. ``split_ratio``, ``use_se``) to every block."""
    changes = {k: v for k, v in changes.items() if v is not None}
    if not changes:
        return spec
    layers = tuple(
        dataclasses.replace(l, block=dataclasses.replace(l.block, **changes)) if l.block else l
        for l in spec.layers
    )
    return dataclasses.replace(spec, layers=layers)


def scale_spec(spec: ModelSpec, width: float = 1.0, input_size: int | None = None) -> ModelSpec:
    """Scale every channel count by ``width`` (rounded to even) and optionally resize the input.

    The embedding width is kept.  Used for the reduced toy-training models.
    """
    if width <= 0:
        raise ValueError("width must be positive")
    layers = []
    for l in spec.layers:
        if l.kind == "embedding_linear":
            layers.append(l)
        elif l.block is not None:
            b = dataclasses.replace(
                l.block, in_channels=_scaled(l.block.in_channels, width),
                out_channels=_scaled(l.block.out_channels, width),
                expansion_channels=_scaled(l.block.expansion_channels, width))
            layers.append(dataclasses.replace(l, out_channels=b.out_channels, block=b))
        else:
            layers.append(dataclasses.replace(l, out_channels=_scaled(l.out_channels, width)))
    shape = spec.input_shape if input_size is None else (spec.input_shape[0], input_size, input_size)
    return dataclasses.replace(spec, layers=tuple(layers), input_shape=tuple(shape))


def expand_layers(spec: ModelSpec) -> list[tuple[str, LayerSpec]]:
    """Unroll repeats into named single instances (``stem``, ``block03``, ...)."""
    names = {"stem_conv": "stem", "dw_conv": "stem_dw", "head_conv": "head",
             "gdconv": "gdconv", "embedding_linear": "embedding"}
    out, k = [], 0
    for layer in spec.layers:
        if layer.kind != "block":
            out.append((names[layer.kind], layer))
            continue
        for _ in range(layer.repeat):
            out.append((f"block{k:02d}", dataclasses.replace(layer, repeat=1)))
            k += 1
    return out


def layer_output_shape(layer: LayerSpec, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    c, h, w = in_shape
    if layer.kind == "stem_conv":
        return (layer.out_channels, T.conv_output_size(h, 3, layer.stride, 1),
                T.conv_output_size(w, 3, layer.stride, 1))
    if layer.kind == "dw_conv":
        if layer.out_channels != c:
            raise SpecError(f"depthwise conv cannot change channels ({c} -> {layer.out_channels})")
        return (c, T.conv_output_size(h, 3, layer.stride, 1), T.conv_output_size(w, 3, layer.stride, 1))
    if layer.kind == "block":
        b = layer.block
        if b.in_channels != c:
            raise SpecError(f"block expects {b.in_channels} input channels, previous layer gives {c}")
        ho, wo = T.conv_output_size(h, 3, b.stride, 1), T.conv_output_size(w, 3, b.stride, 1)
        if b.skip_branch and (h // 2, w // 2) != (ho, wo):
            raise SpecError(f"skip branch pools {h}x{w} to {h // 2}x{w // 2}, main path gives {ho}x{wo}")
        return (b.out_channels, ho, wo)
    if layer.kind == "head_conv":
        return (layer.out_channels, h, w)
    if layer.kind == "gdconv":
        if layer.out_channels != c:
            raise SpecError(f"GDConv is depthwise: {c} channels in, {layer.out_channels} out")
        return (c, 1, 1)
    if layer.kind == "embedding_linear":
        if (h, w) != (1, 1):
            raise SpecError(f"embedding layer needs 1x1 spatial input, got {h}x{w}")
        return (layer.out_channels, 1, 1)
    raise SpecError(f"unknown layer kind {layer.kind!r}")


def table_rows(spec: ModelSpec) -> list[ShapeRow]:
    """One row per spec entry (repeats collapsed), as in the architecture tables."""
    rows, shape = [], tuple(spec.input_shape)
    for i, layer in enumerate(spec.layers):
        try:
            out = shape
            for _ in range(layer.repeat):
                out = layer_output_shape(layer, out)
        except SpecError as e:
            prev = spec.layers[i - 1].kind if i else "input"
            raise SpecError(f"layer {i} ({prev} -> {layer.kind}): {e}") from None
        rows.append(ShapeRow(f"row{i:02d}", layer, shape, out))
        shape = out
    if shape != (spec.embedding_dim, 1, 1):
        raise SpecError(f"final output {shape} is not a {spec.embedding_dim}-d embedding")
    return rows


def propagate_shapes(spec: ModelSpec) -> list[ShapeRow]:
    """Shapes of every unrolled layer instance; raises :class:`SpecError` on the first break."""
    table_rows(spec)
    rows, shape = [], tuple(spec.input_shape)
    for name, layer in expand_layers(spec):
        out = layer_output_shape(layer, shape)
        rows.append(ShapeRow(name, layer, shape, out))
        shape = out
    return rows


# -- text format ---------------------------------------------------------------

def format_spec(spec: ModelSpec) -> str:
    """Render a spec as text: header lines, then one layer per line.

    Columns: ``kind out expansion stride variant repeat key=value...``;
    ``-`` marks a column that does not apply to the layer kind.
    """
    lines = [f"model {spec.name}", "input " + " ".join(map(str, spec.input_shape)),
             f"embedding {spec.embedding_dim}"]
    for l in spec.layers:
        if l.block is None:
            lines.append(f"{l.kind} {l.out_channels} - {l.stride} - {l.repeat} act={l.activation}")
            continue
        b = l.block
        lines.append(
            f"block {b.out_channels} {b.expansion_channels} {b.stride} {b.variant} {l.repeat} "
            f"act={b.activation} se={int(b.use_se)} se_r={b.se_reduction} "
            f"split={b.split_ratio!r} residual={int(b.residual)} skip={int(b.skip_branch)}"
        )
    return "\n".join(lines) + "\n"


def parse_spec(text: str) -> ModelSpec:
    name, input_shape, emb = "custom", (3, 112, 112), EMBEDDING_DIM
    layers: list[LayerSpec] = []
    channels = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "model":
                name = parts[1]
                continue
            if parts[0] == "input":
                input_shape = tuple(int(p) for p in parts[1:4])
                continue
            if parts[0] == "embedding":
                emb = int(parts[1])
                continue
            kind, out, exp, stride, variant, repeat = parts[:6]
            opts = dict(p.split("=", 1) for p in parts[6:])
            if channels is None:
                channels = input_shape[0]
            act = opts.get("act", "swish")
            if kind == "block":
                cfg = BlockConfig(
                    in_channels=channels, out_channels=int(out), expansion_channels=int(exp),
                    stride=int(stride), variant=variant, activation=act,
                    use_se=bool(int(opts.get("se", 1))), se_reduction=int(opts.get("se_r", 4)),
                    split_ratio=float(opts.get("split", 0.25)),
                    residual=bool(int(opts.get("residual", 0))),
                    skip_branch=bool(int(opts.get("skip", 0))),
                )
                layers.append(LayerSpec("block", int(out), int(stride), act, cfg, int(repeat)))
            else:
                layers.append(LayerSpec(kind, int(out), int(stride), act, None, int(repeat)))
            channels = int(out)
        except (ValueError, IndexError, TypeError) as e:
            raise SpecError(f"line {lineno}: {e}: {raw!r}") from None
    if not layers:
        raise SpecError("spec text contains no layers")
    return ModelSpec(name, tuple(layers), input_shape, emb)


# -- executable models ---------------------------------------------------------

def _make_layer(layer: LayerSpec, in_shape, dtype) -> Layer:
    c = in_shape[0]
    act = lambda ch: Activation(layer.activation, ch, dtype=dtype)  # noqa: E731
    if layer.kind == "stem_conv":
        return Sequential([("conv", Conv2d(c, layer.out_channels, 3, layer.stride, dtype=dtype)),
                           ("bn", BatchNorm(layer.out_channels, dtype=dtype)),
                           ("act", act(layer.out_channels))])
    if layer.kind == "dw_conv":
        return Sequential([("conv", DepthwiseConv2d(c, 3, layer.stride, dtype=dtype)),
                           ("bn", BatchNorm(c, dtype=dtype)), ("act", act(c))])
    if layer.kind == "block":
        return SeesawBlock(layer.block, dtype=dtype)
    if layer.kind == "head_conv":
        return Sequential([("conv", Conv2d(c, layer.out_channels, 1, dtype=dtype)),
                           ("bn", BatchNorm(layer.out_channels, dtype=dtype)),
                           ("act", act(layer.out_channels))])
    if layer.kind == "gdconv":
        return Sequential([("conv", GlobalDepthwiseConv(c, in_shape[1], dtype=dtype)),
                           ("bn", BatchNorm(c, dtype=dtype))])
    if layer.kind == "embedding_linear":
        return Sequential([("fc", Linear(c, layer.out_channels, dtype=dtype)),
                           ("bn", BatchNorm(layer.out_channels, dtype=dtype))])
    raise SpecError(f"unknown layer kind {layer.kind!r}")


def _init_param(name: str, arr: np.ndarray, rng: np.random.Generator) -> None:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        arr[...] = 1
    elif leaf in ("beta", "bias"):
        arr[...] = 0
    elif leaf == "slope":
        arr[...] = 0.25
    else:
        fan_in = int(np.prod(arr.shape[1:]))
        arr[...] = rng.standard_normal(arr.shape) * np.sqrt(2.0 / fan_in)


class ModelGraph(Layer):
    """A built model: named layers in order plus the ModelSpec they came from."""

    def __init__(self, spec: ModelSpec, dtype=np.float32):
        super().__init__()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.layers: list[tuple[str, Layer]] = []

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return tuple(self.spec.input_shape)

    @property
    def embedding_dim(self) -> int:
        return self.spec.embedding_dim

    def children(self):
        return iter(self.layers)

    def forward(self, x, train=False):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise T.ShapeError(
                f"input: expected (N, {', '.join(map(str, self.input_shape))}), got {x.shape}"
            )
        x = x.astype(self.dtype, copy=False)
        for _, layer in self.layers:
            x = layer.forward(x, train)
        self._ctx = True
        return x

    def backward(self, grad):
        self._take_ctx()
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and BN running statistics, in a stable order."""
        out: dict[str, np.ndarray] = {}

        def walk(layer: Layer, prefix: str):
            for k, v in layer.params.items():
                out[prefix + k] = v
            for k, v in layer.buffers.items():
                out[prefix + k] = v
            for name, child in layer.children():
                walk(child, f"{prefix}{name}.")

        walk(self, "")
        return out

    def load_state_dict(self, records: Mapping[str, np.ndarray], ignore_prefixes=("arcface.",)):
        own = self.state_dict()
        for name, arr in own.items():
            if name not in records:
                raise KeyError(f"{name}: missing from weight file")
            src = records[name]
            if src.shape != arr.shape:
                raise T.ShapeError(f"{name}: model expects {arr.shape}, file has {src.shape}")
        extra = [k for k in records if k not in own and not k.startswith(ignore_prefixes)]
        if extra:
            raise KeyError(f"{extra[0]}: not a layer of model {self.name!r}")
        for name, arr in own.items():
            arr[...] = records[name]

    def num_buffer_elements(self) -> int:
        return sum(b.size for _, b in self.named_buffers())


def build_model(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Instantiate ``spec`` with He-normal conv/FC weights drawn from ``seed``."""
    rows = propagate_shapes(spec)
    model = ModelGraph(spec, dtype)
    for row in rows:
        model.layers.append((row.name, _make_layer(row.layer, row.in_shape, dtype)))
    rng = np.random.default_rng(seed)
    for name, arr in model.named_parameters():
        _init_param(name, arr, rng)
    return model


def forward_embed(model: ModelGraph, batch: np.ndarray, mode: str = "infer") -> np.ndarray:
    """(N, 3, H, W) -> (N, embedding_dim) raw embeddings."""
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    return model.forward(batch, train=mode == "train")
