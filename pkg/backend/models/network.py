"""
Network architecture models.
An ArchSpec is a flat list of layer descriptors; the canonical parameter layout
(ParamSlot list) is derived from it and never stored.
"""

from typing import List, Literal, Optional, Tuple
from pydantic import BaseModel

from models.errors import RejectedInputError


LayerKind = Literal[
    "conv", "batchnorm", "relu", "leaky_relu", "maxpool",
    "upsample", "fc", "sigmoid", "reshape", "flatten",
]


class LayerSpec(BaseModel):
    """One layer descriptor"""
    kind: LayerKind
    out_channels: Optional[int] = None
    kernel: int = 3
    stride: int = 1
    pad: int = 1
    channels: Optional[int] = None  # batchnorm
    in_features: Optional[int] = None  # fc
    out_features: Optional[int] = None  # fc
    factor: int = 2  # maxpool / upsample
    shape: Optional[Tuple[int, int, int]] = None  # reshape target (C, H, W)
    negative_slope: float = 0.2


class ParamSlot(BaseModel):
    """Position of one parameter tensor inside the canonical flat vector"""
    layer: int
    role: Literal["weight", "bias", "gain", "shift", "running_mean", "running_var"]
    shape: Tuple[int, ...]
    offset: int
    size: int

    @property
    def trainable(self) -> bool:
        return self.role not in ("running_mean", "running_var")


class ArchSpec(BaseModel):
    """Architecture of a classifier, generator or probe"""
    kind: Literal["conv4-like", "generator", "probe"]
    blocks: List[LayerSpec]
    input_shape: Tuple[int, ...]  # (H, W, C) for images, (latent_dim,) for generators
    num_outputs: int

    def __init__(self, **data):
        super().__init__(**data)
        self.check()

    def check(self) -> "ArchSpec":
        """Shapes must chain from input_shape to num_outputs; raises RejectedInputError."""
        out = self.output_shape()
        expected_rank = 3 if self.kind == "generator" else 1
        if len(out) != expected_rank or out[0] != self.num_outputs:
            raise RejectedInputError(
                f"{self.kind} arch produces shape {out} but declares num_outputs={self.num_outputs}"
            )
        return self

    def _initial_shape(self) -> Tuple[int, ...]:
        if len(self.input_shape) == 3:
            h, w, c = self.input_shape
            return (c, h, w)
        return tuple(self.input_shape)

    def shapes(self) -> List[Tuple[int, ...]]:
        """Input shape (channels first, no batch) of every layer, plus the final output shape."""
        shape = self._initial_shape()
        trace = [shape]
        for i, layer in enumerate(self.blocks):
            shape = _next_shape(i, layer, shape)
            trace.append(shape)
        return trace

    def output_shape(self) -> Tuple[int, ...]:
        return self.shapes()[-1]

    def layout(self) -> List[ParamSlot]:
        """Canonical order: layers in spec order; weight, bias; BN gain, shift, running_mean, running_var."""
        slots: List[ParamSlot] = []
        offset = 0
        for i, (layer, shape) in enumerate(zip(self.blocks, self.shapes())):
            for role, pshape in _param_shapes(layer, shape):
                size = 1
                for d in pshape:
                    size *= d
                slots.append(ParamSlot(layer=i, role=role, shape=pshape, offset=offset, size=size))
                offset += size
        return slots

    def num_params(self) -> int:
        slots = self.layout()
        return slots[-1].offset + slots[-1].size if slots else 0

    def bn_layers(self) -> List[int]:
        return [i for i, layer in enumerate(self.blocks) if layer.kind == "batchnorm"]


def _param_shapes(layer: LayerSpec, shape: Tuple[int, ...]):
    if layer.kind == "conv":
        c_in = shape[0]
        return [
            ("weight", (layer.out_channels, c_in, layer.kernel, layer.kernel)),
            ("bias", (layer.out_channels,)),
        ]
    if layer.kind == "batchnorm":
        c = layer.channels
        return [("gain", (c,)), ("shift", (c,)), ("running_mean", (c,)), ("running_var", (c,))]
    if layer.kind == "fc":
        return [("weight", (layer.out_features, layer.in_features)), ("bias", (layer.out_features,))]
    return []


def _next_shape(index: int, layer: LayerSpec, shape: Tuple[int, ...]) -> Tuple[int, ...]:
    kind = layer.kind
    if kind == "conv":
        if len(shape) != 3 or not layer.out_channels:
            raise RejectedInputError(f"layer {index}: conv needs a (C, H, W) input and out_channels")
        _, h, w = shape
        h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
        w = (w + 2 * layer.pad - layer.kernel) // layer.stride + 1
        return (layer.out_channels, h, w)
    if kind == "batchnorm":
        if layer.channels is None or layer.channels != shape[0]:
            raise RejectedInputError(
                f"layer {index}: batchnorm records {layer.channels} channels, input has {shape[0]}"
            )
        return shape
    if kind == "maxpool":
        c, h, w = shape
        return (c, h // layer.factor, w // layer.factor)
    if kind == "upsample":
        c, h, w = shape
        return (c, h * layer.factor, w * layer.factor)
    if kind == "flatten":
        size = 1
        for d in shape:
            size *= d
        return (size,)
    if kind == "fc":
        size = 1
        for d in shape:
            size *= d
        if layer.in_features != size:
            raise RejectedInputError(f"layer {index}: fc expects {layer.in_features} inputs, gets {size}")
        return (layer.out_features,)
    if kind == "reshape":
        size = 1
        for d in shape:
            size *= d
        target = layer.shape
        if target is None or target[0] * target[1] * target[2] != size:
            raise RejectedInputError(f"layer {index}: cannot reshape {shape} to {target}")
        return tuple(target)
    return shape


def conv_classifier_arch(
    image_size: int,
    channels: int,
    num_outputs: int,
    filters: int = 16,
    blocks: int = 2,
) -> ArchSpec:
    """Desk stand-in for Conv4: `blocks` x (conv 3x3, BN, ReLU, maxpool 2) + linear head."""
    layers: List[LayerSpec] = []
    side = image_size
    for _ in range(blocks):
        layers += [
            LayerSpec(kind="conv", out_channels=filters, kernel=3, stride=1, pad=1),
            LayerSpec(kind="batchnorm", channels=filters),
            LayerSpec(kind="relu"),
            LayerSpec(kind="maxpool", factor=2),
        ]
        side //= 2
    feat = filters * side * side
    layers += [
        LayerSpec(kind="flatten"),
        LayerSpec(kind="fc", in_features=feat, out_features=num_outputs),
    ]
    return ArchSpec(
        kind="conv4-like",
        blocks=layers,
        input_shape=(image_size, image_size, channels),
        num_outputs=num_outputs,
    )


def backbone_arch(classifier: ArchSpec) -> ArchSpec:
    """Strip the linear head: everything up to and including the flatten layer."""
    cut = max(i for i, layer in enumerate(classifier.blocks) if layer.kind == "flatten") + 1
    blocks = classifier.blocks[:cut]
    trial = ArchSpec.model_construct(
        kind="probe", blocks=blocks, input_shape=classifier.input_shape, num_outputs=0
    )
    feat = trial.output_shape()[0]
    return ArchSpec(kind="probe", blocks=blocks, input_shape=classifier.input_shape, num_outputs=feat)


def generator_arch(latent_dim: int, image_size: int, channels: int, nf: int = 16) -> ArchSpec:
    """Generator layout: FC, reshape, BN, 2 x (upsample, conv, BN, LeakyReLU), conv, sigmoid."""
    if image_size % 4:
        raise RejectedInputError(f"generator image_size must be divisible by 4, got {image_size}")
    init = image_size // 4
    layers = [
        LayerSpec(kind="fc", in_features=latent_dim, out_features=2 * nf * init * init),
        LayerSpec(kind="reshape", shape=(2 * nf, init, init)),
        LayerSpec(kind="batchnorm", channels=2 * nf),
        LayerSpec(kind="upsample", factor=2),
        LayerSpec(kind="conv", out_channels=2 * nf, kernel=3, stride=1, pad=1),
        LayerSpec(kind="batchnorm", channels=2 * nf),
        LayerSpec(kind="leaky_relu", negative_slope=0.2),
        LayerSpec(kind="upsample", factor=2),
        LayerSpec(kind="conv", out_channels=nf, kernel=3, stride=1, pad=1),
        LayerSpec(kind="batchnorm", channels=nf),
        LayerSpec(kind="leaky_relu", negative_slope=0.2),
        LayerSpec(kind="conv", out_channels=channels, kernel=3, stride=1, pad=1),
        LayerSpec(kind="sigmoid"),
    ]
    return ArchSpec(kind="generator", blocks=layers, input_shape=(latent_dim,), num_outputs=channels)
