"""Convolutional feature extractor and the full-extent PrimaryCaps layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import core as C
from .capsnet import squash
from .core import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class StageSpec:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    use_batchnorm: bool = True
    activation: str = "relu"

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid stage {self}")
        if self.activation not in ("relu", "none"):
            raise ConfigError(f"unsupported activation {self.activation!r}")

    def to_dict(self) -> dict:
        return {"out_channels": self.out_channels, "kernel": self.kernel, "stride": self.stride,
                "padding": self.padding, "use_batchnorm": self.use_batchnorm,
                "activation": self.activation}


@dataclass(frozen=True)
class BackboneSpec:
    stages: tuple[StageSpec, ...]
    input_shape: tuple[int, int, int]  # (C, H, W)

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        if not self.stages:
            raise ConfigError("backbone needs at least one stage")
        self.stage_shapes()  # validates extents

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """Output (C, H, W) after every stage."""
        c, h, w = self.input_shape
        shapes = []
        for st in self.stages:
            h = C.conv_output_extent(h, st.kernel, st.stride, st.padding)
            w = C.conv_output_extent(w, st.kernel, st.stride, st.padding)
            c = st.out_channels
            shapes.append((c, h, w))
        return shapes

    @property
    def bottleneck(self) -> int:
        return self.stages[-1].out_channels

    @property
    def spatial(self) -> tuple[int, int]:
        _, h, w = self.stage_shapes()[-1]
        return h, w

    def with_channels(self, channels: list[int]) -> "BackboneSpec":
        stages = tuple(StageSpec(c, s.kernel, s.stride, s.padding, s.use_batchnorm, s.activation)
                       for c, s in zip(channels, self.stages))
        return BackboneSpec(stages, self.input_shape)

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "stages": [s.to_dict() for s in self.stages]}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(tuple(StageSpec(**s) for s in d["stages"]), tuple(d["input_shape"]))


def desk_backbone_spec(input_shape=(1, 28, 28), bottleneck: int = 64) -> BackboneSpec:
    """Four stride-2 conv-BN-ReLU stages, 32 -> 64 -> 128 -> S channels.

    Kernels alternate between 4 and 3 so every extent divides exactly:
    28 -> 14 -> 7 -> 4 -> 2 for MNIST-sized input.
    """
    geometry = ((32, 4), (64, 4), (128, 3), (bottleneck, 4))
    return BackboneSpec(tuple(StageSpec(c, k, 2, 1) for c, k in geometry), input_shape)


@dataclass
class ConvStage:
    weight: Tensor
    bias: Tensor
    gamma: Tensor | None = None
    beta: Tensor | None = None
    running_mean: np.ndarray | None = None
    running_var: np.ndarray | None = None

    def tensors(self) -> dict[str, Tensor]:
        out = {"weight": self.weight, "bias": self.bias}
        if self.gamma is not None:
            out["gamma"] = self.gamma
            out["beta"] = self.beta
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        if self.running_mean is None:
            return {}
        return {"running_mean": self.running_mean, "running_var": self.running_var}


@dataclass
class BackboneModel:
    spec: BackboneSpec
    stages: list[ConvStage]
    frozen: bool = False

    def parameters(self) -> dict[str, Tensor]:
        return {f"backbone.{k}.{name}": t
                for k, st in enumerate(self.stages) for name, t in st.tensors().items()}

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"backbone.{k}.{name}": b
                for k, st in enumerate(self.stages) for name, b in st.buffers().items()}


def kaiming_uniform(shape, rng: np.random.Generator, dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_backbone(spec: BackboneSpec, rng: np.random.Generator, dtype=np.float32) -> BackboneModel:
    stages = []
    c_in = spec.input_shape[0]
    for k, st in enumerate(spec.stages):
        w = Tensor(kaiming_uniform((st.out_channels, c_in, st.kernel, st.kernel), rng, dtype),
                   requires_grad=True, name=f"backbone.{k}.weight")
        b = Tensor(np.zeros(st.out_channels, dtype), requires_grad=True, name=f"backbone.{k}.bias")
        stage = ConvStage(w, b)
        if st.use_batchnorm:
            stage.gamma = Tensor(np.ones(st.out_channels, dtype), requires_grad=True, name=f"backbone.{k}.gamma")
            stage.beta = Tensor(np.zeros(st.out_channels, dtype), requires_grad=True, name=f"backbone.{k}.beta")
            stage.running_mean = np.zeros(st.out_channels, dtype)
            stage.running_var = np.ones(st.out_channels, dtype)
        stages.append(stage)
        c_in = st.out_channels
    return BackboneModel(spec, stages)


def set_frozen(model: BackboneModel, frozen: bool) -> None:
    """Frozen backbones take no gradient, no optimizer updates and no running-stat updates."""
    model.frozen = bool(frozen)
    for t in model.parameters().values():
        t.requires_grad = not model.frozen
        t.grad = None


def backbone_forward(model: BackboneModel, x: Tensor, training: bool = False) -> Tensor:
    """conv -> (batchnorm) -> relu for every stage. ``x`` is NCHW."""
    if x.ndim != 4 or tuple(x.shape[1:]) != model.spec.input_shape:
        raise ShapeError(f"input {x.shape} does not match backbone input shape {model.spec.input_shape}")
    # Frozen backbones always normalise with (frozen) running statistics.
    bn_training = training and not model.frozen
    h = x
    for st, stage in zip(model.spec.stages, model.stages):
        h = C.conv2d(h, stage.weight, stage.bias, st.stride, st.padding)
        if stage.gamma is not None:
            h = C.batch_norm(h, stage.gamma, stage.beta, stage.running_mean, stage.running_var, bn_training)
        if st.activation == "relu":
            h = C.relu(h)
    return h


def num_primary_capsules(S: int, D1: int) -> int:
    """Number of primary capsules carried by a bottleneck of ``S`` channels: floor(S / D1)."""
    if D1 < 1:
        raise ConfigError(f"capsule dimension must be >= 1, got {D1}")
    if S < D1:
        raise ConfigError(f"bottleneck width {S} < capsule dimension {D1}: no primary capsule fits")
    return S // D1


@dataclass
class PrimaryCapsParams:
    filters: Tensor  # [I * D1, S, Kh, Kw]
    biases: Tensor  # [I * D1]
    D1: int
    I: int = field(init=False)  # noqa: E741

    def __post_init__(self):
        out_ch = self.filters.shape[0]
        if out_ch % self.D1:
            raise ShapeError(f"{out_ch} filters are not a whole number of {self.D1}-dim capsules")
        self.I = out_ch // self.D1
        if self.I != num_primary_capsules(self.S, self.D1):
            raise ConfigError(f"{self.I} capsules but floor(S / D1) = {self.S // self.D1} for S={self.S}")
        if self.biases.shape != (out_ch,):
            raise ShapeError(f"biases {self.biases.shape} do not match {out_ch} filters")

    @property
    def S(self) -> int:
        return self.filters.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.filters.shape[2], self.filters.shape[3]

    def parameters(self) -> dict[str, Tensor]:
        return {"primary.filters": self.filters, "primary.biases": self.biases}


def init_primary_caps(S: int, spatial: tuple[int, int], D1: int, rng: np.random.Generator,
                      dtype=np.float32) -> PrimaryCapsParams:
    """Full-extent kernel over all S channels; capsule count from floor(S / D1)."""
    I = num_primary_capsules(S, D1)  # noqa: E741
    kh, kw = spatial
    filters = Tensor(kaiming_uniform((I * D1, S, kh, kw), rng, dtype), requires_grad=True, name="primary.filters")
    biases = Tensor(np.zeros(I * D1, dtype), requires_grad=True, name="primary.biases")
    return PrimaryCapsParams(filters, biases, D1)


def primary_caps_forward(p: PrimaryCapsParams, x_b: Tensor) -> Tensor:
    """[N, S, K, K] -> squashed poses [N, I, D1]."""
    if x_b.ndim != 4 or x_b.shape[1] != p.S:
        raise ShapeError(f"bottleneck {x_b.shape} does not match PrimaryCaps input width {p.S}")
    if tuple(x_b.shape[2:]) != p.kernel:
        raise ConfigError(f"PrimaryCaps kernel {p.kernel} must span the bottleneck extent {tuple(x_b.shape[2:])}")
    h = C.conv2d(x_b, p.filters, p.biases)
    return squash(C.reshape(h, (x_b.shape[0], p.I, p.D1)))
