"""The composed network: backbone -> PrimaryCaps -> votes -> routing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import (
    BackboneModel, BackboneSpec, PrimaryCapsParams, backbone_forward, init_backbone,
    init_primary_caps, primary_caps_forward,
)
from .capsnet import CapsLayerParams, compute_votes, init_caps_layer, route
from .core import Tensor
from .errors import ConfigError


@dataclass
class CapsuleNetwork:
    backbone: BackboneModel
    primary: PrimaryCapsParams
    caps: CapsLayerParams

    @property
    def dtype(self):
        return self.caps.W.dtype

    def parameters(self) -> dict[str, Tensor]:
        params = dict(self.backbone.parameters())
        params.update(self.primary.parameters())
        params["caps.W"] = self.caps.W
        return params

    def buffers(self) -> dict[str, np.ndarray]:
        return self.backbone.buffers()

    def check_consistent(self) -> None:
        spec = self.backbone.spec
        if self.primary.S != spec.bottleneck:
            raise ConfigError(f"PrimaryCaps expects {self.primary.S} channels, backbone gives {spec.bottleneck}")
        if self.primary.kernel != spec.spatial:
            raise ConfigError(f"PrimaryCaps kernel {self.primary.kernel} != bottleneck extent {spec.spatial}")
        if (self.caps.I, self.caps.D1) != (self.primary.I, self.primary.D1):
            raise ConfigError(
                f"capsule layer expects I={self.caps.I}, D1={self.caps.D1}; "
                f"PrimaryCaps gives I={self.primary.I}, D1={self.primary.D1}")


def build_network(spec: BackboneSpec, num_classes: int, D1: int = 8, D2: int = 16, r: int = 3,
                  seed: int = 0, dtype=np.float32) -> CapsuleNetwork:
    rng = np.random.default_rng(seed)
    backbone = init_backbone(spec, rng, dtype)
    primary = init_primary_caps(spec.bottleneck, spec.spatial, D1, rng, dtype)
    caps = init_caps_layer(primary.I, num_classes, D1, D2, r, rng, dtype)
    net = CapsuleNetwork(backbone, primary, caps)
    net.check_consistent()
    return net


def forward_pipeline(net: CapsuleNetwork, x, training: bool = False) -> tuple[Tensor, Tensor]:
    """Returns output poses ``v`` [N, J, D2] and the final couplings ``c`` [N, I, J]."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=net.dtype))
    x_b = backbone_forward(net.backbone, x, training)
    u = primary_caps_forward(net.primary, x_b)
    votes = compute_votes(u, net.caps)
    state = route(votes, net.caps.r)
    return state.v, state.c
