"""Structured channel pruning, physical simplification and analytic cost accounting.

Channels are ranked by the L1 norm of the filter that produces them. A plan
keeps the highest-scoring channels per stage; :func:`simplify` then rebuilds
every tensor at its reduced size. Because the bottleneck width S shrinks,
the primary-capsule count floor(S / D1) shrinks with it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backbone import BackboneModel, BackboneSpec, ConvStage, PrimaryCapsParams, num_primary_capsules
from .capsnet import CapsLayerParams
from .core import Tensor
from .errors import ConfigError, StructuralError
from .network import CapsuleNetwork


@dataclass(frozen=True)
class ChannelScore:
    stage: int
    channel: int
    score: float


@dataclass(frozen=True)
class PrunePlan:
    kept: tuple[tuple[int, ...], ...]  # sorted kept channel indices, one tuple per stage
    drop_ratio: float = 0.0

    @property
    def kept_counts(self) -> list[int]:
        return [len(k) for k in self.kept]

    def to_dict(self) -> dict:
        return {"drop_ratio": self.drop_ratio, "kept": [list(k) for k in self.kept]}


def score_channels(model: BackboneModel) -> list[ChannelScore]:
    """L1 magnitude of each output channel's filter, for every stage."""
    scores = []
    for k, stage in enumerate(model.stages):
        w = stage.weight.data.astype(np.float64)
        per_channel = np.abs(w).reshape(w.shape[0], -1).sum(axis=1)
        scores.extend(ChannelScore(k, c, float(s)) for c, s in enumerate(per_channel))
    return scores


def build_prune_plan(scores: list[ChannelScore], ratio: float, D1: int) -> PrunePlan:
    """Drop the floor(ratio * C) lowest-scoring channels of every stage.

    Ties drop the lower channel index first. Each stage keeps at least one
    channel and the last stage keeps at least D1 so a capsule survives.
    """
    if not 0 <= ratio < 1:
        raise ConfigError(f"prune ratio must be in [0, 1), got {ratio}")
    by_stage: dict[int, list[ChannelScore]] = {}
    for s in scores:
        by_stage.setdefault(s.stage, []).append(s)
    if sorted(by_stage) != list(range(len(by_stage))):
        raise StructuralError("scores must cover stages 0..n-1")
    last = len(by_stage) - 1
    kept = []
    for k in range(len(by_stage)):
        stage_scores = sorted(by_stage[k], key=lambda s: (s.score, s.channel))
        total = len(stage_scores)
        floor_keep = D1 if k == last else 1
        if total < floor_keep:
            raise ConfigError(f"stage {k} has {total} channels, fewer than the {floor_keep} it must keep")
        n_drop = min(int(np.floor(ratio * total)), total - floor_keep)
        kept.append(tuple(sorted(s.channel for s in stage_scores[n_drop:])))
    return PrunePlan(tuple(kept), ratio)


def _check_plan(model: BackboneModel, plan: PrunePlan) -> None:
    if len(plan.kept) != len(model.stages):
        raise StructuralError(f"plan has {len(plan.kept)} stages, model has {len(model.stages)}")
    for k, (idx, st) in enumerate(zip(plan.kept, model.spec.stages)):
        if not idx:
            raise StructuralError(f"plan keeps no channel in stage {k}")
        if list(idx) != sorted(set(idx)):
            raise StructuralError(f"stage {k} kept indices must be sorted and unique")
        if idx[0] < 0 or idx[-1] >= st.out_channels:
            raise StructuralError(f"stage {k} kept indices outside [0, {st.out_channels})")


def _take(t: Tensor, arr: np.ndarray, requires_grad: bool) -> Tensor:
    return Tensor(np.ascontiguousarray(arr), requires_grad=requires_grad, name=t.name)


def simplify(model: BackboneModel, caps: PrimaryCapsParams, plan: PrunePlan) -> tuple[BackboneModel, PrimaryCapsParams]:
    """Physically remove dropped channels; returns new, smaller parameter sets.

    Each stage loses its dropped output filters (and BN rows) and the matching
    input slices of its successor. PrimaryCaps loses those bottleneck inputs and
    is truncated to the first floor(S' / D1) capsules.
    """
    _check_plan(model, plan)
    grad = not model.frozen
    new_stages = []
    prev = np.arange(model.spec.input_shape[0])
    for stage, keep in zip(model.stages, plan.kept):
        keep = np.asarray(keep)
        w = stage.weight.data[keep][:, prev]
        ns = ConvStage(_take(stage.weight, w, grad), _take(stage.bias, stage.bias.data[keep], grad))
        if stage.gamma is not None:
            ns.gamma = _take(stage.gamma, stage.gamma.data[keep], grad)
            ns.beta = _take(stage.beta, stage.beta.data[keep], grad)
            ns.running_mean = stage.running_mean[keep].copy()
            ns.running_var = stage.running_var[keep].copy()
        new_stages.append(ns)
        prev = keep
    spec = model.spec.with_channels(plan.kept_counts)
    pruned = BackboneModel(spec, new_stages, frozen=model.frozen)

    s_new = len(prev)
    i_new = num_primary_capsules(s_new, caps.D1)
    n_out = i_new * caps.D1
    filters = caps.filters.data[:n_out][:, prev]
    primary = PrimaryCapsParams(_take(caps.filters, filters, caps.filters.requires_grad),
                                _take(caps.biases, caps.biases.data[:n_out], caps.biases.requires_grad),
                                caps.D1)
    return pruned, primary


def simplify_network(net: CapsuleNetwork, plan: PrunePlan) -> CapsuleNetwork:
    """:func:`simplify` plus truncation of the capsule transformation matrices to I'."""
    backbone, primary = simplify(net.backbone, net.primary, plan)
    W = net.caps.W
    caps = CapsLayerParams(Tensor(np.ascontiguousarray(W.data[:primary.I]), requires_grad=W.requires_grad,
                                  name=W.name), net.caps.r)
    out = CapsuleNetwork(backbone, primary, caps)
    out.check_consistent()
    return out


def mask_network(net: CapsuleNetwork, plan: PrunePlan) -> None:
    """Zero, in place, everything :func:`simplify_network` would delete.

    Dropped channels get zero filters, bias and BN shift; their consumers in
    the next stage get zero input slices. Capsules beyond floor(S' / D1) get
    zero filters and bias, which makes their poses and votes exactly zero.
    """
    _check_plan(net.backbone, plan)
    stages = net.backbone.stages
    for k, (stage, keep) in enumerate(zip(stages, plan.kept)):
        drop = np.setdiff1d(np.arange(stage.weight.shape[0]), keep)
        stage.weight.data[drop] = 0
        stage.bias.data[drop] = 0
        if stage.gamma is not None:
            stage.beta.data[drop] = 0
            stage.running_mean[drop] = 0
        consumer = stages[k + 1].weight if k + 1 < len(stages) else net.primary.filters
        consumer.data[:, drop] = 0
    n_keep = num_primary_capsules(len(plan.kept[-1]), net.primary.D1) * net.primary.D1
    net.primary.filters.data[n_keep:] = 0
    net.primary.biases.data[n_keep:] = 0


# -- cost accounting -------------------------------------------------------------

@dataclass(frozen=True)
class LayerCost:
    name: str
    flops: int
    params: int
    activations: int  # output values at batch size 1


@dataclass
class CostReport:
    layers: list[LayerCost]
    bottleneck: int
    primary_caps: int
    bytes_per_value: int = 4
    total_flops: int = field(init=False)
    params: int = field(init=False)
    activation_bytes: int = field(init=False)

    def __post_init__(self):
        self.total_flops = sum(l.flops for l in self.layers)
        self.params = sum(l.params for l in self.layers)
        self.activation_bytes = sum(l.activations for l in self.layers) * self.bytes_per_value

    def flops_of(self, prefix: str) -> int:
        return sum(l.flops for l in self.layers if l.name.startswith(prefix))

    def to_dict(self) -> dict:
        return {
            "bottleneck": self.bottleneck,
            "primary_caps": self.primary_caps,
            "total_flops": self.total_flops,
            "params": self.params,
            "activation_bytes": self.activation_bytes,
            "bytes_per_value": self.bytes_per_value,
            "layers": [vars(l).copy() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        return cls([LayerCost(**l) for l in d["layers"]], d["bottleneck"], d["primary_caps"],
                   d.get("bytes_per_value", 4))


def conv_flops(kh: int, kw: int, c_in: int, c_out: int, oh: int, ow: int) -> int:
    return 2 * kh * kw * c_in * c_out * oh * ow


def count_cost(spec: BackboneSpec, D1: int, num_classes: int, D2: int, r: int,
               bytes_per_value: int = 4) -> CostReport:
    """FLOPs (1 MAC = 2 FLOPs), parameters and batch-1 activation sizes.

    Only multiply-accumulates are counted: convolutions, votes, the routing
    weighted sums (every iteration) and agreement dot products (all but the
    last iteration). Bias, batchnorm, ReLU, softmax and squash are excluded.
    """
    layers = [LayerCost("input", 0, 0, int(np.prod(spec.input_shape)))]
    c_in = spec.input_shape[0]
    for k, (st, (c, h, w)) in enumerate(zip(spec.stages, spec.stage_shapes())):
        params = c * c_in * st.kernel * st.kernel + c + (2 * c if st.use_batchnorm else 0)
        layers.append(LayerCost(f"backbone.{k}", conv_flops(st.kernel, st.kernel, c_in, c, h, w), params, c * h * w))
        c_in = c
    S = spec.bottleneck
    I = num_primary_capsules(S, D1)  # noqa: E741
    kh, kw = spec.spatial
    layers.append(LayerCost("primary", conv_flops(kh, kw, S, I * D1, 1, 1), I * D1 * S * kh * kw + I * D1, I * D1))
    J = num_classes
    layers.append(LayerCost("votes", 2 * I * J * D1 * D2, I * J * D2 * D1, I * J * D2))
    pair = 2 * I * J * D2
    layers.append(LayerCost("routing", pair * r + pair * (r - 1), 0, J * D2 + I * J))
    return CostReport(layers, S, I, bytes_per_value)


def network_cost(net: CapsuleNetwork) -> CostReport:
    return count_cost(net.backbone.spec, net.primary.D1, net.caps.J, net.caps.D2, net.caps.r,
                      net.dtype.itemsize)


TABLE_COLUMNS = (
    ("pruned_ratio", "Pruned ratio", "{:.2f}"),
    ("flops_reduction", "FLOPs cut (%)", "{:.1f}"),
    ("bottleneck", "Bottleneck size", "{}"),
    ("primary_caps", "Primary caps", "{}"),
    ("total_flops", "Total FLOPs (M)", "{:.3f}"),
    ("params", "Params", "{}"),
    ("epoch_seconds", "Epoch (s)", "{:.1f}"),
    ("accuracy", "Accuracy", "{:.4f}"),
)


def format_table(rows: list[dict]) -> str:
    """Aligned plain-text table; missing or None cells print as '-'."""
    cells = [[title for _, title, _ in TABLE_COLUMNS]]
    for row in rows:
        line = []
        for key, _, fmt in TABLE_COLUMNS:
            val = row.get(key)
            if val is None:
                line.append("-")
            elif key == "total_flops":
                line.append(fmt.format(val / 1e6))
            else:
                line.append(fmt.format(val))
        cells.append(line)
    widths = [max(len(r[i]) for r in cells) for i in range(len(TABLE_COLUMNS))]
    out = []
    for n, r in enumerate(cells):
        out.append("  ".join(c.rjust(w) for c, w in zip(r, widths)))
        if n == 0:
            out.append("  ".join("-" * w for w in widths))
    return "\n".join(out) + "\n"
