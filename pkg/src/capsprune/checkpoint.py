"""Versioned single-file checkpoint container.

Layout::

    b"CAPSCKPT"                      8-byte magic
    <u64 little-endian>              header length in bytes
    <header>                         UTF-8 JSON, sorted keys
    <payload>                        raw little-endian tensor buffers, back to back

The header holds the format version, the experiment config, the model
architecture, optimizer scalars, the epoch counter and a manifest of
``{name, shape, dtype, offset, nbytes}`` entries in payload order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneModel, BackboneSpec, ConvStage, PrimaryCapsParams, set_frozen
from .capsnet import CapsLayerParams
from .core import AdamState, Tensor
from .errors import FormatError, LengthError
from .network import CapsuleNetwork

MAGIC = b"CAPSCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    net: CapsuleNetwork
    config: dict
    epoch: int = 0
    adam: AdamState | None = None
    extra: dict = field(default_factory=dict)


def _architecture(net: CapsuleNetwork) -> dict:
    return {
        "backbone": net.backbone.spec.to_dict(),
        "frozen": net.backbone.frozen,
        "D1": net.primary.D1,
        "D2": net.caps.D2,
        "num_classes": net.caps.J,
        "routing_iterations": net.caps.r,
        "dtype": str(net.dtype),
    }


def _tensors(ck: Checkpoint) -> list[tuple[str, np.ndarray]]:
    items = [(f"param/{k}", t.data) for k, t in ck.net.parameters().items()]
    items += [(f"buffer/{k}", b) for k, b in ck.net.buffers().items()]
    if ck.adam is not None:
        for k in sorted(ck.adam.m):
            items.append((f"adam.m/{k}", ck.adam.m[k]))
            items.append((f"adam.v/{k}", ck.adam.v[k]))
    return items


def to_bytes(ck: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in _tensors(ck):
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        raw = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": FORMAT_VERSION,
        "config": ck.config,
        "architecture": _architecture(ck.net),
        "epoch": ck.epoch,
        "optimizer": None if ck.adam is None else {
            "lr": ck.adam.lr, "beta1": ck.adam.beta1, "beta2": ck.adam.beta2,
            "epsilon": ck.adam.epsilon, "t": ck.adam.t},
        "extra": ck.extra,
        "tensors": manifest,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(chunks)


def save_checkpoint(path, ck: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    tmp.replace(path)


def read_header(raw: bytes) -> tuple[dict, int]:
    if raw[:8] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if len(raw) < 16:
        raise LengthError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise LengthError("truncated checkpoint header")
    header = json.loads(raw[16:16 + hlen])
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('format_version')}")
    return header, 16 + hlen


def from_bytes(raw: bytes) -> Checkpoint:
    header, start = read_header(raw)
    arrays = {}
    expected = 0
    for entry in header["tensors"]:
        if entry["offset"] != expected:
            raise FormatError(f"manifest entry {entry['name']} is out of order")
        lo = start + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(raw):
            raise LengthError(f"payload truncated inside {entry['name']}")
        arr = np.frombuffer(raw[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        expected += entry["nbytes"]
    if start + expected != len(raw):
        raise LengthError("trailing bytes after checkpoint payload")

    arch = header["architecture"]
    net = _rebuild(arch, arrays)
    adam = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        adam = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], epsilon=o["epsilon"], t=o["t"])
        for name, arr in arrays.items():
            kind, _, key = name.partition("/")
            if kind == "adam.m":
                adam.m[key] = arr
            elif kind == "adam.v":
                adam.v[key] = arr
    return Checkpoint(net, header["config"], header["epoch"], adam, header["extra"])


def _rebuild(arch: dict, arrays: dict[str, np.ndarray]) -> CapsuleNetwork:
    def param(name):
        try:
            return Tensor(arrays[f"param/{name}"], requires_grad=True, name=name)
        except KeyError:
            raise FormatError(f"checkpoint lacks tensor {name!r}") from None

    spec = BackboneSpec.from_dict(arch["backbone"])
    stages = []
    for k, st in enumerate(spec.stages):
        stage = ConvStage(param(f"backbone.{k}.weight"), param(f"backbone.{k}.bias"))
        if st.use_batchnorm:
            stage.gamma = param(f"backbone.{k}.gamma")
            stage.beta = param(f"backbone.{k}.beta")
            stage.running_mean = arrays[f"buffer/backbone.{k}.running_mean"]
            stage.running_var = arrays[f"buffer/backbone.{k}.running_var"]
        stages.append(stage)
    backbone = BackboneModel(spec, stages)
    set_frozen(backbone, arch["frozen"])
    primary = PrimaryCapsParams(param("primary.filters"), param("primary.biases"), arch["D1"])
    caps = CapsLayerParams(param("caps.W"), arch["routing_iterations"])
    net = CapsuleNetwork(backbone, primary, caps)
    net.check_consistent()
    return net


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
