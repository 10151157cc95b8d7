"""Checkpoint files: magic line, length-prefixed JSON header, raw little-endian float64 tensors.

The layout is fully deterministic (sorted header keys, fixed tensor order),
so identical weights always produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .lora import LoraAdapter
from .model import ToyTransformer, ToyTransformerConfig

MAGIC = b"COTLORA-CKPT\n"
_DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


def _pack(kind: str, tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    entries, blobs, offset = [], [], 0
    for name, t in tensors.items():
        data = np.ascontiguousarray(t, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {"kind": kind, "dtype": _DTYPE, "meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(blobs)


def _unpack(raw: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a checkpoint file")
    pos = len(MAGIC)
    (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
    pos += 8
    header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    base = pos + hlen
    tensors = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"truncated tensor {e['name']!r}")
        tensors[e["name"]] = np.frombuffer(buf, dtype=header["dtype"]).reshape(e["shape"]).copy()
    return header, tensors


def model_to_bytes(model: ToyTransformer, meta: dict | None = None) -> bytes:
    tensors = dict(model.named_base_tensors())
    return _pack("model", tensors, {"config": model.config.to_dict(), **(meta or {})})


def model_from_bytes(raw: bytes) -> ToyTransformer:
    header, tensors = _unpack(raw)
    if header["kind"] != "model":
        raise CheckpointError(f"expected a model checkpoint, got {header['kind']!r}")
    return ToyTransformer(ToyTransformerConfig(**header["meta"]["config"]), tensors)


def adapters_to_bytes(model: ToyTransformer, meta: dict | None = None) -> bytes:
    tensors, layers = {}, {}
    for name, ad in model.named_adapters():
        tensors[f"{name}.lora_A"] = ad.A
        tensors[f"{name}.lora_B"] = ad.B
        layers[name] = {"rank": ad.rank, "alpha": ad.alpha, "dropout": ad.dropout}
    if not layers:
        raise CheckpointError("model has no adapters")
    return _pack("adapter", tensors, {"layers": layers, "config": model.config.to_dict(), **(meta or {})})


def load_adapters_bytes(model: ToyTransformer, raw: bytes) -> ToyTransformer:
    """Attach stored adapters onto a base model with matching projection shapes."""
    header, tensors = _unpack(raw)
    if header["kind"] != "adapter":
        raise CheckpointError(f"expected an adapter checkpoint, got {header['kind']!r}")
    projections = dict(model.named_projections())
    layers = header["meta"]["layers"]
    missing = sorted(set(layers) - projections.keys())
    if missing:
        raise CheckpointError(f"base model lacks projections {missing}")
    if any(p.adapter is not None for p in projections.values()):
        raise CheckpointError("model already has adapters injected")
    # build and check everything first so a bad file leaves the model untouched
    built = {}
    for name, info in layers.items():
        proj = projections[name]
        try:
            ad = LoraAdapter(tensors[f"{name}.lora_A"], tensors[f"{name}.lora_B"], info["alpha"], info["dropout"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{name}: {exc}") from None
        if ad.rank != info["rank"]:
            raise CheckpointError(f"{name}: stored rank {info['rank']} disagrees with tensor shape")
        if ad.A.shape[1] != proj.in_features or ad.B.shape[0] != proj.out_features:
            raise CheckpointError(f"{name}: adapter A{ad.A.shape}/B{ad.B.shape} does not fit weight {proj.weight.shape}")
        built[name] = ad
    for name, ad in built.items():
        projections[name].attach(ad)
    return model


def save_model(model: ToyTransformer, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(model_to_bytes(model, meta))


def load_model(path: str | Path) -> ToyTransformer:
    return model_from_bytes(Path(path).read_bytes())


def save_adapters(model: ToyTransformer, path: str | Path, meta: dict | None = None) -> None:
    Path(path).write_bytes(adapters_to_bytes(model, meta))


def load_adapters(model: ToyTransformer, path: str | Path) -> ToyTransformer:
    return load_adapters_bytes(model, Path(path).read_bytes())
