"""Self-describing tensor container shared by model checkpoints and tuning states.

Layout: magic, little-endian u64 header length, UTF-8 JSON header, then raw
row-major tensor blocks at the offsets listed in the header.  A fingerprint over
(config, tensor bytes) is stored in the header and recomputed on load.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, Transformer
from .quant import QuantizedTensor, dequantize

MAGIC = b"TXRCKPT1"
_DTYPES = {"float32": np.float32, "float64": np.float64, "int8": np.int8, "int64": np.int64}


class CheckpointError(ValueError):
    pass


def _as_array(t) -> np.ndarray | QuantizedTensor:
    if isinstance(t, QuantizedTensor):
        return t
    if isinstance(t, torch.Tensor):
        return t.detach().cpu().contiguous().numpy()
    return np.asarray(t, order="C")


def fingerprint(meta: dict, tensors: dict) -> str:
    h = hashlib.sha256()
    h.update(json.dumps(meta, sort_keys=True).encode())
    for name in sorted(tensors):
        a = _as_array(tensors[name])
        if isinstance(a, QuantizedTensor):
            h.update(f"{name}|int8|{a.shape}|{a.scale!r}".encode())
            h.update(a.values.tobytes())
        else:
            h.update(f"{name}|{a.dtype}|{a.shape}".encode())
            h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def model_tensors(model: Transformer) -> dict[str, torch.Tensor]:
    # named_parameters drops aliases, so shared layers are stored once
    return {n: p.detach() for n, p in model.named_parameters()}


def model_fingerprint(model: Transformer) -> str:
    return fingerprint({"config": model.cfg.to_dict(), "kind": "model"}, model_tensors(model))


def _fingerprint_meta(header: dict) -> dict:
    return {k: v for k, v in header.items() if k in ("config", "kind", "method", "task", "base_fingerprint")}


def write_container(path: str | Path, header: dict, tensors: dict) -> str:
    entries, blobs, offset = [], [], 0
    for name in sorted(tensors):
        a = _as_array(tensors[name])
        if isinstance(a, QuantizedTensor):
            raw = a.values.tobytes()
            entries.append({"name": name, "dtype": "int8", "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw), "scale": a.scale})
        else:
            raw = np.ascontiguousarray(a).tobytes()
            entries.append({"name": name, "dtype": str(a.dtype), "shape": list(a.shape),
                            "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(header)
    header["tensors"] = entries
    header["fingerprint"] = fingerprint(_fingerprint_meta(header), tensors)
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for raw in blobs:
            f.write(raw)
    return header["fingerprint"]


def read_container(path: str | Path) -> tuple[dict, dict]:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<Q", data, len(MAGIC))
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + n])
    base = start + n
    tensors: dict = {}
    for e in header["tensors"]:
        raw = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        a = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
        tensors[e["name"]] = QuantizedTensor(a, e["scale"]) if "scale" in e else a
    if fingerprint(_fingerprint_meta(header), tensors) != header.get("fingerprint"):
        raise CheckpointError(f"{path}: fingerprint mismatch, file is corrupt or was edited")
    return header, tensors


def save_checkpoint(model: Transformer, path: str | Path, quantized: dict | None = None,
                    meta: dict | None = None) -> str:
    """Write ``model``; names in ``quantized`` are stored as int8 blocks instead."""
    tensors: dict = dict(model_tensors(model))
    if quantized:
        tensors.update(quantized)
    header = {"kind": "model", "config": model.cfg.to_dict(), "meta": meta or {}}
    return write_container(path, header, tensors)


def load_checkpoint(path: str | Path, dtype: torch.dtype = torch.float32
                    ) -> tuple[Transformer, dict]:
    """Rebuild the model (int8 blocks are dequantized) and return it with the header."""
    header, tensors = read_container(path)
    if header.get("kind") != "model":
        raise CheckpointError(f"{path} holds a {header.get('kind')!r}, not a model")
    model = Transformer(ModelConfig.from_dict(header["config"])).to(dtype)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name}")
            t = tensors[name]
            p.copy_(dequantize(t, dtype) if isinstance(t, QuantizedTensor) else torch.from_numpy(t))
    model.eval()
    return model, header
