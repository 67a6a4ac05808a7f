"""Tensor container: a JSON manifest next to one little-endian binary blob.

Manifest layout::

    {
      "schema": "harvestnet.container/1",
      "blob": "<file name of the blob, relative to the manifest>",
      "meta": {...},
      "tensors": [
        {"name": ..., "shape": [...], "kind": "real32" | "int8-code" | "int4-code" | "int32",
         "scale": float | null, "zero_point": float | null, "offset": int, "length": int},
        ...
      ]
    }

int4 codes are packed two per byte, low nibble first, two's complement.
``int32`` holds plain integers such as class labels.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError
from .netgraph.engine import WeightSet
from .quantizer import BitWidth, QuantParams, QuantTensor

CONTAINER_SCHEMA = "harvestnet.container/1"
KINDS = ("real32", "int8-code", "int4-code", "int32")


def pack_int4(codes: np.ndarray) -> bytes:
    flat = np.asarray(codes, dtype=np.int64).ravel()
    nib = (flat & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8).tobytes()


def unpack_int4(buf: bytes, count: int) -> np.ndarray:
    b = np.frombuffer(buf, dtype=np.uint8)
    nib = np.empty(b.size * 2, dtype=np.int64)
    nib[0::2] = b & 0xF
    nib[1::2] = b >> 4
    nib = nib[:count]
    return np.where(nib >= 8, nib - 16, nib)


def _encode(value):
    if isinstance(value, QuantTensor):
        p = value.params
        if p.bit_width is BitWidth.Q8:
            return "int8-code", value.codes.astype("<i1").tobytes(), p
        return "int4-code", pack_int4(value.codes), p
    arr = np.asarray(value)
    if arr.dtype.kind in "iu":
        return "int32", arr.astype("<i4").tobytes(), None
    return "real32", arr.astype("<f4").tobytes(), None


def write_container(path, tensors: dict, meta: dict | None = None) -> None:
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        kind, payload, params = _encode(value)
        entries.append({
            "name": name,
            "shape": [int(d) for d in np.shape(value.codes if isinstance(value, QuantTensor) else value)],
            "kind": kind,
            "scale": params.scale if params else None,
            "zero_point": params.zero_point if params else None,
            "offset": offset,
            "length": len(payload),
        })
        chunks.append(payload)
        offset += len(payload)
    manifest = {"schema": CONTAINER_SCHEMA, "blob": blob_path.name, "meta": meta or {}, "tensors": entries}
    blob_path.write_bytes(b"".join(chunks))
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")


def read_container(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ParseError(f"cannot read container: {e.strerror}", path) from None
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, path, e.lineno) from None
    if manifest.get("schema") != CONTAINER_SCHEMA:
        raise ParseError(f"expected schema {CONTAINER_SCHEMA!r}, got {manifest.get('schema')!r}", path)
    blob_path = path.parent / manifest["blob"]
    try:
        blob = blob_path.read_bytes()
    except OSError as e:
        raise ParseError(f"cannot read blob: {e.strerror}", blob_path) from None
    out = {}
    for t in manifest["tensors"]:
        shape = tuple(t["shape"])
        count = int(np.prod(shape)) if shape else 1
        if t["offset"] + t["length"] > len(blob):
            raise ParseError(f"tensor {t['name']!r} runs past the end of the blob", path)
        buf = blob[t["offset"]:t["offset"] + t["length"]]
        kind = t["kind"]
        if kind == "real32":
            arr = np.frombuffer(buf, dtype="<f4").astype(np.float64).reshape(shape)
        elif kind == "int32":
            arr = np.frombuffer(buf, dtype="<i4").astype(np.int64).reshape(shape)
        elif kind == "int8-code":
            codes = np.frombuffer(buf, dtype="<i1").astype(np.int64).reshape(shape)
            arr = QuantTensor(codes, QuantParams(t["scale"], t["zero_point"], BitWidth.Q8))
        elif kind == "int4-code":
            codes = unpack_int4(buf, count).reshape(shape)
            arr = QuantTensor(codes, QuantParams(t["scale"], t["zero_point"], BitWidth.Q4))
        else:
            raise ParseError(f"tensor {t['name']!r} has unknown kind {kind!r}", path)
        out[t["name"]] = arr
    return out, manifest.get("meta", {})


def save_weights(path, weight_sets, meta: dict | None = None) -> None:
    """Write one or more weight sets (keyed by precision) into one container."""
    tensors = {}
    acts = {}
    for ws in weight_sets:
        tag = ws.precision.name
        for key, value in ws.tensors.items():
            tensors[f"{tag}/{key}"] = value
        if ws.act_params:
            acts[tag] = {layer: {"scale": p.scale, "zero_point": p.zero_point}
                         for layer, p in ws.act_params.items()}
    m = dict(meta or {})
    m["activations"] = acts
    m["precisions"] = [ws.precision.name for ws in weight_sets]
    write_container(path, tensors, m)


def load_weights(path) -> dict:
    tensors, meta = read_container(path)
    sets = {}
    for tag in meta.get("precisions", []):
        bw = BitWidth.parse(tag)
        prefix = f"{tag}/"
        ts = {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
        acts = {layer: QuantParams(d["scale"], d["zero_point"], bw)
                for layer, d in meta.get("activations", {}).get(tag, {}).items()}
        sets[bw] = WeightSet(bw, ts, acts)
    if not sets:
        raise ValidationError(f"{path}: container holds no weight sets")
    return sets
