"""Self-describing binary checkpoints.

Layout: the 4-byte magic ``DERS``, a little-endian u32 format version, a
little-endian u32 header length, a UTF-8 JSON header, the concatenated
little-endian array payloads, and a trailing u32 CRC-32 of the payload.
The header carries the model topology, a record table (name, dtype, shape,
offset, byte count), per-delta metadata (kind, rescale, quantizer scale),
and caller-supplied metadata such as seeds and stage configs — a
checkpoint loads without any external configuration.

Floats stored on disk keep the model's own width (f8 or f4); sparse index
vectors persist as u32; quantized payloads as raw bytes. Scalar floats
(rescales, quantizer scales) live in the JSON header, which round-trips
them exactly via repr. Vanilla-upcycled layers alias their recorded init
base to the live group base; the alias (not a second copy) is preserved
across save/load. Writes are atomic: a temp file in the target directory
is renamed over the destination. Loading rejects wrong magic, truncation,
and checksum failures as corruption, and any newer format version
outright.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from .deltas import (
    DenseDelta,
    ExpertGroup,
    LowRankDelta,
    QuantizedDelta,
    SparseDelta,
)
from .errors import CorruptionError, ParameterError, StateError
from .moe import DenseBlock, FFN, Model, MoELayer, Router

MAGIC = b"DERS"
FORMAT_VERSION = 1

_FLOAT_TAGS = {"float64": "<f8", "float32": "<f4"}
_INDEX_DTYPE = "<u4"
_BYTE_DTYPE = "u1"


def _float_tag(model: Model) -> str:
    name = model.embed.dtype.name
    if name not in _FLOAT_TAGS:
        raise StateError(f"cannot checkpoint dtype {name}; expected float64 or float32")
    return name


def _canonical(arr: np.ndarray, dtype: str) -> np.ndarray:
    return np.ascontiguousarray(arr.astype(dtype, copy=False))


def _delta_descriptor(delta) -> dict:
    if isinstance(delta, DenseDelta):
        return {"kind": "dense"}
    if isinstance(delta, SparseDelta):
        if delta.index.size and int(delta.index[-1]) >= 2**32:
            raise StateError("sparse index exceeds the u32 on-disk range")
        return {
            "kind": "sparse",
            "rows": delta.rows,
            "cols": delta.cols,
            "rescale": float(delta.rescale),
        }
    if isinstance(delta, LowRankDelta):
        return {"kind": "lowrank"}
    if isinstance(delta, QuantizedDelta):
        return {
            "kind": "quantized",
            "rows": delta.rows,
            "cols": delta.cols,
            "bit_width": delta.bit_width,
            "scale": float(delta.scale),
        }
    raise ParameterError(f"unknown delta type {type(delta)!r}")


def _delta_arrays(name: str, delta, float_dtype: str):
    if isinstance(delta, DenseDelta):
        return [(f"{name}.mat", _canonical(delta.mat, float_dtype))]
    if isinstance(delta, SparseDelta):
        return [
            (f"{name}.index", _canonical(delta.index, _INDEX_DTYPE)),
            (f"{name}.value", _canonical(delta.value, float_dtype)),
        ]
    if isinstance(delta, LowRankDelta):
        return [
            (f"{name}.a", _canonical(delta.a, float_dtype)),
            (f"{name}.b", _canonical(delta.b, float_dtype)),
        ]
    return [(f"{name}.packed", _canonical(delta.packed, _BYTE_DTYPE))]


def _walk_model(model: Model):
    """Topology header + ordered (name, canonical array) records."""
    tag = _float_tag(model)
    fdt = _FLOAT_TAGS[tag]
    arrays: list[tuple[str, np.ndarray]] = [("embed", _canonical(model.embed, fdt))]
    blocks = []
    for j, block in enumerate(model.blocks):
        prefix = f"blocks.{j}"
        if isinstance(block, DenseBlock):
            blocks.append({"kind": "dense", "activation": block.ffn.activation})
            arrays.append((f"{prefix}.ffn.w_in", _canonical(block.ffn.w_in, fdt)))
            arrays.append((f"{prefix}.ffn.w_out", _canonical(block.ffn.w_out, fdt)))
            continue
        desc = {
            "kind": "moe",
            "n_experts": block.n_experts,
            "topk_count": block.router.topk_count,
            "activation": block.activation,
            "extended": block.extended,
            "trainable_base": block.trainable_base,
            "method": block.method,
            "universal": None,
            "init_base_in": None,
            "init_base_out": None,
            "group_in": {"deltas": [_delta_descriptor(d) for d in block.group_in.deltas]},
            "group_out": {"deltas": [_delta_descriptor(d) for d in block.group_out.deltas]},
        }
        arrays.append((f"{prefix}.router.w_r", _canonical(block.router.w_r, fdt)))
        for tag_g, group in (("group_in", block.group_in), ("group_out", block.group_out)):
            arrays.append((f"{prefix}.{tag_g}.base", _canonical(group.base, fdt)))
            for i, delta in enumerate(group.deltas):
                arrays.extend(_delta_arrays(f"{prefix}.{tag_g}.delta{i}", delta, fdt))
        if block.universal is not None:
            desc["universal"] = {"activation": block.universal.activation}
            arrays.append((f"{prefix}.universal.w_in", _canonical(block.universal.w_in, fdt)))
            arrays.append((f"{prefix}.universal.w_out", _canonical(block.universal.w_out, fdt)))
        for side, record, live in (
            ("init_base_in", block.init_base_in, block.group_in.base),
            ("init_base_out", block.init_base_out, block.group_out.base),
        ):
            if record is None:
                continue
            if record is live:
                desc[side] = "alias"
            else:
                desc[side] = "record"
                arrays.append((f"{prefix}.{side}", _canonical(record, fdt)))
        blocks.append(desc)
    arrays.append(("readout", _canonical(model.readout, fdt)))
    topology = {
        "d": model.d,
        "d_h": model.d_h,
        "in_width": model.in_width,
        "out_width": model.out_width,
        "ancestor_params": model.ancestor_params,
        "activation": model.activation,
        "blocks": blocks,
    }
    return tag, topology, arrays


def save_model(model: Model, path: str, meta: dict | None = None) -> None:
    """Write ``model`` (plus JSON-serializable ``meta``) atomically to ``path``."""
    tag, topology, arrays = _walk_model(model)
    records = []
    payload_parts = []
    offset = 0
    for name, arr in arrays:
        data = arr.tobytes()
        records.append(
            {
                "name": name,
                "dtype": arr.dtype.str if arr.dtype.str != "|u1" else _BYTE_DTYPE,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        payload_parts.append(data)
        offset += len(data)
    payload = b"".join(payload_parts)
    header = {
        "dtype": tag,
        "model": topology,
        "records": records,
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = b"".join(
        [
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            struct.pack("<I", len(header_bytes)),
            header_bytes,
            payload,
            struct.pack("<I", zlib.crc32(payload)),
        ]
    )
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _take(records: dict, name: str, payload: bytes) -> np.ndarray:
    if name not in records:
        raise CorruptionError(f"checkpoint is missing record {name!r}")
    rec = records[name]
    start, nbytes = rec["offset"], rec["nbytes"]
    if start + nbytes > len(payload):
        raise CorruptionError(f"record {name!r} extends past the payload (truncated file?)")
    flat = np.frombuffer(payload[start : start + nbytes], dtype=np.dtype(rec["dtype"]))
    expected = int(np.prod(rec["shape"])) if rec["shape"] else 1
    if flat.size != expected:
        raise CorruptionError(f"record {name!r} holds {flat.size} items, expected {expected}")
    return flat.reshape(rec["shape"]).copy()


def _load_float(records: dict, name: str, payload: bytes, dtype) -> np.ndarray:
    return _take(records, name, payload).astype(dtype, copy=False)


def _load_delta(desc: dict, name: str, records: dict, payload: bytes, dtype):
    kind = desc["kind"]
    if kind == "dense":
        return DenseDelta(_load_float(records, f"{name}.mat", payload, dtype))
    if kind == "sparse":
        return SparseDelta(
            rows=desc["rows"],
            cols=desc["cols"],
            index=_take(records, f"{name}.index", payload).astype(np.int64),
            value=_load_float(records, f"{name}.value", payload, dtype),
            rescale=desc["rescale"],
        )
    if kind == "lowrank":
        return LowRankDelta(
            a=_load_float(records, f"{name}.a", payload, dtype),
            b=_load_float(records, f"{name}.b", payload, dtype),
        )
    if kind == "quantized":
        return QuantizedDelta(
            rows=desc["rows"],
            cols=desc["cols"],
            bit_width=desc["bit_width"],
            packed=_take(records, f"{name}.packed", payload).astype(np.uint8),
            scale=desc["scale"],
        )
    raise CorruptionError(f"checkpoint names unknown delta kind {kind!r}")


def load_model(path: str) -> tuple[Model, dict]:
    """Read a checkpoint; returns (model, meta). Rejects corruption and
    any format version newer than this library understands."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptionError(f"{path} is not a DERS checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version > FORMAT_VERSION:
        raise StateError(
            f"checkpoint format version {version} is newer than the supported {FORMAT_VERSION}"
        )
    (header_len,) = struct.unpack_from("<I", blob, 8)
    header_end = 12 + header_len
    if header_end + 4 > len(blob):
        raise CorruptionError(f"{path} is truncated (header extends past end of file)")
    try:
        header = json.loads(blob[12:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path} has an unreadable header: {exc}") from exc
    payload = blob[header_end:-4]
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(payload) != stored_crc:
        raise CorruptionError(f"{path} failed its payload checksum")

    dtype = np.dtype(np.float64 if header["dtype"] == "float64" else np.float32)
    records = {rec["name"]: rec for rec in header["records"]}
    topo = header["model"]
    blocks = []
    for j, desc in enumerate(topo["blocks"]):
        prefix = f"blocks.{j}"
        if desc["kind"] == "dense":
            blocks.append(
                DenseBlock(
                    FFN(
                        _load_float(records, f"{prefix}.ffn.w_in", payload, dtype),
                        _load_float(records, f"{prefix}.ffn.w_out", payload, dtype),
                        desc["activation"],
                    )
                )
            )
            continue
        groups = {}
        for tag_g in ("group_in", "group_out"):
            base = _load_float(records, f"{prefix}.{tag_g}.base", payload, dtype)
            deltas = [
                _load_delta(d, f"{prefix}.{tag_g}.delta{i}", records, payload, dtype)
                for i, d in enumerate(desc[tag_g]["deltas"])
            ]
            groups[tag_g] = ExpertGroup(base, deltas)
        universal = None
        if desc["universal"] is not None:
            universal = FFN(
                _load_float(records, f"{prefix}.universal.w_in", payload, dtype),
                _load_float(records, f"{prefix}.universal.w_out", payload, dtype),
                desc["universal"]["activation"],
            )
        init_bases = {}
        for side, group in (("init_base_in", "group_in"), ("init_base_out", "group_out")):
            mode = desc[side]
            if mode is None:
                init_bases[side] = None
            elif mode == "alias":
                init_bases[side] = groups[group].base
            else:
                init_bases[side] = _load_float(records, f"{prefix}.{side}", payload, dtype)
        blocks.append(
            MoELayer(
                router=Router(
                    _load_float(records, f"{prefix}.router.w_r", payload, dtype),
                    desc["topk_count"],
                ),
                group_in=groups["group_in"],
                group_out=groups["group_out"],
                n_experts=desc["n_experts"],
                activation=desc["activation"],
                universal=universal,
                extended=desc["extended"],
                trainable_base=desc["trainable_base"],
                method=desc["method"],
                init_base_in=init_bases["init_base_in"],
                init_base_out=init_bases["init_base_out"],
            )
        )
    model = Model(
        d=topo["d"],
        d_h=topo["d_h"],
        in_width=topo["in_width"],
        out_width=topo["out_width"],
        embed=_load_float(records, "embed", payload, dtype),
        blocks=blocks,
        readout=_load_float(records, "readout", payload, dtype),
        ancestor_params=topo["ancestor_params"],
        activation=topo["activation"],
    )
    return model, header.get("meta", {})
