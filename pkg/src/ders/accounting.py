"""Parameter, storage-bit, and added-parameter accounting.

Walks every stored array in a model and reports, per layer and in total:
trainable value counts, stored value counts, payload bits at a container
width of K bits per float, index overhead (sparse positions persist as
unsigned 32-bit integers) and scale overhead (one K-bit scalar per sparse
rescale or quantizer scale) flagged separately, and the equivalent-expert
ratio of each MoE layer. Closed-form counting laws for sparse and low-rank
delta layers are checked against exhaustive walks by ``formula_check``.

Added parameters relative to the dense ancestor are reported under two
conventions side by side: values only, and values plus index vectors plus
scale scalars.
"""

from __future__ import annotations

import io
import csv
import json
from dataclasses import dataclass, asdict

import numpy as np

from .deltas import (
    DeltaWeight,
    DenseDelta,
    LowRankDelta,
    QuantizedDelta,
    SparseDelta,
    init_lowrank_trainable,
    init_sparse_trainable,
    sparse_keep_count,
)
from .errors import ParameterError
from .moe import DenseBlock, MoELayer, Model, named_parameters
from .numkern import RngStream, derive_stream_id, dtype_bits

SCHEMA_VERSION = 1

# Sparse index vectors persist as unsigned 32-bit integers.
INDEX_BITS = 32


# ---------------------------------------------------------------------------
# Per-container counting primitives
# ---------------------------------------------------------------------------


def delta_stored_values(delta: DeltaWeight) -> int:
    """Stored value count: floats for dense/sparse/low-rank, codes for quantized."""
    if isinstance(delta, DenseDelta):
        return int(delta.mat.size)
    if isinstance(delta, SparseDelta):
        return int(delta.value.size)
    if isinstance(delta, LowRankDelta):
        return int(delta.a.size + delta.b.size)
    if isinstance(delta, QuantizedDelta):
        return int(delta.rows * delta.cols)
    raise ParameterError(f"unknown delta type {type(delta)!r}")


def delta_value_bits(delta: DeltaWeight, bit_width: int) -> int:
    """Payload bits for the stored values: K per float, k per quantized code."""
    if isinstance(delta, QuantizedDelta):
        return int(delta.rows * delta.cols * delta.bit_width)
    return delta_stored_values(delta) * bit_width


def delta_index_entries(delta: DeltaWeight) -> int:
    """Positions that must be stored alongside the values (sparse only)."""
    return int(delta.index.size) if isinstance(delta, SparseDelta) else 0


def delta_scale_entries(delta: DeltaWeight) -> int:
    """Per-container scalars: the sparse rescale and the quantizer scale."""
    return 1 if isinstance(delta, (SparseDelta, QuantizedDelta)) else 0


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class LayerCount:
    """Counts for one named piece of the model (or the totals row)."""

    name: str
    kind: str  # embed | dense | moe | readout | total
    trainable_values: int = 0
    stored_values: int = 0
    stored_bits: int = 0
    index_overhead_bits: int = 0
    scale_overhead_bits: int = 0
    index_entries: int = 0
    scale_entries: int = 0
    equivalent_expert_ratio: float | None = None


@dataclass
class ParamReport:
    """Full accounting walk of a model at container width ``bit_width``."""

    schema_version: int
    bit_width: int
    layers: list[LayerCount]
    totals: LayerCount
    ancestor_params: int
    added_params_values_only: int
    added_params_with_overheads: int

    def to_dict(self) -> dict:
        return asdict(self)


def _moe_layer_count(name: str, layer: MoELayer, bit_width: int) -> LayerCount:
    out = LayerCount(name=name, kind="moe")

    def add_array(arr: np.ndarray) -> None:
        out.stored_values += int(arr.size)
        out.stored_bits += int(arr.size) * bit_width

    add_array(layer.router.w_r)
    expert_values = 0
    expert_unit = 0
    expert_count = 0
    for group in (layer.group_in, layer.group_out):
        add_array(group.base)
        expert_values += int(group.base.size)
        expert_unit += int(group.base.size)
        expert_count = len(group.deltas)
        for delta in group.deltas:
            values = delta_stored_values(delta)
            out.stored_values += values
            out.stored_bits += delta_value_bits(delta, bit_width)
            out.index_entries += delta_index_entries(delta)
            out.scale_entries += delta_scale_entries(delta)
            expert_values += values
    if layer.universal is not None:
        add_array(layer.universal.w_in)
        add_array(layer.universal.w_out)
    for record, live in (
        (layer.init_base_in, layer.group_in.base),
        (layer.init_base_out, layer.group_out.base),
    ):
        if record is not None and record is not live:
            add_array(record)
    out.index_overhead_bits = out.index_entries * INDEX_BITS
    out.scale_overhead_bits = out.scale_entries * bit_width
    if expert_count > 0 and expert_unit > 0:
        out.equivalent_expert_ratio = expert_values / float(expert_count * expert_unit)
    return out


def count_report(model: Model, bit_width: int | None = None) -> ParamReport:
    """Exhaustive storage walk of ``model`` at float width ``bit_width`` (K).

    K defaults to the bit width of the model's own arrays. Trainable counts
    are attributed to layers by parameter-name prefix, so the totals row
    always matches the trainable-parameter registry exactly.
    """
    if bit_width is None:
        bit_width = dtype_bits(model.embed.dtype)

    trainable_by_prefix: dict[str, int] = {}
    for pname, arr in named_parameters(model):
        prefix = ".".join(pname.split(".")[:2]) if pname.startswith("blocks.") else pname
        trainable_by_prefix[prefix] = trainable_by_prefix.get(prefix, 0) + int(arr.size)

    layers: list[LayerCount] = []
    embed_row = LayerCount(
        name="embed",
        kind="embed",
        trainable_values=trainable_by_prefix.get("embed", 0),
        stored_values=int(model.embed.size),
        stored_bits=int(model.embed.size) * bit_width,
    )
    layers.append(embed_row)

    for j, block in enumerate(model.blocks):
        name = f"blocks.{j}"
        if isinstance(block, DenseBlock):
            values = int(block.ffn.w_in.size + block.ffn.w_out.size)
            row = LayerCount(
                name=name,
                kind="dense",
                stored_values=values,
                stored_bits=values * bit_width,
            )
        else:
            row = _moe_layer_count(name, block, bit_width)
        row.trainable_values = trainable_by_prefix.get(name, 0)
        layers.append(row)

    layers.append(
        LayerCount(
            name="readout",
            kind="readout",
            trainable_values=trainable_by_prefix.get("readout", 0),
            stored_values=int(model.readout.size),
            stored_bits=int(model.readout.size) * bit_width,
        )
    )

    totals = LayerCount(name="total", kind="total")
    ratio_num = 0.0
    ratio_den = 0.0
    for row in layers:
        totals.trainable_values += row.trainable_values
        totals.stored_values += row.stored_values
        totals.stored_bits += row.stored_bits
        totals.index_overhead_bits += row.index_overhead_bits
        totals.scale_overhead_bits += row.scale_overhead_bits
        totals.index_entries += row.index_entries
        totals.scale_entries += row.scale_entries
        if row.equivalent_expert_ratio is not None:
            block = model.blocks[int(row.name.split(".")[1])]
            unit = float(
                len(block.group_in.deltas)
                * (block.group_in.base.size + block.group_out.base.size)
            )
            ratio_num += row.equivalent_expert_ratio * unit
            ratio_den += unit
    if ratio_den > 0:
        totals.equivalent_expert_ratio = ratio_num / ratio_den

    overheads = totals.index_entries + totals.scale_entries
    return ParamReport(
        schema_version=SCHEMA_VERSION,
        bit_width=bit_width,
        layers=layers,
        totals=totals,
        ancestor_params=model.ancestor_params,
        added_params_values_only=totals.stored_values - model.ancestor_params,
        added_params_with_overheads=totals.stored_values + overheads - model.ancestor_params,
    )


def trainable_count(model: Model) -> int:
    """Total trainable values (sum over the parameter registry)."""
    return sum(int(arr.size) for _, arr in named_parameters(model))


# ---------------------------------------------------------------------------
# Closed-form counting laws
# ---------------------------------------------------------------------------


def formula_check(entries, seed: int = 0) -> list[dict]:
    """Check the per-matrix counting laws against actually built containers.

    ``entries`` is an iterable of (d, d_h, n_experts, kind, value) tuples with
    kind "p" (sparse, value = drop rate) or "r" (low rank, value = rank). For
    each entry one d×d_h matrix group is built: a base plus n_experts deltas.
    Sparse law: (1 + n·(1−p))·d·d_h stored values, allowed to deviate by up to
    n from per-expert rounding. Low-rank law: d·d_h + n·r·(d+d_h), exact.
    """
    rows = []
    for idx, (d, d_h, n_experts, kind, value) in enumerate(entries):
        total = d * d_h
        walk = total  # the shared base matrix
        if kind == "p":
            formula = (1.0 + n_experts * (1.0 - value)) * total
            allowed = float(n_experts)
            for i in range(n_experts):
                if sparse_keep_count(d, d_h, value) == 0:
                    continue  # degenerate: nothing kept for this expert
                delta = init_sparse_trainable(
                    d, d_h, value, RngStream(seed, derive_stream_id("formula", idx, i))
                )
                walk += delta_stored_values(delta)
        elif kind == "r":
            formula = float(total + n_experts * value * (d + d_h))
            allowed = 0.0
            for i in range(n_experts):
                delta = init_lowrank_trainable(
                    d, d_h, value, RngStream(seed, derive_stream_id("formula", idx, i))
                )
                walk += delta_stored_values(delta)
        else:
            raise ParameterError(f"formula_check kind must be 'p' or 'r', got {kind!r}")
        deviation = abs(walk - formula)
        rows.append(
            {
                "d": d,
                "d_h": d_h,
                "n_experts": n_experts,
                "kind": kind,
                "value": value,
                "formula": formula,
                "walk": walk,
                "deviation": deviation,
                "allowed": allowed,
                "ok": deviation <= allowed,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Emitters
# ---------------------------------------------------------------------------


def report_to_json(report: ParamReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True)


_CSV_FIELDS = (
    "name",
    "kind",
    "trainable_values",
    "stored_values",
    "stored_bits",
    "index_overhead_bits",
    "scale_overhead_bits",
    "equivalent_expert_ratio",
)


def report_to_csv(report: ParamReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(_CSV_FIELDS)
    for row in list(report.layers) + [report.totals]:
        ratio = row.equivalent_expert_ratio
        writer.writerow(
            [
                row.name,
                row.kind,
                row.trainable_values,
                row.stored_values,
                row.stored_bits,
                row.index_overhead_bits,
                row.scale_overhead_bits,
                "" if ratio is None else repr(ratio),
            ]
        )
    return buf.getvalue()
