"""Router, FFN, MoE layer, and model forward passes.

A model is a stack of residual blocks (plain FFN or MoE layer) between an embed
and a readout matrix. MoE routing follows the softmax-then-top-k convention:

    R(x) = TopK(softmax(x · W_R), k)        (no renormalization after masking)
    y    = Σ_i R(x)_i · E_i(x)              (+ universal FFN output if present)

Expert weights are synthesized on demand from the layer's shared base and the
expert's delta; experts whose routing score is zero are never materialized
(instrumented by a per-layer synthesis counter). The batched forward evaluates
rows independently with a fixed accumulation order, so a batch result equals
the stacked single-row results bit-for-bit.
"""

from __future__ import annotations

import copy
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import numkern
from .deltas import (
    DeltaWeight,
    DenseDelta,
    ExpertGroup,
    LowRankDelta,
    QuantizedDelta,
    SparseDelta,
    synthesize,
)
from .errors import DimensionError, NumericError, ParameterError

ACTIVATIONS = ("gelu", "relu", "tanh", "identity")

# Guards synthesis-counter increments when evaluation chunks run on threads.
_SYNTH_COUNT_LOCK = threading.Lock()

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def act_forward(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        u = _GELU_C * (x + _GELU_A * x * x * x)
        return 0.5 * x * (1.0 + np.tanh(u))
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    if name == "identity":
        return x
    raise ParameterError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")


def act_grad(name: str, x: np.ndarray) -> np.ndarray:
    """Derivative of the activation, evaluated at the pre-activation x."""
    if name == "gelu":
        u = _GELU_C * (x + _GELU_A * x * x * x)
        t = np.tanh(u)
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    if name == "relu":
        return (x > 0).astype(x.dtype)
    if name == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if name == "identity":
        return np.ones_like(x)
    raise ParameterError(f"unknown activation {name!r}; choose from {ACTIVATIONS}")


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class Router:
    """Linear router: scores = TopK(softmax(x · w_r), topk_count)."""

    w_r: np.ndarray  # d × N
    topk_count: int

    def __post_init__(self):
        if self.w_r.ndim != 2:
            raise DimensionError("router weight must be 2-D")
        if not 1 <= self.topk_count <= self.w_r.shape[1]:
            raise ParameterError(
                f"topk_count={self.topk_count} out of range [1, {self.w_r.shape[1]}]"
            )


@dataclass
class FFN:
    """Two-matrix feed-forward block: x -> act(x · w_in) · w_out."""

    w_in: np.ndarray  # d × d_h
    w_out: np.ndarray  # d_h × d
    activation: str = "gelu"

    def __post_init__(self):
        if self.w_in.ndim != 2 or self.w_out.ndim != 2:
            raise DimensionError("FFN weights must be 2-D")
        if self.w_in.shape[1] != self.w_out.shape[0]:
            raise DimensionError(
                f"FFN inner dims differ: w_in {self.w_in.shape}, w_out {self.w_out.shape}"
            )
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")


@dataclass
class DenseBlock:
    """A plain (non-MoE) residual FFN block."""

    ffn: FFN


@dataclass
class MoELayer:
    """A routed expert block: one ExpertGroup per FFN matrix, plus the router.

    ``universal`` holds an always-active FFN evaluated in parallel with the
    routed experts (its output is summed in). ``extended`` means the universal
    FFN has instead been folded into the groups as delta N+1, still always
    active but sharing the group's base. ``init_base_in/out`` record the
    upcycle-time initialization (present only for vanilla-upcycled layers)
    so post-training decomposition has its base.
    """

    router: Router
    group_in: ExpertGroup  # base d × d_h
    group_out: ExpertGroup  # base d_h × d
    n_experts: int
    activation: str = "gelu"
    universal: FFN | None = None
    extended: bool = False
    trainable_base: bool = False
    method: str = "vanilla"
    init_base_in: np.ndarray | None = None
    init_base_out: np.ndarray | None = None
    synthesis_count: int = 0

    def __post_init__(self):
        expected = self.n_experts + (1 if self.extended else 0)
        for tag, group in (("in", self.group_in), ("out", self.group_out)):
            if len(group) != expected:
                raise DimensionError(
                    f"{tag} group holds {len(group)} deltas, expected {expected} "
                    f"(n_experts={self.n_experts}, extended={self.extended})"
                )
        if self.router.w_r.shape[1] != self.n_experts:
            raise DimensionError(
                f"router is {self.router.w_r.shape}, expected {self.n_experts} columns"
            )
        if self.extended and self.universal is not None:
            raise ParameterError("extended layers fold the universal FFN into the group")

    def synthesized_weights(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Materialize expert i's (w_in, w_out), counting the synthesis."""
        w_in = synthesize(self.group_in.base, self.group_in.deltas[i])
        w_out = synthesize(self.group_out.base, self.group_out.deltas[i])
        with _SYNTH_COUNT_LOCK:
            self.synthesis_count += 1
        return w_in, w_out


Block = DenseBlock | MoELayer


@dataclass
class Model:
    """Embed → residual blocks → readout, with dense-ancestor metadata."""

    d: int
    d_h: int
    in_width: int
    out_width: int
    embed: np.ndarray  # in_width × d
    blocks: list
    readout: np.ndarray  # d × out_width
    ancestor_params: int
    activation: str = "gelu"

    def __post_init__(self):
        if self.embed.shape != (self.in_width, self.d):
            raise DimensionError(f"embed is {self.embed.shape}, expected {(self.in_width, self.d)}")
        if self.readout.shape != (self.d, self.out_width):
            raise DimensionError(
                f"readout is {self.readout.shape}, expected {(self.d, self.out_width)}"
            )
        if self.ancestor_params <= 0:
            raise ParameterError("ancestor_params must be positive")


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def route(router: Router, x: np.ndarray) -> np.ndarray:
    """Routing scores for a row vector (or batch): softmax then top-k mask."""
    logits = numkern.matmul(np.atleast_2d(x), router.w_r)
    scores = numkern.topk_mask(numkern.softmax(logits), router.topk_count)
    return scores[0] if np.asarray(x).ndim == 1 else scores


def ffn_forward(ffn: FFN, x: np.ndarray, tape: dict | None = None) -> np.ndarray:
    h = numkern.matmul(x, ffn.w_in)
    a = act_forward(ffn.activation, h)
    out = numkern.matmul(a, ffn.w_out)
    if tape is not None:
        tape["h"] = h
        tape["a"] = a
    return out


def moe_forward(layer: MoELayer, x: np.ndarray) -> np.ndarray:
    """MoE block output for a single row vector or a batch (no residual)."""
    arr = np.asarray(x)
    if arr.ndim == 1:
        return _moe_forward_batch(layer, arr.reshape(1, -1))[0][0]
    return _moe_forward_batch(layer, arr)[0]


def _moe_forward_batch(
    layer: MoELayer, x: np.ndarray, record: bool = False
) -> tuple[np.ndarray, dict | None]:
    """Batched MoE forward; optionally records intermediates for backprop.

    Per-row accumulation order is fixed (experts in index order, universal
    last), and experts are synthesized once per call, only if some row routes
    to them.
    """
    scores_full = route(layer.router, x)
    n = layer.n_experts
    y = np.zeros((x.shape[0], layer.group_out.base.shape[1]), dtype=x.dtype)
    tape: dict | None = None
    if record:
        logits = numkern.matmul(x, layer.router.w_r)
        tape = {
            "kind": "moe",
            "x": x,
            "logits": logits,
            "probs": numkern.softmax(logits),
            "scores": scores_full,
            "experts": [],
            "universal": None,
        }
    for i in range(n):
        rows = np.flatnonzero(scores_full[:, i] != 0.0)
        if rows.size == 0:
            if tape is not None:
                tape["experts"].append(None)
            continue
        w_in, w_out = layer.synthesized_weights(i)
        xs = x[rows]
        h = numkern.matmul(xs, w_in)
        a = act_forward(layer.activation, h)
        out = numkern.matmul(a, w_out)
        y[rows] += scores_full[rows, i : i + 1] * out
        if tape is not None:
            tape["experts"].append(
                {"rows": rows, "w_in": w_in, "w_out": w_out, "h": h, "a": a, "out": out}
            )
    if layer.extended:
        w_in, w_out = layer.synthesized_weights(n)
        h = numkern.matmul(x, w_in)
        a = act_forward(layer.activation, h)
        y += numkern.matmul(a, w_out)
        if tape is not None:
            tape["universal"] = {"w_in": w_in, "w_out": w_out, "h": h, "a": a, "folded": True}
    elif layer.universal is not None:
        h = numkern.matmul(x, layer.universal.w_in)
        a = act_forward(layer.universal.activation, h)
        y += numkern.matmul(a, layer.universal.w_out)
        if tape is not None:
            tape["universal"] = {
                "w_in": layer.universal.w_in,
                "w_out": layer.universal.w_out,
                "h": h,
                "a": a,
                "folded": False,
            }
    return y, tape


def _block_forward(block: Block, x: np.ndarray, record: bool) -> tuple[np.ndarray, dict | None]:
    if isinstance(block, MoELayer):
        return _moe_forward_batch(block, x, record)
    tape = {"kind": "dense", "x": x} if record else None
    out = ffn_forward(block.ffn, x, tape)
    return out, tape


def _forward(model: Model, batch: np.ndarray, record: bool) -> tuple[np.ndarray, dict | None]:
    x = np.asarray(batch)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.in_width:
        raise DimensionError(f"batch is {x.shape}, expected (*, {model.in_width})")
    tape: dict | None = None
    h = numkern.matmul(x, model.embed)
    if record:
        tape = {"x_in": x, "block_inputs": [], "blocks": []}
    for j, block in enumerate(model.blocks):
        if record:
            tape["block_inputs"].append(h)
        try:
            out, block_tape = _block_forward(block, h, record)
        except NumericError as e:
            raise NumericError(f"block {j}: {e}") from e
        h = h + out  # residual connection
        if record:
            tape["blocks"].append(block_tape)
    pred = numkern.matmul(h, model.readout)
    if record:
        tape["h_final"] = h
        tape["pred"] = pred
    return pred, tape


def model_forward(model: Model, batch: np.ndarray) -> np.ndarray:
    """Predictions for a batch of row vectors (rows independent, bit-stable).

    A 1-D input is treated as a single row and returns a 1-D output.
    """
    pred, _ = _forward(model, batch, record=False)
    return pred[0] if np.asarray(batch).ndim == 1 else pred


def forward_tape(model: Model, batch: np.ndarray) -> tuple[np.ndarray, dict]:
    """Forward pass that also returns the intermediates backprop needs."""
    pred, tape = _forward(model, batch, record=True)
    assert tape is not None
    return pred, tape


def model_forward_parallel(model: Model, batch: np.ndarray, threads: int = 1) -> np.ndarray:
    """Forward over row chunks on a thread pool; bit-identical for any thread count.

    Rows are independent and each worker writes a disjoint slice of the output,
    so the result never depends on scheduling. Parameters are read-only here
    (single-writer contract with training).
    """
    x = np.asarray(batch)
    if threads <= 1 or x.ndim != 2 or x.shape[0] <= 1:
        return model_forward(model, x)
    chunk = (x.shape[0] + threads - 1) // threads
    spans = [(s, min(s + chunk, x.shape[0])) for s in range(0, x.shape[0], chunk)]
    out = np.zeros((x.shape[0], model.out_width), dtype=numkern.get_default_dtype())

    def run(span):
        out[span[0] : span[1]] = model_forward(model, x[span[0] : span[1]])

    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(run, spans))
    return out


# ---------------------------------------------------------------------------
# Construction, copying, parameter registry
# ---------------------------------------------------------------------------


def build_dense_model(
    d: int,
    d_h: int,
    depth: int,
    in_width: int,
    out_width: int,
    seed: int,
    activation: str = "gelu",
) -> Model:
    """A fresh dense model: embed, ``depth`` residual FFN blocks, readout.

    All matrices are uniform(−1/√fan_in, 1/√fan_in) from per-matrix streams of
    ``seed``; no biases anywhere.
    """
    if depth < 0:
        raise ParameterError("depth must be >= 0")
    if min(d, d_h, in_width, out_width) < 1:
        raise ParameterError("model dimensions must be >= 1")
    dtype = numkern.get_default_dtype()

    def init(rows, cols, *stream_parts):
        rng = numkern.RngStream(seed, numkern.derive_stream_id(*stream_parts))
        return rng.generator.uniform(-1.0 / np.sqrt(rows), 1.0 / np.sqrt(rows), (rows, cols)).astype(
            dtype
        )

    embed = init(in_width, d, "embed")
    blocks = [
        DenseBlock(FFN(init(d, d_h, "block", j, "w_in"), init(d_h, d, "block", j, "w_out"), activation))
        for j in range(depth)
    ]
    readout = init(d, out_width, "readout")
    total = embed.size + readout.size + sum(
        b.ffn.w_in.size + b.ffn.w_out.size for b in blocks
    )
    return Model(d, d_h, in_width, out_width, embed, blocks, readout, total, activation)


def copy_model(model: Model) -> Model:
    """Deep copy: no array aliasing with the original."""
    return copy.deepcopy(model)


def reset_synthesis_counters(model: Model) -> None:
    for block in model.blocks:
        if isinstance(block, MoELayer):
            block.synthesis_count = 0


def _delta_params(prefix: str, delta: DeltaWeight) -> list[tuple[str, np.ndarray]]:
    if isinstance(delta, DenseDelta):
        return [(f"{prefix}.mat", delta.mat)]
    if isinstance(delta, SparseDelta):
        return [(f"{prefix}.value", delta.value)]
    if isinstance(delta, LowRankDelta):
        return [(f"{prefix}.a", delta.a), (f"{prefix}.b", delta.b)]
    if isinstance(delta, QuantizedDelta):
        return []  # packed codes are not trainable
    raise ParameterError(f"unknown delta type {type(delta)!r}")


def named_parameters(model: Model) -> list[tuple[str, np.ndarray]]:
    """Deterministically ordered trainable parameters.

    Frozen arrays are absent: vanilla/compressed shared bases, quantized
    payloads, and (with a frozen shared FFN) the DeRS base matrices. The
    returned arrays are the live model arrays, so in-place optimizer updates
    take effect directly.
    """
    params: list[tuple[str, np.ndarray]] = [("embed", model.embed)]
    for j, block in enumerate(model.blocks):
        if isinstance(block, DenseBlock):
            params.append((f"blocks.{j}.ffn.w_in", block.ffn.w_in))
            params.append((f"blocks.{j}.ffn.w_out", block.ffn.w_out))
            continue
        params.append((f"blocks.{j}.router.w_r", block.router.w_r))
        for tag, group in (("group_in", block.group_in), ("group_out", block.group_out)):
            if block.trainable_base:
                params.append((f"blocks.{j}.{tag}.base", group.base))
            for i, delta in enumerate(group.deltas):
                params.extend(_delta_params(f"blocks.{j}.{tag}.delta{i}", delta))
        if block.universal is not None:
            params.append((f"blocks.{j}.universal.w_in", block.universal.w_in))
            params.append((f"blocks.{j}.universal.w_out", block.universal.w_out))
    params.append(("readout", model.readout))
    return params
