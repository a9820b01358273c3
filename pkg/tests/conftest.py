"""Shared fixtures and oracles."""

import numpy as np
import pytest

from ders import numkern, train
from ders.deltas import ExpertGroup, init_lowrank_trainable, init_sparse_trainable
from ders.moe import FFN, MoELayer, Router, build_dense_model, forward_tape, named_parameters
from ders.numkern import RngStream, derive_stream_id


@pytest.fixture(autouse=True)
def float64_mode():
    """Every test starts in float64 mode; tests that switch must not leak."""
    numkern.set_default_dtype("float64")
    yield
    numkern.set_default_dtype("float64")


def triple_loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Independent naive oracle: scalar accumulation, k innermost."""
    n, inner = a.shape
    inner2, m = b.shape
    assert inner == inner2
    out = np.zeros((n, m), dtype=np.result_type(a, b))
    for i in range(n):
        for j in range(m):
            acc = out.dtype.type(0)
            for k in range(inner):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def rng_mat(shape, seed, scale=1.0):
    g = np.random.default_rng(seed)
    return (scale * g.standard_normal(shape)).astype(numkern.get_default_dtype())


def build_mixed_moe_model(seed: int, d=5, d_h=7, n=3):
    """Dense block + sparse-delta MoE (with universal FFN) + low-rank MoE (extended).

    Covers every trainable parameter class in one model: dense FFN weights,
    router, shared bases, sparse values, low-rank A/B factors, a separate
    universal FFN, a folded always-active delta, embed and readout. Parameters
    get a small random nudge so no gradient path sits at an exact zero.
    """
    dense = build_dense_model(d=d, d_h=d_h, depth=3, in_width=4, out_width=3, seed=seed)
    m = dense

    def stream(*parts):
        return RngStream(seed, derive_stream_id(*parts))

    def router(idx):
        w = stream("frk_router", idx).generator.uniform(-0.5, 0.5, (d, n))
        return Router(w.astype(numkern.get_default_dtype()), 2)

    ffn1 = m.blocks[1].ffn
    sm_layer = MoELayer(
        router=router(1),
        group_in=ExpertGroup(
            ffn1.w_in.copy(),
            [init_sparse_trainable(d, d_h, 0.6, stream("sm", "in", i)) for i in range(n)],
        ),
        group_out=ExpertGroup(
            ffn1.w_out.copy(),
            [init_sparse_trainable(d_h, d, 0.6, stream("sm", "out", i)) for i in range(n)],
        ),
        n_experts=n,
        universal=FFN(ffn1.w_in.copy(), ffn1.w_out.copy(), ffn1.activation),
        trainable_base=True,
        method="ders_sm",
    )
    ffn2 = m.blocks[2].ffn
    lm_layer = MoELayer(
        router=router(2),
        group_in=ExpertGroup(
            ffn2.w_in.copy(),
            [init_lowrank_trainable(d, d_h, 2, stream("lm", "in", i)) for i in range(n + 1)],
        ),
        group_out=ExpertGroup(
            ffn2.w_out.copy(),
            [init_lowrank_trainable(d_h, d, 2, stream("lm", "out", i)) for i in range(n + 1)],
        ),
        n_experts=n,
        extended=True,
        trainable_base=True,
        method="ders_lm",
    )
    m.blocks[1] = sm_layer
    m.blocks[2] = lm_layer
    nudge = stream("nudge").generator
    for _, arr in named_parameters(m):
        arr += 0.05 * nudge.standard_normal(arr.shape)
    return m


def loss_only(model, batch, task, aux_coeff):
    x, y = batch
    pred, tape = forward_tape(model, x)
    task_loss, _ = train.task_loss_and_grad(pred, y, task.loss_kind)
    aux = train._aux_loss(tape, model) if aux_coeff else 0.0
    return task_loss + aux_coeff * aux


def fd_worst_relative_error(model, batch, task, aux_coeff, h=1e-5):
    """Max relative error between analytic and central-difference gradients,
    over every entry of every trainable parameter."""
    _, grads = train.loss_and_grads(model, batch, task, aux_coeff)
    worst = 0.0
    for name, arr in named_parameters(model):
        flat = arr.ravel()
        gflat = grads[name].ravel()
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss_only(model, batch, task, aux_coeff)
            flat[idx] = orig - h
            lm = loss_only(model, batch, task, aux_coeff)
            flat[idx] = orig
            fd = (lp - lm) / (2.0 * h)
            rel = abs(fd - gflat[idx]) / max(abs(fd), abs(gflat[idx]), 1e-8)
            worst = max(worst, rel)
    return worst


def routing_masks(model, batch):
    """The top-k survivor pattern of every MoE layer for a batch."""
    x, _ = batch
    _, tape = forward_tape(model, x)
    return [
        (bt["scores"] != 0.0) for bt in tape["blocks"] if bt is not None and bt["kind"] == "moe"
    ]
