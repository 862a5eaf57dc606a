"""Canonical gradient-check sweep over the whole op set.

Each entry builds a scalar-valued graph from random inputs and compares
the analytic gradient against central finite differences. Inputs for ops
with kinks (relu, max) are nudged away from the non-differentiable set so
the finite-difference oracle stays valid.
"""

from __future__ import annotations

import numpy as np

from . import model, ops
from .autodiff import GradCheckReport, grad_check
from .objective import Batch, LongLossParams, long_loss
from .rng import Rng


def _away_from_zero(x: np.ndarray, margin: float = 0.05) -> np.ndarray:
    return x + np.sign(x) * margin + (x == 0) * margin


def _case_add(r):
    return [r.normal((3, 4), dtype=np.float64), r.normal((3, 4), dtype=np.float64)], \
        lambda l: ops.mean(ops.add(l[0], l[1]))


def _case_sub(r):
    return [r.normal((3, 4), dtype=np.float64), r.normal((4,), dtype=np.float64)], \
        lambda l: ops.mean(ops.sub(l[0], l[1]))


def _case_mul(r):
    return [r.normal((2, 3), dtype=np.float64), r.normal((2, 3), dtype=np.float64)], \
        lambda l: ops.mean(ops.mul(l[0], l[1]))


def _case_neg(r):
    return [r.normal((5,), dtype=np.float64)], lambda l: ops.sum_(ops.neg(l[0]))


def _case_matmul(r):
    return [r.normal((3, 4), dtype=np.float64), r.normal((4, 2), dtype=np.float64)], \
        lambda l: ops.mean(ops.matmul(l[0], l[1]))


def _case_matmul_batched(r):
    return [r.normal((2, 3, 4), dtype=np.float64), r.normal((4, 2), dtype=np.float64)], \
        lambda l: ops.mean(ops.matmul(l[0], l[1]))


def _case_relu(r):
    x = _away_from_zero(r.normal((4, 4), dtype=np.float64))
    return [x], lambda l: ops.mean(ops.relu(l[0]))


def _case_gelu(r):
    return [r.normal((4, 4), dtype=np.float64)], lambda l: ops.mean(ops.gelu(l[0]))


def _case_log(r):
    x = np.abs(r.normal((3, 3), dtype=np.float64)) + 0.5
    return [x], lambda l: ops.mean(ops.log(l[0]))


def _case_sqrt(r):
    x = np.abs(r.normal((3, 3), dtype=np.float64)) + 0.5
    return [x], lambda l: ops.mean(ops.sqrt(l[0]))


def _case_reshape(r):
    return [r.normal((2, 6), dtype=np.float64)], \
        lambda l: ops.mean(ops.mul(ops.reshape(l[0], (3, 4)), 2.0))


def _case_transpose(r):
    return [r.normal((2, 3, 4), dtype=np.float64)], \
        lambda l: ops.mean(ops.mul(ops.transpose(l[0], (1, 2, 0)), 3.0))


def _case_concatenate(r):
    return [r.normal((2, 3), dtype=np.float64), r.normal((2, 2), dtype=np.float64)], \
        lambda l: ops.mean(ops.mul(ops.concatenate(l, axis=1), 2.0))


def _case_slice(r):
    return [r.normal((6, 3), dtype=np.float64)], \
        lambda l: ops.mean(ops.mul(ops.slice_axis(l[0], axis=0, step=2), 2.0))


def _case_sum(r):
    return [r.normal((3, 4), dtype=np.float64)], \
        lambda l: ops.mean(ops.mul(ops.sum_(l[0], axis=1), 0.5))


def _case_mean_axis(r):
    return [r.normal((3, 4, 2), dtype=np.float64)], \
        lambda l: ops.sum_(ops.mul(ops.mean(l[0], axis=(1, 2)), 2.0))


def _case_max(r):
    x = r.normal((4, 5), dtype=np.float64)
    x += np.arange(20, dtype=np.float64).reshape(4, 5) * 1e-3  # break ties
    return [x], lambda l: ops.mean(ops.mul(ops.max_(l[0], axis=1), 2.0))


def _case_softmax(r):
    return [r.normal((3, 5), dtype=np.float64)], \
        lambda l: ops.mean(ops.mul(ops.softmax(l[0], axis=-1),
                                   np.arange(5, dtype=np.float64)))


def _case_cross_entropy(r):
    x = r.normal((4, 6), dtype=np.float64)
    labels = np.array([0, 2, 5, 3])
    return [x], lambda l: ops.mean(ops.cross_entropy_with_logits(l[0], labels))


def _case_conv2d(r):
    return [r.normal((2, 2, 6, 6), dtype=np.float64),
            r.normal((3, 2, 3, 3), dtype=np.float64),
            r.normal((3,), dtype=np.float64)], \
        lambda l: ops.mean(ops.conv2d(l[0], l[1], l[2], stride=2, padding="same"))


def _case_conv2d_valid(r):
    return [r.normal((1, 2, 5, 5), dtype=np.float64),
            r.normal((2, 2, 3, 3), dtype=np.float64),
            r.normal((2,), dtype=np.float64)], \
        lambda l: ops.mean(ops.conv2d(l[0], l[1], l[2], stride=1, padding="valid"))


def _case_conv1d(r):
    return [r.normal((2, 3, 7), dtype=np.float64),
            r.normal((4, 3, 3), dtype=np.float64),
            r.normal((4,), dtype=np.float64)], \
        lambda l: ops.mean(ops.conv1d(l[0], l[1], l[2], padding="same"))


def _case_layer_norm(r):
    return [r.normal((3, 4, 6), dtype=np.float64),
            r.normal((6,), dtype=np.float64),
            r.normal((6,), dtype=np.float64)], \
        lambda l: ops.mean(ops.mul(ops.layer_norm(l[0], l[1], l[2]),
                                   np.arange(6, dtype=np.float64)))


def _case_embedding(r):
    return [r.normal((2, 3, 4), dtype=np.float64),
            r.normal((4, 5), dtype=np.float64),
            r.normal((5,), dtype=np.float64),
            r.normal((3, 5), dtype=np.float64)], \
        lambda l: ops.mean(ops.mul(ops.embedding(l[0], l[1], l[2], l[3]), 2.0))


def _case_attention(r):
    d = 4
    args = [r.normal((2, 3, d), dtype=np.float64),
            r.normal((d, d), dtype=np.float64), r.normal((d,), dtype=np.float64),
            r.normal((d, d), dtype=np.float64),
            r.normal((d, d), dtype=np.float64), r.normal((d,), dtype=np.float64),
            r.normal((d, d), dtype=np.float64), r.normal((d,), dtype=np.float64)]
    return args, lambda l: ops.mean(ops.multi_head_attention(*l, n_heads=2))


OP_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "neg": _case_neg,
    "matmul": _case_matmul,
    "matmul_batched": _case_matmul_batched,
    "relu": _case_relu,
    "gelu": _case_gelu,
    "log": _case_log,
    "sqrt": _case_sqrt,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "concatenate": _case_concatenate,
    "slice_axis": _case_slice,
    "sum": _case_sum,
    "mean": _case_mean_axis,
    "max": _case_max,
    "softmax": _case_softmax,
    "cross_entropy": _case_cross_entropy,
    "conv2d": _case_conv2d,
    "conv2d_valid": _case_conv2d_valid,
    "conv1d": _case_conv1d,
    "layer_norm": _case_layer_norm,
    "embedding": _case_embedding,
    "attention": _case_attention,
}


def check_op(name: str, seed: int, tol: float = 1e-4,
             dtype=np.float64) -> GradCheckReport:
    inputs, builder = OP_CASES[name](Rng(seed))
    inputs = [np.asarray(x, dtype=dtype) for x in inputs]
    return grad_check(builder, inputs, tol=tol)


def tiny_model_config() -> model.SftConfig:
    """Smallest config that still exercises every architectural piece.

    d_model stays at 8: with narrower widths a layer-norm over near-equal
    features turns close to singular, where finite differences cannot
    certify gradients at tight tolerances.
    """
    return model.SftConfig(k=2, slow_stride=2, slow_channels=2, fast_channels=2,
                           d_model=8, n_heads=2, n_encoders=4, ffn_dim=8,
                           n_classes=3, input_hw=(8, 8), in_channels=1)


def check_composite(seed: int, tol: float = 1e-4, dtype=np.float64,
                    alpha: float = 0.5) -> GradCheckReport:
    """Full forward + LongLoss gradient check w.r.t. every parameter tensor
    on a 2-clip batch."""
    cfg = tiny_model_config()
    rng = Rng(seed)
    params = model.init_params(cfg, rng.child(0), dtype=dtype)
    frames = rng.child(1).normal((2, cfg.k, cfg.in_channels) + cfg.input_hw,
                                 scale=0.5, dtype=dtype)
    labels = np.array([seed % cfg.n_classes, (seed + 1) % cfg.n_classes])
    distances = np.array([6.0, 18.0])
    names = [n for n, _ in model._param_shapes(cfg)]
    lp = LongLossParams(alpha=alpha)

    def builder(leaves):
        p = model.SftParams(cfg=cfg, tensors=dict(zip(names, leaves)))
        logits = model.sft_forward(frames, p)
        return long_loss(Batch(logits, labels, distances), lp)

    return grad_check(builder, [params[n].value for n in names], tol=tol)


def run_suite(seeds, tol: float = 1e-4, dtype=np.float64,
              include_composite: bool = True, composite_seeds=None):
    """Check every op case on every seed; yields (name, seed, report)."""
    for name in OP_CASES:
        for seed in seeds:
            yield name, seed, check_op(name, seed, tol=tol, dtype=dtype)
    if include_composite:
        for seed in (composite_seeds if composite_seeds is not None else seeds):
            yield "sft_longloss_composite", seed, check_composite(seed, tol=tol, dtype=dtype)
