"""Differentiable tensor operations.

Each function evaluates eagerly with numpy (2-D convolutions route
through the kernels module, so they pick up the numba path when active)
and records a backward closure on the returned node. Elementwise ops
follow numpy broadcasting; gradients are summed back over broadcast axes.

``forward_op`` exposes the same operations behind a string-tag dispatch,
which the gradient-check CLI uses to sweep the whole op set.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .autodiff import DomainError, Node, ShapeError, as_node, make_op_node


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over axes that were broadcast to produce an output."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(op_name, a, b):
    """Wrap operands; constant leaves adopt the other operand's dtype.

    Graphs are dtype-homogeneous (f32 by default, f64 for gradient
    checking); only non-differentiable constants are silently cast.
    """
    a, b = as_node(a), as_node(b)
    if a.value.dtype == b.value.dtype:
        return a, b
    if not a.requires_grad and not a.parents:
        return Node(a.value.astype(b.value.dtype)), b
    if not b.requires_grad and not b.parents:
        return a, Node(b.value.astype(a.value.dtype))
    raise ShapeError(f"{op_name}: mixed dtypes {a.value.dtype} vs {b.value.dtype}")


def add(a, b) -> Node:
    a, b = _binary("add", a, b)
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op_node(value, (a, b), bwd, "add")


def sub(a, b) -> Node:
    a, b = _binary("sub", a, b)
    try:
        value = a.value - b.value
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_op_node(value, (a, b), bwd, "sub")


def mul(a, b) -> Node:
    a, b = _binary("mul", a, b)
    try:
        value = a.value * b.value
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return make_op_node(value, (a, b), bwd, "mul")


def neg(a) -> Node:
    a = as_node(a)
    return make_op_node(-a.value, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Node:
    """Matrix product with numpy stacking semantics for leading axes."""
    a, b = _binary("matmul", a, b)
    if a.value.ndim < 1 or b.value.ndim < 1:
        raise ShapeError(f"matmul: operands must have ndim >= 1, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.value.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    value = a.value @ b.value

    def bwd(g):
        bt = np.swapaxes(b.value, -1, -2) if b.value.ndim > 1 else b.value
        at = np.swapaxes(a.value, -1, -2) if a.value.ndim > 1 else a.value
        if b.value.ndim == 1:
            ga = np.multiply.outer(g, bt) if g.ndim else g * bt
            ga = ga.reshape(a.shape) if ga.shape != a.shape else ga
        else:
            ga = g @ bt
        gb = at @ g if a.value.ndim > 1 else np.multiply.outer(at, g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op_node(value, (a, b), bwd, "matmul")


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0
    return make_op_node(np.where(mask, a.value, 0),
                        (a,), lambda g: (g * mask,), "relu")


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a) -> Node:
    """Tanh-approximation GELU: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    a = as_node(a)
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    value = 0.5 * x * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 0.134145 * x2)
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        return (g * local,)

    return make_op_node(value, (a,), bwd, "gelu")


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError("log: input must be strictly positive")
    return make_op_node(np.log(a.value), (a,), lambda g: (g / a.value,), "log")


def sqrt(a) -> Node:
    a = as_node(a)
    if np.any(a.value < 0):
        raise DomainError("sqrt: input must be non-negative")
    value = np.sqrt(a.value)
    return make_op_node(value, (a,), lambda g: (g / (2.0 * value),), "sqrt")


def reshape(a, shape) -> Node:
    a = as_node(a)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return make_op_node(value, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Node:
    a = as_node(a)
    n = a.value.ndim
    axes = tuple(ax % n for ax in axes)
    inverse = [0] * n
    for i, ax in enumerate(axes):
        inverse[ax] = i
    inverse = tuple(inverse)
    return make_op_node(a.value.transpose(axes), (a,),
                        lambda g: (g.transpose(inverse),), "transpose")


def concatenate(nodes, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("concatenate: need at least one input")
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concatenate: incompatible shapes {[n.shape for n in nodes]} on axis {axis}"
        ) from None
    sizes = [n.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op_node(value, tuple(nodes), bwd, "concatenate")


def slice_axis(a, axis, start=None, stop=None, step=None) -> Node:
    """Basic slicing along one axis (used to stride frames along time)."""
    a = as_node(a)
    key = [slice(None)] * a.value.ndim
    key[axis] = slice(start, stop, step)
    key = tuple(key)
    value = a.value[key]

    def bwd(g):
        full = np.zeros_like(a.value)
        full[key] = g
        return (full,)

    return make_op_node(value, (a,), bwd, "slice_axis")


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    axis = _norm_axis(axis, a.value.ndim)
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return make_op_node(value, (a,), bwd, "sum")


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    axis = _norm_axis(axis, a.value.ndim)
    value = a.value.mean(axis=axis, keepdims=keepdims)
    count = a.value.size if axis is None else int(np.prod([a.shape[ax] for ax in axis]))

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((np.broadcast_to(g, a.shape) / count).astype(a.dtype, copy=False),)

    return make_op_node(value, (a,), bwd, "mean")


def max_(a, axis, keepdims=False) -> Node:
    """Max over a single axis; ties route the gradient to the first max."""
    a = as_node(a)
    axis = int(axis) % a.value.ndim
    value = a.value.max(axis=axis, keepdims=keepdims)
    argmax = a.value.argmax(axis=axis)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.value)
        np.put_along_axis(full, np.expand_dims(argmax, axis),
                          np.ones((1,), a.dtype), axis=axis)
        return (full * g,)

    return make_op_node(value, (a,), bwd, "max")


def softmax(a, axis=-1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * value).sum(axis=axis, keepdims=True)
        return (value * (g - dot),)

    return make_op_node(value, (a,), bwd, "softmax")


def cross_entropy_with_logits(logits, labels) -> Node:
    """Per-sample cross-entropy: -log softmax(logits)[label].

    ``logits`` has shape (..., m); ``labels`` are integer class ids of
    shape (...). Uses the log-sum-exp stabilized form; the gradient is
    softmax(logits) - onehot(label), scaled by the incoming gradient.
    """
    logits = as_node(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(
            f"cross_entropy: labels shape {labels.shape} does not match logits {logits.shape}")
    m = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise DomainError(f"cross_entropy: labels must lie in [0, {m})")
    z = logits.value
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1, keepdims=True)) + zmax
    picked = np.take_along_axis(z, labels[..., None], axis=-1)
    value = (lse - picked)[..., 0]

    def bwd(g):
        p = np.exp(z - lse)
        np.put_along_axis(p, labels[..., None],
                          np.take_along_axis(p, labels[..., None], axis=-1) - 1.0, axis=-1)
        return (p * g[..., None],)

    return make_op_node(value, (logits,), bwd, "cross_entropy")


def _resolve_pad(H, W, KH, KW, stride, padding):
    """Per-side spatial padding for the requested policy.

    "same" keeps output spatial size at ceil(size / stride) (asymmetric
    when the total is odd, extra on the bottom/right); "valid" pads
    nothing; an int pads symmetrically.
    """
    if padding == "valid":
        return (0, 0), (0, 0)
    if padding == "same":
        out_h = -(-H // stride)
        out_w = -(-W // stride)
        total_h = max((out_h - 1) * stride + KH - H, 0)
        total_w = max((out_w - 1) * stride + KW - W, 0)
        return ((total_h // 2, total_h - total_h // 2),
                (total_w // 2, total_w - total_w // 2))
    p = int(padding)
    return (p, p), (p, p)


def conv2d(x, w, b, stride=1, padding="same") -> Node:
    """2-D convolution (cross-correlation) over (N, C, H, W) input.

    Shared weights across the leading axis; zero padding per
    ``_resolve_pad``. Forward and both backward passes run on the active
    kernels backend.
    """
    x, w, b = as_node(x), as_node(w), as_node(b)
    if x.value.ndim != 4 or w.value.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape}, {w.shape}")
    N, C, H, W = x.shape
    O, CK, KH, KW = w.shape
    if CK != C:
        raise ShapeError(f"conv2d: kernel expects {CK} channels, input has {C}")
    if b.shape != (O,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({O},)")
    (pt, pb), (pl, pr) = _resolve_pad(H, W, KH, KW, stride, padding)
    if H + pt + pb < KH or W + pl + pr < KW:
        raise ShapeError(f"conv2d: kernel {KH}x{KW} larger than padded input "
                         f"{H + pt + pb}x{W + pl + pr}")
    if pt or pb or pl or pr:
        xp = np.zeros((N, C, H + pt + pb, W + pl + pr), x.value.dtype)
        xp[:, :, pt:pt + H, pl:pl + W] = x.value
    else:
        xp = np.ascontiguousarray(x.value)
    value = kernels.conv2d_forward(xp, w.value, b.value, stride)

    def bwd(g):
        g = np.ascontiguousarray(g)
        dxp = kernels.conv2d_backward_input(g, w.value, stride, xp.shape[2], xp.shape[3])
        dx = dxp[:, :, pt:pt + H, pl:pl + W]
        dw, db = kernels.conv2d_backward_weights(xp, g, KH, KW, stride)
        return dx, dw, db

    return make_op_node(value, (x, w, b), bwd, "conv2d")


def conv1d(x, w, b, padding="same") -> Node:
    """Temporal convolution over (N, C, T), stride 1, zero padding."""
    x, w, b = as_node(x), as_node(w), as_node(b)
    if x.value.ndim != 3 or w.value.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-D input and kernel, got {x.shape}, {w.shape}")
    N, C, T = x.shape
    O, CK, K = w.shape
    if CK != C:
        raise ShapeError(f"conv1d: kernel expects {CK} channels, input has {C}")
    if padding == "same":
        pl, pr = (K - 1) // 2, K - 1 - (K - 1) // 2
    elif padding == "valid":
        pl = pr = 0
    else:
        pl = pr = int(padding)
    if T + pl + pr < K:
        raise ShapeError(f"conv1d: kernel {K} larger than padded length {T + pl + pr}")
    if pl or pr:
        xp = np.zeros((N, C, T + pl + pr), x.value.dtype)
        xp[:, :, pl:pl + T] = x.value
    else:
        xp = x.value
    OT = T + pl + pr - K + 1
    s0, s1, s2 = xp.strides
    win = np.lib.stride_tricks.as_strided(xp, (N, C, K, OT), (s0, s1, s2, s2))
    value = np.einsum("ock,nckt->not", w.value, win, optimize=True) + b.value[None, :, None]

    def bwd(g):
        dw = np.einsum("not,nckt->ock", g, win, optimize=True)
        db = g.sum(axis=(0, 2))
        dxp = np.zeros_like(xp)
        for k in range(K):
            dxp[:, :, k:k + OT] += np.einsum("ock,not->nct", w.value[:, :, k:k + 1], g,
                                             optimize=True)
        return dxp[:, :, pl:pl + T], dw, db

    return make_op_node(value.astype(x.dtype, copy=False), (x, w, b), bwd, "conv1d")


def layer_norm(x, scale, offset, eps=1e-5) -> Node:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, scale, offset = as_node(x), as_node(scale), as_node(offset)
    d = x.shape[-1]
    if scale.shape != (d,) or offset.shape != (d,):
        raise ShapeError(f"layer_norm: scale/offset must have shape ({d},), "
                         f"got {scale.shape}, {offset.shape}")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = xhat * scale.value + offset.value

    def bwd(g):
        dxhat = g * scale.value
        dscale = (g * xhat).sum(axis=tuple(range(g.ndim - 1)))
        doffset = g.sum(axis=tuple(range(g.ndim - 1)))
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx.astype(x.dtype, copy=False), dscale, doffset

    return make_op_node(value, (x, scale, offset), bwd, "layer_norm")


def embedding(tokens, w, b, positional) -> Node:
    """Linear projection plus an additive positional table.

    ``tokens`` is (..., S, d_in), ``positional`` is (S, d_out); the table
    broadcasts over leading axes.
    """
    tokens, positional = as_node(tokens), as_node(positional)
    if tokens.shape[-2] != positional.shape[0]:
        raise ShapeError(f"embedding: sequence length {tokens.shape[-2]} does not match "
                         f"positional table {positional.shape}")
    return add(add(matmul(tokens, w), b), positional)


def multi_head_attention(x, wq, bq, wk, wv, bv, wo, bo, n_heads) -> Node:
    """Multi-head scaled-dot-product self-attention over (..., S, d).

    The key projection carries no bias: a shared key offset shifts every
    score row uniformly, which softmax cancels, so such a bias would be a
    dead parameter.
    """
    x = as_node(x)
    d = x.shape[-1]
    if d % n_heads:
        raise ShapeError(f"attention: model width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    lead = x.shape[:-2]
    S = x.shape[-2]

    def split(t):
        t = reshape(t, lead + (S, n_heads, dh))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(t, axes)  # (..., heads, S, dh)

    q = split(add(matmul(x, wq), bq))
    k = split(matmul(x, wk))
    v = split(add(matmul(x, wv), bv))
    kt = transpose(k, tuple(range(k.value.ndim - 2)) + (k.value.ndim - 1, k.value.ndim - 2))
    scores = mul(matmul(q, kt), 1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = transpose(ctx, axes)
    ctx = reshape(ctx, lead + (S, d))
    return add(matmul(ctx, wo), bo)


OP_REGISTRY = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "relu": relu,
    "gelu": gelu,
    "log": log,
    "sqrt": sqrt,
    "reshape": reshape,
    "transpose": transpose,
    "concatenate": concatenate,
    "slice_axis": slice_axis,
    "sum": sum_,
    "mean": mean,
    "max": max_,
    "softmax": softmax,
    "cross_entropy": cross_entropy_with_logits,
    "conv2d": conv2d,
    "conv1d": conv1d,
    "layer_norm": layer_norm,
    "embedding": embedding,
    "attention": multi_head_attention,
}


def forward_op(op_tag: str, inputs, **attrs) -> Node:
    """Tag-dispatched op application (single entry point over the op set)."""
    if op_tag not in OP_REGISTRY:
        raise KeyError(f"unknown op tag {op_tag!r}; known: {sorted(OP_REGISTRY)}")
    fn = OP_REGISTRY[op_tag]
    if op_tag == "concatenate":
        return fn(inputs, **attrs)
    return fn(*inputs, **attrs)
