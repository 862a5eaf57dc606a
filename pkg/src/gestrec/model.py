"""Two-pathway gesture network with a transformer head.

The slow pathway sees temporally strided frames at higher channel
capacity (appearance); the fast pathway sees every frame at lower
capacity plus a temporal convolution (motion). Both token streams are
projected to a common width, tagged with a learned pathway embedding,
and concatenated along the sequence axis (slow tokens first) so the
transformer can attend across pathways. Four pre-norm encoder blocks,
mean pooling over the sequence, and an affine classifier produce the
class scores; prediction is the argmax of their softmax.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autodiff import Node, as_node, no_grad, parameter
from .errors import BadMagicError, HeaderMismatchError, TruncatedPayloadError
from .rng import Rng


@dataclass
class SftConfig:
    k: int = 8                       # input frames per clip
    slow_stride: int = 4             # temporal stride of the slow pathway
    slow_channels: int = 16
    fast_channels: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_encoders: int = 4
    ffn_dim: int = 128
    n_classes: int = 10
    input_hw: tuple[int, int] = (32, 32)
    in_channels: int = 1

    def __post_init__(self):
        if self.k % self.slow_stride:
            raise ValueError(f"k ({self.k}) must be divisible by slow_stride "
                             f"({self.slow_stride})")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model ({self.d_model}) must be divisible by n_heads "
                             f"({self.n_heads})")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def seq_len(self) -> int:
        return self.k // self.slow_stride + self.k


# Field order of the packed config block in checkpoints.
_CONFIG_FIELDS = ("k", "slow_stride", "slow_channels", "fast_channels", "d_model",
                  "n_heads", "n_encoders", "ffn_dim", "n_classes", "in_channels")


@dataclass
class SftParams:
    """All learnable tensors, keyed by name in the declared (file) order."""

    cfg: SftConfig
    tensors: dict[str, Node] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Node:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()


def _param_shapes(cfg: SftConfig) -> list[tuple[str, tuple[int, ...]]]:
    C, sc, fc, d = cfg.in_channels, cfg.slow_channels, cfg.fast_channels, cfg.d_model
    shapes = [
        ("slow_conv1_w", (sc, C, 3, 3)), ("slow_conv1_b", (sc,)),
        ("slow_conv2_w", (sc, sc, 3, 3)), ("slow_conv2_b", (sc,)),
        ("fast_conv1_w", (fc, C, 3, 3)), ("fast_conv1_b", (fc,)),
        ("fast_conv2_w", (fc, fc, 3, 3)), ("fast_conv2_b", (fc,)),
        ("fast_tconv_w", (fc, fc, 3)), ("fast_tconv_b", (fc,)),
        ("slow_proj_w", (sc, d)), ("slow_proj_b", (d,)),
        ("fast_proj_w", (fc, d)), ("fast_proj_b", (d,)),
        ("pathway_embed", (2, d)),
        ("embed_w", (d, d)), ("embed_b", (d,)),
        ("pos_table", (cfg.seq_len, d)),
    ]
    for i in range(cfg.n_encoders):
        shapes += [
            (f"enc{i}_ln1_scale", (d,)), (f"enc{i}_ln1_offset", (d,)),
            (f"enc{i}_wq", (d, d)), (f"enc{i}_bq", (d,)),
            (f"enc{i}_wk", (d, d)),          # no key bias: softmax cancels it
            (f"enc{i}_wv", (d, d)), (f"enc{i}_bv", (d,)),
            (f"enc{i}_wo", (d, d)), (f"enc{i}_bo", (d,)),
            (f"enc{i}_ln2_scale", (d,)), (f"enc{i}_ln2_offset", (d,)),
            (f"enc{i}_ffn1_w", (d, cfg.ffn_dim)), (f"enc{i}_ffn1_b", (cfg.ffn_dim,)),
            (f"enc{i}_ffn2_w", (cfg.ffn_dim, d)), (f"enc{i}_ffn2_b", (d,)),
        ]
    shapes += [
        ("final_ln_scale", (d,)), ("final_ln_offset", (d,)),
        ("cls_w", (d, cfg.n_classes)), ("cls_b", (cfg.n_classes,)),
    ]
    return shapes


def init_params(cfg: SftConfig, rng: Rng, dtype=np.float32) -> SftParams:
    """He-style fan-in initialization for weights, zeros for biases,
    ones/zeros for norm scales/offsets, small-noise positional tables."""
    tensors: dict[str, Node] = {}
    for name, shape in _param_shapes(cfg):
        if name.endswith("_b") or name.endswith("_offset"):
            value = np.zeros(shape, dtype)
        elif name.endswith("_scale"):
            value = np.ones(shape, dtype)
        elif name in ("pos_table", "pathway_embed"):
            value = rng.normal(shape, scale=0.02, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            if name.endswith("conv1_w") or name.endswith("conv2_w") or "tconv" in name:
                fan_in = int(np.prod(shape[1:]))
            value = rng.normal(shape, scale=float(np.sqrt(2.0 / fan_in)), dtype=dtype)
        tensors[name] = parameter(value, dtype=dtype)
    return SftParams(cfg=cfg, tensors=tensors)


def _conv_tokens(x: Node, w1, b1, w2, b2) -> Node:
    """Two stride-2 conv+relu blocks, then global spatial average pooling."""
    h = ops.relu(ops.conv2d(x, w1, b1, stride=2, padding="same"))
    h = ops.relu(ops.conv2d(h, w2, b2, stride=2, padding="same"))
    return ops.mean(h, axis=(2, 3))


def _ensure_batched(frames) -> tuple[Node, bool]:
    node = as_node(frames)
    if node.value.ndim == 4:
        return ops.reshape(node, (1,) + node.shape), True
    if node.value.ndim != 5:
        raise ValueError(f"expected (k, C, h, w) or (B, k, C, h, w), got {node.shape}")
    return node, False


def slow_pathway(frames, params: SftParams) -> Node:
    """Strided-frame tokens, shape (B, k/stride, slow_channels)."""
    cfg = params.cfg
    x, squeeze = _ensure_batched(frames)
    B, k, C, h, w = x.shape
    xs = ops.slice_axis(x, axis=1, step=cfg.slow_stride)
    kept = xs.shape[1]
    flat = ops.reshape(xs, (B * kept, C, h, w))
    tokens = _conv_tokens(flat, params["slow_conv1_w"], params["slow_conv1_b"],
                          params["slow_conv2_w"], params["slow_conv2_b"])
    tokens = ops.reshape(tokens, (B, kept, cfg.slow_channels))
    return ops.reshape(tokens, tokens.shape[1:]) if squeeze else tokens


def fast_pathway(frames, params: SftParams) -> Node:
    """Every-frame tokens plus a temporal conv, shape (B, k, fast_channels)."""
    cfg = params.cfg
    x, squeeze = _ensure_batched(frames)
    B, k, C, h, w = x.shape
    flat = ops.reshape(x, (B * k, C, h, w))
    tokens = _conv_tokens(flat, params["fast_conv1_w"], params["fast_conv1_b"],
                          params["fast_conv2_w"], params["fast_conv2_b"])
    tokens = ops.reshape(tokens, (B, k, cfg.fast_channels))
    seq = ops.transpose(tokens, (0, 2, 1))
    seq = ops.conv1d(seq, params["fast_tconv_w"], params["fast_tconv_b"], padding="same")
    tokens = ops.transpose(seq, (0, 2, 1))
    return ops.reshape(tokens, tokens.shape[1:]) if squeeze else tokens


def fuse(slow_tokens, fast_tokens, params: SftParams) -> Node:
    """Project both token sets to d_model, tag with pathway embeddings,
    concatenate along the sequence axis (slow first)."""
    slow_tokens, fast_tokens = as_node(slow_tokens), as_node(fast_tokens)
    squeeze = slow_tokens.value.ndim == 2
    if squeeze:
        slow_tokens = ops.reshape(slow_tokens, (1,) + slow_tokens.shape)
        fast_tokens = ops.reshape(fast_tokens, (1,) + fast_tokens.shape)
    pe = params["pathway_embed"]
    s = ops.add(ops.add(ops.matmul(slow_tokens, params["slow_proj_w"]),
                        params["slow_proj_b"]),
                ops.slice_axis(pe, axis=0, start=0, stop=1))
    f = ops.add(ops.add(ops.matmul(fast_tokens, params["fast_proj_w"]),
                        params["fast_proj_b"]),
                ops.slice_axis(pe, axis=0, start=1, stop=2))
    seq = ops.concatenate([s, f], axis=1)
    return ops.reshape(seq, seq.shape[1:]) if squeeze else seq


def transformer_head(seq, params: SftParams) -> Node:
    """Embedding + positional table, pre-norm encoder stack, mean pooling,
    affine classifier. Returns logits of shape (B, n_classes)."""
    cfg = params.cfg
    seq = as_node(seq)
    squeeze = seq.value.ndim == 2
    if squeeze:
        seq = ops.reshape(seq, (1,) + seq.shape)
    x = ops.embedding(seq, params["embed_w"], params["embed_b"], params["pos_table"])
    for i in range(cfg.n_encoders):
        attn_in = ops.layer_norm(x, params[f"enc{i}_ln1_scale"], params[f"enc{i}_ln1_offset"])
        attn = ops.multi_head_attention(
            attn_in,
            params[f"enc{i}_wq"], params[f"enc{i}_bq"],
            params[f"enc{i}_wk"],
            params[f"enc{i}_wv"], params[f"enc{i}_bv"],
            params[f"enc{i}_wo"], params[f"enc{i}_bo"],
            cfg.n_heads)
        x = ops.add(x, attn)
        ffn_in = ops.layer_norm(x, params[f"enc{i}_ln2_scale"], params[f"enc{i}_ln2_offset"])
        h = ops.gelu(ops.add(ops.matmul(ffn_in, params[f"enc{i}_ffn1_w"]),
                             params[f"enc{i}_ffn1_b"]))
        h = ops.add(ops.matmul(h, params[f"enc{i}_ffn2_w"]), params[f"enc{i}_ffn2_b"])
        x = ops.add(x, h)
    x = ops.layer_norm(x, params["final_ln_scale"], params["final_ln_offset"])
    pooled = ops.mean(x, axis=1)
    logits = ops.add(ops.matmul(pooled, params["cls_w"]), params["cls_b"])
    return ops.reshape(logits, (cfg.n_classes,)) if squeeze else logits


def sft_forward(frames, params: SftParams) -> Node:
    """Full forward pass: frames (B, k, C, h, w) -> logits (B, n_classes)."""
    x, squeeze = _ensure_batched(frames)
    slow = slow_pathway(x, params)
    fast = fast_pathway(x, params)
    seq = fuse(slow, fast, params)
    logits = transformer_head(seq, params)
    return ops.reshape(logits, (params.cfg.n_classes,)) if squeeze else logits


def predict(clip_frames, params: SftParams) -> tuple[int, np.ndarray]:
    """Class decision for one preprocessed clip (k, C, h, w).

    Returns (argmax class id, softmax probabilities); ties resolve to the
    lowest class id.
    """
    with no_grad():
        logits = sft_forward(clip_frames, params)
        probs = ops.softmax(logits, axis=-1).value
    return int(np.argmax(probs)), probs


# --- checkpoint format -------------------------------------------------------
# magic "SFTW" | u32 version=1 | 12 x u32 config block (k, slow_stride,
# slow_channels, fast_channels, d_model, n_heads, n_encoders, ffn_dim,
# n_classes, in_channels, input_h, input_w) | parameter tensors in
# _param_shapes order as raw little-endian f32. All integers little-endian.

_CKPT_MAGIC = b"SFTW"
_CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sI12I")


def save_checkpoint(params: SftParams, path) -> None:
    cfg = params.cfg
    head = _CKPT_HEAD.pack(_CKPT_MAGIC, _CKPT_VERSION,
                           *[getattr(cfg, f) for f in _CONFIG_FIELDS],
                           cfg.input_hw[0], cfg.input_hw[1])
    with open(path, "wb") as fh:
        fh.write(head)
        for name, shape in _param_shapes(cfg):
            tensor = params[name].value
            if tuple(tensor.shape) != tuple(shape):
                raise HeaderMismatchError(f"parameter {name} has shape {tensor.shape}, "
                                          f"config implies {shape}")
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_checkpoint(path) -> SftParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _CKPT_HEAD.size:
        raise TruncatedPayloadError(f"{path}: shorter than the {_CKPT_HEAD.size}-byte header")
    fields = _CKPT_HEAD.unpack_from(raw)
    magic, version = fields[0], fields[1]
    if magic != _CKPT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {_CKPT_MAGIC!r}")
    if version != _CKPT_VERSION:
        raise HeaderMismatchError(f"{path}: unsupported checkpoint version {version}")
    cfg_vals = fields[2:]
    cfg = SftConfig(**dict(zip(_CONFIG_FIELDS, cfg_vals[:10])),
                    input_hw=(cfg_vals[10], cfg_vals[11]))
    shapes = _param_shapes(cfg)
    expected = sum(int(np.prod(s)) for _, s in shapes) * 4
    payload = raw[_CKPT_HEAD.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"{path}: payload holds {len(payload)} bytes, "
                                    f"config requires {expected}")
    if len(payload) > expected:
        raise HeaderMismatchError(f"{path}: {len(payload) - expected} trailing bytes "
                                  "beyond declared parameters")
    tensors: dict[str, Node] = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype="<f4", count=count,
                            offset=offset).reshape(shape).copy()
        tensors[name] = parameter(arr, dtype=np.float32)
        offset += count * 4
    return SftParams(cfg=cfg, tensors=tensors)
