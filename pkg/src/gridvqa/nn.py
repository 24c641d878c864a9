"""Transformer building blocks shared by the vision and text encoders."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02
MASK_VALUE = -1e9


def normal(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(*shape: int) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_block(params: dict, prefix: str, dim: int, mlp_ratio: int, rng: np.random.Generator) -> None:
    hidden = dim * mlp_ratio
    params[f"{prefix}.ln1.g"] = ones(dim)
    params[f"{prefix}.ln1.b"] = zeros(dim)
    params[f"{prefix}.attn.qkv.w"] = normal(rng, dim, 3 * dim)
    params[f"{prefix}.attn.qkv.b"] = zeros(3 * dim)
    params[f"{prefix}.attn.out.w"] = normal(rng, dim, dim)
    params[f"{prefix}.attn.out.b"] = zeros(dim)
    params[f"{prefix}.ln2.g"] = ones(dim)
    params[f"{prefix}.ln2.b"] = zeros(dim)
    params[f"{prefix}.mlp.fc1.w"] = normal(rng, dim, hidden)
    params[f"{prefix}.mlp.fc1.b"] = zeros(hidden)
    params[f"{prefix}.mlp.fc2.w"] = normal(rng, hidden, dim)
    params[f"{prefix}.mlp.fc2.b"] = zeros(dim)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = T.matmul(x, w)
    return y if b is None else y + b


def split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., s, d) -> (..., heads, s, d / heads)
    *lead, s, d = x.shape
    x = x.reshape(*lead, s, heads, d // heads)
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(*axes)


def merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(*axes).reshape(*lead, s, h * dh)


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """Scaled dot-product attention over head-split tensors; returns (output, weights)."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = T.matmul(q, k.T) * scale
    if mask is not None:
        scores = scores + mask
    weights = T.softmax_rows(scores)
    return T.matmul(weights, v), weights


def self_attention(x: Tensor, params: dict, prefix: str, heads: int, mask=None) -> Tensor:
    d = x.shape[-1]
    qkv = linear(x, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    q = split_heads(qkv[..., :d], heads)
    k = split_heads(qkv[..., d : 2 * d], heads)
    v = split_heads(qkv[..., 2 * d :], heads)
    out, _ = attention(q, k, v, mask)
    return linear(merge_heads(out), params[f"{prefix}.out.w"], params[f"{prefix}.out.b"])


def block(x: Tensor, params: dict, prefix: str, heads: int, mask=None) -> Tensor:
    """Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x))."""
    h = T.layer_norm(x, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    x = x + self_attention(h, params, f"{prefix}.attn", heads, mask)
    h = T.layer_norm(x, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])
    h = T.gelu(linear(h, params[f"{prefix}.mlp.fc1.w"], params[f"{prefix}.mlp.fc1.b"]))
    return x + linear(h, params[f"{prefix}.mlp.fc2.w"], params[f"{prefix}.mlp.fc2.b"])


def key_padding_mask(lengths: list[int], width: int) -> np.ndarray:
    """Additive mask of shape (B, 1, 1, width) hiding positions >= length."""
    mask = np.zeros((len(lengths), 1, 1, width), dtype=np.float32)
    for i, n in enumerate(lengths):
        mask[i, ..., n:] = MASK_VALUE
    return mask
