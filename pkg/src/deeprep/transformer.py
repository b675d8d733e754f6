"""Post-norm Transformer building blocks.

Layer functions take the query-side input and the key/value source as separate
tensors so the fusion strategies can rewire what a layer reads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor


@dataclass
class AttentionParams:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


@dataclass
class FFNParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class LNParams:
    gain: Tensor
    bias: Tensor


@dataclass
class LayerParams:
    self_attn: AttentionParams
    ffn: FFNParams
    ln: list[LNParams]
    cross_attn: AttentionParams | None = None


@lru_cache(maxsize=256)
def positional_encoding(t: int, d: int, offset: int = 0, dtype=np.float32) -> np.ndarray:
    """Sinusoidal encodings for positions ``offset .. offset+t-1`` (read-only array)."""
    pos = np.arange(offset, offset + t, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)
    pe.flags.writeable = False
    return pe


def embed(tokens: np.ndarray, table: Tensor, max_len: int | None = None, offset: int = 0,
          positional: bool = True) -> Tensor:
    tokens = np.asarray(tokens)
    b, t = tokens.shape
    if max_len is not None and offset + t > max_len:
        raise ValueError(f"sequence of length {offset + t} exceeds max_len={max_len}")
    d = table.shape[1]
    x = T.scale(T.embedding(table, tokens), math.sqrt(d))
    if not positional:
        return x
    return x + Tensor(positional_encoding(t, d, offset, table.data.dtype.type))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(T.reshape(x, (b, t, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, t, h * dh))


def project_query(q_in: Tensor, wq: Tensor, n_heads: int) -> Tensor:
    return _split_heads(q_in @ wq, n_heads)


def attend(qh: Tensor, k_in: Tensor, v_in: Tensor, mask, wk: Tensor, wv: Tensor, wo: Tensor) -> Tensor:
    """Scaled dot-product attention from pre-projected, head-split queries."""
    n_heads, dh = qh.shape[1], qh.shape[3]
    kh = _split_heads(k_in @ wk, n_heads)
    vh = _split_heads(v_in @ wv, n_heads)
    scores = T.scale(qh @ T.transpose(kh, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    weights = T.softmax_masked(scores, mask)
    return _merge_heads(weights @ vh) @ wo


def multi_head_attention(q_in: Tensor, k_in: Tensor, v_in: Tensor, mask,
                         params: AttentionParams, n_heads: int) -> Tensor:
    """Multi-head attention without residual or normalization.

    ``mask`` is a boolean keep-mask broadcastable to ``[b, n_heads, tq, tk]``.
    """
    d = q_in.shape[-1]
    if d % n_heads:
        raise DimensionError(f"d_model={d} not divisible by n_heads={n_heads}")
    if k_in.shape != v_in.shape or k_in.shape[0] != q_in.shape[0] or k_in.shape[-1] != d:
        raise DimensionError(f"attention inputs q {q_in.shape}, k {k_in.shape}, v {v_in.shape} disagree")
    qh = project_query(q_in, params.wq, n_heads)
    return attend(qh, k_in, v_in, mask, params.wk, params.wv, params.wo)


def feed_forward(x: Tensor, p: FFNParams) -> Tensor:
    return T.relu(x @ p.w1 + p.b1) @ p.w2 + p.b2


def layer_norm(x: Tensor, p: LNParams, eps: float) -> Tensor:
    return T.layer_norm(x, p.gain, p.bias, eps)


def self_attention_sublayer(inp: Tensor, self_kv: Tensor, mask, params: LayerParams, n_heads: int,
                            eps: float = 1e-6) -> Tensor:
    return layer_norm(multi_head_attention(inp, self_kv, self_kv, mask, params.self_attn, n_heads) + inp,
                      params.ln[0], eps)


def encoder_layer(inp: Tensor, self_kv: Tensor, mask, params: LayerParams, n_heads: int,
                  eps: float = 1e-6, c: Tensor | None = None) -> Tensor:
    """C = LN(Att(inp, kv, kv) + inp); H = LN(FFN(C) + C).

    A precomputed ``c`` (from multi-layer attention) skips the first sub-layer.
    """
    if inp.shape[-1] != self_kv.shape[-1]:
        raise DimensionError(f"encoder_layer: input {inp.shape} vs key/value {self_kv.shape}")
    if c is None:
        c = self_attention_sublayer(inp, self_kv, mask, params, n_heads, eps)
    return layer_norm(feed_forward(c, params.ffn) + c, params.ln[1], eps)


def decoder_layer(inp: Tensor, self_kv: Tensor, memory: Tensor, self_mask, cross_mask,
                  params: LayerParams, n_heads: int, eps: float = 1e-6,
                  c: Tensor | None = None) -> Tensor:
    """Masked self-attention, cross-attention over ``memory``, then FFN; each post-normed."""
    if params.cross_attn is None:
        raise ValueError("decoder_layer needs cross-attention parameters")
    if inp.shape[-1] != self_kv.shape[-1] or memory.shape[-1] != inp.shape[-1]:
        raise DimensionError(
            f"decoder_layer: input {inp.shape}, key/value {self_kv.shape}, memory {memory.shape}")
    if c is None:
        c = self_attention_sublayer(inp, self_kv, self_mask, params, n_heads, eps)
    x = multi_head_attention(c, memory, memory, cross_mask, params.cross_attn, n_heads)
    dd = layer_norm(x + c, params.ln[1], eps)
    return layer_norm(feed_forward(dd, params.ffn) + dd, params.ln[2], eps)


def padding_mask(keep: np.ndarray) -> np.ndarray:
    """Key keep-mask ``[b, tk]`` -> broadcastable ``[b, 1, 1, tk]``."""
    return np.asarray(keep, bool)[:, None, None, :]


def causal_mask(tq: int, tk: int | None = None, offset: int = 0) -> np.ndarray:
    """Query at absolute position ``offset + i`` may see keys ``0 .. offset + i``."""
    tk = offset + tq if tk is None else tk
    q = np.arange(offset, offset + tq)[:, None]
    k = np.arange(tk)[None, :]
    return (k <= q)[None, None]
