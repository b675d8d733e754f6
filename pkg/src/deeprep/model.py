"""Encoder-decoder model: parameter registry plus forward passes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .fusion import LayerStates, ParamAllocator, StackCache, StackParams, alloc_fusion, run_stack
from .tensor import Tensor
from .transformer import AttentionParams, FFNParams, LayerParams, causal_mask, embed, padding_mask


@dataclass
class ForwardResult:
    logits: Tensor
    enc: LayerStates
    dec: LayerStates


class Model:
    """Parameters and forward computation for one :class:`ModelConfig`.

    ``params`` maps names to trainable tensors in allocation order. The
    ``positional`` and ``dense_skips`` switches exist for invariance tests.
    """

    def __init__(self, config: ModelConfig, materialize: bool = True):
        config.validate()
        self.config = config
        self.positional = True
        self.dense_skips = True
        alloc = ParamAllocator(config.seed, T.resolve_dtype(config.precision), materialize)
        d, f = config.d_model, config.d_ff

        def attention(prefix: str) -> AttentionParams:
            return AttentionParams(*(alloc.matrix(f"{prefix}.{n}", d, d) for n in ("wq", "wk", "wv", "wo")))

        def layer(prefix: str, decoder: bool) -> LayerParams:
            self_attn = attention(f"{prefix}.self_attn")
            cross = attention(f"{prefix}.cross_attn") if decoder else None
            ffn = FFNParams(alloc.matrix(f"{prefix}.ffn.w1", d, f), alloc.const(f"{prefix}.ffn.b1", (f,), 0.0),
                            alloc.matrix(f"{prefix}.ffn.w2", f, d), alloc.const(f"{prefix}.ffn.b2", (d,), 0.0))
            lns = [alloc.ln(f"{prefix}.ln{j}", d) for j in range(3 if decoder else 2)]
            return LayerParams(self_attn, ffn, lns, cross)

        self.src_embed = alloc.matrix("src_embed", config.vocab_src, d)
        self.tgt_embed = alloc.matrix("tgt_embed", config.vocab_tgt, d)
        self.enc = StackParams([layer(f"enc.layer{l}", False) for l in range(1, config.L_enc + 1)])
        self.dec = StackParams([layer(f"dec.layer{l}", True) for l in range(1, config.L_dec + 1)])
        alloc_fusion(alloc, "enc", config, self.enc)
        alloc_fusion(alloc, "dec", config, self.dec)
        self.out_w = alloc.matrix("out.w", d, config.vocab_tgt)
        self.out_b = alloc.const("out.b", (config.vocab_tgt,), 0.0)
        self.params: dict[str, Tensor] = alloc.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise KeyError(f"parameter mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for n, p in self.params.items():
            a = np.asarray(arrays[n])
            if a.shape != p.shape:
                raise ValueError(f"{n}: shape {a.shape} does not match {p.shape}")
            p.data = a.astype(p.data.dtype, copy=True)

    # --- forward ------------------------------------------------------------

    def encode(self, src: np.ndarray, src_mask: np.ndarray) -> LayerStates:
        cfg = self.config
        h0 = embed(src, self.src_embed, cfg.max_len, positional=self.positional)
        return run_stack("enc", h0, self.enc, cfg, padding_mask(src_mask), dense_skips=self.dense_skips)

    def decode_states(self, tgt_in: np.ndarray, memory: Tensor, src_mask: np.ndarray,
                      cache: StackCache | None = None) -> LayerStates:
        cfg = self.config
        offset = 0 if cache is None else cache.length
        t = tgt_in.shape[1]
        h0 = embed(tgt_in, self.tgt_embed, cfg.max_len, offset=offset, positional=self.positional)
        states = run_stack("dec", h0, self.dec, cfg, causal_mask(t, offset=offset), memory=memory,
                           cross_mask=padding_mask(src_mask), cache=cache, dense_skips=self.dense_skips)
        if cache is not None:
            cache.length += t
        return states

    def project(self, h: Tensor) -> Tensor:
        return h @ self.out_w + self.out_b

    def forward(self, src: np.ndarray, src_mask: np.ndarray, tgt_in: np.ndarray) -> ForwardResult:
        enc = self.encode(src, src_mask)
        dec = self.decode_states(tgt_in, enc.final, src_mask)
        return ForwardResult(self.project(dec.final), enc, dec)
