"""Plain-numpy reference computations, written without the library's tensor ops."""

import math

import numpy as np


def ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def attention(q_in, k_in, v_in, keep, wq, wk, wv, wo, n_heads):
    """Per-head, per-query loop. ``keep`` is a boolean [b, tq, tk]."""
    b, tq, d = q_in.shape
    tk = k_in.shape[1]
    dh = d // n_heads
    out = np.zeros((b, tq, d))
    for bi in range(b):
        heads = []
        for h in range(n_heads):
            cols = slice(h * dh, (h + 1) * dh)
            q = q_in[bi] @ wq[:, cols]
            k = k_in[bi] @ wk[:, cols]
            v = v_in[bi] @ wv[:, cols]
            head = np.zeros((tq, dh))
            for i in range(tq):
                s = np.array([q[i] @ k[j] / math.sqrt(dh) if keep[bi, i, j] else -np.inf for j in range(tk)])
                w = np.exp(s - s.max())
                head[i] = (w / w.sum()) @ v
            heads.append(head)
        out[bi] = np.concatenate(heads, axis=1) @ wo
    return out


def positional(t, d):
    pe = np.zeros((t, d))
    for pos in range(t):
        for i in range(d):
            angle = pos / 10000 ** ((i - i % 2) / d)
            pe[pos, i] = math.sin(angle) if i % 2 == 0 else math.cos(angle)
    return pe


class ScriptedModel:
    """Forward pass of the whole encoder-decoder, spelled out per strategy."""

    def __init__(self, arrays, config):
        self.p = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        self.cfg = config
        self.eps = config.ln_eps

    def _ln(self, x, prefix):
        return ln(x, self.p[f"{prefix}.gain"], self.p[f"{prefix}.bias"], self.eps)

    def _att(self, prefix, q, kv, keep, wk=None, wv=None, wo=None):
        p = self.p
        return attention(q, kv, kv, keep, p[f"{prefix}.wq"], p[wk or f"{prefix}.wk"], p[wv or f"{prefix}.wv"],
                         p[wo or f"{prefix}.wo"], self.cfg.n_heads)

    def _ffn(self, x, pre):
        p = self.p
        return np.maximum(x @ p[f"{pre}.w1"] + p[f"{pre}.b1"], 0) @ p[f"{pre}.w2"] + p[f"{pre}.b2"]

    def agg(self, prefix, inputs):
        p, s = self.p, self.cfg.strategy
        h = np.concatenate(inputs, axis=-1) @ p[f"{prefix}.w_in"] + p[f"{prefix}.b_in"]
        h = sigmoid(h) if s.agg_fn.value == "sigmoid_ffn" else np.maximum(h, 0)
        out = h @ p[f"{prefix}.w_out"] + p[f"{prefix}.b_out"]
        if s.residual_mode.value == "all":
            out = out + sum(inputs)
        elif s.residual_mode.value == "top":
            out = out + inputs[0]
        return self._ln(out, f"{prefix}.ln")

    def _self_c(self, side, l, x, levels, keep):
        pre = f"{side}.layer{l}"
        s = self.cfg.strategy
        m = min(s.k, l) if s.tag.value == "multi_layer_attention" else 1
        if m == 1:
            return self._ln(self._att(f"{pre}.self_attn", x, x, keep) + x, f"{pre}.ln0")
        outs = [self._att(f"{pre}.self_attn", x, levels[l - 1], keep)]
        for i in range(2, m + 1):
            e = f"{pre}.mla.attn{i}"
            outs.append(self._att(f"{pre}.self_attn", x, levels[l - i], keep,
                                  f"{e}.wk", f"{e}.wv", f"{e}.wo"))
        return self._ln(self.agg(f"{pre}.mla.agg", outs) + x, f"{pre}.ln0")

    def _layer(self, side, l, x, levels, keep, memory=None, cross_keep=None):
        pre = f"{side}.layer{l}"
        c = self._self_c(side, l, x, levels, keep)
        if side == "dec":
            c = self._ln(self._att(f"{pre}.cross_attn", c, memory, cross_keep) + c, f"{pre}.ln1")
            return self._ln(self._ffn(c, f"{pre}.ffn") + c, f"{pre}.ln2")
        return self._ln(self._ffn(c, f"{pre}.ffn") + c, f"{pre}.ln1")

    def stack(self, side, h0, keep, memory=None, cross_keep=None):
        """Returns (backbone list H^0..H^L, final)."""
        tag = self.cfg.strategy.tag.value
        L = self.cfg.L_enc if side == "enc" else self.cfg.L_dec
        H = [h0]

        def layer(l, x):
            return self._layer(side, l, x, H, keep, memory, cross_keep)

        if tag == "hierarchical":
            node = None
            for i in range(1, L // 2 + 1):
                H.append(layer(2 * i - 1, H[0] if i == 1 else node))
                H.append(layer(2 * i, H[-1]))
                ins = [H[2 * i], H[2 * i - 1]] + ([node] if i > 1 else [])
                node = self.agg(f"{side}.agg{i}", ins)
            return H, node
        for l in range(1, L + 1):
            h = layer(l, H[-1])
            if tag == "dense":
                h = h + sum(H[1:l]) if l > 1 else h
            H.append(h)
        if tag == "linear":
            return H, sum(H[l] @ self.p[f"{side}.linear.w{l}"] for l in range(1, L + 1))
        if tag == "iterative":
            node = H[1]
            for l in range(2, L + 1):
                node = self.agg(f"{side}.agg{l}", [H[l], node])
            return H, node
        return H, H[-1]

    def forward(self, src, src_mask, tgt_in):
        d = self.cfg.d_model
        b, ts = src.shape
        tt = tgt_in.shape[1]
        h0 = self.p["src_embed"][src] * math.sqrt(d) + positional(ts, d)
        enc_keep = np.broadcast_to(src_mask[:, None, :], (b, ts, ts))
        _, memory = self.stack("enc", h0, enc_keep)
        g0 = self.p["tgt_embed"][tgt_in] * math.sqrt(d) + positional(tt, d)
        causal = np.broadcast_to(np.tril(np.ones((tt, tt), bool)), (b, tt, tt))
        cross = np.broadcast_to(src_mask[:, None, :], (b, tt, ts))
        _, final = self.stack("dec", g0, causal, memory, cross)
        return final @ self.p["out.w"] + self.p["out.b"], memory


def absolute_block_scores(w_in, arity):
    """Double loop over every weight of each input block."""
    d = w_in.shape[0] // arity
    mass = []
    for j in range(arity):
        total = 0.0
        for r in range(j * d, (j + 1) * d):
            for c in range(w_in.shape[1]):
                total += abs(float(w_in[r, c]))
        mass.append(total)
    whole = sum(mass)
    return [m / whole for m in mass]
