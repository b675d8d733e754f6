"""Layer-fusion strategies for encoder and decoder stacks.

A stack executor runs the backbone layers and whatever aggregation nodes the
strategy asks for, returning a :class:`LayerStates` record. The same executor
serves full forward passes and one-position-at-a-time decoding: with a
:class:`StackCache`, key/value sources are the cached prefix plus the new rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import AggFn, ConfigError, FusionStrategy, ModelConfig, ResidualMode, Strategy
from .tensor import Tensor
from .transformer import (
    LayerParams,
    LNParams,
    attend,
    decoder_layer,
    encoder_layer,
    layer_norm,
    project_query,
)


@dataclass
class AggParams:
    """Weights of one aggregation node.

    For the FFN variants ``w_in`` is the row-wise concatenation of ``arity``
    blocks of shape ``[d_model, d_ff_agg]``, one per input, in argument order.
    """

    arity: int
    d_model: int
    ln: LNParams
    w_in: Tensor | None = None
    b_in: Tensor | None = None
    w_out: Tensor | None = None
    b_out: Tensor | None = None
    attn: tuple[Tensor, Tensor, Tensor, Tensor] | None = None

    def block_slices(self) -> list[slice]:
        d = self.d_model
        return [slice(j * d, (j + 1) * d) for j in range(self.arity)]

    def blocks(self) -> list[np.ndarray]:
        if self.w_in is None:
            raise ValueError("attention-based aggregation has no per-input weight blocks")
        return [self.w_in.data[s] for s in self.block_slices()]


@dataclass
class MLAParams:
    """Extra key/value/output projections for attending layers l-2 .. l-m, plus their AGG node."""

    extra: list[tuple[Tensor, Tensor, Tensor]]
    agg: AggParams


@dataclass
class StackParams:
    layers: list[LayerParams]
    linear: list[Tensor] = field(default_factory=list)
    agg: list[AggParams] = field(default_factory=list)
    mla: dict[int, MLAParams] = field(default_factory=dict)


@dataclass
class LayerStates:
    backbone: list[Tensor]
    agg_nodes: list[Tensor]
    final: Tensor
    final_name: str


@dataclass
class StackCache:
    """Prefix states of one stack for incremental decoding."""

    inputs: dict[int, Tensor] = field(default_factory=dict)
    states: dict[int, Tensor] = field(default_factory=dict)
    length: int = 0

    def extend(self, store: dict[int, Tensor], key: int, new: Tensor) -> Tensor:
        past = store.get(key)
        full = new if past is None else T.concat([past, new], axis=1)
        store[key] = full
        return full


# --- aggregation -----------------------------------------------------------

def aggregate(inputs: list[Tensor], p: AggParams, strategy: FusionStrategy, eps: float = 1e-6) -> Tensor:
    """LN(F([x1; ...; xm]) + R) with R chosen by the residual mode.

    ``inputs[0]`` is the deepest input; it alone is kept under the ``top``
    residual mode.
    """
    if len(inputs) != p.arity:
        raise ValueError(f"aggregation node has arity {p.arity} but got {len(inputs)} inputs")
    if strategy.agg_fn is AggFn.SELF_ATTENTION:
        mixed = _attention_mix(inputs, p)
    else:
        h = T.concat_last(inputs) @ p.w_in + p.b_in
        h = T.sigmoid(h) if strategy.agg_fn is AggFn.SIGMOID_FFN else T.relu(h)
        mixed = h @ p.w_out + p.b_out
    mode = strategy.residual_mode
    if mode is ResidualMode.ALL:
        mixed = mixed + T.add_n(inputs)
    elif mode is ResidualMode.TOP:
        mixed = mixed + inputs[0]
    return layer_norm(mixed, p.ln, eps)


def _attention_mix(inputs: list[Tensor], p: AggParams) -> Tensor:
    # each position attends over its own m input states, then mean-pools
    wq, wk, wv, wo = p.attn
    s = T.stack(inputs, axis=-2)
    q, k, v = s @ wq, s @ wk, s @ wv
    scores = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(p.d_model))
    w = T.softmax_masked(scores)
    return T.mean(w @ v, axis=-2) @ wo


def agg2(x: Tensor, y: Tensor, p: AggParams, strategy: FusionStrategy, eps: float = 1e-6) -> Tensor:
    return aggregate([x, y], p, strategy, eps)


def agg3(x: Tensor, y: Tensor, z: Tensor, p: AggParams, strategy: FusionStrategy,
         eps: float = 1e-6) -> Tensor:
    return aggregate([x, y, z], p, strategy, eps)


# --- multi-layer attention ---------------------------------------------------

def mla_arity(l: int, k: int) -> int:
    """Number of layers that layer ``l`` attends to (layers l-1 down to max(l-k, 0))."""
    return min(k, l)


def wire_multi_layer_attention(l: int, levels: list[Tensor], layer: LayerParams, mla: MLAParams | None,
                               strategy: FusionStrategy, mask, n_heads: int, eps: float = 1e-6,
                               query: Tensor | None = None) -> Tensor:
    """Return C^l, the self-attention sub-layer output of layer ``l``.

    ``levels[j]`` holds the full key/value source H^j (prefix included). The
    query comes from H^{l-1} (``query``, defaulting to ``levels[l-1]``) and is
    projected once; each attended layer l-i gets its own key/value/output
    projections. The per-layer attention outputs are merged by an AGG node and
    the result takes the place of the attention term in the sub-layer.
    """
    k = strategy.k
    if k < 1:
        raise ConfigError(f"multi-layer attention needs k >= 1, got {k}")
    q_in = levels[l - 1] if query is None else query
    m = mla_arity(l, k)
    if m == 1:
        kv = levels[l - 1]
        a = layer.self_attn
        qh = project_query(q_in, a.wq, n_heads)
        att = attend(qh, kv, kv, mask, a.wk, a.wv, a.wo)
        return layer_norm(att + q_in, layer.ln[0], eps)
    if mla is None or len(mla.extra) != m - 1:
        raise ValueError(f"layer {l} needs {m - 1} extra attention parameter sets")
    a = layer.self_attn
    qh = project_query(q_in, a.wq, n_heads)
    outs = [attend(qh, levels[l - 1], levels[l - 1], mask, a.wk, a.wv, a.wo)]
    for i in range(2, m + 1):
        wk, wv, wo = mla.extra[i - 2]
        src = levels[l - i]
        outs.append(attend(qh, src, src, mask, wk, wv, wo))
    combined = aggregate(outs, mla.agg, strategy, eps)
    return layer_norm(combined + q_in, layer.ln[0], eps)


# --- stack execution -------------------------------------------------------

def run_stack(side: str, H0: Tensor, params: StackParams, config: ModelConfig, self_mask,
              memory: Tensor | None = None, cross_mask=None, cache: StackCache | None = None,
              dense_skips: bool = True) -> LayerStates:
    """Run one encoder (``side='enc'``) or decoder (``side='dec'``) stack.

    ``H0`` holds the embedded rows being computed. Without a cache these are
    the whole sequence; with one they are appended to its prefix, and every
    returned tensor covers only the new rows.
    """
    strategy = config.strategy
    tag = strategy.tag
    L = len(params.layers)
    if tag is Strategy.HIERARCHICAL and L % 2:
        raise ConfigError(f"hierarchical aggregation needs an even layer count, got {L}")
    if tag is Strategy.MULTI_LAYER_ATTENTION and not 1 <= strategy.k:
        raise ConfigError(f"multi-layer attention needs k >= 1, got {strategy.k}")
    if side not in ("enc", "dec"):
        raise ValueError(f"side must be 'enc' or 'dec', got {side!r}")
    if side == "dec" and memory is None:
        raise ValueError("decoder stack needs encoder memory")
    eps, n_heads = config.ln_eps, config.n_heads
    mla = tag is Strategy.MULTI_LAYER_ATTENTION

    backbone = [H0]
    levels: list[Tensor] = []  # full-length key/value sources per depth (multi-layer attention)

    def level(j: int, new: Tensor) -> None:
        levels.append(new if cache is None else cache.extend(cache.states, j, new))

    if mla:
        level(0, H0)

    def layer(l: int, x: Tensor) -> Tensor:
        lp = params.layers[l - 1]
        c = None
        if mla:
            c = wire_multi_layer_attention(l, levels, lp, params.mla.get(l), strategy, self_mask,
                                           n_heads, eps, query=x)
            kv = levels[l - 1]
        else:
            kv = x if cache is None else cache.extend(cache.inputs, l, x)
        if side == "enc":
            return encoder_layer(x, kv, self_mask, lp, n_heads, eps, c=c)
        return decoder_layer(x, kv, memory, self_mask, cross_mask, lp, n_heads, eps, c=c)

    aggs: list[Tensor] = []
    if tag is Strategy.HIERARCHICAL:
        for i in range(1, L // 2 + 1):
            lower = layer(2 * i - 1, backbone[0] if i == 1 else aggs[-1])
            backbone.append(lower)
            upper = layer(2 * i, lower)
            backbone.append(upper)
            p = params.agg[i - 1]
            if i == 1:
                aggs.append(agg2(upper, lower, p, strategy, eps))
            else:
                aggs.append(agg3(upper, lower, aggs[-1], p, strategy, eps))
        return LayerStates(backbone, aggs, aggs[-1], f"Ĥ^{L // 2}")

    for l in range(1, L + 1):
        h = layer(l, backbone[-1])
        if tag is Strategy.DENSE and dense_skips and l > 1:
            h = T.add_n([h] + backbone[1:l])
        backbone.append(h)
        if mla:
            level(l, h)

    if tag is Strategy.LINEAR:
        final = T.add_n([backbone[l] @ params.linear[l - 1] for l in range(1, L + 1)])
        return LayerStates(backbone, [final], final, "Ĥ")
    if tag is Strategy.ITERATIVE:
        aggs.append(backbone[1])
        for l in range(2, L + 1):
            aggs.append(agg2(backbone[l], aggs[-1], params.agg[l - 2], strategy, eps))
        return LayerStates(backbone, aggs, aggs[-1], f"Ĥ^{L}")
    return LayerStates(backbone, aggs, backbone[-1], f"H^{L}")


# --- parameter allocation ----------------------------------------------------

class ParamAllocator:
    """Creates named trainable tensors in a fixed order.

    With ``materialize=False`` tensors are zero-stride placeholders, which is
    enough for counting parameters of large configurations.
    """

    def __init__(self, seed: int = 0, dtype=np.float32, materialize: bool = True):
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self.materialize = materialize
        self.params: dict[str, Tensor] = {}

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = T.parameter(data, name=name)
        self.params[name] = t
        return t

    def matrix(self, name: str, rows: int, cols: int) -> Tensor:
        if not self.materialize:
            return self._add(name, np.broadcast_to(self.dtype(0), (rows, cols)))
        s = math.sqrt(6.0 / (rows + cols))
        return self._add(name, self.rng.uniform(-s, s, size=(rows, cols)).astype(self.dtype))

    def const(self, name: str, shape: tuple[int, ...], value: float) -> Tensor:
        if not self.materialize:
            return self._add(name, np.broadcast_to(self.dtype(value), shape))
        return self._add(name, np.full(shape, value, dtype=self.dtype))

    def array(self, name: str, data: np.ndarray) -> Tensor:
        if not self.materialize:
            return self._add(name, np.broadcast_to(self.dtype(0), data.shape))
        return self._add(name, np.array(data, dtype=self.dtype, copy=True))

    def ln(self, prefix: str, d: int) -> LNParams:
        return LNParams(self.const(f"{prefix}.gain", (d,), 1.0), self.const(f"{prefix}.bias", (d,), 0.0))


def alloc_agg(alloc: ParamAllocator, prefix: str, arity: int, config: ModelConfig) -> AggParams:
    d, a = config.d_model, config.d_ff_agg
    if config.strategy.agg_fn is AggFn.SELF_ATTENTION:
        attn = tuple(alloc.matrix(f"{prefix}.{n}", d, d) for n in ("wq", "wk", "wv", "wo"))
        return AggParams(arity, d, alloc.ln(f"{prefix}.ln", d), attn=attn)
    w_in = alloc.matrix(f"{prefix}.w_in", arity * d, a)
    b_in = alloc.const(f"{prefix}.b_in", (a,), 0.0)
    w_out = alloc.matrix(f"{prefix}.w_out", a, d)
    b_out = alloc.const(f"{prefix}.b_out", (d,), 0.0)
    return AggParams(arity, d, alloc.ln(f"{prefix}.ln", d), w_in, b_in, w_out, b_out)


def alloc_fusion(alloc: ParamAllocator, side: str, config: ModelConfig, stack: StackParams) -> None:
    s = config.strategy
    L = len(stack.layers)
    d = config.d_model
    if s.tag is Strategy.LINEAR:
        eye = np.eye(d) / L
        stack.linear = [alloc.array(f"{side}.linear.w{l}", eye) for l in range(1, L + 1)]
    elif s.tag is Strategy.ITERATIVE:
        stack.agg = [alloc_agg(alloc, f"{side}.agg{l}", 2, config) for l in range(2, L + 1)]
    elif s.tag is Strategy.HIERARCHICAL:
        stack.agg = [alloc_agg(alloc, f"{side}.agg{i}", 2 if i == 1 else 3, config)
                     for i in range(1, L // 2 + 1)]
    elif s.tag is Strategy.MULTI_LAYER_ATTENTION:
        for l in range(1, L + 1):
            m = mla_arity(l, s.k)
            if m < 2:
                continue
            pre = f"{side}.layer{l}.mla"
            extra = [tuple(alloc.matrix(f"{pre}.attn{i}.{n}", d, d) for n in ("wk", "wv", "wo"))
                     for i in range(2, m + 1)]
            stack.mla[l] = MLAParams(extra, alloc_agg(alloc, f"{pre}.agg", m, config))


# --- parameter accounting ----------------------------------------------------

def _agg_size(arity: int, config: ModelConfig) -> int:
    d, a = config.d_model, config.d_ff_agg
    if config.strategy.agg_fn is AggFn.SELF_ATTENTION:
        return 4 * d * d + 2 * d
    return arity * d * a + a + a * d + d + 2 * d


def closed_form_params(config: ModelConfig) -> dict[str, int]:
    """Parameter counts per component group from the architecture formulas alone."""
    d, f = config.d_model, config.d_ff
    ffn = d * f + f + f * d + d
    enc_layer = 4 * d * d + ffn + 2 * 2 * d
    dec_layer = 8 * d * d + ffn + 3 * 2 * d
    groups = {
        "embeddings": (config.vocab_src + config.vocab_tgt) * d,
        "output": d * config.vocab_tgt + config.vocab_tgt,
        "enc.layers": config.L_enc * enc_layer,
        "dec.layers": config.L_dec * dec_layer,
    }
    s = config.strategy
    for side, L in (("enc", config.L_enc), ("dec", config.L_dec)):
        if s.tag is Strategy.LINEAR:
            extra = L * d * d
        elif s.tag is Strategy.ITERATIVE:
            extra = (L - 1) * _agg_size(2, config)
        elif s.tag is Strategy.HIERARCHICAL:
            extra = _agg_size(2, config) + (L // 2 - 1) * _agg_size(3, config)
        elif s.tag is Strategy.MULTI_LAYER_ATTENTION:
            extra = sum((m - 1) * 3 * d * d + _agg_size(m, config)
                        for m in (mla_arity(l, s.k) for l in range(1, L + 1)) if m >= 2)
        else:
            extra = 0
        groups[f"{side}.fusion"] = extra
    groups["total"] = sum(groups.values())
    return groups


def _group_of(name: str) -> str:
    if name.startswith(("src_embed", "tgt_embed")):
        return "embeddings"
    if name.startswith("out."):
        return "output"
    side, rest = name.split(".", 1)
    if rest.startswith("layer") and ".mla." not in rest:
        return f"{side}.layers"
    return f"{side}.fusion"


@dataclass
class ParamReport:
    per_tensor: dict[str, int]
    groups: dict[str, int]
    closed_form: dict[str, int]
    total: int
    delta: int


def count_params(config: ModelConfig) -> ParamReport:
    """Enumerate allocated trainable tensors and compare with the closed form.

    ``delta`` is the total minus the same configuration with the vanilla strategy.
    """
    from .model import Model

    def enumerate_(cfg: ModelConfig) -> dict[str, int]:
        return {n: int(np.prod(t.shape)) for n, t in Model(cfg, materialize=False).params.items()}

    per_tensor = enumerate_(config)
    groups = {g: 0 for g in ("embeddings", "output", "enc.layers", "dec.layers", "enc.fusion", "dec.fusion")}
    for name, n in per_tensor.items():
        groups[_group_of(name)] += n
    total = sum(per_tensor.values())
    groups["total"] = total
    vanilla_cfg = config.replace(strategy=FusionStrategy(Strategy.VANILLA), lambda_div=0.0)
    vanilla_total = sum(enumerate_(vanilla_cfg).values())
    return ParamReport(per_tensor, groups, closed_form_params(config), total, total - vanilla_total)


# --- structure description ---------------------------------------------------

def describe_dag(L: int, strategy: FusionStrategy | Strategy | str) -> dict:
    """Nodes, edges, and final output of one stack's wiring, as plain data.

    Node ids: ``H0`` (embeddings), ``H1..HL`` (backbone layers), ``Ĥ1..``
    (aggregation nodes; ``Ĥ`` for the linear combination). Structural
    invariants are checked before returning.
    """
    if not isinstance(strategy, FusionStrategy):
        strategy = FusionStrategy(Strategy(strategy))
    tag = strategy.tag
    if L < 1:
        raise ConfigError("L must be positive")
    if tag is Strategy.HIERARCHICAL and L % 2:
        raise ConfigError(f"hierarchical aggregation needs an even layer count, got {L}")
    if tag is Strategy.MULTI_LAYER_ATTENTION and strategy.k < 1:
        raise ConfigError(f"multi-layer attention needs k >= 1, got {strategy.k}")

    nodes = [{"id": "H0", "kind": "input", "depth": 0}]
    nodes += [{"id": f"H{l}", "kind": "backbone", "depth": l} for l in range(1, L + 1)]
    edges: list[dict] = []

    def edge(src: str, dst: str, role: str) -> None:
        edges.append({"src": src, "dst": dst, "role": role})

    def agg(node: str, depth: int, inputs: list[str], kind: str = "agg") -> None:
        nodes.append({"id": node, "kind": kind, "depth": depth, "arity": len(inputs)})
        for src in inputs:
            edge(src, node, "aggregate")

    final = f"H{L}"
    if tag is Strategy.HIERARCHICAL:
        for i in range(1, L // 2 + 1):
            edge("H0" if i == 1 else f"Ĥ{i - 1}", f"H{2 * i - 1}", "layer")
            edge(f"H{2 * i - 1}", f"H{2 * i}", "layer")
            inputs = [f"H{2 * i}", f"H{2 * i - 1}"] + ([f"Ĥ{i - 1}"] if i > 1 else [])
            agg(f"Ĥ{i}", 2 * i, inputs)
        final = f"Ĥ{L // 2}"
    else:
        for l in range(1, L + 1):
            edge(f"H{l - 1}", f"H{l}", "layer")
            if tag is Strategy.DENSE:
                for i in range(1, l):
                    edge(f"H{i}", f"H{l}", "dense")
            elif tag is Strategy.MULTI_LAYER_ATTENTION:
                for i in range(2, mla_arity(l, strategy.k) + 1):
                    edge(f"H{l - i}", f"H{l}", "attend")
        if tag is Strategy.LINEAR:
            agg("Ĥ", L, [f"H{l}" for l in range(1, L + 1)], kind="linear")
            final = "Ĥ"
        elif tag is Strategy.ITERATIVE:
            agg("Ĥ1", 1, ["H1"], kind="identity")
            for l in range(2, L + 1):
                agg(f"Ĥ{l}", l, [f"H{l}", f"Ĥ{l - 1}"])
            final = f"Ĥ{L}"

    dag = {"L": L, "strategy": tag.value, "nodes": nodes, "edges": edges, "final": final}
    _check_dag(dag)
    return dag


def _check_dag(dag: dict) -> None:
    ids = {n["id"] for n in dag["nodes"]}
    depth = {n["id"]: n["depth"] for n in dag["nodes"]}
    for e in dag["edges"]:
        if e["src"] not in ids or e["dst"] not in ids:
            raise AssertionError(f"edge {e} references an unknown node")
        if depth[e["src"]] > depth[e["dst"]]:
            raise AssertionError(f"edge {e} points to a shallower node")
    if dag["final"] not in ids:
        raise AssertionError("final node missing")
    if dag["strategy"] == Strategy.HIERARCHICAL.value:
        aggs = [n for n in dag["nodes"] if n["kind"] == "agg"]
        if len(aggs) != dag["L"] // 2:
            raise AssertionError("hierarchical DAG must have L/2 aggregation nodes")
        if len({n["depth"] for n in aggs}) != len(aggs):
            raise AssertionError("more than one aggregation node at some depth")
        if [n["arity"] for n in aggs] != [2] + [3] * (len(aggs) - 1):
            raise AssertionError("hierarchical aggregation arities must be 2, 3, 3, ...")
