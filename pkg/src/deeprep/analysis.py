"""Per-input contribution scores of trained aggregation nodes."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import AggFn, ConfigError, ModelConfig, Strategy
from .fusion import AggParams

CSV_HEADER = ("side", "node", "input", "score")
CSV_NOTE = "# scores use |w| over weight-matrix blocks only; biases are excluded"


@dataclass(frozen=True)
class ExploitationRow:
    side: str
    node: int
    input: str
    score: float


def input_names(tag: Strategy, node: int) -> list[str]:
    """Names of an aggregation node's inputs, in argument order."""
    if tag is Strategy.HIERARCHICAL:
        names = [f"H^{2 * node}", f"H^{2 * node - 1}"]
        return names + ([f"Ĥ^{node - 1}"] if node > 1 else [])
    if tag is Strategy.ITERATIVE:
        return [f"H^{node}", f"Ĥ^{node - 1}"]
    raise ConfigError(f"strategy {tag.value!r} has no aggregation nodes to score")


def block_scores(blocks: list[np.ndarray]) -> np.ndarray:
    """Absolute-weight mass of each block divided by the mass of all blocks."""
    mass = np.array([np.abs(np.asarray(b, dtype=np.float64)).sum() for b in blocks])
    total = mass.sum()
    if total == 0:
        raise ValueError("every input block is zero; scores are undefined")
    return mass / total


def node_numbers(tag: Strategy, count: int) -> list[int]:
    # iterative nodes are numbered by the layer they sit on (2..L)
    start = 2 if tag is Strategy.ITERATIVE else 1
    return list(range(start, start + count))


def exploitation_scores(config: ModelConfig, aggs: dict[str, list[AggParams]]) -> list[ExploitationRow]:
    """Score every input of every aggregation node, per stack side."""
    tag = config.strategy.tag
    if tag not in (Strategy.HIERARCHICAL, Strategy.ITERATIVE):
        raise ConfigError(f"strategy {tag.value!r} has no aggregation nodes to score")
    if config.strategy.agg_fn is AggFn.SELF_ATTENTION:
        raise ConfigError("attention-based aggregation has no per-input weight blocks")
    rows = []
    for side, nodes in aggs.items():
        for node, p in zip(node_numbers(tag, len(nodes)), nodes):
            names = input_names(tag, node)
            if len(names) != p.arity:
                raise ValueError(f"{side} node {node}: arity {p.arity} but {len(names)} named inputs")
            for name, s in zip(names, block_scores(p.blocks())):
                rows.append(ExploitationRow(side, node, name, float(s)))
    return rows


def model_exploitation(model) -> list[ExploitationRow]:
    return exploitation_scores(model.config, {"enc": model.enc.agg, "dec": model.dec.agg})


def format_csv(rows: list[ExploitationRow]) -> str:
    buf = io.StringIO()
    buf.write(CSV_NOTE + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([r.side, r.node, r.input, repr(r.score)])
    return buf.getvalue()


def write_csv(path: str | Path, rows: list[ExploitationRow]) -> None:
    Path(path).write_text(format_csv(rows), encoding="utf-8")


def read_csv(path: str | Path) -> list[ExploitationRow]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if not ln.startswith("#")]
    reader = csv.DictReader(lines)
    return [ExploitationRow(r["side"], int(r["node"]), r["input"], float(r["score"])) for r in reader]
