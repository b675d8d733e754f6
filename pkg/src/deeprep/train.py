"""Training loop, evaluation, and the whole-model gradient check."""

from __future__ import annotations

import csv
import dataclasses
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .config import ModelConfig, TrainConfig
from .decoding import greedy_decode
from .diversity import diversity_loss, diversity_report, total_loss
from .metrics import metrics
from .model import Model
from .optim import AdamHyper, OptimState, adam_step
from .tasks import Batch, Pair, TaskSpec, batchify, generate, make_batch
from .tensor import NumericalError, Tensor

log = logging.getLogger(__name__)

CSV_FIELDS = ("step", "loss", "nll", "div_enc", "div_dec", "dev_tok_acc", "dev_seq_acc", "dev_bleu")


@dataclass
class LossParts:
    total: Tensor
    nll: Tensor
    div_enc: Tensor | None
    div_dec: Tensor | None


@dataclass
class EvalRecord:
    step: int
    loss: float
    nll: float
    div_enc: float | None
    div_dec: float | None
    dev_tok_acc: float
    dev_seq_acc: float
    dev_bleu: float

    def row(self) -> list[str]:
        return ["" if v is None else repr(v) for v in dataclasses.astuple(self)]


@dataclass
class TrainReport:
    records: list[EvalRecord] = field(default_factory=list)
    wall_time: float = 0.0
    best_step: int = 0

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_FIELDS)
            for r in self.records:
                w.writerow(r.row())

    @property
    def final(self) -> EvalRecord:
        return self.records[-1]


@dataclass
class TrainResult:
    report: TrainReport
    model: Model
    checkpoint: Checkpoint
    data: dict[str, list[Pair]]


class TrainingDiverged(NumericalError):
    def __init__(self, message: str, checkpoint: Checkpoint | None, report: TrainReport):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.report = report


def compute_loss(model: Model, batch: Batch) -> LossParts:
    """Likelihood loss minus the lambda-weighted diversity of both stacks."""
    res = model.forward(batch.src, batch.src_mask, batch.tgt_in)
    nll = T.cross_entropy(res.logits, batch.tgt_out, batch.tgt_mask)
    cfg = model.config
    div_enc = div_dec = None
    if cfg.L_enc >= 2 and cfg.L_dec >= 2:
        div_enc = diversity_loss(res.enc, batch.src_mask)
        div_dec = diversity_loss(res.dec, batch.tgt_mask)
    return LossParts(total_loss(nll, div_enc, div_dec, cfg.lambda_div), nll, div_enc, div_dec)


def eval_threads() -> int:
    try:
        return max(1, int(os.environ.get("DFSQ_THREADS", "1")))
    except ValueError:
        return 1


def decode_pairs(model: Model, pairs: list[Pair], batch_size: int = 64,
                 threads: int | None = None) -> list[list[int]]:
    """Greedy-decode the sources of ``pairs`` in fixed batch order."""
    batches = batchify(pairs, batch_size)
    threads = eval_threads() if threads is None else threads

    def run(b: Batch) -> list[list[int]]:
        # outputs of these tasks are never longer than their inputs
        limit = int(b.src_mask.sum(axis=1).max()) + 4
        return greedy_decode(model, b.src, b.src_mask, limit)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, batches))
    else:
        chunks = [run(b) for b in batches]
    return [h for chunk in chunks for h in chunk]


def evaluate(model: Model, pairs: list[Pair], batch_size: int = 64, threads: int | None = None) -> dict:
    hyps = decode_pairs(model, pairs, batch_size, threads)
    return metrics(hyps, [list(t) for _, t in pairs])


def mean_adjacent_cos2(model: Model, pairs: list[Pair], side: str = "enc", batch_size: int = 64) -> float:
    """Mean cos^2 between adjacent backbone layers, averaged over batches of ``pairs``."""
    vals = []
    with T.no_grad():
        for b in batchify(pairs, batch_size):
            res = model.forward(b.src, b.src_mask, b.tgt_in)
            states, mask = (res.enc, b.src_mask) if side == "enc" else (res.dec, b.tgt_mask)
            vals.append(diversity_report(states, mask, side).mean_cos2)
    return float(np.mean(vals))


def _batch_stream(pairs: list[Pair], batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(len(pairs))
        for i in range(0, len(pairs) - batch_size + 1, batch_size):
            yield make_batch([pairs[j] for j in order[i:i + batch_size]])


def train(config: ModelConfig, task: TaskSpec, steps: int, eval_every: int | None = None,
          train_cfg: TrainConfig | None = None, stop_when: dict | None = None,
          csv_path: str | Path | None = None, data: dict[str, list[Pair]] | None = None,
          restore_best: bool = True) -> TrainResult:
    """Train from scratch and keep the parameters with the best dev sequence accuracy.

    The checkpoint always holds the best parameters. The returned model holds
    them too unless ``restore_best`` is false, in which case it keeps the
    parameters of the last step.

    ``stop_when`` maps record fields to thresholds (e.g. ``{"dev_seq_acc": 0.95}``);
    training ends at the first evaluation meeting all of them.
    """
    train_cfg = train_cfg or TrainConfig()
    eval_every = eval_every or train_cfg.eval_every
    task.validate(config.max_len)
    if task.vocab_size > min(config.vocab_src, config.vocab_tgt):
        raise ValueError(f"task vocabulary {task.vocab_size} exceeds the model vocabulary")
    data = data if data is not None else generate(task)
    start = time.perf_counter()

    with T.precision(config.precision):
        model = Model(config)
        rng = np.random.default_rng(config.seed)
        stream = _batch_stream(data["train"], min(train_cfg.batch_size, len(data["train"])), rng)
        opt = OptimState(AdamHyper(train_cfg.peak_lr, train_cfg.warmup, train_cfg.beta1,
                                   train_cfg.beta2, train_cfg.adam_eps))
        report = TrainReport()
        best = (-1.0, None, 0)
        task_dict = dataclasses.asdict(task)

        def record(step: int, parts: LossParts) -> EvalRecord:
            nonlocal best
            m = evaluate(model, data["dev"])
            rec = EvalRecord(step, parts.total.item(), parts.nll.item(),
                             None if parts.div_enc is None else parts.div_enc.item(),
                             None if parts.div_dec is None else parts.div_dec.item(),
                             m["token_accuracy"], m["sequence_accuracy"], m["bleu4"])
            report.records.append(rec)
            if rec.dev_seq_acc > best[0]:
                best = (rec.dev_seq_acc, model.state_arrays(), step)
            log.info("step %d loss %.4f nll %.4f dev tok %.4f seq %.4f bleu %.2f", step, rec.loss,
                     rec.nll, rec.dev_tok_acc, rec.dev_seq_acc, rec.dev_bleu)
            return rec

        def snapshot() -> Checkpoint | None:
            if best[1] is None:
                return None
            return Checkpoint.from_model(model, best[2], rng.bit_generator.state, task_dict, best[1])

        batch = next(stream)
        with T.no_grad():
            record(0, compute_loss(model, batch))
        for step in range(1, steps + 1):
            if step > 1:
                batch = next(stream)
            parts = compute_loss(model, batch)
            if not np.isfinite(parts.total.item()):
                report.wall_time = time.perf_counter() - start
                raise TrainingDiverged(f"non-finite loss at step {step}", snapshot(), report)
            model.zero_grad()
            parts.total.backward()
            grads = {n: p.grad for n, p in model.params.items()}
            if train_cfg.clip_norm > 0:
                norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None)))
                if norm > train_cfg.clip_norm:
                    grads = {n: None if g is None else g * (train_cfg.clip_norm / norm)
                             for n, g in grads.items()}
            try:
                adam_step(model.params, grads, opt)
            except NumericalError as exc:
                report.wall_time = time.perf_counter() - start
                raise TrainingDiverged(str(exc), snapshot(), report) from exc
            if step % eval_every == 0 or step == steps:
                rec = record(step, parts)
                if csv_path is not None:
                    report.write_csv(csv_path)
                if stop_when and all(getattr(rec, k) >= v for k, v in stop_when.items()):
                    break

        report.best_step = best[2]
        report.wall_time = time.perf_counter() - start
        if csv_path is not None:
            report.write_csv(csv_path)
        ckpt = snapshot()
        if restore_best:
            model.load_arrays(best[1])
    return TrainResult(report, model, ckpt, data)


def random_batch(config: ModelConfig, batch: int = 2, length: int = 5, seed: int = 0) -> Batch:
    """Random token batch with ragged source lengths, for gradient checks and invariance tests."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(batch):
        ns = length if i == 0 else int(rng.integers(1, length + 1))
        nt = length if i == 0 else int(rng.integers(1, length + 1))
        src = tuple(int(t) for t in rng.integers(3, config.vocab_src, size=ns))
        tgt = tuple(int(t) for t in rng.integers(3, config.vocab_tgt, size=nt))
        pairs.append((src, tgt))
    return make_batch(pairs)


def model_grad_check(config: ModelConfig, batch: Batch, eps: float = 1e-5, tol: float = 1e-4,
                     model: Model | None = None) -> float:
    """Finite-difference check of every trainable tensor under the full training loss.

    Runs at 64-bit. Raises :class:`GradCheckFailure` listing the worst tensors
    when the maximum relative error exceeds ``tol``.
    """
    return model_grad_check_lambdas(config, batch, [config.lambda_div], eps, tol, model)[config.lambda_div]


def model_grad_check_lambdas(config: ModelConfig, batch: Batch, lambdas: list[float], eps: float = 1e-5,
                             tol: float = 1e-4, model: Model | None = None) -> dict[float, float]:
    """Gradient check of ``nll - lam * diversity`` for several ``lam`` at once.

    Every ``lam`` is evaluated before a :class:`GradCheckFailure` is raised;
    its ``errors`` maps each ``lam`` to its maximum relative error.

    Each perturbed forward pass is combined into one loss value per ``lam``
    before differencing, in the same operation order as :func:`total_loss`,
    so one sweep of central differences serves every ``lam`` at the rounding
    of a direct check. Each ``lam`` gets its own backward pass. Perturbations
    of decoder-side tensors reuse the unperturbed encoder pass, which they
    cannot affect.
    """
    from .gradcheck import GradCheckFailure, numeric_grad_components, relative_error, within_roundoff

    config = config.replace(precision="f64", lambda_div=max(lambdas))
    has_div = config.L_enc >= 2 and config.L_dec >= 2
    with T.precision("f64"):
        model = model or Model(config)
        if model.params and next(iter(model.params.values())).data.dtype != np.float64:
            raise ValueError("gradient checks need a 64-bit model")

        analytic: dict[float, dict[str, np.ndarray]] = {}
        for lam in lambdas:
            model.config = config.replace(lambda_div=lam)
            model.zero_grad()
            compute_loss(model, batch).total.backward()
            analytic[lam] = {n: np.zeros(p.shape) if p.grad is None else p.grad.copy()
                             for n, p in model.params.items()}
        model.config = config

        def losses(enc=None, div_enc=None) -> np.ndarray:
            if enc is None:
                enc = model.encode(batch.src, batch.src_mask)
                div_enc = diversity_loss(enc, batch.src_mask).item() if has_div else 0.0
            dec = model.decode_states(batch.tgt_in, enc.final, batch.src_mask)
            nll = T.cross_entropy(model.project(dec.final), batch.tgt_out, batch.tgt_mask).item()
            if not has_div:
                return np.full(len(lambdas), nll)
            div = np.float64(div_enc) + np.float64(diversity_loss(dec, batch.tgt_mask).item())
            return np.array([nll if lam == 0 else nll - div * np.float64(lam / 2.0) for lam in lambdas])

        with T.no_grad():
            enc0 = model.encode(batch.src, batch.src_mask)
            div_enc0 = diversity_loss(enc0, batch.src_mask).item() if has_div else 0.0

        per: dict[float, dict[str, tuple[float, float, float]]] = {lam: {} for lam in lambdas}
        roundoff: dict[float, bool] = {lam: True for lam in lambdas}
        for name, p in model.params.items():
            encoder_side = name.startswith(("src_embed", "enc."))
            f = losses if encoder_side else (lambda: losses(enc0, div_enc0))
            numeric = numeric_grad_components(f, p, eps)
            for lam, num in zip(lambdas, numeric):
                a = analytic[lam][name]
                err = relative_error(a, num)
                roundoff[lam] &= within_roundoff(a, num, tol)
                if err.size:
                    i = np.unravel_index(err.argmax(), err.shape)
                    per[lam][name] = (float(err[i]), float(a[i]), float(num[i]))
                else:
                    per[lam][name] = (0.0, 0.0, 0.0)

    result = {lam: max((e for e, _, _ in per[lam].values()), default=0.0) for lam in lambdas}
    failed = [lam for lam in lambdas if result[lam] > tol]
    if failed:
        lines = []
        for lam in failed:
            ranked = sorted(per[lam].items(), key=lambda kv: -kv[1][0])[:5]
            detail = ", ".join(f"{n}={e:.2e} (analytic {a:.4g}, numeric {x:.4g})" for n, (e, a, x) in ranked)
            note = "; every offending entry agrees to 1e-9 absolute" if roundoff[lam] else ""
            lines.append(f"lambda={lam}: max relative error {result[lam]:.3e} > {tol:g}{note}; worst: {detail}")
        raise GradCheckFailure("\n".join(lines), max(result[lam] for lam in failed),
                               all(roundoff[lam] for lam in failed), result)
    return result
