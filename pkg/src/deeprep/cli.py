"""Command-line driver.

Exit codes: 0 success, 1 validation or usage error, 2 numerical failure
(non-finite training loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import analysis
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ModelConfig, Strategy, load_config
from .fusion import count_params, describe_dag
from .gradcheck import GradCheckFailure
from .tasks import KINDS, TaskSpec, generate, parse_ids
from .tensor import NumericalError
from .train import TrainingDiverged, decode_pairs, evaluate, model_grad_check_lambdas, random_batch, train

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
CKPT_NAME = "model.dfsq"
LOG_NAME = "train_log.csv"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="deeprep", description="Encoder-decoder Transformer with layer fusion strategies.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train on a synthetic task")
    t.add_argument("--config", required=True, type=Path)
    t.add_argument("--task", required=True, choices=KINDS)
    t.add_argument("--steps", required=True, type=int)
    t.add_argument("--out", required=True, type=Path)

    e = sub.add_parser("eval", help="score a checkpoint on a regenerated split")
    e.add_argument("--ckpt", required=True, type=Path)
    e.add_argument("--task", required=True, choices=KINDS)
    e.add_argument("--split", choices=("dev", "test"), default="dev")

    d = sub.add_parser("decode", help="greedy-decode source lines")
    d.add_argument("--ckpt", required=True, type=Path)
    d.add_argument("--input", required=True, type=Path)

    g = sub.add_parser("gradcheck", help="finite-difference check at tiny dimensions")
    g.add_argument("--config", required=True, type=Path)
    g.add_argument("--lambdas", default="0,1", help="comma-separated diversity weights")
    g.add_argument("--tol", type=float, default=1e-4)

    i = sub.add_parser("inspect", help="structure, parameter, and aggregation reports")
    isub = i.add_subparsers(dest="what", required=True, parser_class=_Parser)
    isub.add_parser("dag").add_argument("--config", required=True, type=Path)
    isub.add_parser("params").add_argument("--config", required=True, type=Path)
    x = isub.add_parser("exploitation")
    x.add_argument("--ckpt", required=True, type=Path)
    x.add_argument("--out", required=True, type=Path)
    return p


def tiny_config(config: ModelConfig) -> ModelConfig:
    """The gradient-check shape of ``config``: 64-bit, small dimensions, at most four layers."""
    L_enc, L_dec = min(config.L_enc, 4), min(config.L_dec, 4)
    strategy = config.strategy
    if strategy.tag is Strategy.MULTI_LAYER_ATTENTION:
        strategy = dataclasses.replace(strategy, k=min(strategy.k, L_enc, L_dec))
    return config.replace(d_model=8, n_heads=2, d_ff=16, d_ff_agg=None, L_enc=L_enc, L_dec=L_dec,
                          vocab_src=11, vocab_tgt=11, max_len=8, precision="f64", strategy=strategy)


def _task_spec(config: ModelConfig, kind: str, overrides: dict | None) -> TaskSpec:
    kw = dict(overrides or {})
    kw.update(kind=kind, vocab_size=kw.get("vocab_size", min(config.vocab_src, config.vocab_tgt)))
    return TaskSpec(**kw)


def cmd_train(args) -> int:
    config, train_cfg, task_kw = load_config(args.config)
    task = _task_spec(config, args.task, task_kw)
    args.out.mkdir(parents=True, exist_ok=True)
    csv_path = args.out / LOG_NAME
    try:
        result = train(config, task, args.steps, train_cfg=train_cfg, csv_path=csv_path)
    except TrainingDiverged as exc:
        exc.report.write_csv(csv_path)
        if exc.checkpoint is not None:
            save_checkpoint(args.out / CKPT_NAME, exc.checkpoint)
        print(f"training diverged: {exc}; last good checkpoint kept", file=sys.stderr)
        return EXIT_NUMERIC
    save_checkpoint(args.out / CKPT_NAME, result.checkpoint)
    f = result.report.final
    print(f"step {f.step}: dev token acc {f.dev_tok_acc:.4f}, seq acc {f.dev_seq_acc:.4f}, "
          f"bleu {f.dev_bleu:.2f}; best step {result.report.best_step}")
    print(f"wrote {csv_path} and {args.out / CKPT_NAME}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    task = _task_spec(ckpt.config, args.task, ckpt.task)
    model = ckpt.build_model()
    m = evaluate(model, generate(task)[args.split])
    print(json.dumps({"split": args.split, "task": args.task, **m}, sort_keys=True))
    return EXIT_OK


def cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    srcs = []
    for line in args.input.read_text(encoding="utf-8").splitlines():
        if line.strip():
            srcs.append(parse_ids(line.partition("|||")[0]))
    vocab = ckpt.config.vocab_src
    for s in srcs:
        if not s or min(s) < 0 or max(s) >= vocab:
            raise ValueError(f"source {s} is empty or has ids outside [0, {vocab})")
    for hyp in decode_pairs(model, [(s, ()) for s in srcs]):
        print(" ".join(map(str, hyp)))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config, _, _ = load_config(args.config)
    config = tiny_config(config)
    lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    if config.L_enc < 2 or config.L_dec < 2:
        lambdas = [lam for lam in lambdas if lam == 0] or [0.0]
    batch = random_batch(config, 2, 5, seed=config.seed)
    try:
        errs = model_grad_check_lambdas(config, batch, lambdas, tol=args.tol)
    except GradCheckFailure as exc:
        print(f"FAIL {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for lam, err in errs.items():
        print(f"lambda={lam:g} max relative error {err:.3e} (tol {args.tol:g})")
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.what == "exploitation":
        ckpt = load_checkpoint(args.ckpt)
        rows = analysis.model_exploitation(ckpt.build_model())
        analysis.write_csv(args.out, rows)
        print(f"wrote {len(rows)} rows to {args.out}")
        return EXIT_OK
    config, _, _ = load_config(args.config)
    config.validate()
    if args.what == "dag":
        out = {side: describe_dag(L, config.strategy)
               for side, L in (("enc", config.L_enc), ("dec", config.L_dec))}
        print(json.dumps(out, indent=2, ensure_ascii=False))
    else:
        rep = count_params(config)
        print(json.dumps({"groups": rep.groups, "closed_form": rep.closed_form, "total": rep.total,
                          "delta_vs_vanilla": rep.delta, "per_tensor": rep.per_tensor}, indent=2))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "decode": cmd_decode,
            "gradcheck": cmd_gradcheck, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, ValueError, KeyError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
