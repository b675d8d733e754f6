"""Greedy decoding with per-layer state caching."""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .fusion import StackCache
from .model import Model
from .tasks import BOS, EOS, PAD

LogitHook = Callable[[int, np.ndarray], np.ndarray]


def _decode_limit(model: Model, max_len: int | None) -> int:
    cap = model.config.max_len - 1
    return cap if max_len is None else min(max_len, cap)


def _finish(out: np.ndarray, lengths: np.ndarray) -> list[list[int]]:
    return [out[i, :lengths[i]].tolist() for i in range(out.shape[0])]


def greedy_decode(model: Model, src: np.ndarray, src_mask: np.ndarray, max_len: int | None = None,
                  logit_hook: LogitHook | None = None) -> list[list[int]]:
    """Argmax decoding from BOS until EOS or ``max_len`` tokens.

    Only the newest position runs through the decoder at each step; earlier
    positions come from the cache. ``logit_hook(step, logits)`` may rewrite the
    ``[b, vocab]`` logits of step ``step`` (1-based) before the argmax.
    """
    limit = _decode_limit(model, max_len)
    b = src.shape[0]
    out = np.full((b, limit), PAD, dtype=np.int64)
    lengths = np.full(b, limit)
    done = np.zeros(b, bool)
    with T.no_grad():
        memory = model.encode(src, src_mask).final
        cache = StackCache()
        token = np.full((b, 1), BOS, dtype=np.int64)
        for step in range(1, limit + 1):
            states = model.decode_states(token, memory, src_mask, cache)
            logits = model.project(states.final).data[:, -1, :]
            if logit_hook is not None:
                logits = logit_hook(step, logits)
            nxt = logits.argmax(axis=-1)
            newly = (nxt == EOS) & ~done
            lengths[newly] = step - 1
            done |= newly
            out[:, step - 1] = np.where(done, PAD, nxt)
            if done.all():
                break
            token = nxt[:, None]
    return _finish(out, lengths)


def greedy_decode_full(model: Model, src: np.ndarray, src_mask: np.ndarray, max_len: int | None = None,
                       logit_hook: LogitHook | None = None) -> list[list[int]]:
    """Reference decoder that re-runs the whole target prefix at every step."""
    limit = _decode_limit(model, max_len)
    b = src.shape[0]
    out = np.full((b, limit), PAD, dtype=np.int64)
    lengths = np.full(b, limit)
    done = np.zeros(b, bool)
    prefix = np.full((b, 1), BOS, dtype=np.int64)
    with T.no_grad():
        enc = model.encode(src, src_mask)
        for step in range(1, limit + 1):
            dec = model.decode_states(prefix, enc.final, src_mask)
            logits = model.project(dec.final).data[:, -1, :]
            if logit_hook is not None:
                logits = logit_hook(step, logits)
            nxt = logits.argmax(axis=-1)
            newly = (nxt == EOS) & ~done
            lengths[newly] = step - 1
            done |= newly
            out[:, step - 1] = np.where(done, PAD, nxt)
            if done.all():
                break
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
    return _finish(out, lengths)
