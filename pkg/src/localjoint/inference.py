"""Greedy and beam decoding by full forward recomputation per step.

Decoding treats the model as a language model over the joint sequence:
the source block (tokens + EOS) is fixed, the target block grows from BOS
one token at a time, and every step reruns the whole forward pass (no
incremental state). Hypotheses are compared by log-probability divided by
the length penalty ((5 + len) / 6) ** alpha.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID, JointBatch, PAD_ID, Vocabulary
from .model import ModelConfig, forward, sinusoidal_table

Stepper = Callable[[Sequence[int]], np.ndarray]


@dataclass
class DecodeConfig:
    max_new_tokens: int = 64
    beam_size: int = 5
    alpha: float = 0.6

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass
class Hypothesis:
    """A (possibly finished) decode: generated ids, their total log-prob."""

    tokens: tuple[int, ...]
    log_prob: float
    finished: bool

    def score(self, alpha: float) -> float:
        return self.log_prob / length_penalty(len(self.tokens), alpha)


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def make_stepper(params: dict, config: ModelConfig, vocab: Vocabulary,
                 source_tokens: Sequence[str],
                 table: Optional[np.ndarray] = None) -> Stepper:
    """Next-token log-probability function for one source sentence.

    The returned callable maps a prefix of generated target ids to the
    log-softmax over the vocabulary at the last position, recomputing the
    full forward pass without gradient recording.
    """
    if not source_tokens:
        raise ValueError("cannot decode an empty source sentence")
    if table is None:
        table = sinusoidal_table(config.max_positions, config.d_model)
    src_ids = vocab.encode(source_tokens) + [EOS_ID]
    s = len(src_ids)

    def step(prefix: Sequence[int]) -> np.ndarray:
        tgt_ids = [BOS_ID] + list(prefix)
        t = len(tgt_ids)
        n = s + t
        batch = JointBatch(
            tokens=np.array([src_ids + tgt_ids], dtype=np.int64),
            positions=np.concatenate([np.arange(s), np.arange(t)])[None, :],
            lang=np.concatenate([np.zeros(s, np.int64), np.ones(t, np.int64)])[None, :],
            src_lengths=np.array([s], dtype=np.int64),
            tgt_lengths=np.array([t], dtype=np.int64),
            loss_targets=np.full((1, t), PAD_ID, dtype=np.int64),
            loss_mask=np.zeros((1, t), dtype=bool),
            src_extent=s,
            tgt_extent=t,
        )
        with T.no_grad():
            logits = forward(batch, params, config, table)
            logp = T.log_softmax(T.Tensor(logits.data[0, n - 1, :]))
        return logp.data

    return step


def greedy_steps(stepper: Stepper, cfg: DecodeConfig) -> Hypothesis:
    """Argmax decoding (ties to the lowest id) until EOS or the cap."""
    tokens: list[int] = []
    log_prob = 0.0
    for _ in range(cfg.max_new_tokens):
        logp = stepper(tokens)
        nxt = int(np.argmax(logp))
        tokens.append(nxt)
        log_prob += float(logp[nxt])
        if nxt == EOS_ID:
            return Hypothesis(tuple(tokens), log_prob, True)
    return Hypothesis(tuple(tokens), log_prob, False)


def beam_steps(stepper: Stepper, cfg: DecodeConfig) -> Hypothesis:
    """Length-normalized beam search over a stepper.

    Finished hypotheses accumulate in a pool; the search stops when no live
    hypothesis could still beat the best finished score even with the most
    optimistic length penalty. The pure-greedy rollout always participates
    in the final comparison, so the returned model score never falls below
    greedy's when alpha = 0.
    """
    live = [Hypothesis((), 0.0, False)]
    finished: list[Hypothesis] = []
    best_penalty = length_penalty(cfg.max_new_tokens, cfg.alpha)
    for _ in range(cfg.max_new_tokens):
        candidates: list[Hypothesis] = []
        for hyp in live:
            logp = stepper(hyp.tokens)
            # stable top-k: better log-prob first, lowest id on ties
            top = np.lexsort((np.arange(len(logp)), -logp))[: cfg.beam_size]
            for tok in top:
                candidates.append(Hypothesis(
                    hyp.tokens + (int(tok),),
                    hyp.log_prob + float(logp[tok]),
                    int(tok) == EOS_ID))
        candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
        live = []
        for cand in candidates:
            if cand.finished:
                finished.append(cand)
            elif len(live) < cfg.beam_size:
                live.append(cand)
        if not live:
            break
        if finished:
            best_done = max(h.score(cfg.alpha) for h in finished)
            optimistic = max(h.log_prob / best_penalty for h in live)
            if optimistic < best_done:
                break
    pool = finished + live + [greedy_steps(stepper, cfg)]
    pool.sort(key=lambda h: (-h.score(cfg.alpha), h.tokens))
    return pool[0]


def _strip(hyp: Hypothesis, vocab: Vocabulary) -> list[str]:
    ids = list(hyp.tokens)
    if ids and ids[-1] == EOS_ID:
        ids = ids[:-1]
    return vocab.decode(ids)


def greedy_decode(params: dict, config: ModelConfig, vocab: Vocabulary,
                  source_tokens: Sequence[str], cfg: DecodeConfig,
                  table: Optional[np.ndarray] = None) -> list[str]:
    """Greedy translation of one source sentence (EOS stripped)."""
    hyp = greedy_steps(make_stepper(params, config, vocab, source_tokens, table), cfg)
    return _strip(hyp, vocab)


def beam_decode(params: dict, config: ModelConfig, vocab: Vocabulary,
                source_tokens: Sequence[str], cfg: DecodeConfig,
                table: Optional[np.ndarray] = None) -> Hypothesis:
    """Beam-search translation of one source sentence; returns the best hypothesis."""
    return beam_steps(make_stepper(params, config, vocab, source_tokens, table), cfg)


def translate(params: dict, config: ModelConfig, vocab: Vocabulary,
              source_tokens: Sequence[str], cfg: DecodeConfig,
              table: Optional[np.ndarray] = None) -> list[str]:
    """Decode one sentence with beam size 1 -> greedy, otherwise beam search."""
    if cfg.beam_size == 1 and cfg.alpha == 0.0:
        return greedy_decode(params, config, vocab, source_tokens, cfg, table)
    return _strip(beam_decode(params, config, vocab, source_tokens, cfg, table), vocab)
