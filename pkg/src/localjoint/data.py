"""Parallel-corpus handling: vocabulary, joint batches, synthetic tasks.

A batch concatenates each pair as [source tokens, EOS, padding | BOS,
target tokens, padding]: S columns of source block, T of target block.
Loss targets are the target tokens followed by EOS, aligned so the logit
at concatenated column S+t predicts loss target t.
"""

from __future__ import annotations

import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

SYNTHETIC_TASKS = ("copy", "reverse", "sort")


@dataclass
class SentencePair:
    source: list[str]
    target: list[str]


class Vocabulary:
    """Token <-> id mapping with fixed special ids 0..3."""

    def __init__(self, tokens: Sequence[str]):
        for tok in tokens:
            if tok in SPECIAL_TOKENS:
                raise ValueError(f"token collides with a special symbol: {tok!r}")
        self.token_of = list(SPECIAL_TOKENS) + list(tokens)
        if len(set(self.token_of)) != len(self.token_of):
            raise ValueError("duplicate tokens in vocabulary")
        self.id_of = {tok: i for i, tok in enumerate(self.token_of)}

    def __len__(self) -> int:
        return len(self.token_of)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def encode(self, tokens: Iterable[str]) -> list[int]:
        """Map tokens to ids, unknown tokens to UNK."""
        return [self.id_of.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token_of[i] for i in ids]

    def to_dict(self) -> dict:
        return {"tokens": self.token_of[len(SPECIAL_TOKENS):]}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"])

    @classmethod
    def build(cls, corpus: Iterable[SentencePair], max_size: int = 32000) -> "Vocabulary":
        """Most-frequent tokens over both sides, ties broken lexicographically.

        ``max_size`` caps the total size including the four specials.
        """
        if max_size < len(SPECIAL_TOKENS) + 1:
            raise ValueError(f"max_size must allow at least one real token, got {max_size}")
        counts: Counter = Counter()
        seen_pair = False
        for pair in corpus:
            seen_pair = True
            counts.update(pair.source)
            counts.update(pair.target)
        if not seen_pair or not counts:
            raise ValueError("cannot build a vocabulary from an empty corpus")
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        keep = [tok for tok, _ in ranked[: max_size - len(SPECIAL_TOKENS)]]
        return cls(keep)


@dataclass
class JointBatch:
    """Padded id arrays for a batch of concatenated source++target rows."""

    tokens: np.ndarray        # (B, S+T) int64
    positions: np.ndarray     # (B, S+T) int64, restart at 0 at column S
    lang: np.ndarray          # (B, S+T) int64, 0 = source, 1 = target
    src_lengths: np.ndarray   # (B,) real source columns incl. EOS
    tgt_lengths: np.ndarray   # (B,) real target columns incl. BOS
    loss_targets: np.ndarray  # (B, T) int64, target tokens + EOS, PAD elsewhere
    loss_mask: np.ndarray     # (B, T) bool, True where a loss is counted
    src_extent: int = field(default=0)
    tgt_extent: int = field(default=0)


def make_joint_batch(pairs: Sequence[SentencePair], vocab: Vocabulary) -> JointBatch:
    """Encode and pad sentence pairs into one joint batch."""
    if not pairs:
        raise ValueError("cannot batch zero sentence pairs")
    for idx, pair in enumerate(pairs):
        if not pair.source or not pair.target:
            raise ValueError(f"pair {idx} has an empty side")
    b = len(pairs)
    s = max(len(p.source) for p in pairs) + 1   # room for EOS
    t = max(len(p.target) for p in pairs) + 1   # room for BOS / trailing EOS

    tokens = np.full((b, s + t), PAD_ID, dtype=np.int64)
    loss_targets = np.full((b, t), PAD_ID, dtype=np.int64)
    src_lengths = np.zeros(b, dtype=np.int64)
    tgt_lengths = np.zeros(b, dtype=np.int64)
    for row, pair in enumerate(pairs):
        src_ids = vocab.encode(pair.source) + [EOS_ID]
        tgt_ids = vocab.encode(pair.target)
        tokens[row, : len(src_ids)] = src_ids
        tokens[row, s : s + 1 + len(tgt_ids)] = [BOS_ID] + tgt_ids
        loss_targets[row, : len(tgt_ids) + 1] = tgt_ids + [EOS_ID]
        src_lengths[row] = len(src_ids)
        tgt_lengths[row] = len(tgt_ids) + 1

    positions = np.concatenate([np.arange(s), np.arange(t)])
    lang = np.concatenate([np.zeros(s, dtype=np.int64), np.ones(t, dtype=np.int64)])
    return JointBatch(
        tokens=tokens,
        positions=np.tile(positions, (b, 1)),
        lang=np.tile(lang, (b, 1)),
        src_lengths=src_lengths,
        tgt_lengths=tgt_lengths,
        loss_targets=loss_targets,
        loss_mask=loss_targets != PAD_ID,
        src_extent=s,
        tgt_extent=t,
    )


def gen_synthetic(task: str, vocab_size: int, len_range: tuple[int, int],
                  n: int, seed: int) -> list[SentencePair]:
    """Deterministic toy pairs: copy, reverse, or ascending sort of digits."""
    if task not in SYNTHETIC_TASKS:
        raise ValueError(f"task must be one of {SYNTHETIC_TASKS}, got {task!r}")
    if vocab_size < 2:
        raise ValueError(f"synthetic vocab_size must be >= 2, got {vocab_size}")
    lo, hi = len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid length range {len_range}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        length = int(rng.integers(lo, hi + 1))
        values = rng.integers(0, vocab_size, size=length)
        source = [str(v) for v in values]
        if task == "copy":
            target = list(source)
        elif task == "reverse":
            target = source[::-1]
        else:
            target = [str(v) for v in np.sort(values)]
        pairs.append(SentencePair(source, target))
    return pairs


def read_parallel(src_path, tgt_path) -> list[SentencePair]:
    """Read a parallel corpus of two line-aligned UTF-8 files.

    Tokenization is plain whitespace splitting; pairs with a blank side are
    skipped (a single warning reports how many).
    """
    with open(src_path, encoding="utf-8") as fh:
        src_lines = fh.read().splitlines()
    with open(tgt_path, encoding="utf-8") as fh:
        tgt_lines = fh.read().splitlines()
    if len(src_lines) != len(tgt_lines):
        raise ValueError(
            f"line counts differ: {src_path} has {len(src_lines)}, "
            f"{tgt_path} has {len(tgt_lines)}")
    pairs = []
    skipped = 0
    for src, tgt in zip(src_lines, tgt_lines):
        source, target = src.split(), tgt.split()
        if not source or not target:
            skipped += 1
            continue
        pairs.append(SentencePair(source, target))
    if skipped:
        warnings.warn(f"skipped {skipped} pair(s) with a blank side")
    return pairs
