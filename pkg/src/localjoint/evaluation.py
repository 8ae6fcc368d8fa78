"""Corpus-level BLEU (single reference, no smoothing) and token accuracy."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import JointBatch

MAX_ORDER = 4


@dataclass
class BleuReport:
    bleu: float                 # 0..100
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def line(self) -> str:
        p = "/".join(f"{100.0 * x:.1f}" for x in self.precisions)
        return (f"BLEU = {self.bleu:.2f} ({p}, BP={self.brevity_penalty:.3f}, "
                f"hyp={self.hyp_len}, ref={self.ref_len})")


def _ngrams(tokens: Sequence[str], order: int) -> Counter:
    return Counter(tuple(tokens[i:i + order]) for i in range(len(tokens) - order + 1))


def corpus_bleu(hypotheses: Sequence[Sequence[str]],
                references: Sequence[Sequence[str]]) -> BleuReport:
    """Geometric mean of clipped 1..4-gram precisions times a brevity penalty.

    Counts are pooled over the corpus before dividing. An order with no
    hypothesis n-grams at all (every sentence shorter than n) is vacuously
    perfect, which keeps BLEU(x, x) = 100 for any nonempty corpus; an order
    with proposals but zero matches makes the whole score 0.

    Worked examples (hand computation):

    * Clipping: hypothesis ``the the the the the`` against reference
      ``the cat sat`` proposes five unigrams but the reference supplies
      ``the`` only once, so the clipped unigram precision is 1/5 = 0.2;
      no hypothesis bigram occurs in the reference, so the bigram
      precision is 0 and the overall score is 0.
    * Brevity penalty: a hypothesis equal to the first 7 tokens of a
      10-token reference has all precisions 1, hyp_len 7 < ref_len 10,
      so BP = exp(1 - 10/7) = 0.6514 and BLEU = 65.1439.
    """
    if len(hypotheses) != len(references):
        raise ValueError(f"got {len(hypotheses)} hypotheses for {len(references)} references")
    if not hypotheses:
        raise ValueError("corpus_bleu needs at least one pair")
    matched = [0] * MAX_ORDER
    proposed = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(hyp, n)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(ref, n)
            proposed[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())

    precisions = tuple(
        (m / p) if p > 0 else 1.0 for m, p in zip(matched, proposed))
    if hyp_len == 0:
        return BleuReport(0.0, (0.0,) * MAX_ORDER, 0.0, hyp_len, ref_len)
    if hyp_len >= ref_len:
        bp = 1.0
    else:
        bp = math.exp(1.0 - ref_len / hyp_len)
    if any(p == 0.0 for p in precisions):
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len)


def token_accuracy(logits, batch: JointBatch) -> float:
    """Fraction of counted target positions whose argmax hits the loss target."""
    # ndarray.data is a memoryview, so the Tensor unwrap must not duck-type
    data = logits if isinstance(logits, np.ndarray) else np.asarray(logits.data)
    pred = data[:, batch.src_extent:, :].argmax(axis=-1)
    total = int(batch.loss_mask.sum())
    if total == 0:
        raise ValueError("no counted target tokens in batch")
    hit = (pred == batch.loss_targets) & batch.loss_mask
    return int(hit.sum()) / total
