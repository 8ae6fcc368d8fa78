"""Label-smoothed training of the joint model with Adam and LR warmup.

The loss counts target-block positions only: the logit at concatenated
column S+t is matched against loss target t, and source columns and padded
target columns receive an exactly-zero gradient by construction (their
smoothed target rows are all zero).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .data import JointBatch, SentencePair, Vocabulary, make_joint_batch
from .model import ModelConfig, forward, init_params, save_checkpoint, sinusoidal_table

SCHEDULES = ("inv_sqrt", "cosine")


@dataclass
class TrainConfig:
    max_steps: int = 1000
    warmup_steps: int = 200
    peak_lr: float = 1e-3
    schedule: str = "inv_sqrt"
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    batch_size: int = 64
    seed: int = 0
    clip_norm: Optional[float] = None
    log_every: int = 50
    checkpoint_every: int = 0     # 0 = final checkpoint only
    eval_every: int = 0           # 0 = no held-out evaluation during training
    stop_accuracy: Optional[float] = None  # early stop once held-out accuracy reaches this

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.max_steps < 1 or self.warmup_steps < 1:
            raise ValueError("max_steps and warmup_steps must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def smoothed_loss(logits: T.Tensor, batch: JointBatch, smoothing: float) -> tuple[T.Tensor, int]:
    """Mean label-smoothed cross-entropy over counted target tokens.

    The smoothed target mixes (1 - eps) of the one-hot with eps of the
    uniform distribution over the whole vocabulary.
    """
    b, n, v = logits.shape
    s = batch.src_extent
    t = batch.tgt_extent
    count = int(batch.loss_mask.sum())
    if count == 0:
        raise ValueError("no counted target tokens in batch")
    smooth = np.zeros((b, n, v))
    rows, cols = np.nonzero(batch.loss_mask)
    smooth[rows, s + cols, :] = smoothing / v
    smooth[rows, s + cols, batch.loss_targets[rows, cols]] += 1.0 - smoothing
    logp = T.log_softmax(logits)
    loss = T.scale(T.tsum(T.mul(logp, T.Tensor(smooth))), -1.0 / count)
    return loss, count


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate at a 1-based step: linear warmup, then decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    if cfg.schedule == "inv_sqrt":
        return cfg.peak_lr * math.sqrt(cfg.warmup_steps / step)
    # single half-cosine from the peak down to 0 at max_steps
    if step >= cfg.max_steps:
        return 0.0
    span = cfg.max_steps - cfg.warmup_steps
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup_steps) / span))


class AdamState:
    """First/second moment buffers and the shared step counter."""

    def __init__(self, params: dict[str, T.Tensor]):
        self.step = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: dict[str, T.Tensor], state: AdamState, lr: float,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update in place; grads are consumed and cleared."""
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter {name}")
        grads[name] = g
    if cfg.clip_norm is not None:
        total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if total > cfg.clip_norm:
            factor = cfg.clip_norm / total
            grads = {k: g * factor for k, g in grads.items()}
    b1, b2 = cfg.adam_betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        p.grad = None


def heldout_accuracy(params: dict, config: ModelConfig, table: np.ndarray,
                     pairs: Sequence[SentencePair], vocab: Vocabulary,
                     batch_size: int = 64) -> float:
    """Teacher-forced token accuracy over held-out pairs."""
    correct = 0
    total = 0
    with T.no_grad():
        for start in range(0, len(pairs), batch_size):
            batch = make_joint_batch(pairs[start:start + batch_size], vocab)
            logits = forward(batch, params, config, table)
            pred = logits.data[:, batch.src_extent:, :].argmax(axis=-1)
            hit = (pred == batch.loss_targets) & batch.loss_mask
            correct += int(hit.sum())
            total += int(batch.loss_mask.sum())
    return correct / total if total else 0.0


def train(config: ModelConfig, cfg: TrainConfig, pairs: Sequence[SentencePair],
          vocab: Vocabulary, heldout: Sequence[SentencePair] = (),
          checkpoint_path=None, metrics_file=None,
          log: Optional[Callable[[str], None]] = None) -> dict:
    """Run the training loop; returns params plus a summary dictionary.

    Metrics-file lines are tab-separated ``step loss_per_token lr`` (the
    console log appends a tokens-per-second column). All randomness (init,
    batch order, dropout) derives from cfg.seed.
    """
    if not pairs:
        raise ValueError("no training pairs")
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_seed = int(seeds[0].generate_state(1)[0])
    order_rng = np.random.default_rng(seeds[1])
    drop_rng = np.random.default_rng(seeds[2])

    params = init_params(config, init_seed)
    state = AdamState(params)
    table = sinusoidal_table(config.max_positions, config.d_model)

    def emit(line: str, console: Optional[str] = None) -> None:
        # the metrics file must be bit-reproducible across identical runs,
        # so wall-clock throughput goes to the console line only
        if log is not None:
            log(console if console is not None else line)
        if metrics_file is not None:
            metrics_file.write(line + "\n")

    metrics: list[tuple[int, float, float]] = []
    step = 0
    stopped_early = False
    last_accuracy = None
    window_tokens = 0
    window_start = time.perf_counter()
    while step < cfg.max_steps and not stopped_early:
        for idx in _batched_order(order_rng, len(pairs), cfg.batch_size):
            step += 1
            batch = make_joint_batch([pairs[i] for i in idx], vocab)
            logits = forward(batch, params, config, table, rng=drop_rng, training=True)
            loss, count = smoothed_loss(logits, batch, cfg.label_smoothing)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise FloatingPointError(f"non-finite loss at step {step}")
            T.backward(loss)
            lr = lr_at(step, cfg)
            adam_step(params, state, lr, cfg)

            window_tokens += count
            if step % cfg.log_every == 0 or step == cfg.max_steps:
                elapsed = max(time.perf_counter() - window_start, 1e-9)
                line = f"{step}\t{loss_val:.6f}\t{lr:.6e}"
                emit(line, console=f"{line}\t{window_tokens / elapsed:.1f} tok/s")
                metrics.append((step, loss_val, lr))
                window_tokens = 0
                window_start = time.perf_counter()
            if cfg.checkpoint_every and checkpoint_path is not None \
                    and step % cfg.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, params, config, vocab)
            if cfg.eval_every and heldout and step % cfg.eval_every == 0:
                last_accuracy = heldout_accuracy(params, config, table, heldout, vocab)
                if cfg.stop_accuracy is not None and last_accuracy >= cfg.stop_accuracy:
                    stopped_early = True
                    break
            if step >= cfg.max_steps:
                break

    if heldout:
        last_accuracy = heldout_accuracy(params, config, table, heldout, vocab)
        emit(f"final\theldout_accuracy\t{last_accuracy:.6f}")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, config, vocab)
    return {
        "params": params,
        "steps": step,
        "metrics": metrics,
        "heldout_accuracy": last_accuracy,
        "stopped_early": stopped_early,
    }


def _batched_order(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk):
            yield chunk
