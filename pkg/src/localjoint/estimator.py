"""Scikit-learn style estimator facade over the translation stack.

``fit`` takes parallel lists of source/target sentences (whitespace
strings or token lists), builds a joint vocabulary, and trains the model;
``predict`` decodes translations; ``score`` returns corpus BLEU / 100.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import SentencePair, Vocabulary
from .evaluation import corpus_bleu
from .inference import DecodeConfig, translate
from .model import load_checkpoint, make_config, save_checkpoint, sinusoidal_table
from .training import TrainConfig, train


def _as_token_lists(x, name: str) -> list[list[str]]:
    if isinstance(x, str) or not isinstance(x, (list, tuple, np.ndarray)):
        raise TypeError(f"{name} must be a sequence of sentences, got {type(x).__name__}")
    out = []
    for i, sent in enumerate(x):
        if isinstance(sent, str):
            tokens = sent.split()
        elif isinstance(sent, (list, tuple)) and all(isinstance(t, str) for t in sent):
            tokens = list(sent)
        else:
            raise TypeError(f"{name}[{i}] must be a string or a list of token strings")
        if not tokens:
            raise ValueError(f"{name}[{i}] is empty")
        out.append(tokens)
    return out


class JointAttentionTranslator(BaseEstimator):
    """Trainable translator with banded joint source-target self-attention.

    Parameters mirror the preset fields; any architecture argument left as
    None falls back to the chosen preset. Learned state lives in the
    underscore attributes (params_, vocab_, config_) after ``fit``.
    """

    def __init__(self, preset: str = "toy", n_layers: Optional[int] = None,
                 d_model: Optional[int] = None, d_ff: Optional[int] = None,
                 n_heads: Optional[int] = None, windows: Optional[tuple] = None,
                 dropout: Optional[float] = None, boundary_policy: Optional[str] = None,
                 tie_embeddings: Optional[bool] = None, max_vocab: int = 32000,
                 max_steps: int = 2000, warmup_steps: int = 200, peak_lr: float = 1e-3,
                 schedule: str = "inv_sqrt", label_smoothing: float = 0.1,
                 batch_size: int = 64, clip_norm: Optional[float] = None,
                 seed: int = 0, beam_size: int = 1, alpha: float = 0.0,
                 max_new_tokens: int = 64, validation_fraction: float = 0.0,
                 stop_accuracy: Optional[float] = None, verbose: bool = False):
        self.preset = preset
        self.n_layers = n_layers
        self.d_model = d_model
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.windows = windows
        self.dropout = dropout
        self.boundary_policy = boundary_policy
        self.tie_embeddings = tie_embeddings
        self.max_vocab = max_vocab
        self.max_steps = max_steps
        self.warmup_steps = warmup_steps
        self.peak_lr = peak_lr
        self.schedule = schedule
        self.label_smoothing = label_smoothing
        self.batch_size = batch_size
        self.clip_norm = clip_norm
        self.seed = seed
        self.beam_size = beam_size
        self.alpha = alpha
        self.max_new_tokens = max_new_tokens
        self.validation_fraction = validation_fraction
        self.stop_accuracy = stop_accuracy
        self.verbose = verbose

    def fit(self, X, y):
        sources = _as_token_lists(X, "X")
        targets = _as_token_lists(y, "y")
        if len(sources) != len(targets):
            raise ValueError(f"X has {len(sources)} sentences but y has {len(targets)}")
        pairs = [SentencePair(s, t) for s, t in zip(sources, targets)]
        vocab = Vocabulary.build(pairs, max_size=self.max_vocab)
        config = make_config(
            self.preset, vocab_size=len(vocab), n_layers=self.n_layers,
            d_model=self.d_model, d_ff=self.d_ff, n_heads=self.n_heads,
            windows=self.windows, dropout=self.dropout,
            boundary_policy=self.boundary_policy, tie_embeddings=self.tie_embeddings)
        train_cfg = TrainConfig(
            max_steps=self.max_steps, warmup_steps=self.warmup_steps,
            peak_lr=self.peak_lr, schedule=self.schedule,
            label_smoothing=self.label_smoothing, batch_size=self.batch_size,
            clip_norm=self.clip_norm, seed=self.seed,
            eval_every=50 if self.stop_accuracy is not None else 0,
            stop_accuracy=self.stop_accuracy)
        n_val = int(len(pairs) * self.validation_fraction)
        train_pairs = pairs[: len(pairs) - n_val] if n_val else pairs
        heldout = pairs[len(pairs) - n_val:] if n_val else []
        if self.stop_accuracy is not None and not heldout:
            heldout = train_pairs
        result = train(config, train_cfg, train_pairs, vocab, heldout=heldout,
                       log=print if self.verbose else None)
        self.params_ = result["params"]
        self.config_ = config
        self.vocab_ = vocab
        self.table_ = sinusoidal_table(config.max_positions, config.d_model)
        self.history_ = result["metrics"]
        self.n_steps_ = result["steps"]
        self.heldout_accuracy_ = result["heldout_accuracy"]
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this JointAttentionTranslator is not fitted; call fit first")

    def predict(self, X) -> list:
        """Translate each sentence; returns strings for string inputs."""
        self._check_fitted()
        sources = _as_token_lists(X, "X")
        cfg = DecodeConfig(max_new_tokens=self.max_new_tokens,
                           beam_size=self.beam_size, alpha=self.alpha)
        outputs = [translate(self.params_, self.config_, self.vocab_, src, cfg, self.table_)
                   for src in sources]
        if all(isinstance(sent, str) for sent in X):
            return [" ".join(tokens) for tokens in outputs]
        return outputs

    def score(self, X, y) -> float:
        """Corpus BLEU of the predictions against y, scaled to [0, 1]."""
        self._check_fitted()
        refs = _as_token_lists(y, "y")
        hyps = [_hyp if isinstance(_hyp, list) else _hyp.split()
                for _hyp in self.predict(X)]
        return corpus_bleu(hyps, refs).bleu / 100.0

    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(path, self.params_, self.config_, self.vocab_)

    @classmethod
    def from_checkpoint(cls, path, **decode_kwargs) -> "JointAttentionTranslator":
        est = cls(**decode_kwargs)
        est.params_, est.config_, est.vocab_ = load_checkpoint(path)
        est.table_ = sinusoidal_table(est.config_.max_positions, est.config_.d_model)
        return est
