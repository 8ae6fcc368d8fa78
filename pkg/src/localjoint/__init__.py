"""Joint source-target translation with banded local self-attention."""

from .data import SentencePair, Vocabulary, gen_synthetic, make_joint_batch, read_parallel
from .tensor import Tensor, backward, no_grad
from .estimator import JointAttentionTranslator
from .evaluation import BleuReport, corpus_bleu, token_accuracy
from .inference import DecodeConfig, Hypothesis, beam_decode, greedy_decode, translate
from .masking import INF, BandSpec, build_band_mask, build_padding_mask, combine
from .model import (ModelConfig, PRESETS, count_params, forward, init_params,
                    load_checkpoint, make_config, save_checkpoint, sinusoidal_table)
from .training import TrainConfig, adam_step, lr_at, smoothed_loss, train

__version__ = "0.1.0"

__all__ = [
    "BandSpec",
    "BleuReport",
    "DecodeConfig",
    "Hypothesis",
    "INF",
    "JointAttentionTranslator",
    "ModelConfig",
    "PRESETS",
    "SentencePair",
    "Tensor",
    "TrainConfig",
    "Vocabulary",
    "adam_step",
    "backward",
    "beam_decode",
    "build_band_mask",
    "build_padding_mask",
    "combine",
    "corpus_bleu",
    "count_params",
    "forward",
    "gen_synthetic",
    "greedy_decode",
    "init_params",
    "load_checkpoint",
    "lr_at",
    "make_config",
    "make_joint_batch",
    "no_grad",
    "read_parallel",
    "save_checkpoint",
    "sinusoidal_table",
    "smoothed_loss",
    "token_accuracy",
    "train",
    "translate",
]
