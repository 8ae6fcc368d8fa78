"""Decoder-only joint source-target model with per-layer band masks.

The whole concatenated row passes through pre-norm residual blocks::

    h = x + Drop(MHA(LN(x), mask_l))
    x' = h + Drop(FFN(LN(h)))

followed by a final layer norm and a projection onto the vocabulary
(the token embedding transposed, when tied). Layer l applies the band
mask built from windows[l].
"""

from __future__ import annotations

import json
import math
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .data import JointBatch, Vocabulary
from .masking import INF, masks_for_batch, validate_policy, validate_window

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"BJLM"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    vocab_size: int
    windows: tuple
    dropout: float = 0.1
    max_positions: int = 1024
    tie_embeddings: bool = True
    boundary_policy: str = "cross"

    def __post_init__(self):
        self.windows = tuple(self.windows)
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model < 1 or self.d_ff < 1 or self.max_positions < 1:
            raise ValueError("d_model, d_ff and max_positions must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 5:
            raise ValueError(f"vocab_size must cover the specials plus one token, "
                             f"got {self.vocab_size}")
        if len(self.windows) != self.n_layers:
            raise ValueError(
                f"got {len(self.windows)} windows for {self.n_layers} layers")
        for w in self.windows:
            validate_window(w)
        validate_policy(self.boundary_policy)
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        finite = [w for w in self.windows if w != INF]
        if any(b < a for a, b in zip(finite, finite[1:])):
            warnings.warn("window schedule is not nondecreasing")


# Architecture presets; vocab_size is a placeholder until a corpus fixes it.
PRESETS: dict[str, dict] = {
    "toy": dict(n_layers=4, d_model=64, d_ff=256, n_heads=4,
                windows=(3, 5, 7, 9), dropout=0.0, vocab_size=14),
    "toy-mini": dict(n_layers=2, d_model=8, d_ff=16, n_heads=2,
                     windows=(3, 5), dropout=0.0, vocab_size=13),
    "iwslt": dict(n_layers=14, d_model=256, d_ff=1024, n_heads=4,
                  windows=(3, 5, 7, 9, 11, 13, 15, 17, 21, 25, 29, 33, 37, 41),
                  dropout=0.1, vocab_size=31000),
    "wmt-big": dict(n_layers=14, d_model=1024, d_ff=4096, n_heads=16,
                    windows=(7,) + (15,) + (31,) + (63,) * 11,
                    dropout=0.1, vocab_size=32000),
}


def make_config(preset: str, **overrides) -> ModelConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    fields = dict(PRESETS[preset])
    fields.update({k: v for k, v in overrides.items() if v is not None})
    return ModelConfig(**fields)


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical parameter names and shapes, in storage order."""
    d, ff, v = config.d_model, config.d_ff, config.vocab_size
    shapes = [("token_embedding", (v, d)), ("lang_embedding", (2, d))]
    for i in range(config.n_layers):
        prefix = f"layers.{i}."
        shapes += [
            (prefix + "ln1.gain", (d,)), (prefix + "ln1.bias", (d,)),
            (prefix + "attn.wq", (d, d)), (prefix + "attn.bq", (d,)),
            (prefix + "attn.wk", (d, d)), (prefix + "attn.bk", (d,)),
            (prefix + "attn.wv", (d, d)), (prefix + "attn.bv", (d,)),
            (prefix + "attn.wo", (d, d)), (prefix + "attn.bo", (d,)),
            (prefix + "ln2.gain", (d,)), (prefix + "ln2.bias", (d,)),
            (prefix + "ffn.w1", (d, ff)), (prefix + "ffn.b1", (ff,)),
            (prefix + "ffn.w2", (ff, d)), (prefix + "ffn.b2", (d,)),
        ]
    shapes += [("final_ln.gain", (d,)), ("final_ln.bias", (d,))]
    if not config.tie_embeddings:
        shapes.append(("output_projection", (v, d)))
    return shapes


def count_params(config: ModelConfig) -> int:
    """Closed-form trainable parameter count."""
    d, ff, v, n = config.d_model, config.d_ff, config.vocab_size, config.n_layers
    per_layer = 4 * (d * d + d) + 2 * d * ff + ff + d + 4 * d
    total = v * d + 2 * d + n * per_layer + 2 * d
    if not config.tie_embeddings:
        total += v * d
    return total


def init_params(config: ModelConfig, seed: int) -> dict[str, T.Tensor]:
    """Fresh trainable parameters, deterministic per seed.

    Embeddings are Normal with std 0.5/sqrt(d) so a freshly initialized
    model predicts near-uniformly through the tied output projection;
    linear weights are Xavier-uniform, biases zero, layer-norm gains one.
    """
    rng = np.random.default_rng(seed)
    d = config.d_model
    emb_std = 0.5 / math.sqrt(d)

    def xavier(fan_in, fan_out, shape):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=shape)

    params: dict[str, T.Tensor] = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if name in ("token_embedding", "lang_embedding"):
            data = rng.normal(0.0, emb_std, size=shape)
        elif name == "output_projection":
            data = xavier(shape[1], shape[0], shape)
        elif leaf in ("wq", "wk", "wv", "wo", "w1", "w2"):
            data = xavier(shape[0], shape[1], shape)
        elif leaf == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = T.Tensor(data, requires_grad=True)
    return params


def sinusoidal_table(max_positions: int, d_model: int) -> np.ndarray:
    """Fixed positional table: sin on even columns, cos on odd, paired freqs."""
    pos = np.arange(max_positions, dtype=np.float64)[:, None]
    col = np.arange(d_model)
    angle = pos / np.power(10000.0, (2 * (col // 2)) / d_model)
    return np.where(col % 2 == 0, np.sin(angle), np.cos(angle))


def embed(batch: JointBatch, params: dict, table: np.ndarray, config: ModelConfig,
          rng: Optional[np.random.Generator] = None, training: bool = False) -> T.Tensor:
    """Sum of scaled token, fixed positional, and language embeddings."""
    if int(batch.positions.max()) >= table.shape[0]:
        raise ValueError(
            f"position {int(batch.positions.max())} exceeds the positional table; "
            f"increase max_positions (currently {table.shape[0]})")
    tok = T.scale(T.embedding(params["token_embedding"], batch.tokens),
                  math.sqrt(config.d_model))
    lang = T.embedding(params["lang_embedding"], batch.lang)
    x = tok + T.Tensor(table[batch.positions]) + lang
    return T.dropout(x, config.dropout, rng, training)


def _heads(x: T.Tensor, b: int, n: int, h: int, dh: int) -> T.Tensor:
    return T.transpose(T.reshape(x, (b, n, h, dh)), (0, 2, 1, 3))


def attention_block(x: T.Tensor, mask: np.ndarray, params: dict, prefix: str,
                    config: ModelConfig, rng: Optional[np.random.Generator] = None,
                    training: bool = False) -> T.Tensor:
    """One pre-norm residual block: masked multi-head attention, then FFN."""
    b, n, d = x.shape
    h = config.n_heads
    dh = d // h

    def p(name):
        return params[prefix + name]

    normed = T.layer_norm(x, p("ln1.gain"), p("ln1.bias"), LN_EPS)
    q = _heads(T.matmul(normed, p("attn.wq")) + p("attn.bq"), b, n, h, dh)
    k = _heads(T.matmul(normed, p("attn.wk")) + p("attn.bk"), b, n, h, dh)
    v = _heads(T.matmul(normed, p("attn.wv")) + p("attn.bv"), b, n, h, dh)
    scores = T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    weights = T.masked_softmax(scores, mask[:, None, :, :])
    mixed = T.reshape(T.transpose(T.matmul(weights, v), (0, 2, 1, 3)), (b, n, d))
    attn_out = T.matmul(mixed, p("attn.wo")) + p("attn.bo")
    x = x + T.dropout(attn_out, config.dropout, rng, training)

    normed = T.layer_norm(x, p("ln2.gain"), p("ln2.bias"), LN_EPS)
    hidden = T.relu(T.matmul(normed, p("ffn.w1")) + p("ffn.b1"))
    ffn_out = T.matmul(hidden, p("ffn.w2")) + p("ffn.b2")
    return x + T.dropout(ffn_out, config.dropout, rng, training)


def forward(batch: JointBatch, params: dict, config: ModelConfig,
            table: Optional[np.ndarray] = None,
            masks: Optional[list[np.ndarray]] = None,
            rng: Optional[np.random.Generator] = None,
            training: bool = False) -> T.Tensor:
    """Logits (B, S+T, V) for a joint batch."""
    if table is None:
        table = sinusoidal_table(config.max_positions, config.d_model)
    if masks is None:
        masks = masks_for_batch(batch, config.windows, config.boundary_policy)
    x = embed(batch, params, table, config, rng, training)
    for i in range(config.n_layers):
        x = attention_block(x, masks[i], params, f"layers.{i}.", config, rng, training)
    x = T.layer_norm(x, params["final_ln.gain"], params["final_ln.bias"], LN_EPS)
    out = params["token_embedding"] if config.tie_embeddings else params["output_projection"]
    return T.matmul(x, T.transpose(out, (1, 0)))


# --- checkpoint serialization ------------------------------------------------
#
# Layout (all integers little-endian):
#   magic "BJLM" | u32 version | u64 metadata length | metadata (UTF-8 JSON)
#   per parameter: u64 name length | name | u32 rank | rank * u64 extents
#                  | raw float64 data
#   trailing u32 CRC32 of every byte after the magic.


class CheckpointError(Exception):
    """Base for checkpoint load failures; ``code`` names the failure kind."""

    code = "checkpoint_error"


class BadMagicError(CheckpointError):
    code = "bad_magic"


class VersionError(CheckpointError):
    code = "bad_version"


class TruncatedError(CheckpointError):
    code = "truncated"


class ChecksumError(CheckpointError):
    code = "bad_checksum"


def _config_to_meta(config: ModelConfig) -> dict:
    d = asdict(config)
    d["windows"] = ["inf" if w == INF else int(w) for w in config.windows]
    return d


def _config_from_meta(d: dict) -> ModelConfig:
    d = dict(d)
    d["windows"] = tuple(INF if w == "inf" else int(w) for w in d["windows"])
    return ModelConfig(**d)


def save_checkpoint(path, params: dict, config: ModelConfig, vocab: Vocabulary) -> None:
    """Write params + config + vocab in the binary format described above."""
    meta = json.dumps(
        {"config": _config_to_meta(config), "vocab": vocab.to_dict()},
        sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += struct.pack("<I", CHECKPOINT_VERSION)
    body += struct.pack("<Q", len(meta))
    body += meta
    for name, t in params.items():
        name_b = name.encode("utf-8")
        body += struct.pack("<Q", len(name_b))
        body += name_b
        body += struct.pack("<I", t.data.ndim)
        for extent in t.data.shape:
            body += struct.pack("<Q", extent)
        body += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(bytes(body))


def load_checkpoint(path) -> tuple[dict, ModelConfig, Vocabulary]:
    """Read a checkpoint, verifying magic, version, structure, and CRC."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC):
        raise TruncatedError(f"{path}: file shorter than the magic")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}")
    body = blob[4:]
    if len(body) < 4:
        raise TruncatedError(f"{path}: no room for the checksum")

    offset = 0
    limit = len(body) - 4  # payload ends where the CRC begins

    def take(n, what):
        nonlocal offset
        if offset + n > limit:
            raise TruncatedError(f"{path}: truncated while reading {what}")
        chunk = body[offset:offset + n]
        offset += n
        return chunk

    version = struct.unpack("<I", take(4, "version"))[0]
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    meta_len = struct.unpack("<Q", take(8, "metadata length"))[0]
    meta = json.loads(take(meta_len, "metadata").decode("utf-8"))

    params: dict[str, T.Tensor] = {}
    while offset < limit:
        name_len = struct.unpack("<Q", take(8, "parameter name length"))[0]
        name = take(name_len, "parameter name").decode("utf-8")
        rank = struct.unpack("<I", take(4, f"rank of {name}"))[0]
        shape = tuple(struct.unpack("<Q", take(8, f"extent of {name}"))[0]
                      for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        raw = take(8 * count, f"data of {name}")
        data = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        params[name] = T.Tensor(data, requires_grad=True)

    stored = struct.unpack("<I", body[limit:])[0]
    if zlib.crc32(body[:limit]) != stored:
        raise ChecksumError(f"{path}: CRC32 mismatch")

    config = _config_from_meta(meta["config"])
    vocab = Vocabulary.from_dict(meta["vocab"])
    if config.vocab_size != len(vocab):
        raise CheckpointError(
            f"{path}: config vocab_size {config.vocab_size} != stored vocabulary {len(vocab)}")
    expected = dict(param_shapes(config))
    for name, t in params.items():
        if name not in expected or expected[name] != t.data.shape:
            raise CheckpointError(f"{path}: unexpected parameter {name} {t.data.shape}")
    if set(params) != set(expected):
        raise CheckpointError(f"{path}: parameter set does not match the config")
    return params, config, vocab
