"""Band (locality) attention masks over a concatenated source++target axis.

A joint sequence lays out S source columns followed by T target columns.
For a window w (odd, or infinite):

* a source query at i may attend source keys j with ``|i - j| <= (w-1)//2``
  (clipped to the source block) and never any target key;
* a target query at p may attend keys q with ``p - w + 1 <= q <= p``
  (clipped at 0). Under the default ``cross`` policy that window is allowed
  to run left past the source/target boundary; under ``clip_full_source``
  it is clipped at the boundary and the query additionally sees the whole
  source block regardless of w.

An infinite window removes the band: source queries see the full source
block, target queries see everything up to and including themselves. Both
policies coincide there. ``True`` always means "may attend".
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

INF = math.inf

BOUNDARY_POLICIES = ("cross", "clip_full_source")


def validate_window(window) -> None:
    """Accept an odd positive int or math.inf; reject everything else."""
    if window == INF:
        return
    if isinstance(window, bool) or not isinstance(window, (int, np.integer)):
        raise ValueError(f"window must be an odd positive integer or inf, got {window!r}")
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd positive integer or inf, got {window}")


def validate_policy(policy: str) -> None:
    if policy not in BOUNDARY_POLICIES:
        raise ValueError(f"boundary policy must be one of {BOUNDARY_POLICIES}, got {policy!r}")


@dataclass(frozen=True)
class BandSpec:
    """Geometry of one band mask: window width and block extents."""

    window: object  # odd positive int or math.inf
    src_len: int
    tgt_len: int

    def __post_init__(self):
        validate_window(self.window)
        if self.src_len < 1:
            raise ValueError(f"source extent must be >= 1, got {self.src_len}")
        if self.tgt_len < 0:
            raise ValueError(f"target extent must be >= 0, got {self.tgt_len}")


def build_band_mask(spec: BandSpec, policy: str = "cross") -> np.ndarray:
    """Boolean (S+T, S+T) mask for one layer's window.

    Every row allows at least its own diagonal entry, so no query is ever
    left without a key.
    """
    validate_policy(policy)
    s, t = spec.src_len, spec.tgt_len
    n = s + t
    i = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    src_q = i < s
    src_k = j < s
    if spec.window == INF:
        src_allow = src_q & src_k
        tgt_allow = ~src_q & (j <= i)
    else:
        w = int(spec.window)
        half = (w - 1) // 2
        src_allow = src_q & src_k & (np.abs(i - j) <= half)
        tgt_window = (j <= i) & (j >= i - w + 1)
        if policy == "cross":
            tgt_allow = ~src_q & tgt_window
        else:
            tgt_allow = ~src_q & (src_k | ((j >= s) & tgt_window))
    return src_allow | tgt_allow


@lru_cache(maxsize=256)
def band_mask_set(windows: tuple, src_len: int, tgt_len: int,
                  policy: str = "cross") -> tuple[np.ndarray, ...]:
    """Per-layer band masks for one (S, T) geometry, cached and read-only."""
    out = []
    for w in windows:
        m = build_band_mask(BandSpec(w, src_len, tgt_len), policy)
        m.setflags(write=False)
        out.append(m)
    return tuple(out)


def build_padding_mask(src_lengths: np.ndarray, tgt_lengths: np.ndarray,
                       src_extent: int, tgt_extent: int) -> np.ndarray:
    """Boolean (B, S+T) key-validity mask: True at real (non-pad) columns."""
    src_lengths = np.asarray(src_lengths)
    tgt_lengths = np.asarray(tgt_lengths)
    if src_lengths.max(initial=0) > src_extent or tgt_lengths.max(initial=0) > tgt_extent:
        raise ValueError(
            f"row lengths exceed block extents: src {src_lengths.max()}/{src_extent}, "
            f"tgt {tgt_lengths.max()}/{tgt_extent}")
    src_part = np.arange(src_extent)[None, :] < src_lengths[:, None]
    tgt_part = np.arange(tgt_extent)[None, :] < tgt_lengths[:, None]
    return np.concatenate([src_part, tgt_part], axis=1)


def combine(band: np.ndarray, padding: np.ndarray) -> np.ndarray:
    """Intersect a band mask with per-row key padding.

    Padded keys are removed everywhere; padded *query* rows are then reset
    to self-only so no row ends up empty (their outputs are ignored).
    """
    if band.shape[0] != band.shape[1] or padding.shape[1] != band.shape[0]:
        raise ValueError(f"band {band.shape} and padding {padding.shape} do not agree")
    out = band[None, :, :] & padding[:, None, :]
    b_idx, q_idx = np.nonzero(~padding)
    out[b_idx, q_idx, :] = False
    out[b_idx, q_idx, q_idx] = True
    return out


def masks_for_batch(batch, windows, policy: str = "cross") -> list[np.ndarray]:
    """Combined (B, S+T, S+T) masks for every layer of a joint batch."""
    s = int(batch.src_extent)
    t = int(batch.tgt_extent)
    bands = band_mask_set(tuple(windows), s, t, policy)
    padding = build_padding_mask(batch.src_lengths, batch.tgt_lengths, s, t)
    return [combine(band, padding) for band in bands]
