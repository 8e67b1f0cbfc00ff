"""Panoramic attention kernels.

Feature maps are ``Tensor`` objects of shape ``(H', W', C)``; flattening to
tokens is row-major, so token ``y * W' + x`` sits at row ``y``, column ``x``.

The PSC branch matches unshifted query tokens against a reference map that
has been rolled right along the width by ``W' // p`` columns, and only inside
a ``(2s+1) x (2s+1)`` window. Masked keys get an additive ``-1e9`` before the
softmax rather than a multiplicative zero, which would leave them with
weight ``exp(0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import ConfigError, DimensionError, UsageError
from .tensor import (
    Tensor,
    add_constant,
    concat,
    matmul,
    reshape,
    roll,
    scale,
    softmax_rows,
    transpose,
)

MASK_PENALTY = -1e9
PSC_MODES = ("psc", "none", "cross")
MIDDLE_MODES = ("parallel", "serial")


@dataclass(frozen=True)
class PSCConfig:
    """Model hyperparameters.

    ``psc_mode`` selects the block's previous-frame branch: ``"psc"`` (shift +
    window), ``"cross"`` (plain dense attention on the previous frame) or
    ``"none"`` (branch removed). ``middle`` chooses whether that branch is
    summed with cross-attention (``"parallel"``) or applied after it.
    """

    p: int = 2
    s: int = 7
    h: int = 8
    channels: int = 32
    num_blocks: int = 2
    patch: int = 8
    m_max: int = 3
    wrap_window: bool = False
    psc_mode: str = "psc"
    middle: str = "parallel"

    def __post_init__(self):
        if self.p < 1:
            raise ConfigError(f"shift divisor p must be >= 1, got {self.p}")
        if self.s < 0:
            raise ConfigError(f"window radius s must be >= 0, got {self.s}")
        if self.h < 1 or self.channels % self.h:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.h})")
        if self.num_blocks < 1:
            raise ConfigError("num_blocks must be >= 1")
        if self.patch < 1:
            raise ConfigError("patch size must be >= 1")
        if self.m_max < 1:
            raise ConfigError("m_max must be >= 1")
        if self.psc_mode not in PSC_MODES:
            raise ConfigError(f"psc_mode must be one of {PSC_MODES}")
        if self.middle not in MIDDLE_MODES:
            raise ConfigError(f"middle must be one of {MIDDLE_MODES}")

    @property
    def d_model(self) -> int:
        return self.channels // self.h

    @property
    def num_labels(self) -> int:
        return self.m_max + 1


@dataclass(frozen=True, eq=False)
class WindowMask:
    height: int
    width: int
    s: int
    wrap: bool
    allow: np.ndarray
    _penalty: dict = field(default_factory=dict, repr=False)

    @property
    def tokens(self) -> int:
        return self.height * self.width

    @property
    def all_true(self) -> bool:
        return bool(self.allow.all())

    def penalty(self, dtype) -> np.ndarray:
        """Additive logit mask: 0 where allowed, ``MASK_PENALTY`` elsewhere."""
        key = np.dtype(dtype).str
        if key not in self._penalty:
            arr = np.where(self.allow, 0.0, MASK_PENALTY).astype(dtype)
            arr.setflags(write=False)
            self._penalty[key] = arr
        return self._penalty[key]


@dataclass
class ProjectedTokens:
    q: Tensor
    k: Tensor
    v: Tensor

    def __post_init__(self):
        if not (self.q.ndim == self.k.ndim == self.v.ndim == 2):
            raise DimensionError("projected tokens must be 2-D (tokens x channels)")
        if self.k.shape[0] != self.v.shape[0] or self.q.shape[1] != self.k.shape[1]:
            raise DimensionError(f"Q/K/V shapes disagree: {self.q.shape} {self.k.shape} {self.v.shape}")


@dataclass
class AttentionParams:
    """Per-head projections stored side by side: head ``i`` owns columns
    ``i*d_model:(i+1)*d_model`` of ``wq``, ``wk`` and ``wv``."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def tensors(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    def head(self, i: int, heads: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = self.wq.shape[1] // heads
        cols = slice(i * d, (i + 1) * d)
        return self.wq.data[:, cols], self.wk.data[:, cols], self.wv.data[:, cols]


def shift_amount(width: int, p: int) -> int:
    if p < 1:
        raise ConfigError(f"shift divisor p must be >= 1, got {p}")
    return (width // p) % width


def circular_shift_width(feat: Tensor, p: int) -> Tensor:
    """Roll ``feat`` right along the width by ``W' // p`` columns.

    ``out[:, w] = feat[:, (w - delta) % W']``: the rightmost ``delta`` columns
    move to the left edge.
    """
    if feat.ndim != 3:
        raise DimensionError(f"expected a (H', W', C) feature map, got {feat.shape}")
    delta = shift_amount(feat.shape[1], p)
    if delta == 0:
        return feat
    return roll(feat, delta, axis=1)


@lru_cache(maxsize=64)
def build_window_mask(height: int, width: int, s: int, wrap: bool = False) -> WindowMask:
    """Boolean ``(H'W', H'W')`` matrix allowing key ``(i, j)`` for query ``(x, y)``
    iff ``|x - i| <= s`` and ``|y - j| <= s``.

    With ``wrap`` the column distance is measured around the panorama.
    """
    if height < 1 or width < 1 or s < 0:
        raise ConfigError(f"invalid window mask request {height}x{width}, s={s}")
    rows = np.repeat(np.arange(height), width)
    cols = np.tile(np.arange(width), height)
    dr = np.abs(rows[:, None] - rows[None, :])
    dc = np.abs(cols[:, None] - cols[None, :])
    if wrap:
        dc = np.minimum(dc, width - dc)
    allow = (dr <= s) & (dc <= s)
    allow.setflags(write=False)
    return WindowMask(height, width, s, wrap, allow)


def _attend(q: Tensor, k: Tensor, v: Tensor, mask: WindowMask | None, scale_dim: int) -> Tensor:
    if scale_dim <= 0:
        raise UsageError("scale_dim must be positive")
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    logits = scale(matmul(q, kt), 1.0 / math.sqrt(scale_dim))
    if mask is not None and not mask.all_true:
        logits = add_constant(logits, mask.penalty(logits.dtype))
    return matmul(softmax_rows(logits), v)


def psc_attention(tokens: ProjectedTokens, mask: WindowMask, scale_dim: int) -> Tensor:
    """Single-head masked scaled-dot-product attention, ``(HW, C)`` output."""
    n, m = tokens.q.shape[0], tokens.k.shape[0]
    if mask.tokens != n or mask.tokens != m:
        raise DimensionError(f"mask covers {mask.tokens} tokens, got {n} queries and {m} keys")
    return _attend(tokens.q, tokens.k, tokens.v, mask, scale_dim)


def dense_attention(tokens: ProjectedTokens, scale_dim: int) -> Tensor:
    return _attend(tokens.q, tokens.k, tokens.v, None, scale_dim)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, c = x.shape
    return transpose(reshape(x, (n, heads, c // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, d = x.shape
    return reshape(transpose(x, (1, 0, 2)), (n, h * d))


def multi_head(params: AttentionParams, queries: Tensor, keys: Tensor, heads: int, mask: WindowMask | None) -> Tensor:
    """Token-level multi-head attention; ``queries`` (N, C), ``keys`` (M, C)."""
    c = queries.shape[1]
    if keys.shape[1] != c or params.wq.shape != (c, c):
        raise DimensionError(f"channel mismatch: queries {queries.shape}, keys {keys.shape}, wq {params.wq.shape}")
    q = _split_heads(matmul(queries, params.wq), heads)
    k = _split_heads(matmul(keys, params.wk), heads)
    v = _split_heads(matmul(keys, params.wv), heads)
    out = _attend(q, k, v, mask, c // heads)
    return matmul(_merge_heads(out), params.wo)


def _tokens(feat: Tensor) -> Tensor:
    h, w, c = feat.shape
    return reshape(feat, (h * w, c))


def multi_head_psc(params: AttentionParams, query_feat: Tensor, ref_feat: Tensor, cfg: PSCConfig) -> Tensor:
    if query_feat.ndim != 3 or query_feat.shape != ref_feat.shape:
        raise DimensionError(f"query {query_feat.shape} and reference {ref_feat.shape} maps must match")
    h, w, c = query_feat.shape
    shifted = circular_shift_width(ref_feat, cfg.p)
    mask = build_window_mask(h, w, cfg.s, cfg.wrap_window)
    out = multi_head(params, _tokens(query_feat), _tokens(shifted), cfg.h, mask)
    return reshape(out, (h, w, c))


def dense_cross_attention(params: AttentionParams, query_feat: Tensor, ref_bank: Sequence[Tensor], heads: int) -> Tensor:
    """Multi-head attention over the concatenated tokens of every reference map."""
    if not ref_bank:
        raise UsageError("reference bank is empty")
    h, w, c = query_feat.shape
    for ref in ref_bank:
        if ref.ndim != 3 or ref.shape[2] != c:
            raise DimensionError(f"reference map {ref.shape} does not have {c} channels")
    refs = [_tokens(r) for r in ref_bank]
    keys = refs[0] if len(refs) == 1 else concat(refs, axis=0)
    out = multi_head(params, _tokens(query_feat), keys, heads, None)
    return reshape(out, (h, w, c))


def windowed_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, s: int, scale_dim: int, tile: int = 8) -> np.ndarray:
    """Forward-only windowed attention on ``(H', W', C)`` grids without an
    ``(HW)^2`` score matrix.

    Queries are processed in ``tile x tile`` blocks against the
    ``(tile+2s)^2`` key neighbourhood of the block, so cost grows with
    ``HW * (tile+2s)^2`` instead of ``(HW)^2``. Same semantics as
    :func:`psc_attention` with a non-wrapping window mask.
    """
    hgt, wid, c = q.shape
    if k.shape[:2] != (hgt, wid) or v.shape[:2] != (hgt, wid):
        raise DimensionError("q, k, v grids must share H' and W'")
    dtype = q.dtype
    pad = ((s, s), (s, s), (0, 0))
    kp = np.pad(k, pad)
    vp = np.pad(v, pad)
    valid = np.pad(np.ones((hgt, wid), dtype=bool), s)
    out = np.empty(q.shape[:2] + v.shape[2:], dtype=dtype)
    inv = dtype.type(1.0 / math.sqrt(scale_dim))
    local_cache: dict[tuple[int, int], np.ndarray] = {}
    for y0 in range(0, hgt, tile):
        y1 = min(y0 + tile, hgt)
        for x0 in range(0, wid, tile):
            x1 = min(x0 + tile, wid)
            by, bx = y1 - y0, x1 - x0
            rel = local_cache.get((by, bx))
            if rel is None:
                # query (a, b) vs neighbourhood key (i, j): both offsets within s
                a = np.repeat(np.arange(by), bx)
                b = np.tile(np.arange(bx), by)
                i = np.repeat(np.arange(by + 2 * s), bx + 2 * s)
                j = np.tile(np.arange(bx + 2 * s), by + 2 * s)
                rel = (np.abs(a[:, None] + s - i[None, :]) <= s) & (np.abs(b[:, None] + s - j[None, :]) <= s)
                local_cache[(by, bx)] = rel
            ok = rel & valid[y0 : y1 + 2 * s, x0 : x1 + 2 * s].reshape(1, -1)
            qt = q[y0:y1, x0:x1].reshape(-1, c)
            kt = kp[y0 : y1 + 2 * s, x0 : x1 + 2 * s].reshape(-1, c)
            vt = vp[y0 : y1 + 2 * s, x0 : x1 + 2 * s].reshape(-1, v.shape[2])
            logits = (qt @ kt.T) * inv
            logits = np.where(ok, logits, dtype.type(MASK_PENALTY))
            logits -= logits.max(axis=1, keepdims=True)
            e = np.exp(logits)
            e /= e.sum(axis=1, keepdims=True)
            out[y0:y1, x0:x1] = (e @ vt).reshape(by, bx, -1)
    return out
