"""Cost of windowed versus dense attention: analytic MACs and wall time."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from .attention import windowed_attention


def window_keys(tokens: int, s: int) -> int:
    """Keys per query under a ``(2s+1)^2`` window, capped at the token count."""
    return min((2 * s + 1) ** 2, tokens)


def exact_window_keys(height: int, width: int, s: int) -> int:
    """Total allowed (query, key) pairs of the non-wrapping window mask."""
    def span(n):
        return sum(min(i + s, n - 1) - max(i - s, 0) + 1 for i in range(n))

    return span(height) * span(width)


def dense_macs(tokens: int, channels: int) -> int:
    # QK^T scores plus the probability-weighted sum of values
    return tokens * tokens * 2 * channels


def windowed_macs(tokens: int, s: int, channels: int) -> int:
    return tokens * window_keys(tokens, s) * 2 * channels


def dense_attention_np(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    logits = (q @ k.T) * q.dtype.type(1.0 / math.sqrt(q.shape[1]))
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    e /= e.sum(axis=1, keepdims=True)
    return e @ v


def _best_time(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


@dataclass
class BenchRow:
    height: int
    width: int
    tokens: int
    s: int
    keys_dense: int
    keys_window: int
    key_ratio: float
    exact_pairs: int
    macs_dense: int
    macs_window: int
    seconds_dense: float | None
    seconds_window: float | None

    @property
    def time_ratio(self) -> float | None:
        if not self.seconds_dense or self.seconds_window is None:
            return None
        return self.seconds_window / self.seconds_dense

    def as_dict(self) -> dict:
        d = asdict(self)
        d["time_ratio"] = self.time_ratio
        return d


def bench(
    height: int,
    width: int,
    s_values: list[int],
    channels: int = 64,
    repeats: int = 3,
    seed: int = 0,
    timed: bool = True,
) -> list[BenchRow]:
    tokens = height * width
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((tokens, channels)).astype(np.float32) for _ in range(3))
    t_dense = _best_time(lambda: dense_attention_np(q, k, v), repeats) if timed else None
    grid = [a.reshape(height, width, channels) for a in (q, k, v)]
    rows = []
    for s in s_values:
        t_win = _best_time(lambda: windowed_attention(*grid, s=s, scale_dim=channels), repeats) if timed else None
        rows.append(
            BenchRow(
                height=height,
                width=width,
                tokens=tokens,
                s=s,
                keys_dense=tokens,
                keys_window=window_keys(tokens, s),
                key_ratio=window_keys(tokens, s) / tokens,
                exact_pairs=exact_window_keys(height, width, s),
                macs_dense=dense_macs(tokens, channels),
                macs_window=windowed_macs(tokens, s, channels),
                seconds_dense=t_dense,
                seconds_window=t_win,
            )
        )
    return rows


def format_table(rows: list[BenchRow]) -> str:
    head = (
        f"{'grid':>9} {'tokens':>7} {'s':>3} {'keys/q':>7} {'dense':>7} {'ratio':>7} "
        f"{'MACs win':>13} {'MACs dense':>13} {'t win ms':>9} {'t dense ms':>10} {'t ratio':>7}"
    )
    lines = [head]
    for r in rows:
        tw = "-" if r.seconds_window is None else f"{1e3 * r.seconds_window:.2f}"
        td = "-" if r.seconds_dense is None else f"{1e3 * r.seconds_dense:.2f}"
        tr = "-" if r.time_ratio is None else f"{r.time_ratio:.3f}"
        lines.append(
            f"{r.height:>4}x{r.width:<4} {r.tokens:>7} {r.s:>3} {r.keys_window:>7} {r.keys_dense:>7} "
            f"{r.key_ratio:>7.4f} {r.macs_window:>13} {r.macs_dense:>13} {tw:>9} {td:>10} {tr:>7}"
        )
    return "\n".join(lines) + "\n"
