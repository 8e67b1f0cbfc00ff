"""Semi-supervised mask propagation and the toy training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, PropagationInputError, TrainingError, UsageError
from .model import ModelParams, encode_memory, predict_logits
from .synthdata import VideoSequence
from .tensor import Tape, Tensor, add, backward, cross_entropy, reshape, scale

log = logging.getLogger(__name__)

POLICY_KINDS = ("base", "long")


@dataclass(frozen=True)
class ReferenceBankPolicy:
    """Which earlier frames serve as memory for query frame ``t``.

    ``base``: ``{1, t-1}``. ``long``: ``{1} U {1 + k*delta : k >= first_k,
    1 + k*delta < t} U {t-1}``. ``first_k=2`` starts the progression at
    ``1 + 2*delta`` instead of ``1 + delta``.
    """

    kind: str = "base"
    delta: int = 5
    first_k: int = 1

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise UsageError(f"policy kind must be one of {POLICY_KINDS}, got {self.kind!r}")
        if self.delta < 1 or self.first_k < 1:
            raise UsageError("delta and first_k must be positive")


def bank_indices(policy: ReferenceBankPolicy, t: int) -> list[int]:
    """Ascending, duplicate-free 1-based frame indices for query frame ``t``."""
    if t < 2:
        raise UsageError(f"query frame index must be >= 2, got {t}")
    idx = {1, t - 1}
    if policy.kind == "long":
        k = policy.first_k
        while 1 + k * policy.delta < t:
            idx.add(1 + k * policy.delta)
            k += 1
    return sorted(idx)


def _check_inputs(model: ModelParams, frames: Sequence[np.ndarray], first_mask: np.ndarray) -> None:
    if len(frames) < 2:
        raise PropagationInputError("propagation needs at least 2 frames")
    shape = frames[0].shape
    for i, f in enumerate(frames):
        if f.shape != shape:
            raise PropagationInputError(f"frame {i + 1} has size {f.shape}, frame 1 has {shape}")
    if first_mask is None:
        raise PropagationInputError("first-frame mask is missing")
    if first_mask.shape != shape[:2]:
        raise PropagationInputError(f"first mask {first_mask.shape} does not match frames {shape[:2]}")
    if first_mask.size and int(first_mask.max()) > model.cfg.m_max:
        raise PropagationInputError(f"first mask label {int(first_mask.max())} exceeds m_max={model.cfg.m_max}")


def propagate_sequence(
    model: ModelParams,
    frames: Sequence[np.ndarray],
    first_mask: np.ndarray,
    policy: ReferenceBankPolicy = ReferenceBankPolicy(),
    gt_masks: Sequence[np.ndarray] | None = None,
    on_bank: Callable[[int, list[int]], None] | None = None,
) -> list[np.ndarray]:
    """Predict masks for frames 2..T from the frame-1 mask.

    Each prediction is re-encoded as memory for later frames. ``gt_masks``
    (debugging only) feeds ground truth back instead of predictions.
    """
    _check_inputs(model, frames, first_mask)
    first = np.asarray(first_mask, dtype=np.uint8)
    memory = {1: encode_memory(model, frames[0], first)}
    masks = [first]
    use_prev = model.cfg.psc_mode != "none"
    for t in range(2, len(frames) + 1):
        idx = bank_indices(policy, t)
        if on_bank is not None:
            on_bank(t, idx)
        log.debug("t=%d bank [%s]", t, ",".join(map(str, idx)))
        logits = predict_logits(model, frames[t - 1], [memory[i] for i in idx], memory[t - 1] if use_prev else None)
        pred = np.argmax(logits.data, axis=-1).astype(np.uint8)
        masks.append(pred)
        fed = pred if gt_masks is None else np.asarray(gt_masks[t - 1], dtype=np.uint8)
        memory[t] = encode_memory(model, frames[t - 1], fed)
    return masks


# ---------------------------------------------------------------- training


@dataclass
class TrainHyper:
    lr: float = 2e-3
    steps: int = 500
    seed: int = 0
    batch: int = 4
    policy: ReferenceBankPolicy = field(default_factory=lambda: ReferenceBankPolicy("base", delta=2))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    log_every: int = 50


@dataclass
class TrainResult:
    model: ModelParams
    losses: list[float]


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sample_loss(
    model: ModelParams,
    seq: VideoSequence,
    t: int,
    policy: ReferenceBankPolicy,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Cross-entropy of frame ``t`` (1-based) given ground-truth memories.

    With ``rng`` the clip is augmented: colour channels permuted, the
    panorama rolled horizontally and object labels shuffled.
    """
    idx = bank_indices(policy, t)
    used = sorted(set(idx) | {t})
    frames = seq.frames[[i - 1 for i in used]]
    masks = seq.masks[[i - 1 for i in used]]
    if rng is not None:
        shift = int(rng.integers(frames.shape[2]))
        frames = np.roll(frames[..., rng.permutation(3)], shift, axis=2)
        relabel = np.arange(model.cfg.num_labels, dtype=np.uint8)
        relabel[1:] = 1 + rng.permutation(model.cfg.m_max)
        masks = np.roll(relabel[masks], shift, axis=2)
    pos = {i: n for n, i in enumerate(used)}
    memory = {i: encode_memory(model, frames[pos[i]], masks[pos[i]]) for i in idx}
    prev = memory[t - 1] if model.cfg.psc_mode != "none" else None
    logits = predict_logits(model, frames[pos[t]], [memory[i] for i in idx], prev)
    h, w, k = logits.shape
    return cross_entropy(reshape(logits, (h * w, k)), masks[pos[t]].reshape(-1).astype(np.int64))


def train_toy(model: ModelParams, sequences: Sequence[VideoSequence], hyper: TrainHyper) -> TrainResult:
    """Adam on mean per-pixel cross-entropy over sampled (memory, query) frames.

    Works on a copy of ``model``; deterministic for a given ``hyper.seed``.
    """
    if not sequences:
        raise UsageError("no training sequences")
    if hyper.batch < 1 or hyper.steps < 0:
        raise UsageError("batch must be >= 1 and steps >= 0")
    params = {k: Tensor(v.data.copy(), requires_grad=True, dtype=v.dtype, name=k) for k, v in model.tensors.items()}
    trained = ModelParams(model.cfg, params)
    opt = Adam(trained.parameters(), hyper.lr, hyper.beta1, hyper.beta2, hyper.eps)
    rng = np.random.default_rng(hyper.seed)
    losses: list[float] = []
    for step in range(hyper.steps):
        picks = [(int(rng.integers(len(sequences))), None) for _ in range(hyper.batch)]
        picks = [(v, int(rng.integers(2, sequences[v].meta.frames + 1))) for v, _ in picks]
        opt.zero_grad()
        try:
            with Tape() as tape:
                total = None
                for v, t in picks:
                    loss = sample_loss(trained, sequences[v], t, hyper.policy, rng if hyper.augment else None)
                    total = loss if total is None else add(total, loss)
                total = scale(total, 1.0 / hyper.batch)
            backward(tape, total)
        except NumericError as exc:
            raise TrainingError(f"training diverged at step {step}: {exc}", step) from exc
        value = total.item()
        if not np.isfinite(value):
            raise TrainingError(f"training diverged at step {step}: loss {value}", step)
        losses.append(value)
        opt.step()
        if hyper.log_every and (step % hyper.log_every == 0 or step == hyper.steps - 1):
            log.info("step %d/%d loss %.4f", step + 1, hyper.steps, value)
    return TrainResult(trained, losses)
