"""Directional ablation on the synthetic seam-crossing benchmark.

Trains the same toy model with the PSC branch, without it, and with the
branch replaced by plain cross-attention, then scores propagated masks on
the held-out videos.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import PSCConfig
from .metrics import EvalReport, score_video
from .model import init_params
from .propagation import ReferenceBankPolicy, TrainHyper, propagate_sequence, train_toy
from .synthdata import VideoSequence, generate_dataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Benchmark:
    train_videos: int = 8
    eval_videos: int = 4
    frames: int = 24
    height: int = 64
    width: int = 128
    objects: int = 2
    data_seed: int = 7

    def generate(self) -> tuple[list[VideoSequence], list[VideoSequence]]:
        seqs = generate_dataset(
            self.train_videos + self.eval_videos,
            self.frames,
            self.height,
            self.width,
            objects=self.objects,
            seed=self.data_seed,
            val_videos=self.eval_videos,
        )
        return seqs[: self.train_videos], seqs[self.train_videos :]


@dataclass
class ArmResult:
    mode: str
    seed: int
    jf: float
    report: EvalReport
    losses: list[float] = field(repr=False, default_factory=list)


def evaluate_model(model, sequences: list[VideoSequence], policy: ReferenceBankPolicy) -> EvalReport:
    objects = []
    for seq in sequences:
        preds = propagate_sequence(model, list(seq.frames), seq.masks[0], policy)
        objects.extend(score_video(preds, list(seq.masks), seq.meta))
    return EvalReport.from_objects(objects)


def run_arm(
    cfg: PSCConfig,
    mode: str,
    seed: int,
    train: list[VideoSequence],
    evals: list[VideoSequence],
    hyper: TrainHyper,
    eval_policy: ReferenceBankPolicy,
) -> ArmResult:
    arm_cfg = replace(cfg, psc_mode=mode)
    model = init_params(arm_cfg, seed=seed)
    result = train_toy(model, train, replace(hyper, seed=seed))
    report = evaluate_model(result.model, evals, eval_policy)
    log.info("arm %s seed %d: J&F %.2f (final loss %.4f)", mode, seed, 100 * report.JF, result.losses[-1])
    return ArmResult(mode, seed, 100 * report.JF, report, result.losses)


def run_ablation(
    cfg: PSCConfig = PSCConfig(),
    modes: tuple[str, ...] = ("psc", "none", "cross"),
    seeds: tuple[int, ...] = (0, 1, 2),
    benchmark: Benchmark = Benchmark(),
    hyper: TrainHyper = TrainHyper(),
    eval_policy: ReferenceBankPolicy = ReferenceBankPolicy("base"),
) -> dict[str, list[ArmResult]]:
    train, evals = benchmark.generate()
    return {
        mode: [run_arm(cfg, mode, seed, train, evals, hyper, eval_policy) for seed in seeds]
        for mode in modes
    }


def mean_jf(results: list[ArmResult]) -> float:
    return float(np.mean([r.jf for r in results]))
