"""Region (J) and boundary (F) accuracy for instance masks, DAVIS style.

All geometry treats the image as a horizontal cylinder: column 0 neighbours
column ``W-1`` for boundary extraction and tolerance matching, so scores do
not change when prediction and ground truth are rolled together.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import EvaluationError, FormatError, InputError
from .synthdata import VideoMeta, read_mask

BOUNDARY_FRACTION = 0.008


def _check_pair(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape or pred.ndim != 2:
        raise InputError(f"mask shapes differ: {pred.shape} vs {gt.shape}")


def jaccard(pred: np.ndarray, gt: np.ndarray, k: int) -> float:
    """IoU of label ``k``; 1.0 when neither mask contains it."""
    _check_pair(pred, gt)
    p, g = pred == k, gt == k
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def boundary_map(region: np.ndarray) -> np.ndarray:
    """Foreground pixels with at least one background 4-neighbour.

    Horizontal neighbours wrap; rows beyond the top and bottom count as
    background.
    """
    r = region.astype(bool)
    up = np.zeros_like(r)
    up[1:] = r[:-1]
    down = np.zeros_like(r)
    down[:-1] = r[1:]
    left = np.roll(r, 1, axis=1)
    right = np.roll(r, -1, axis=1)
    return r & ~(up & down & left & right)


def default_tolerance(shape: tuple[int, int]) -> int:
    return int(math.ceil(BOUNDARY_FRACTION * math.hypot(*shape)))


def disk_offsets(radius: int) -> list[tuple[int, int]]:
    return [
        (dy, dx)
        for dy in range(-radius, radius + 1)
        for dx in range(-radius, radius + 1)
        if dy * dy + dx * dx <= radius * radius
    ]


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a Euclidean disk, wrapping horizontally."""
    if radius <= 0:
        return mask.astype(bool)
    h = mask.shape[0]
    out = np.zeros(mask.shape, dtype=bool)
    for dy, dx in disk_offsets(radius):
        if abs(dy) >= h:
            continue
        shifted = np.roll(mask, dx, axis=1)
        if dy > 0:
            out[dy:] |= shifted[:-dy]
        elif dy < 0:
            out[:dy] |= shifted[-dy:]
        else:
            out |= shifted
    return out


def boundary_f(pred: np.ndarray, gt: np.ndarray, k: int, tolerance: int | None = None) -> float:
    """Boundary F-measure of label ``k``: a contour pixel counts as matched
    when the other contour passes within ``tolerance`` pixels."""
    _check_pair(pred, gt)
    theta = default_tolerance(gt.shape) if tolerance is None else int(tolerance)
    if theta < 0:
        raise InputError("tolerance must be >= 0")
    pb = boundary_map(pred == k)
    gb = boundary_map(gt == k)
    n_pred, n_gt = np.count_nonzero(pb), np.count_nonzero(gb)
    if n_pred == 0 and n_gt == 0:
        return 1.0
    if n_pred == 0 or n_gt == 0:
        return 0.0
    precision = np.count_nonzero(pb & dilate(gb, theta)) / n_pred
    recall = np.count_nonzero(gb & dilate(pb, theta)) / n_gt
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


# ---------------------------------------------------------------- dataset evaluation


@dataclass
class ObjectScore:
    video: str
    object_id: int
    category: str
    seen: bool
    J: float
    F: float
    per_frame_J: list[float] = field(default_factory=list)
    per_frame_F: list[float] = field(default_factory=list)


def _mean(xs: list[float]) -> float | None:
    return float(np.mean(xs)) if xs else None


@dataclass
class EvalReport:
    """Scores are fractions in [0, 1]; :meth:`record` scales them by 100."""

    objects: list[ObjectScore]
    J_seen: float | None
    F_seen: float | None
    J_unseen: float | None
    F_unseen: float | None

    @classmethod
    def from_objects(cls, objects: list[ObjectScore]) -> "EvalReport":
        seen = [o for o in objects if o.seen]
        unseen = [o for o in objects if not o.seen]
        return cls(
            objects,
            _mean([o.J for o in seen]),
            _mean([o.F for o in seen]),
            _mean([o.J for o in unseen]),
            _mean([o.F for o in unseen]),
        )

    @property
    def J(self) -> float:
        return float(np.mean([o.J for o in self.objects]))

    @property
    def F(self) -> float:
        return float(np.mean([o.F for o in self.objects]))

    @property
    def JF(self) -> float:
        if self.J_seen is not None and self.J_unseen is not None:
            return (self.J_seen + self.F_seen + self.J_unseen + self.F_unseen) / 4
        if self.J_seen is not None:
            return (self.J_seen + self.F_seen) / 2
        return (self.J_unseen + self.F_unseen) / 2

    def record(self) -> dict:
        def pct(x):
            return None if x is None else round(100 * x, 4)

        return {
            "JF": pct(self.JF),
            "J": pct(self.J),
            "F": pct(self.F),
            "J_seen": pct(self.J_seen),
            "F_seen": pct(self.F_seen),
            "J_unseen": pct(self.J_unseen),
            "F_unseen": pct(self.F_unseen),
            "objects": [
                {"video": o.video, "object": o.object_id, "category": o.category, "seen": o.seen,
                 "J": pct(o.J), "F": pct(o.F)}
                for o in self.objects
            ],
        }

    def table(self) -> str:
        rec = self.record()

        def cell(x):
            return "   -  " if x is None else f"{x:6.1f}"

        lines = [
            f"{'J&F':>6} {'J_s':>6} {'F_s':>6} {'J_u':>6} {'F_u':>6}",
            " ".join(cell(rec[k]) for k in ("JF", "J_seen", "F_seen", "J_unseen", "F_unseen")),
            "",
            f"{'video':<12} {'obj':>3} {'category':<14} {'split':<6} {'J':>6} {'F':>6}",
        ]
        for o in rec["objects"]:
            lines.append(
                f"{o['video']:<12} {o['object']:>3} {o['category']:<14} "
                f"{'seen' if o['seen'] else 'unseen':<6} {o['J']:6.1f} {o['F']:6.1f}"
            )
        return "\n".join(lines) + "\n"


def score_video(
    pred_masks: list[np.ndarray],
    gt_masks: list[np.ndarray],
    meta: VideoMeta,
    tolerance: int | None = None,
    order: str = "frames",
) -> list[ObjectScore]:
    """Per-object scores over frames 2..T (frame 1 is the given annotation).

    ``order="frames"`` averages each object over its frames. ``"objects"``
    first averages each frame over the video's objects and assigns that
    frame-level mean to every object of the video.
    """
    scores = []
    for obj in meta.objects:
        js = [jaccard(p, g, obj.id) for p, g in zip(pred_masks[1:], gt_masks[1:])]
        fs = [boundary_f(p, g, obj.id, tolerance) for p, g in zip(pred_masks[1:], gt_masks[1:])]
        scores.append(ObjectScore(meta.id, obj.id, obj.category, obj.seen, float(np.mean(js)), float(np.mean(fs)), js, fs))
    if order == "objects" and scores:
        frame_j = np.mean([s.per_frame_J for s in scores], axis=0)
        frame_f = np.mean([s.per_frame_F for s in scores], axis=0)
        for s in scores:
            s.J, s.F = float(frame_j.mean()), float(frame_f.mean())
    elif order != "frames":
        raise InputError(f"unknown averaging order {order!r}")
    return scores


def _load(path: Path, what: str) -> np.ndarray:
    try:
        return read_mask(path)
    except FormatError as exc:
        raise EvaluationError(f"{what} {path}: {exc}") from exc


def evaluate_dataset(
    pred_root: str | Path,
    gt_root: str | Path,
    manifest: Iterable[VideoMeta],
    tolerance: int | None = None,
    order: str = "frames",
) -> EvalReport:
    """Score predictions laid out like the dataset (``<video>/masks/NNNNN.pgm``)."""
    pred_root, gt_root = Path(pred_root), Path(gt_root)
    objects: list[ObjectScore] = []
    for meta in manifest:
        gts = [_load(gt_root / meta.mask_file(t), "ground-truth mask") for t in range(1, meta.frames + 1)]
        preds = [gts[0]]
        for t in range(2, meta.frames + 1):
            path = pred_root / meta.mask_file(t)
            if not path.exists():
                raise EvaluationError(f"missing prediction file: {path}")
            preds.append(_load(path, "prediction"))
            if preds[-1].shape != gts[t - 1].shape:
                raise EvaluationError(f"{path}: size {preds[-1].shape} differs from ground truth {gts[t - 1].shape}")
        objects.extend(score_video(preds, gts, meta, tolerance, order))
    if not objects:
        raise EvaluationError("nothing to evaluate: no objects in the selected videos")
    return EvalReport.from_objects(objects)


def write_report(report: EvalReport, path: str | Path) -> tuple[Path, Path]:
    """Write the JSON record to ``path`` and the text table next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.record(), indent=2) + "\n")
    table = path.with_suffix(".txt")
    table.write_text(report.table())
    return path, table
