"""Hand-built 8x8 evaluation fixture shared by the metrics and CLI tests.

Video ``a`` (one seen object, label 1):
  gt: 2x2 block at rows 2-3, cols 2-3 in every frame.
  frame 2 pred == gt                      -> J 1,   F 1
  frame 3 pred block moved to cols 3-4    -> J 2/6, F 1 (all contour pixels
                                             within 1 px of the other contour)
Video ``b`` (object 1 seen, object 2 unseen):
  gt: label 1 at (0,0); label 2 on row 7, cols 0-3.
  frame 2 pred: label 1 exact, label 2 missing
      obj 1 -> J 1, F 1;   obj 2 -> J 0, F 0
  frame 3 pred: label 1 at (0,0),(0,1); label 2 on row 7, cols 0-1
      obj 1 -> J 1/2, F 1
      obj 2 -> J 2/4; precision 1, recall 3/4 ((7,3) is 2 px away) -> F 6/7

Per object (mean over frames 2-3):
  a/1 seen:   J 2/3,  F 1
  b/1 seen:   J 3/4,  F 1
  b/2 unseen: J 1/4,  F 3/7
Seen: J 17/24, F 1.  Unseen: J 1/4, F 3/7.
J&F = (17/24 + 1 + 1/4 + 3/7) / 4
"""

from __future__ import annotations

import numpy as np

from panoseg.synthdata import ObjectMeta, VideoMeta, write_manifest, write_mask

HAND_J_SEEN = 17 / 24
HAND_F_SEEN = 1.0
HAND_J_UNSEEN = 1 / 4
HAND_F_UNSEEN = 3 / 7
HAND_JF = (HAND_J_SEEN + HAND_F_SEEN + HAND_J_UNSEEN + HAND_F_UNSEEN) / 4


def _block(rows, cols, label=1):
    m = np.zeros((8, 8), dtype=np.uint8)
    for r in rows:
        for c in cols:
            m[r, c] = label
    return m


def hand_fixture():
    """Return ``(metas, gt_masks, pred_masks)``; masks are per-video lists
    over frames 1..3 (prediction frame 1 is a copy of the annotation)."""
    metas = [
        VideoMeta("a", 3, 8, 8, objects=[ObjectMeta(1, "disk-red", True)]),
        VideoMeta("b", 3, 8, 8, objects=[ObjectMeta(1, "disk-red", True), ObjectMeta(2, "rect-orange", False)]),
    ]
    gt_a = _block((2, 3), (2, 3))
    pred_a = [gt_a, gt_a, _block((2, 3), (3, 4))]

    gt_b = np.zeros((8, 8), dtype=np.uint8)
    gt_b[0, 0] = 1
    gt_b[7, 0:4] = 2
    p2 = np.zeros((8, 8), dtype=np.uint8)
    p2[0, 0] = 1
    p3 = np.zeros((8, 8), dtype=np.uint8)
    p3[0, 0:2] = 1
    p3[7, 0:2] = 2
    pred_b = [gt_b, p2, p3]
    return metas, {"a": [gt_a] * 3, "b": [gt_b] * 3}, {"a": pred_a, "b": pred_b}


def write_hand_fixture(root):
    """Write ``root/gt`` (with manifest) and ``root/pred``; returns both paths."""
    metas, gts, preds = hand_fixture()
    gt_root, pred_root = root / "gt", root / "pred"
    for meta in metas:
        for t in range(1, 4):
            write_mask(gt_root / meta.mask_file(t), gts[meta.id][t - 1])
            if t > 1:
                write_mask(pred_root / meta.mask_file(t), preds[meta.id][t - 1])
    write_manifest(gt_root, metas)
    return gt_root, pred_root
