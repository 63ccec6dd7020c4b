"""Random synthetic ground truth / prediction directories for evaluator tests."""
from pathlib import Path

import numpy as np


def _box(rng):
    return [float(rng.uniform(0.15, 0.85)), float(rng.uniform(0.15, 0.85)),
            float(rng.uniform(0.05, 0.3)), float(rng.uniform(0.05, 0.3))]


def make_eval_set(root, seed, n_images=20, n_classes=2):
    """Write ``gt/`` and ``pred/`` label directories; returns both paths."""
    rng = np.random.default_rng(seed)
    gt_dir, pred_dir = Path(root) / "gt", Path(root) / "pred"
    gt_dir.mkdir(parents=True)
    pred_dir.mkdir(parents=True)
    for i in range(n_images):
        gts, preds = [], []
        for _ in range(rng.integers(0, 5)):
            c = int(rng.integers(0, n_classes))
            cx, cy, w, h = _box(rng)
            gts.append((c, cx, cy, w, h))
            if rng.random() < 0.8:
                j = 0.15 * rng.uniform(-1, 1, 4)
                preds.append((c, float(rng.random()), *(float(v) for v in (cx + j[0] * w, cy + j[1] * h, w * (1 + j[2]), h * (1 + j[3])))))
            if rng.random() < 0.2:
                preds.append((c, float(rng.random()), cx, cy, w, h))
        for _ in range(rng.integers(0, 3)):
            preds.append((int(rng.integers(0, n_classes)), float(rng.random()), *_box(rng)))
        (gt_dir / f"img{i:03d}.txt").write_text("".join(f"{c} {cx!r} {cy!r} {w!r} {h!r}\n" for c, cx, cy, w, h in gts))
        (pred_dir / f"img{i:03d}.txt").write_text(
            "".join(f"{c} {s!r} {cx!r} {cy!r} {w!r} {h!r}\n" for c, s, cx, cy, w, h in preds))
    return pred_dir, gt_dir
