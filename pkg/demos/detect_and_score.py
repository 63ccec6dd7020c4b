"""
Detection and scoring on synthetic data
=======================================

Build the seeded detector, run it on a noise image, then score a set of
hand-made predictions.
"""

import numpy as np

from sdedet import metrics as M
from sdedet import network as N
from sdedet.boxes import Detection, GroundTruthBox

spec = N.NetworkSpec()
model = N.build_model(spec, N.init_weights(spec, seed=0))
print("parameters     ", N.param_count(model))

# Every row of the layer table, with the shape actually produced.
for row in N.check_table_shapes(model):
    print(f"  {row.row.operation:<28} {row.actual_output}  {'ok' if row.ok else 'MISMATCH'}")

# Untrained weights give scores near one half everywhere, so raise the
# threshold to see how few cells clear it.
image = np.random.default_rng(1).random((3, 640, 640), dtype=np.float32)
for conf in (0.25, 0.5, 0.9):
    print(f"detections at {conf:<4}", len(N.detect(model, image, conf=conf)))

# Scoring: one exact hit, one loose hit and one false alarm.
gts = {"a": [GroundTruthBox((0, 0, 10, 10)), GroundTruthBox((20, 20, 30, 30))]}
preds = {"a": [Detection((0, 0, 10, 10), 0.9), Detection((20, 20, 30, 26), 0.8), Detection((50, 50, 60, 60), 0.7)]}
report = M.evaluate(preds, gts, conf=0.25)
print(report.to_json())
