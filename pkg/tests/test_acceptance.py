"""Acceptance checks. Each test prints one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` or `python tests/test_acceptance.py`.
"""
import dataclasses
import time
from contextlib import contextmanager

import numpy as np
import pytest

from sdedet import blocks as B
from sdedet import data as D
from sdedet import metrics as M
from sdedet import network as N
from sdedet.boxes import iou_matrix
from sdedet.gradcheck import TOLERANCE, run_gradcheck
from sdedet.weights import dumps, load_weights, save_weights

from oracles import brute_evaluate, star_double_sum
from synth import make_eval_set


@pytest.fixture
def criterion(capsys):
    @contextmanager
    def run(number, title, budget=None):
        start = time.perf_counter()
        notes = []
        ok = False
        try:
            yield notes
            ok = True
        finally:
            elapsed = time.perf_counter() - start
            if budget is not None and elapsed >= budget:
                notes.append(f"over budget {budget:g}s")
                ok = False
            detail = "; ".join(notes)
            line = f"{'PASS' if ok else 'FAIL'} {number:>2} {title} ({elapsed:.2f}s){': ' + detail if detail else ''}"
            with capsys.disabled():
                print("\n" + line)
        if budget is not None:
            assert elapsed < budget, f"{title} took {elapsed:.2f}s"
    return run


@pytest.fixture(scope="module")
def model():
    spec = N.NetworkSpec()
    return N.build_model(spec, N.init_weights(spec, seed=0))


def test_01_shape_conformance(criterion):
    with criterion(1, "shape conformance", budget=10) as notes:
        spec = N.NetworkSpec()
        m = N.build_model(spec, N.init_weights(spec, seed=0))
        rows = N.check_table_shapes(m)
        bad = [r for r in rows if not r.ok]
        notes.append(f"{len(rows) - len(bad)}/{len(rows)} rows match")
        assert len(rows) == 13 and not bad
        feats = [r.actual_output for r in rows if r.row.operation.startswith("Feat")]
        assert feats == [(80, 80, 64), (40, 40, 128), (20, 20, 256)]


def test_02_star_equivalence(criterion):
    rng = np.random.default_rng(2)
    cases = []
    for _ in range(1000):
        d = int(rng.integers(1, 17))
        y = np.append(rng.standard_normal(d), 1.0)
        cases.append((y, rng.standard_normal(d + 1), rng.standard_normal(d + 1)))
    with criterion(2, "star product vs double sum", budget=1) as notes:
        worst = 0.0
        for y, w1, w2 in cases:
            ref = star_double_sum(y.tolist(), w1.tolist(), w2.tolist())
            got = B.star_op(y, w1, w2)
            worst = max(worst, abs(got - ref) / max(abs(ref), 1e-12))
        notes.append(f"max rel err {worst:.2e}")
        assert worst <= 1e-5


def test_03_deform_zero_offsets_is_mhsa(criterion):
    with criterion(3, "deformable attention with zero offsets equals MHSA", budget=5) as notes:
        p = B.DeformAttnParams.init(np.random.default_rng(3), 16, heads=8)
        p = dataclasses.replace(p, off_pw_weight=np.zeros_like(p.off_pw_weight))
        x = np.random.default_rng(4).standard_normal((16, 6, 6)).astype(np.float32)
        out = B.deformable_attention_forward(x, p, residual=False).data
        ref = B.mhsa_forward(x.reshape(16, 36).T, p).data.T.reshape(16, 6, 6)
        err = float(np.abs(out - ref).max())
        notes.append(f"max abs err {err:.2e}")
        assert err <= 1e-5


def test_04_gradient_checks(criterion):
    with criterion(4, "gradient checks", budget=60) as notes:
        errors = run_gradcheck(seed=0)
        notes.append(", ".join(f"{k} {v:.1e}" for k, v in errors.items()))
        assert set(errors) == {"star", "deform-attn", "ema", "conv"}
        assert max(errors.values()) < TOLERANCE


def test_05_metric_oracle(criterion, tmp_path):
    sets = [make_eval_set(tmp_path / f"s{seed}", seed) for seed in range(50)]
    with criterion(5, "metrics vs brute-force evaluator on 50 sets", budget=10) as notes:
        worst = 0.0
        for pred_dir, gt_dir in sets:
            got = M.evaluate_dataset(pred_dir, gt_dir, conf=0.25)
            want = brute_evaluate(pred_dir, gt_dir, conf=0.25)
            for key in ("precision", "recall", "f1", "map50", "map50_95"):
                worst = max(worst, abs(getattr(got, key) - want[key]))
            worst = max(worst, float(np.abs(np.subtract(got.ap_per_threshold, want["ap_per_threshold"])).max()))
        notes.append(f"max abs diff {worst:.1e}")
        assert worst <= 1e-9


def test_06_f1_anchor(criterion):
    with criterion(6, "f1(0.883, 0.771)") as notes:
        v = M.f1(0.883, 0.771)
        notes.append(f"{v:.4f}")
        assert abs(v - 0.823) <= 0.0005


def test_07_augmentation(criterion):
    rng = np.random.default_rng(7)
    samples = []
    for i in range(190):
        n = int(rng.integers(0, 4))
        labels = [(int(rng.integers(0, 3)), *rng.uniform(0.05, 0.95, 2), *rng.uniform(0.01, 0.3, 2)) for _ in range(n)]
        samples.append(D.Sample(rng.random((3, 8, 12), dtype=np.float32), labels, f"img{i:03d}"))
    with criterion(7, "augmentation counts and flip involutions") as notes:
        out = D.augment_dataset(samples)
        notes.append(f"{len(samples)} -> {len(out)}")
        assert len(out) == 1330 and len({a.name for a in out}) == 1330
        for s in samples:
            for kind in ("hflip", "vflip"):
                twice = D.augment(D.augment(s, kind).sample, kind)
                assert np.array_equal(twice.image, s.image) and twice.labels == s.labels


def test_08_split(criterion):
    with criterion(8, "split counts") as notes:
        items = [f"img{i:03d}" for i in range(317)]
        train, test = D.split_dataset(items, 0.6, seed=0)
        notes.append(f"{len(train)}/{len(test)}")
        assert (len(train), len(test)) == (190, 127)
        assert D.split_dataset(items, 0.6, seed=0) == (train, test)
        assert sorted(train + test) == items


def test_09_param_count(criterion, model):
    with criterion(9, "parameter count band") as notes:
        n = N.param_count(model)
        notes.append(f"{n:,} parameters, band 2.5M-4.5M (neck and head are reconstructions)")
        assert 2_500_000 <= n <= 4_500_000


def test_10_weights_round_trip(criterion, model, tmp_path):
    with criterion(10, "weights save-load-save", budget=5) as notes:
        path = tmp_path / "w.sdew"
        save_weights(model.store, path)
        first = path.read_bytes()
        second = dumps(load_weights(path))
        notes.append(f"{len(first):,} bytes")
        assert first == second


def test_11_end_to_end(criterion, model):
    image = np.random.default_rng(11).random((3, 640, 640), dtype=np.float32)
    with criterion(11, "detect smoke run", budget=30) as notes:
        first = N.detect(model, image, conf=0.25, nms_iou=0.7)
        second = N.detect(model, image, conf=0.25, nms_iou=0.7)
        notes.append(f"{len(first)} detections")
        assert first == second
        for c in {d.class_id for d in first}:
            boxes = np.array([d.bbox for d in first if d.class_id == c])
            overlap = iou_matrix(boxes, boxes)
            np.fill_diagonal(overlap, 0.0)
            assert overlap.max() <= 0.7


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
