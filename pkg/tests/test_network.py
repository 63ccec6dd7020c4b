import dataclasses
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sdedet import blocks as B
from sdedet import network as N
from sdedet import ops
from sdedet.boxes import Detection, iou, nms
from sdedet.errors import ConfigError, ShapeError, WeightFormatError
from sdedet.tensor import concat
from sdedet.weights import WeightStore, dumps, load_weights, loads, save_weights


@pytest.fixture(scope="module")
def spec():
    return N.NetworkSpec()


@pytest.fixture(scope="module")
def store(spec):
    return N.init_weights(spec, seed=0)


@pytest.fixture(scope="module")
def model(spec, store):
    return N.build_model(spec, store)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(42).random((3, 640, 640), dtype=np.float32)


@pytest.fixture(scope="module")
def feats(model, image):
    return N.backbone_forward(model, image)


# ---------------------------------------------------------------------------
# Spec and weights
# ---------------------------------------------------------------------------
def test_table_has_thirteen_rows():
    assert len(N.LAYER_TABLE) == 13
    assert [r.output for r in N.LAYER_TABLE if r.operation.startswith("Feat")] == [(80, 80, 64), (40, 40, 128), (20, 20, 256)]


def test_spec_json_round_trip_and_hash(spec):
    again = N.NetworkSpec.from_json(spec.to_json())
    assert again == spec and again.hash() == spec.hash()
    assert dataclasses.replace(spec, ema_groups=4).hash() != spec.hash()
    assert 0 <= spec.hash() < 2 ** 64


def test_spec_rejects_broken_channel_chain():
    layers = list(N.DEFAULT_BACKBONE)
    layers[3] = dataclasses.replace(layers[3], c_in=16)
    with pytest.raises(ConfigError, match="conv1"):
        N.NetworkSpec(layers=tuple(layers))


def test_build_rejects_wrong_shape(spec, store):
    tensors = OrderedDict(store.tensors)
    tensors["backbone.conv2.weight"] = np.zeros((64, 32, 5, 5), np.float32)
    bad = WeightStore(tensors, spec_hash=store.spec_hash)
    with pytest.raises(ConfigError, match=r"backbone\.conv2\.weight.*\(64, 32, 5, 5\).*\(64, 32, 3, 3\)"):
        N.build_model(spec, bad)


def test_build_rejects_hash_mismatch(spec, store):
    with pytest.raises(ConfigError, match="hash"):
        N.build_model(spec, WeightStore(store.tensors, spec_hash=store.spec_hash ^ 1))


def test_build_rejects_missing_and_extra(spec, store):
    tensors = OrderedDict(store.tensors)
    tensors.pop("head.0.cls_bias")
    with pytest.raises(ConfigError, match="missing.*head.0.cls_bias"):
        N.build_model(spec, WeightStore(tensors, spec_hash=store.spec_hash))
    tensors = OrderedDict(store.tensors)
    tensors["stray"] = np.zeros(1, np.float32)
    with pytest.raises(ConfigError, match="stray"):
        N.build_model(spec, WeightStore(tensors, spec_hash=store.spec_hash))


def test_model_weights_are_read_only(model):
    arr = model.store["backbone.conv0.weight"]
    with pytest.raises(ValueError):
        arr[0, 0, 0, 0] = 1.0
    with pytest.raises(dataclasses.FrozenInstanceError):
        model.spec = None


def test_param_count_single_conv():
    assert N.param_count({"w": np.zeros((8, 3, 3, 3)), "b": np.zeros(8)}) == 224


def test_param_count_band_and_value_invariance(spec, model):
    n = N.param_count(model)
    assert 2_500_000 <= n <= 4_500_000
    assert N.param_count(N.init_weights(spec, seed=7)) == n


def test_weights_round_trip_bitwise(tmp_path, store):
    path = tmp_path / "w.sdew"
    save_weights(store, path)
    first = path.read_bytes()
    again = load_weights(path)
    assert again.spec_hash == store.spec_hash and list(again) == list(store)
    assert dumps(again) == first


def test_weights_header_layout(store):
    buf = dumps(store)
    assert buf[:4] == b"SDEW"
    assert int.from_bytes(buf[4:8], "little") == 1
    assert int.from_bytes(buf[8:16], "little") == store.spec_hash
    assert int.from_bytes(buf[16:20], "little") == len(store)
    name_len = int.from_bytes(buf[20:22], "little")
    assert buf[22:22 + name_len].decode() == next(iter(store))


def test_weights_truncated_and_bad_magic(store):
    buf = dumps(WeightStore(OrderedDict(list(store.tensors.items())[:3]), spec_hash=5))
    with pytest.raises(WeightFormatError, match="offset") as info:
        loads(buf[:-7])
    assert info.value.offset is not None
    with pytest.raises(WeightFormatError, match="magic"):
        loads(b"XXXX" + buf[4:])
    with pytest.raises(WeightFormatError, match="trailing"):
        loads(buf + b"\0")


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------
def test_backbone_feature_shapes(feats):
    assert [f.shape for f in feats] == [(64, 80, 80), (128, 40, 40), (256, 20, 20)]
    assert all(f.dtype == np.float32 for f in feats)


def test_backbone_is_deterministic(model, image, feats):
    again = N.backbone_forward(model, image)
    for a, b in zip(feats, again):
        np.testing.assert_array_equal(a.data, b.data)


def test_first_conv_output_shape(model, image):
    seen = {}

    def hook(name, t):
        seen[name] = t.shape
        return t

    N.backbone_forward(model, image, hook)
    assert seen["backbone.conv0"] == (8, 320, 320)
    assert seen["backbone.star"] == (8, 320, 320)
    assert seen["backbone.proj"] == (32, 320, 320)


def test_backbone_rejects_wrong_input(model):
    with pytest.raises(ShapeError):
        N.backbone_forward(model, np.zeros((3, 320, 320), np.float32))
    with pytest.raises(ShapeError):
        N.backbone_forward(model, np.zeros((1, 640, 640), np.float32))


def test_table_conformance(model):
    rows = N.check_table_shapes(model)
    assert len(rows) == 13 and all(r.ok for r in rows)


def test_neck_shapes_with_and_without_ema(model, feats):
    with_ema = N.neck_forward(model, feats)
    without = N.neck_forward(model, feats, use_ema=False)
    shapes = [(64, 80, 80), (128, 40, 40), (256, 20, 20)]
    assert [p.shape for p in with_ema] == shapes == [p.shape for p in without]
    assert not np.array_equal(with_ema[0].data, without[0].data)


def test_neck_without_ema_equals_plain_pan(model, feats):
    p = model.params.neck
    f3, f4, f5 = feats
    up = lambda t: ops.upsample_nearest(t, 2)
    t4 = B.c2f_forward(concat([up(f5), f4]), p.top4)
    o3 = B.c2f_forward(concat([up(t4), f3]), p.out3)
    o4 = B.c2f_forward(concat([B.conv_module_forward(o3, p.down3), t4]), p.out4)
    o5 = B.c2f_forward(concat([B.conv_module_forward(o4, p.down4), f5]), p.out5)
    for got, want in zip(N.neck_forward(model, feats, use_ema=False), (o3, o4, o5)):
        np.testing.assert_array_equal(got.data, want.data)


# ---------------------------------------------------------------------------
# Decoding and NMS
# ---------------------------------------------------------------------------
def _zero_outputs(nc=1):
    return [(np.zeros((4, s, s), np.float32), np.zeros((nc, s, s), np.float32)) for s in (80, 40, 20)]


def test_zero_logits_score_one_half():
    dets = N.decode_outputs(_zero_outputs(), (8, 16, 32), 640, conf=0.25)
    # sigmoid(0) = 0.5 clears a 0.25 threshold, so every cell survives
    assert len(dets) == 80 * 80 + 40 * 40 + 20 * 20
    assert {d.score for d in dets} == {0.5}
    assert N.decode_outputs(_zero_outputs(), (8, 16, 32), 640, conf=0.5) == []


def test_single_high_logit_cell():
    outs = _zero_outputs()
    for _, cls in outs:
        cls[:] = -20.0
    outs[1][1][0, 7, 3] = 6.0
    dets = N.decode_outputs(outs, (8, 16, 32), 640, conf=0.25)
    assert len(dets) == 1
    x0, y0, x1, y1 = dets[0].bbox
    cx, cy = (3 + 0.5) * 16, (7 + 0.5) * 16
    assert x0 < cx < x1 and y0 < cy < y1


@given(st.integers(0, 2 ** 32 - 1))
def test_decoded_boxes_are_clipped(seed):
    rng = np.random.default_rng(seed)
    outs = [(rng.standard_normal((4, s, s)).astype(np.float32) * 6, rng.standard_normal((1, s, s)).astype(np.float32))
            for s in (8, 4, 2)]
    for d in N.decode_outputs(outs, (8, 16, 32), 64, conf=0.25):
        x0, y0, x1, y1 = d.bbox
        assert 0 <= x0 <= x1 <= 64 and 0 <= y0 <= y1 <= 64 and 0.25 < d.score <= 1


def test_nms_examples():
    a = Detection((0, 0, 10, 10), 0.9)
    assert nms([a], 0.5) == [a]
    b = Detection((0, 0, 10, 10), 0.8)
    assert nms([b, a], 0.5) == [a]
    c = Detection((20, 20, 30, 30), 0.1)
    assert nms([a, c], 0.5) == [a, c]


boxes = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(1, 30), st.floats(1, 30), st.floats(0, 1)).map(
    lambda t: Detection((t[0], t[1], t[0] + t[2], t[1] + t[3]), t[4]))


@given(st.lists(boxes, max_size=25), st.floats(0.05, 0.95))
def test_nms_output_is_antichain(dets, thr):
    kept = nms(dets, thr)
    assert all(d in dets for d in kept)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i].bbox, kept[j].bbox) <= thr
    # every dropped box overlaps some kept box with a score at least its own
    for d in dets:
        if d not in kept:
            assert any(iou(d.bbox, k.bbox) > thr and k.score >= d.score for k in kept)


# ---------------------------------------------------------------------------
# detect and Grad-CAM
# ---------------------------------------------------------------------------
@pytest.fixture(scope="module")
def detections(model, image):
    return N.detect(model, image)


def test_detect_composition(model, image, feats, detections):
    pyramid = N.neck_forward(model, feats)
    manual = N.class_nms([d for d in N.head_decode(model, pyramid, conf=0.0) if d.score > 0.25], 0.7)
    assert manual == detections


def test_detect_deterministic_and_bounded(model, image, detections):
    assert N.detect(model, image) == detections
    for d in detections:
        x0, y0, x1, y1 = d.bbox
        assert 0 <= x0 <= x1 <= 640 and 0 <= y0 <= y1 <= 640 and 0.25 < d.score <= 1


def test_detect_conf_one_is_empty(model, image):
    assert N.detect(model, image, conf=1.0) == []


def test_gradcam_shapes_and_range(model, image):
    for layer, hw in (("backbone.c2f1", (80, 80)), ("neck.out3", (80, 80)), ("backbone.conv3", (40, 40))):
        cam = N.gradcam(model, image, layer)
        assert cam.shape == hw
        assert cam.min() >= 0 and cam.max() <= 1
        if (cam > 0).any():
            assert cam.max() == 1.0


def test_gradcam_unknown_layer_lists_names(model, image):
    with pytest.raises(KeyError, match="backbone.star"):
        N.gradcam(model, image, "nope")


def test_gradcam_map_cases():
    a = np.abs(np.random.default_rng(0).standard_normal((3, 4, 4)))
    assert not N.gradcam_map(a, -np.ones_like(a)).any()
    np.testing.assert_array_equal(N.gradcam_map(np.ones((2, 3, 3)), np.ones((2, 3, 3))), 1.0)
    cam = N.gradcam_map(a, np.ones_like(a))
    assert cam.max() == 1.0 and cam.min() == 0.0
