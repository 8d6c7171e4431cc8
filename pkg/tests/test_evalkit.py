import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kaseg import netpbm
from kaseg.evalkit import ConfusionMatrix, affinity_map, count_flops, evaluate, miou
from kaseg.functional import ConvSpec
from kaseg.models import build_network
from kaseg.nn import Conv2d, Sequential
from kaseg.tensor import ShapeError
from oracles import miou_bruteforce


def test_miou_hand_counted():
    conf = ConfusionMatrix(2).update(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 1]))
    per_class, mean = miou(conf)
    assert per_class[0] == pytest.approx(1 / 2)
    assert per_class[1] == pytest.approx(2 / 3)
    assert mean == pytest.approx(7 / 12)
    assert round(mean, 4) == 0.5833


def test_miou_perfect_prediction(rng):
    gt = rng.integers(0, 4, (8, 8))
    assert miou(ConfusionMatrix(4).update(gt, gt))[1] == 1.0


def test_disjoint_class_scores_zero():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([1, 1, 0, 0])
    per_class, mean = miou(ConfusionMatrix(2).update(gt, pred))
    assert per_class.tolist() == [0.0, 0.0]
    assert mean == 0.0


def test_absent_class_excluded():
    gt = np.array([0, 0, 1, 1])
    per_class, mean = miou(ConfusionMatrix(3).update(gt, gt))
    assert math.isnan(per_class[2])
    assert mean == 1.0


def test_ignore_label_not_scored():
    conf = ConfusionMatrix(2).update(np.array([0, 255, 1]), np.array([0, 0, 1]))
    assert conf.total == 2
    assert miou(conf)[1] == 1.0


def test_empty_confusion_rejected():
    with pytest.raises(ValueError, match="empty"):
        miou(ConfusionMatrix(2))
    with pytest.raises(ValueError, match="empty"):
        miou(ConfusionMatrix(2).update(np.array([255, 255]), np.array([0, 1])))


def test_label_range_checked():
    with pytest.raises(ValueError, match="ground-truth"):
        ConfusionMatrix(2).update(np.array([2]), np.array([0]))
    with pytest.raises(ValueError, match="predicted"):
        ConfusionMatrix(2).update(np.array([0]), np.array([3]))
    with pytest.raises(ShapeError):
        ConfusionMatrix(2).update(np.zeros(3, int), np.zeros(4, int))


def test_miou_matches_bruteforce_on_1000_masks():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        k = int(rng.integers(2, 6))
        gt = rng.integers(0, k, (8, 8))
        gt[rng.random((8, 8)) < 0.1] = 255
        pred = rng.integers(0, k, (8, 8))
        ious, expected = miou_bruteforce(gt, pred, k)
        per_class, mean = miou(ConfusionMatrix(k).update(gt, pred))
        assert mean == expected
        for c in range(k):
            assert (per_class[c] == ious[c]) if c in ious else math.isnan(per_class[c])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 5))
def test_streaming_equals_whole_and_is_order_free(seed, k):
    rng = np.random.default_rng(seed)
    gts = rng.integers(0, k, (6, 5, 5))
    preds = rng.integers(0, k, (6, 5, 5))
    whole = ConfusionMatrix(k).update(gts, preds)
    streamed = ConfusionMatrix(k)
    for i in rng.permutation(6):
        streamed.merge(ConfusionMatrix(k).update(gts[i], preds[i]))
    assert np.array_equal(whole.counts, streamed.counts)
    assert whole.total == gts.size
    assert np.all(whole.counts >= 0)


def single_conv(cin, cout, kernel, stride=1, padding=0, dilation=1, groups=1):
    spec = ConvSpec(cin, cout, kernel, stride, padding, dilation, groups)
    return Sequential(Conv2d(spec, np.random.default_rng(0)))


def test_macs_single_conv():
    report = count_flops(single_conv(3, 16, 3, padding=1), (32, 32))
    assert report.macs == 9 * 3 * 16 * 1024 == 442_368
    assert report.flops == 884_736


def test_macs_grouped_pointwise():
    report = count_flops(single_conv(8, 8, 1, groups=8), (4, 4), in_channels=8)
    assert report.macs == 128


def test_dilation_keeps_macs_for_same_output():
    plain = count_flops(single_conv(4, 4, 3, padding=1), (8, 8), in_channels=4)
    dilated = count_flops(single_conv(4, 4, 3, padding=2, dilation=2), (8, 8), in_channels=4)
    assert plain.macs == dilated.macs


def test_report_totals_are_layer_sums():
    report = count_flops(build_network("teacher", 8), (64, 64))
    assert report.macs == sum(c.macs for c in report.layers)
    assert report.params == sum(c.params for c in report.layers)
    assert report.elementwise > 0
    assert report.lines()[-1].startswith(f"total macs={report.macs}")


def test_flops_independent_of_parameter_values():
    a, b = build_network("student", seed=1), build_network("student", seed=2)
    for p in b.named_parameters().values():
        p.data[...] = 0
    assert count_flops(a, (64, 64)).macs == count_flops(b, (64, 64)).macs


def test_teacher_os8_costs_more_than_os16():
    assert (count_flops(build_network("teacher", 8), (64, 64)).flops
            > count_flops(build_network("teacher", 16), (64, 64)).flops)


def test_unresolvable_shape():
    with pytest.raises(ShapeError):
        count_flops(build_network("student"), (48, 48))


def test_constant_features_give_uniform_map():
    img = affinity_map(np.ones((5, 4, 4), np.float32), (1, 2))
    assert np.all(img == img.flat[0])


def test_query_point_is_brightest(rng):
    feats = rng.normal(size=(8, 6, 6)).astype(np.float32)
    img = affinity_map(feats, (2, 3))
    assert img[2, 3] == 255


def test_two_region_features(tmp_path):
    feats = np.zeros((2, 8, 8), np.float32)
    feats[0, :, :4] = 1
    feats[1, :, 4:] = 1
    path = tmp_path / "map.pgm"
    img = affinity_map(feats, (3, 1), out_hw=(8, 8), path=path)
    assert np.all(img[:, :4] == 255)
    assert np.all(img[:, 4:] == 0)
    assert np.array_equal(netpbm.read(path), img)


def test_affinity_map_upsamples():
    feats = np.random.default_rng(0).normal(size=(1, 4, 4, 4)).astype(np.float32)
    assert affinity_map(feats, (0, 0), out_hw=(64, 64)).shape == (64, 64)


def test_affinity_map_point_out_of_range():
    with pytest.raises(IndexError):
        affinity_map(np.ones((2, 4, 4), np.float32), (4, 0))


class TinySet:
    def __init__(self, images, masks, k):
        self.images, self.masks, self.num_classes = images, masks, k

    def __len__(self):
        return len(self.images)


def test_evaluate_is_repeatable_and_checks_classes(rng):
    net = build_network("student", 16, 4, seed=0)
    data = TinySet(rng.random((3, 3, 64, 64)).astype(np.float32),
                   rng.integers(0, 4, (3, 64, 64)).astype(np.uint8), 4)
    a, b = evaluate(net, data, batch_size=2), evaluate(net, data)
    assert a.lines() == b.lines()
    assert a.lines()[-1].startswith("miou=")
    assert net.training  # mode restored
    with pytest.raises(ValueError, match="classes"):
        evaluate(net, TinySet(data.images, data.masks, 3))
