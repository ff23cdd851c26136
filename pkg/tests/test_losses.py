import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlscene import tensor as T
from vlscene.gradcheck import run_target
from vlscene.losses import (IGNORE, PART_NAMES, LabelGrid, LossWeights, ce_loss, confusion_matrix, depth_loss,
                            depth_targets, evaluate, pool_reports, range_mask, scal_loss_geo, scal_loss_sem,
                            total_loss, write_csv, write_jsonl)
from vlscene.view import CameraModel, forward_looking_pose, uniform_depth_bins

import oracles


def random_pair(rng, n_cls=4, shape=None, ignore_rate=0.1):
    shape = shape or tuple(int(v) for v in rng.integers(1, 7, size=3))
    gt = rng.integers(0, n_cls, size=shape)
    gt[rng.random(shape) < ignore_rate] = IGNORE
    return rng.integers(0, n_cls, size=shape), gt


# -- affinity losses ------------------------------------------------------------------------------

def test_uniform_two_class_closed_form():
    labels = np.array([0, 1, 0, 1]).reshape(2, 2, 1)
    logits = T.tensor(np.zeros((2, 2, 2, 1)))
    assert abs(scal_loss_sem(logits, labels).item() - 3 * math.log(2)) < 1e-9
    assert abs(scal_loss_geo(logits, labels).item() - 3 * math.log(2)) < 1e-9


def test_near_perfect_predictions_are_near_zero():
    labels = np.array([0, 1, 2, 1, 0, 2]).reshape(6, 1, 1)
    margin = math.log((1 - 1e-6) / 1e-6 * 2)  # p(true) = 1 - 1e-6 with two wrong classes at 5e-7
    logits = np.zeros((3, 6, 1, 1))
    logits[labels.ravel(), np.arange(6), 0, 0] = margin
    bound = 3 * abs(math.log(1 - 1e-6)) * 2
    assert 0 < scal_loss_sem(T.tensor(logits), labels).item() < bound
    assert 0 < scal_loss_geo(T.tensor(logits), labels).item() < bound


@pytest.mark.parametrize("seed", range(5))
def test_affinity_losses_match_direct_sums(seed):
    rng = np.random.default_rng(seed)
    shape = (2, 2, 1) if seed == 0 else (3, 2, 2)
    n_cls = 2 if seed == 0 else 4
    logits = rng.normal(size=(n_cls, *shape))
    labels = rng.integers(0, n_cls, size=shape)
    if seed:
        labels.ravel()[0] = IGNORE
    want, _, _ = oracles.scal_sem_direct(logits, labels)
    assert abs(scal_loss_sem(T.tensor(logits), labels).item() - want) < 1e-10
    assert abs(scal_loss_geo(T.tensor(logits), labels).item() - oracles.scal_geo_direct(logits, labels)) < 1e-10


def test_affinity_is_permutation_equivariant(rng):
    logits = rng.normal(size=(3, 12, 1, 1))
    labels = rng.integers(0, 3, size=(12, 1, 1))
    perm = rng.permutation(12)
    a = scal_loss_sem(T.tensor(logits), labels).item()
    b = scal_loss_sem(T.tensor(logits[:, perm]), labels[perm]).item()
    assert abs(a - b) < 1e-12 and a > 0


def test_all_ignored_is_an_error():
    with pytest.raises(ValueError, match="no evaluable"):
        scal_loss_sem(T.tensor(np.zeros((2, 2, 1, 1))), np.full((2, 1, 1), IGNORE))
    with pytest.raises(ValueError):
        ce_loss(T.tensor(np.zeros((2, 2, 1, 1))), np.full((2, 1, 1), IGNORE))


def test_ce_loss_matches_oracle(rng):
    logits = rng.normal(size=(4, 3, 2, 2))
    labels = rng.integers(0, 4, size=(3, 2, 2))
    labels[0, 0, 0] = IGNORE
    assert abs(ce_loss(T.tensor(logits), labels).item() - oracles.cross_entropy_direct(logits, labels)) < 1e-12


def test_label_grid_validation():
    with pytest.raises(ValueError):
        LabelGrid(np.array([[[4]]]), 4)
    assert LabelGrid(np.array([[[255, 3]]]), 4).labels.dtype == np.int64


# -- depth ---------------------------------------------------------------------------------------------

def depth_camera(n_bins=8, h=3, w=4):
    return CameraModel(2.0, 2.0, 2.0, 1.5, h, w, forward_looking_pose((0, 0, 0)), uniform_depth_bins(0.0, 8.0, n_bins))


def test_depth_loss_closed_forms(rng):
    cam = depth_camera()
    gt = rng.uniform(0.1, 7.9, size=(3, 4))
    gt[0, 0] = 0.0
    uniform = T.tensor(np.full((8, 3, 4), 1 / 8))
    assert abs(depth_loss(uniform, gt, cam).item() - math.log(8)) < 1e-12
    onehot = np.full((8, 3, 4), 1e-7 / 7)
    idx = depth_targets(gt, cam)
    for (r, c), b in np.ndenumerate(idx):
        onehot[max(b, 0), r, c] = 1 - 1e-7
    assert depth_loss(T.tensor(onehot), gt, cam).item() < 2e-7
    assert idx[0, 0] == -1 and np.array_equal(idx[1:], np.floor(gt[1:]).astype(int))


def test_depth_loss_matches_cross_entropy_oracle(rng):
    cam = depth_camera(5, 2, 3)
    logits = rng.normal(size=(5, 2, 3))
    d = T.softmax(T.tensor(logits), axis=0)
    gt = rng.uniform(0.5, 7.5, size=(2, 3))
    want = oracles.cross_entropy_direct(logits, depth_targets(gt, cam))
    assert abs(depth_loss(d, gt, cam).item() - want) < 1e-12


def test_depth_loss_soft_targets_and_errors(rng):
    cam = depth_camera(4, 1, 1)  # centres 1, 3, 5, 7
    d = T.tensor(np.array([0.1, 0.2, 0.3, 0.4]).reshape(4, 1, 1))
    got = depth_loss(d, np.array([[4.5]]), cam, soft=True).item()
    assert abs(got + 0.25 * math.log(0.2) + 0.75 * math.log(0.3)) < 1e-12
    with pytest.raises(ValueError, match="no valid"):
        depth_loss(d, np.zeros((1, 1)), cam)
    with pytest.raises(T.ShapeError):
        depth_loss(d, np.ones((2, 1)), cam)


# -- total loss ------------------------------------------------------------------------------------------

def parts(**kw):
    base = {name: 0.0 for name in PART_NAMES}
    base.update(kw)
    return base


def test_total_loss_cases():
    w = LossWeights()
    assert total_loss(parts(), w) == 0.0
    assert total_loss(parts(l_ce=2.0, l_kd_feat=0.5), w) == 2.5
    p = parts(l_sem_scal=0.3, l_geo_scal=0.7, l_ce=1.1, l_depth=0.4, l_kd_feat=9.0, l_kd_logits=3.0)
    assert total_loss(p, LossWeights(ssc=2.0, kd=0.0)) == 2.0 * (0.3 + 0.7 + 1.1 + 0.4)
    with pytest.raises(ValueError):
        LossWeights(kd=-1.0)
    with pytest.raises(KeyError):
        total_loss({"l_ce": 1.0}, w)
    with pytest.raises(T.NonFiniteError):
        total_loss(parts(l_ce=float("nan")), w)


# -- metrics ------------------------------------------------------------------------------------------------

def test_worked_miou_example():
    pred = np.array([0, 1, 1, 2]).reshape(4, 1, 1)
    gt = np.array([0, 1, 2, 2]).reshape(4, 1, 1)
    rm = evaluate(pred, gt, num_classes=3).full
    assert rm.iou == {1: 0.5, 2: 0.5}
    assert rm.miou == 0.5 and rm.occ_iou == 1.0


def test_perfect_prediction_and_all_ignored(rng):
    gt = rng.integers(0, 4, size=(4, 4, 4))
    gt[0, 0, :4] = (0, 1, 2, 3)
    rm = evaluate(gt, gt, num_classes=4).full
    assert rm.miou == 1.0 and rm.occ_iou == 1.0 and rm.precision == 1.0 and rm.recall == 1.0
    with pytest.raises(ValueError, match="no evaluable voxels"):
        evaluate(gt, np.full(gt.shape, IGNORE), num_classes=4)
    with pytest.raises(T.ShapeError):
        evaluate(gt, gt[:2], num_classes=4)


def test_confusion_and_miou_match_counting_oracle():
    rng = np.random.default_rng(77)
    for _ in range(100):
        pred, gt = random_pair(rng)
        cm = confusion_matrix(pred, gt, 4)
        ref = oracles.confusion_direct(pred, gt, 4)
        assert np.array_equal(cm, ref)
        if (gt != IGNORE).any():
            assert evaluate(pred, gt, num_classes=4).full.miou == pytest.approx(oracles.miou_direct(ref), abs=1e-15)


def test_absent_class_flag():
    pred = np.array([0, 1]).reshape(2, 1, 1)
    gt = np.array([0, 1]).reshape(2, 1, 1)
    assert evaluate(pred, gt, num_classes=4).full.miou == 1.0
    assert evaluate(pred, gt, num_classes=4, count_absent_as_zero=True).full.miou == pytest.approx(1 / 3)


def test_pooled_counts_equal_concatenated_scenes(rng):
    scenes = [random_pair(rng, shape=(4, 3, 2)) for _ in range(5)]
    ranges = (0.5, 1.0)
    pooled = pool_reports([evaluate(p, g, ranges, 4) for p, g in scenes])
    # concatenate along a non-range axis so range masks stay aligned
    cat = evaluate(np.concatenate([p for p, _ in scenes], axis=1), np.concatenate([g for _, g in scenes], axis=1),
                   ranges, 4)
    for a, b in zip(pooled.ranges, cat.ranges):
        assert np.array_equal(a.confusion, b.confusion) and a.miou == b.miou


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metrics_bounded_and_permutation_invariant(seed):
    r = np.random.default_rng(seed)
    pred, gt = random_pair(r)
    if not (gt != IGNORE).any():
        return
    rm = evaluate(pred, gt, num_classes=4).full
    for v in (rm.miou, rm.occ_iou, rm.precision, rm.recall, *rm.iou.values()):
        assert 0.0 <= v <= 1.0
    perm = np.array([0, 3, 1, 2])  # semantic classes permuted, empty fixed
    relabel = lambda a: np.where(a == IGNORE, IGNORE, perm[np.minimum(a, 3)])  # noqa: E731
    assert evaluate(relabel(pred), relabel(gt), num_classes=4).full.miou == pytest.approx(rm.miou, abs=1e-15)


def test_range_mask():
    m = range_mask((4, 2, 2), 0.5)
    assert m[:2].all() and not m[2:].any()
    assert range_mask((5, 1, 1), 0.25).sum() == 2
    assert range_mask((4, 1, 1), 1.0).all()


def test_jsonl_and_csv_outputs(tmp_path):
    pred = np.array([0, 1, 1, 2]).reshape(4, 1, 1)
    gt = np.array([0, 1, 2, 2]).reshape(4, 1, 1)
    rep = evaluate(pred, gt, (0.5, 1.0), 3, scene_id="s0")
    write_jsonl([rep, pool_reports([rep])], tmp_path / "m.jsonl")
    lines = [json.loads(l) for l in (tmp_path / "m.jsonl").read_text().splitlines()]
    assert [l["scene"] for l in lines] == ["s0", "aggregate"]
    assert lines[0]["ranges"][1]["miou"] == 0.5 and lines[0]["ranges"][1]["confusion"][2] == [0, 1, 1]
    write_csv(rep, tmp_path / "m.csv", ("empty", "a", "b"))
    rows = list(csv.reader(open(tmp_path / "m.csv")))
    assert rows[0] == ["range", "class", "IoU"]
    assert ["1.0", "a", "0.500000"] in rows and ["1.0", "mIoU", "0.500000"] in rows
    assert {r[1] for r in rows[1:]} >= {"occupancy_IoU", "precision", "recall"}


@pytest.mark.parametrize("target", ["ssc_losses", "depth_loss", "cross_entropy"])
def test_loss_gradients(target):
    report = run_target(target, 4)
    assert report.passed, "\n".join(report.lines())
