import logging
import math

import numpy as np
import pytest

from vlscene import tensor as T
from vlscene.gradcheck import run_target
from vlscene.model import named_parameters
from vlscene.vlgd import (TeacherBundle, compute_logits_map, feature_distill_loss, fuse_features,
                          init_vlgd_params, load_teacher, logits_distill_loss, resize_bilinear, save_teacher,
                          semantic_head)

import fusion_reference
from conftest import FIXTURES


def perturbed_params(rng, c=4, ct=3, q=2, scale=0.2):
    p = init_vlgd_params(rng, c, ct, q)
    for _, t in named_parameters(p):
        t.data = t.data + rng.normal(0.0, scale, size=t.shape)
    return p


# -- logits map ------------------------------------------------------------------------------------

def test_logits_map_hand_oracle():
    out = compute_logits_map(np.array([[[1.0]], [[0.0]]]), np.eye(2)).data[:, 0, 0]
    e = math.e
    assert abs(out[0] - e / (e + 1)) < 1e-15 and abs(out[1] - 1 / (e + 1)) < 1e-15
    assert round(out[0], 4) == 0.7311 and round(out[1], 4) == 0.2689


def test_logits_map_orthonormal_alignment(rng):
    q, _ = np.linalg.qr(rng.normal(size=(6, 4)))
    text = q.T
    vision = np.stack([text[2] * 3.0], axis=1)[:, :, None]  # one pixel aligned with class 2
    out = compute_logits_map(vision, text).data[:, 0, 0]
    expected = np.exp([0.0, 0.0, 1.0, 0.0]) / np.exp([0.0, 0.0, 1.0, 0.0]).sum()
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_logits_map_identical_text_rows_are_uniform(rng, caplog):
    text = np.tile(rng.normal(size=(1, 5)), (3, 1))
    with caplog.at_level(logging.WARNING):
        TeacherBundle(rng.normal(size=(5, 2, 2)), text, ("a", "b", "c"))
    assert "degenerate" in caplog.text
    out = compute_logits_map(rng.normal(size=(5, 2, 3)), text).data
    np.testing.assert_allclose(out, 1.0 / 3.0, atol=1e-15)


def test_logits_map_rows_and_rescaling_invariance(rng):
    vision, text = rng.normal(size=(6, 5, 4)), rng.normal(size=(4, 6))
    base = compute_logits_map(vision, text).data
    assert np.abs(base.sum(axis=0) - 1).max() < 1e-9
    scale = rng.uniform(0.01, 100.0, size=(1, 5, 4))
    scaled = compute_logits_map(vision * scale, text).data
    assert np.abs(scaled - base).max() < 1e-9
    assert np.array_equal(scaled.argmax(axis=0), base.argmax(axis=0))


def test_logits_map_zero_pixel_is_finite_and_uniform():
    vision = np.zeros((2, 1, 1))
    out = compute_logits_map(vision, np.eye(2)).data
    np.testing.assert_allclose(out[:, 0, 0], [0.5, 0.5])


def test_logits_map_channel_mismatch(rng):
    with pytest.raises(T.ShapeError, match="channel"):
        compute_logits_map(rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 4)))


# -- fusion -------------------------------------------------------------------------------------------

def test_fusion_zero_params_gives_zero(rng):
    p = init_vlgd_params(rng, 4, 3, 2, zero=True)
    out = fuse_features(T.tensor(rng.normal(size=(4, 3, 3))), rng.normal(size=(3, 3, 3)),
                        rng.normal(size=(2, 3, 3)), p)
    assert not out.data.any()


def test_fusion_zero_sem_and_zero_fusion_convs(rng):
    p = perturbed_params(rng)
    for t in (p.fuse1_w, p.fuse1_b, p.fuse2_w, p.fuse2_b, p.mlp_sem.b1, p.mlp_sem.b2,
              p.mlp_vision.b1, p.mlp_vision.b2):
        t.data = np.zeros_like(t.data)
    out = fuse_features(T.tensor(np.zeros((4, 2, 2))), rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 2, 2)), p)
    assert not out.data.any()


def test_fusion_matches_reference_composition(rng):
    p = perturbed_params(rng)
    sem, vision, logits = rng.normal(size=(4, 2, 2)), rng.normal(size=(3, 2, 2)), rng.normal(size=(2, 2, 2))
    got = fuse_features(T.tensor(sem), vision, logits, p).data
    np.testing.assert_allclose(got, fusion_reference.fuse(sem, vision, logits, p), atol=1e-12)


def test_fusion_spatial_mismatch(rng):
    p = init_vlgd_params(rng, 4, 3, 2)
    with pytest.raises(T.ShapeError, match="spatial"):
        fuse_features(T.tensor(np.zeros((4, 2, 2))), np.zeros((3, 3, 2)), np.zeros((2, 2, 2)), p)


# -- distillation losses -------------------------------------------------------------------------------

def test_feature_distill_cases(rng):
    a = T.tensor(rng.normal(size=(4, 3, 3)))
    assert feature_distill_loss(a, T.tensor(a.data.copy())).item() == 0.0
    assert feature_distill_loss(T.tensor(np.zeros((2, 2, 2))), T.tensor(np.ones((2, 2, 2)))).item() == 1.0
    b = rng.normal(size=(4, 3, 3))
    assert abs(feature_distill_loss(a, T.tensor(b)).item() - np.abs(a.data - b).mean()) < 1e-12
    with pytest.raises(T.ShapeError):
        feature_distill_loss(a, T.tensor(np.zeros((4, 3, 2))))


def test_feature_distill_target_is_detached(rng):
    p = perturbed_params(rng)
    sem = T.tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    fuse = fuse_features(sem, rng.normal(size=(3, 3, 3)), rng.normal(size=(2, 3, 3)), p)
    feature_distill_loss(sem, fuse).backward()
    for name, t in named_parameters(p):
        assert t.grad is None or not t.grad.any(), name
    np.testing.assert_allclose(sem.grad, np.sign(sem.data - fuse.data) / sem.data.size)


def test_logits_distill_cases(rng):
    pred = rng.normal(size=(3, 4, 4))
    own = T.softmax(T.tensor(pred), axis=0).data
    entropy = -(own * np.log(own)).sum(axis=0).mean()
    assert abs(logits_distill_loss(T.tensor(pred), own).item() - entropy) < 1e-12
    labels = rng.integers(0, 3, size=(4, 4))
    onehot = np.eye(3)[labels].transpose(2, 0, 1)
    hard = T.hard_cross_entropy(T.tensor(pred), labels, axis=0).item()
    assert abs(logits_distill_loss(T.tensor(pred), onehot).item() - hard) < 1e-12
    assert abs(logits_distill_loss(T.tensor(pred), onehot, hard=True).item() - hard) < 1e-12
    target = T.softmax(T.tensor(rng.normal(size=(3, 4, 4))), axis=0).data
    logp = pred - np.log(np.exp(pred).sum(axis=0))
    assert abs(logits_distill_loss(T.tensor(pred), target).item() + (target * logp).sum(axis=0).mean()) < 1e-10


def test_logits_distill_rejects_invalid_targets(rng):
    bad = np.full((2, 2, 2), 0.5)
    bad[0, 0, 0] = 0.6
    with pytest.raises(ValueError, match="probability"):
        logits_distill_loss(T.tensor(np.zeros((2, 2, 2))), bad)


# -- semantic head -------------------------------------------------------------------------------------

def test_semantic_head_zero_and_pass_through(rng):
    p = init_vlgd_params(rng, 4, 3, 2, zero=True)
    sem = rng.normal(size=(4, 3, 3))
    assert not semantic_head(T.tensor(sem), p).data.any()
    w = np.zeros((2, 4, 1, 1))
    w[0, 0, 0, 0] = w[1, 1, 0, 0] = 1.0
    p.head_w.data = w
    np.testing.assert_array_equal(semantic_head(T.tensor(sem), p).data, sem[:2])


# -- teacher bundles -----------------------------------------------------------------------------------

def test_teacher_round_trip(tmp_path, rng):
    b = TeacherBundle(rng.normal(size=(5, 3, 4)), rng.normal(size=(3, 5)), ("x", "y", "z"))
    save_teacher(b, tmp_path)
    for path in (tmp_path, tmp_path / "teacher.json"):
        back = load_teacher(path)
        assert back.vision.tobytes() == b.vision.tobytes() and back.text.tobytes() == b.text.tobytes()
        assert back.class_names == b.class_names


def test_teacher_corruption(tmp_path, rng):
    from vlscene.io import FormatError
    b = TeacherBundle(rng.normal(size=(5, 3, 4)), rng.normal(size=(3, 5)), ("x", "y", "z"))
    save_teacher(b, tmp_path)
    raw = (tmp_path / "vision.vlft").read_bytes()
    (tmp_path / "vision.vlft").write_bytes(raw[:50])
    with pytest.raises(FormatError, match="byte offset"):
        load_teacher(tmp_path)
    (tmp_path / "vision.vlft").unlink()
    with pytest.raises(FileNotFoundError, match="vision.vlft"):
        load_teacher(tmp_path)
    with pytest.raises(T.ShapeError):
        TeacherBundle(np.zeros((4, 2, 2)), np.ones((3, 5)), ("x", "y", "z"))
    with pytest.raises(ValueError, match="non-finite"):
        TeacherBundle(np.full((5, 2, 2), np.nan), np.ones((3, 5)), ("x", "y", "z"))


def test_fixture_bundle_loads():
    b = load_teacher(FIXTURES / "teacher")
    assert b.vision.shape == (8, 16, 16) and b.text.shape == (4, 8)
    assert b.class_names == ("empty", "ground", "box", "pole")
    lm = compute_logits_map(b.vision, b.text).data
    assert np.abs(lm.sum(axis=0) - 1).max() < 1e-9


def test_resize_bilinear_preserves_constants_and_identity(rng):
    img = rng.normal(size=(2, 4, 4))
    assert np.array_equal(resize_bilinear(img, (4, 4)), img)
    const = np.full((1, 3, 5), 2.5)
    np.testing.assert_allclose(resize_bilinear(const, (7, 2)), 2.5)
    up = resize_bilinear(np.array([[[0.0, 1.0]]]), (1, 4))
    np.testing.assert_allclose(up[0, 0], [0.0, 0.25, 0.75, 1.0])


@pytest.mark.parametrize("target", ["logits_map", "fusion", "feature_distill", "semantic_head", "logits_distill"])
def test_vlgd_gradients(target):
    report = run_target(target, 3)
    assert report.passed, "\n".join(report.lines())
