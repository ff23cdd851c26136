import numpy as np
import pytest

from vlscene import tensor as T
from vlscene.gradcheck import run_target
from vlscene.gssa import gssa_param_count, init_gssa_params, ngp, output_head, resnet3d_param_count, ssi
from vlscene.config import ExperimentConfig
from vlscene.model import named_parameters

import oracles
from test_sparse import random_dense


def test_ngp_zero_kernels_is_bitwise_identity(rng):
    p = init_gssa_params(rng, 3, (4, 4), 4, zero=True)
    v = rng.normal(size=(3, 6, 5, 4))
    assert ngp(T.tensor(v), p).data.tobytes() == v.tobytes()


def test_ngp_has_no_bias_parameters(rng):
    p = init_gssa_params(rng, 3, (4, 4), 4, ngp_repeats=2)
    assert len(p.ngp_large) == len(p.ngp_small) == 2
    names = [n for n, _ in named_parameters(p) if n.startswith("ngp")]
    assert names and not any("b" in n.split(".")[-1].rstrip("0123456789") for n in names)


def test_ngp_single_voxel_support_is_radius_four():
    p = init_gssa_params(np.random.default_rng(0), 1, (4, 4), 4)
    p.ngp_large[0].data = np.ones_like(p.ngp_large[0].data)
    p.ngp_small[0].data = np.ones_like(p.ngp_small[0].data)
    for centre in [(5, 5, 5), (1, 2, 9)]:
        v = np.zeros((1, 11, 11, 11))
        v[(0, *centre)] = 1.0
        delta = ngp(T.tensor(v), p).data - v
        # brute-force support: voxels within a 9-cube of the centre, clipped to bounds
        ref = oracles.conv3d_direct(np.maximum(oracles.conv3d_direct(v, np.ones((1, 1, 7, 7, 7)), 1, 3), 0),
                                    np.ones((1, 1, 3, 3, 3)), 1, 1)
        expected = np.zeros((11, 11, 11), dtype=bool)
        lo = [max(c - 4, 0) for c in centre]
        hi = [min(c + 5, 11) for c in centre]
        expected[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
        assert np.array_equal(delta[0] != 0, expected)
        assert np.array_equal(ref[0] != 0, expected)


def test_ngp_random_perturbation_support(rng):
    p = init_gssa_params(rng, 2, (4, 4), 4, ngp_scale=1.0)
    v = rng.normal(size=(2, 10, 10, 10))
    bumped = v.copy()
    bumped[:, 3, 6, 4] += 0.7
    diff = np.abs(ngp(T.tensor(bumped), p).data - ngp(T.tensor(v), p).data).max(axis=0)
    idx = np.argwhere(diff > 0)
    assert len(idx) and np.abs(idx - [3, 6, 4]).max() <= 4


def test_ngp_matches_conv_oracle_composition(rng):
    p = init_gssa_params(rng, 2, (4, 4), 4, ngp_scale=1.0)
    v = rng.normal(size=(2, 5, 4, 6))
    inner = np.maximum(oracles.conv3d_direct(v, p.ngp_large[0].data, 1, 3), 0)
    ref = v + np.maximum(oracles.conv3d_direct(inner, p.ngp_small[0].data, 1, 1), 0)
    np.testing.assert_allclose(ngp(T.tensor(v), p).data, ref, rtol=0, atol=1e-10)


def test_ngp_channel_mismatch(rng):
    p = init_gssa_params(rng, 3, (4, 4), 4)
    with pytest.raises(T.ShapeError, match="channels"):
        ngp(T.tensor(np.zeros((2, 4, 4, 4))), p)


def test_ssi_empty_input_is_zero(rng):
    p = init_gssa_params(rng, 2, (3, 4), 4)
    out = ssi(T.tensor(np.zeros((2, 8, 8, 4))), p.ssi)
    assert out.shape == (2, 8, 8, 4) and not out.data.any()
    small = np.full((2, 8, 8, 4), 0.01)
    assert not ssi(T.tensor(small), p.ssi, threshold=0.5).data.any()


def test_ssi_zero_weights_two_voxels():
    p = init_gssa_params(np.random.default_rng(0), 2, (3, 4), 4, zero=True)
    v = np.zeros((2, 8, 8, 4))
    v[:, 0, 0, 0] = (1.0, -2.0)
    v[:, 5, 6, 3] = (0.25, 4.0)
    out = ssi(T.tensor(v), p.ssi).data
    # down/up paths carry zeros, the skip path carries the input, rank-1 gates are 3 * sigmoid(0)
    np.testing.assert_array_equal(out, 1.5 * v)


@pytest.mark.parametrize("seed", range(3))
def test_ssi_matches_dense_oracle(seed):
    rng = np.random.default_rng(seed)
    p = init_gssa_params(rng, 2, (3, 4), 4)
    dense = random_dense(rng, (8, 8, 4), 2, 0.2)
    out = ssi(T.tensor(dense), p.ssi).data
    np.testing.assert_allclose(out, oracles.ssi_dense(dense, p.ssi), rtol=0, atol=1e-9)
    assert np.array_equal(oracles.active_mask(out) & ~oracles.active_mask(dense),
                          np.zeros((8, 8, 4), dtype=bool))


def test_ssi_rejects_indivisible_extents(rng):
    p = init_gssa_params(rng, 2, (3, 4), 4)
    with pytest.raises(T.ShapeError, match="divisible"):
        ssi(T.tensor(np.zeros((2, 8, 6, 4))), p.ssi)


def test_output_head_cases(rng):
    v = rng.normal(size=(3, 2, 3, 2))
    p = init_gssa_params(rng, 3, (4, 4), 3, zero=True)
    out = output_head(T.tensor(v), p).data
    assert out.shape == (3, 4, 6, 4) and not out.any()
    p.head_w.data = np.eye(3)
    out = output_head(T.tensor(v), p).data
    up = v.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)
    np.testing.assert_array_equal(out, up)
    p.head_b.data = np.array([1.0, 0.0, -1.0])
    np.testing.assert_allclose(output_head(T.tensor(v), p).data, up + np.array([1.0, 0.0, -1.0])[:, None, None, None])
    with pytest.raises(T.ShapeError):
        output_head(T.tensor(np.zeros((2, 2, 2, 2))), p)


def test_param_count_matches_initialized_parameters(rng):
    for c, widths, q, rep in [(3, (4, 5), 4, 1), (2, (3, 6), 5, 2)]:
        p = init_gssa_params(rng, c, widths, q, ngp_repeats=rep)
        n = sum(t.data.size for _, t in named_parameters(p))
        # head bias is counted with the projection
        assert gssa_param_count(c, widths, q, rep) == n


def test_parameter_budget_against_dense_resnet():
    m = ExperimentConfig().model
    toy = gssa_param_count(m.channels, m.ssi_widths, m.num_classes, m.ngp_repeats)
    base = resnet3d_param_count(m.ssi_widths[0])
    assert toy < 0.10 * base
    # the layout at base width 1: stage widths 1, 2, 4, 8 with 1x1x1 projections
    stage1 = 4 * 27 * 1
    stage2 = 27 * 1 * 2 + 3 * 27 * 4 + 1 * 2
    stage3 = 27 * 2 * 4 + 3 * 27 * 16 + 2 * 4
    stage4 = 27 * 4 * 8 + 3 * 27 * 64 + 4 * 8
    assert resnet3d_param_count(1) == stage1 + stage2 + stage3 + stage4


@pytest.mark.parametrize("target", ["ngp", "ssi", "output_head"])
def test_gssa_gradients(target):
    report = run_target(target, 2)
    assert report.passed, "\n".join(report.lines())
