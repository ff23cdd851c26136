"""Geometric-semantic sparse awareness: neighborhood propagation (NGP),
sparse semantic interaction (SSI) and the dense output head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .sparse import (AsymBlockParams, Rank1Params, SparseKernel, asymmetric_residual_block, box_offsets,
                     densify, rank1_aggregate, sparse_conv, sparsify, unpool)
from .tensor import ShapeError, Tensor

CUBE3 = box_offsets((3, 3, 3))


@dataclass
class SsiParams:
    """Encoder/decoder weights. ``down*`` and ``up*`` are ``[27, C_out, C_in]``."""

    down1: Tensor
    block1: AsymBlockParams
    down2: Tensor
    block2: AsymBlockParams
    up1: Tensor
    up0: Tensor
    rank1: Rank1Params


@dataclass
class GssaParams:
    # NGP kernels carry no bias by construction.
    ngp_large: list[Tensor]
    ngp_small: list[Tensor]
    ssi: SsiParams
    head_w: Tensor  # [M+1, C]
    head_b: Tensor  # [M+1]
    upsample: int = field(default=2)


def _w(rng, shape, fan_in, scale=1.0, zero=False):
    if zero:
        return T.tensor(np.zeros(shape), requires_grad=True)
    return T.tensor(rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=shape), requires_grad=True)


def init_gssa_params(rng: np.random.Generator, channels: int, widths=(32, 64), num_classes: int = 4,
                     ngp_repeats: int = 1, zero: bool = False, ngp_scale: float = 0.1) -> GssaParams:
    c0 = channels
    c1, c2 = widths

    def block(c):
        return AsymBlockParams(*[_w(rng, (9, c, c), 9 * c, 0.3, zero) for _ in range(4)])

    ssi = SsiParams(
        down1=_w(rng, (27, c1, c0), 27 * c0, 1.0, zero),
        block1=block(c1),
        down2=_w(rng, (27, c2, c1), 27 * c1, 1.0, zero),
        block2=block(c2),
        up1=_w(rng, (27, c1, c2), 27 * c2, 0.5, zero),
        up0=_w(rng, (27, c0, c1), 27 * c1, 0.5, zero),
        rank1=Rank1Params(*[_w(rng, (3, c0, c0), 3 * c0, 0.3, zero) for _ in range(3)]),
    )
    return GssaParams(
        ngp_large=[_w(rng, (c0, c0, 7, 7, 7), 343 * c0, ngp_scale, zero) for _ in range(ngp_repeats)],
        ngp_small=[_w(rng, (c0, c0, 3, 3, 3), 27 * c0, ngp_scale, zero) for _ in range(ngp_repeats)],
        ssi=ssi,
        head_w=_w(rng, (num_classes, c0), c0, 1.0, zero),
        head_b=T.tensor(np.zeros(num_classes), requires_grad=True),
    )


def ngp(v: Tensor, p: GssaParams) -> Tensor:
    """Residual large-then-small kernel propagation into empty neighbors."""
    if v.ndim != 4:
        raise ShapeError(f"ngp expects [C, X, Y, Z], got {v.shape}")
    out = v
    for large, small in zip(p.ngp_large, p.ngp_small):
        if large.shape[:2] != (v.shape[0], v.shape[0]):
            raise ShapeError(f"ngp kernel {large.shape} does not match {v.shape[0]} channels")
        inner = T.relu(T.conv3d(out, large, 1, 3))
        out = out + T.relu(T.conv3d(inner, small, 1, 1))
    return out


def ssi(v_com: Tensor, p: SsiParams, threshold: float = 0.0) -> Tensor:
    """Sparse two-level encoder/decoder over the non-empty voxels of ``v_com``."""
    c, *dims = v_com.shape
    if any(d % 4 for d in dims):
        raise ShapeError(f"ssi needs grid extents divisible by 4, got {tuple(dims)}")
    s0 = sparsify(v_com, threshold)
    s1 = asymmetric_residual_block(sparse_conv(s0, SparseKernel(CUBE3, p.down1, "generative", 2)), p.block1)
    s2 = asymmetric_residual_block(sparse_conv(s1, SparseKernel(CUBE3, p.down2, "generative", 2)), p.block2)
    u1 = sparse_conv(unpool(s2, s1.coords, s1.dims), SparseKernel(CUBE3, p.up1))
    u1 = s1.with_feats(u1.feats + s1.feats)
    u0 = sparse_conv(unpool(u1, s0.coords, s0.dims), SparseKernel(CUBE3, p.up0))
    u0 = s0.with_feats(u0.feats + s0.feats)
    return densify(rank1_aggregate(u0, p.rank1))


def output_head(v_fine: Tensor, p: GssaParams) -> Tensor:
    """Per-voxel linear projection to class logits, then nearest upsampling."""
    c, *dims = v_fine.shape
    if p.head_w.shape[1] != c:
        raise ShapeError(f"output head expects {p.head_w.shape[1]} channels, got {c}")
    n_cls = p.head_w.shape[0]
    flat = T.matmul(p.head_w, T.reshape(v_fine, (c, -1))) + T.reshape(p.head_b, (n_cls, 1))
    logits = T.reshape(flat, (n_cls, *dims))
    return T.upsample_nearest(logits, p.upsample, axes=(1, 2, 3))


def gssa_param_count(channels: int, widths, num_classes: int, ngp_repeats: int = 1) -> int:
    c0, (c1, c2) = channels, widths
    ngp_count = ngp_repeats * (343 + 27) * c0 * c0
    ssi_count = 27 * (c1 * c0 + c2 * c1 + c1 * c2 + c0 * c1) + 36 * (c1 * c1 + c2 * c2) + 9 * c0 * c0
    return ngp_count + ssi_count + num_classes * (c0 + 1)


def resnet3d_param_count(base_width: int, blocks_per_stage: int = 2) -> int:
    """Bias-free dense 3-D ResNet-18 layout: four stages of basic blocks
    (two 3x3x3 convs each) at widths base, 2x, 4x, 8x, with 1x1x1 projections
    between stages."""
    total = 0
    prev = base_width
    for stage in range(4):
        w = base_width * 2 ** stage
        if w != prev:
            total += prev * w
        for b in range(blocks_per_stage):
            cin = prev if b == 0 else w
            total += 27 * cin * w + 27 * w * w
            prev = w
    return total
