"""Coordinate-list sparse voxel tensors and sparse 3-D convolution.

Coordinates are kept in canonical form: unique, in bounds, sorted
lexicographically (equivalently, by row-major linear key). Neighbor lookup
goes through a sorted key table, so a convolution costs O(N * K log N) with
no dense allocation.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .tensor import ShapeError, Tensor, relu, reshape, sigmoid, take, transpose

# Offset patterns for the orthogonal and rank-1 kernels.
VERTICAL_PATTERN = (3, 1, 3)
HORIZONTAL_PATTERN = (1, 3, 3)
RANK1_PATTERNS = ((3, 1, 1), (1, 3, 1), (1, 1, 3))


def box_offsets(extent) -> np.ndarray:
    """All integer offsets of a centered box with odd ``extent`` per axis, lexicographic."""
    ranges = [range(-(e // 2), e // 2 + 1) for e in extent]
    return np.array(list(product(*ranges)), dtype=np.int64).reshape(-1, 3)


def linear_keys(coords: np.ndarray, dims) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.int64)
    return (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]


@dataclass(frozen=True, eq=False)
class SparseVoxelTensor:
    dims: tuple[int, int, int]
    coords: np.ndarray
    feats: Tensor

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "coords", coords)
        if self.feats.ndim != 2 or self.feats.shape[0] != coords.shape[0]:
            raise ShapeError(f"feats shape {self.feats.shape} does not match {coords.shape[0]} coords")
        if coords.size:
            if coords.min() < 0 or np.any(coords >= np.array(self.dims)):
                raise ValueError(f"coordinates fall outside grid {self.dims}")
            keys = self.keys
            if np.any(np.diff(keys) <= 0):
                raise ValueError("coordinates are not unique and sorted")

    @property
    def keys(self) -> np.ndarray:
        return linear_keys(self.coords, self.dims)

    @property
    def num_active(self) -> int:
        return self.coords.shape[0]

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def with_feats(self, feats: Tensor) -> "SparseVoxelTensor":
        return SparseVoxelTensor(self.dims, self.coords, feats)


@dataclass(frozen=True, eq=False)
class SparseKernel:
    """Per-offset weight matrices ``weights[k]`` of shape ``[C_out, C_in]``.

    ``out[q] = sum_k weights[k] @ in[stride * q + offsets[k]]``.
    """

    offsets: np.ndarray
    weights: Tensor
    mode: str = "submanifold"
    stride: int = 1

    def __post_init__(self):
        offs = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "offsets", offs)
        if len({tuple(o) for o in offs}) != len(offs):
            raise ValueError("kernel offsets must be unique")
        if self.weights.ndim != 3 or self.weights.shape[0] != len(offs):
            raise ShapeError(f"weights shape {self.weights.shape} does not match {len(offs)} offsets")
        if self.mode not in ("submanifold", "generative"):
            raise ValueError(f"unknown sparse conv mode {self.mode!r}")
        if self.mode == "submanifold" and self.stride != 1:
            raise ValueError("submanifold convolution requires stride 1")

    @property
    def c_in(self) -> int:
        return self.weights.shape[2]

    @property
    def c_out(self) -> int:
        return self.weights.shape[1]


def merge_kernels(a: SparseKernel, b: SparseKernel) -> SparseKernel:
    """Kernel whose response is the sum of ``a`` and ``b`` (shared offsets add)."""
    if a.mode != b.mode or a.stride != b.stride:
        raise ValueError("cannot merge kernels with different mode or stride")
    table = {tuple(o): i for i, o in enumerate(a.offsets)}
    offsets = [tuple(o) for o in a.offsets]
    extra_idx = []
    for o in b.offsets:
        if tuple(o) not in table:
            table[tuple(o)] = len(offsets)
            offsets.append(tuple(o))
            extra_idx.append(len(offsets) - 1)
    w = np.zeros((len(offsets), a.c_out, a.c_in), dtype=a.weights.dtype)
    w[: len(a.offsets)] = a.weights.data
    for k, o in enumerate(b.offsets):
        w[table[tuple(o)]] += b.weights.data[k]
    return SparseKernel(np.array(offsets), Tensor(w), a.mode, a.stride)


def sparsify(dense: Tensor, occupancy_threshold: float = 0.0) -> SparseVoxelTensor:
    """Keep voxels whose max absolute channel value exceeds the threshold."""
    if occupancy_threshold < 0:
        raise ValueError("occupancy threshold must be >= 0")
    if dense.ndim != 4:
        raise ShapeError(f"sparsify expects [C, X, Y, Z], got {dense.shape}")
    c, *dims = dense.shape
    mask = np.abs(dense.data).max(axis=0) > occupancy_threshold
    coords = np.argwhere(mask)
    flat = linear_keys(coords, dims)
    feats = transpose(take(reshape(dense, (c, -1)), flat, axis=1), (1, 0))
    return SparseVoxelTensor(tuple(dims), coords, feats)


def densify(s: SparseVoxelTensor) -> Tensor:
    """Scatter into a ``[C, X, Y, Z]`` grid; inactive voxels are exactly zero."""
    c = s.channels
    n_vox = int(np.prod(s.dims))
    keys = s.keys
    out = np.zeros((c, n_vox), dtype=s.feats.dtype)
    out[:, keys] = s.feats.data.T

    def backward(g):
        return (g.reshape(c, n_vox)[:, keys].T.copy(),)

    return Tensor.from_op(out.reshape((c, *s.dims)), (s.feats,), backward, "densify")


def _lookup(keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Index of each query key in sorted ``keys``, or -1 where absent."""
    if keys.size == 0:
        return np.full(query.shape, -1, dtype=np.int64)
    pos = np.searchsorted(keys, query)
    pos = np.minimum(pos, keys.size - 1)
    return np.where(keys[pos] == query, pos, -1)


def _rulebook(in_coords, in_dims, out_coords, offsets, stride):
    """Per-offset (input row, output row) pairs."""
    in_keys = linear_keys(in_coords, in_dims)
    dims = np.array(in_dims)
    rules = []
    for off in offsets:
        src = out_coords * stride + off
        inside = np.all((src >= 0) & (src < dims), axis=1)
        idx = np.full(len(out_coords), -1, dtype=np.int64)
        if inside.any():
            idx[inside] = _lookup(in_keys, linear_keys(src[inside], in_dims))
        hit = idx >= 0
        rules.append((idx[hit], np.nonzero(hit)[0]))
    return rules


def _generative_coords(coords, offsets, stride, out_dims) -> np.ndarray:
    if len(coords) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    cand = (coords[:, None, :] - offsets[None, :, :]).reshape(-1, 3)
    ok = np.all(cand % stride == 0, axis=1)
    cand = cand[ok] // stride
    inside = np.all((cand >= 0) & (cand < np.array(out_dims)), axis=1)
    keys = np.unique(linear_keys(cand[inside], out_dims))
    x, rem = np.divmod(keys, out_dims[1] * out_dims[2])
    y, z = np.divmod(rem, out_dims[2])
    return np.stack([x, y, z], axis=1)


def _gather_conv(feats: Tensor, weights: Tensor, rules, n_out: int) -> Tensor:
    c_out = weights.shape[1]
    x, w = feats.data, weights.data
    out = np.zeros((n_out, c_out), dtype=np.result_type(x, w))
    for k, (src, dst) in enumerate(rules):
        if len(src):
            out[dst] += x[src] @ w[k].T

    def backward(g):
        gx = np.zeros_like(x) if feats.requires_grad else None
        gw = np.zeros_like(w) if weights.requires_grad else None
        for k, (src, dst) in enumerate(rules):
            if not len(src):
                continue
            if gx is not None:
                gx[src] += g[dst] @ w[k]
            if gw is not None:
                gw[k] = g[dst].T @ x[src]
        return (gx, gw)

    return Tensor.from_op(out, (feats, weights), backward, "sparse_conv")


def sparse_conv(s: SparseVoxelTensor, k: SparseKernel) -> SparseVoxelTensor:
    if k.c_in != s.channels:
        raise ShapeError(f"sparse_conv: kernel expects {k.c_in} input channels, tensor has {s.channels}")
    if k.mode == "submanifold":
        out_dims, out_coords = s.dims, s.coords
    else:
        out_dims = tuple((d - 1) // k.stride + 1 for d in s.dims)
        out_coords = _generative_coords(s.coords, k.offsets, k.stride, out_dims)
    rules = _rulebook(s.coords, s.dims, out_coords, k.offsets, k.stride)
    feats = _gather_conv(s.feats, k.weights, rules, len(out_coords))
    return SparseVoxelTensor(out_dims, out_coords, feats)


def unpool(coarse: SparseVoxelTensor, fine_coords: np.ndarray, fine_dims, factor: int = 2) -> SparseVoxelTensor:
    """Nearest-neighbor unpooling onto a given fine active set."""
    parent = linear_keys(np.asarray(fine_coords) // factor, coarse.dims)
    idx = _lookup(coarse.keys, parent)
    if np.any(idx < 0):
        raise ValueError("unpool: fine voxel has no active coarse parent")
    return SparseVoxelTensor(fine_dims, fine_coords, take(coarse.feats, idx, axis=0))


def add_sparse(a: SparseVoxelTensor, b: SparseVoxelTensor) -> SparseVoxelTensor:
    if a.dims != b.dims or not np.array_equal(a.coords, b.coords):
        raise ValueError("add_sparse: active sets differ")
    return a.with_feats(a.feats + b.feats)


def submanifold(s: SparseVoxelTensor, weights: Tensor, pattern) -> SparseVoxelTensor:
    return sparse_conv(s, SparseKernel(box_offsets(pattern), weights, "submanifold"))


@dataclass
class AsymBlockParams:
    """Weights ``[9, C, C]`` for the two orthogonal branches.

    Branch A runs the vertical kernel then the horizontal one; branch B the
    reverse.
    """

    vert_a: Tensor
    horiz_a: Tensor
    horiz_b: Tensor
    vert_b: Tensor


def asymmetric_residual_block(s: SparseVoxelTensor, p: AsymBlockParams) -> SparseVoxelTensor:
    for w in (p.vert_a, p.horiz_a, p.horiz_b, p.vert_b):
        if w.shape[1:] != (s.channels, s.channels):
            raise ShapeError(f"asymmetric block weights {w.shape} do not match {s.channels} channels")

    def act(t: SparseVoxelTensor) -> SparseVoxelTensor:
        return t.with_feats(relu(t.feats))

    a = act(submanifold(act(submanifold(s, p.vert_a, VERTICAL_PATTERN)), p.horiz_a, HORIZONTAL_PATTERN))
    b = act(submanifold(act(submanifold(s, p.horiz_b, HORIZONTAL_PATTERN)), p.vert_b, VERTICAL_PATTERN))
    return s.with_feats(s.feats + a.feats + b.feats)


@dataclass
class Rank1Params:
    """Weights ``[3, C, C]`` for the x-, y- and z-line kernels."""

    x: Tensor
    y: Tensor
    z: Tensor


def rank1_aggregate(s: SparseVoxelTensor, p: Rank1Params) -> SparseVoxelTensor:
    gates = None
    for w, pattern in zip((p.x, p.y, p.z), RANK1_PATTERNS):
        if w.shape[1:] != (s.channels, s.channels):
            raise ShapeError(f"rank-1 weights {w.shape} do not match {s.channels} channels")
        g = sigmoid(submanifold(s, w, pattern).feats)
        gates = g if gates is None else gates + g
    return s.with_feats(s.feats * gates)
