"""Camera geometry, depth/context heads and lift-splat view transformation."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera. ``pose`` maps camera coordinates (x right, y down,
    z forward) to scene coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int
    pose: tuple[tuple[float, ...], ...]
    depth_bins: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "pose", tuple(tuple(float(v) for v in row) for row in np.asarray(self.pose)))
        object.__setattr__(self, "depth_bins", tuple(float(d) for d in self.depth_bins))
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.height < 1 or self.width < 1:
            raise ValueError("image extents must be >= 1")
        m = self.pose_matrix
        if m.shape != (4, 4) or not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("pose must be a 4x4 homogeneous transform")
        rot = m[:3, :3]
        if np.abs(rot.T @ rot - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(rot) - 1.0) > 1e-9:
            raise ValueError("pose rotation is not rigid (orthonormal with det +1)")
        bins = np.array(self.depth_bins)
        if bins.size == 0 or np.any(bins <= 0) or np.any(np.diff(bins) <= 0):
            raise ValueError("depth bin centers must be positive and strictly increasing")

    @property
    def pose_matrix(self) -> np.ndarray:
        return np.array(self.pose, dtype=np.float64)

    @property
    def num_bins(self) -> int:
        return len(self.depth_bins)

    def rays(self) -> np.ndarray:
        """Scene-frame direction per pixel center, scaled so camera-z == 1. Shape [H, W, 3]."""
        v, u = np.meshgrid(np.arange(self.height) + 0.5, np.arange(self.width) + 0.5, indexing="ij")
        cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1)
        return cam @ self.pose_matrix[:3, :3].T

    @property
    def center(self) -> np.ndarray:
        return self.pose_matrix[:3, 3]

    def backproject(self, depth: np.ndarray) -> np.ndarray:
        """Scene point for each pixel at camera-z ``depth`` ([H, W] -> [H, W, 3])."""
        return self.center + self.rays() * np.asarray(depth)[..., None]


def uniform_depth_bins(z_min: float, z_max: float, n: int) -> tuple[float, ...]:
    """Centers of ``n`` equal-width bins spanning [z_min, z_max]."""
    edges = np.linspace(z_min, z_max, n + 1)
    return tuple(0.5 * (edges[:-1] + edges[1:]))


def forward_looking_pose(position, forward_axis: int = 0) -> np.ndarray:
    """Rigid pose for a level camera looking along +scene-x with scene-z up."""
    if forward_axis != 0:
        raise NotImplementedError("only +x forward cameras are supported")
    rot = np.array([[0.0, 0.0, 1.0],
                    [-1.0, 0.0, 0.0],
                    [0.0, -1.0, 0.0]])
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = position
    return m


@dataclass(frozen=True)
class VoxelGridSpec:
    origin: tuple[float, float, float]
    voxel_size: float
    extents: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        if len(self.extents) != 3 or min(self.extents) < 1:
            raise ValueError("grid extents must be three values >= 1")

    def voxel_index(self, points: np.ndarray) -> np.ndarray:
        """Integer voxel coordinates ``floor((p - origin) / size)``."""
        return np.floor((points - np.array(self.origin)) / self.voxel_size).astype(np.int64)

    def scaled(self, factor: int) -> "VoxelGridSpec":
        """Same physical volume with ``factor`` times finer voxels."""
        return VoxelGridSpec(self.origin, self.voxel_size / factor, tuple(e * factor for e in self.extents))


@lru_cache(maxsize=32)
def splat_table(cam: CameraModel, grid: VoxelGridSpec) -> np.ndarray:
    """Flat voxel index for every (bin, row, col) frustum point, -1 when outside. Read-only."""
    pts = cam.center + cam.rays()[None] * np.array(cam.depth_bins)[:, None, None, None]
    idx = grid.voxel_index(pts)
    ext = np.array(grid.extents)
    inside = np.all((idx >= 0) & (idx < ext), axis=-1)
    flat = (idx[..., 0] * ext[1] + idx[..., 1]) * ext[2] + idx[..., 2]
    table = np.where(inside, flat, -1)
    table.setflags(write=False)
    return table


def lift_splat(feats: Tensor, depth: Tensor, cam: CameraModel, grid: VoxelGridSpec) -> Tensor:
    """Sum-pool depth-weighted pixel features into voxels: ``[C, H, W] x [D, H, W] -> [C, X, Y, Z]``."""
    c, h, w = feats.shape
    if depth.shape != (cam.num_bins, h, w) or (h, w) != (cam.height, cam.width):
        raise ShapeError(f"lift_splat: features {feats.shape}, depth {depth.shape} vs camera "
                         f"{cam.num_bins}x{cam.height}x{cam.width}")
    table = splat_table(cam, grid).reshape(cam.num_bins, h * w)
    n_vox = int(np.prod(grid.extents))
    bins, pix = np.nonzero(table >= 0)
    vox = table[bins, pix]
    f = feats.data.reshape(c, h * w)
    d = depth.data.reshape(cam.num_bins, h * w)
    weight = d[bins, pix]
    out = np.stack([np.bincount(vox, weights=f[ch, pix] * weight, minlength=n_vox) for ch in range(c)])
    out = out.astype(feats.dtype, copy=False)

    def backward(g):
        gv = g.reshape(c, n_vox)[:, vox]  # [C, n_points]
        gf = gd = None
        if feats.requires_grad:
            gf = np.stack([np.bincount(pix, weights=gv[ch] * weight, minlength=h * w) for ch in range(c)])
            gf = gf.astype(feats.dtype, copy=False).reshape(c, h, w)
        if depth.requires_grad:
            contrib = (gv * f[:, pix]).sum(axis=0)
            gd = np.zeros_like(d)
            gd[bins, pix] = contrib
            gd = gd.reshape(depth.shape)
        return (gf, gd)

    return Tensor.from_op(out.reshape((c, *grid.extents)), (feats, depth), backward, "lift_splat")


# -- 2-D heads ----------------------------------------------------------------------

@dataclass
class HeadParams:
    """3x3 conv + relu + 1x1 conv."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


def init_head(rng: np.random.Generator, c_in: int, hidden: int, c_out: int, zero: bool = False) -> HeadParams:
    def w(shape, fan_in):
        data = np.zeros(shape) if zero else rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return T.tensor(data, requires_grad=True)

    return HeadParams(w((hidden, c_in, 3, 3), 9 * c_in), T.tensor(np.zeros(hidden), requires_grad=True),
                      w((c_out, hidden, 1, 1), hidden), T.tensor(np.zeros(c_out), requires_grad=True))


def _head(x: Tensor, p: HeadParams) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"head expects [C, H, W], got {x.shape}")
    return T.conv2d(T.relu(T.conv2d(x, p.w1, 1, p.b1)), p.w2, 0, p.b2)


def depth_head(image: Tensor, p: HeadParams) -> Tensor:
    """Per-pixel distribution over depth bins, ``[D, H, W]``."""
    return T.softmax(_head(image, p), axis=0)


def context_head(image: Tensor, p: HeadParams) -> Tensor:
    return _head(image, p)
