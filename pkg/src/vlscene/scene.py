"""Procedural toy driving scenes: a ground slab, boxes and poles on a voxel
grid, rendered through a pinhole camera into a feature image, an exact
ray-cast depth map and a matching synthetic teacher bundle."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .io import FormatError, load_vlft, load_vlsc, save_vlft, save_vlsc
from .losses import IGNORE, LabelGrid
from .view import CameraModel, VoxelGridSpec
from .vlgd import TeacherBundle, load_teacher, save_teacher

EMPTY, GROUND, BOX, POLE = 0, 1, 2, 3
CLASS_NAMES = ("empty", "ground", "box", "pole")
DATASET_MANIFEST = "dataset.json"
_EMBED_SEED = 20240917


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    """Generation parameters.

    Random objects are sized and placed in units of ``block`` label voxels so
    they align with the coarser feature grid. ``objects`` holds explicit
    ``(class, x0, y0, z0, x1, y1, z1)`` boxes in label voxels (end-exclusive).
    """

    grid: VoxelGridSpec
    camera: CameraModel
    ground: bool = True
    n_boxes: int = 3
    n_poles: int = 2
    block: int = 2
    box_footprint: tuple[int, int] = (1, 3)
    box_height: tuple[int, int] = (1, 2)
    pole_height: tuple[int, int] = (2, 3)
    min_object_x: int = 6
    objects: tuple[tuple[int, ...], ...] = ()
    target_fractions: tuple[tuple[int, float], ...] = ()
    image_channels: int = 8
    image_noise: float = 0.05
    teacher_channels: int = 8
    teacher_noise: float = 0.3
    teacher_size: tuple[int, int] = (16, 16)
    ignore_outside_view: bool = True
    class_names: tuple[str, ...] = CLASS_NAMES

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class SceneSample:
    id: str
    image: np.ndarray  # [C, H, W]
    depth: np.ndarray  # [H, W], camera-z metres, 0 = no hit
    labels: LabelGrid
    teacher: TeacherBundle
    camera: CameraModel
    class_map: np.ndarray = field(default=None, repr=False)  # [H, W] visible class per pixel


def class_embeddings(num_classes: int, channels: int) -> np.ndarray:
    """Fixed orthonormal text embeddings, one row per class."""
    if channels < num_classes:
        raise SceneError(f"need at least {num_classes} teacher channels for orthogonal embeddings")
    rng = np.random.default_rng(_EMBED_SEED)
    q, _ = np.linalg.qr(rng.normal(size=(channels, num_classes)))
    return q.T.copy()


def class_palette(num_classes: int, channels: int) -> np.ndarray:
    rng = np.random.default_rng(_EMBED_SEED + 1)
    return rng.uniform(-1.0, 1.0, size=(num_classes, channels))


def _place(rng, labels, free_floor, cls, size, z0, min_x, block, attempts=200) -> int:
    nx, ny, nz = labels.shape
    sx, sy, sz = (block * s for s in size)
    bx0 = -(-min_x // block)
    for _ in range(attempts):
        x0 = block * int(rng.integers(bx0, max(bx0 + 1, (nx - sx) // block + 1)))
        y0 = block * int(rng.integers(0, max(1, (ny - sy) // block + 1)))
        if x0 + sx > nx or y0 + sy > ny or z0 + sz > nz:
            continue
        region = labels[x0:x0 + sx, y0:y0 + sy, z0:z0 + sz]
        if np.any(region != EMPTY) or not free_floor[x0:x0 + sx, y0:y0 + sy].all():
            continue
        region[...] = cls
        # keep a one-voxel gap around objects so they stay distinct
        free_floor[max(0, x0 - block):x0 + sx + block, max(0, y0 - block):y0 + sy + block] = False
        return sx * sy * sz
    raise SceneError(f"could not place a class-{cls} object of size {size}: scene is full")


def _random_size(rng, spec: SceneSpec, cls: int) -> tuple[int, int, int]:
    if cls == BOX:
        lo, hi = spec.box_footprint
        hlo, hhi = spec.box_height
        return int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)), int(rng.integers(hlo, hhi + 1))
    hlo, hhi = spec.pole_height
    return 1, 1, int(rng.integers(hlo, hhi + 1))


def build_labels(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(spec.grid.extents, dtype=np.int64)
    nx, ny, nz = labels.shape
    z0 = 0
    if spec.ground:
        z0 = spec.block
        labels[:, :, :z0] = GROUND
    for cls, *box in spec.objects:
        x0, y0, zz0, x1, y1, z1 = box
        labels[x0:x1, y0:y1, zz0:z1] = cls
    free_floor = np.ones((nx, ny), dtype=bool)
    total = labels.size
    if spec.target_fractions:
        for cls, frac in spec.target_fractions:
            filled = 0
            while filled < frac * total:
                filled += _place(rng, labels, free_floor, cls, _random_size(rng, spec, cls), z0,
                                  spec.min_object_x, spec.block)
    else:
        for cls, count in ((BOX, spec.n_boxes), (POLE, spec.n_poles)):
            for _ in range(count):
                _place(rng, labels, free_floor, cls, _random_size(rng, spec, cls), z0,
                                  spec.min_object_x, spec.block)
    return labels


def raycast(labels: np.ndarray, grid: VoxelGridSpec, cam: CameraModel, chunk: int = 256):
    """Exact first-hit camera-z depth and class per pixel (slab test against every occupied voxel)."""
    occ = np.argwhere(labels != EMPTY)
    h, w = cam.height, cam.width
    depth = np.zeros(h * w)
    cls = np.zeros(h * w, dtype=np.int64)
    if len(occ) == 0:
        return depth.reshape(h, w), cls.reshape(h, w)
    lo = np.array(grid.origin) + occ * grid.voxel_size
    hi = lo + grid.voxel_size
    dirs = cam.rays().reshape(-1, 3)
    dirs = np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    o = cam.center
    occ_cls = labels[tuple(occ.T)]
    for s in range(0, len(dirs), chunk):
        inv = 1.0 / dirs[s:s + chunk, None, :]
        t1 = (lo[None] - o) * inv
        t2 = (hi[None] - o) * inv
        near = np.minimum(t1, t2).max(axis=-1)
        far = np.maximum(t1, t2).min(axis=-1)
        hit = (near <= far) & (far > 0)
        near = np.where(hit, np.maximum(near, 0.0), np.inf)
        best = near.argmin(axis=1)
        tbest = near[np.arange(len(best)), best]
        ok = np.isfinite(tbest)
        depth[s:s + chunk] = np.where(ok, tbest, 0.0)
        cls[s:s + chunk] = np.where(ok, occ_cls[best], EMPTY)
    return depth.reshape(h, w), cls.reshape(h, w)


def visible_mask(grid: VoxelGridSpec, cam: CameraModel) -> np.ndarray:
    """Voxels whose center projects inside the image in front of the camera."""
    idx = np.indices(grid.extents).reshape(3, -1).T
    centers = np.array(grid.origin) + (idx + 0.5) * grid.voxel_size
    pose = cam.pose_matrix
    local = (centers - pose[:3, 3]) @ pose[:3, :3]
    z = local[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * local[:, 0] / z + cam.cx
        v = cam.fy * local[:, 1] / z + cam.cy
    ok = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return ok.reshape(grid.extents)


def generate_scene(spec: SceneSpec, seed: int, scene_id: str | None = None) -> SceneSample:
    """Deterministic in ``(spec, seed)``."""
    rng = np.random.default_rng(seed)
    cam, grid = spec.camera, spec.grid
    labels = build_labels(spec, rng)
    depth, class_map = raycast(labels, grid, cam)
    q = len(spec.class_names)

    palette = class_palette(q, spec.image_channels - 2)
    inv_depth = np.where(depth > 0, 1.0 / np.maximum(depth, 1e-6), 0.0)
    rows = np.broadcast_to((np.arange(cam.height)[:, None] + 0.5) / cam.height - 0.5, depth.shape)
    image = np.concatenate([palette[class_map].transpose(2, 0, 1), inv_depth[None], rows[None]], axis=0)
    image = image + spec.image_noise * rng.normal(size=image.shape)

    th, tw = spec.teacher_size
    ri = ((np.arange(th) + 0.5) * cam.height / th).astype(np.int64)
    ci = ((np.arange(tw) + 0.5) * cam.width / tw).astype(np.int64)
    teacher_cls = class_map[np.ix_(ri, ci)]
    text = class_embeddings(q, spec.teacher_channels)
    vision = text[teacher_cls].transpose(2, 0, 1) + spec.teacher_noise * rng.normal(size=(spec.teacher_channels, th, tw))
    teacher = TeacherBundle(vision, text, tuple(spec.class_names))

    grid_labels = labels.copy()
    if spec.ignore_outside_view:
        grid_labels[~visible_mask(grid, cam)] = IGNORE
    return SceneSample(scene_id or f"scene_{seed:06d}", image, depth, LabelGrid(grid_labels, q, tuple(spec.class_names)),
                       teacher, cam, class_map)


def generate_dataset(spec: SceneSpec, n: int, seed: int) -> list[SceneSample]:
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, size=n)
    return [generate_scene(spec, int(s), f"scene_{i:04d}") for i, s in enumerate(seeds)]


# -- on-disk datasets ---------------------------------------------------------------

def _camera_record(cam: CameraModel) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "height": cam.height, "width": cam.width,
            "pose": [list(r) for r in cam.pose], "depth_bins": list(cam.depth_bins)}


def write_dataset(samples: list[SceneSample], directory: str | Path, spec_hash: str = "") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for s in samples:
        sub = directory / s.id
        sub.mkdir(exist_ok=True)
        save_vlft(sub / "image.vlft", s.image)
        save_vlft(sub / "depth.vlft", s.depth)
        save_vlsc(sub / "labels.vlsc", s.labels.labels)
        save_teacher(s.teacher, sub / "teacher")
        entries.append({"id": s.id, "image": f"{s.id}/image.vlft", "depth": f"{s.id}/depth.vlft",
                        "labels": f"{s.id}/labels.vlsc", "teacher": f"{s.id}/teacher/teacher.json",
                        "camera": _camera_record(s.camera)})
    manifest = {"version": 1, "spec_hash": spec_hash,
                "class_names": list(samples[0].labels.class_names) if samples else [],
                "num_classes": samples[0].labels.num_classes if samples else 0, "samples": entries}
    path = directory / DATASET_MANIFEST
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def read_manifest(directory: str | Path) -> dict:
    path = Path(directory) / DATASET_MANIFEST
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("version") != 1:
        raise FormatError(f"{path}: unsupported dataset manifest version {manifest.get('version')}")
    return manifest


def read_dataset(directory: str | Path) -> list[SceneSample]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    names = tuple(manifest["class_names"])
    out = []
    for e in manifest["samples"]:
        for key in ("image", "depth", "labels", "teacher"):
            if not (directory / e[key]).exists():
                raise FileNotFoundError(f"sample {e['id']}: missing {key} file {directory / e[key]}")
        cam = CameraModel(**e["camera"])
        image = load_vlft(directory / e["image"])
        depth = load_vlft(directory / e["depth"])
        labels = load_vlsc(directory / e["labels"])
        if image.shape[1:] != (cam.height, cam.width) or depth.shape != (cam.height, cam.width):
            raise FormatError(f"sample {e['id']}: image/depth extents disagree with the manifest camera")
        out.append(SceneSample(e["id"], image, depth, LabelGrid(labels, manifest["num_classes"], names),
                               load_teacher(directory / e["teacher"]), cam))
    return out
