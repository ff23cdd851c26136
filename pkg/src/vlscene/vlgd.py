"""Vision-language guidance distillation.

A frozen vision-language teacher (here: fixture feature bundles) supplies
per-pixel vision features and per-class text embeddings. Their cosine
similarity map supervises the student's 2-D semantic features twice: through
an L1 pull toward an attention-fused target, and through a soft-label cross
entropy on an auxiliary semantic head.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .io import FormatError, load_vlft, save_vlft
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

COSINE_EPS = 1e-12
MANIFEST_NAME = "teacher.json"


@dataclass
class TeacherBundle:
    vision: np.ndarray  # [C_t, H, W]
    text: np.ndarray  # [Q, C_t]
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.vision = np.asarray(self.vision)
        self.text = np.asarray(self.text)
        if self.vision.ndim != 3 or self.text.ndim != 2:
            raise ShapeError(f"teacher shapes {self.vision.shape}, {self.text.shape} are not [C,H,W] / [Q,C]")
        if self.vision.shape[0] != self.text.shape[1]:
            raise ShapeError(f"teacher channel mismatch: vision has {self.vision.shape[0]}, "
                             f"text has {self.text.shape[1]}")
        if len(self.class_names) != self.text.shape[0]:
            raise ValueError(f"{len(self.class_names)} class names for {self.text.shape[0]} text rows")
        if not (np.all(np.isfinite(self.vision)) and np.all(np.isfinite(self.text))):
            raise ValueError("teacher features contain non-finite values")
        unit = self.text / np.maximum(np.linalg.norm(self.text, axis=1, keepdims=True), COSINE_EPS)
        gram = unit @ unit.T
        if len(unit) > 1 and np.all(np.abs(gram - 1.0) < 1e-9):
            log.warning("teacher text embeddings are cosine-degenerate; logits map will be uniform")

    @property
    def num_classes(self) -> int:
        return self.text.shape[0]


def save_teacher(bundle: TeacherBundle, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_vlft(directory / "vision.vlft", bundle.vision)
    save_vlft(directory / "text.vlft", bundle.text)
    manifest = {"class_names": list(bundle.class_names), "vision": "vision.vlft", "text": "text.vlft"}
    path = directory / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def load_teacher(path: str | Path) -> TeacherBundle:
    """Load a bundle from its manifest (or the directory holding ``teacher.json``)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    try:
        manifest = json.loads(path.read_text())
        names, vis_rel, txt_rel = manifest["class_names"], manifest["vision"], manifest["text"]
    except (KeyError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed teacher manifest ({exc})") from exc
    for rel in (vis_rel, txt_rel):
        if not (path.parent / rel).exists():
            raise FileNotFoundError(f"teacher payload missing: {path.parent / rel}")
    return TeacherBundle(load_vlft(path.parent / vis_rel), load_vlft(path.parent / txt_rel), tuple(names))


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Half-pixel-centered bilinear resize of ``[C, H, W]`` to ``size`` (H', W')."""
    c, h, w = img.shape
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.copy()

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, oh)
    x0, x1, fx = axis_weights(w, ow)
    rows = img[:, y0, :] * (1 - fy)[None, :, None] + img[:, y1, :] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


# -- parameters -------------------------------------------------------------------

@dataclass
class MlpParams:
    """Per-pixel two-layer MLP (1x1 conv, relu, 1x1 conv)."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ResBlockParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class VlgdParams:
    fuse1_w: Tensor
    fuse1_b: Tensor
    fuse2_w: Tensor
    fuse2_b: Tensor
    mlp_vision: MlpParams
    mlp_sem: MlpParams
    head_blocks: list[ResBlockParams]
    head_w: Tensor
    head_b: Tensor


def _param(rng, shape, scale, zero):
    if zero:
        return T.tensor(np.zeros(shape), requires_grad=True)
    return T.tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def init_vlgd_params(rng: np.random.Generator, channels: int, teacher_channels: int,
                     num_classes: int, zero: bool = False) -> VlgdParams:
    c, ct, q = channels, teacher_channels, num_classes
    cin = c + ct + q

    def conv(co, ci, k):
        return _param(rng, (co, ci, k, k), np.sqrt(2.0 / (ci * k * k)), zero)

    def bias(n):
        return T.tensor(np.zeros(n), requires_grad=True)

    def mlp():
        return MlpParams(conv(c, c, 1), bias(c), conv(c, c, 1), bias(c))

    blocks = [ResBlockParams(conv(c, c, 3), bias(c), _param(rng, (c, c, 3, 3), 0.1 / np.sqrt(9 * c), zero), bias(c))
              for _ in range(2)]
    return VlgdParams(conv(c, cin, 3), bias(c), conv(c, c, 3), bias(c), mlp(), mlp(),
                      blocks, conv(q, c, 1), bias(q))


# -- ops --------------------------------------------------------------------------

def compute_logits_map(vision, text) -> Tensor:
    """Per-pixel softmax over cosine similarities with each class embedding."""
    vision, text = T.as_tensor(vision), T.as_tensor(text)
    if vision.ndim != 3 or text.ndim != 2:
        raise ShapeError(f"expected vision [C,H,W] and text [Q,C], got {vision.shape}, {text.shape}")
    c, h, w = vision.shape
    if text.shape[1] != c:
        raise ShapeError(f"channel mismatch: vision has {c}, text has {text.shape[1]}")
    pix = T.l2_normalize(T.transpose(T.reshape(vision, (c, h * w)), (1, 0)), axis=1, eps=COSINE_EPS)
    txt = T.l2_normalize(text, axis=1, eps=COSINE_EPS)
    sim = T.matmul(pix, T.transpose(txt, (1, 0)))  # [HW, Q]
    probs = T.softmax(sim, axis=1)
    return T.reshape(T.transpose(probs, (1, 0)), (text.shape[0], h, w))


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    return T.conv2d(T.relu(T.conv2d(x, p.w1, 0, p.b1)), p.w2, 0, p.b2)


def fuse_features(sem: Tensor, vision, logits, p: VlgdParams) -> Tensor:
    """Attention-weighted fusion of student semantics with teacher cues."""
    vision, logits = T.as_tensor(vision, like=sem), T.as_tensor(logits, like=sem)
    if not (sem.shape[1:] == vision.shape[1:] == logits.shape[1:]):
        raise ShapeError(f"spatial mismatch: sem {sem.shape}, vision {vision.shape}, logits {logits.shape}")
    stacked = T.concat([sem, vision, logits], axis=0)
    fused = T.conv2d(T.relu(T.conv2d(stacked, p.fuse1_w, 1, p.fuse1_b)), p.fuse2_w, 1, p.fuse2_b)
    m_vis = mlp(fused, p.mlp_vision)
    m_sem = mlp(sem, p.mlp_sem)
    w_vis = T.sigmoid(T.global_avg_pool(m_vis, (1, 2)))
    w_sem = T.sigmoid(T.global_avg_pool(m_sem, (1, 2)))
    return w_vis * m_vis + w_sem * m_sem


def feature_distill_loss(sem: Tensor, fuse: Tensor, detach_target: bool = True) -> Tensor:
    if sem.shape != fuse.shape:
        raise ShapeError(f"feature_distill_loss: shape mismatch {sem.shape} vs {fuse.shape}")
    return T.l1_mean(sem, fuse.detach() if detach_target else fuse)


def semantic_head(sem: Tensor, p: VlgdParams) -> Tensor:
    x = sem
    for blk in p.head_blocks:
        x = x + T.conv2d(T.relu(T.conv2d(x, blk.w1, 1, blk.b1)), blk.w2, 1, blk.b2)
    return T.conv2d(x, p.head_w, 0, p.head_b)


def logits_distill_loss(pred: Tensor, target, hard: bool = False) -> Tensor:
    """Soft-target cross entropy of ``pred`` logits against a probability map."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if t.shape != pred.shape:
        raise ShapeError(f"logits_distill_loss: shape mismatch {pred.shape} vs {t.shape}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=0) - 1.0) > 1e-6):
        raise ValueError("logits_distill_loss: target is not a per-pixel probability distribution")
    if hard:
        return T.hard_cross_entropy(pred, t.argmax(axis=0), axis=0)
    return T.soft_cross_entropy(pred, t, axis=0)
