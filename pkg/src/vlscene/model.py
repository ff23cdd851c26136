"""The end-to-end scene-completion network: parameters and one-scene forward pass."""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .gssa import GssaParams, init_gssa_params, ngp, output_head, ssi
from .losses import PART_NAMES, ce_loss, depth_loss, scal_loss_geo, scal_loss_sem, total_loss
from .scene import SceneSample
from .tensor import Tensor
from .view import HeadParams, context_head, depth_head, init_head, lift_splat
from .vlgd import (VlgdParams, compute_logits_map, feature_distill_loss, fuse_features, init_vlgd_params,
                   logits_distill_loss, resize_bilinear, semantic_head)


@dataclass
class ModelParams:
    context: HeadParams
    depth: HeadParams
    gssa: GssaParams
    vlgd: VlgdParams


def named_parameters(obj, prefix: str = "") -> list[tuple[str, Tensor]]:
    """Flatten nested parameter dataclasses/lists into ``(dotted.name, tensor)`` pairs."""
    if isinstance(obj, Tensor):
        return [(prefix, obj)]
    out = []
    if is_dataclass(obj):
        for f in fields(obj):
            out += named_parameters(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out += named_parameters(item, f"{prefix}.{i}")
    return out


def init_params(cfg: ExperimentConfig, seed: int | None = None) -> ModelParams:
    """Initialise every sub-network in a fixed order so toggled runs share weights."""
    T.set_precision(cfg.run.precision)
    rng = np.random.default_rng(cfg.run.seed if seed is None else seed)
    m = cfg.model
    context = init_head(rng, m.image_channels, m.head_hidden, m.channels)
    depth = init_head(rng, m.image_channels, m.head_hidden, cfg.camera.depth_bins)
    gssa = init_gssa_params(rng, m.channels, m.ssi_widths, m.num_classes, m.ngp_repeats)
    vlgd = init_vlgd_params(rng, m.channels, m.teacher_channels, m.num_classes)
    return ModelParams(context, depth, gssa, vlgd)


def load_arrays(params: ModelParams, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> None:
    for name, t in named_parameters(params):
        if name not in arrays:
            raise KeyError(f"missing parameter {name}")
        if arrays[name].shape != t.shape:
            raise ValueError(f"parameter {name}: shape {arrays[name].shape} != {t.shape}")
        t.data = np.array(arrays[name], dtype=t.dtype)
        t.requires_grad = requires_grad
        t.grad = None


def teacher_targets(sample: SceneSample, cfg: ExperimentConfig):
    """Teacher vision features resized to the image grid, and the logits map."""
    vision = resize_bilinear(sample.teacher.vision, (cfg.camera.height, cfg.camera.width))
    logits = compute_logits_map(T.tensor(vision), T.tensor(sample.teacher.text))
    return vision, logits


@dataclass
class ForwardResult:
    logits: Tensor  # [M+1, 2X, 2Y, 2Z]
    total: Tensor | None
    parts: dict


def forward(params: ModelParams, sample: SceneSample, cfg: ExperimentConfig, with_loss: bool = True) -> ForwardResult:
    tg = cfg.toggles
    cam, grid = sample.camera, cfg.feature_grid()
    image = T.tensor(sample.image)
    sem = context_head(image, params.context)
    depth = depth_head(image, params.depth)

    zero = T.tensor(0.0)
    parts = {name: zero for name in PART_NAMES}
    if with_loss and tg.enable_vlgd and (tg.enable_kd_feat or tg.enable_kd_logits):
        vision, logits_map = teacher_targets(sample, cfg)
        if tg.enable_kd_feat:
            fuse = fuse_features(sem, vision, logits_map, params.vlgd)
            parts["l_kd_feat"] = feature_distill_loss(sem, fuse, cfg.model.detach_fusion_target)
        if tg.enable_kd_logits:
            pred = semantic_head(sem, params.vlgd)
            parts["l_kd_logits"] = logits_distill_loss(pred, logits_map, cfg.model.hard_pseudo_labels)

    v = lift_splat(sem, depth, cam, grid)
    if tg.enable_ngp:
        v = ngp(v, params.gssa)
    if tg.enable_ssi:
        v = ssi(v, params.gssa.ssi, cfg.model.sparsify_threshold)
    y = output_head(v, params.gssa)
    if not with_loss:
        return ForwardResult(y, None, {})

    labels = sample.labels.labels
    weights = cfg.loss.ce_class_weights or None
    parts["l_sem_scal"] = scal_loss_sem(y, labels)
    parts["l_geo_scal"] = scal_loss_geo(y, labels)
    parts["l_ce"] = ce_loss(y, labels, weights)
    parts["l_depth"] = depth_loss(depth, sample.depth, cam, cfg.loss.soft_depth_targets)
    w = cfg.loss.weights()
    if not tg.enable_vlgd:
        # distillation terms do not exist in this configuration; keep lambda_kd out of the graph
        w.kd = 0.0
    return ForwardResult(y, total_loss(parts, w), parts)


def predict(params: ModelParams, sample: SceneSample, cfg: ExperimentConfig) -> np.ndarray:
    return forward(params, sample, cfg, with_loss=False).logits.data.argmax(axis=0)
