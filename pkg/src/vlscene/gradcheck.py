"""Central finite-difference gradient checks for every differentiable op.

Each target builds a small random problem from a seed and returns a scalar
loss closure plus the leaves to check. Non-scalar op outputs are reduced by
a fixed random projection so every output element contributes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS = 1e-5
RTOL = 1e-4
ATOL = 1e-7


@dataclass
class GroupResult:
    name: str
    checked: int
    max_abs_err: float
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    target: str
    seed: int
    groups: list[GroupResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(g.passed for g in self.groups)

    def lines(self) -> list[str]:
        out = []
        for g in self.groups:
            status = "ok" if g.passed else "FAIL"
            out.append(f"{self.target}[seed={self.seed}] {g.name:<28} n={g.checked:<5} "
                       f"max_rel={g.max_rel_err:.2e} max_abs={g.max_abs_err:.2e} {status}")
        return out


def within_tolerance(analytic, numeric, rtol=RTOL, atol=ATOL) -> np.ndarray:
    """Elementwise pass: ``|a - n| <= max(atol, rtol * max(|a|, |n|))``."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    return np.abs(analytic - numeric) <= np.maximum(atol, rtol * scale)


def check(loss_fn: Callable[[], Tensor], leaves: dict[str, Tensor], target: str = "custom", seed: int = 0,
          max_entries: int | None = None, eps: float = EPS) -> GradcheckReport:
    """Compare backward() against central differences on each leaf.

    With ``max_entries`` only a seeded random subset of each leaf's entries is
    perturbed individually; a random-direction derivative over the whole leaf
    is always checked in addition.
    """
    rng = np.random.default_rng(seed + 7919)
    for t in leaves.values():
        t.data = np.ascontiguousarray(t.data)  # entry perturbation writes through a flat view
        t.grad = None
        t.requires_grad = True
    loss_fn().backward()
    analytic = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)).copy() for n, t in leaves.items()}

    def value() -> float:
        return float(loss_fn().data)

    report = GradcheckReport(target, seed)
    for name, t in leaves.items():
        flat = t.data.reshape(-1)
        n = flat.size
        picks = np.arange(n) if max_entries is None or n <= max_entries else \
            np.sort(rng.choice(n, size=max_entries, replace=False))
        num = np.empty(len(picks))
        for k, i in enumerate(picks):
            orig = flat[i]
            flat[i] = orig + eps
            up = value()
            flat[i] = orig - eps
            down = value()
            flat[i] = orig
            num[k] = (up - down) / (2 * eps)
        ana = analytic[name].reshape(-1)[picks]

        direction = rng.normal(size=t.shape)
        orig = t.data.copy()
        t.data = orig + eps * direction
        up = value()
        t.data = orig - eps * direction
        down = value()
        t.data = orig
        dir_num = (up - down) / (2 * eps)
        dir_ana = float((analytic[name] * direction).sum())

        all_ana = np.append(ana, dir_ana)
        all_num = np.append(num, dir_num)
        err = np.abs(all_ana - all_num)
        rel = err / np.maximum(np.maximum(np.abs(all_ana), np.abs(all_num)), 1e-300)
        report.groups.append(GroupResult(name, len(picks) + 1, float(err.max()), float(rel.max()),
                                         bool(within_tolerance(all_ana, all_num).all())))
    return report


# -- targets ---------------------------------------------------------------------------

def _leaf(rng, *shape, scale=1.0):
    return T.tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _project(rng, out: Tensor) -> Callable[[Tensor], Tensor]:
    weights = T.tensor(rng.normal(size=out.shape))
    return lambda y: T.sum_(y * weights)


def _op_target(rng, fn, leaves):
    proj = _project(rng, fn())
    return (lambda: proj(fn())), leaves


def _t_conv3d(rng):
    x, k, b = _leaf(rng, 2, 4, 4, 4), _leaf(rng, 3, 2, 3, 3, 3), _leaf(rng, 3)
    return _op_target(rng, lambda: T.conv3d(x, k, 1, 1, b), {"input": x, "kernel": k, "bias": b})


def _t_matmul(rng):
    a, b = _leaf(rng, 5, 7), _leaf(rng, 7, 3)
    return _op_target(rng, lambda: T.matmul(a, b), {"a": a, "b": b})


def _t_softmax(rng):
    x = _leaf(rng, 3, 5)
    return _op_target(rng, lambda: T.softmax(x, axis=1), {"x": x})


def _t_pointwise(rng):
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    fn = lambda: T.concat([T.relu(a) * T.sigmoid(b), T.global_avg_pool(T.reshape(a + b, (3, 2, 2)), (1, 2))
                           .reshape((3, 1))], axis=1)
    return _op_target(rng, fn, {"a": a, "b": b})


def _t_cross_entropy(rng):
    pred = _leaf(rng, 4, 6)
    target = T.softmax(T.tensor(rng.normal(size=(4, 6))), axis=0).data
    labels = rng.integers(0, 4, size=6)
    labels[0] = 255
    fn = lambda: T.soft_cross_entropy(pred, target, axis=0) + T.hard_cross_entropy(pred, labels, 255, axis=0) \
        + T.l1_mean(pred, target)
    return fn, {"pred": pred}


def _t_logits_map(rng):
    from .vlgd import compute_logits_map
    vis, txt = _leaf(rng, 3, 2, 3), _leaf(rng, 4, 3)
    return _op_target(rng, lambda: compute_logits_map(vis, txt), {"vision": vis, "text": txt})


def _vlgd_setup(rng):
    from .model import named_parameters
    from .vlgd import init_vlgd_params
    p = init_vlgd_params(rng, 4, 3, 2)
    for _, t in named_parameters(p):
        t.data = t.data + rng.normal(0.0, 0.1, size=t.shape)  # non-zero biases
    return p, dict(named_parameters(p))


def _t_fusion(rng):
    from .vlgd import fuse_features
    p, params = _vlgd_setup(rng)
    sem, vis, lg = _leaf(rng, 4, 3, 3), _leaf(rng, 3, 3, 3), _leaf(rng, 2, 3, 3)
    leaves = {"sem": sem, "vision": vis, "logits": lg}
    leaves.update({k: v for k, v in params.items() if k.startswith(("fuse", "mlp"))})
    return _op_target(rng, lambda: fuse_features(sem, vis, lg, p), leaves)


def _t_feature_distill(rng):
    from .vlgd import feature_distill_loss
    a, b = _leaf(rng, 4, 3, 3), _leaf(rng, 4, 3, 3)
    return (lambda: feature_distill_loss(a, b, detach_target=False)), {"sem": a, "fuse": b}


def _t_semantic_head(rng):
    from .vlgd import semantic_head
    p, params = _vlgd_setup(rng)
    sem = _leaf(rng, 4, 3, 3)
    leaves = {"sem": sem, **{k: v for k, v in params.items() if k.startswith("head")}}
    return _op_target(rng, lambda: semantic_head(sem, p), leaves)


def _t_logits_distill(rng):
    from .vlgd import logits_distill_loss
    pred = _leaf(rng, 3, 4, 4)
    target = T.softmax(T.tensor(rng.normal(size=(3, 4, 4))), axis=0).data
    return (lambda: logits_distill_loss(pred, target)), {"pred": pred}


def _tiny_camera(h=4, w=4, bins=(1.0, 1.5, 2.0)):
    from .view import CameraModel, VoxelGridSpec, forward_looking_pose
    cam = CameraModel(3.0, 3.0, w / 2, h / 2, h, w, forward_looking_pose((0.0, 1.0, 1.0)), bins)
    return cam, VoxelGridSpec((0.0, 0.0, 0.0), 0.5, (4, 4, 4))


def _t_heads(rng):
    from .model import named_parameters
    from .view import context_head, depth_head, init_head
    img = _leaf(rng, 2, 4, 4)
    pd, pc = init_head(rng, 2, 3, 3), init_head(rng, 2, 3, 2)
    leaves = {"image": img, **{f"depth.{k}": v for k, v in named_parameters(pd)},
              **{f"context.{k}": v for k, v in named_parameters(pc)}}
    fn = lambda: T.concat([depth_head(img, pd), context_head(img, pc)], axis=0)
    return _op_target(rng, fn, leaves)


def _t_lift_splat(rng):
    from .view import lift_splat
    cam, grid = _tiny_camera()
    f = _leaf(rng, 2, 4, 4)
    d = T.tensor(T.softmax(T.tensor(rng.normal(size=(3, 4, 4))), axis=0).data, requires_grad=True)
    return _op_target(rng, lambda: lift_splat(f, d, cam, grid), {"feats": f, "depth": d})


def _random_sparse(rng, dims=(4, 4, 4), channels=2, density=0.4):
    from .sparse import sparsify
    dense = rng.normal(size=(channels, *dims)) * (rng.random(dims) < density)
    return sparsify(T.tensor(dense))


def _t_sparse(rng):
    from .sparse import (AsymBlockParams, Rank1Params, SparseKernel, asymmetric_residual_block, box_offsets,
                         rank1_aggregate, sparse_conv)
    s = _random_sparse(rng)
    feats = T.tensor(s.feats.data, requires_grad=True)
    s = s.with_feats(feats)
    w = _leaf(rng, 27, 2, 2)
    asym = AsymBlockParams(*[_leaf(rng, 9, 2, 2, scale=0.5) for _ in range(4)])
    r1 = Rank1Params(*[_leaf(rng, 3, 2, 2) for _ in range(3)])
    wg = _leaf(rng, 27, 3, 2)

    def fn():
        a = sparse_conv(s, SparseKernel(box_offsets((3, 3, 3)), w)).feats
        b = asymmetric_residual_block(s, asym).feats
        c = rank1_aggregate(s, r1).feats
        g = sparse_conv(s, SparseKernel(box_offsets((3, 3, 3)), wg, "generative", 2)).feats
        return T.concat([T.reshape(a, (-1,)), T.reshape(b, (-1,)), T.reshape(c, (-1,)), T.reshape(g, (-1,))])

    leaves = {"feats": feats, "conv": w, "generative": wg, "asym.vert_a": asym.vert_a, "asym.horiz_a": asym.horiz_a,
              "asym.horiz_b": asym.horiz_b, "asym.vert_b": asym.vert_b, "rank1.x": r1.x, "rank1.y": r1.y,
              "rank1.z": r1.z}
    return _op_target(rng, fn, leaves)


def _gssa_setup(rng):
    from .gssa import init_gssa_params
    from .model import named_parameters
    p = init_gssa_params(rng, 2, (3, 4), 3, ngp_scale=1.0)
    return p, dict(named_parameters(p))


def _t_ngp(rng):
    from .gssa import ngp
    p, params = _gssa_setup(rng)
    v = _leaf(rng, 2, 4, 4, 4)
    leaves = {"V": v, **{k: t for k, t in params.items() if k.startswith("ngp")}}
    return _op_target(rng, lambda: ngp(v, p), leaves)


def _t_ssi(rng):
    from .gssa import ssi
    p, params = _gssa_setup(rng)
    # the active set is fixed by a constant mask, so perturbing an inactive entry cannot change topology
    mask = T.tensor((rng.random((4, 4, 4)) < 0.5).astype(float))
    v = _leaf(rng, 2, 4, 4, 4)
    leaves = {"V_com": v, **{k: t for k, t in params.items() if k.startswith("ssi")}}
    return _op_target(rng, lambda: ssi(v * mask, p.ssi), leaves)


def _t_output_head(rng):
    from .gssa import output_head
    p, params = _gssa_setup(rng)
    v = _leaf(rng, 2, 4, 4, 2)
    leaves = {"V_fine": v, "head_w": p.head_w, "head_b": p.head_b}
    return _op_target(rng, lambda: output_head(v, p), leaves)


def _random_labels(rng, shape, n_cls):
    labels = rng.integers(0, n_cls, size=shape)
    labels.reshape(-1)[: n_cls] = np.arange(n_cls)
    labels.reshape(-1)[-1] = 255
    return labels


def _t_ssc_losses(rng):
    from .losses import ce_loss, scal_loss_geo, scal_loss_sem
    logits = _leaf(rng, 3, 4, 4, 2)
    labels = _random_labels(rng, (4, 4, 2), 3)
    return (lambda: scal_loss_sem(logits, labels) + scal_loss_geo(logits, labels) + ce_loss(logits, labels)), \
        {"Y_logits": logits}


def _t_depth_loss(rng):
    from .losses import depth_loss
    cam, _ = _tiny_camera()
    raw = _leaf(rng, 3, 4, 4)
    gt = rng.uniform(0.8, 2.2, size=(4, 4))
    gt[0, 0] = 0.0
    return (lambda: depth_loss(T.softmax(raw, axis=0), gt, cam) +
            depth_loss(T.softmax(raw, axis=0), gt, cam, soft=True)), {"depth_logits": raw}


def pipeline_config(seed: int = 0):
    """A float64 config small enough for exhaustive finite differences."""
    from .config import ExperimentConfig
    return ExperimentConfig().with_overrides(
        run={"seed": seed, "precision": "float64"},
        data={"num_scenes": 1, "n_boxes": 1, "n_poles": 1, "teacher_size": (4, 4)},
        grid={"extents": (4, 4, 4), "voxel_size": 0.5},
        camera={"height": 6, "width": 6, "fx": 4.0, "fy": 4.0, "cx": 3.0, "cy": 3.0,
                "position": (0.0, 1.0, 1.2), "depth_min": 0.5, "depth_max": 2.5, "depth_bins": 4},
        model={"image_channels": 4, "channels": 2, "head_hidden": 2, "teacher_channels": 4, "ssi_widths": (2, 2)},
        optim={"batch_size": 1},
    )


def _t_pipeline(rng, seed=0):
    from dataclasses import replace
    from .model import forward, init_params, named_parameters
    from .scene import generate_scene
    cfg = pipeline_config(seed)
    cfg = cfg.with_overrides(model={"detach_fusion_target": False})
    spec = replace(cfg.scene_spec(), min_object_x=2)
    sample = generate_scene(spec, seed)
    params = init_params(cfg)
    named = dict(named_parameters(params))
    for t in named.values():
        # zero-initialised biases put ReLU pre-activations exactly on the kink at all-zero inputs
        t.data = t.data + rng.normal(0.0, 0.05, size=t.shape)
    return (lambda: forward(params, sample, cfg).total), named


TARGETS: dict[str, Callable] = {
    "conv3d": _t_conv3d,
    "matmul": _t_matmul,
    "softmax": _t_softmax,
    "pointwise": _t_pointwise,
    "cross_entropy": _t_cross_entropy,
    "logits_map": _t_logits_map,
    "fusion": _t_fusion,
    "feature_distill": _t_feature_distill,
    "semantic_head": _t_semantic_head,
    "logits_distill": _t_logits_distill,
    "heads": _t_heads,
    "lift_splat": _t_lift_splat,
    "sparse": _t_sparse,
    "ngp": _t_ngp,
    "ssi": _t_ssi,
    "output_head": _t_output_head,
    "ssc_losses": _t_ssc_losses,
    "depth_loss": _t_depth_loss,
    "pipeline": _t_pipeline,
}
# Entry budget per leaf; larger leaves are subsampled (plus a whole-leaf directional check).
MAX_ENTRIES = {"ngp": 48, "ssi": 24, "sparse": 32, "fusion": 64, "semantic_head": 64, "heads": 64}


def run_target(target: str, seed: int = 0, max_entries: int | None = -1) -> GradcheckReport:
    if target not in TARGETS:
        raise KeyError(f"unknown gradcheck target {target!r}; valid targets: {', '.join(sorted(TARGETS))}")
    previous = T.get_precision()
    T.set_precision("float64")
    try:
        rng = np.random.default_rng(seed)
        builder = TARGETS[target]
        loss_fn, leaves = builder(rng, seed) if target == "pipeline" else builder(rng)
        budget = MAX_ENTRIES.get(target) if max_entries == -1 else max_entries
        return check(loss_fn, leaves, target, seed, budget)
    finally:
        T.set_precision(previous)
