"""Training loop, AdamW optimizer, checkpoints, evaluation runs and ablations."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .io import FormatError, decode_vlft, encode_vlft
from .losses import PART_NAMES, MetricsReport, evaluate, pool_reports, write_csv, write_jsonl
from .model import ModelParams, forward, init_params, load_arrays, named_parameters, predict
from .scene import SceneSample, generate_dataset, read_dataset, read_manifest, write_dataset

log = logging.getLogger(__name__)

CKPT_MAGIC = b"VLCK"
CKPT_VERSION = 1

ABLATION_PRESETS = {
    # preset -> toggle overrides for the treatment arm; the control arm disables VLGD, NGP and SSI
    "vlgd": {"enable_vlgd": True, "enable_ngp": False, "enable_ssi": False},
    "ngp": {"enable_vlgd": False, "enable_ngp": True, "enable_ssi": False},
    "ssi": {"enable_vlgd": False, "enable_ngp": False, "enable_ssi": True},
    "kd-feature-only": {"enable_vlgd": True, "enable_kd_logits": False},
    "kd-logits-only": {"enable_vlgd": True, "enable_kd_feat": False},
    "full": {"enable_vlgd": True, "enable_ngp": True, "enable_ssi": True},
}
BASELINE_TOGGLES = {"enable_vlgd": False, "enable_ngp": False, "enable_ssi": False}
ABLATION_SEEDS = (0, 1, 2, 3, 4)


class TrainingError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config_hash: str
    dataset_hash: str
    step: int
    params: dict[str, np.ndarray]
    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    rng_state: dict
    log: list[dict] = field(default_factory=list)

    def same_as(self, other: "Checkpoint") -> bool:
        if (self.config_hash, self.dataset_hash, self.step, self.rng_state) != \
                (other.config_hash, other.dataset_hash, other.step, other.rng_state):
            return False
        for a, b in ((self.params, other.params), (self.exp_avg, other.exp_avg), (self.exp_avg_sq, other.exp_avg_sq)):
            if a.keys() != b.keys() or any(a[k].tobytes() != b[k].tobytes() for k in a):
                return False
        return True


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    names = sorted(ckpt.params)
    meta = json.dumps({"dataset_hash": ckpt.dataset_hash, "names": names, "rng_state": ckpt.rng_state},
                      sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
        fh.write(ckpt.config_hash.encode("ascii").ljust(64, b"\0"))
        fh.write(struct.pack("<QI", ckpt.step, len(meta)) + meta)
        for name in names:
            for store in (ckpt.params, ckpt.exp_avg, ckpt.exp_avg_sq):
                fh.write(encode_vlft(store[name]))


def load_checkpoint(path: str | Path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {buf[:4]!r})")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cfg_hash = buf[8:72].rstrip(b"\0").decode("ascii")
    step, meta_len = struct.unpack("<QI", buf[72:84])
    meta = json.loads(buf[84:84 + meta_len])
    pos = 84 + meta_len
    stores = ({}, {}, {})
    for name in meta["names"]:
        for store in stores:
            store[name], pos = decode_vlft(buf, pos)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return Checkpoint(cfg_hash, meta["dataset_hash"], step, *stores, rng_state=meta["rng_state"])


class AdamW:
    """Adam with decoupled weight decay and a multi-step learning-rate schedule."""

    def __init__(self, params: list[tuple[str, T.Tensor]], cfg: ExperimentConfig):
        self.params = params
        self.o = cfg.optim
        self.milestones = [int(round(m * self.o.steps)) for m in self.o.milestones]
        self.exp_avg = {n: np.zeros_like(t.data) for n, t in params}
        self.exp_avg_sq = {n: np.zeros_like(t.data) for n, t in params}
        self.step_count = 0

    def lr_at(self, step: int) -> float:
        return self.o.lr * self.o.gamma ** sum(step >= m for m in self.milestones)

    def step(self) -> None:
        o = self.o
        lr = self.lr_at(self.step_count)
        self.step_count += 1
        bc1 = 1.0 - o.beta1 ** self.step_count
        bc2 = 1.0 - o.beta2 ** self.step_count
        for name, t in self.params:
            if t.grad is None:
                continue
            g = t.grad.astype(t.dtype, copy=False)
            m, v = self.exp_avg[name], self.exp_avg_sq[name]
            m *= o.beta1
            m += (1.0 - o.beta1) * g
            v *= o.beta2
            v += (1.0 - o.beta2) * g * g
            t.data = t.data * np.asarray(1.0 - lr * o.weight_decay, dtype=t.dtype)
            t.data = t.data - np.asarray(lr / bc1, dtype=t.dtype) * m / (np.sqrt(v / bc2) + o.eps).astype(t.dtype)


def _snapshot(cfg, params, opt, rng, step, history) -> Checkpoint:
    named = named_parameters(params)
    return Checkpoint(cfg.config_hash(), cfg.dataset_hash(), step, {n: t.data.copy() for n, t in named},
                      {n: a.copy() for n, a in opt.exp_avg.items()}, {n: a.copy() for n, a in opt.exp_avg_sq.items()},
                      rng.bit_generator.state, list(history))


def train(cfg: ExperimentConfig, samples: list[SceneSample], resume: Checkpoint | None = None,
          stop_after: int | None = None, log_fn: Callable[[dict], None] | None = None) -> Checkpoint:
    """Run ``cfg.optim.steps`` optimizer steps (or stop early at ``stop_after``)."""
    T.set_precision(cfg.run.precision)
    params = init_params(cfg)
    named = named_parameters(params)
    opt = AdamW(named, cfg)
    rng = np.random.default_rng([cfg.run.seed, 1])
    history: list[dict] = []
    start = 0
    if resume is not None:
        if resume.config_hash != cfg.config_hash():
            raise TrainingError("checkpoint was produced by a different config")
        load_arrays(params, resume.params)
        opt.exp_avg = {k: v.copy() for k, v in resume.exp_avg.items()}
        opt.exp_avg_sq = {k: v.copy() for k, v in resume.exp_avg_sq.items()}
        opt.step_count = start = resume.step
        rng.bit_generator.state = resume.rng_state
        history = list(resume.log)

    end = cfg.optim.steps if stop_after is None else min(stop_after, cfg.optim.steps)
    b = cfg.optim.batch_size
    for step in range(start, end):
        batch = rng.choice(len(samples), size=b, replace=False)
        for _, t in named:
            t.grad = None
        total = None
        sums = {k: 0.0 for k in PART_NAMES}
        for i in batch:
            res = forward(params, samples[int(i)], cfg)
            for k in PART_NAMES:
                val = res.parts[k]
                sums[k] += float(val.data) if isinstance(val, T.Tensor) else float(val)
            total = res.total if total is None else total + res.total
        loss = total * (1.0 / b)
        if not np.isfinite(loss.data):
            bad = [k for k, v in sums.items() if not np.isfinite(v)]
            raise TrainingError(f"non-finite loss at step {step} (components: {bad or ['l_total']})")
        try:
            loss.backward()
        except T.NonFiniteError as exc:
            raise TrainingError(f"non-finite gradient at step {step}: {exc}") from exc
        opt.step()
        record = {"step": step, **{k: v / b for k, v in sums.items()}, "l_total": float(loss.data)}
        history.append(record)
        if log_fn is not None:
            log_fn(record)
    return _snapshot(cfg, params, opt, rng, end, history)


def params_from_checkpoint(ckpt: Checkpoint, cfg: ExperimentConfig) -> ModelParams:
    params = init_params(cfg)
    load_arrays(params, ckpt.params, requires_grad=False)
    return params


def evaluate_run(ckpt: Checkpoint, cfg: ExperimentConfig, samples: list[SceneSample],
                 dataset_hash: str | None = None, out_dir: str | Path | None = None) -> tuple[list[MetricsReport], MetricsReport]:
    """Argmax predictions for every sample, scored per scene and pooled."""
    expected = dataset_hash if dataset_hash is not None else cfg.dataset_hash()
    if ckpt.dataset_hash != expected:
        raise TrainingError(f"checkpoint dataset hash {ckpt.dataset_hash[:12]} does not match "
                            f"dataset {expected[:12]}")
    params = params_from_checkpoint(ckpt, cfg)
    ranges = tuple(cfg.eval.ranges)
    reports = []
    for s in samples:
        pred = predict(params, s, cfg)
        reports.append(evaluate(pred, s.labels, ranges, cfg.model.num_classes,
                                cfg.loss.count_absent_as_zero, scene_id=s.id))
    pooled = pool_reports(reports, cfg.loss.count_absent_as_zero)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_jsonl(reports + [pooled], out_dir / "metrics.jsonl")
        write_csv(pooled, out_dir / "metrics.csv", samples[0].labels.class_names if samples else ())
    return reports, pooled


def load_or_generate(cfg: ExperimentConfig, directory: str | Path | None = None) -> list[SceneSample]:
    """Read the dataset at ``directory`` if present (checking its hash), else generate it in memory."""
    if directory is not None and (Path(directory) / "dataset.json").exists():
        manifest = read_manifest(directory)
        if manifest.get("spec_hash") != cfg.dataset_hash():
            raise TrainingError(f"dataset at {directory} was generated from a different spec")
        return read_dataset(directory)
    samples = generate_dataset(cfg.scene_spec(), cfg.data.num_scenes, cfg.data.dataset_seed)
    if directory is not None:
        write_dataset(samples, directory, cfg.dataset_hash())
    return samples


@dataclass
class AblationRow:
    arm: str
    seed: int
    miou: float
    occ_iou: float
    final_loss: float
    last_log: dict


def ablate(cfg: ExperimentConfig, preset: str, samples: list[SceneSample], seeds=ABLATION_SEEDS) -> list[AblationRow]:
    """Train treatment and control arms under identical seeds."""
    if preset not in ABLATION_PRESETS:
        raise ValueError(f"unknown preset {preset!r}; valid: {sorted(ABLATION_PRESETS)}")
    arms = {preset: ABLATION_PRESETS[preset], "baseline": BASELINE_TOGGLES}
    rows = []
    for arm, toggles in arms.items():
        for seed in seeds:
            run_cfg = cfg.with_overrides(toggles=toggles, run={"seed": seed})
            ckpt = train(run_cfg, samples)
            _, pooled = evaluate_run(ckpt, run_cfg, samples)
            rows.append(AblationRow(arm, seed, pooled.full.miou, pooled.full.occ_iou,
                                    ckpt.log[-1]["l_total"] if ckpt.log else float("nan"),
                                    ckpt.log[-1] if ckpt.log else {}))
    return rows


def summarize_ablation(rows: list[AblationRow]) -> dict[str, dict[str, float]]:
    out = {}
    for arm in dict.fromkeys(r.arm for r in rows):
        m = np.array([r.miou for r in rows if r.arm == arm])
        o = np.array([r.occ_iou for r in rows if r.arm == arm])
        out[arm] = {"miou_mean": float(m.mean()), "miou_std": float(m.std()),
                    "iou_mean": float(o.mean()), "iou_std": float(o.std()), "n": int(m.size)}
    return out
