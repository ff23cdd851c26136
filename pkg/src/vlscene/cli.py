"""Command-line entry point: ``vlscene <command>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .gradcheck import TARGETS, run_target
from .gssa import gssa_param_count, resnet3d_param_count
from .losses import PART_NAMES
from .train import (ABLATION_PRESETS, ABLATION_SEEDS, TrainingError, ablate, evaluate_run, load_checkpoint,
                    load_or_generate, save_checkpoint, summarize_ablation, train)

# Widths of the full-scale model: 128-channel feature volume, SSI stages at 2x and 4x, 20 classes.
FULL_SCALE_WIDTHS = {"channels": 128, "ssi_widths": (256, 512), "num_classes": 20}


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.deterministic is not None:
        run["deterministic"] = args.deterministic
    if args.out_dir is not None:
        run["out_dir"] = args.out_dir
    return cfg.with_overrides(run=run) if run else cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_dir(cfg: ExperimentConfig, args) -> Path:
    return Path(getattr(args, "data", None) or cfg.data.dataset_dir)


def cmd_generate(cfg, args) -> int:
    target = _dataset_dir(cfg, args)
    if (target / "dataset.json").exists() and not args.force:
        print(f"dataset already present at {target} (use --force to regenerate)")
        return 0
    if args.force and (target / "dataset.json").exists():
        (target / "dataset.json").unlink()
    samples = load_or_generate(cfg, target)
    print(f"wrote {len(samples)} scenes to {target} (dataset hash {cfg.dataset_hash()[:12]})")
    return 0


def cmd_train(cfg, args) -> int:
    if args.steps is not None:
        cfg = cfg.with_overrides(optim={"steps": args.steps})
    out = _out_dir(cfg)
    samples = load_or_generate(cfg, _dataset_dir(cfg, args))
    resume = load_checkpoint(args.resume) if args.resume else None
    (out / "config.ini").write_text(cfg.to_text())
    log_path = out / "train_log.jsonl"
    mode = "a" if resume is not None else "w"
    started = time.perf_counter()
    with open(log_path, mode) as fh:
        def emit(record):
            fh.write(json.dumps(record) + "\n")
            if record["step"] % args.print_every == 0:
                print(f"step {record['step']:>4}  l_total {record['l_total']:.4f}")
        ckpt = train(cfg, samples, resume=resume, stop_after=args.stop_after, log_fn=emit)
    save_checkpoint(ckpt, out / "checkpoint.vlck")
    print(f"trained to step {ckpt.step} in {time.perf_counter() - started:.1f}s; "
          f"checkpoint {out / 'checkpoint.vlck'}, log {log_path}")
    return 0


def cmd_eval(cfg, args) -> int:
    ckpt_path = Path(args.checkpoint or Path(cfg.run.out_dir) / "checkpoint.vlck")
    ckpt = load_checkpoint(ckpt_path)
    samples = load_or_generate(cfg, _dataset_dir(cfg, args))
    out = _out_dir(cfg)
    _, pooled = evaluate_run(ckpt, cfg, samples, out_dir=out)
    for rm in pooled.ranges:
        print(f"range {rm.cutoff:.2f}: mIoU {rm.miou:.4f}  IoU {rm.occ_iou:.4f}  "
              f"precision {rm.precision:.4f}  recall {rm.recall:.4f}")
    print(f"metrics written to {out / 'metrics.jsonl'} and {out / 'metrics.csv'}")
    return 0


def format_ablation(summary: dict) -> str:
    lines = [f"{'arm':<18}{'mIoU mean':>10}{'std':>8}{'IoU mean':>10}{'std':>8}{'n':>4}"]
    for arm, s in summary.items():
        lines.append(f"{arm:<18}{s['miou_mean']:>10.4f}{s['miou_std']:>8.4f}"
                     f"{s['iou_mean']:>10.4f}{s['iou_std']:>8.4f}{s['n']:>4}")
    return "\n".join(lines)


def cmd_ablate(cfg, args) -> int:
    out = _out_dir(cfg)
    samples = load_or_generate(cfg, _dataset_dir(cfg, args))
    seeds = tuple(args.seeds) if args.seeds else ABLATION_SEEDS
    rows = ablate(cfg, args.preset, samples, seeds)
    summary = summarize_ablation(rows)
    payload = {"preset": args.preset, "seeds": list(seeds),
               "rows": [{"arm": r.arm, "seed": r.seed, "miou": r.miou, "occ_iou": r.occ_iou,
                         "final_loss": r.final_loss, **{k: r.last_log.get(k) for k in PART_NAMES}} for r in rows],
               "summary": summary}
    path = out / f"ablation_{args.preset}.json"
    path.write_text(json.dumps(payload, indent=2))
    print(format_ablation(summary))
    print(f"rows written to {path}")
    return 0


def cmd_gradcheck(cfg, args) -> int:
    if args.target not in TARGETS:
        print(f"unknown gradcheck target {args.target!r}; valid targets: {', '.join(sorted(TARGETS))}",
              file=sys.stderr)
        return 2
    seed = cfg.run.seed
    ok = True
    for s in range(seed, seed + args.repeats):
        report = run_target(args.target, s, None if args.exhaustive else -1)
        for line in report.lines():
            print(line)
        ok &= report.passed
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_report(cfg, args) -> int:
    m = cfg.model
    full = gssa_param_count(FULL_SCALE_WIDTHS["channels"], FULL_SCALE_WIDTHS["ssi_widths"],
                            FULL_SCALE_WIDTHS["num_classes"], m.ngp_repeats)
    toy = gssa_param_count(m.channels, m.ssi_widths, m.num_classes, m.ngp_repeats)
    base = resnet3d_param_count(m.ssi_widths[0])
    print("parameter counts")
    print(f"  GSSA at full-scale widths {FULL_SCALE_WIDTHS['channels']}/{FULL_SCALE_WIDTHS['ssi_widths']}: {full:,}")
    print(f"  GSSA at configured widths {m.channels}/{tuple(m.ssi_widths)}: {toy:,}")
    print(f"  dense 3D ResNet-18 baseline (base width {m.ssi_widths[0]}): {base:,}  ratio {toy / base:.3f}")
    found = sorted(Path(cfg.run.out_dir).glob("ablation_*.json"))
    for path in found:
        payload = json.loads(path.read_text())
        print(f"\nablation preset {payload['preset']} (seeds {payload['seeds']})")
        print(format_ablation(payload["summary"]))
    if not found:
        print(f"\nno ablation results under {cfg.run.out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vlscene", description="Toy-scale camera-based semantic scene completion.")
    p.add_argument("--config", help="INI config file (defaults are used when omitted)")
    p.add_argument("--seed", type=int, help="override run.seed")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=None,
                   help="override run.deterministic")
    p.add_argument("--out-dir", help="override run.out_dir")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_data(sp):
        sp.add_argument("--data", help="dataset directory (overrides data.dataset_dir); generated if absent")

    g = sub.add_parser("generate", help="write the synthetic dataset to disk")
    g.add_argument("--data", help="dataset directory (overrides data.dataset_dir)")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train and write train_log.jsonl plus checkpoint.vlck")
    with_data(t)
    t.add_argument("--steps", type=int, help="override optim.steps")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-after", type=int, help="stop at this step (the schedule still uses optim.steps)")
    t.add_argument("--print-every", type=int, default=20)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint; writes metrics.jsonl and metrics.csv")
    with_data(e)
    e.add_argument("--checkpoint", help="defaults to <out-dir>/checkpoint.vlck")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train a preset against the no-module baseline")
    with_data(a)
    a.add_argument("--preset", choices=sorted(ABLATION_PRESETS), default="full")
    a.add_argument("--seeds", type=int, nargs="+")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference check of one op or the whole pipeline")
    c.add_argument("target", help=f"one of: {', '.join(sorted(TARGETS))}")
    c.add_argument("--repeats", type=int, default=1, help="number of consecutive seeds")
    c.add_argument("--exhaustive", action="store_true", help="perturb every entry of every leaf")
    c.set_defaults(func=cmd_gradcheck)

    r = sub.add_parser("report", help="parameter counts and any ablation tables under out-dir")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        return args.func(cfg, args)
    except (ConfigError, TrainingError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
