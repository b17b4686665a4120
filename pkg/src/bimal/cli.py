"""Command-line entry points.

Exit codes: 0 success, 2 usage or configuration error, 3 missing or corrupt
data, 4 numerical failure (diverged run or failed gradient check).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import tenio
from .checks import run_gradient_suite
from .config import ConfigError, RunConfig, load_config
from .flow import FlowModel, load_flow_checkpoint, save_flow_checkpoint
from .numerics import NumericalError
from .scenegen import (
    NUM_CLASSES,
    generate_dataset,
    load_dataset,
    validate_labels,
)
from .trainer import (
    SEG_MODES,
    SegNet,
    append_metrics_csv,
    evaluate,
    load_seg_checkpoint,
    save_seg_checkpoint,
    train_flow,
    train_segmenter,
    write_curve_csv,
)

__all__ = ["main", "run"]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON file of dotted-key overrides")
    p.add_argument("--seed", type=int, default=None, help="override optim.seed")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bimal",
        description="Density-guided domain adaptation for synthetic street scenes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    _add_common(p)
    p.add_argument("--n", type=int, required=True, help="number of scenes")
    p.add_argument("--domain", choices=("source", "target"), default="source")

    p = sub.add_parser("train-flow", help="fit the label-map density model")
    _add_common(p)
    p.add_argument("--data", required=True, help="source dataset directory")
    p.add_argument("--steps", type=int, default=None, help="override optim.max_steps")

    p = sub.add_parser("train-seg", help="train or adapt the segmenter")
    _add_common(p)
    p.add_argument("--source", required=True, help="labeled source dataset directory")
    p.add_argument("--target", required=True, help="unlabeled target dataset directory")
    p.add_argument("--mode", choices=SEG_MODES, default="source_only")
    p.add_argument("--flow-ckpt", default=None, help="flow checkpoint (required for bimal)")
    p.add_argument("--init-ckpt", default=None, help="segmenter checkpoint to start from")
    p.add_argument("--keep", choices=("best", "last"), default="best",
                   help="return the best source-validation model or the final one")
    p.add_argument("--steps", type=int, default=None, help="override optim.max_steps")

    p = sub.add_parser("eval", help="evaluate a segmenter checkpoint on a dataset")
    _add_common(p)
    p.add_argument("--seg-ckpt", required=True)
    p.add_argument("--data", required=True, help="dataset directory to score")
    p.add_argument("--flow-ckpt", default=None, help="adds flow NLL and shift-score columns")

    p = sub.add_parser("sample-flow", help="draw label maps from a trained flow")
    _add_common(p)
    p.add_argument("--flow-ckpt", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--temperature", type=float, default=0.7)

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)

    return parser


def _cfg_from(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = RunConfig({**{k: v for k, v in cfg.values.items() if k != "optim.seed"},
                         "optim.seed": args.seed})
    return cfg


def _resolve_ckpt(path_str: str, kind_dir: str) -> Path:
    """Accept a checkpoint directory or the run directory that contains it.

    Training commands write checkpoints under ``<out>/flow_ckpt`` and
    ``<out>/seg_ckpt``, so both the run directory and the checkpoint
    directory itself are valid arguments.
    """
    path = Path(path_str)
    nested = path / kind_dir
    if not (path / "manifest.json").exists() and (nested / "manifest.json").exists():
        return nested
    return path


def _cmd_gen_data(args) -> int:
    if args.n < 1:
        print("gen-data: --n must be at least 1", file=sys.stderr)
        return 2
    cfg = _cfg_from(args)
    domain = cfg.source_params() if args.domain == "source" else cfg.target_params()
    out = generate_dataset(
        cfg.scene_config(), domain, args.n, cfg["optim.seed"], Path(args.out)
    )
    print(f"wrote {args.n} {args.domain} scenes to {out}")
    return 0


def _cmd_train_flow(args) -> int:
    cfg = _cfg_from(args)
    data = load_dataset(Path(args.data))
    optim = cfg.optim_config(max_steps=args.steps)
    model = FlowModel(
        height=data.images.shape[1],
        width=data.images.shape[2],
        in_channels=NUM_CLASSES,
        seed=cfg["optim.seed"],
        **cfg.flow_kwargs(),
    )
    result = train_flow(
        model,
        data,
        optim,
        smooth_eps=float(cfg["flow.smooth_eps"]),
        noise_amp=float(cfg["flow.dequant_noise"]),
        eval_every=cfg["train.eval_every"],
        eval_samples=cfg["train.eval_samples"],
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_flow_checkpoint(model, out / "flow_ckpt", cfg.config_hash())
    write_curve_csv(out / "flow_curve.csv", result.curve, cfg.config_hash())
    print(
        f"best held-slice nll {result.best_nll:.4f} at step {result.best_step} "
        f"(of {optim.max_steps})"
    )
    if result.aborted:
        print("training aborted on non-finite loss; best checkpoint kept", file=sys.stderr)
        return 4
    return 0


def _cmd_train_seg(args) -> int:
    cfg = _cfg_from(args)
    if args.mode == "bimal" and args.flow_ckpt is None:
        print("train-seg: --flow-ckpt is required for bimal mode", file=sys.stderr)
        return 2
    source = load_dataset(Path(args.source))
    target = load_dataset(Path(args.target))
    flow = (
        load_flow_checkpoint(_resolve_ckpt(args.flow_ckpt, "flow_ckpt"))
        if args.flow_ckpt
        else None
    )
    optim = cfg.optim_config(max_steps=args.steps)
    if args.init_ckpt:
        seg = load_seg_checkpoint(_resolve_ckpt(args.init_ckpt, "seg_ckpt"))
    else:
        seg = SegNet(seed=cfg["optim.seed"])
    result = train_segmenter(
        seg,
        flow,
        source,
        target,
        args.mode,
        optim,
        weights=cfg.loss_weights(),
        tau_cfg=cfg.tau_config(),
        eval_every=cfg["train.eval_every"],
        val_frac=float(cfg["train.val_frac"]),
        warmup_frac=float(cfg["loss.warmup_frac"]),
        keep=args.keep,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_seg_checkpoint(seg, out / "seg_ckpt", cfg.config_hash())
    write_curve_csv(out / "seg_curve.csv", result.curve, cfg.config_hash())
    rec = evaluate(seg, flow, target, cfg.tau_config(), cfg["loss.lambda_tau"],
                   step=result.best_step)
    append_metrics_csv(out / "metrics.csv", rec, cfg.config_hash())
    print(
        f"mode={args.mode} best source-val miou {result.best_val_miou:.4f} "
        f"at step {result.best_step}; target miou {rec.miou:.4f}"
    )
    if result.aborted:
        print("training aborted on non-finite loss; best checkpoint kept", file=sys.stderr)
        return 4
    return 0


def _cmd_eval(args) -> int:
    cfg = _cfg_from(args)
    data = load_dataset(Path(args.data))
    seg = load_seg_checkpoint(_resolve_ckpt(args.seg_ckpt, "seg_ckpt"))
    flow = (
        load_flow_checkpoint(_resolve_ckpt(args.flow_ckpt, "flow_ckpt"))
        if args.flow_ckpt
        else None
    )
    rec = evaluate(seg, flow, data, cfg.tau_config(), cfg["loss.lambda_tau"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    append_metrics_csv(out / "metrics.csv", rec, cfg.config_hash())
    ious = " ".join(f"{v:.3f}" for v in rec.per_class_iou)
    print(f"miou {rec.miou:.4f} per-class [{ious}] entropy {rec.mean_entropy:.4f}")
    if flow is not None:
        print(f"flow nll mean {rec.flow_nll_mean:.4f} shift score {rec.uds_ub:.4f}")
    return 0


def _cmd_sample_flow(args) -> int:
    if args.n < 1:
        print("sample-flow: --n must be at least 1", file=sys.stderr)
        return 2
    cfg = _cfg_from(args)
    flow = load_flow_checkpoint(_resolve_ckpt(args.flow_ckpt, "flow_ckpt"))
    base = cfg["optim.seed"]
    maps = []
    valid = 0
    for i in range(args.n):
        x = flow.sample(seed=base + i, temperature=args.temperature)
        labels = np.argmax(x.data, axis=2).astype(np.uint8)
        maps.append(labels)
        if validate_labels(labels):
            valid += 1
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tenio.write_tensor(out / "samples.ten", np.stack(maps))
    print(f"wrote {args.n} samples; {valid}/{args.n} satisfy the scene grammar")
    return 0


def _cmd_grad_check(args) -> int:
    try:
        results = run_gradient_suite(eps=args.eps, tol=args.tol)
    except ValueError as e:
        print(f"grad-check: {e}", file=sys.stderr)
        return 2
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:28s} max rel err {r.max_rel_error:.3e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} components within {args.tol:g}")
    return 4 if failed else 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-flow": _cmd_train_flow,
    "train-seg": _cmd_train_seg,
    "eval": _cmd_eval,
    "sample-flow": _cmd_sample_flow,
    "grad-check": _cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code else 0
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, tenio.DataIntegrityError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 4


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
