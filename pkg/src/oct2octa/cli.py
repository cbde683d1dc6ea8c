"""Batch command-line entry points.

Subcommands: gen-synthetic, pretrain, train, translate, eval, codebook-stats,
plot. Every run directory is self-describing (merged config snapshot plus
library versions). A JSON config file passed via ``--config`` overrides any
flags; the environment variable ``OCT2OCTA_OUT_ROOT`` rebases relative output
directories. All errors exit nonzero with a single parseable line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint
from .errors import CheckpointError, ConfigError, Oct2OctaError
from .metrics import aggregate_records, codebook_utilization, evaluate_pair
from .nets import NetConfig
from .phantom import PhantomConfig, generate_phantom_pair
from .trainer import (
    TrainConfig,
    _derived_seed,
    _model_for_inference,
    collect_codebook_indices,
    train_stage1,
    train_stage2,
    translate,
)
from .volume import (
    Modality,
    PairEntry,
    PairManifest,
    projection_map,
    read_manifest,
    read_volume,
    validate_manifest,
    write_manifest,
    write_volume,
)


def _out_dir(raw: str) -> Path:
    path = Path(raw)
    root = os.environ.get("OCT2OCTA_OUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _snapshot_args(args: argparse.Namespace) -> dict:
    return {k: str(v) if isinstance(v, Path) else v
            for k, v in vars(args).items() if k != "func"}


def _write_snapshot(out_dir: Path, config: dict) -> None:
    import scipy
    import torch

    (out_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True) + "\n")
    versions = {
        "oct2octa": __version__,
        "numpy": np.__version__,
        "torch": torch.__version__,
        "scipy": scipy.__version__,
    }
    (out_dir / "versions.json").write_text(json.dumps(versions, indent=2, sort_keys=True) + "\n")


_SNAPSHOT_ONLY_KEYS = {"command", "train_config", "config"}  # metadata, not flags


def _apply_config_file(args: argparse.Namespace) -> argparse.Namespace:
    """Values from --config override command-line flags.

    A run directory's own ``config.json`` snapshot is accepted as-is, so
    re-running a command from its snapshot reproduces the outputs.
    """
    if not getattr(args, "config", None):
        return args
    overrides = json.loads(Path(args.config).read_text())
    if not isinstance(overrides, dict):
        raise ConfigError(f"config file {args.config} must hold a JSON object")
    for key, value in overrides.items():
        if key in _SNAPSHOT_ONLY_KEYS:
            continue
        if not hasattr(args, key):
            raise ConfigError(f"config file key {key!r} is not a recognized option")
        setattr(args, key, value)
    return args


def _add_net_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--blocks", type=int, default=4)
    p.add_argument("--resblocks", type=int, default=2)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--codebook-size", type=int, default=512)
    p.add_argument("--codebook-dim", type=int, default=32)
    p.add_argument("--codebook-levels", choices=["bottleneck_only", "per_downsample"],
                   default="bottleneck_only")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--steps", type=int, default=None, help="total optimizer steps (overrides epochs)")
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--learning-rate", type=float, default=3.0e-4)
    p.add_argument("--lambda-weight", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--commitment-weight", type=float, default=1.0)
    p.add_argument("--crop-size", type=int, default=None)
    p.add_argument("--checkpoint-every", type=int, default=None)
    p.add_argument("--embed-dim", type=int, default=32)
    p.add_argument("--feature-patch-side", type=int, default=None)
    p.add_argument("--pm-patch-side", type=int, default=None)


def _net_config(args: argparse.Namespace) -> NetConfig:
    return NetConfig(
        blocks=args.blocks,
        resblocks_per_block=args.resblocks,
        base_channels=args.base_channels,
        codebook_size=args.codebook_size,
        codebook_dim=args.codebook_dim,
        codebook_levels=args.codebook_levels,
    )


def _train_config(args: argparse.Namespace, stage: str) -> TrainConfig:
    return TrainConfig(
        stage=stage,
        epochs=args.epochs,
        max_steps=args.steps,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        lambda_weight=args.lambda_weight,
        tau=args.tau,
        commitment_weight=args.commitment_weight,
        seed=args.seed,
        net=_net_config(args),
        crop_size=args.crop_size,
        checkpoint_every=args.checkpoint_every,
        embed_dim=args.embed_dim,
        feature_patch_side=args.feature_patch_side,
        pm_patch_side=args.pm_patch_side,
    )


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args.out_dir)
    dims = tuple(args.dims)
    counts = {"train": args.count, "val": args.val_count, "test": args.test_count}
    subject = 0
    manifest_paths = []
    for split, count in counts.items():
        entries = []
        for _ in range(count):
            cfg = PhantomConfig(
                dims=dims,
                vessel_count=args.vessel_count,
                vessel_radius_range=(args.radius_min, args.radius_max),
                speckle_noise_sd=args.noise_sd,
                discontinuity_rate=args.discontinuity_rate,
                seed=_derived_seed(args.seed, "phantom", subject),
            )
            vol_oct, vol_octa = generate_phantom_pair(cfg)
            oct_name = f"{subject:04d}_oct.mvol"
            octa_name = f"{subject:04d}_octa.mvol"
            write_volume(vol_oct, out_dir / oct_name)
            write_volume(vol_octa, out_dir / octa_name)
            entries.append(PairEntry(oct_name, octa_name, f"subj{subject:04d}"))
            subject += 1
        if count:
            manifest = PairManifest(entries=entries, split=split, root=out_dir)
            mpath = out_dir / f"{split}.tsv"
            write_manifest(manifest, mpath)
            validate_manifest(read_manifest(mpath))
            manifest_paths.append(str(mpath))
    _write_snapshot(out_dir, {"command": "gen-synthetic", **_snapshot_args(args)})
    print(f"wrote {subject} pairs under {out_dir}; manifests: {', '.join(manifest_paths)}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args.out_dir)
    stage = "1-oct" if args.modality == "oct" else "1-octa"
    cfg = _train_config(args, stage)
    manifest = read_manifest(args.manifest)
    val_manifest = read_manifest(args.val_manifest) if args.val_manifest else None
    _write_snapshot(out_dir, {"command": "pretrain", "train_config": cfg.to_dict(), **_snapshot_args(args)})
    modality = Modality.OCT if args.modality == "oct" else Modality.OCTA
    result = train_stage1(manifest, modality, cfg, out_dir=out_dir,
                          val_manifest=val_manifest, resume_from=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"pretrain[{args.modality}] finished at step {result.checkpoint.step}; "
          f"final total loss {last.get('total', float('nan')):.4f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args.out_dir)
    cfg = _train_config(args, "2")
    manifest = read_manifest(args.manifest)
    val_manifest = read_manifest(args.val_manifest) if args.val_manifest else None
    _write_snapshot(out_dir, {"command": "train", "train_config": cfg.to_dict(), **_snapshot_args(args)})
    result = train_stage2(manifest, cfg, args.ckpt_oct, args.ckpt_octa, out_dir=out_dir,
                          val_manifest=val_manifest, resume_from=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"train finished at step {result.checkpoint.step}; "
          f"final total loss {last.get('total', float('nan')):.4f}; "
          f"checkpoint {result.checkpoint_path}")
    return 0


def cmd_translate(args: argparse.Namespace) -> int:
    vol = read_volume(args.input)
    out = translate(args.checkpoint, vol, window=args.window)
    write_volume(out, args.output)
    print(f"translated {args.input} -> {args.output} dims={out.dims}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args.out_dir)
    manifest = read_manifest(args.manifest)
    model = None
    if args.predictions_dir is None:
        model = _model_for_inference(args.checkpoint)
    records = []
    with open(out_dir / "eval_records.jsonl", "w") as fh:
        for i, entry in enumerate(manifest.entries):
            vol_oct, vol_octa = manifest.load_pair(i)
            if args.predictions_dir is not None:
                pred_path = Path(args.predictions_dir) / Path(entry.octa_path).name
                pred = read_volume(pred_path)
            else:
                pred = translate(model, vol_oct, window=args.window)
            vol_rec = evaluate_pair(pred, vol_octa, "volume")
            pm_rec = evaluate_pair(projection_map(pred), projection_map(vol_octa),
                                   "projection_map")
            records.append((vol_rec, pm_rec))
            fh.write(json.dumps({"subject_id": entry.subject_id,
                                 "volume": vol_rec.as_dict(),
                                 "projection_map": pm_rec.as_dict()}, sort_keys=True) + "\n")
    vol_summary = aggregate_records([r[0] for r in records], "volume")
    pm_summary = aggregate_records([r[1] for r in records], "projection_map")
    summary = {"volume": vol_summary.as_dict(), "projection_map": pm_summary.as_dict()}
    (out_dir / "eval_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    table = [
        f"{'target':<16}{'MAE':>10}{'PSNR(dB)':>12}{'SSIM':>10}{'n':>5}",
        f"{'volume':<16}{vol_summary.mae:>10.4f}{vol_summary.psnr:>12.2f}"
        f"{vol_summary.ssim:>10.4f}{vol_summary.n_items:>5}",
        f"{'projection_map':<16}{pm_summary.mae:>10.4f}{pm_summary.psnr:>12.2f}"
        f"{pm_summary.ssim:>10.4f}{pm_summary.n_items:>5}",
    ]
    (out_dir / "eval_summary.txt").write_text("\n".join(table) + "\n")
    _write_snapshot(out_dir, {"command": "eval", **_snapshot_args(args)})
    print("\n".join(table))
    return 0


def cmd_codebook_stats(args: argparse.Namespace) -> int:
    out_dir = _out_dir(args.out_dir)
    model = _model_for_inference(args.checkpoint)
    manifest = read_manifest(args.manifest)
    ckpt = load_checkpoint(args.checkpoint) if not hasattr(args.checkpoint, "meta") else args.checkpoint
    source = Modality.OCTA if ckpt.meta.get("modality") == "OCTA" else Modality.OCT
    indices = collect_codebook_indices(model, manifest, source)
    report = codebook_utilization(indices, model.codebook.n_entries)
    (out_dir / "codebook_stats.json").write_text(
        json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n"
    )
    _write_snapshot(out_dir, {"command": "codebook-stats", **_snapshot_args(args)})
    print(f"codebook utilization: {report.used_entries}/{report.total_entries} "
          f"({report.rate:.1%}) over {indices.size} features")
    return 0


def cmd_plot(args: argparse.Namespace) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run_dir = Path(args.run_dir)
    out_dir = _out_dir(args.out_dir) if args.out_dir else run_dir
    emitted = []

    log_path = run_dir / "train_log.jsonl"
    if log_path.exists():
        steps, totals, recons, val_steps, val_psnrs = [], [], [], [], []
        for line in log_path.read_text().splitlines():
            rec = json.loads(line)
            if "total" in rec:
                steps.append(rec["step"])
                totals.append(rec["total"])
                recons.append(rec["reconstruction"])
            if "val_psnr" in rec:
                val_steps.append(rec["step"])
                val_psnrs.append(rec["val_psnr"])
        fig, axes = plt.subplots(1, 2 if val_psnrs else 1, figsize=(10, 4))
        ax0 = axes[0] if val_psnrs else axes
        ax0.plot(steps, totals, label="total")
        ax0.plot(steps, recons, label="reconstruction")
        ax0.set_xlabel("step")
        ax0.set_ylabel("loss")
        ax0.set_yscale("log")
        ax0.legend()
        if val_psnrs:
            axes[1].plot(val_steps, val_psnrs, marker="o")
            axes[1].set_xlabel("step")
            axes[1].set_ylabel("val PSNR (dB)")
        fig.tight_layout()
        curve_path = out_dir / "curves.png"
        fig.savefig(curve_path, dpi=120)
        plt.close(fig)
        emitted.append(str(curve_path))

    if args.manifest and args.checkpoint:
        manifest = read_manifest(args.manifest)
        vol_oct, vol_octa = manifest.load_pair(args.index)
        pred = translate(args.checkpoint, vol_oct, window=args.window)

        def _norm(pm):  # display normalization only, never used by metrics
            vals = pm.values
            span = vals.max() - vals.min()
            return (vals - vals.min()) / span if span > 0 else vals

        panels = [
            ("input OCT PM", _norm(projection_map(vol_oct))),
            ("ground truth OCTA PM", _norm(projection_map(vol_octa))),
            ("translated PM", _norm(projection_map(pred))),
        ]
        fig, axes = plt.subplots(1, 3, figsize=(12, 4))
        for ax, (title, img) in zip(axes, panels):
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            ax.set_title(title)
            ax.axis("off")
        fig.tight_layout()
        trip_path = out_dir / "projection_maps.png"
        fig.savefig(trip_path, dpi=120)
        plt.close(fig)
        emitted.append(str(trip_path))

    if not emitted:
        raise ConfigError(
            f"nothing to plot in {run_dir}: no train_log.jsonl and no --manifest/--checkpoint"
        )
    print(f"plots written: {', '.join(emitted)}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oct2octa",
                                     description="vector-quantized OCT-to-OCTA 3D translation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", type=str, default=None,
                       help="JSON file whose values override flags")

    p = sub.add_parser("gen-synthetic", help="generate phantom pairs + manifests")
    common(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--test-count", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=[32, 32, 32], metavar=("L", "W", "D"))
    p.add_argument("--vessel-count", type=int, default=4)
    p.add_argument("--radius-min", type=float, default=1.2)
    p.add_argument("--radius-max", type=float, default=2.6)
    p.add_argument("--noise-sd", type=float, default=0.04)
    p.add_argument("--discontinuity-rate", type=float, default=0.1)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("pretrain", help="stage-1 reconstruction pretraining")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", choices=["oct", "octa"], required=True)
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", default=None)
    _add_net_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="stage-2 translator training")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt-oct", required=True)
    p.add_argument("--ckpt-octa", required=True)
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", default=None)
    _add_net_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate one OCT volume")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--window", type=int, default=None)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("eval", help="evaluate a checkpoint (or a predictions dir) on a manifest")
    common(p)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--predictions-dir", default=None,
                   help="score pre-computed volumes (named like the target files) instead of translating")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("codebook-stats", help="codebook utilization over a manifest")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_codebook_stats)

    p = sub.add_parser("plot", help="emit loss curves and projection-map panels")
    common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--manifest", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--window", type=int, default=None)
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args = _apply_config_file(args)
        if args.command == "eval" and args.checkpoint is None and args.predictions_dir is None:
            raise CheckpointError("eval needs --checkpoint or --predictions-dir")
        return args.func(args)
    except Oct2OctaError as exc:
        print(f"error code={exc.code} message={json.dumps(str(exc))}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error code=INTERNAL message={json.dumps(str(exc))}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
