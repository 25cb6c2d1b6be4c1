"""Command-line pipeline: synth, embed, label, train, eval, cam.

Stages communicate only through files (manifests, voxel files, feature cache,
checkpoints, logs). Every run writes exactly one run_record.json into its
output directory with the config hash, input content hashes, output paths,
timestamp, and seed. Exit codes: 0 success, 2 validation error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from .data_model import (
    ManifestError,
    load_manifest,
    read_voxels,
    save_manifest,
    split_by_patient,
)
from .embedding import (
    BackboneConfig,
    embed_volumes,
    load_backbone,
    read_feature_cache,
    save_backbone,
    train_backbone,
    write_feature_cache,
)
from .evaluation import compute_cam, evaluate, save_cam_overlay, save_cam_png
from .mtl_model import load_mtl, save_mtl
from .surrogate import assign_surrogates, partition_groups, write_assignment_log
from .synthetic import SyntheticSpec, generate_synthetic_dataset
from .training import (
    TrainConfig,
    load_train_state,
    read_training_log,
    save_train_state,
    train_mtl,
    write_training_log,
)
from .utils import (
    TrainingDivergedError,
    build_config,
    config_hash,
    load_config_file,
    sha256_file,
)


def _add_config_flags(parser: argparse.ArgumentParser, cls) -> None:
    """One string-valued flag per config field; parsed via the config coercer."""
    group = parser.add_argument_group(f"{cls.__name__} overrides")
    for field in dataclasses.fields(cls):
        group.add_argument(
            f"--{field.name.replace('_', '-')}",
            dest=f"cfg_{field.name}",
            default=None,
            metavar="V",
            help=f"override {field.name} (default {field.default!r})",
        )


def _resolve_config(args: argparse.Namespace, cls):
    """defaults < --config file < per-key flags."""
    values: dict[str, str] = {}
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    for field in dataclasses.fields(cls):
        raw = getattr(args, f"cfg_{field.name}", None)
        if raw is not None:
            values[field.name] = raw
    return build_config(cls, values)


def _write_run_record(
    out_dir: Path,
    command: str,
    cfg_hash: str,
    inputs: dict[str, str],
    outputs: list[Path],
    seed: int,
) -> Path:
    record = {
        "command": command,
        "config_hash": cfg_hash,
        "input_hashes": {str(p): h for p, h in sorted(inputs.items())},
        "output_paths": [str(p) for p in outputs],
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "seed": seed,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "run_record.json"
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return path


def _hash_inputs(*paths: str | Path | None) -> dict[str, str]:
    out = {}
    for p in paths:
        if p is not None:
            out[str(p)] = sha256_file(p)
    return out


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError(f"--ratios needs three comma-separated fractions, got {text!r}")
    return tuple(float(p) for p in parts)


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_synth(args: argparse.Namespace) -> int:
    spec = _resolve_config(args, SyntheticSpec)
    out_dir = Path(args.out)
    manifest = generate_synthetic_dataset(spec, out_dir)
    ratios = _parse_ratios(args.ratios)
    train, val, test = split_by_patient(manifest, ratios, spec.seed)
    outputs = [out_dir / "manifest.csv", out_dir / "geometry.json"]
    for part, name in ((train, "train"), (val, "val"), (test, "test")):
        outputs.append(save_manifest(part, out_dir / f"manifest_{name}.csv"))
    classes = {rec.class_label for rec in manifest}
    if len(classes) < 2:
        print(f"warning: single-class dataset ({classes.pop()})", file=sys.stderr)
    _write_run_record(
        out_dir, "synth", config_hash(spec),
        _hash_inputs(getattr(args, "config", None)), outputs, spec.seed,
    )
    print(
        f"synth: {len(manifest)} volumes "
        f"({len(train)} train / {len(val)} val / {len(test)} test) -> {out_dir}"
    )
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, BackboneConfig)
    cfg_hash = config_hash(cfg)
    train_manifest = load_manifest(args.train_manifest, split_tag="train")
    val_manifest = load_manifest(args.val_manifest, split_tag="val") if args.val_manifest else None
    data_root = Path(args.data_root) if args.data_root else Path(args.train_manifest).parent
    out_dir = Path(args.out)
    ckpt_path = out_dir / "backbone.pt"
    cache_path = out_dir / "features.bin"

    params = None
    if ckpt_path.is_file():
        existing = load_backbone(ckpt_path)
        if existing.config_hash == cfg_hash:
            params = existing
            print(f"embed: reusing checkpoint {ckpt_path}")
    if params is None:
        params, history = train_backbone(train_manifest, cfg, data_root, val_manifest)
        save_backbone(params, ckpt_path)
        print(
            f"embed: trained backbone, {len(history)} epochs, "
            f"best val loss {min(h['val_loss'] for h in history):.4f}"
        )
    ckpt_hash = sha256_file(ckpt_path)

    reused_cache = False
    if cache_path.is_file():
        try:
            _, cached_hash = read_feature_cache(cache_path)
            reused_cache = cached_hash == ckpt_hash
        except ValueError:
            reused_cache = False
    if reused_cache:
        print(f"embed: feature cache up to date ({cache_path})")
    else:
        embeddings = embed_volumes(params, train_manifest, data_root)
        write_feature_cache(cache_path, embeddings, ckpt_hash)
        print(f"embed: wrote {len(embeddings)} embeddings -> {cache_path}")

    _write_run_record(
        out_dir, "embed", cfg_hash,
        _hash_inputs(args.train_manifest, args.val_manifest, getattr(args, "config", None)),
        [ckpt_path, ckpt_path.with_name(ckpt_path.name + ".meta"), cache_path],
        cfg.seed,
    )
    return 0


def cmd_label(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest, split_tag="train")
    embeddings, ckpt_hash = read_feature_cache(args.features)
    partition = partition_groups(manifest, embeddings)
    assignments, updated = assign_surrogates(manifest, partition)
    out_dir = Path(args.out)
    log_path = write_assignment_log(out_dir / "assignments.csv", assignments)
    manifest_path = save_manifest(updated, out_dir / "manifest_labeled.csv")
    _write_run_record(
        out_dir, "label", ckpt_hash,
        _hash_inputs(args.manifest, args.features),
        [log_path, manifest_path], args.seed,
    )
    counts = partition.counts()
    print(
        f"label: {len(assignments)} surrogate assignments "
        f"(groups {counts}) -> {manifest_path}"
    )
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args, TrainConfig)
    cfg_hash = config_hash(cfg)
    train_manifest = load_manifest(args.train_manifest, split_tag="train")
    val_manifest = load_manifest(args.val_manifest, split_tag="val")
    data_root = Path(args.data_root) if args.data_root else Path(args.train_manifest).parent
    out_dir = Path(args.out)
    best_path = out_dir / "mtl_best.pt"
    state_path = out_dir / "train_state.pt"
    log_path = out_dir / "train_log.jsonl"

    resume_state = None
    prior_best = -float("inf")
    if args.resume:
        resume_state = load_train_state(state_path)
        if resume_state.get("config_hash") != cfg_hash:
            raise ValueError(
                "resume config does not match the saved training state "
                f"({state_path}); refusing to mix hyperparameters"
            )
        for entry in read_training_log(log_path):
            if entry["val_auc"] is not None:
                prior_best = max(prior_best, entry["val_auc"])

    result = train_mtl(train_manifest, val_manifest, cfg, data_root, resume_state)
    save_train_state(result.last_state, state_path)
    write_training_log(log_path, result.log, append=args.resume)

    new_best = result.best_val_auc if result.best_val_auc is not None else -float("inf")
    if not args.resume or new_best >= prior_best or not best_path.is_file():
        save_mtl(result.params, best_path)
    outputs = [best_path, best_path.with_name(best_path.name + ".meta"), state_path, log_path]
    _write_run_record(
        out_dir, "train", cfg_hash,
        _hash_inputs(args.train_manifest, args.val_manifest, getattr(args, "config", None)),
        outputs, cfg.seed,
    )
    auc_txt = "n/a" if result.best_val_auc is None else f"{result.best_val_auc:.4f}"
    print(
        f"train[{cfg.mode}]: {len(result.log)} epoch(s), "
        f"best val AUC {auc_txt} at epoch {result.best_epoch} -> {best_path}"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.manifest, split_tag="test")
    params = load_mtl(args.checkpoint)
    data_root = Path(args.data_root) if args.data_root else Path(args.manifest).parent
    out_dir = Path(args.out)
    report = evaluate(manifest, params, data_root)
    report_path = report.save(out_dir / "report.json")
    _write_run_record(
        out_dir, "eval", params.config_hash,
        _hash_inputs(args.manifest, args.checkpoint),
        [report_path], params.seed,
    )
    auc_txt = "n/a" if report.image_auc is None else f"{report.image_auc:.4f}"
    print(
        f"eval: image acc {report.image_accuracy:.4f} f1 {report.image_f1:.4f} "
        f"auc {auc_txt} over {report.n_volumes} volumes / {report.n_cases} cases "
        f"-> {report_path}"
    )
    return 0


def cmd_cam(args: argparse.Namespace) -> int:
    params = load_mtl(args.checkpoint)
    manifest = load_manifest(args.manifest)
    rec = manifest.by_id(args.volume_id)
    data_root = Path(args.data_root) if args.data_root else Path(args.manifest).parent
    voxels = read_voxels(data_root / rec.data_path)
    n = voxels.shape[0]
    center = args.triplet_index if args.triplet_index is not None else n // 2
    if not 1 <= center <= n - 2:
        raise ValueError(f"triplet index {center} out of range [1, {n - 2}]")
    triplet = voxels[center - 1 : center + 2]
    heatmap = compute_cam(
        params, triplet, class_label=args.class_label,
        volume_id=rec.volume_id, center_index=center,
    )
    out_dir = Path(args.out)
    gray = save_cam_png(heatmap, out_dir / f"cam_{rec.volume_id}_c{center}.png")
    overlay = save_cam_overlay(
        heatmap, voxels[center], out_dir / f"overlay_{rec.volume_id}_c{center}.png"
    )
    _write_run_record(
        out_dir, "cam", params.config_hash,
        _hash_inputs(args.manifest, args.checkpoint),
        [gray, overlay], params.seed,
    )
    print(f"cam: {rec.volume_id} slice {center} -> {gray}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octscreen",
        description="Glaucoma screening pipeline on OCT volumes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with splits")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--config", default=None, help="flat key=value config file")
    p.add_argument("--ratios", default="0.6,0.2,0.2", help="train,val,test volume fractions")
    _add_config_flags(p, SyntheticSpec)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("embed", help="train the slice backbone and cache volume embeddings")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", default=None)
    p.add_argument("--data-root", default=None, help="default: train manifest directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    _add_config_flags(p, BackboneConfig)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("label", help="assign surrogate VF labels from nearest neighbours")
    p.add_argument("--manifest", required=True, help="training-split manifest")
    p.add_argument("--features", required=True, help="feature cache from embed")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="recorded in the run record")
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("train", help="train the multi-task classifier/regressor")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--resume", action="store_true", help="continue from train_state.pt in --out")
    _add_config_flags(p, TrainConfig)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cam", help="class activation map for one volume")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--volume-id", required=True)
    p.add_argument("--data-root", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--triplet-index", type=int, default=None, help="center slice (default middle)")
    p.add_argument("--class-label", default="glaucoma", choices=("glaucoma", "normal"))
    p.set_defaults(func=cmd_cam)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ManifestError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDivergedError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # pragma: no cover - catch-all for unexpected failures
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
