import argparse
import dataclasses
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import nets
import training
from config import RESOLVED_CONFIG, RunConfig, resolve_run_dir
from enhancement import enhance_volume, write_comparison
from errors import ConfigError, DataError, PipelineError
from metrics import evaluate, metrics_table, subject_frame, summarize_subjects, write_subject_reports
from report import EVAL_SUMMARY_FILE, INPUTS_FILE, SWEEP_FILE, report
from volume_io import (
    RAW_SUFFIX,
    Volume,
    build_slice_dataset,
    load_dataset,
    load_volume,
    save_dataset,
    split_subjects,
    synth_dataset,
)

# =========================
# CONFIG
# =========================

LOCK_FILE = ".lock"
TUMOR_PREFIX = "tumor_"
NORMAL_PREFIX = "normal_"
DEFAULT_N_NORMAL = 100


@contextmanager
def run_lock(run_dir):
    """Exclusive ownership of a run directory for one process."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / LOCK_FILE
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise DataError(f"{run_dir} is locked by another process ({path})") from e
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        path.unlink(missing_ok=True)


def _update_inputs(run_dir, **fields):
    path = Path(run_dir) / INPUTS_FILE
    inputs = {}
    if path.exists():
        with open(path) as f:
            inputs = json.load(f)
    inputs.update(fields)
    with open(path, "w") as f:
        json.dump(inputs, f, indent=2, sort_keys=True)


def _prepare(volumes, config):
    if config.enhance_inputs:
        return [enhance_volume(v, config.enhance) for v in volumes]
    return volumes


def _load_group(data_dir, prefix, what):
    volumes = load_dataset(data_dir, prefix)
    if not volumes:
        raise DataError(f"{data_dir}: no {what} subjects ({prefix}*{RAW_SUFFIX})")
    return volumes


def _tumor_splits(volumes, config):
    """(train, val, test) subject id lists; the same for every subcommand."""
    ids = [v.subject_id for v in volumes]
    rest, test = split_subjects(ids, config.test_fraction, config.seed)
    train, val = split_subjects(rest, config.train_seg.validation_fraction, config.seed + 1)
    return train, val, test


def _select(volumes, ids):
    wanted = set(ids)
    return [v for v in volumes if v.subject_id in wanted]


# =========================
# SUBCOMMANDS
# =========================


def cmd_synth(args, config):
    spec = config.phantom
    overrides = {k: v for k, v in {
        "seed": args.seed,
        "n_subjects": args.n_subjects,
        "image_size": args.image_size,
        "n_slices": args.n_slices,
    }.items() if v is not None}
    spec = dataclasses.replace(spec, **overrides).validate()
    config = dataclasses.replace(config, phantom=spec)

    print(f"🚀 synthesizing {spec.n_subjects} tumor + {args.n_normal} normal phantoms (seed {spec.seed})")
    volumes = synth_dataset(spec)
    if args.n_normal:
        volumes += synth_dataset(dataclasses.replace(spec, n_subjects=args.n_normal), with_tumors=False)

    out = Path(args.out)
    manifest = save_dataset(volumes, out, extra={"n_tumor": spec.n_subjects, "n_normal": args.n_normal})
    config.save(out / RESOLVED_CONFIG)
    print(f"📦 {len(volumes)} volumes written to {out}")
    print(f"✅ dataset digest: {manifest['digest']}")
    return 0


def cmd_enhance(args, config):
    params = config.enhance
    if args.lambda_enh is not None:
        params = dataclasses.replace(params, lambda_enh=args.lambda_enh)
    if args.policy is not None:
        params = dataclasses.replace(params, policy=args.policy)
    params.validate()
    config = dataclasses.replace(config, enhance=params)

    volumes = load_dataset(args.input)
    if not volumes:
        raise DataError(f"{args.input}: no volumes to enhance")
    enhanced = [enhance_volume(v, params) for v in volumes]
    out = Path(args.out)
    manifest = save_dataset(enhanced, out, extra={"enhanced_from": str(args.input)})
    config.save(out / RESOLVED_CONFIG)
    write_comparison(volumes[0], enhanced[0], out / "enhancement_grid.png")
    print(f"✅ enhanced {len(enhanced)} volumes -> {out} (digest {manifest['digest'][:12]})")
    return 0


def cmd_pretrain_gan(args, config):
    if args.epochs is not None:
        config = dataclasses.replace(
            config, pretrain_optimizer=dataclasses.replace(config.pretrain_optimizer, epochs=args.epochs))
    config.validate()
    run_dir = resolve_run_dir(args.run_dir)

    with run_lock(run_dir):
        training.configure_determinism(config.seed, config.deterministic)
        normals = _prepare(_load_group(args.data, NORMAL_PREFIX, "normal"), config)
        ids = [v.subject_id for v in normals]
        train_ids, val_ids = split_subjects(ids, config.pretrain.validation_fraction, config.seed)

        train_images, _, _ = build_slice_dataset(_select(normals, train_ids), config.slice_size, filter_blank=False)
        val_images, _, _ = build_slice_dataset(_select(normals, val_ids), config.slice_size, filter_blank=False)
        config.save(run_dir / RESOLVED_CONFIG)
        _update_inputs(run_dir, data=str(Path(args.data).resolve()),
                       pretrain_split={"train": train_ids, "val": val_ids})

        print(f"🚀 pretrain-gan: {len(train_images)} train / {len(val_images)} val slices")
        result = training.pretrain_gan(
            train_images, config.pretrain, config.pretrain_optimizer, config.generator,
            config.discriminator, run_dir=run_dir, val_images=val_images,
            seed=config.seed, dtype=config.dtype)
        print(f"✅ pretrain-gan done: {result.gen_steps} generator / {result.disc_steps} discriminator updates")
    return 0


def _load_frozen(run_dir):
    generator, _ = nets.load_checkpoint(run_dir / training.GENERATOR_CHECKPOINT, "generator")
    discriminator, _ = nets.load_checkpoint(run_dir / training.DISCRIMINATOR_CHECKPOINT, "discriminator")
    return generator, discriminator


def cmd_train_seg(args, config):
    if args.epochs is not None:
        config = dataclasses.replace(
            config, optimizer=dataclasses.replace(config.optimizer, epochs=args.epochs))
    config.validate()
    run_dir = resolve_run_dir(args.run_dir)

    with run_lock(run_dir):
        training.configure_determinism(config.seed, config.deterministic)
        generator, discriminator = _load_frozen(run_dir)
        tumors = _prepare(_load_group(args.data, TUMOR_PREFIX, "tumor"), config)
        train_ids, val_ids, test_ids = _tumor_splits(tumors, config)

        images, classes, _ = build_slice_dataset(_select(tumors, train_ids), config.slice_size)
        val_images, val_classes, _ = build_slice_dataset(_select(tumors, val_ids), config.slice_size)
        config.save(run_dir / RESOLVED_CONFIG)
        _update_inputs(run_dir, data=str(Path(args.data).resolve()),
                       seg_split={"train": train_ids, "val": val_ids, "test": test_ids})

        print(f"🚀 train-seg: {len(images)} train / {len(val_images)} val slices, "
              f"phase 2 from epoch {config.loss.phase1_last_epoch + 1}")
        result = training.train_seg(
            images, classes, generator, discriminator, config.loss, config.optimizer, config.unet,
            seg_cfg=config.train_seg, val_images=val_images, val_classes=val_classes,
            run_dir=run_dir, seed=config.seed, dtype=config.dtype,
            dump_edges=run_dir / "edges" if args.dump_edges else None)
        final = result.history[-1]["val_dice"] if result.history else None
        print(f"✅ train-seg done, final val_dice={final}")
    return 0


def cmd_sweep(args, config):
    sweep_cfg = config.sweep
    if args.gated:
        sweep_cfg = dataclasses.replace(sweep_cfg, gated=True)
    if args.orientation is not None:
        sweep_cfg = dataclasses.replace(sweep_cfg, orientation=args.orientation)
    sweep_cfg.validate()
    config = dataclasses.replace(config, sweep=sweep_cfg)
    run_dir = resolve_run_dir(args.run_dir)

    with run_lock(run_dir):
        _, discriminator = _load_frozen(run_dir)
        segmenter = None
        if sweep_cfg.gated:
            segmenter, _ = nets.load_checkpoint(run_dir / training.SEGMENTER_CHECKPOINT, "segmenter")

        tumors = _prepare(_load_group(args.data, TUMOR_PREFIX, "tumor"), config)
        normals = _prepare(_load_group(args.data, NORMAL_PREFIX, "normal"), config)
        _, _, test_ids = _tumor_splits(tumors, config)
        _, held_normals = split_subjects([v.subject_id for v in normals],
                                         config.pretrain.validation_fraction, config.seed)
        chosen = _select(tumors, test_ids or [v.subject_id for v in tumors]) + \
            _select(normals, held_normals or [v.subject_id for v in normals])

        images, classes, owners = build_slice_dataset(chosen, config.slice_size, filter_blank=False)
        is_tumor = classes.reshape(len(classes), -1).any(axis=1)
        rows, scores = training.threshold_sweep(discriminator, images, is_tumor, sweep_cfg, segmenter)

        direction = "nondecreasing" if sweep_cfg.orientation == "normality" else "nonincreasing"
        print(f"🔎 sweep orientation={sweep_cfg.orientation} (sensitivity {direction} in threshold), "
              f"gated={sweep_cfg.gated}")
        for row in rows:
            print(f"   t={row['threshold']:.2f} acc={row['accuracy']:.4f} sens={row['sensitivity']} "
                  f"TP={row['TP']} FN={row['FN']} FP={row['FP']}")

        with open(run_dir / SWEEP_FILE, "w") as f:
            json.dump({
                "orientation": sweep_cfg.orientation,
                "gated": sweep_cfg.gated,
                "thresholds": list(sweep_cfg.thresholds),
                "rows": rows,
                "scores": [float(s) for s in scores],
                "is_tumor": [bool(t) for t in is_tumor],
                "owners": owners,
            }, f, indent=2)
        print(f"✅ sweep table written to {run_dir / SWEEP_FILE}")
    return 0


def _load_labels(path):
    path = Path(path)
    volumes = load_dataset(path) if path.is_dir() else [load_volume(path)]
    return {v.subject_id: v for v in volumes}


def _write_eval(reports, out_dir):
    out_dir = Path(out_dir)
    write_subject_reports(reports, out_dir / "subjects")
    subject_frame(reports).to_csv(out_dir / "metrics_subjects.csv", index=False)
    summary = summarize_subjects(reports)
    with open(out_dir / EVAL_SUMMARY_FILE, "w") as f:
        json.dump(summary.to_dict(orient="index"), f, indent=2, sort_keys=True)
    table = metrics_table(summary)
    table.to_csv(out_dir / "metrics_table.csv", index=False)
    return table


def cmd_eval(args, config):
    if args.run_dir:
        if not args.data:
            raise ConfigError("eval --run-dir needs --data")
        run_dir = resolve_run_dir(args.run_dir)
        with run_lock(run_dir):
            segmenter, _ = nets.load_checkpoint(run_dir / training.SEGMENTER_CHECKPOINT, "segmenter")
            tumors = _load_group(args.data, TUMOR_PREFIX, "tumor")
            _, _, test_ids = _tumor_splits(tumors, config)
            subjects = _select(tumors, test_ids) or tumors
            inputs = _prepare(subjects, config)

            predictions, reports = [], {}
            for volume, source in zip(inputs, subjects):
                labels = training.predict_volume(segmenter, volume, config.slice_size)
                predictions.append(Volume(source.modalities, labels, source.voxel_spacing, source.subject_id))
                reports[source.subject_id] = evaluate(labels, source.labels, spacing=source.voxel_spacing)
            save_dataset(predictions, run_dir / "predictions")
            table = _write_eval(reports, run_dir)
    else:
        if not (args.pred and args.truth and args.out):
            raise ConfigError("eval needs --pred --truth --out, or --run-dir --data")
        pred, truth = _load_labels(args.pred), _load_labels(args.truth)
        missing = sorted(set(truth) - set(pred))
        if missing:
            raise DataError(f"no prediction for subject(s): {', '.join(missing)}")
        reports = {sid: evaluate(pred[sid].labels, truth[sid].labels, spacing=truth[sid].voxel_spacing)
                   for sid in sorted(truth)}
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        table = _write_eval(reports, out)
        config.save(out / RESOLVED_CONFIG)

    print(f"✅ evaluated {len(reports)} subject(s)")
    print(table.to_string(index=False))
    return 0


def cmd_report(args, config):
    run_dir = resolve_run_dir(args.run_dir)
    with run_lock(run_dir):
        report(run_dir, deterministic=args.deterministic)
    return 0


# =========================
# ARGUMENTS
# =========================


def _global_options(suppress):
    """--config / --print-config / --seed, valid before or after the subcommand."""
    parser = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="Run configuration JSON")
    parser.add_argument("--print-config", action="store_true",
                        default=argparse.SUPPRESS if suppress else False,
                        help="Print the resolved configuration and exit")
    parser.add_argument("--seed", type=int, default=default, help="Master seed")
    return parser


def build_parser():
    parser = argparse.ArgumentParser(
        description="GAN-refined brain tumor segmentation pipeline.",
        parents=[_global_options(suppress=False)],
    )
    common = _global_options(suppress=True)
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", parents=[common], help="Generate a phantom dataset")
    p.add_argument("--out", required=True, help="Output dataset directory")
    p.add_argument("--n-subjects", type=int, help="Number of tumor phantoms")
    p.add_argument("--n-normal", type=int, default=DEFAULT_N_NORMAL, help="Number of tumor-free phantoms")
    p.add_argument("--image-size", type=int, help="In-plane size in pixels")
    p.add_argument("--n-slices", type=int, help="Slices per volume")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("enhance", parents=[common], help="Contrast-enhance a dataset")
    p.add_argument("--input", required=True, help="Input dataset directory")
    p.add_argument("--out", required=True, help="Output dataset directory")
    p.add_argument("--lambda", dest="lambda_enh", type=float, help="Enhancement lambda")
    p.add_argument("--policy", choices=["skip", "fail"], help="Degenerate-slice policy")
    p.set_defaults(handler=cmd_enhance)

    p = sub.add_parser("pretrain-gan", parents=[common], help="Pretrain the inpainting GAN")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(handler=cmd_pretrain_gan)

    p = sub.add_parser("train-seg", parents=[common], help="Train the segmenter")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dump-edges", action="store_true", help="Write edge-attention PNGs")
    p.set_defaults(handler=cmd_train_seg)

    p = sub.add_parser("sweep", parents=[common], help="Discriminator threshold sweep")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--gated", action="store_true", help="Gate scores with the segmenter's edge map")
    p.add_argument("--orientation", choices=list(training.ORIENTATIONS))
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="Evaluate label volumes")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--out")
    p.add_argument("--run-dir")
    p.add_argument("--data")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="Render figures and tables for a run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--deterministic", action="store_true", help="Strip plot metadata")
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        config = RunConfig.load(args.config)
        if args.seed is not None:
            config = dataclasses.replace(config, seed=args.seed)
        if args.print_config:
            print(config.dumps())
            return 0
        if not args.command:
            parser.print_usage()
            print("❌ a subcommand is required")
            return ConfigError.exit_code
        return args.handler(args, config)
    except PipelineError as e:
        print(f"❌ {e}")
        return e.exit_code
    except OSError as e:
        print(f"❌ {e}")
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
