"""Figures and tables for a completed run directory."""

import hashlib
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from config import RESOLVED_CONFIG, RunConfig
from enhancement import enhance_volume, write_comparison
from errors import ReportError
from metrics import metrics_table
from training import TRAIN_SEG_LOG, read_log
from volume_io import compute_bbox, load_dataset, slice_occupancy

# =========================
# CONFIG
# =========================

REPORT_DIR = "report"
SWEEP_FILE = "sweep.json"
EVAL_SUMMARY_FILE = "eval_summary.json"
INPUTS_FILE = "inputs.json"
MANIFEST_FILE = "report_manifest.json"

SWEEP_COLUMNS = ["threshold", "accuracy", "sensitivity", "TP", "FN", "FP"]
LOSS_TERMS = ["L_ce", "L_dice", "L_sparsity", "L_size", "L_adv"]

TABLE_FILES = ("sweep_table.csv", "metrics_table.csv")


def _data_dir(run_dir):
    path = run_dir / INPUTS_FILE
    if not path.exists():
        return None
    with open(path) as f:
        data = json.load(f).get("data")
    return Path(data) if data else None


def missing_artifacts(run_dir):
    """Every required input that is absent, in a stable order."""
    run_dir = Path(run_dir)
    missing = [name for name in (RESOLVED_CONFIG, TRAIN_SEG_LOG, SWEEP_FILE, EVAL_SUMMARY_FILE)
               if not (run_dir / name).exists()]
    data_dir = _data_dir(run_dir)
    if data_dir is None:
        missing.append(f"{INPUTS_FILE} (data directory)")
    elif not data_dir.is_dir() or not any(data_dir.glob("*.vol")):
        missing.append(f"volumes in {data_dir}")
    return missing


def _savefig(fig, path, deterministic):
    metadata = {"Software": None} if deterministic else None
    fig.savefig(path, dpi=100, metadata=metadata)
    plt.close(fig)


def phase2_start(epochs, header):
    for record in epochs:
        if record.get("phase") == 2:
            return record["epoch"]
    return header.get("phase1_last_epoch", 10) + 1


def plot_loss_curves(epochs, header, path, deterministic=False):
    frame = pd.DataFrame([r.get("losses", {}) for r in epochs],
                         index=[r["epoch"] for r in epochs])
    boundary = phase2_start(epochs, header)

    fig, ax = plt.subplots(figsize=(8, 5))
    for term in LOSS_TERMS:
        if term in frame.columns:
            ax.plot(frame.index, frame[term], marker="o", label=term)
    ax.axvline(boundary, color="gray", linestyle="--", label=f"phase 2 (epoch {boundary})")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss")
    ax.set_title("Training losses")
    ax.grid(True)
    ax.legend()
    _savefig(fig, path, deterministic)
    return boundary


def plot_val_dice(epochs, path, deterministic=False):
    xs = [r["epoch"] for r in epochs if r.get("val_dice") is not None]
    ys = [r["val_dice"] for r in epochs if r.get("val_dice") is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(xs, ys, marker="o", color="tab:green")
    ax.set_ylim(0, 1)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Whole-tumor Dice")
    ax.set_title("Validation Dice")
    ax.grid(True)
    _savefig(fig, path, deterministic)


def plot_dataset_stats(volumes, path, deterministic=False):
    heatmap, blank = slice_occupancy(volumes)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(11, 4.5))
    image = ax1.imshow(heatmap, cmap="magma")
    fig.colorbar(image, ax=ax1, label="nonzero slices")
    if heatmap.any():
        r0, r1, c0, c1 = _heatmap_bbox(heatmap)
        ax1.add_patch(plt.Rectangle((c0 - 0.5, r0 - 0.5), c1 - c0 + 1, r1 - r0 + 1,
                                    fill=False, edgecolor="cyan", linewidth=1.5))
    ax1.set_title("Brain occupancy and bounding box")
    ax2.bar(np.arange(len(blank)), blank, color="tab:blue")
    ax2.set_xlabel("Slice index")
    ax2.set_ylabel("Blank label slices")
    ax2.set_title("Slices without labels")
    fig.tight_layout()
    _savefig(fig, path, deterministic)


def _heatmap_bbox(heatmap):
    rows = np.flatnonzero(heatmap.any(axis=1))
    cols = np.flatnonzero(heatmap.any(axis=0))
    return rows[0], rows[-1], cols[0], cols[-1]


def sweep_frame(sweep):
    return pd.DataFrame(sweep["rows"])[SWEEP_COLUMNS]


def summary_frame(summary):
    return pd.DataFrame.from_dict(summary, orient="index")


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def report(run_dir, deterministic=False):
    """Render every figure and table of a run into `<run_dir>/report`."""
    run_dir = Path(run_dir)
    missing = missing_artifacts(run_dir)
    if missing:
        raise ReportError(f"incomplete run {run_dir}: missing {', '.join(missing)}")

    config = RunConfig.load(run_dir / RESOLVED_CONFIG)
    out_dir = run_dir / REPORT_DIR
    out_dir.mkdir(parents=True, exist_ok=True)

    log_path = run_dir / TRAIN_SEG_LOG
    headers = read_log(log_path, "header")
    epochs = read_log(log_path, "epoch")
    if not epochs:
        raise ReportError(f"{log_path} has no epoch records")
    header = headers[0] if headers else {}

    boundary = plot_loss_curves(epochs, header, out_dir / "loss_curves.png", deterministic)
    plot_val_dice(epochs, out_dir / "val_dice.png", deterministic)

    with open(run_dir / SWEEP_FILE) as f:
        sweep = json.load(f)
    sweep_frame(sweep).to_csv(out_dir / "sweep_table.csv", index=False)

    with open(run_dir / EVAL_SUMMARY_FILE) as f:
        summary = json.load(f)
    metrics_table(summary_frame(summary)).to_csv(out_dir / "metrics_table.csv", index=False)

    volumes = load_dataset(_data_dir(run_dir))
    first = volumes[0]
    enhanced = enhance_volume(first, config.enhance)
    write_comparison(first, enhanced, out_dir / "enhancement_grid.png")
    plot_dataset_stats(volumes, out_dir / "dataset_stats.png", deterministic)

    files = sorted(p.name for p in out_dir.iterdir() if p.name != MANIFEST_FILE)
    manifest = {
        "files": files,
        "phase2_start": boundary,
        "epochs": len(epochs),
        "sweep_orientation": sweep.get("orientation"),
        "table_digests": {name: _digest(out_dir / name) for name in TABLE_FILES},
        "brain_bbox": list(compute_bbox(first)),
    }
    with open(out_dir / MANIFEST_FILE, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    print(f"📊 report written to {out_dir} ({len(files)} files)")
    return manifest
