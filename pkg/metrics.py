"""Overlap, lesion-wise and surface-distance metrics for label volumes.

Regions follow the BraTS composition: WT = {1, 2, 4}, TC = {1, 4}, ET = {4}.
Lesions are connected components under full connectivity (26 in 3D, 8 in 2D).
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial import cKDTree

from errors import ShapeError

# =========================
# CONFIG
# =========================

REGIONS = {"WT": (1, 2, 4), "TC": (1, 4), "ET": (4,)}

# column order of the aggregate table
REGION_ORDER = ("WT", "ET", "TC")

DEFAULT_PERCENTILE = 95


@dataclass
class LesionSet:
    labels: np.ndarray
    count: int

    @property
    def shape(self):
        return self.labels.shape

    @property
    def components(self):
        """Flat voxel indices of each component, ids 1..count in order."""
        flat = self.labels.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(1, self.count + 2))
        return [order[bounds[i]:bounds[i + 1]] for i in range(self.count)]

    def mask(self, component_id):
        return self.labels == component_id

    def sizes(self):
        return np.bincount(self.labels.ravel(), minlength=self.count + 1)[1:]


@dataclass
class LesionReport:
    region: str
    dice: float
    jaccard: float
    sens: float
    spec: float
    hd95: float
    haus: float
    lw_dice: float
    lw_sens: float
    n_pred_lesions: int
    n_truth_lesions: int
    lesion_fp: int
    lesion_fn: int
    pairs: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def _structure(ndim, connectivity=None):
    return ndimage.generate_binary_structure(ndim, connectivity or ndim)


# =========================
# COMPONENTS
# =========================


def label_components(mask, connectivity=None):
    """Connected components; `connectivity` is the scipy rank (default: full)."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_structure(mask.ndim, connectivity))
    return LesionSet(labels=labels, count=int(count))


def overlap_matrix(pred, truth):
    """Voxel overlaps [truth.count + 1, pred.count + 1]; row/column 0 is background."""
    if pred.shape != truth.shape:
        raise ShapeError(f"lesion sets differ in shape: {pred.shape} vs {truth.shape}")
    pairs = truth.labels.ravel().astype(np.int64) * (pred.count + 1) + pred.labels.ravel()
    counts = np.bincount(pairs, minlength=(truth.count + 1) * (pred.count + 1))
    return counts.reshape(truth.count + 1, pred.count + 1)


def match_lesions(pred, truth):
    """Greedy maximum-overlap pairing -> [(truth_id, pred_id, overlap), ...].

    Candidate pairs are taken by decreasing overlap, ties by smaller truth id
    then smaller prediction id; each component is used at most once.
    """
    overlaps = overlap_matrix(pred, truth)[1:, 1:]
    t_idx, p_idx = np.nonzero(overlaps)
    candidates = sorted(zip(-overlaps[t_idx, p_idx], t_idx + 1, p_idx + 1))

    used_truth, used_pred, pairs = set(), set(), []
    for negative_overlap, t, p in candidates:
        if t in used_truth or p in used_pred:
            continue
        used_truth.add(t)
        used_pred.add(p)
        pairs.append((int(t), int(p), int(-negative_overlap)))
    return sorted(pairs)


# =========================
# OVERLAP SCORES
# =========================


def dice(pred, truth):
    """Global Dice; two empty masks agree perfectly (1.0)."""
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    total = pred.sum() + truth.sum()
    if total == 0:
        return 1.0
    return 2.0 * np.logical_and(pred, truth).sum() / total


lesion_dice = dice


def jaccard(pred, truth):
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    union = np.logical_or(pred, truth).sum()
    if union == 0:
        return 1.0
    return np.logical_and(pred, truth).sum() / union


def lesion_sens_spec(pred, truth):
    """(sensitivity, specificity); either is None when its denominator is empty."""
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    positives = truth.sum()
    negatives = truth.size - positives
    sens = float(np.logical_and(pred, truth).sum() / positives) if positives else None
    spec = float(np.logical_and(~pred, ~truth).sum() / negatives) if negatives else None
    return sens, spec


# =========================
# SURFACE DISTANCES
# =========================


def surface_voxels(mask):
    """Foreground voxels with a face neighbor outside the mask (or outside the array)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    eroded = ndimage.binary_erosion(mask, structure=_structure(mask.ndim, 1), border_value=0)
    return mask & ~eroded


def _diagonal(shape, spacing):
    return float(np.linalg.norm(np.asarray(shape, np.float64) * np.asarray(spacing, np.float64)))


def hausdorff(pred, truth, percentile=DEFAULT_PERCENTILE, spacing=None):
    """Symmetric surface distance between two masks.

    percentile=100 is the classic Hausdorff distance; lower percentiles are
    taken over both directed distance sets pooled together. Two empty masks
    score 0; exactly one empty mask scores the image diagonal.
    """
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    if pred.shape != truth.shape:
        raise ShapeError(f"masks differ in shape: {pred.shape} vs {truth.shape}")
    spacing = np.ones(pred.ndim) if spacing is None else np.asarray(spacing, dtype=np.float64)

    pred_points = np.argwhere(surface_voxels(pred)) * spacing
    truth_points = np.argwhere(surface_voxels(truth)) * spacing
    if len(pred_points) == 0 and len(truth_points) == 0:
        return 0.0
    if len(pred_points) == 0 or len(truth_points) == 0:
        return _diagonal(pred.shape, spacing)

    to_truth, _ = cKDTree(truth_points).query(pred_points)
    to_pred, _ = cKDTree(pred_points).query(truth_points)
    pooled = np.concatenate([to_truth, to_pred])
    if percentile >= 100:
        return float(pooled.max())
    return float(np.percentile(pooled, percentile))


# =========================
# EVALUATION
# =========================


def region_mask(labels, region):
    return np.isin(labels, REGIONS[region])


def _lesion_scores(pred, truth, spacing, connectivity):
    pred_set = label_components(pred, connectivity)
    truth_set = label_components(truth, connectivity)
    matched = match_lesions(pred_set, truth_set)
    sizes_truth = truth_set.sizes()
    sizes_pred = pred_set.sizes()

    pairs = []
    for t, p, overlap in matched:
        pairs.append({
            "truth_id": t,
            "pred_id": p,
            "dice": 2.0 * overlap / (sizes_truth[t - 1] + sizes_pred[p - 1]),
            "sens": overlap / sizes_truth[t - 1],
            "hd95": hausdorff(pred_set.mask(p), truth_set.mask(t), DEFAULT_PERCENTILE, spacing),
        })

    lesion_fp = pred_set.count - len(pairs)
    lesion_fn = truth_set.count - len(pairs)
    scored = len(pairs) + lesion_fp + lesion_fn
    lw_dice = sum(pair["dice"] for pair in pairs) / scored if scored else 1.0
    lw_sens = sum(pair["sens"] for pair in pairs) / truth_set.count if truth_set.count else None
    return pred_set.count, truth_set.count, lesion_fp, lesion_fn, lw_dice, lw_sens, pairs


def evaluate_region(pred, truth, region="WT", spacing=None, connectivity=None):
    pred, truth = np.asarray(pred, bool), np.asarray(truth, bool)
    sens, spec = lesion_sens_spec(pred, truth)
    n_pred, n_truth, fp, fn, lw_dice, lw_sens, pairs = _lesion_scores(pred, truth, spacing, connectivity)
    return LesionReport(
        region=region,
        dice=float(dice(pred, truth)),
        jaccard=float(jaccard(pred, truth)),
        sens=sens,
        spec=spec,
        hd95=hausdorff(pred, truth, DEFAULT_PERCENTILE, spacing),
        haus=hausdorff(pred, truth, 100, spacing),
        lw_dice=float(lw_dice),
        lw_sens=lw_sens,
        n_pred_lesions=n_pred,
        n_truth_lesions=n_truth,
        lesion_fp=fp,
        lesion_fn=fn,
        pairs=pairs,
    )


def evaluate(pred_labels, truth_labels, regions=REGIONS, spacing=None, connectivity=None):
    """LesionReport per region for two BraTS label volumes of the same shape."""
    pred_labels, truth_labels = np.asarray(pred_labels), np.asarray(truth_labels)
    if pred_labels.shape != truth_labels.shape:
        raise ShapeError(f"label volumes differ: {pred_labels.shape} vs {truth_labels.shape}")
    return {
        name: evaluate_region(
            np.isin(pred_labels, values), np.isin(truth_labels, values), name, spacing, connectivity)
        for name, values in regions.items()
    }


def subject_frame(reports):
    """One row per (subject, region) from {subject_id: {region: LesionReport}}."""
    rows = []
    for subject_id, by_region in reports.items():
        for region, report in by_region.items():
            row = {k: v for k, v in report.to_dict().items() if k != "pairs"}
            rows.append({"subject": subject_id, **row})
    return pd.DataFrame(rows)


def summarize_subjects(reports):
    """Mean of every score over subjects, per region (missing values skipped)."""
    frame = subject_frame(reports)
    if frame.empty:
        return frame
    numeric = frame.drop(columns=["subject"]).apply(pd.to_numeric, errors="coerce")
    numeric["region"] = frame["region"]
    return numeric.groupby("region").mean()


def metrics_table(summary):
    """Single-row aggregate table: Dice [%], HD95 [mm], LW Dice [%] x WT/ET/TC."""
    row = {}
    for column, key, scale in (("Dice [%]", "dice", 100.0),
                               ("HD95 [mm]", "hd95", 1.0),
                               ("LW Dice [%]", "lw_dice", 100.0)):
        for region in REGION_ORDER:
            value = summary.loc[region, key] if region in summary.index else np.nan
            row[f"{column} {region}"] = float(value) * scale
    return pd.DataFrame([row])


def write_subject_reports(reports, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for subject_id, by_region in reports.items():
        path = out_dir / f"{subject_id}.json"
        with open(path, "w") as f:
            json.dump({region: r.to_dict() for region, r in by_region.items()}, f, indent=2,
                      default=float)
        paths.append(path)
    return paths
