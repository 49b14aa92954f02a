"""Volume synthesis, ingestion and slice-level preprocessing.

A Volume holds four co-registered modalities [T1, T1ce, T2, FLAIR] of shape
[4, S, H, W] plus an aligned label volume [S, H, W] in the BraTS encoding
{0: background, 1: NCR/NET, 2: ED, 4: ET}.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import nibabel as nib
import numpy as np

from errors import ConfigError, EmptyBrainError, IngestionError, ShapeError, VolumeError

# =========================
# CONFIG
# =========================

MODALITIES = ("T1", "T1ce", "T2", "FLAIR")
LABEL_VALUES = (0, 1, 2, 4)

RAW_MAGIC = b"GSVOL\x00\x01\n"
RAW_FORMAT_VERSION = 1
RAW_SUFFIX = ".vol"
MANIFEST_FILE = "manifest.json"

SUBJECT_FILE_SUFFIXES = {
    "T1": "_t1",
    "T1ce": "_t1ce",
    "T2": "_t2",
    "FLAIR": "_flair",
}
LABEL_FILE_SUFFIX = "_seg"

# Phantom intensities, arbitrary scanner units
BASE_INTENSITY = {"T1": 600.0, "T1ce": 650.0, "T2": 450.0, "FLAIR": 500.0}

# Per-label offsets in modality order [T1, T1ce, T2, FLAIR]
LESION_OFFSETS = {
    2: (-80.0, 50.0, 300.0, 400.0),
    1: (-250.0, -150.0, 350.0, 100.0),
    4: (-100.0, 450.0, 150.0, 200.0),
}

# Concentric lesion layout: (label, radius fraction), drawn outside-in
LESION_RINGS = ((2, 1.0), (1, 0.6), (4, 0.35))

TEXTURE_STRENGTH = 0.15


# =========================
# TYPES
# =========================


@dataclass
class Volume:
    modalities: np.ndarray
    labels: np.ndarray
    voxel_spacing: tuple = (1.0, 1.0, 1.0)
    subject_id: str = "subject"

    def __post_init__(self):
        self.modalities = np.asarray(self.modalities, dtype=np.float32)
        labels = np.asarray(self.labels)

        if self.modalities.ndim != 4 or self.modalities.shape[0] != len(MODALITIES):
            raise VolumeError(
                f"{self.subject_id}: modalities must be [4, S, H, W], got {self.modalities.shape}")
        if labels.shape != self.modalities.shape[1:]:
            raise VolumeError(
                f"{self.subject_id}: labels {labels.shape} do not match modalities {self.modalities.shape[1:]}")
        if not np.all(np.isfinite(self.modalities)):
            raise VolumeError(f"{self.subject_id}: non-finite intensities")

        unexpected = np.setdiff1d(np.unique(labels), LABEL_VALUES)
        if unexpected.size:
            raise VolumeError(
                f"{self.subject_id}: unexpected label values {unexpected.tolist()}")
        self.labels = labels.astype(np.uint8)

        spacing = tuple(float(s) for s in self.voxel_spacing)
        if len(spacing) != 3 or min(spacing) <= 0:
            raise VolumeError(f"{self.subject_id}: bad voxel spacing {self.voxel_spacing}")
        self.voxel_spacing = spacing

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class SlicePlan:
    subject_id: str
    kept_slices: list = field(default_factory=list)
    bbox: tuple = None

    def __post_init__(self):
        self.kept_slices = [int(i) for i in self.kept_slices]
        if any(b <= a for a, b in zip(self.kept_slices, self.kept_slices[1:])):
            raise VolumeError(f"{self.subject_id}: kept_slices must be strictly increasing")
        if self.bbox is not None:
            self.bbox = tuple(int(v) for v in self.bbox)


@dataclass
class PhantomSpec:
    image_size: int = 64
    n_subjects: int = 8
    n_slices: int = 12
    tumor_count_range: tuple = (1, 2)
    tumor_radius_range: tuple = (5, 10)
    noise_sigma: float = 0.05
    seed: int = 0

    def validate(self):
        lo_count, hi_count = self.tumor_count_range
        lo_radius, hi_radius = self.tumor_radius_range
        if self.image_size < 16:
            raise ConfigError("image_size must be at least 16")
        if self.n_subjects < 1 or self.n_slices < 1:
            raise ConfigError("n_subjects and n_slices must be positive")
        if not 1 <= lo_count <= hi_count:
            raise ConfigError(f"invalid tumor_count_range {self.tumor_count_range}")
        if not 1 <= lo_radius <= hi_radius:
            raise ConfigError(f"invalid tumor_radius_range {self.tumor_radius_range}")
        if hi_radius >= self.image_size / 2:
            raise ConfigError("tumor_radius_range max must be below image_size / 2")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        return self


# =========================
# PHANTOMS
# =========================


def synth_dataset(spec, with_tumors=True):
    """Generate a deterministic list of phantom volumes.

    Tumor phantoms carry all four modalities and concentric lesion labels.
    Normal phantoms are T1-only and replicated into the four channels, the
    same policy `load_nifti` applies to single-modality scans.
    """
    spec.validate()
    volumes = []
    for index in range(spec.n_subjects):
        # disjoint per-subject streams derived from the master seed
        rng = np.random.default_rng([spec.seed, index, int(with_tumors)])
        volumes.append(_synth_subject(spec, rng, index, with_tumors))
    return volumes


def _smooth_texture(rng, n_slices, size):
    noise = rng.standard_normal((n_slices, size, size)).astype(np.float32)
    sigma = max(size / 16.0, 1.0)
    texture = np.stack([
        cv2.GaussianBlur(s, ksize=(0, 0), sigmaX=sigma, borderType=cv2.BORDER_REFLECT)
        for s in noise
    ])
    return texture / (texture.std() + 1e-8)


def _brain_masks(rng, spec):
    size, n_slices = spec.image_size, spec.n_slices
    centre = (size - 1) / 2.0
    semi_rows = rng.uniform(0.32, 0.42) * size
    semi_cols = rng.uniform(0.28, 0.38) * size
    shift_rows, shift_cols = rng.uniform(-0.04, 0.04, size=2) * size
    centre_xy = (int(round(centre + shift_cols)), int(round(centre + shift_rows)))

    brain = np.zeros((n_slices, size, size), dtype=bool)
    for z in range(n_slices):
        # axial stack: the brain outline narrows towards both ends
        t = 2.0 * (z + 0.5) / n_slices - 1.0
        scale = np.sqrt(max(1.0 - 0.6 * t * t, 0.2))
        axes = (max(int(semi_cols * scale), 2), max(int(semi_rows * scale), 2))
        canvas = np.zeros((size, size), dtype=np.uint8)
        cv2.ellipse(canvas, centre_xy, axes, 0, 0, 360, 1, thickness=-1)
        brain[z] = canvas.astype(bool)
    return brain


def _draw_lesion(label_slice, centre, radius):
    row, col = centre
    canvas = np.zeros_like(label_slice)
    for label, fraction in LESION_RINGS:
        ring_radius = int(round(radius * fraction))
        if ring_radius >= 1 or fraction == 1.0:
            cv2.circle(canvas, (int(col), int(row)), max(ring_radius, 1), label, thickness=-1)
    np.copyto(label_slice, canvas, where=canvas > 0)


def _place_lesions(rng, spec, brain, labels):
    n_slices = spec.n_slices
    n_tumors = int(rng.integers(spec.tumor_count_range[0], spec.tumor_count_range[1] + 1))
    for _ in range(n_tumors):
        radius = int(rng.integers(spec.tumor_radius_range[0], spec.tumor_radius_range[1] + 1))
        z0 = int(rng.integers(0, n_slices))
        half_depth = int(rng.integers(0, max(1, n_slices // 4) + 1))

        # keep the lesion disk inside the brain on its central slice
        kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (2 * radius + 3, 2 * radius + 3))
        inner = cv2.erode(brain[z0].astype(np.uint8), kernel)
        candidates = np.argwhere(inner > 0)
        if len(candidates) == 0:
            candidates = np.argwhere(brain[z0])
            candidates = candidates[[len(candidates) // 2]]
        row, col = candidates[int(rng.integers(0, len(candidates)))]

        for z in range(z0 - half_depth, z0 + half_depth + 1):
            if not 0 <= z < n_slices:
                continue
            dz = abs(z - z0)
            slice_radius = int(round(radius * np.sqrt(1.0 - (dz / (half_depth + 1)) ** 2)))
            if slice_radius < 1:
                continue
            _draw_lesion(labels[z], (row, col), slice_radius)

    labels[~brain] = 0


def _synth_subject(spec, rng, index, with_tumors):
    size, n_slices = spec.image_size, spec.n_slices
    brain = _brain_masks(rng, spec)
    texture = _smooth_texture(rng, n_slices, size)
    labels = np.zeros((n_slices, size, size), dtype=np.uint8)
    if with_tumors:
        _place_lesions(rng, spec, brain, labels)

    channels = MODALITIES if with_tumors else MODALITIES[:1]
    modalities = []
    for c, name in enumerate(channels):
        noise = rng.standard_normal((n_slices, size, size)).astype(np.float32)
        channel = BASE_INTENSITY[name] * (
            1.0 + TEXTURE_STRENGTH * texture + spec.noise_sigma * noise)
        for label, offsets in LESION_OFFSETS.items():
            channel[labels == label] += offsets[c] * (1.0 + 0.05 * rng.standard_normal())
        modalities.append(np.where(brain, np.clip(channel, 1.0, None), 0.0))

    if not with_tumors:
        modalities = modalities * len(MODALITIES)

    prefix = "tumor" if with_tumors else "normal"
    return Volume(
        modalities=np.stack(modalities).astype(np.float32),
        labels=labels,
        voxel_spacing=(1.0, 1.0, 1.0),
        subject_id=f"{prefix}_{index:04d}",
    )


# =========================
# SLICE PLANNING
# =========================


def compute_bbox(volume, slices=None):
    """Minimal (row_min, row_max, col_min, col_max) box around nonzero brain pixels."""
    data = volume.modalities if slices is None else volume.modalities[:, list(slices)]
    brain = np.any(data > 0, axis=(0, 1)) if data.size else np.zeros(volume.shape[1:], bool)
    rows = np.flatnonzero(brain.any(axis=1))
    cols = np.flatnonzero(brain.any(axis=0))
    if rows.size == 0:
        raise EmptyBrainError(f"{volume.subject_id}: no nonzero brain pixels")
    return (int(rows[0]), int(rows[-1]), int(cols[0]), int(cols[-1]))


def filter_blank_slices(volume):
    n_slices = volume.shape[0]
    has_label = volume.labels.reshape(n_slices, -1).any(axis=1)
    kept = [int(i) for i in np.flatnonzero(has_label)]
    bbox = compute_bbox(volume, kept) if kept else None
    return SlicePlan(subject_id=volume.subject_id, kept_slices=kept, bbox=bbox)


def full_plan(volume):
    """Plan for GAN pretraining: every slice with brain content, no label filtering."""
    n_slices = volume.shape[0]
    has_brain = (volume.modalities > 0).any(axis=0).reshape(n_slices, -1).any(axis=1)
    kept = [int(i) for i in np.flatnonzero(has_brain)]
    bbox = compute_bbox(volume, kept) if kept else None
    return SlicePlan(subject_id=volume.subject_id, kept_slices=kept, bbox=bbox)


def to_training_slices(volume, plan):
    if plan.subject_id != volume.subject_id:
        raise ShapeError(
            f"plan for {plan.subject_id} applied to volume {volume.subject_id}")
    n_slices, height, width = volume.shape
    if any(not 0 <= i < n_slices for i in plan.kept_slices):
        raise ShapeError(f"{volume.subject_id}: plan slice index out of range")
    if not plan.kept_slices:
        return []

    r0, r1, c0, c1 = plan.bbox
    if not (0 <= r0 <= r1 < height and 0 <= c0 <= c1 < width):
        raise ShapeError(f"{volume.subject_id}: bbox {plan.bbox} outside {height}x{width}")

    return [
        (volume.modalities[:, i, r0:r1 + 1, c0:c1 + 1].copy(),
         volume.labels[i, r0:r1 + 1, c0:c1 + 1].copy())
        for i in plan.kept_slices
    ]


def fit_to_shape(image, shape):
    """Center-pad with zeros (or center-crop) the last two axes to `shape`."""
    out_h, out_w = shape
    height, width = image.shape[-2:]
    out = np.zeros(image.shape[:-2] + (out_h, out_w), dtype=image.dtype)

    def windows(n, m):
        if n >= m:
            start = (n - m) // 2
            return slice(start, start + m), slice(0, m)
        start = (m - n) // 2
        return slice(0, n), slice(start, start + n)

    src_r, dst_r = windows(height, out_h)
    src_c, dst_c = windows(width, out_w)
    out[..., dst_r, dst_c] = image[..., src_r, src_c]
    return out


def to_tanh_range(images):
    """Min-max each (item, channel) plane to [-1, 1]; constant planes map to -1."""
    images = np.asarray(images, dtype=np.float32)
    lo = images.min(axis=(-2, -1), keepdims=True)
    hi = images.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    scaled = 2.0 * (images - lo) / safe - 1.0
    return np.where(span > 0, scaled, -1.0).astype(np.float32)


_ENCODE_LUT = np.zeros(max(LABEL_VALUES) + 1, dtype=np.uint8)
_ENCODE_LUT[list(LABEL_VALUES)] = np.arange(len(LABEL_VALUES), dtype=np.uint8)
_DECODE_LUT = np.array(LABEL_VALUES, dtype=np.uint8)


def encode_labels(labels):
    """BraTS labels {0,1,2,4} -> class indices {0,1,2,3}."""
    return _ENCODE_LUT[np.asarray(labels)]


def decode_labels(classes):
    return _DECODE_LUT[np.asarray(classes)]


def build_slice_dataset(volumes, slice_size, filter_blank=True):
    """Stack every planned slice of every volume into network-ready arrays.

    Returns (images [N,4,H,W] in [-1,1], classes [N,H,W], owners [N]) where
    owners[i] is the subject id the slice came from.
    """
    images, classes, owners = [], [], []
    for volume in volumes:
        plan = filter_blank_slices(volume) if filter_blank else full_plan(volume)
        for image, label in to_training_slices(volume, plan):
            images.append(fit_to_shape(image, slice_size))
            classes.append(encode_labels(fit_to_shape(label, slice_size)))
            owners.append(volume.subject_id)

    if not images:
        size = tuple(slice_size)
        return (np.zeros((0, len(MODALITIES)) + size, np.float32),
                np.zeros((0,) + size, np.int64), [])
    return (to_tanh_range(np.stack(images)),
            np.stack(classes).astype(np.int64), owners)


def split_subjects(subject_ids, fraction, seed):
    """Seeded subject-level split into (kept, held_out), both in input order."""
    subject_ids = list(subject_ids)
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"split fraction must be in [0, 1), got {fraction}")
    n_held = int(round(fraction * len(subject_ids)))
    if fraction > 0 and len(subject_ids) > 1:
        n_held = min(max(n_held, 1), len(subject_ids) - 1)

    order = np.random.default_rng(seed).permutation(len(subject_ids))
    held = set(order[:n_held].tolist())
    kept = [s for i, s in enumerate(subject_ids) if i not in held]
    held_out = [s for i, s in enumerate(subject_ids) if i in held]
    return kept, held_out


def slice_occupancy(volumes):
    """Nonzero-brain heat map [H, W] and per-slice-index blank-label counts."""
    if not volumes:
        raise VolumeError("no volumes to summarise")
    shape = volumes[0].shape[1:]
    heatmap = np.zeros(shape, dtype=np.int64)
    blank = np.zeros(max(v.shape[0] for v in volumes), dtype=np.int64)
    for volume in volumes:
        if volume.shape[1:] == shape:
            heatmap += (volume.modalities > 0).any(axis=0).sum(axis=0)
        n_slices = volume.shape[0]
        blank[:n_slices] += ~volume.labels.reshape(n_slices, -1).any(axis=1)
    return heatmap, blank


# =========================
# RAW CONTAINER
# =========================


def save_volume(volume, path):
    """Write the raw container: magic, uint32 header length, JSON header, float32 payload."""
    header = {
        "format_version": RAW_FORMAT_VERSION,
        "subject_id": volume.subject_id,
        "voxel_spacing": list(volume.voxel_spacing),
        "modalities": list(MODALITIES),
        "modalities_shape": list(volume.modalities.shape),
        "labels_shape": list(volume.labels.shape),
        "dtype": "<f4",
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(RAW_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(volume.modalities.astype("<f4").tobytes())
        f.write(volume.labels.astype("<f4").tobytes())
    return path


def load_volume(path):
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as e:
        raise IngestionError(f"cannot read {path}: {e}") from e

    if payload[:len(RAW_MAGIC)] != RAW_MAGIC:
        raise IngestionError(f"{path}: not a raw volume container")
    offset = len(RAW_MAGIC)
    try:
        (header_len,) = struct.unpack("<I", payload[offset:offset + 4])
        header = json.loads(payload[offset + 4:offset + 4 + header_len].decode("utf-8"))
        mod_shape = tuple(int(n) for n in header["modalities_shape"])
        lab_shape = tuple(int(n) for n in header["labels_shape"])
    except (struct.error, ValueError, KeyError, TypeError) as e:
        raise IngestionError(f"{path}: malformed header ({e})") from e
    if header.get("format_version") != RAW_FORMAT_VERSION:
        raise IngestionError(f"{path}: unsupported format version {header.get('format_version')}")

    offset += 4 + header_len
    n_mod, n_lab = int(np.prod(mod_shape)), int(np.prod(lab_shape))
    expected = offset + 4 * (n_mod + n_lab)
    if len(payload) != expected:
        raise IngestionError(f"{path}: payload is {len(payload)} bytes, expected {expected}")

    modalities = np.frombuffer(payload, dtype="<f4", count=n_mod, offset=offset).reshape(mod_shape)
    labels = np.frombuffer(payload, dtype="<f4", count=n_lab,
                           offset=offset + 4 * n_mod).reshape(lab_shape)
    try:
        return Volume(
            modalities=modalities.astype(np.float32),
            labels=np.rint(labels).astype(np.int16),
            voxel_spacing=tuple(header["voxel_spacing"]),
            subject_id=header["subject_id"],
        )
    except VolumeError as e:
        raise IngestionError(str(e)) from e


def save_dataset(volumes, out_dir, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for volume in volumes:
        save_volume(volume, out_dir / f"{volume.subject_id}{RAW_SUFFIX}")
    manifest = {
        "subjects": [v.subject_id for v in volumes],
        "digest": dataset_digest(volumes),
    }
    if extra:
        manifest.update(extra)
    with open(out_dir / MANIFEST_FILE, "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def load_dataset(data_dir, prefix=None):
    """Load every raw volume in `data_dir` (manifest order when present)."""
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise IngestionError(f"data directory not found: {data_dir}")
    manifest_path = data_dir / MANIFEST_FILE
    if manifest_path.exists():
        with open(manifest_path) as f:
            subjects = json.load(f).get("subjects", [])
        paths = [data_dir / f"{s}{RAW_SUFFIX}" for s in subjects]
    else:
        paths = sorted(data_dir.glob(f"*{RAW_SUFFIX}"))
    if prefix:
        paths = [p for p in paths if p.name.startswith(prefix)]
    return [load_volume(p) for p in paths]


def dataset_digest(volumes):
    digest = hashlib.sha256()
    for volume in volumes:
        digest.update(volume.subject_id.encode("utf-8"))
        digest.update(np.asarray(volume.voxel_spacing, dtype="<f8").tobytes())
        digest.update(volume.modalities.astype("<f4").tobytes())
        digest.update(volume.labels.astype(np.uint8).tobytes())
    return digest.hexdigest()


# =========================
# NIFTI
# =========================


def _read_nifti_array(path):
    try:
        img = nib.load(str(path))
        data = np.asarray(img.get_fdata(dtype=np.float32))
    except FileNotFoundError as e:
        raise IngestionError(f"file not found: {path}") from e
    except Exception as e:
        raise IngestionError(f"cannot read NIfTI {path}: {e}") from e
    if not np.all(np.isfinite(data)):
        print(f"⚠️  {Path(path).name}: replacing non-finite intensities with 0")
        data = np.nan_to_num(data, nan=0.0, posinf=0.0, neginf=0.0)
    return data, tuple(float(z) for z in img.header.get_zooms()[:3])


def _nifti_labels(label_path, expected_shape):
    if label_path is None:
        return np.zeros(expected_shape, dtype=np.uint8)
    data, _ = _read_nifti_array(label_path)
    if data.ndim != 3:
        raise IngestionError(f"{label_path}: label volume must be 3-D, got {data.shape}")
    labels = np.rint(np.transpose(data, (2, 0, 1))).astype(np.int16)
    if labels.shape != expected_shape:
        raise IngestionError(
            f"{label_path}: labels {labels.shape} do not match modalities {expected_shape}")
    return labels


def _subject_from_path(path):
    name = Path(path).name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            return name[:-len(ext)]
    return Path(path).stem


def load_nifti(path, label_path=None, subject_id=None):
    """Load a NIfTI-1 scan as a Volume.

    A 4-D file must hold exactly four modality channels in [T1, T1ce, T2,
    FLAIR] order along the last axis. A 3-D (or single-channel) file is
    treated as T1-only and replicated into all four channels.
    """
    data, zooms = _read_nifti_array(path)
    if data.ndim == 3:
        data = data[..., None]
    if data.ndim != 4:
        raise IngestionError(f"{path}: expected a 3-D or 4-D image, got {data.shape}")

    n_channels = data.shape[-1]
    if n_channels == 1:
        print(f"⚠️  {Path(path).name}: single modality, replicating into {len(MODALITIES)} channels")
        data = np.repeat(data, len(MODALITIES), axis=-1)
    elif n_channels != len(MODALITIES):
        raise IngestionError(
            f"{path}: expected 1 or {len(MODALITIES)} modality channels, got {n_channels}")

    # nibabel (x, y, z, c) -> (c, z, x, y): slices along the third image axis
    modalities = np.transpose(data, (3, 2, 0, 1))
    labels = _nifti_labels(label_path, modalities.shape[1:])
    try:
        return Volume(
            modalities=modalities,
            labels=labels,
            voxel_spacing=(zooms[2], zooms[0], zooms[1]),
            subject_id=subject_id or _subject_from_path(path),
        )
    except VolumeError as e:
        raise IngestionError(str(e)) from e


def load_subject_dir(directory):
    """Load a BraTS-style subject folder (`*_t1`, `*_t1ce`, `*_t2`, `*_flair`, `*_seg`)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"subject directory not found: {directory}")

    def find(suffix):
        matches = sorted(directory.glob(f"*{suffix}.nii*"))
        return matches[0] if matches else None

    channels, zooms = [], None
    for name in MODALITIES:
        path = find(SUBJECT_FILE_SUFFIXES[name])
        if path is None:
            raise IngestionError(f"{directory}: missing {name} file")
        data, zooms = _read_nifti_array(path)
        if data.ndim != 3:
            raise IngestionError(f"{path}: modality file must be 3-D, got {data.shape}")
        if channels and data.shape != channels[0].shape:
            raise IngestionError(
                f"{directory}: shape mismatch between modalities ({data.shape} vs {channels[0].shape})")
        channels.append(data)

    modalities = np.transpose(np.stack(channels), (0, 3, 1, 2))
    labels = _nifti_labels(find(LABEL_FILE_SUFFIX), modalities.shape[1:])
    try:
        return Volume(
            modalities=modalities,
            labels=labels,
            voxel_spacing=(zooms[2], zooms[0], zooms[1]),
            subject_id=directory.name,
        )
    except VolumeError as e:
        raise IngestionError(str(e)) from e


def save_nifti(volume, path):
    """Export as a 4-D NIfTI (x, y, z, modality) plus a `<stem>_seg` label file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dz, dx, dy = volume.voxel_spacing
    affine = np.diag([dx, dy, dz, 1.0])
    data = np.transpose(volume.modalities, (2, 3, 1, 0))
    nib.save(nib.Nifti1Image(data.astype(np.float32), affine), str(path))

    stem = _subject_from_path(path)
    label_path = path.with_name(f"{stem}{LABEL_FILE_SUFFIX}.nii.gz")
    labels = np.transpose(volume.labels, (1, 2, 0)).astype(np.int16)
    nib.save(nib.Nifti1Image(labels, affine), str(label_path))
    return path, label_path
