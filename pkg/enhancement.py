"""Low-complexity contrast enhancement applied per modality slice.

Five elementwise stages:

    IMG1 = max(I) / log(max(I) + 1) * log(I + 1)
    IMG2 = 1 - exp(-I)
    IMG3 = (IMG1 + IMG2) / (lambda + IMG1 * IMG2)
    IMG4 = erf(lambda * arctan(exp(IMG3)) - 0.5 * IMG3)
    IMG5 = (IMG4 - min(IMG4)) / (max(IMG4) - min(IMG4))

The surrounding prose also mentions a CDF-based normalization; no such step
appears in the equations and none is applied here.
"""

from dataclasses import dataclass

import cv2
import numpy as np
from scipy.special import erf

from errors import ConfigError, DegenerateInputError
from volume_io import MODALITIES, Volume

# =========================
# CONFIG
# =========================

# The published formulation never gives lambda; 1.0 is an arbitrary default.
DEFAULT_LAMBDA = 1.0
DEFAULT_EPSILON_GUARD = 1e-12

POLICIES = ("skip", "fail")

GRID_TILE = 128
GRID_LABEL_HEIGHT = 22


@dataclass
class EnhanceParams:
    lambda_enh: float = DEFAULT_LAMBDA
    epsilon_guard: float = DEFAULT_EPSILON_GUARD
    policy: str = "skip"
    prescale: bool = True

    def validate(self):
        if not self.lambda_enh > 0:
            raise ConfigError(f"lambda_enh must be positive, got {self.lambda_enh}")
        if not self.epsilon_guard > 0:
            raise ConfigError(f"epsilon_guard must be positive, got {self.epsilon_guard}")
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        return self


def _check_input(image):
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DegenerateInputError(f"expected a 2-D image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise DegenerateInputError("image contains non-finite values")
    if image.min() < 0:
        raise DegenerateInputError("image must be non-negative")
    if image.max() <= 0:
        raise DegenerateInputError("all-zero image: log(max + 1) is 0")
    if image.max() == image.min():
        raise DegenerateInputError("constant image")
    return image


def enhancement_stages(image, params):
    """Return every intermediate stage {IMG1..IMG5}, evaluated in float64."""
    params.validate()
    image = _check_input(image)
    lam = float(params.lambda_enh)

    peak = image.max()
    img1 = peak / np.log(peak + 1.0) * np.log(image + 1.0)
    img2 = 1.0 - np.exp(-image)
    img3 = (img1 + img2) / (lam + img1 * img2)
    img4 = erf(lam * np.arctan(np.exp(img3)) - 0.5 * img3)

    span = img4.max() - img4.min()
    if span <= params.epsilon_guard:
        raise DegenerateInputError("enhancement collapsed to a constant image")
    img5 = (img4 - img4.min()) / span
    return {"IMG1": img1, "IMG2": img2, "IMG3": img3, "IMG4": img4, "IMG5": img5}


def enhance(image, params):
    return enhancement_stages(image, params)["IMG5"]


def enhance_volume(volume, params):
    """Enhance every modality slice independently; labels are left untouched.

    With policy "skip", slices that fail the preconditions (blank or
    constant) are copied verbatim; with "fail" the first one raises.
    """
    params.validate()
    out = volume.modalities.copy()
    skipped = 0
    for c in range(out.shape[0]):
        for z in range(out.shape[1]):
            plane = volume.modalities[c, z].astype(np.float64)
            if params.prescale and plane.max() > 0:
                plane = plane / plane.max()
            try:
                out[c, z] = enhance(plane, params).astype(np.float32)
            except DegenerateInputError as e:
                if params.policy == "fail":
                    raise DegenerateInputError(
                        f"{volume.subject_id} {MODALITIES[c]} slice {z}: {e}") from e
                out[c, z] = volume.modalities[c, z]
                skipped += 1

    if skipped:
        print(f"⚠️  {volume.subject_id}: {skipped} degenerate slice(s) copied unchanged")
    return Volume(
        modalities=out,
        labels=volume.labels.copy(),
        voxel_spacing=volume.voxel_spacing,
        subject_id=volume.subject_id,
    )


def _to_tile(plane):
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    scaled = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
    tile = (scaled * 255.0).round().astype(np.uint8)
    tile = cv2.resize(tile, (GRID_TILE, GRID_TILE), interpolation=cv2.INTER_NEAREST)
    return cv2.cvtColor(tile, cv2.COLOR_GRAY2BGR)


def _label_strip(text):
    strip = np.zeros((GRID_LABEL_HEIGHT, GRID_TILE, 3), dtype=np.uint8)
    cv2.putText(strip, text, (4, GRID_LABEL_HEIGHT - 6),
                cv2.FONT_HERSHEY_SIMPLEX, 0.45, (255, 255, 255), 1)
    return strip


def comparison_grid(original, enhanced):
    """Side-by-side grid: originals on top, enhanced below, one column per modality.

    `original` and `enhanced` are [4, H, W] slices; returns a BGR uint8 image.
    """
    columns = []
    for c, name in enumerate(MODALITIES):
        columns.append(cv2.vconcat([
            _label_strip(f"{name} original"),
            _to_tile(original[c]),
            _label_strip(f"{name} enhanced"),
            _to_tile(enhanced[c]),
        ]))
    return cv2.hconcat(columns)


def write_comparison(volume, enhanced_volume, path, slice_index=None):
    if slice_index is None:
        areas = (volume.modalities > 0).any(axis=0).reshape(volume.shape[0], -1).sum(axis=1)
        slice_index = int(np.argmax(areas))
    grid = comparison_grid(volume.modalities[:, slice_index],
                           enhanced_volume.modalities[:, slice_index])
    if not cv2.imwrite(str(path), grid):
        raise OSError(f"could not write {path}")
    return path
