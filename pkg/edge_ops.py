"""Edge refinement of predicted masks and the downsampled edge-attention map.

    expand    5x5 max over each pixel's neighborhood (stride 1, same shape)
    laplacian 4-neighbor stencil  M[i+1,j] + M[i-1,j] + M[i,j+1] + M[i,j-1] - 4 M[i,j]
    attention |laplacian(expand(M))| max-pooled 5x5 with stride 5

Every stage clamps at the image border (replicate padding).
"""

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch.nn.functional as F

from errors import ShapeError

# =========================
# CONFIG
# =========================

EXPAND_SIZE = 5
POOL_STRIDE = 5
DUMP_SCALE = 4


@dataclass
class EdgeMap:
    values: np.ndarray
    source_shape: tuple


def maxpool_expand(mask):
    mask = np.ascontiguousarray(mask, dtype=np.float64)
    kernel = np.ones((EXPAND_SIZE, EXPAND_SIZE), dtype=np.uint8)
    return cv2.dilate(mask, kernel, borderType=cv2.BORDER_REPLICATE)


def laplacian(mask):
    mask = np.asarray(mask, dtype=np.float64)
    p = np.pad(mask, 1, mode="edge")
    return p[2:, 1:-1] + p[:-2, 1:-1] + p[1:-1, 2:] + p[1:-1, :-2] - 4 * p[1:-1, 1:-1]


def pool_stride5(values):
    """Max over non-overlapping 5x5 windows; output is ceil(H/5) x ceil(W/5)."""
    values = np.asarray(values, dtype=np.float64)
    height, width = values.shape
    padded = np.pad(values, ((0, -height % POOL_STRIDE), (0, -width % POOL_STRIDE)), mode="edge")
    rows, cols = padded.shape[0] // POOL_STRIDE, padded.shape[1] // POOL_STRIDE
    return padded.reshape(rows, POOL_STRIDE, cols, POOL_STRIDE).max(axis=(1, 3))


def edge_attention(mask):
    mask = np.asarray(mask, dtype=np.float64)
    values = pool_stride5(np.abs(laplacian(maxpool_expand(mask))))
    return EdgeMap(values=values, source_shape=tuple(mask.shape))


def gate(disc_map, edge):
    """Elementwise product of a discriminator map with an edge map."""
    values = edge.values if isinstance(edge, EdgeMap) else edge
    if tuple(disc_map.shape) != tuple(values.shape):
        raise ShapeError(f"gate shapes differ: {tuple(disc_map.shape)} vs {tuple(values.shape)}")
    return disc_map * values


def edge_attention_batch(masks, differentiable=False):
    """Torch version of `edge_attention` for a batch of masks [B, H, W].

    The result is detached unless `differentiable` is set, so by default the
    map acts as a constant gate on the adversarial loss.
    """
    x = (masks if differentiable else masks.detach()).unsqueeze(1)
    half = EXPAND_SIZE // 2
    x = F.max_pool2d(F.pad(x, (half, half, half, half), mode="replicate"), EXPAND_SIZE, stride=1)
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    lap = (p[..., 2:, 1:-1] + p[..., :-2, 1:-1] + p[..., 1:-1, 2:] + p[..., 1:-1, :-2]
           - 4 * p[..., 1:-1, 1:-1])
    # windows hanging over the border see only in-bounds pixels, same as edge padding
    edge = F.max_pool2d(lap.abs(), POOL_STRIDE, stride=POOL_STRIDE, ceil_mode=True)
    return edge[:, 0]


def dump_edge_maps(masks, out_dir, prefix="edge"):
    """Write each mask's edge-attention map as an upscaled 8-bit PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, mask in enumerate(masks):
        values = edge_attention(mask).values
        peak = values.max()
        image = (values / peak * 255.0 if peak > 0 else values).round().astype(np.uint8)
        image = cv2.resize(image, (image.shape[1] * DUMP_SCALE, image.shape[0] * DUMP_SCALE),
                           interpolation=cv2.INTER_NEAREST)
        path = out_dir / f"{prefix}_{i:03d}.png"
        cv2.imwrite(str(path), image)
        paths.append(path)
    return paths
