"""Structure label maps: the stand-in for class-agnostic mask generation.

Label maps partition an image into integer regions ``0..R-1``. They come
either from a generated scene's known decomposition or from quantized
flood fill, and are reduced to the patch grid by majority vote before the
contrastive loss sees them.
"""

from __future__ import annotations

import numpy as np
from PIL import Image
from scipy import ndimage

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


def _relabel_by_first_occurrence(labels):
    _, first, inverse = np.unique(labels.ravel(), return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inverse].reshape(labels.shape).astype(np.int64)


def segment_synthetic(scene):
    """Return the ground-truth region decomposition of a generated scene.

    Labels are renumbered by first raster-scan occurrence so that the same
    scene always yields the same map.
    """
    regions = np.asarray(scene.regions if hasattr(scene, "regions") else scene)
    return _relabel_by_first_occurrence(regions)


def segment_flood(image, quant_levels=4):
    """Quantize intensities into ``quant_levels`` bins and label 4-connected components.

    Labels are ordered by first occurrence in raster scan. Multi-channel
    images are reduced to their channel mean first.
    """
    if quant_levels < 2:
        raise ValueError("quant_levels must be >= 2")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img.mean(axis=-1)
    bins = np.clip(np.floor(img * quant_levels), 0, quant_levels - 1).astype(np.int64)
    out = np.zeros(bins.shape, dtype=np.int64)
    offset = 0
    for level in np.unique(bins):
        comp, n = ndimage.label(bins == level, structure=_FOUR_CONNECTED)
        mask = comp > 0
        out[mask] = comp[mask] + offset
        offset += n
    return _relabel_by_first_occurrence(out)


def downsample_labels(label_map, grid_h, grid_w):
    """Majority label of each pixel block; ties go to the smallest label."""
    labels = np.asarray(label_map)
    h, w = labels.shape
    if grid_h < 1 or grid_w < 1 or h % grid_h or w % grid_w:
        raise ValueError(f"label map {h}x{w} cannot be tiled into a {grid_h}x{grid_w} grid")
    bh, bw = h // grid_h, w // grid_w
    blocks = labels.reshape(grid_h, bh, grid_w, bw).transpose(0, 2, 1, 3).reshape(grid_h, grid_w, -1)
    out = np.empty((grid_h, grid_w), dtype=np.int64)
    for r in range(grid_h):
        for c in range(grid_w):
            # argmax picks the first (smallest) label among equal counts
            out[r, c] = np.argmax(np.bincount(blocks[r, c]))
    return out


def write_label_pgm(path, label_map):
    labels = np.asarray(label_map)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("labels must fit in 8 bits for PGM export")
    Image.fromarray(labels.astype(np.uint8), mode="L").save(path, format="PPM")


def read_label_pgm(path):
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.int64)
