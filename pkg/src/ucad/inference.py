"""Task-agnostic anomaly scoring against a frozen memory."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.special import logsumexp

from .encoder import PatchFeatureMap

DEFAULT_NEIGHBORS = 3
DEFAULT_SIGMA = 4.0
_EXP_LIMIT = 700.0


def _features(x):
    return x.features if isinstance(x, PatchFeatureMap) else np.asarray(x, dtype=np.float64)


def pairwise_l2(a, b):
    """Exact ``|a_i - b_j|`` via explicit differences (no expansion trick).

    Equal rows give exactly 0, and each entry depends only on its two rows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    out = np.empty((a.shape[0], b.shape[0]))
    # chunk rows to bound the (rows, m, C) temporary
    step = max(1, 2_000_000 // max(1, b.shape[0] * b.shape[1]))
    for i in range(0, a.shape[0], step):
        diff = a[i:i + step, None, :] - b[None, :, :]
        out[i:i + step] = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return out


def task_distance(key, test_features):
    """Sum over key rows of the distance to the nearest test patch.

    Uses ``math.fsum`` so the value does not depend on row order.
    """
    d = pairwise_l2(key, test_features)
    return math.fsum(d.min(axis=1).tolist())


def select_task(test_features, memory):
    """Index of the task whose key is closest to the prompt-free test features."""
    entries = list(memory)
    if not entries:
        raise ValueError("memory is empty")
    feats = _features(test_features)
    dists = [task_distance(e.key, feats) for e in entries]
    return int(np.argmin(dists))


def reweight_factor(distances, nearest, b):
    """``1 - exp(s*) / sum_{m in N_b(m*)} exp(|x - m|)`` for one test patch.

    ``distances`` are the test patch's distances to every knowledge row and
    ``nearest`` lists the ``b`` neighbor rows of ``m*`` (including ``m*``).
    """
    s_star = distances[nearest[0]]
    gaps = distances[nearest] - s_star
    if gaps.max() > _EXP_LIMIT:
        ratio = math.exp(-float(logsumexp(gaps)))
    else:
        ratio = 1.0 / float(np.exp(gaps).sum())
    return 1.0 - ratio


def patch_scores(test_features, knowledge, b=DEFAULT_NEIGHBORS, return_details=False):
    """Re-weighted nearest-neighbor score of every test patch.

    ``s* = |x - m*|`` with ``m*`` the nearest knowledge row (smallest index on
    ties); the score is ``s*`` scaled by :func:`reweight_factor` over the ``b``
    knowledge rows nearest to ``m*``.
    """
    feats = _features(test_features)
    bank = np.asarray(knowledge, dtype=np.float64)
    if bank.ndim == 1:
        bank = bank[:, None]
    if feats.ndim == 1:
        feats = feats[:, None]
    if len(bank) == 0:
        raise ValueError("knowledge bank is empty")
    if not 2 <= b <= len(bank):
        raise ValueError(f"b must be in [2, {len(bank)}], got {b}")
    d = pairwise_l2(feats, bank)
    nn = np.argmin(d, axis=1)
    s_star = d[np.arange(len(feats)), nn]

    bank_d = pairwise_l2(bank[np.unique(nn)], bank)
    row_of = {int(j): i for i, j in enumerate(np.unique(nn))}
    factors = np.empty(len(feats))
    for i, j in enumerate(nn):
        dj = bank_d[row_of[int(j)]].copy()
        dj[j] = -1.0  # m* itself always comes first
        neighbors = np.argsort(dj, kind="stable")[:b]
        factors[i] = reweight_factor(d[i], neighbors, b)
    scores = factors * s_star
    if return_details:
        return scores, s_star, factors
    return scores


def image_score(scores):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no patch scores")
    return float(scores.max())


def _bilinear_axis(n_in, n_out):
    # half-pixel-centre sampling, clamped at the edges
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    w = pos - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - w
    m[np.arange(n_out), hi] += w
    return m


def upsample_bilinear(grid, height, width):
    grid = np.asarray(grid, dtype=np.float64)
    return _bilinear_axis(grid.shape[0], height) @ grid @ _bilinear_axis(grid.shape[1], width).T


def gaussian_kernel(sigma):
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(field, sigma):
    """Truncated Gaussian blur renormalized at the borders (constants are preserved)."""
    k = gaussian_kernel(sigma)
    ones = np.ones_like(field)
    num, den = field, ones
    for axis in (0, 1):
        num = ndimage.correlate1d(num, k, axis=axis, mode="constant", cval=0.0)
        den = ndimage.correlate1d(den, k, axis=axis, mode="constant", cval=0.0)
    return num / den


def anomaly_map(scores, grid_shape, image_shape, sigma=DEFAULT_SIGMA):
    """Upsample the patch score grid to the image and smooth it."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    gh, gw = grid_shape
    h, w = image_shape
    scores = np.asarray(scores, dtype=np.float64)
    if gh < 1 or gw < 1 or scores.size != gh * gw or h < gh or w < gw:
        raise ValueError(f"cannot map {scores.size} scores on a {gh}x{gw} grid to {h}x{w}")
    return gaussian_smooth(upsample_bilinear(scores.reshape(gh, gw), h, w), sigma)


@dataclass
class AnomalyResult:
    selected_task: int
    patch_scores: np.ndarray = field(repr=False)
    image_score: float
    coarse_map: np.ndarray = field(repr=False)
    map: np.ndarray = field(repr=False)


def infer(image, encoder, memory, b=DEFAULT_NEIGHBORS, sigma=DEFAULT_SIGMA, task=None):
    """Score one image: pick a task by key distance, re-encode with its prompts, compare to its knowledge.

    ``task`` forces the routing (oracle mode) and skips the key search.
    """
    img = np.asarray(image, dtype=np.float64)
    gh, gw = encoder.grid_shape(img.shape[0], img.shape[1])
    if task is None:
        task = select_task(encoder.encode(img), memory)
    entry = memory[task]
    feats = encoder.encode(img, entry.prompts)
    scores = patch_scores(feats, entry.knowledge, b)
    return AnomalyResult(
        selected_task=int(task),
        patch_scores=scores,
        image_score=image_score(scores),
        coarse_map=scores.reshape(gh, gw),
        map=anomaly_map(scores, (gh, gw), img.shape[:2], sigma),
    )


def write_heatmap(path, smap, extra=None):
    """Write ``smap`` min-max scaled to 8-bit PGM, raw range in ``<path>.json``."""
    path = Path(path)
    lo, hi = float(smap.min()), float(smap.max())
    scaled = np.zeros_like(smap) if hi == lo else (smap - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(path, format="PPM")
    meta = {"min": lo, "max": hi, **(extra or {})}
    path.with_name(path.name + ".json").write_text(json.dumps(meta, indent=2))
    return path
