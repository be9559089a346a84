"""Structure-based contrastive prompt learning.

Patch features that fall in the same structure region are pulled together,
features from different regions pushed apart, with cosine similarity over
unordered position pairs ``a < b``::

    loss = lambda_alpha * sum_{L_a != L_b} cos(F_a, F_b)
         - lambda_beta  * sum_{L_a == L_b} cos(F_a, F_b)

Only the prompts are optimized (Adam); the encoder stays frozen.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .encoder import PromptSet
from .numerics import Tensor, cosine_matrix, value_and_grad


@dataclass(frozen=True)
class SclConfig:
    lambda_alpha: float = 1.0
    lambda_beta: float = 1.0
    learning_rate: float = 0.0005
    momentum: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 25
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.lambda_alpha < 0 or self.lambda_beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")

    def to_dict(self):
        return asdict(self)


def _pair_masks(labels):
    """Upper-triangular same/different-label masks for flat labels ``(..., n)``."""
    lab = np.asarray(labels)
    n = lab.shape[-1]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    same = (lab[..., :, None] == lab[..., None, :]) & upper
    diff = (lab[..., :, None] != lab[..., None, :]) & upper
    return same.astype(np.float64), diff.astype(np.float64)


def _flat_labels(labels, batched):
    lab = np.asarray(labels)
    if batched:
        return lab.reshape(lab.shape[0], -1)
    return lab.reshape(-1)


def scl_terms(features, labels):
    """Return ``(L_pos, L_neg)`` as Tensors.

    ``features`` is ``(n, C)`` (or ``(B, n, C)``) patch features in grid
    order; ``labels`` the matching label grid (any shape with ``n``
    entries per image).
    """
    feats = features if isinstance(features, Tensor) else Tensor(features)
    batched = feats.ndim == 3
    lab = _flat_labels(labels, batched)
    if lab.shape[-1] != feats.shape[-2] or (batched and lab.shape[0] != feats.shape[0]):
        raise ValueError(
            f"label grid has {lab.shape[-1]} positions, feature map has {feats.shape[-2]}"
        )
    same, diff = _pair_masks(lab)
    sim = cosine_matrix(feats)
    axes = (-2, -1)
    return (sim * same).sum(axis=axes), (sim * diff).sum(axis=axes)


def scl_loss(features, labels, cfg=None):
    """Unnormalized contrastive loss ``lambda_alpha * L_neg - lambda_beta * L_pos``."""
    cfg = cfg or SclConfig()
    pos, neg = scl_terms(features, labels)
    return neg * cfg.lambda_alpha - pos * cfg.lambda_beta


def _pair_count(n):
    return n * (n - 1) / 2


def region_cosine_stats(features, labels):
    """Mean intra-region and inter-region cosine similarity over all images.

    Returns ``(intra, inter)``; either is ``nan`` if no such pairs exist.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 2:
        feats = feats[None]
    lab = _flat_labels(labels, True).reshape(feats.shape[0], -1)
    same, diff = _pair_masks(lab)
    sim = cosine_matrix(feats).data
    n_same, n_diff = same.sum(), diff.sum()
    intra = float((sim * same).sum() / n_same) if n_same else float("nan")
    inter = float((sim * diff).sum() / n_diff) if n_diff else float("nan")
    return intra, inter


def train_prompts(encoder, images, labels, init=None, cfg=None):
    """Optimize prompts with Adam on the pair-normalized contrastive loss.

    Parameters
    ----------
    encoder : Encoder
    images : array (N, H, W[, Cin])
    labels : array (N, grid_h, grid_w)
        Structure labels already reduced to the patch grid.
    init : PromptSet, optional
        Starting prompts (zeros by default).
    cfg : SclConfig, optional

    Returns
    -------
    prompts : PromptSet
    trace : list of float
        Mean per-image loss for each epoch.
    """
    cfg = cfg or SclConfig()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise ValueError("cannot train prompts on an empty training set")
    if len(labels) != len(images):
        raise ValueError("need one label grid per image")
    init = init or PromptSet.zeros(encoder.config)
    n_p = int(np.prod(labels.shape[1:]))
    norm = 1.0 / max(_pair_count(n_p), 1.0)

    p = np.array(init.values)
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    b1, b2 = cfg.momentum, cfg.beta2
    rng = np.random.default_rng(cfg.seed)
    trace = []
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(images))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            batch, batch_labels = images[idx], labels[idx]

            def loss_fn(prompts):
                per_image = scl_loss(encoder.forward(batch, prompts), batch_labels, cfg)
                return per_image.sum() * (norm / len(idx))

            loss, (g,) = value_and_grad(loss_fn, [p])
            step += 1
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1**step)
            v_hat = v / (1 - b2**step)
            p = p - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
            losses.append(loss * len(idx))
        trace.append(float(sum(losses) / len(images)))
    return PromptSet(p, mode=init.mode), trace


def trace_to_json(trace):
    """Loss trace as a JSON array indexed by epoch."""
    return json.dumps([float(x) for x in trace])
